mod common;

use cascade_seg::metrics::{
    dsc, evaluate, label_components, pearson_r, ppv, region_match, voxel_counts, vd, EvalOptions,
};
use cascade_seg::{BinaryMask, Dims};
use common::{oracle_region_counts, oracle_voxel_counts, random_mask, rng};
use proptest::prelude::*;

#[test]
fn oracle_equivalence_on_random_pairs() {
    let dims = Dims::cube(16);
    let mut r = rng(2024);
    for pair in 0..200 {
        let seg = random_mask(dims, &mut r);
        let gt = random_mask(dims, &mut r);
        let (tp, fp, fn_) = oracle_voxel_counts(&seg, &gt);
        let c = voxel_counts(&seg, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_), "pair {pair}");
        assert_eq!((c.seg_total, c.gt_total), (tp + fp, tp + fn_));

        let (rtp, rfn, rfp, n_gt, n_seg) = oracle_region_counts(&seg, &gt);
        let rc = region_match(&seg, &gt).unwrap();
        assert_eq!((rc.tp, rc.fn_, rc.fp), (rtp, rfn, rfp), "pair {pair}");
        assert_eq!(label_components(&gt).count(), n_gt);
        assert_eq!(label_components(&seg).count(), n_seg);

        if tp + fp + fn_ > 0 {
            let expected = 200.0 * tp as f64 / (fn_ + fp + 2 * tp) as f64;
            assert!((dsc(&c) - expected).abs() < 1e-9);
        }
        if tp + fn_ > 0 {
            let expected = 100.0 * ((tp + fp) as f64 - (tp + fn_) as f64).abs() / (tp + fn_) as f64;
            assert!((vd(c.seg_total, c.gt_total).unwrap() - expected).abs() < 1e-9);
        }
        if tp + fp > 0 {
            assert!((ppv(&c).unwrap() - 100.0 * tp as f64 / (tp + fp) as f64).abs() < 1e-9);
        }
    }
}

fn mask_from(dims: Dims, on: &[[usize; 3]]) -> BinaryMask {
    let mut m = BinaryMask::zeros(dims, [1.0; 3]).unwrap();
    for &c in on {
        m.set(c, true);
    }
    m
}

#[test]
fn one_region_spanning_two_ground_truth_regions() {
    let dims = Dims::cube(8);
    let gt = mask_from(dims, &[[1, 1, 1], [5, 1, 1]]);
    let seg = mask_from(dims, &[[1, 1, 1], [2, 1, 1], [3, 1, 1], [4, 1, 1], [5, 1, 1]]);
    let rc = region_match(&seg, &gt).unwrap();
    assert_eq!((rc.tp, rc.fn_, rc.fp), (2, 0, 0));
}

#[test]
fn diagonal_neighbours_are_connected() {
    let dims = Dims::cube(4);
    let m = mask_from(dims, &[[0, 0, 0], [1, 1, 1], [2, 2, 2], [0, 3, 3]]);
    assert_eq!(label_components(&m).count(), 2);
}

#[test]
fn identical_masks_report_perfect_scores() {
    let dims = Dims::cube(16);
    let m = random_mask(dims, &mut rng(5));
    let r = evaluate("x", &m, &m, EvalOptions::default()).unwrap();
    if m.count() > 0 {
        assert_eq!((r.dsc, r.vd, r.tpr, r.fpr), (100.0, 0.0, 100.0, 0.0));
    }
}

/// Component labels renumbered by order of first appearance.
fn relabelled(m: &BinaryMask) -> Vec<u32> {
    let comps = label_components(m);
    let mut order: Vec<u32> = Vec::new();
    let mut map = std::collections::BTreeMap::new();
    for &l in &comps.labels {
        if l != 0 {
            let next = map.len() as u32 + 1;
            order.push(*map.entry(l).or_insert(next));
        } else {
            order.push(0);
        }
    }
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dsc_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(Dims::cube(10), &mut r);
        let b = random_mask(Dims::cube(10), &mut r);
        let ab = voxel_counts(&a, &b).unwrap();
        let ba = voxel_counts(&b, &a).unwrap();
        prop_assert_eq!(dsc(&ab), dsc(&ba));
    }

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(Dims::cube(10), &mut r);
        let b = random_mask(Dims::cube(10), &mut r);
        prop_assume!(b.count() > 0);
        let rep = evaluate("p", &a, &b, EvalOptions::default()).unwrap();
        for v in [rep.dsc, rep.tpr, rep.fpr, rep.ppv] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!(rep.vd >= 0.0);
        let c = rep.voxels;
        prop_assert!(c.tp <= c.seg_total.min(c.gt_total));
        let rc = rep.regions;
        prop_assert_eq!(rc.tp + rc.fn_, label_components(&b).count());
        prop_assert!(rc.tp + rc.fp >= rc.matched_output);
    }

    #[test]
    fn component_labels_are_canonical(seed in any::<u64>()) {
        // labels come in first-visit order, so renumbering by first
        // appearance is the identity: labelling carries no hidden order
        let m = random_mask(Dims::cube(10), &mut rng(seed));
        let comps = label_components(&m);
        prop_assert_eq!(relabelled(&m), comps.labels.clone());
    }

    #[test]
    fn region_counts_ignore_label_permutation(seed in any::<u64>()) {
        // mirroring both masks along x permutes component labels but not
        // the matching between them
        let mut r = rng(seed);
        let dims = Dims::cube(10);
        let a = random_mask(dims, &mut r);
        let b = random_mask(dims, &mut r);
        let mirror = |m: &BinaryMask| {
            BinaryMask::from_fn(dims, [1.0; 3], |i| {
                let [x, y, z] = dims.coord(i);
                m.get([dims.nx - 1 - x, y, z])
            })
            .unwrap()
        };
        let direct = region_match(&a, &b).unwrap();
        let mirrored = region_match(&mirror(&a), &mirror(&b)).unwrap();
        prop_assert_eq!((direct.tp, direct.fn_, direct.fp), (mirrored.tp, mirrored.fn_, mirrored.fp));
    }

    #[test]
    fn pearson_affine_invariance(
        xs in prop::collection::vec(-100.0f64..100.0, 3..20),
        noise in prop::collection::vec(-50.0f64..50.0, 20),
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 0.5 * x + n).collect();
        let Ok(r) = pearson_r(&xs, &ys) else { return Ok(()) };
        let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let yt: Vec<f64> = ys.iter().map(|y| a * y - b).collect();
        prop_assert!((pearson_r(&xt, &ys).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson_r(&xs, &yt).unwrap() - r).abs() < 1e-12);
    }
}

#[test]
fn pearson_textbook_oracle() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 4.1, 5.9, 8.2, 9.8];
    let mx = x.iter().sum::<f64>() / 5.0;
    let my = y.iter().sum::<f64>() / 5.0;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let expected = sxy / (sxx * syy).sqrt();
    assert!((pearson_r(&x, &y).unwrap() - expected).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| 7.0 - v).collect();
    assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
}
