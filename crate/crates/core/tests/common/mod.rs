//! Helpers shared by the integration tests: finite-difference gradient
//! checking and brute-force oracles for the evaluation metrics.
#![allow(dead_code)]

use cascade_seg::engine::{
    cross_entropy_grad, cross_entropy_loss, BatchNorm, Conv3d, ConvGeometry, Dropout, FullyConnected, MaxPool3d, Network,
    Relu, Softmax, Tensor,
};
use cascade_seg::inference::ProbabilityMap;
use cascade_seg::{BinaryMask, Dims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-3;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Outcome of a gradient check.
#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Components skipped because the perturbation crossed a kink.
    pub skipped: usize,
    /// `(tensor, index, analytic)` of components over the tolerance.
    pub failures: Vec<(usize, usize, f64)>,
}

impl GradCheck {
    pub fn add(&mut self, analytic: f64, plus: f64, minus: f64) {
        let numeric = (plus - minus) / (2.0 * H);
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel < GRAD_TOL
    }
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn perturbed(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

/// Checks every component of `x` for a parameter-free map `f` whose
/// analytic input gradient for the objective `<f(x), r>` is `dx`;
/// `same_branch` rejects perturbations that cross a kink.
pub fn check_input(
    x: &Tensor<f64>,
    dx: &Tensor<f64>,
    objective: impl Fn(&Tensor<f64>) -> f64,
    same_branch: impl Fn(&Tensor<f64>) -> bool,
) -> GradCheck {
    let mut out = GradCheck::default();
    for i in 0..x.len() {
        let (xp, xm) = (perturbed(x, i, H), perturbed(x, i, -H));
        if !same_branch(&xp) || !same_branch(&xm) {
            out.skipped += 1;
            continue;
        }
        out.add(dx.data()[i], objective(&xp), objective(&xm));
    }
    out
}

pub fn check_tensor(analytic: &Tensor<f64>, param: &Tensor<f64>, objective: impl Fn(&Tensor<f64>) -> f64) -> GradCheck {
    let mut out = GradCheck::default();
    for i in 0..param.len() {
        out.add(analytic.data()[i], objective(&perturbed(param, i, H)), objective(&perturbed(param, i, -H)));
    }
    out
}

pub fn conv_gradcheck(geometry: ConvGeometry, spatial: usize, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let k = geometry.size;
    let w = random_tensor(&[geometry.out_channels, geometry.in_channels, k, k, k], &mut r);
    let b = random_tensor(&[geometry.out_channels], &mut r);
    let x = random_tensor(&[2, geometry.in_channels, spatial, spatial, spatial], &mut r);
    let mut conv = Conv3d::new(geometry, w.clone(), b.clone()).unwrap();
    let y = conv.forward_train(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let mut grads = vec![Tensor::zeros(w.shape()), Tensor::zeros(b.shape())];
    let dx = conv.backward(&g, &mut grads, true).unwrap().unwrap();
    let run = |w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>| {
        dot(&Conv3d::new(geometry, w.clone(), b.clone()).unwrap().infer(x).unwrap(), &g)
    };
    let mut out = check_input(&x, &dx, |x| run(&w, &b, x), |_| true);
    out.merge(check_tensor(&grads[0], &w, |w| run(w, &b, &x)));
    out.merge(check_tensor(&grads[1], &b, |b| run(&w, b, &x)));
    out
}

/// Padded stride-1 and unpadded stride-2 convolutions.
pub fn conv_layer_gradcheck() -> GradCheck {
    let padded = ConvGeometry { in_channels: 2, out_channels: 3, size: 3, stride: 1, pad: 1 };
    let strided = ConvGeometry { in_channels: 2, out_channels: 2, size: 2, stride: 2, pad: 0 };
    let mut c = conv_gradcheck(padded, 4, 1);
    c.merge(conv_gradcheck(strided, 5, 1));
    c
}

pub fn fc_gradcheck() -> GradCheck {
    let mut r = rng(2);
    let w = random_tensor(&[4, 7], &mut r);
    let b = random_tensor(&[4], &mut r);
    let x = random_tensor(&[3, 7], &mut r);
    let mut fc = FullyConnected::new(w.clone(), b.clone()).unwrap();
    let y = fc.forward_train(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let mut grads = vec![Tensor::zeros(w.shape()), Tensor::zeros(b.shape())];
    let dx = fc.backward(&g, &mut grads, true).unwrap().unwrap();
    let run = |w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>| {
        dot(&FullyConnected::new(w.clone(), b.clone()).unwrap().infer(x).unwrap(), &g)
    };
    let mut c = check_input(&x, &dx, |x| run(&w, &b, x), |_| true);
    c.merge(check_tensor(&grads[0], &w, |w| run(w, &b, &x)));
    c.merge(check_tensor(&grads[1], &b, |b| run(&w, b, &x)));
    c
}

pub fn batchnorm_gradcheck() -> GradCheck {
    let mut r = rng(3);
    let x = random_tensor(&[4, 3, 2, 2, 2], &mut r);
    let mut bn = BatchNorm::new(3);
    bn.gamma = random_tensor(&[3], &mut r);
    bn.beta = random_tensor(&[3], &mut r);
    let y = bn.clone().forward_train(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let mut grads = vec![Tensor::zeros(&[3]), Tensor::zeros(&[3])];
    let mut trained = bn.clone();
    trained.forward_train(&x).unwrap();
    let dx = trained.backward(&g, &mut grads).unwrap();
    let run = |gamma: &Tensor<f64>, beta: &Tensor<f64>, x: &Tensor<f64>| {
        let mut b = bn.clone();
        b.gamma = gamma.clone();
        b.beta = beta.clone();
        dot(&b.forward_train(x).unwrap(), &g)
    };
    let mut c = check_input(&x, &dx, |x| run(&bn.gamma, &bn.beta, x), |_| true);
    c.merge(check_tensor(&grads[0], &bn.gamma, |t| run(t, &bn.beta, &x)));
    c.merge(check_tensor(&grads[1], &bn.beta, |t| run(&bn.gamma, t, &x)));
    c
}

pub fn maxpool_gradcheck() -> GradCheck {
    let mut r = rng(4);
    let x = random_tensor(&[2, 2, 5, 5, 5], &mut r);
    let mut pool = MaxPool3d::new(2, 2).unwrap();
    let y = pool.forward_train(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let dx = pool.backward(&g).unwrap();
    let (_, argmax) = pool.forward_with_argmax(&x).unwrap();
    let c = check_input(
        &x,
        &dx,
        |x| dot(&pool.infer(x).unwrap(), &g),
        |xp| pool.forward_with_argmax(xp).unwrap().1 == argmax,
    );
    c
}

pub fn relu_gradcheck() -> GradCheck {
    let mut r = rng(5);
    let x = random_tensor(&[3, 10], &mut r);
    let mut relu = Relu::new();
    let y = relu.forward_train(&x);
    let g = random_tensor(y.shape(), &mut r);
    let dx = relu.backward(&g).unwrap();
    let signs = |t: &Tensor<f64>| t.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
    let c = check_input(&x, &dx, |x| dot(&relu.infer(x), &g), |xp| signs(xp) == signs(&x));
    c
}

pub fn softmax_gradcheck() -> GradCheck {
    let mut r = rng(6);
    let x = random_tensor(&[3, 2], &mut r);
    let mut sm = Softmax::new();
    let y = sm.forward_train(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let dx = sm.backward(&g).unwrap();
    let c = check_input(&x, &dx, |x| dot(&sm.infer(x).unwrap(), &g), |_| true);
    c
}

pub fn dropout_gradcheck() -> GradCheck {
    let mut r = rng(7);
    let x = random_tensor(&[3, 10], &mut r);
    let mut d = Dropout::new(0.5).unwrap();
    let y = d.forward_train(&x, 9);
    let g = random_tensor(y.shape(), &mut r);
    let dx = d.backward(&g).unwrap();
    let c = check_input(&x, &dx, |x| dot(&Dropout::new(0.5).unwrap().forward_train(x, 9), &g), |_| true);
    c
}

pub fn cross_entropy_gradcheck() -> GradCheck {
    let probs = Tensor::from_vec(&[3, 2], vec![0.3, 0.7, 0.6, 0.4, 0.2, 0.8]).unwrap();
    let labels = [1u8, 0, 0];
    let dp = cross_entropy_grad(&probs, &labels).unwrap();
    let c = check_input(&probs, &dp, |p| cross_entropy_loss(p, &labels).unwrap(), |_| true);
    c
}


/// Every layer's check, by layer name.
pub fn layer_gradchecks() -> Vec<(&'static str, GradCheck)> {
    vec![
        ("conv", conv_layer_gradcheck()),
        ("fully connected", fc_gradcheck()),
        ("batch norm", batchnorm_gradcheck()),
        ("max pool", maxpool_gradcheck()),
        ("relu", relu_gradcheck()),
        ("softmax", softmax_gradcheck()),
        ("dropout", dropout_gradcheck()),
        ("cross entropy", cross_entropy_gradcheck()),
    ]
}

/// Mean cross-entropy of a train-mode forward pass and the branch
/// signature it took.
fn net_loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[u8], seed: u64) -> (f64, Option<u64>) {
    let mut n = net.clone();
    let probs = n.forward_train(x, seed).unwrap();
    (cross_entropy_loss(&probs, labels).unwrap(), n.branch_signature())
}

/// Checks `per_tensor` random components of every parameter tensor of
/// `net` against central differences of the mean cross-entropy. A
/// component whose perturbation changes a ReLU or max-pool branch is
/// skipped and another one drawn.
pub fn network_gradcheck(net: &Network<f64>, x: &Tensor<f64>, labels: &[u8], per_tensor: usize, seed: u64) -> GradCheck {
    let dropout_seed = seed ^ 0x5eed;
    let mut base = net.clone();
    let (_, grads) = base.loss_and_gradients(x, labels, dropout_seed).unwrap();
    let (_, signature) = net_loss(net, x, labels, dropout_seed);
    let mut rng = rng(seed);
    let mut out = GradCheck::default();
    for (t, grad) in grads.iter().enumerate() {
        let mut done = 0;
        let mut attempts = 0;
        while done < per_tensor.min(grad.len()) && attempts < 20 * per_tensor {
            attempts += 1;
            let i = rng.random_range(0..grad.len());
            let perturbed = |delta: f64| {
                let mut n = net.clone();
                n.parameters_mut()[t].data_mut()[i] += delta;
                net_loss(&n, x, labels, dropout_seed)
            };
            let (plus, sp) = perturbed(H);
            let (minus, sm) = perturbed(-H);
            if sp != signature || sm != signature {
                out.skipped += 1;
                continue;
            }
            out.add(grad.data()[i], plus, minus);
            if rel_err(grad.data()[i], (plus - minus) / (2.0 * H)) >= GRAD_TOL {
                out.failures.push((t, i, grad.data()[i]));
            }
            done += 1;
        }
    }
    out
}

/// Central difference of the mean cross-entropy with respect to parameter
/// component `index` of tensor `tensor`, with step `h`.
pub fn network_difference(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    seed: u64,
    (tensor, index): (usize, usize),
    h: f64,
) -> f64 {
    let dropout_seed = seed ^ 0x5eed;
    let shifted = |delta: f64| {
        let mut n = net.clone();
        n.parameters_mut()[tensor].data_mut()[index] += delta;
        net_loss(&n, x, labels, dropout_seed).0
    };
    (shifted(h) - shifted(-h)) / (2.0 * h)
}

/// Random mask of `dims` made of `blobs` random boxes plus salt noise.
pub fn random_mask(dims: Dims, rng: &mut impl Rng) -> BinaryMask {
    let d = dims.as_array();
    let mut bits = vec![0u8; dims.len()];
    let blobs = rng.random_range(0..8);
    for _ in 0..blobs {
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..d[a]));
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..5));
        for z in lo[2]..(lo[2] + ext[2]).min(d[2]) {
            for y in lo[1]..(lo[1] + ext[1]).min(d[1]) {
                for x in lo[0]..(lo[0] + ext[0]).min(d[0]) {
                    bits[(z * d[1] + y) * d[0] + x] = 1;
                }
            }
        }
    }
    let salt = rng.random_range(0.0..0.02);
    for b in bits.iter_mut() {
        if rng.random_bool(salt) {
            *b = 1;
        }
    }
    BinaryMask::new(dims, [1.0; 3], bits).unwrap()
}

/// Voxel confusion counts `(tp, fp, fn)` by a triple loop.
pub fn oracle_voxel_counts(seg: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let d = seg.dims().as_array();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                match (seg.get([x, y, z]), gt.get([x, y, z])) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fn_)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 26-connected component label (root voxel index) of every foreground
/// voxel, by union-find over all neighbouring pairs.
pub fn oracle_components(mask: &BinaryMask) -> Vec<Option<usize>> {
    let d = mask.dims().as_array();
    let idx = |x: usize, y: usize, z: usize| (z * d[1] + y) * d[0] + x;
    let mut parent: Vec<usize> = (0..mask.dims().len()).collect();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !mask.get([x, y, z]) {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 || nx >= d[0] as i64 || ny >= d[1] as i64 || nz >= d[2] as i64 {
                                continue;
                            }
                            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                            if mask.get([nx, ny, nz]) {
                                let a = find(&mut parent, idx(x, y, z));
                                let b = find(&mut parent, idx(nx, ny, nz));
                                parent[a] = b;
                            }
                        }
                    }
                }
            }
        }
    }
    (0..mask.dims().len()).map(|i| (mask.data()[i] != 0).then(|| find(&mut parent, i))).collect()
}

/// Region counts `(tp_d, fn_d, fp_d, n_gt_regions, n_seg_regions)` under
/// the one-shared-voxel detection rule.
pub fn oracle_region_counts(seg: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize, usize, usize) {
    use std::collections::BTreeMap;
    let sc = oracle_components(seg);
    let gc = oracle_components(gt);
    let mut gt_hit: BTreeMap<usize, bool> = BTreeMap::new();
    let mut seg_hit: BTreeMap<usize, bool> = BTreeMap::new();
    for i in 0..sc.len() {
        if let Some(g) = gc[i] {
            *gt_hit.entry(g).or_default() |= sc[i].is_some();
        }
        if let Some(s) = sc[i] {
            *seg_hit.entry(s).or_default() |= gc[i].is_some();
        }
    }
    let tp = gt_hit.values().filter(|&&h| h).count();
    let fp = seg_hit.values().filter(|&&h| !h).count();
    (tp, gt_hit.len() - tp, fp, gt_hit.len(), seg_hit.len())
}

/// Writes `value` into the box `origin .. origin + size` of `data`.
pub fn fill(dims: Dims, data: &mut [f32], origin: [usize; 3], size: [usize; 3], value: f32) {
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            for x in origin[0]..origin[0] + size[0] {
                data[dims.index([x, y, z])] = value;
            }
        }
    }
}

/// Lesion of 27 voxels at probability `lesion_p`, a 40-voxel false
/// structure at `decoy_p` (too big for the size filter) and a spurious
/// `spur_size`-voxel blob at 0.9 (too bright for the threshold).
pub fn constructed(lesion_p: f32, decoy_p: f32, spur_size: usize) -> (ProbabilityMap, BinaryMask) {
    let dims = Dims::cube(16);
    let mut p = vec![0.0f32; dims.len()];
    fill(dims, &mut p, [2, 2, 2], [3, 3, 3], lesion_p);
    fill(dims, &mut p, [9, 2, 2], [4, 5, 2], decoy_p);
    fill(dims, &mut p, [2, 10, 10], [spur_size, 1, 1], 0.9);
    let mut gt = BinaryMask::zeros(dims, [1.0; 3]).unwrap();
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                gt.set([x, y, z], true);
            }
        }
    }
    (ProbabilityMap::new(dims, [1.0; 3], p).unwrap(), gt)
}
