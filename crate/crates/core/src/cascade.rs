//! Two-stage cascade training.
//!
//! 1. Normalize every case and pool the candidate voxels of all cases:
//!    every lesion voxel is a positive, every non-lesion voxel with a
//!    normalized FLAIR intensity at or above the threshold is a negative.
//! 2. Train the first network on all positives and an equal number of
//!    uniformly drawn negatives.
//! 3. Score every candidate negative with the first network and train a
//!    second, freshly initialized network on all positives and an equal
//!    number of the negatives the first network misclassified.
//! 4. Choose the binarization threshold and minimum region size on the
//!    training cases.
//!
//! Every random choice draws from a stream derived from the run seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::engine::{checkpoint, AdadeltaConfig, Network, Tensor};
use crate::engine::loss::per_sample_losses;
use crate::error::{Error, Result};
use crate::inference::{self, ParamGrid, ProbabilityMap, TestParams, CASCADE_GATE};
use crate::patch::{check_patch_size, extract_patch_into, PatchSet, DEFAULT_PATCH};
use crate::seed;
use crate::volume::{Coord, MultiChannelCase, FLAIR};

/// A voxel of one of the pooled training cases.
pub type CaseCoord = (u32, Coord);

// seed streams
const STREAM_F1: u64 = 1;
const STREAM_CNN1: u64 = 2;
const STREAM_F2: u64 = 3;
const STREAM_CNN2: u64 = 4;
const STREAM_SPLIT: u64 = 10;
const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_DROPOUT: u64 = 13;

/// Patches per inference call when evaluating a patch set.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Samples per mini-batch after augmentation.
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Minimum normalized FLAIR intensity of a candidate negative.
    pub flair_threshold: f64,
    pub augmentation: bool,
    pub seed: u64,
    pub adadelta: AdadeltaConfig,
    pub grid: ParamGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: DEFAULT_PATCH,
            max_epochs: 400,
            early_stop_patience: 50,
            batch_size: 128,
            validation_fraction: 0.25,
            flair_threshold: 0.5,
            augmentation: true,
            seed: 0,
            adadelta: AdadeltaConfig::default(),
            grid: ParamGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_patch_size(self.patch_size).map_err(|_| Error::InvalidConfig(format!("patch size {} is not odd", self.patch_size)))?;
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be positive".into()));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.flair_threshold.is_nan() {
            return Err(Error::InvalidConfig("flair_threshold is NaN".into()));
        }
        self.adadelta.validate()?;
        self.grid.validate()
    }

    /// Original (pre-augmentation) samples per mini-batch.
    fn originals_per_batch(&self) -> usize {
        if self.augmentation {
            (self.batch_size / 4).max(1)
        } else {
            self.batch_size
        }
    }
}

/// Positive (lesion) and candidate negative voxels of a normalized case.
pub fn candidate_voxels(case: &MultiChannelCase, flair_threshold: f64) -> Result<(Vec<Coord>, Vec<Coord>)> {
    let flair = case.channel(FLAIR).ok_or_else(|| Error::MissingFlairChannel(case.case_id.clone()))?;
    let mask = case.require_mask()?;
    let dims = case.dims();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (&m, &f)) in mask.data().iter().zip(flair.data()).enumerate() {
        if m != 0 {
            pos.push(dims.coord(i));
        } else if f as f64 >= flair_threshold {
            neg.push(dims.coord(i));
        }
    }
    Ok((pos, neg))
}

/// A class-balanced selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
    /// Negatives missing to reach balance (not enough candidates).
    pub shortfall: usize,
    /// Negatives taken by score rather than by misclassification.
    pub topped_up: usize,
}

impl<T: Clone> Sample<T> {
    /// Positives followed by negatives.
    pub fn items(&self) -> Vec<T> {
        self.positives.iter().chain(&self.negatives).cloned().collect()
    }

    /// Labels matching [`Self::items`].
    pub fn labels(&self) -> Vec<u8> {
        let mut l = vec![1u8; self.positives.len()];
        l.resize(self.positives.len() + self.negatives.len(), 0);
        l
    }

    pub fn is_balanced(&self) -> bool {
        self.positives.len() == self.negatives.len()
    }
}

/// `k` of `items` uniformly without replacement, in their original order.
fn draw<T: Clone>(items: &[T], k: usize, seed: u64) -> Vec<T> {
    let mut rng = seed::rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// All positives plus as many uniformly drawn negatives.
pub fn balanced_sample<T: Clone>(pos: &[T], neg: &[T], seed: u64) -> Result<Sample<T>> {
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    let k = pos.len().min(neg.len());
    let shortfall = pos.len() - k;
    if shortfall > 0 {
        log::warn!("only {} negatives for {} positives; taking all of them", neg.len(), pos.len());
    }
    Ok(Sample { positives: pos.to_vec(), negatives: draw(neg, k, seed), shortfall, topped_up: 0 })
}

/// All positives plus as many negatives drawn uniformly from those scored
/// above 0.5. When too few are misclassified, all of them are taken and the
/// rest is filled with the highest-scoring remaining negatives (lowest index
/// first among equal scores).
pub fn select_hard_negatives<T: Clone>(pos: &[T], neg: &[T], neg_scores: &[f32], seed: u64) -> Result<Sample<T>> {
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    if neg.len() != neg_scores.len() {
        return Err(Error::shape(format!("{} scores for {} negatives", neg_scores.len(), neg.len())));
    }
    let hard: Vec<usize> = (0..neg.len()).filter(|&i| neg_scores[i] > 0.5).collect();
    let want = pos.len();
    let (chosen, topped_up) = if hard.len() >= want {
        (draw(&hard, want, seed), 0)
    } else {
        let mut rest: Vec<usize> = (0..neg.len()).filter(|&i| neg_scores[i] <= 0.5).collect();
        rest.sort_by(|&a, &b| neg_scores[b].total_cmp(&neg_scores[a]).then(a.cmp(&b)));
        let extra = (want - hard.len()).min(rest.len());
        log::warn!(
            "{} misclassified negatives for {} positives; topping up with {extra} highest-scoring negatives",
            hard.len(),
            want
        );
        let mut all = hard;
        all.extend_from_slice(&rest[..extra]);
        (all, extra)
    };
    let shortfall = want - chosen.len();
    if shortfall > 0 {
        log::warn!("only {} negatives for {want} positives", chosen.len());
    }
    Ok(Sample {
        positives: pos.to_vec(),
        negatives: chosen.into_iter().map(|i| neg[i].clone()).collect(),
        shortfall,
        topped_up,
    })
}

fn is_trained(net: &Network<f32>) -> bool {
    net.optimizer_state().iter().any(|s| s.sq_grad.data().iter().any(|&v| v != 0.0))
}

/// Scores the candidate negatives with `cnn1` and selects the hard-negative
/// training set.
pub fn hard_negative_coords(
    cnn1: &Network<f32>,
    cases: &[MultiChannelCase],
    pos: &[CaseCoord],
    neg: &[CaseCoord],
    seed: u64,
) -> Result<Sample<CaseCoord>> {
    if !is_trained(cnn1) {
        return Err(Error::UntrainedNetwork);
    }
    let mut scores = vec![0.0f32; neg.len()];
    for (ci, case) in cases.iter().enumerate() {
        let idx: Vec<usize> = (0..neg.len()).filter(|&i| neg[i].0 as usize == ci).collect();
        if idx.is_empty() {
            continue;
        }
        let coords: Vec<Coord> = idx.iter().map(|&i| neg[i].1).collect();
        for (&i, s) in idx.iter().zip(inference::score_coords(cnn1, case, &coords)?) {
            scores[i] = s;
        }
    }
    select_hard_negatives(pos, neg, &scores, seed)
}

/// Reverses the in-plane axes (x and y) of every `[p, p, p]` block.
pub fn rot180_axial<T: Copy>(patch: &[T], p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(patch.len());
    for block in patch.chunks_exact(p * p * p) {
        for z in 0..p {
            for y in (0..p).rev() {
                let row = &block[(z * p + y) * p..(z * p + y + 1) * p];
                out.extend(row.iter().rev());
            }
        }
    }
    out
}

/// Reverses the x axis of every `[p, p, p]` block.
pub fn hflip<T: Copy>(patch: &[T], p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(patch.len());
    for row in patch.chunks_exact(p) {
        out.extend(row.iter().rev());
    }
    out
}

/// `[B, c, p, p, p]` to `[4B, c, p, p, p]`: the originals, their 180 degree
/// axial rotations, their horizontal flips and the flipped rotations, with
/// labels repeated in the same block order.
pub fn augment_batch<T: crate::engine::Scalar>(x: &Tensor<T>, labels: &[u8]) -> Result<(Tensor<T>, Vec<u8>)> {
    let s = x.shape();
    if s.len() != 5 || s[2] != s[3] || s[3] != s[4] || s[0] != labels.len() {
        return Err(Error::shape(format!("augmentation needs [B, c, p, p, p] and B labels, got {s:?}")));
    }
    let p = s[2];
    let rot = rot180_axial(x.data(), p);
    let flip = hflip(x.data(), p);
    let both = hflip(&rot, p);
    let mut data = Vec::with_capacity(4 * x.len());
    data.extend_from_slice(x.data());
    data.extend(rot);
    data.extend(flip);
    data.extend(both);
    let mut shape = s.to_vec();
    shape[0] *= 4;
    Ok((Tensor::from_vec(&shape, data)?, labels.repeat(4)))
}

/// One training epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Whether this epoch set a new validation-loss minimum.
    pub best: bool,
}

pub const LOG_HEADER: &str = "epoch train_loss val_loss val_acc best";

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.4} {}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.best as u8
        )
    }
}

pub fn log_text(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        let _ = writeln!(out, "{}", e.line());
    }
    out
}

/// Splits sample indices into (train, validation), stratified by label.
/// Each class with at least two samples contributes at least one sample to
/// each side.
pub fn stratified_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut seed::rng(seed::derive(seed, class as u64)));
        let n = idx.len();
        let k = if n >= 2 { ((fraction * n as f64).round() as usize).clamp(1, n - 1) } else { 0 };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn batch_tensor(ps: &PatchSet, idx: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut data = Vec::with_capacity(idx.len() * ps.patch_len());
    for &i in idx {
        data.extend_from_slice(ps.patch(i));
    }
    let [_, c, p, _, _] = ps.shape();
    let labels = idx.iter().map(|&i| ps.labels()[i]).collect();
    Ok((Tensor::from_vec(&[idx.len(), c, p, p, p], data)?, labels))
}

/// Mean cross-entropy and accuracy of `net` (inference mode) on the
/// patches `idx` of `ps`.
pub fn evaluate_patches(net: &Network<f32>, ps: &PatchSet, idx: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = batch_tensor(ps, chunk)?;
        let probs = net.infer(&x)?;
        loss += per_sample_losses(probs.data(), 2, &labels).sum::<f64>();
        correct += probs
            .data()
            .chunks_exact(2)
            .zip(&labels)
            .filter(|(p, &l)| (p[1] > p[0]) == (l == 1))
            .count();
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// A network returned by [`train_network`] with its training record.
#[derive(Clone)]
pub struct TrainedNetwork {
    /// Parameters (and optimizer state) of the lowest-validation-loss epoch.
    pub network: Network<f32>,
    pub log: Vec<EpochLog>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainedNetwork {
    pub fn best(&self) -> &EpochLog {
        self.log.iter().filter(|e| e.best).last().expect("at least one epoch ran")
    }
}

/// Mini-batch index groups for one epoch. Without augmentation a final
/// single-sample batch is merged into its predecessor, since batch
/// normalization needs two samples.
fn epoch_batches(order: &[usize], per_batch: usize, augmented: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(per_batch).map(<[usize]>::to_vec).collect();
    if !augmented && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Trains a fresh 7-layer network on `ps` with early stopping on the
/// validation loss. Training stops after `max_epochs` epochs or once
/// `early_stop_patience` epochs have passed without a new minimum.
pub fn train_network(ps: &PatchSet, cfg: &TrainConfig, seed: u64) -> Result<TrainedNetwork> {
    cfg.validate()?;
    if ps.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let npos = ps.positives();
    if npos == 0 || npos == ps.len() {
        return Err(Error::SingleClassData);
    }
    let (train_idx, val_idx) = stratified_split(ps.labels(), cfg.validation_fraction, seed::derive(seed, STREAM_SPLIT));
    let mut net = Network::standard(ps.channels(), ps.patch_size(), seed::derive(seed, STREAM_INIT))?;
    let mut best_net = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut step = 0u64;
    let shuffle_seed = seed::derive(seed, STREAM_SHUFFLE);
    let dropout_seed = seed::derive(seed, STREAM_DROPOUT);
    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng(seed::derive(shuffle_seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(&order, cfg.originals_per_batch(), cfg.augmentation) {
            let (mut x, mut labels) = batch_tensor(ps, &batch)?;
            if cfg.augmentation {
                (x, labels) = augment_batch(&x, &labels)?;
            }
            let (loss, grads) = net.loss_and_gradients(&x, &labels, seed::derive(dropout_seed, step))?;
            net.apply_adadelta(&grads, &cfg.adadelta)?;
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            step += 1;
        }
        let (val_loss, val_acc) = evaluate_patches(&net, ps, &val_idx)?;
        let best = val_loss < best_loss;
        if best {
            best_loss = val_loss;
            best_epoch = epoch;
            best_net = net.clone();
        }
        let entry = EpochLog { epoch, train_loss: loss_sum / seen as f64, val_loss, val_acc, best };
        log::info!("{}", entry.line());
        log.push(entry);
        if epoch - best_epoch > cfg.early_stop_patience {
            break;
        }
    }
    Ok(TrainedNetwork { network: best_net, log, train_indices: train_idx, val_indices: val_idx })
}

/// Stacks labelled patches for voxels of several cases.
pub fn gather_patchset(cases: &[MultiChannelCase], items: &[CaseCoord], labels: &[u8], p: usize) -> Result<PatchSet> {
    let c = cases.first().map_or(0, |k| k.channels().len());
    let len = c * p * p * p;
    let mut patches = vec![0.0f32; items.len() * len];
    for (out, &(ci, coord)) in patches.chunks_exact_mut(len).zip(items) {
        let case = cases.get(ci as usize).ok_or_else(|| Error::shape(format!("no case {ci}")))?;
        extract_patch_into(case, coord, p, out)?;
    }
    PatchSet::from_parts(
        c,
        p,
        patches,
        labels.to_vec(),
        items.iter().map(|t| t.1).collect(),
        items.iter().map(|t| t.0).collect(),
    )
}

/// Trained cascade: both networks and the test parameters.
#[derive(Clone)]
pub struct CascadeModel {
    pub cnn1: Network<f32>,
    pub cnn2: Network<f32>,
    pub t_bin: f64,
    pub l_min: usize,
    pub channel_order: Vec<String>,
    pub p: usize,
    pub seed: u64,
}

pub const MANIFEST: &str = "cascade.manifest";
pub const CNN1_FILE: &str = "cnn1.cnet";
pub const CNN2_FILE: &str = "cnn2.cnet";
const MANIFEST_FORMAT: &str = "cascade-seg-model 1";

impl CascadeModel {
    pub fn manifest(&self) -> String {
        format!(
            "format = {MANIFEST_FORMAT}\np = {}\nchannels = {}\nt_bin = {}\nl_min = {}\nseed = {}\ncnn1 = {CNN1_FILE}\ncnn2 = {CNN2_FILE}\n",
            self.p,
            self.channel_order.join(","),
            self.t_bin,
            self.l_min,
            self.seed
        )
    }

    /// Writes the manifest and both checkpoints into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(dir.join(CNN1_FILE), &self.cnn1, true)?;
        checkpoint::save(dir.join(CNN2_FILE), &self.cnn2, true)?;
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadCheckpoint(format!("manifest line without '=': {line}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::BadCheckpoint(format!("manifest lacks {k}")));
        let bad = |k: &str| Error::BadCheckpoint(format!("manifest field {k} is malformed"));
        if get("format")? != MANIFEST_FORMAT {
            return Err(Error::BadCheckpoint(format!("unknown manifest format {}", get("format")?)));
        }
        let p: usize = get("p")?.parse().map_err(|_| bad("p"))?;
        let t_bin: f64 = get("t_bin")?.parse().map_err(|_| bad("t_bin"))?;
        let l_min: usize = get("l_min")?.parse().map_err(|_| bad("l_min"))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
        let channel_order: Vec<String> = get("channels")?.split(',').map(|s| s.trim().to_string()).collect();
        if !(t_bin > 0.0 && t_bin < 1.0) {
            return Err(bad("t_bin"));
        }
        let cnn1 = checkpoint::load(dir.join(get("cnn1")?))?;
        let cnn2 = checkpoint::load(dir.join(get("cnn2")?))?;
        let input = [channel_order.len(), p, p, p];
        if cnn1.input_shape() != input || cnn2.input_shape() != input {
            return Err(Error::BadCheckpoint(format!("networks do not take {input:?} patches")));
        }
        Ok(CascadeModel { cnn1, cnn2, t_bin, l_min, channel_order, p, seed })
    }
}

/// Everything [`train_cascade`] produces.
#[derive(Clone)]
pub struct CascadeTraining {
    pub model: CascadeModel,
    pub cnn1: TrainedNetwork,
    pub cnn2: TrainedNetwork,
    pub f1: Sample<CaseCoord>,
    pub f2: Sample<CaseCoord>,
    /// Test parameters for the first network used alone.
    pub single_params: TestParams,
    /// Test parameters of the cascade (also stored in the model).
    pub cascade_params: TestParams,
}

/// Normalizes the cases and orders their channels like the first case.
pub fn prepare_cases(cases: &[MultiChannelCase]) -> Result<(Vec<MultiChannelCase>, Vec<String>)> {
    let first = cases.first().ok_or_else(|| Error::InvalidConfig("no training cases".into()))?;
    let order = first.channel_names();
    let prepared =
        cases.iter().map(|c| c.with_channel_order(&order)?.normalized()).collect::<Result<Vec<_>>>()?;
    Ok((prepared, order))
}

/// Full two-stage training on raw (unnormalized) cases.
pub fn train_cascade(cases: &[MultiChannelCase], cfg: &TrainConfig) -> Result<CascadeTraining> {
    cfg.validate()?;
    for c in cases {
        c.require_mask()?;
    }
    let (cases, channel_order) = prepare_cases(cases)?;
    let p = cfg.patch_size;

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let (cp, cn) = candidate_voxels(case, cfg.flair_threshold)?;
        pos.extend(cp.into_iter().map(|c| (ci as u32, c)));
        neg.extend(cn.into_iter().map(|c| (ci as u32, c)));
    }
    log::info!("{} positive and {} candidate negative voxels in {} cases", pos.len(), neg.len(), cases.len());

    let f1 = balanced_sample(&pos, &neg, seed::derive(cfg.seed, STREAM_F1))?;
    let ps1 = gather_patchset(&cases, &f1.items(), &f1.labels(), p)?;
    log::info!("training first network on {} patches", ps1.len());
    let cnn1 = train_network(&ps1, cfg, seed::derive(cfg.seed, STREAM_CNN1))?;
    drop(ps1);

    // first-stage maps of every case serve both the hard-negative selection
    // and the choice of test parameters
    let first: Vec<ProbabilityMap> = cases
        .iter()
        .map(|c| ProbabilityMap::new(c.dims(), c.voxel_size(), inference::score_volume(&cnn1.network, c)?))
        .collect::<Result<_>>()?;
    let scores: Vec<f32> =
        neg.iter().map(|&(ci, c)| first[ci as usize].data()[cases[ci as usize].dims().index(c)]).collect();
    let f2 = select_hard_negatives(&pos, &neg, &scores, seed::derive(cfg.seed, STREAM_F2))?;
    let ps2 = gather_patchset(&cases, &f2.items(), &f2.labels(), p)?;
    log::info!("training second network on {} patches ({} topped up)", ps2.len(), f2.topped_up);
    let cnn2 = train_network(&ps2, cfg, seed::derive(cfg.seed, STREAM_CNN2))?;
    drop(ps2);

    let mut model = CascadeModel {
        cnn1: cnn1.network.clone(),
        cnn2: cnn2.network.clone(),
        t_bin: 0.5,
        l_min: 0,
        channel_order,
        p,
        seed: cfg.seed,
    };
    let masks: Vec<_> = cases.iter().map(|c| c.require_mask()).collect::<Result<_>>()?;
    let single_refs: Vec<_> = first.iter().zip(&masks).map(|(f, m)| (f, *m)).collect();
    let single_params = inference::optimize_from_maps(&single_refs, &cfg.grid)?;
    let second: Vec<ProbabilityMap> = cases
        .iter()
        .zip(&first)
        .map(|(c, f)| inference::cascade_from_first(&model, c, f))
        .collect::<Result<_>>()?;
    let cascade_refs: Vec<_> = second.iter().zip(&masks).map(|(f, m)| (f, *m)).collect();
    let cascade_params = inference::optimize_from_maps(&cascade_refs, &cfg.grid)?;
    model.t_bin = cascade_params.t_bin;
    model.l_min = cascade_params.l_min;
    log::info!("test parameters t_bin = {}, l_min = {}", model.t_bin, model.l_min);
    debug_assert!(second.iter().zip(&first).all(|(s, f)| s
        .data()
        .iter()
        .zip(f.data())
        .all(|(&y2, &y1)| y2 == 0.0 || y1 >= CASCADE_GATE)));
    Ok(CascadeTraining { model, cnn1, cnn2, f1, f2, single_params, cascade_params })
}
