//! Paired data, L1 loss, SGD with decoupled-name weight decay, and the
//! seeded training loop.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::dct::{center_crop8, crop};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::imageio::load_rgb;
use crate::metrics::{psnr, ssim};
use crate::model::{forward, infer, init_weights, ModelConfig};
use crate::params::{skips_weight_decay, Ctx, Mode, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WD: f64 = 5e-5;
pub const DEFAULT_BATCH: usize = 8;
pub const TRAIN_CROP: usize = 128;

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub stem: String,
    pub low_path: PathBuf,
    pub ref_path: PathBuf,
    pub low: Tensor,
    pub reference: Tensor,
}

impl PairedSample {
    /// A pair that never touched disk; both paths are set to `stem`.
    pub fn in_memory(stem: impl Into<String>, low: Tensor, reference: Tensor) -> Result<Self> {
        low.ensure_same_shape(&reference, "paired sample")?;
        let stem = stem.into();
        Ok(PairedSample {
            low_path: PathBuf::from(&stem),
            ref_path: PathBuf::from(&stem),
            stem,
            low,
            reference,
        })
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Pairs `*.png` files by stem, in lexicographic stem order, centre-cropped
/// to multiples of 8.
pub fn load_pairs(low_dir: &Path, ref_dir: &Path) -> Result<Vec<PairedSample>> {
    let low = png_stems(low_dir)?;
    let refs = png_stems(ref_dir)?;
    if let Some(stem) = low
        .keys()
        .find(|s| !refs.contains_key(*s))
        .or_else(|| refs.keys().find(|s| !low.contains_key(*s)))
    {
        return Err(Error::MissingPair { stem: stem.clone() });
    }
    low.into_iter()
        .map(|(stem, low_path)| {
            let ref_path = refs[&stem].clone();
            let l = center_crop8(&load_rgb(&low_path)?)?;
            let r = center_crop8(&load_rgb(&ref_path)?)?;
            if l.shape() != r.shape() {
                return Err(Error::Dimension(format!(
                    "pair `{stem}`: {:?} vs {:?}",
                    l.shape(),
                    r.shape()
                )));
            }
            Ok(PairedSample {
                stem,
                low_path,
                ref_path,
                low: l,
                reference: r,
            })
        })
        .collect()
}

/// `<root>/low` paired with `<root>/high`.
pub fn load_dataset(root: &Path) -> Result<Vec<PairedSample>> {
    load_pairs(&root.join("low"), &root.join("high"))
}

pub fn loss_l1(graph: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    graph.l1_loss(pred, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub lr: f64,
    pub wd: f64,
}

impl TrainState {
    /// Fresh weights seeded from `config.seed`, default hyperparameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_weights(&config, config.seed)?;
        Ok(TrainState {
            params,
            seed: config.seed,
            config,
            step: 0,
            epoch: 0,
            lr: DEFAULT_LR,
            wd: DEFAULT_WD,
        })
    }
}

/// `w <- w - lr * (g + wd * w)`, without decay on norm affines and the
/// curvature kernel.
pub fn sgd_step(state: &mut TrainState, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    let names = state.params.trainable_names();
    let missing: Vec<&String> = names.iter().filter(|n| !grads.contains_key(*n)).collect();
    let unexpected: Vec<&String> = grads.keys().filter(|n| !names.contains(*n)).collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::Optimizer(format!(
            "gradient names do not match parameters: missing {missing:?}, unexpected {unexpected:?}"
        )));
    }
    for (name, w) in state.params.trainable() {
        if grads[name].shape() != w.shape() {
            return Err(Error::Optimizer(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                grads[name].shape(),
                w.shape()
            )));
        }
    }
    let (lr, wd) = (state.lr, state.wd);
    for (name, w) in state.params.trainable_mut() {
        let decay = if skips_weight_decay(name) { 0.0 } else { wd };
        for (w, g) in w.data_mut().iter_mut().zip(grads[name].data()) {
            *w -= lr * (g + decay * *w);
        }
    }
    state.step += 1;
    Ok(())
}

pub struct SampleGrad {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Loss and parameter gradients for one pair in training mode.
pub fn sample_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    low: &Tensor,
    reference: &Tensor,
) -> Result<SampleGrad> {
    let mut ctx = Ctx::new(params, Mode::Train, true);
    let x = ctx.graph.constant(low.clone());
    let y = forward(&mut ctx, x, config)?;
    let loss = loss_l1(&mut ctx.graph, y, reference)?;
    let value = ctx.graph.value(loss).data()[0];
    let grads = ctx.graph.backward(loss)?;
    Ok(SampleGrad {
        loss: value,
        grads: ctx.param_grads(&grads),
        bn_stats: std::mem::take(&mut ctx.bn_stats),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Train until this many epochs are complete.
    pub epochs: u64,
    pub batch_size: usize,
    pub crop: usize,
    /// Write a checkpoint after every `n`-th epoch; 0 disables.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: DEFAULT_BATCH,
            crop: TRAIN_CROP,
            checkpoint_every: 0,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub loss: f64,
    pub seconds: f64,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn random_crop(s: &PairedSample, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = s.low.hwc()?;
    let (ch, cw) = (size.min(h), size.min(w));
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    Ok((
        crop(&s.low, top, left, ch, cw, c)?,
        crop(&s.reference, top, left, ch, cw, c)?,
    ))
}

fn append_log(path: &Path, row: &EpochLog) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,loss,seconds\n");
    }
    text.push_str(&format!(
        "{},{:.16e},{:.16e}\n",
        row.epoch, row.loss, row.seconds
    ));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs one epoch: seeded shuffle, random crops, batch-averaged gradients,
/// one SGD step per batch, then running-statistic updates in sample order.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[PairedSample],
    opts: &TrainOptions,
) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 || opts.crop == 0 {
        return Err(Error::Config("batch size and crop must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = epoch_rng(state.seed, state.epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for batch in order.chunks(opts.batch_size) {
        let mut sum: Option<BTreeMap<String, Tensor>> = None;
        let mut stats = Vec::new();
        for &i in batch {
            let (low, reference) = random_crop(&data[i], opts.crop, &mut rng)?;
            let g = sample_gradients(&state.params, &state.config, &low, &reference)?;
            total += g.loss;
            stats.extend(g.bn_stats);
            match &mut sum {
                None => sum = Some(g.grads),
                Some(acc) => {
                    for (name, t) in acc.iter_mut() {
                        for (a, b) in t.data_mut().iter_mut().zip(g.grads[name].data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut mean = sum.expect("batch is non-empty");
        mean.values_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= n));
        sgd_step(state, &mean)?;
        for (prefix, s) in &stats {
            state.params.update_running_stats(prefix, s)?;
        }
    }
    state.epoch += 1;
    Ok(EpochLog {
        epoch: state.epoch,
        loss: total / data.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains until `opts.epochs` epochs are complete, logging and
/// checkpointing as configured.
pub fn train_loop(
    state: &mut TrainState,
    data: &[PairedSample],
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut logs = Vec::new();
    while state.epoch < opts.epochs {
        let row = train_epoch(state, data, opts)?;
        if let Some(path) = &opts.log_path {
            append_log(path, &row)?;
        }
        if opts.checkpoint_every > 0 && state.epoch.is_multiple_of(opts.checkpoint_every) {
            if let Some(path) = &opts.checkpoint_path {
                save_checkpoint(state, path)?;
            }
        }
        logs.push(row);
    }
    Ok(logs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

fn mean_scores(pairs: impl Iterator<Item = Result<(Tensor, Tensor)>>) -> Result<Scores> {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for pair in pairs {
        let (a, b) = pair?;
        p += psnr(&a, &b, 1.0)?;
        s += ssim(&a, &b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no pairs to evaluate".into()));
    }
    Ok(Scores {
        psnr: p / n as f64,
        ssim: s / n as f64,
    })
}

/// Mean PSNR/SSIM of clamped model outputs against references.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    data: &[PairedSample],
) -> Result<Scores> {
    mean_scores(data.iter().map(|s| {
        let out = infer(params, config, &s.low)?.clamp01();
        Ok((out, s.reference.clone()))
    }))
}

/// Mean PSNR/SSIM of the raw low-light inputs against references.
pub fn input_scores(data: &[PairedSample]) -> Result<Scores> {
    mean_scores(
        data.iter()
            .map(|s| Ok((s.low.clone(), s.reference.clone()))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(w: f64, lr: f64, wd: f64) -> TrainState {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::scalar(w));
        TrainState {
            params,
            config: ModelConfig::default(),
            step: 0,
            epoch: 0,
            seed: 0,
            lr,
            wd,
        }
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn decay_only_step() {
        let mut s = scalar_state(1.0, 1e-4, 5e-5);
        sgd_step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.params.get("w").unwrap().data()[0], 1.0 - 1e-4 * 5e-5);
        assert!((s.params.get("w").unwrap().data()[0] - 0.999999995).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = scalar_state(0.37, 1e-4, 0.0);
        sgd_step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.params.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn quadratic_converges() {
        let mut s = scalar_state(0.0, 0.1, 0.0);
        for _ in 0..100 {
            let w = s.params.get("w").unwrap().data()[0];
            sgd_step(&mut s, &grads(2.0 * (w - 3.0))).unwrap();
        }
        let w = s.params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-6);
    }

    #[test]
    fn norm_affines_skip_decay() {
        let mut s = scalar_state(1.0, 0.1, 0.5);
        s.params.insert("ln.gamma", Tensor::scalar(1.0));
        let mut g = grads(0.0);
        g.insert("ln.gamma".into(), Tensor::scalar(0.0));
        sgd_step(&mut s, &g).unwrap();
        assert_eq!(s.params.get("ln.gamma").unwrap().data()[0], 1.0);
        assert!(s.params.get("w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn name_mismatch_is_an_optimizer_error() {
        let mut s = scalar_state(1.0, 0.1, 0.0);
        let g = BTreeMap::from([("v".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(sgd_step(&mut s, &g), Err(Error::Optimizer(_))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn l1_loss_values() {
        let t = Tensor::full(&[2, 2, 3], 0.5);
        let mut g = Graph::new();
        let p = g.constant(t.clone());
        let l = loss_l1(&mut g, p, &t).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let q = g.constant(t.map(|v| v + 0.1));
        let l = loss_l1(&mut g, q, &t).unwrap();
        assert!((g.value(l).data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut s =
            TrainState::new(ModelConfig::default().with_variant(crate::Variant::Baseline)).unwrap();
        let r = train_loop(&mut s, &[], &TrainOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
