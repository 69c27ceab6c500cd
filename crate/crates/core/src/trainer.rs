//! Joint optimization of the reflection and target networks.
//!
//! Each iteration evaluates the multi-step loss on one (augmented) sample and
//! takes one Adam step on both networks. The learning rate follows a cosine
//! schedule set at every epoch boundary, the step count `M` is upgraded once
//! validation settles, and every random draw is derived from
//! `(seed, epoch, iteration)` so a resumed run replays exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use derefl_autograd::{Adam, AdamConfig, Archive, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{AugmentWindow, DatasetManifest};
use crate::depthrange::{AuxMode, AuxSettings, DepthBackend, DEFAULT_K};
use crate::error::{Error, Result};
use crate::evalbench::{psnr, ssim};
use crate::imagecore::GrayMap;
use crate::losses::{multi_step_loss, FeatureExtractor, LossConfig, LossMode, LossWeights, ReflectionSteps};
use crate::networks::{mix_seed, model_forward, ModelBundle, RemovalModel, CHECKPOINT_MAGIC};

pub const LOG_FILE: &str = "train.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// `lr0 · (1 + cos(π·epoch/total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::InvalidEpoch { epoch, total: total_epochs });
    }
    Ok(lr0 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpgradeMode {
    Plateau,
    FixedEpoch,
}

impl std::str::FromStr for UpgradeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plateau" => Ok(Self::Plateau),
            "fixed_epoch" | "fixed-epoch" => Ok(Self::FixedEpoch),
            other => Err(Error::BadConfig(format!("upgrade mode must be plateau|fixed_epoch, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpgradePolicy {
    pub mode: UpgradeMode,
    /// Validations the best PSNR must improve over (plateau mode).
    pub patience: usize,
    /// Minimum improvement in dB (plateau mode).
    pub min_delta: f64,
    /// First epoch run with the upgraded M (fixed-epoch mode).
    pub epoch: usize,
}

impl Default for UpgradePolicy {
    fn default() -> Self {
        Self { mode: UpgradeMode::Plateau, patience: 5, min_delta: 0.05, epoch: 50 }
    }
}

/// One validation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Whether to switch to the upgraded `M` before running `epoch`.
///
/// Plateau: the best PSNR over all records exceeds the best PSNR seen before
/// the last `patience` records by less than `min_delta`. Needs more than
/// `patience` records. Fixed epoch: `epoch >= policy.epoch`.
pub fn should_upgrade_steps(history: &[ValRecord], epoch: usize, policy: &UpgradePolicy) -> bool {
    match policy.mode {
        UpgradeMode::FixedEpoch => epoch >= policy.epoch,
        UpgradeMode::Plateau => {
            if history.len() <= policy.patience {
                return false;
            }
            let best = |h: &[ValRecord]| h.iter().map(|r| r.psnr).fold(f64::NEG_INFINITY, f64::max);
            let cut = history.len() - policy.patience;
            best(history) - best(&history[..cut]) < policy.min_delta
        }
    }
}

/// How each step's loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// Feed predictions back for `M` steps.
    Recursive,
    /// One forward pass, loss multiplied by `M`.
    Scaled,
}

impl std::str::FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(Self::Recursive),
            "scaled" => Ok(Self::Scaled),
            other => Err(Error::BadConfig(format!("unknown step mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub initial_m: usize,
    pub upgraded_m: usize,
    pub step_mode: StepMode,
    pub upgrade: UpgradePolicy,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub reflection_loss_steps: ReflectionSteps,
    pub k: usize,
    pub aux_mode: AuxMode,
    /// Square training crop; `None` trains on full images.
    pub crop: Option<usize>,
    pub hflip_prob: f32,
    /// Cap on samples per epoch; `None` uses the whole manifest.
    pub iters_per_epoch: Option<usize>,
    /// Return after this many epochs in this call (the run can be resumed).
    pub stop_after_epochs: Option<usize>,
    /// Where the log and checkpoints go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-4,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            initial_m: 2,
            upgraded_m: 3,
            step_mode: StepMode::Recursive,
            upgrade: UpgradePolicy::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            reflection_loss_steps: ReflectionSteps::All,
            k: DEFAULT_K,
            aux_mode: AuxMode::Ranged,
            crop: None,
            hflip_prob: 0.0,
            iters_per_epoch: None,
            stop_after_epochs: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_m == 0 {
            return Err(Error::InvalidM(0));
        }
        if self.initial_m > self.upgraded_m {
            return Err(Error::BadConfig(format!(
                "initial_m {} exceeds upgraded_m {}",
                self.initial_m, self.upgraded_m
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::BadConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidK(self.k));
        }
        if self.upgrade.mode == UpgradeMode::Plateau && self.upgrade.patience == 0 {
            return Err(Error::BadConfig("plateau patience must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::BadConfig(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }

    fn loss_mode(&self, m: usize) -> LossMode {
        match self.step_mode {
            StepMode::Recursive => LossMode::MultiStep(m),
            StepMode::Scaled => LossMode::ScaledSingle(m),
        }
    }

    fn aux(&self) -> AuxSettings {
        AuxSettings { k: self.k, mode: self.aux_mode }
    }
}

/// Progress that survives a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_iter: u64,
    pub current_m: usize,
    pub lr: f64,
    pub best_val_psnr: Option<f64>,
    pub val_history: Vec<ValRecord>,
    /// All per-iteration randomness is derived from this and the position.
    pub seed: u64,
    pub rcnn_adam_steps: u64,
    pub tcnn_adam_steps: u64,
}

impl TrainState {
    fn fresh(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            global_iter: 0,
            current_m: config.initial_m,
            lr: config.lr0,
            best_val_psnr: None,
            val_history: Vec::new(),
            seed: config.seed,
            rcnn_adam_steps: 0,
            tcnn_adam_steps: 0,
        }
    }
}

/// Data and fixed components a training run reads from.
pub struct TrainContext<'a> {
    pub train: &'a DatasetManifest,
    pub val: &'a DatasetManifest,
    pub depth: &'a dyn DepthBackend,
    pub extractor: &'a FeatureExtractor,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Every JSON line emitted by this call.
    pub log: Vec<String>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Mean PSNR and SSIM of single-pass predictions over `manifest`.
pub fn validate(
    model: &dyn RemovalModel,
    aux: AuxSettings,
    manifest: &DatasetManifest,
    depth: &dyn DepthBackend,
) -> Result<(f64, f64)> {
    validate_cached(model, aux, manifest, depth, &mut HashMap::new())
}

fn validate_cached(
    model: &dyn RemovalModel,
    aux: AuxSettings,
    manifest: &DatasetManifest,
    depth: &dyn DepthBackend,
    cache: &mut HashMap<String, GrayMap>,
) -> Result<(f64, f64)> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("validation manifest".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for i in manifest.order(0, false) {
        let sample = manifest.load_entry(i)?;
        let channel = cached_aux(cache, aux, &sample.id, &sample.ambient, depth)?;
        let (_, t_hat) = model_forward(model, &sample.ambient, &channel)?;
        p += psnr(&t_hat, &sample.transmission)?;
        s += ssim(&t_hat, &sample.transmission)?;
    }
    let n = manifest.len() as f64;
    Ok((p / n, s / n))
}

fn cached_aux(
    cache: &mut HashMap<String, GrayMap>,
    aux: AuxSettings,
    id: &str,
    img: &crate::imagecore::ImageRGB,
    depth: &dyn DepthBackend,
) -> Result<GrayMap> {
    if let Some(m) = cache.get(id) {
        if m.shape() == img.shape() {
            return Ok(m.clone());
        }
    }
    let m = aux.compute(id, img, depth)?;
    cache.insert(id.to_string(), m.clone());
    Ok(m)
}

struct Optimizers {
    rcnn: Adam,
    tcnn: Adam,
}

impl Optimizers {
    fn new(config: &TrainConfig, bundle: &ModelBundle) -> Self {
        let cfg = AdamConfig {
            lr: config.lr0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        };
        Self { rcnn: Adam::new(cfg, bundle.rcnn.params()), tcnn: Adam::new(cfg, bundle.tcnn.params()) }
    }

    fn set_lr(&mut self, lr: f64) {
        self.rcnn.set_lr(lr);
        self.tcnn.set_lr(lr);
    }
}

/// Model weights, optimizer moments and [`TrainState`] in one archive.
pub fn save_training_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    opt_rcnn: &Adam,
    opt_tcnn: &Adam,
    state: &TrainState,
) -> Result<()> {
    let mut archive = bundle.to_archive();
    let (rs, rm) = opt_rcnn.export(bundle.rcnn.params(), "adam_rcnn");
    let (ts, tm) = opt_tcnn.export(bundle.tcnn.params(), "adam_tcnn");
    archive.tensors.extend(rm);
    archive.tensors.extend(tm);
    let mut st = state.clone();
    st.rcnn_adam_steps = rs;
    st.tcnn_adam_steps = ts;
    archive.meta["train_state"] = serde_json::to_value(&st)?;
    Ok(archive.write(path, CHECKPOINT_MAGIC)?)
}

/// Counterpart of [`save_training_checkpoint`].
pub fn load_training_checkpoint(path: &Path) -> Result<(ModelBundle, TrainState, Archive)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let archive = Archive::read(path, CHECKPOINT_MAGIC)?;
    let bundle = ModelBundle::from_archive(&archive)?;
    let state: TrainState = serde_json::from_value(
        archive
            .meta
            .get("train_state")
            .cloned()
            .ok_or_else(|| Error::BadConfig(format!("{} is not a training checkpoint", path.display())))?,
    )?;
    Ok((bundle, state, archive))
}

struct LogSink {
    lines: Vec<String>,
    file: Option<std::fs::File>,
}

impl LogSink {
    fn emit(&mut self, line: String) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }
}

fn add_grads(acc: &mut Option<Vec<Vec<f32>>>, grads: Vec<Vec<f32>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                x.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
        }
    }
}

fn apply(opt: &mut Adam, store: &ParamStore, acc: Option<Vec<Vec<f32>>>, count: usize) -> Result<()> {
    if let Some(mut g) = acc {
        if count > 1 {
            let s = 1.0 / count as f32;
            g.iter_mut().flatten().for_each(|v| *v *= s);
        }
        opt.step(store, &g)?;
    }
    Ok(())
}

/// Train `bundle` in place. With `resume`, weights, optimizer moments and
/// progress are restored from a checkpoint written by an earlier call.
pub fn train(
    bundle: &mut ModelBundle,
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if ctx.train.is_empty() {
        return Err(Error::EmptyDataset("training manifest".into()));
    }
    if ctx.val.is_empty() {
        return Err(Error::EmptyDataset("validation manifest".into()));
    }
    bundle.k = config.k;
    bundle.meta.aux_mode = config.aux_mode;

    let mut opt = Optimizers::new(config, bundle);
    let mut state = match resume {
        Some(path) => {
            let (restored, state, archive) = load_training_checkpoint(path)?;
            *bundle = restored;
            opt.rcnn.import(bundle.rcnn.params(), "adam_rcnn", state.rcnn_adam_steps, &archive.tensors)?;
            opt.tcnn.import(bundle.tcnn.params(), "adam_tcnn", state.tcnn_adam_steps, &archive.tensors)?;
            state
        }
        None => TrainState::fresh(config),
    };

    let (log_path, best_path, last_path) = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            (Some(dir.join(LOG_FILE)), Some(dir.join(BEST_CHECKPOINT)), Some(dir.join(LAST_CHECKPOINT)))
        }
        None => (None, None, None),
    };
    let file = match &log_path {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut sink = LogSink { lines: Vec::new(), file };
    sink.emit(serde_json::json!({ "config": config, "resumed_at_epoch": resume.map(|_| state.epoch) }).to_string())?;

    let loss_cfg = LossConfig { weights: config.loss_weights, reflection_steps: config.reflection_loss_steps };
    let aux = config.aux();
    let mut train_cache: HashMap<String, GrayMap> = HashMap::new();
    let mut val_cache: HashMap<String, GrayMap> = HashMap::new();
    let per_epoch = config.iters_per_epoch.unwrap_or(ctx.train.len()).max(1);
    let mut epochs_run = 0;

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        if state.current_m < config.upgraded_m && should_upgrade_steps(&state.val_history, epoch, &config.upgrade) {
            log::info!("epoch {epoch}: upgrading M {} -> {}", state.current_m, config.upgraded_m);
            state.current_m = config.upgraded_m;
        }
        state.lr = cosine_lr(epoch, config.epochs, config.lr0)?;
        opt.set_lr(state.lr);
        bundle.meta.steps = state.current_m;

        let order = ctx.train.order(mix_seed(state.seed, epoch as u64, 0x5EED), true);
        let mut acc_r: Option<Vec<Vec<f32>>> = None;
        let mut acc_t: Option<Vec<Vec<f32>>> = None;
        let mut pending = 0;
        for it in 0..per_epoch {
            let index = order[it % order.len()];
            let id = ctx.train.entries[index].id.clone();
            let data_err = |e: Error| Error::DataError { id: id.clone(), reason: e.to_string() };
            let sample = ctx.train.load_entry(index).map_err(data_err)?;
            let full_aux = cached_aux(&mut train_cache, aux, &sample.id, &sample.ambient, ctx.depth).map_err(data_err)?;
            let (sample, channel) = match config.crop {
                Some(crop) => {
                    let (h, w) = sample.ambient.shape();
                    let seed = mix_seed(state.seed, epoch as u64, 1 + it as u64);
                    let win = AugmentWindow::sample(h, w, seed, crop, config.hflip_prob).map_err(data_err)?;
                    (crate::datasets::augment_with(&sample, &win)?, win.apply_map(&full_aux)?)
                }
                None => (sample, full_aux),
            };
            let reflection: Option<Tensor> = sample.reflection.as_ref().map(|r| r.to_tensor());
            let out = multi_step_loss(
                bundle,
                &sample.ambient.to_tensor(),
                &channel.to_tensor(),
                &sample.transmission.to_tensor(),
                reflection.as_ref(),
                config.loss_mode(state.current_m),
                ctx.extractor,
                &loss_cfg,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss(detail) => Error::NonFiniteLoss(format!(
                    "epoch {epoch}, iteration {}, sample {}: {detail}",
                    state.global_iter, sample.id
                )),
                other => other,
            })?;
            let grads = out.total.backward()?;
            add_grads(&mut acc_r, bundle.rcnn.params().collect_grads(&grads));
            add_grads(&mut acc_t, bundle.tcnn.params().collect_grads(&grads));
            pending += 1;
            if pending == config.batch_size || it + 1 == per_epoch {
                apply(&mut opt.rcnn, bundle.rcnn.params(), acc_r.take(), pending)?;
                apply(&mut opt.tcnn, bundle.tcnn.params(), acc_t.take(), pending)?;
                pending = 0;
            }
            sink.emit(out.breakdown.json_line(state.global_iter, state.lr))?;
            state.global_iter += 1;
        }

        let (vp, vs) = validate_cached(bundle, aux, ctx.val, ctx.depth, &mut val_cache)?;
        state.val_history.push(ValRecord { epoch, psnr: vp, ssim: vs });
        state.epoch = epoch + 1;
        bundle.meta.epoch = state.epoch;
        let improved = state.best_val_psnr.is_none_or(|b| vp > b);
        if improved {
            state.best_val_psnr = Some(vp);
        }
        sink.emit(
            serde_json::json!({
                "epoch": epoch, "M": state.current_m, "lr": state.lr,
                "val_psnr": vp, "val_ssim": vs, "best": improved,
            })
            .to_string(),
        )?;
        log::info!("epoch {epoch}: val PSNR {vp:.3} dB, SSIM {vs:.4}, M={}", state.current_m);
        if improved {
            if let Some(p) = &best_path {
                bundle.save(p)?;
            }
        }
        if let Some(p) = &last_path {
            save_training_checkpoint(p, bundle, &opt.rcnn, &opt.tcnn, &state)?;
        }
        epochs_run += 1;
        if config.stop_after_epochs == Some(epochs_run) {
            break;
        }
    }
    state.rcnn_adam_steps = opt.rcnn.steps_taken();
    state.tcnn_adam_steps = opt.tcnn.steps_taken();
    Ok(TrainOutcome {
        state,
        log: sink.lines,
        best_checkpoint: best_path.filter(|p| p.is_file()),
        last_checkpoint: last_path.filter(|p| p.is_file()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(v: &[f64]) -> Vec<ValRecord> {
        v.iter().enumerate().map(|(epoch, &psnr)| ValRecord { epoch, psnr, ssim: 0.5 }).collect()
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() <= 1e-12);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() <= 1e-20);
        assert!(matches!(cosine_lr(101, 100, 1e-4), Err(Error::InvalidEpoch { epoch: 101, total: 100 })));
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = cosine_lr(e, 100, 1e-4).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn plateau_examples() {
        let p = UpgradePolicy::default();
        assert!(!should_upgrade_steps(&hist(&[24.0, 24.9, 25.6]), 3, &p));
        assert!(should_upgrade_steps(&hist(&[25.0, 25.01, 25.02, 25.01, 25.0, 25.02]), 6, &p));
        assert!(!should_upgrade_steps(&hist(&[20.0, 21.0, 22.0, 23.0, 24.0, 25.0]), 6, &p));
        assert!(!should_upgrade_steps(&[], 0, &p));
    }

    #[test]
    fn fixed_epoch_threshold() {
        let p = UpgradePolicy { mode: UpgradeMode::FixedEpoch, epoch: 30, ..Default::default() };
        assert!(should_upgrade_steps(&[], 30, &p));
        assert!(!should_upgrade_steps(&[], 29, &p));
        assert!(should_upgrade_steps(&[], 31, &p));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { initial_m: 3, upgraded_m: 2, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::BadConfig(_))));
        let bad = TrainConfig { initial_m: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidM(0))));
        let bad = TrainConfig { lr0: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!("fixed_epoch".parse::<UpgradeMode>().unwrap(), UpgradeMode::FixedEpoch);
    }
}
