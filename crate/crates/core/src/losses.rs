//! Pixel, feature and gradient losses, and their multi-step accumulation.
//!
//! All MSE/L1 terms are element means. The multi-step recursion feeds the
//! predicted target back in as the next input without detaching it, so the
//! loss of every step reaches every forward pass.

use std::fmt;
use std::path::Path;

use derefl_autograd::{safetensors, Builder, Conv2d, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{GrayMap, ImageRGB};
use crate::networks::RemovalModel;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// File name looked up inside a weights directory.
pub const VGG19_WEIGHTS_FILE: &str = "vgg19.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VggVariant {
    Vgg16,
    Vgg19,
}

impl VggVariant {
    fn convs_per_block(self) -> [usize; 5] {
        match self {
            VggVariant::Vgg16 => [2, 2, 3, 3, 3],
            VggVariant::Vgg19 => [2, 2, 4, 4, 4],
        }
    }
}

/// Channel widths of the five VGG blocks.
pub const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// `(block, conv)` positions, 1-based like `conv4_1`.
pub const LOSS_TAPS: [(usize, usize); 2] = [(1, 1), (4, 1)];

enum Layer {
    Conv { conv: Conv2d, tap: bool },
    Pool,
}

/// Frozen VGG trunk, truncated after its deepest tap.
///
/// Taps are ReLU outputs. Parameters are named like the torchvision
/// `features.{index}` layout so published weights load directly. Inputs in
/// `[0, 1]` go through a per-channel affine first (ImageNet statistics by
/// default).
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    params: ParamStore,
    norm_scale: [f32; 3],
    norm_shift: [f32; 3],
    description: String,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("description", &self.description)
            .finish()
    }
}

impl FeatureExtractor {
    /// Trunk with the given taps; `widths` needs one entry per block used.
    pub fn with_taps(variant: VggVariant, widths: &[usize], taps: &[(usize, usize)], seed: u64) -> Self {
        let last = taps.iter().max().copied().expect("at least one tap");
        assert!(widths.len() >= last.0, "need a width for every block up to {}", last.0);
        let mut b = Builder::frozen(seed);
        let mut layers = Vec::new();
        let mut index = 0;
        let mut cin = 3;
        'blocks: for (bi, &n) in variant.convs_per_block().iter().enumerate() {
            let block = bi + 1;
            if block > 1 {
                layers.push(Layer::Pool);
                index += 1;
            }
            for ci in 1..=n {
                let width = widths[bi];
                let conv = b.conv2d(&format!("features.{index}"), cin, width, 3, 1, 1);
                layers.push(Layer::Conv { conv, tap: taps.contains(&(block, ci)) });
                index += 2;
                cin = width;
                if (block, ci) == last {
                    break 'blocks;
                }
            }
        }
        let mut norm_scale = [0.0; 3];
        let mut norm_shift = [0.0; 3];
        for c in 0..3 {
            norm_scale[c] = 1.0 / IMAGENET_STD[c];
            norm_shift[c] = -IMAGENET_MEAN[c] / IMAGENET_STD[c];
        }
        Self {
            layers,
            params: b.finish(),
            norm_scale,
            norm_shift,
            description: format!("{variant:?} widths {widths:?} taps {taps:?}"),
        }
    }

    /// Replace the input affine applied before the first convolution.
    pub fn with_input_affine(mut self, scale: [f32; 3], shift: [f32; 3]) -> Self {
        self.norm_scale = scale;
        self.norm_shift = shift;
        self
    }

    /// Rescale the uniform(±1/√fan_in) init to He-uniform so random
    /// activations keep their scale through depth.
    fn he_scaled(self) -> Self {
        for p in self.params.iter() {
            if p.name().ends_with(".weight") {
                let gain = 6f32.sqrt();
                let data = p.tensor().data().iter().map(|v| v * gain).collect();
                p.set_data(data).expect("same length");
            }
        }
        self
    }

    /// Seeded random-weight stand-in with the loss taps, for tests and
    /// weight-free runs.
    pub fn random(variant: VggVariant, widths: [usize; 4], seed: u64) -> Self {
        let mut ext = Self::with_taps(variant, &widths, &LOSS_TAPS, seed).he_scaled();
        ext.description = format!("random {} (seed {seed})", ext.description);
        ext
    }

    /// Random trunk with arbitrary taps.
    pub fn random_with_taps(variant: VggVariant, widths: &[usize], taps: &[(usize, usize)], seed: u64) -> Self {
        let mut ext = Self::with_taps(variant, widths, taps, seed).he_scaled();
        ext.description = format!("random {} (seed {seed})", ext.description);
        ext
    }

    /// Small random extractor used throughout the test suite.
    pub fn test_default() -> Self {
        Self::random(VggVariant::Vgg19, [8, 16, 32, 64], 0)
    }

    /// Full-width trunk with weights from a safetensors file.
    pub fn from_safetensors(variant: VggVariant, taps: &[(usize, usize)], path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ExtractorUnavailable(format!("{} not found", path.display())));
        }
        let tensors = safetensors::read(path)
            .map_err(|e| Error::ExtractorUnavailable(format!("{}: {e}", path.display())))?;
        let mut ext = Self::with_taps(variant, &VGG_WIDTHS, taps, 0);
        ext.params
            .load(&tensors)
            .map_err(|e| Error::ExtractorUnavailable(format!("{}: {e}", path.display())))?;
        ext.description = format!("{:?} from {}", variant, path.display());
        Ok(ext)
    }

    /// VGG-19 loss extractor from `<dir>/vgg19.safetensors`.
    pub fn locate(dir: &Path) -> Result<Self> {
        Self::from_safetensors(VggVariant::Vgg19, &LOSS_TAPS, &dir.join(VGG19_WEIGHTS_FILE))
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Tap activations, shallowest first, for an `[N, 3, H, W]` tensor in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("feature extractor needs 3 channels, got {c}")));
        }
        let mut cur = x.channel_affine(&self.norm_scale, &self.norm_shift)?;
        let mut taps = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, tap } => {
                    cur = conv.forward(&cur)?.relu();
                    if *tap {
                        taps.push(cur.clone());
                    }
                }
                Layer::Pool => cur = cur.max_pool2x2()?,
            }
        }
        Ok(taps)
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `MSE(T, T̂) + MSE(R, R̂)`; the reflection term is zero when absent.
pub fn pixel_loss(t: &Tensor, t_hat: &Tensor, reflection: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    check_same(t, t_hat, "pixel loss target")?;
    let mut loss = t_hat.mse(t)?;
    if let Some((r, r_hat)) = reflection {
        check_same(r, r_hat, "pixel loss reflection")?;
        loss = loss.add(&r_hat.mse(r)?)?;
    }
    Ok(loss)
}

/// Sum over the extractor taps of the mean absolute feature difference.
pub fn feature_loss(t: &Tensor, t_hat: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    check_same(t, t_hat, "feature loss")?;
    let a = extractor.features(t)?;
    let b = extractor.features(t_hat)?;
    let mut total: Option<Tensor> = None;
    for (fa, fb) in a.iter().zip(&b) {
        let term = fb.l1(fa)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::ExtractorUnavailable("extractor has no taps".into()))
}

/// Per-channel forward differences, zero in the last column (`gx`) and
/// last row (`gy`).
pub fn image_gradient(img: &ImageRGB) -> (Vec<GrayMap>, Vec<GrayMap>) {
    let (h, w) = img.shape();
    let mut gx = Vec::with_capacity(3);
    let mut gy = Vec::with_capacity(3);
    for c in 0..3 {
        let p = img.channel(c);
        let dx = (0..h * w)
            .map(|i| if i % w + 1 < w { p[i + 1] - p[i] } else { 0.0 })
            .collect();
        let dy = (0..h * w)
            .map(|i| if i / w + 1 < h { p[i + w] - p[i] } else { 0.0 })
            .collect();
        gx.push(GrayMap::new(h, w, dx).expect("same size"));
        gy.push(GrayMap::new(h, w, dy).expect("same size"));
    }
    (gx, gy)
}

/// `MSE(gx(T), gx(T̂)) + MSE(gy(T), gy(T̂))`.
pub fn gradient_loss(t: &Tensor, t_hat: &Tensor) -> Result<Tensor> {
    check_same(t, t_hat, "gradient loss")?;
    let lx = t_hat.diff_x()?.mse(&t.diff_x()?)?;
    let ly = t_hat.diff_y()?.mse(&t.diff_y()?)?;
    Ok(lx.add(&ly)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f32,
    pub feature: f32,
    pub gradient: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pixel: 1.0, feature: 1.0, gradient: 1.0 }
    }
}

/// Differentiable terms of one step.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub pixel: Tensor,
    pub feature: Tensor,
    pub gradient: Tensor,
    pub total: Tensor,
    pub weights: LossWeights,
}

impl StepTerms {
    /// Scalar terms; the total is re-formed in f64 from the logged terms so the
    /// record is exactly self-consistent.
    pub fn record(&self) -> StepRecord {
        let (pixel, feat, grad) = (scalar(&self.pixel), scalar(&self.feature), scalar(&self.gradient));
        let w = &self.weights;
        StepRecord {
            pixel,
            feat,
            grad,
            total: f64::from(w.pixel) * pixel + f64::from(w.feature) * feat + f64::from(w.gradient) * grad,
        }
    }
}

fn scalar(t: &Tensor) -> f64 {
    f64::from(t.data()[0])
}

fn weighted(t: &Tensor, w: f32) -> Tensor {
    if w == 1.0 {
        t.clone()
    } else {
        t.scale(w)
    }
}

/// Weighted sum of the three terms (unweighted by default).
pub fn step_loss(
    t: &Tensor,
    t_hat: &Tensor,
    reflection: Option<(&Tensor, &Tensor)>,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<StepTerms> {
    let pixel = pixel_loss(t, t_hat, reflection)?;
    let feature = feature_loss(t, t_hat, extractor)?;
    let gradient = gradient_loss(t, t_hat)?;
    let total = weighted(&pixel, weights.pixel)
        .add(&weighted(&feature, weights.feature))?
        .add(&weighted(&gradient, weights.gradient))?;
    Ok(StepTerms { pixel, feature, gradient, total, weights: *weights })
}

/// Which steps supervise the predicted reflection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectionSteps {
    First,
    #[default]
    All,
}

impl std::str::FromStr for ReflectionSteps {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "all" => Ok(Self::All),
            other => Err(Error::BadConfig(format!("reflection_loss_steps must be first|all, got {other}"))),
        }
    }
}

/// How the per-sample loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// `M` recursive steps, each fed the previous predicted target.
    MultiStep(usize),
    /// The single-step loss multiplied by a constant factor.
    ScaledSingle(usize),
}

impl LossMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossMode::MultiStep(0) | LossMode::ScaledSingle(0) => Err(Error::InvalidM(0)),
            _ => Ok(()),
        }
    }

    /// Number of entries in the breakdown.
    pub fn steps(&self) -> usize {
        match *self {
            LossMode::MultiStep(m) | LossMode::ScaledSingle(m) => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reflection_steps: ReflectionSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pixel: f64,
    pub feat: f64,
    pub grad: f64,
    pub total: f64,
}

/// Scalar view of a multi-step loss, for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_step: Vec<StepRecord>,
    pub total: f64,
    #[serde(rename = "M")]
    pub m: usize,
}

impl LossBreakdown {
    /// One log line: `{iter, M, steps:[{pixel,feat,grad,total}], total, lr}`.
    pub fn json_line(&self, iter: u64, lr: f64) -> String {
        serde_json::json!({
            "iter": iter,
            "M": self.m,
            "steps": self.per_step,
            "total": self.total,
            "lr": lr,
        })
        .to_string()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .per_step
                .iter()
                .all(|s| s.pixel.is_finite() && s.feat.is_finite() && s.grad.is_finite() && s.total.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct MultiStepLoss {
    pub total: Tensor,
    pub steps: Vec<StepTerms>,
    pub breakdown: LossBreakdown,
}

/// Residual target `clamp(input - t, 0, 1)`, written as
/// `relu(d) - relu(d - 1)` so it stays differentiable in `input`.
fn residual_target(input: &Tensor, t: &Tensor) -> Result<Tensor> {
    let d = input.sub(t)?;
    Ok(d.relu().sub(&d.affine(1.0, -1.0).relu())?)
}

/// Accumulated loss over the recursive steps.
///
/// Step 1 uses the ground-truth reflection when present; later steps (and
/// samples without one) use the residual of the current input against `t`.
/// `aux` is reused unchanged at every step.
pub fn multi_step_loss(
    model: &dyn RemovalModel,
    ambient: &Tensor,
    aux: &Tensor,
    t: &Tensor,
    reflection: Option<&Tensor>,
    mode: LossMode,
    extractor: &FeatureExtractor,
    config: &LossConfig,
) -> Result<MultiStepLoss> {
    mode.validate()?;
    check_same(ambient, t, "multi-step loss")?;
    let forward_steps = match mode {
        LossMode::MultiStep(m) => m,
        LossMode::ScaledSingle(_) => 1,
    };
    let mut input = ambient.clone();
    let mut steps = Vec::with_capacity(forward_steps);
    for step in 0..forward_steps {
        let (r_hat, t_hat) = model.forward_tensors(&input, aux)?;
        let supervise_r = step == 0 || config.reflection_steps == ReflectionSteps::All;
        let r_target = match (step, reflection) {
            _ if !supervise_r => None,
            (0, Some(r)) => Some(r.clone()),
            _ => Some(residual_target(&input, t)?),
        };
        let terms = step_loss(
            t,
            &t_hat,
            r_target.as_ref().map(|r| (r, &r_hat)),
            extractor,
            &config.weights,
        )?;
        steps.push(terms);
        input = t_hat;
    }

    let (total, per_step) = match mode {
        LossMode::MultiStep(_) => {
            let mut total = steps[0].total.clone();
            for s in &steps[1..] {
                total = total.add(&s.total)?;
            }
            (total, steps.iter().map(StepTerms::record).collect::<Vec<_>>())
        }
        LossMode::ScaledSingle(n) => {
            (steps[0].total.scale(n as f32), vec![steps[0].record(); n])
        }
    };
    let breakdown = LossBreakdown {
        total: per_step.iter().map(|s| s.total).sum(),
        m: mode.steps(),
        per_step,
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{:?}", breakdown.per_step)));
    }
    Ok(MultiStepLoss { total, steps, breakdown })
}
