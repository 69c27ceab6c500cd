//! Conditional GAN that turns clean images into reflection-contaminated ambients.
//!
//! The generator is the shared UNet (3 -> 3, decoder dropout as the noise
//! source). The discriminator scores `(T, ambient)` pairs patch by patch:
//! `layers` stride-2 convolutions followed by two stride-1 convolutions, all
//! 4x4 with padding 1. Training alternates one discriminator step and one
//! generator step per sample.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use derefl_autograd::{conv_output_size, Adam, AdamConfig, Archive, Builder, Conv2d, ParamStore, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment, DatasetManifest, ManifestEntry, Provenance, Split};
use crate::error::{Error, Result};
use crate::imagecore::{save_image, ImageRGB};
use crate::networks::{mix_seed, UNet, UNetConfig};

pub const REFGAN_MAGIC: &str = "REFGAN1";
pub const GAN_LOG_FILE: &str = "refgan.jsonl";
pub const GAN_CHECKPOINT: &str = "refgan.ckpt";

const KERNEL: usize = 4;
const PAD: usize = 1;
const SLOPE: f32 = 0.2;
const IN_EPS: f32 = 1e-5;
const MAX_WIDTH_MULT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Number of stride-2 layers. Three gives a 70x70 receptive field.
    pub layers: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { layers: 3, base_channels: 64, seed: 0 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > 8 {
            return Err(Error::BadConfig(format!("discriminator layers {} outside 1..=8", self.layers)));
        }
        if self.base_channels < 4 {
            return Err(Error::BadConfig(format!("discriminator base_channels {} below 4", self.base_channels)));
        }
        Ok(())
    }

    /// `(stride, cin, cout)` for every convolution, first to last.
    fn plan(&self) -> Vec<(usize, usize, usize)> {
        let width = |i: usize| self.base_channels * (1 << i).min(MAX_WIDTH_MULT);
        let mut plan = vec![(2, 6, width(0))];
        for i in 1..self.layers {
            plan.push((2, width(i - 1), width(i)));
        }
        plan.push((1, width(self.layers - 1), width(self.layers)));
        plan.push((1, width(self.layers), 1));
        plan
    }

    /// Side of the score map for an `n`-pixel input side. A stride-2 layer
    /// maps `n` to `(n + 2 - 4) / 2 + 1`, a stride-1 layer to `n - 1`; with
    /// three stride-2 layers 256 becomes 128, 64, 32, then 31 and 30.
    pub fn patch_map_size(&self, n: usize) -> Option<usize> {
        self.plan()
            .iter()
            .try_fold(n, |n, &(stride, _, _)| conv_output_size(n, KERNEL, stride, PAD).filter(|&m| m > 0))
    }

    /// Receptive field of one output logit along one axis.
    pub fn receptive_field(&self) -> usize {
        self.plan()
            .iter()
            .rev()
            .fold(1, |rf, &(stride, _, _)| (rf - 1) * stride + KERNEL)
    }
}

/// Patch discriminator over the channel concatenation `(T, ambient)`.
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator")
            .field("config", &self.config)
            .field("parameters", &self.params.num_elements())
            .finish()
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let last = plan.len() - 1;
        let mut b = Builder::new(config.seed);
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(stride, cin, cout))| {
                let name = format!("conv{i}");
                // Normalized layers drop their bias.
                if i == 0 || i == last {
                    b.conv2d(&name, cin, cout, KERNEL, stride, PAD)
                } else {
                    b.conv2d_no_bias(&name, cin, cout, KERNEL, stride, PAD)
                }
            })
            .collect();
        Ok(Self { config, params: b.finish(), convs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[N, 1, h, w]` logits for `[N, 3, H, W]` condition and candidate.
    pub fn forward(&self, t: &Tensor, ambient: &Tensor) -> Result<Tensor> {
        if t.shape() != ambient.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", t.shape(), ambient.shape())));
        }
        let (_, _, h, w) = t.dims4()?;
        if self.config.patch_map_size(h.min(w)).is_none() {
            return Err(Error::ShapeMismatch(format!("{h}x{w} is too small for the discriminator")));
        }
        let last = self.convs.len() - 1;
        let mut x = Tensor::cat_channels(&[t, ambient])?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i == last {
                break;
            }
            if i > 0 {
                x = x.instance_norm(IN_EPS)?;
            }
            x = x.leaky_relu(SLOPE);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub generator: UNetConfig,
    pub discriminator: DiscriminatorConfig,
    pub lambda_l1: f32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub seed: u64,
    pub crop: Option<usize>,
    pub hflip_prob: f32,
    /// Train only on entries with real provenance.
    pub real_only: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            generator: UNetConfig { dropout: 0.5, ..UNetConfig::new(3, 3) },
            discriminator: DiscriminatorConfig::default(),
            lambda_l1: 100.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            iterations: 200,
            seed: 0,
            crop: None,
            hflip_prob: 0.0,
            real_only: false,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.in_channels != 3 || self.generator.out_channels != 3 {
            return Err(Error::BadConfig("RefGAN generator must map 3 -> 3 channels".into()));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::BadConfig(format!("lambda_l1 {} must be finite and >= 0", self.lambda_l1)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        if self.iterations == 0 {
            return Err(Error::BadConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generator, discriminator and the L1 weight they were trained with.
#[derive(Debug)]
pub struct RefGanBundle {
    pub generator: UNet,
    pub discriminator: Discriminator,
    pub lambda_l1: f32,
    pub iterations: usize,
}

impl RefGanBundle {
    pub fn new(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let generator = UNet::new(config.generator.with_seed(mix_seed(config.seed, config.generator.seed, 11)))?;
        let discriminator = Discriminator::new(DiscriminatorConfig {
            seed: mix_seed(config.seed, config.discriminator.seed, 12),
            ..config.discriminator
        })?;
        Ok(Self { generator, discriminator, lambda_l1: config.lambda_l1, iterations: 0 })
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = TensorMap::new();
        for (prefix, store) in [("generator", self.generator.params()), ("discriminator", self.discriminator.params())] {
            for (name, v) in store.snapshot() {
                tensors.insert(format!("{prefix}.{name}"), v);
            }
        }
        let meta = serde_json::json!({
            "generator_config": self.generator.config(),
            "discriminator_config": self.discriminator.config(),
            "lambda_l1": self.lambda_l1,
            "iterations": self.iterations,
        });
        Archive { meta, tensors }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let field = |name: &str| {
            archive
                .meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::BadConfig(format!("GAN checkpoint lacks {name}")))
        };
        let generator = UNet::new(serde_json::from_value(field("generator_config")?)?)?;
        let discriminator = Discriminator::new(serde_json::from_value(field("discriminator_config")?)?)?;
        for (prefix, store) in [("generator.", generator.params()), ("discriminator.", discriminator.params())] {
            let values: TensorMap = archive
                .tensors
                .iter()
                .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect();
            store.load(&values)?;
        }
        Ok(Self {
            generator,
            discriminator,
            lambda_l1: serde_json::from_value(field("lambda_l1")?)?,
            iterations: serde_json::from_value(field("iterations")?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().write(path, REFGAN_MAGIC)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_archive(&Archive::read(path, REFGAN_MAGIC)?)
    }
}

/// Maps a clean image to an ambient. `noise` enables generator dropout.
pub trait AmbientGenerator {
    fn generate(&self, t: &ImageRGB, noise: Option<&mut ChaCha8Rng>) -> Result<ImageRGB>;
}

impl AmbientGenerator for RefGanBundle {
    fn generate(&self, t: &ImageRGB, noise: Option<&mut ChaCha8Rng>) -> Result<ImageRGB> {
        ImageRGB::from_tensor(&self.generator.forward(&t.to_tensor(), noise)?)
    }
}

/// Returns its input; a stand-in for synthesis plumbing tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityGenerator;

impl AmbientGenerator for IdentityGenerator {
    fn generate(&self, t: &ImageRGB, _noise: Option<&mut ChaCha8Rng>) -> Result<ImageRGB> {
        Ok(t.clone())
    }
}

/// Deterministic generator output (dropout off).
pub fn generator_forward(bundle: &RefGanBundle, t: &ImageRGB) -> Result<ImageRGB> {
    bundle.generate(t, None)
}

/// Patch logits for a `(T, ambient)` pair.
pub fn discriminator_forward(bundle: &RefGanBundle, t: &ImageRGB, ambient: &ImageRGB) -> Result<Tensor> {
    t.same_shape(ambient, "discriminator_forward")?;
    bundle.discriminator.forward(&t.to_tensor(), &ambient.to_tensor())
}

/// Both objectives with their parts.
#[derive(Debug, Clone)]
pub struct GanLosses {
    pub d_loss: Tensor,
    pub g_loss: Tensor,
    pub g_adv: Tensor,
    pub g_l1: Tensor,
}

/// `d = (BCE(real, 1) + BCE(fake, 0)) / 2`, `g = BCE(fake, 1) + λ·L1(fake, real)`.
pub fn gan_objective(
    real_logits: &Tensor,
    fake_logits: &Tensor,
    fake: &Tensor,
    real: &Tensor,
    lambda_l1: f32,
) -> Result<GanLosses> {
    let d_loss = real_logits
        .bce_with_logits(1.0)?
        .add(&fake_logits.bce_with_logits(0.0)?)?
        .scale(0.5);
    let g_adv = fake_logits.bce_with_logits(1.0)?;
    let g_l1 = fake.l1(real)?.scale(lambda_l1);
    let g_loss = g_adv.add(&g_l1)?;
    Ok(GanLosses { d_loss, g_loss, g_adv, g_l1 })
}

/// Losses of the current weights on one pair, generator dropout off.
pub fn refgan_losses(bundle: &RefGanBundle, t: &ImageRGB, ambient_real: &ImageRGB) -> Result<GanLosses> {
    t.same_shape(ambient_real, "refgan_losses")?;
    let (tt, real) = (t.to_tensor(), ambient_real.to_tensor());
    let fake = bundle.generator.forward(&tt, None)?;
    let real_logits = bundle.discriminator.forward(&tt, &real)?;
    let fake_logits = bundle.discriminator.forward(&tt, &fake)?;
    gan_objective(&real_logits, &fake_logits, &fake, &real, bundle.lambda_l1)
}

/// Trained bundle plus one JSON line per iteration.
#[derive(Debug)]
pub struct GanRun {
    pub bundle: RefGanBundle,
    pub log: Vec<String>,
}

fn finite(name: &str, iter: usize, v: f32) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::NonFiniteLoss(format!("{name} at GAN iteration {iter}")))
    }
}

/// Alternating discriminator / generator Adam steps over `(T, ambient)` pairs,
/// cycling through a fresh shuffle of the manifest every pass.
pub fn train_refgan(pairs: &DatasetManifest, config: &GanConfig, out_dir: Option<&Path>) -> Result<GanRun> {
    config.validate()?;
    let pairs = if config.real_only {
        DatasetManifest {
            entries: pairs.entries.iter().filter(|e| e.provenance == Provenance::Real).cloned().collect(),
            ..pairs.clone()
        }
    } else {
        pairs.clone()
    };
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("RefGAN training manifest".into()));
    }
    let mut bundle = RefGanBundle::new(config)?;
    let adam = AdamConfig { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: 1e-8 };
    let mut opt_g = Adam::new(adam, bundle.generator.params());
    let mut opt_d = Adam::new(adam, bundle.discriminator.params());

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(OpenOptions::new().create(true).append(true).open(dir.join(GAN_LOG_FILE))?)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.iterations + 1);
    let mut emit = |line: String, log: &mut Vec<String>| -> Result<()> {
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        log.push(line);
        Ok(())
    };
    emit(serde_json::json!({ "gan_config": config }).to_string(), &mut log)?;

    let mut order = Vec::new();
    for iter in 0..config.iterations {
        let pass = iter / pairs.len();
        if iter % pairs.len() == 0 {
            order = pairs.order(mix_seed(config.seed, pass as u64, 21), true);
        }
        let index = order[iter % pairs.len()];
        let mut sample = pairs.load_entry(index).map_err(|e| Error::DataError {
            id: pairs.entries[index].id.clone(),
            reason: e.to_string(),
        })?;
        if let Some(crop) = config.crop {
            sample = augment(&sample, mix_seed(config.seed, iter as u64, 22), crop, config.hflip_prob)?;
        }
        let t = sample.transmission.to_tensor();
        let real = sample.ambient.to_tensor();
        let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, iter as u64, 23));
        let fake = bundle.generator.forward(&t, Some(&mut noise))?;

        let real_logits = bundle.discriminator.forward(&t, &real)?;
        let fake_logits = bundle.discriminator.forward(&t, &fake.detach())?;
        let d_loss = real_logits
            .bce_with_logits(1.0)?
            .add(&fake_logits.bce_with_logits(0.0)?)?
            .scale(0.5);
        let d_value = finite("discriminator loss", iter, d_loss.item()?)?;
        let grads = d_loss.backward()?;
        opt_d.step(bundle.discriminator.params(), &bundle.discriminator.params().collect_grads(&grads))?;

        let fake_logits = bundle.discriminator.forward(&t, &fake)?;
        let terms = gan_objective(&real_logits.detach(), &fake_logits, &fake, &real, config.lambda_l1)?;
        let g_value = finite("generator loss", iter, terms.g_loss.item()?)?;
        let grads = terms.g_loss.backward()?;
        opt_g.step(bundle.generator.params(), &bundle.generator.params().collect_grads(&grads))?;

        let line = serde_json::json!({
            "iter": iter,
            "id": sample.id,
            "d_loss": d_value,
            "g_loss": g_value,
            "g_adv": terms.g_adv.item()? as f64,
            "g_l1": terms.g_l1.item()? as f64,
        });
        emit(line.to_string(), &mut log)?;
        bundle.iterations += 1;
    }
    if let Some(dir) = out_dir {
        bundle.save(&dir.join(GAN_CHECKPOINT))?;
    }
    Ok(GanRun { bundle, log })
}

/// Targets to push through the generator.
#[derive(Debug, Clone)]
pub struct SynthJob {
    pub source: DatasetManifest,
    pub count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub crop: Option<usize>,
    pub hflip_prob: f32,
    /// Keep generator dropout on, seeded per output index.
    pub stochastic: bool,
}

impl SynthJob {
    pub fn new(source: DatasetManifest, count: usize, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self { source, count, seed, out_dir: out_dir.into(), crop: None, hflip_prob: 0.0, stochastic: true }
    }
}

/// Which source entries feed each output: a shuffled prefix when there are
/// enough sources, otherwise uniform draws with replacement.
pub fn draw_sources(n_sources: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 31));
    if count <= n_sources {
        let mut idx: Vec<usize> = (0..n_sources).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.truncate(count);
        idx
    } else {
        (0..count).map(|_| rng.random_range(0..n_sources)).collect()
    }
}

/// Write `count` generated `(ambient, T)` pairs and their manifest under `out_dir`.
pub fn synthesize_dataset(generator: &dyn AmbientGenerator, job: &SynthJob) -> Result<DatasetManifest> {
    if job.count == 0 {
        return Err(Error::BadConfig("synthesis count must be >= 1".into()));
    }
    if job.source.is_empty() {
        return Err(Error::InsufficientSources);
    }
    for dir in ["ambient", "transmission"] {
        std::fs::create_dir_all(job.out_dir.join(dir))?;
    }
    let root = std::fs::canonicalize(&job.out_dir)?;
    let draws = draw_sources(job.source.len(), job.count, job.seed);
    let mut entries = Vec::with_capacity(job.count);
    for (i, &src) in draws.iter().enumerate() {
        let mut sample = job.source.load_entry(src)?;
        if let Some(crop) = job.crop {
            sample = augment(&sample, mix_seed(job.seed, i as u64, 32), crop, job.hflip_prob)?;
        }
        let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(job.seed, i as u64, 33));
        let ambient = generator.generate(&sample.transmission, job.stochastic.then_some(&mut noise))?;
        let id = format!("gan{i:05}");
        let rel = |dir: &str| PathBuf::from(dir).join(format!("{id}.png"));
        save_image(&ambient, &root.join(rel("ambient")))?;
        save_image(&sample.transmission, &root.join(rel("transmission")))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            ambient: rel("ambient"),
            transmission: rel("transmission"),
            reflection: None,
            provenance: Provenance::Refgan,
        });
    }
    let manifest = DatasetManifest { root: root.clone(), split: Split::Train, entries };
    manifest.validate()?;
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}
