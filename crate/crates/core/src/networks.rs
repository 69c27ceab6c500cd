//! UNet backbone and the two-stage reflection-removal model.
//!
//! The reflection network sees `(ambient, aux)` and predicts the reflection
//! layer; the target network sees `(ambient, predicted reflection, aux)` and
//! predicts the transmission. `aux` is the single ranged-depth channel.

use std::path::Path;

use derefl_autograd::{Archive, Builder, Conv2d, ConvTranspose2x2, ParamStore, Tensor, TensorMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthrange::{AuxMode, AuxSettings, DEFAULT_K};
use crate::error::{Error, Result};
use crate::imagecore::{GrayMap, ImageRGB};

pub const CHECKPOINT_MAGIC: &str = "DEREFL1";

const IN_EPS: f32 = 1e-5;
const ENCODER_SLOPE: f32 = 0.2;
/// Decoder levels (deepest first) that get dropout when enabled.
const DROPOUT_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of encoder levels; spatial size is halved `depth - 1` times.
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
    /// Decoder dropout probability (0 disables).
    #[serde(default)]
    pub dropout: f32,
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            depth: 5,
            base_channels: 64,
            seed: 0,
            dropout: 0.0,
        }
    }

    /// 3 image channels + 1 auxiliary depth channel in, reflection out.
    pub fn rcnn() -> Self {
        Self::new(4, 3)
    }

    /// Ambient + predicted reflection + auxiliary channel in, target out.
    pub fn tcnn() -> Self {
        Self::new(7, 3)
    }

    pub fn with_size(mut self, depth: usize, base_channels: usize) -> Self {
        self.depth = depth;
        self.base_channels = base_channels;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 12 {
            return Err(Error::BadConfig(format!("UNet depth {} outside 2..=12", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::BadConfig(format!(
                "base_channels {} below 4",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::BadConfig("UNet needs input and output channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Input sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Two 3×3 convs. Normalized blocks drop the conv bias; the outermost level
/// runs without instance norm so absolute intensities reach the head.
struct ConvBlock {
    first: Conv2d,
    second: Conv2d,
    norm: bool,
}

impl ConvBlock {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, norm: bool) -> Self {
        let mut conv = |suffix: &str, cin| {
            let name = format!("{name}.{suffix}");
            if norm {
                b.conv2d_no_bias(&name, cin, cout, 3, 1, 1)
            } else {
                b.conv2d(&name, cin, cout, 3, 1, 1)
            }
        };
        let first = conv("conv1", cin);
        let second = conv("conv2", cout);
        Self { first, second, norm }
    }

    fn forward(&self, x: &Tensor, slope: f32) -> Result<Tensor> {
        let x = self.normalize(self.first.forward(x)?)?.leaky_relu(slope);
        Ok(self.normalize(self.second.forward(&x)?)?.leaky_relu(slope))
    }

    fn normalize(&self, x: Tensor) -> Result<Tensor> {
        Ok(if self.norm { x.instance_norm(IN_EPS)? } else { x })
    }
}

/// Encoder/decoder with skip concatenations and a sigmoid head.
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    encoder: Vec<ConvBlock>,
    up: Vec<ConvTranspose2x2>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("config", &self.config)
            .field("parameters", &self.params.num_elements())
            .finish()
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(config.seed);
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels(level);
            encoder.push(ConvBlock::new(&mut b, &format!("enc{level}"), cin, c, level > 0));
            cin = c;
        }
        let mut up = Vec::with_capacity(config.depth - 1);
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for level in 0..config.depth - 1 {
            let c = config.channels(level);
            up.push(b.conv_transpose2x2(&format!("up{level}"), config.channels(level + 1), c));
            decoder.push(ConvBlock::new(&mut b, &format!("dec{level}"), 2 * c, c, level > 0));
        }
        let head = b.conv2d("head", config.channels(0), config.out_channels, 1, 1, 0);
        Ok(Self { config, params: b.finish(), encoder, up, decoder, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Forward pass on an `[N, in, H, W]` tensor. Sizes that are not a
    /// multiple of `2^(depth-1)` are reflect-padded and cropped back.
    /// Pass an RNG to enable decoder dropout.
    pub fn forward(&self, x: &Tensor, mut dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "UNet expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let (top, left) = (ph / 2, pw / 2);
        let mut cur = if ph + pw > 0 {
            x.pad_reflect(top, ph - top, left, pw - left)?
        } else {
            x.clone()
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        for (level, block) in self.encoder.iter().enumerate() {
            if level > 0 {
                cur = cur.max_pool2x2()?;
            }
            cur = block.forward(&cur, ENCODER_SLOPE)?;
            skips.push(cur.clone());
        }
        let mut cur = skips.pop().expect("depth >= 2");
        for level in (0..self.config.depth - 1).rev() {
            let up = self.up[level].forward(&cur)?;
            let joined = Tensor::cat_channels(&[&skips[level], &up])?;
            cur = self.decoder[level].forward(&joined, 0.0)?;
            let from_bottom = self.config.depth - 2 - level;
            if let Some(rng) = dropout.as_deref_mut() {
                if self.config.dropout > 0.0 && from_bottom < DROPOUT_LEVELS {
                    cur = apply_dropout(&cur, self.config.dropout, rng)?;
                }
            }
        }
        let out = self.head.forward(&cur)?.sigmoid();
        if ph + pw > 0 {
            Ok(out.crop(top, left, h, w)?)
        } else {
            Ok(out)
        }
    }
}

fn apply_dropout(x: &Tensor, p: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    Ok(x.mul(&Tensor::new(mask, x.shape())?)?)
}

/// Anything that maps `(ambient, aux)` tensors to `(reflection, target)`.
pub trait RemovalModel {
    fn forward_tensors(&self, ambient: &Tensor, aux: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub epoch: usize,
    pub steps: usize,
    pub aux_mode: AuxMode,
    #[serde(default)]
    pub notes: serde_json::Value,
}

impl Default for BundleMeta {
    fn default() -> Self {
        Self {
            epoch: 0,
            steps: 1,
            aux_mode: AuxMode::Ranged,
            notes: serde_json::Value::Null,
        }
    }
}

/// Reflection network, target network, and the number of depth ranges.
#[derive(Debug)]
pub struct ModelBundle {
    pub rcnn: UNet,
    pub tcnn: UNet,
    pub k: usize,
    pub meta: BundleMeta,
}

/// Build both networks. Each network is seeded from its own config seed
/// mixed with `seed`, so the two never share initial weights.
pub fn init_model(rcnn: UNetConfig, tcnn: UNetConfig, seed: u64) -> Result<ModelBundle> {
    if rcnn.in_channels != 4 || rcnn.out_channels != 3 {
        return Err(Error::BadConfig(format!(
            "reflection network must map 4 -> 3 channels, got {} -> {}",
            rcnn.in_channels, rcnn.out_channels
        )));
    }
    if tcnn.in_channels != 7 || tcnn.out_channels != 3 {
        return Err(Error::BadConfig(format!(
            "target network must map 7 -> 3 channels, got {} -> {}",
            tcnn.in_channels, tcnn.out_channels
        )));
    }
    let rcnn = UNet::new(rcnn.with_seed(mix_seed(seed, rcnn.seed, 1)))?;
    let tcnn = UNet::new(tcnn.with_seed(mix_seed(seed, tcnn.seed, 2)))?;
    Ok(ModelBundle { rcnn, tcnn, k: DEFAULT_K, meta: BundleMeta::default() })
}

/// SplitMix64-style mixing of a base seed with a stream tag.
pub fn mix_seed(a: u64, b: u64, tag: u64) -> u64 {
    let mut z = a ^ b.rotate_left(17) ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RemovalModel for ModelBundle {
    fn forward_tensors(&self, ambient: &Tensor, aux: &Tensor) -> Result<(Tensor, Tensor)> {
        let reflection = self.rcnn_tensors(ambient, aux)?;
        let target = self.tcnn_tensors(ambient, &reflection, aux)?;
        Ok((reflection, target))
    }
}

impl ModelBundle {
    pub fn rcnn_tensors(&self, ambient: &Tensor, aux: &Tensor) -> Result<Tensor> {
        check_pair(ambient, aux)?;
        self.rcnn.forward(&Tensor::cat_channels(&[ambient, aux])?, None)
    }

    /// Channel order is fixed: ambient, predicted reflection, aux.
    pub fn tcnn_tensors(&self, ambient: &Tensor, reflection: &Tensor, aux: &Tensor) -> Result<Tensor> {
        check_pair(ambient, aux)?;
        check_pair(ambient, reflection)?;
        self.tcnn
            .forward(&Tensor::cat_channels(&[ambient, reflection, aux])?, None)
    }

    /// How this model's auxiliary channel is built.
    pub fn aux_settings(&self) -> AuxSettings {
        AuxSettings { k: self.k, mode: self.meta.aux_mode }
    }

    pub fn num_parameters(&self) -> usize {
        self.rcnn.params().num_elements() + self.tcnn.params().num_elements()
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = TensorMap::new();
        for (prefix, net) in [("rcnn", &self.rcnn), ("tcnn", &self.tcnn)] {
            for (name, v) in net.params().snapshot() {
                tensors.insert(format!("{prefix}.{name}"), v);
            }
        }
        let meta = serde_json::json!({
            "rcnn_config": self.rcnn.config(),
            "tcnn_config": self.tcnn.config(),
            "k": self.k,
            "meta": self.meta,
        });
        Archive { meta, tensors }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let field = |name: &str| {
            archive
                .meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::BadConfig(format!("checkpoint lacks {name}")))
        };
        let rcnn_cfg: UNetConfig = serde_json::from_value(field("rcnn_config")?)?;
        let tcnn_cfg: UNetConfig = serde_json::from_value(field("tcnn_config")?)?;
        let k: usize = serde_json::from_value(field("k")?)?;
        let meta: BundleMeta = serde_json::from_value(field("meta")?)?;
        let rcnn = UNet::new(rcnn_cfg)?;
        let tcnn = UNet::new(tcnn_cfg)?;
        for (prefix, net) in [("rcnn.", &rcnn), ("tcnn.", &tcnn)] {
            let values: TensorMap = archive
                .tensors
                .iter()
                .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect();
            net.params().load(&values)?;
        }
        Ok(Self { rcnn, tcnn, k, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().write(path, CHECKPOINT_MAGIC)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_archive(&Archive::read(path, CHECKPOINT_MAGIC)?)
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    let (an, _, ah, aw) = a.dims4()?;
    let (bn, _, bh, bw) = b.dims4()?;
    if (an, ah, aw) != (bn, bh, bw) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_image_aux(ambient: &ImageRGB, aux: &GrayMap) -> Result<()> {
    ambient.ensure_pipeline_size()?;
    if ambient.shape() != aux.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ambient {:?} vs depth map {:?}",
            ambient.shape(),
            aux.shape()
        )));
    }
    Ok(())
}

/// Predicted reflection layer.
pub fn rcnn_forward(bundle: &ModelBundle, ambient: &ImageRGB, aux: &GrayMap) -> Result<ImageRGB> {
    check_image_aux(ambient, aux)?;
    ImageRGB::from_tensor(&bundle.rcnn_tensors(&ambient.to_tensor(), &aux.to_tensor())?)
}

/// Predicted transmission given a reflection estimate.
pub fn tcnn_forward(
    bundle: &ModelBundle,
    ambient: &ImageRGB,
    reflection: &ImageRGB,
    aux: &GrayMap,
) -> Result<ImageRGB> {
    check_image_aux(ambient, aux)?;
    ambient.same_shape(reflection, "tcnn_forward")?;
    ImageRGB::from_tensor(&bundle.tcnn_tensors(
        &ambient.to_tensor(),
        &reflection.to_tensor(),
        &aux.to_tensor(),
    )?)
}

/// `(reflection, target)` through both networks.
pub fn model_forward(
    model: &dyn RemovalModel,
    ambient: &ImageRGB,
    aux: &GrayMap,
) -> Result<(ImageRGB, ImageRGB)> {
    check_image_aux(ambient, aux)?;
    let (r, t) = model.forward_tensors(&ambient.to_tensor(), &aux.to_tensor())?;
    Ok((ImageRGB::from_tensor(&r)?, ImageRGB::from_tensor(&t)?))
}

/// Returns the input unchanged as the target and zero reflection.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl RemovalModel for IdentityModel {
    fn forward_tensors(&self, ambient: &Tensor, aux: &Tensor) -> Result<(Tensor, Tensor)> {
        check_pair(ambient, aux)?;
        Ok((Tensor::zeros(ambient.shape()), ambient.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> (UNetConfig, UNetConfig) {
        (UNetConfig::rcnn().with_size(3, 8), UNetConfig::tcnn().with_size(3, 8))
    }

    fn image(h: usize, w: usize, phase: f32) -> ImageRGB {
        ImageRGB::from_fn(h, w, |y, x, c| {
            0.5 + 0.4 * ((y as f32 * 0.3 + x as f32 * 0.17 + c as f32 + phase).sin())
        })
    }

    fn aux(h: usize, w: usize) -> GrayMap {
        GrayMap::new(h, w, (0..h * w).map(|i| ((i * 7) % 4) as f32 / 3.0).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let (r, t) = small();
        let a = init_model(r, t, 5).unwrap();
        let b = init_model(r, t, 5).unwrap();
        assert_eq!(a.rcnn.params().snapshot(), b.rcnn.params().snapshot());
        assert_eq!(a.tcnn.params().snapshot(), b.tcnn.params().snapshot());
        let c = init_model(r, t, 6).unwrap();
        assert_ne!(a.rcnn.params().snapshot(), c.rcnn.params().snapshot());
    }

    #[test]
    fn channel_invariants_enforced() {
        let (_, t) = small();
        let bad = UNetConfig::new(3, 3).with_size(3, 8);
        assert!(matches!(init_model(bad, t, 0), Err(Error::BadConfig(_))));
        let (r, _) = small();
        assert!(matches!(init_model(r, UNetConfig::new(6, 3), 0), Err(Error::BadConfig(_))));
        assert!(matches!(
            UNet::new(UNetConfig::new(4, 3).with_size(1, 8)),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            UNet::new(UNetConfig::new(4, 3).with_size(3, 2)),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn default_configuration_constructs() {
        let bundle = init_model(UNetConfig::rcnn(), UNetConfig::tcnn(), 0).unwrap();
        assert_eq!(bundle.rcnn.config().depth, 5);
        assert_eq!(bundle.rcnn.config().base_channels, 64);
        assert!(bundle.num_parameters() > 1_000_000);
    }

    #[test]
    fn unet_shapes_and_range() {
        let net = UNet::new(UNetConfig::new(4, 3).with_size(3, 8)).unwrap();
        let x = Tensor::full(0.3, &[1, 4, 64, 64]);
        let y = net.forward(&x, None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let odd = Tensor::new((0..4 * 70 * 70).map(|i| (i % 13) as f32 / 13.0).collect(), &[1, 4, 70, 70]).unwrap();
        assert_eq!(net.forward(&odd, None).unwrap().shape(), &[1, 3, 70, 70]);
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 3, 16, 16]), None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn dropout_only_with_rng() {
        let mut cfg = UNetConfig::new(3, 3).with_size(3, 8);
        cfg.dropout = 0.5;
        let net = UNet::new(cfg).unwrap();
        let x = image(16, 16, 0.0).to_tensor();
        let a = net.forward(&x, None).unwrap();
        assert_eq!(a.data(), net.forward(&x, None).unwrap().data());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = net.forward(&x, Some(&mut rng)).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn forwards_are_deterministic_and_shaped() {
        let (r, t) = small();
        let bundle = init_model(r, t, 1).unwrap();
        let (amb, a) = (image(24, 20, 0.0), aux(24, 20));
        let r1 = rcnn_forward(&bundle, &amb, &a).unwrap();
        assert_eq!(r1.shape(), amb.shape());
        assert_eq!(r1, rcnn_forward(&bundle, &amb, &a).unwrap());
        let t1 = tcnn_forward(&bundle, &amb, &r1, &a).unwrap();
        assert_eq!(t1, tcnn_forward(&bundle, &amb, &r1, &a).unwrap());
        let (mr, mt) = model_forward(&bundle, &amb, &a).unwrap();
        assert_eq!((mr, mt), (r1, t1));
        assert!(matches!(
            rcnn_forward(&bundle, &amb, &aux(24, 16)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            rcnn_forward(&bundle, &image(6, 20, 0.0), &aux(6, 20)),
            Err(Error::InvalidSize(_))
        ));
    }

    #[test]
    fn reflection_network_depends_on_aux() {
        let (r, t) = small();
        let bundle = init_model(r, t, 2).unwrap();
        let amb = image(16, 16, 0.3);
        let with = rcnn_forward(&bundle, &amb, &aux(16, 16)).unwrap();
        let zero = GrayMap::new(16, 16, vec![0.0; 256]).unwrap();
        let without = rcnn_forward(&bundle, &amb, &zero).unwrap();
        assert!(with.max_abs_diff(&without) > 0.0);
    }

    #[test]
    fn target_network_channel_order_matters() {
        let (r, t) = small();
        let bundle = init_model(r, t, 3).unwrap();
        let (amb, refl, a) = (image(16, 16, 0.0), image(16, 16, 1.7), aux(16, 16));
        let normal = tcnn_forward(&bundle, &amb, &refl, &a).unwrap();
        let swapped = tcnn_forward(&bundle, &refl, &amb, &a).unwrap();
        assert!(normal.max_abs_diff(&swapped) > 0.0);
    }

    #[test]
    fn identity_model() {
        let amb = image(16, 16, 0.0);
        let (r, t) = model_forward(&IdentityModel, &amb, &aux(16, 16)).unwrap();
        assert_eq!(t, amb);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_weight_receives_finite_gradient() {
        let (r, t) = small();
        let bundle = init_model(r, t, 4).unwrap();
        let (rh, th) = bundle
            .forward_tensors(&image(16, 16, 0.0).to_tensor(), &aux(16, 16).to_tensor())
            .unwrap();
        let grads = rh.sum().add(&th.sum()).unwrap().backward().unwrap();
        for net in [&bundle.rcnn, &bundle.tcnn] {
            for (p, g) in net.params().iter().zip(net.params().collect_grads(&grads)) {
                assert!(g.iter().all(|v| v.is_finite()), "{}", p.name());
                assert!(g.iter().any(|&v| v != 0.0), "{} has zero gradient", p.name());
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (r, t) = small();
        let mut bundle = init_model(r, t, 9).unwrap();
        bundle.k = 6;
        bundle.meta.epoch = 3;
        bundle.meta.steps = 3;
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.k, 6);
        assert_eq!(back.meta, bundle.meta);
        let (amb, a) = (image(16, 16, 0.0), aux(16, 16));
        assert_eq!(
            model_forward(&bundle, &amb, &a).unwrap(),
            model_forward(&back, &amb, &a).unwrap()
        );
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()));
    }
}
