//! Flat `key = value` configuration with a fixed key registry.
//!
//! Values are layered: registry default, environment, preset, config file,
//! then command-line flags. Every key is checked against the registry and its
//! value parsed before any command runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const BACKENDS_ENV: &str = "DEREFL_BACKENDS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    /// An integer or `none`.
    OptInt,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn spec(key: &'static str, default: &'static str, kind: Kind, help: &'static str) -> KeySpec {
    KeySpec { key, default, kind, help }
}

pub const REGISTRY: &[KeySpec] = &[
    spec("epochs", "100", Kind::Int, "training epochs"),
    spec("lr0", "1e-4", Kind::Float, "initial learning rate (cosine annealed to 0)"),
    spec("batch_size", "1", Kind::Int, "samples per optimizer step"),
    spec("adam_beta1", "0.9", Kind::Float, "Adam first-moment decay"),
    spec("adam_beta2", "0.999", Kind::Float, "Adam second-moment decay"),
    spec("adam_eps", "1e-8", Kind::Float, "Adam epsilon"),
    spec("initial_m", "2", Kind::Int, "loss steps before the upgrade"),
    spec("upgraded_m", "3", Kind::Int, "loss steps after the upgrade"),
    spec("step_mode", "recursive", Kind::Choice(&["recursive", "scaled"]), "recursive steps or one scaled step"),
    spec("upgrade.mode", "plateau", Kind::Choice(&["plateau", "fixed_epoch"]), "when to upgrade M"),
    spec("upgrade.patience", "5", Kind::Int, "plateau window in validations"),
    spec("upgrade.min_delta", "0.05", Kind::Float, "plateau threshold in dB"),
    spec("upgrade.epoch", "50", Kind::Int, "fixed upgrade epoch"),
    spec("seed", "0", Kind::Int, "seed for init, order, augmentation and dropout"),
    spec("loss.pixel", "1", Kind::Float, "pixel term weight"),
    spec("loss.feature", "1", Kind::Float, "feature term weight"),
    spec("loss.gradient", "1", Kind::Float, "gradient term weight"),
    spec("loss.extractor", "vgg19", Kind::Choice(&["vgg19", "random"]), "feature extractor weights"),
    spec("reflection_loss_steps", "all", Kind::Choice(&["first", "all"]), "steps supervising the reflection"),
    spec("k", "4", Kind::Int, "number of depth ranges"),
    spec("aux_mode", "ranged", Kind::Choice(&["ranged", "raw-depth", "zeroed"]), "auxiliary channel content"),
    spec("crop", "none", Kind::OptInt, "square training crop"),
    spec("hflip_prob", "0", Kind::Float, "horizontal flip probability"),
    spec("iters_per_epoch", "none", Kind::OptInt, "cap on samples per epoch"),
    spec("model.depth", "5", Kind::Int, "UNet levels"),
    spec("model.base_channels", "64", Kind::Int, "UNet width at the first level"),
    spec("data.train", "", Kind::Text, "training manifest"),
    spec("data.val", "", Kind::Text, "validation manifest (defaults to data.train)"),
    spec("data.refgan", "", Kind::Text, "extra RefGAN-synthesized manifest merged into training"),
    spec("data.use_refgan", "true", Kind::Bool, "keep RefGAN-provenance training pairs"),
    spec("out_dir", "runs/train", Kind::Text, "training output directory"),
    spec("resume", "", Kind::Text, "training checkpoint to resume from"),
    spec("depth.backend", "pseudo", Kind::Choice(&["pseudo", "precomputed"]), "depth estimator"),
    spec("depth.dir", "", Kind::Text, "precomputed depth maps (defaults to <backends_dir>/depth)"),
    spec(
        "depth.convention",
        "larger-is-nearer",
        Kind::Choice(&["larger-is-nearer", "larger-is-farther"]),
        "orientation of precomputed depth",
    ),
    spec("backends_dir", "backends", Kind::Text, "directory holding pretrained weights"),
    spec("gan.pairs", "", Kind::Text, "(T, ambient) manifest for RefGAN training"),
    spec("gan.out_dir", "runs/refgan", Kind::Text, "RefGAN output directory"),
    spec("gan.iterations", "200", Kind::Int, "RefGAN training iterations"),
    spec("gan.lr", "2e-4", Kind::Float, "RefGAN learning rate"),
    spec("gan.beta1", "0.5", Kind::Float, "RefGAN Adam first-moment decay"),
    spec("gan.lambda_l1", "100", Kind::Float, "L1 weight in the generator objective"),
    spec("gan.gen_depth", "5", Kind::Int, "generator UNet levels"),
    spec("gan.gen_base", "64", Kind::Int, "generator UNet width"),
    spec("gan.dropout", "0.5", Kind::Float, "generator decoder dropout"),
    spec("gan.disc_layers", "3", Kind::Int, "stride-2 discriminator layers"),
    spec("gan.disc_base", "64", Kind::Int, "discriminator width"),
    spec("gan.crop", "none", Kind::OptInt, "square RefGAN training crop"),
    spec("gan.real_only", "false", Kind::Bool, "train RefGAN on real-provenance pairs only"),
    spec("synth.stochastic", "true", Kind::Bool, "keep generator dropout on during synthesis"),
    spec("synth.crop", "none", Kind::OptInt, "square crop applied to synthesis targets"),
    spec("eval.lpips", "auto", Kind::Choice(&["auto", "on", "off"]), "LPIPS: auto uses it when weights exist"),
];

pub fn lookup(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.key == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Env,
    Preset,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::Preset => "preset",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String, expected: String },
    Syntax { origin: String, line: usize, text: String },
    Duplicate { origin: String, key: String },
    Unreadable(String),
    UnknownPreset(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "bad value {value:?} for {key}: expected {expected}")
            }
            ConfigError::Syntax { origin, line, text } => {
                write!(f, "{origin}:{line}: expected `key = value`, got {text:?}")
            }
            ConfigError::Duplicate { origin, key } => write!(f, "{origin}: key {key} set twice"),
            ConfigError::Unreadable(msg) => f.write_str(msg),
            ConfigError::UnknownPreset(p) => write!(f, "unknown preset {p:?}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn check(spec: &KeySpec, value: &str) -> Result<(), ConfigError> {
    let bad = |expected: &str| ConfigError::BadValue {
        key: spec.key.to_string(),
        value: value.to_string(),
        expected: expected.to_string(),
    };
    match spec.kind {
        Kind::Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad("true or false")),
        Kind::Text => Ok(()),
        Kind::OptInt if value == "none" => Ok(()),
        Kind::OptInt => value.parse::<u64>().map(|_| ()).map_err(|_| bad("an integer or none")),
        Kind::Choice(options) if options.contains(&value) => Ok(()),
        Kind::Choice(options) => Err(bad(&options.join("|"))),
    }
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: origin.to_string(),
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(ConfigError::Duplicate { origin: origin.to_string(), key: k });
        }
        out.push((k, v));
    }
    Ok(out)
}

/// One `--set key=value` argument.
pub fn parse_assignment(arg: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = arg.split_once('=').ok_or_else(|| ConfigError::Syntax {
        origin: "--set".into(),
        line: 1,
        text: arg.to_string(),
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// The merged key-value view with the layer each value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: REGISTRY.iter().map(|s| (s.key, (s.default.to_string(), Source::Default))).collect(),
        }
    }
}

impl Config {
    /// Registry defaults with `DEREFL_BACKENDS_DIR` applied.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(dir) = std::env::var(BACKENDS_ENV) {
            if !dir.is_empty() {
                c.values.insert("backends_dir", (dir, Source::Env));
            }
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
        let spec = lookup(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        check(spec, value)?;
        self.values.insert(spec.key, (value.to_string(), source));
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)], source: Source) -> Result<(), ConfigError> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v, source))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable(format!("cannot read config {}: {e}", path.display())))?;
        self.apply(&parse_pairs(&text, &path.display().to_string())?, Source::File)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.entry(key).0
    }

    pub fn source(&self, key: &str) -> Source {
        self.entry(key).1
    }

    fn entry(&self, key: &str) -> &(String, Source) {
        self.values.get(key).unwrap_or_else(|| panic!("{key} is not a registered config key"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> T {
        self.raw(key).parse().unwrap_or_else(|_| panic!("{key} was validated on insertion"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    pub fn f32(&self, key: &str) -> f32 {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> bool {
        self.parsed(key)
    }

    pub fn opt_usize(&self, key: &str) -> Option<usize> {
        match self.raw(key) {
            "none" => None,
            _ => Some(self.parsed(key)),
        }
    }

    /// Empty text means unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// `key = value` lines that reproduce this configuration when read back
    /// as a config file, each annotated with its source.
    pub fn render(&self) -> String {
        let width = REGISTRY.iter().map(|s| s.key.len()).max().unwrap_or(0);
        self.values
            .iter()
            .map(|(k, (v, src))| format!("{k:<width$} = {v}  # {src}\n"))
            .collect()
    }
}

/// Ablation presets shipped with the binary, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("k2", include_str!("../../../ablation/k2.cfg")),
    ("k3", include_str!("../../../ablation/k3.cfg")),
    ("k4", include_str!("../../../ablation/k4.cfg")),
    ("k5", include_str!("../../../ablation/k5.cfg")),
    ("k6", include_str!("../../../ablation/k6.cfg")),
    ("k7", include_str!("../../../ablation/k7.cfg")),
    ("steps-1", include_str!("../../../ablation/steps-1.cfg")),
    ("steps-2", include_str!("../../../ablation/steps-2.cfg")),
    ("steps-3x1", include_str!("../../../ablation/steps-3x1.cfg")),
    ("steps-3", include_str!("../../../ablation/steps-3.cfg")),
    ("steps-ours", include_str!("../../../ablation/steps-ours.cfg")),
    ("depth-vs-rdm", include_str!("../../../ablation/depth-vs-rdm.cfg")),
    ("no-refgan", include_str!("../../../ablation/no-refgan.cfg")),
];

pub fn preset(name: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let name = name.strip_suffix(".cfg").unwrap_or(name);
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    parse_pairs(text, &format!("preset {name}"))
}

/// Layer everything in precedence order.
pub fn resolve(
    presets: &[String],
    file: Option<&Path>,
    flags: &[(String, String)],
) -> Result<Config, ConfigError> {
    let mut c = Config::from_env();
    for p in presets {
        c.apply(&preset(p)?, Source::Preset)?;
    }
    if let Some(f) = file {
        c.apply_file(f)?;
    }
    c.apply(flags, Source::Flag)?;
    Ok(c)
}
