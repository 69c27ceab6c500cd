//! `derefl` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing
//! resource (weights, checkpoints, manifests, backends), 4 runtime failure.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use derefl::datasets::{DatasetManifest, Provenance};
use derefl::depthrange::{estimate_depth, quantize_depth, write_depth_artifacts, DepthBackend, PrecomputedDepth, PseudoDepth};
use derefl::evalbench::{evaluate_benchmark, LpipsVgg, MetricSelection, PerceptualMetric};
use derefl::imagecore::{load_image, save_image};
use derefl::losses::{FeatureExtractor, LossWeights};
use derefl::networks::{init_model, model_forward, IdentityModel, ModelBundle, RemovalModel, UNetConfig};
use derefl::refgan::{synthesize_dataset, train_refgan, DiscriminatorConfig, GanConfig, RefGanBundle, SynthJob};
use derefl::trainer::{train, TrainConfig, TrainContext, UpgradePolicy};

use config::{resolve, Config, ConfigError, REGISTRY};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "derefl", version, about = "Single-image reflection removal toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in ablation preset applied before the config file (repeatable).
    #[arg(long = "preset", value_name = "NAME")]
    presets: Vec<String>,
    /// Override one key (repeatable); wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate depth and write the depth map, ranged depth map and sidecar.
    Depth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// pseudo | precomputed
        #[arg(long)]
        backend: Option<String>,
        /// Sample id used to find a precomputed map (defaults to the file stem).
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the reflection and target networks.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the RefGAN generator and discriminator on (T, ambient) pairs.
    TrainRefgan {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate ambient/transmission pairs from clean targets with a RefGAN.
    Synthesize {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Remove reflections from one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted reflection layer.
        #[arg(long)]
        reflection_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a model (or `identity`) on a manifest and write a JSON report plus CSV.
    Evaluate {
        /// Checkpoint path, or `identity` for the do-nothing baseline.
        #[arg(long)]
        model: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the resolved configuration with key descriptions.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Depth { .. } => "depth",
            Command::Train { .. } => "train",
            Command::TrainRefgan { .. } => "train-refgan",
            Command::Synthesize { .. } => "synthesize",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Config { .. } => "config",
        }
    }

    fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::Depth { cfg, .. }
            | Command::Train { cfg, .. }
            | Command::TrainRefgan { cfg, .. }
            | Command::Synthesize { cfg, .. }
            | Command::Infer { cfg, .. }
            | Command::Evaluate { cfg, .. }
            | Command::Config { cfg } => cfg,
        }
    }

    /// Dedicated flags, expressed as config keys.
    fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match self {
            Command::Depth { k, backend, .. } => {
                put("k", k.map(|v| v.to_string()));
                put("depth.backend", backend.clone());
            }
            Command::Train { train, val, out, epochs, resume, .. } => {
                put("data.train", path(train));
                put("data.val", path(val));
                put("out_dir", path(out));
                put("epochs", epochs.map(|v| v.to_string()));
                put("resume", path(resume));
            }
            Command::TrainRefgan { pairs, out, iterations, .. } => {
                put("gan.pairs", path(pairs));
                put("gan.out_dir", path(out));
                put("gan.iterations", iterations.map(|v| v.to_string()));
            }
            Command::Synthesize { seed, .. } => put("seed", seed.map(|v| v.to_string())),
            Command::Infer { .. } | Command::Evaluate { .. } | Command::Config { .. } => {}
        }
        out
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Missing(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Missing(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<derefl::Error> for CliError {
    fn from(e: derefl::Error) -> Self {
        use derefl::Error as E;
        if e.is_missing_resource() {
            return CliError::Missing(e.to_string());
        }
        match e {
            E::BadConfig(_) | E::InvalidK(_) | E::InvalidM(_) | E::InvalidEpoch { .. } | E::CropTooLarge { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(sub: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match cmd.find_subcommand_mut(sub) {
        Some(s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// A user-supplied input file must exist; otherwise this is a usage error.
fn require_input(path: &Path, what: &str, sub: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist\n{}", path.display(), usage(sub))))
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_for(command: &Command) -> CliResult<Config> {
    let args = command.config_args();
    if let Some(path) = &args.config {
        require_input(path, "config file", command.name())?;
    }
    let mut flags = args
        .set
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    flags.extend(command.flag_overrides());
    Ok(resolve(&args.presets, args.config.as_deref(), &flags)?)
}

fn echo(command: &str, cfg: &Config) {
    println!("# derefl {command}: resolved configuration");
    print!("{}", cfg.render());
}

fn execute(command: &Command) -> CliResult<()> {
    let cfg = resolve_for(command)?;
    if !matches!(command, Command::Config { .. }) {
        echo(command.name(), &cfg);
    }
    match command {
        Command::Depth { input, out, id, .. } => cmd_depth(&cfg, input, out, id.as_deref()),
        Command::Train { .. } => cmd_train(&cfg),
        Command::TrainRefgan { .. } => cmd_train_refgan(&cfg),
        Command::Synthesize { gan, targets, count, out, .. } => cmd_synthesize(&cfg, gan, targets, *count, out),
        Command::Infer { model, input, out, reflection_out, .. } => {
            cmd_infer(&cfg, model, input, out, reflection_out.as_deref())
        }
        Command::Evaluate { model, manifest, report, name, .. } => {
            cmd_evaluate(&cfg, model, manifest, report, name.as_deref())
        }
        Command::Config { .. } => {
            for s in REGISTRY {
                println!("{:<22} = {:<18} # {}; {}", s.key, cfg.raw(s.key), cfg.source(s.key), s.help);
            }
            Ok(())
        }
    }
}

fn parse<T: std::str::FromStr<Err = derefl::Error>>(cfg: &Config, key: &str) -> CliResult<T> {
    Ok(cfg.raw(key).parse()?)
}

fn depth_backend(cfg: &Config) -> CliResult<Box<dyn DepthBackend>> {
    match cfg.raw("depth.backend") {
        "pseudo" => Ok(Box::new(PseudoDepth)),
        _ => {
            let dir = cfg
                .path("depth.dir")
                .unwrap_or_else(|| Path::new(cfg.raw("backends_dir")).join("depth"));
            Ok(Box::new(PrecomputedDepth::open(&dir, parse(cfg, "depth.convention")?)?))
        }
    }
}

fn extractor(cfg: &Config) -> CliResult<FeatureExtractor> {
    match cfg.raw("loss.extractor") {
        "random" => Ok(FeatureExtractor::test_default()),
        _ => Ok(FeatureExtractor::locate(Path::new(cfg.raw("backends_dir")))?),
    }
}

fn write_resolved(cfg: &Config, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved.cfg"), cfg.render())?;
    Ok(())
}

fn cmd_depth(cfg: &Config, input: &Path, out: &Path, id: Option<&str>) -> CliResult<()> {
    require_input(input, "input image", "depth")?;
    let img = load_image(input)?;
    let backend = depth_backend(cfg)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let depth = estimate_depth(id.unwrap_or(&stem), &img, backend.as_ref())
        .map_err(|e| CliError::Missing(format!("depth backend failed: {e}")))?;
    let rdm = quantize_depth(&depth, cfg.usize("k"))?;
    let sidecar = write_depth_artifacts(&depth, &rdm, backend.as_ref(), out)?;
    println!(
        "wrote {} (backend {}, k={}, {} distinct ranges)",
        out.display(),
        sidecar.backend,
        sidecar.k,
        rdm.distinct_codes()
    );
    Ok(())
}

fn train_config(cfg: &Config) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.usize("epochs"),
        lr0: cfg.f64("lr0"),
        batch_size: cfg.usize("batch_size"),
        adam_beta1: cfg.f64("adam_beta1"),
        adam_beta2: cfg.f64("adam_beta2"),
        adam_eps: cfg.f64("adam_eps"),
        initial_m: cfg.usize("initial_m"),
        upgraded_m: cfg.usize("upgraded_m"),
        step_mode: parse(cfg, "step_mode")?,
        upgrade: UpgradePolicy {
            mode: parse(cfg, "upgrade.mode")?,
            patience: cfg.usize("upgrade.patience"),
            min_delta: cfg.f64("upgrade.min_delta"),
            epoch: cfg.usize("upgrade.epoch"),
        },
        seed: cfg.u64("seed"),
        loss_weights: LossWeights {
            pixel: cfg.f32("loss.pixel"),
            feature: cfg.f32("loss.feature"),
            gradient: cfg.f32("loss.gradient"),
        },
        reflection_loss_steps: parse(cfg, "reflection_loss_steps")?,
        k: cfg.usize("k"),
        aux_mode: parse(cfg, "aux_mode")?,
        crop: cfg.opt_usize("crop"),
        hflip_prob: cfg.f32("hflip_prob"),
        iters_per_epoch: cfg.opt_usize("iters_per_epoch"),
        stop_after_epochs: None,
        out_dir: cfg.path("out_dir"),
    })
}

/// Entries of `extra` with paths made absolute, appended to `base`.
fn merge(base: DatasetManifest, extra: &DatasetManifest) -> DatasetManifest {
    let mut merged = base;
    merged.entries.extend(extra.entries.iter().map(|e| {
        let mut e = e.clone();
        e.ambient = extra.resolve(&e.ambient);
        e.transmission = extra.resolve(&e.transmission);
        e.reflection = e.reflection.as_ref().map(|r| extra.resolve(r));
        e
    }));
    merged
}

fn training_manifests(cfg: &Config) -> CliResult<(DatasetManifest, DatasetManifest)> {
    let train_path = cfg
        .path("data.train")
        .ok_or_else(|| CliError::Usage(format!("data.train is not set\n{}", usage("train"))))?;
    let mut train_set = DatasetManifest::load(&train_path)?;
    if let Some(extra) = cfg.path("data.refgan") {
        if cfg.bool("data.use_refgan") {
            train_set = merge(train_set, &DatasetManifest::load(&extra)?);
        }
    }
    if !cfg.bool("data.use_refgan") {
        train_set = train_set.without(Provenance::Refgan);
    }
    train_set.validate()?;
    let val = match cfg.path("data.val") {
        Some(p) => DatasetManifest::load(&p)?,
        None => {
            log::warn!("data.val not set; validating on the training manifest");
            train_set.clone()
        }
    };
    Ok((train_set, val))
}

fn cmd_train(cfg: &Config) -> CliResult<()> {
    let config = train_config(cfg)?;
    config.validate()?;
    let (train_set, val) = training_manifests(cfg)?;
    let backend = depth_backend(cfg)?;
    let ext = extractor(cfg)?;
    if let Some(dir) = &config.out_dir {
        write_resolved(cfg, dir)?;
    }
    let (depth, base) = (cfg.usize("model.depth"), cfg.usize("model.base_channels"));
    let mut bundle = init_model(
        UNetConfig::rcnn().with_size(depth, base),
        UNetConfig::tcnn().with_size(depth, base),
        config.seed,
    )?;
    let ctx = TrainContext { train: &train_set, val: &val, depth: backend.as_ref(), extractor: &ext };
    let start = Instant::now();
    let resume = cfg.path("resume");
    if let Some(r) = &resume {
        if !r.is_file() {
            return Err(CliError::Missing(format!("resume checkpoint {} not found", r.display())));
        }
    }
    let outcome = train(&mut bundle, &ctx, &config, resume.as_deref())?;
    let last = outcome.state.val_history.last();
    println!(
        "trained {} epochs ({} iterations, M={}) in {:.1} s; final val PSNR {:.3} dB, SSIM {:.4}; best {:.3} dB",
        outcome.state.epoch,
        outcome.state.global_iter,
        outcome.state.current_m,
        start.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |r| r.psnr),
        last.map_or(f64::NAN, |r| r.ssim),
        outcome.state.best_val_psnr.unwrap_or(f64::NAN),
    );
    if let Some(p) = outcome.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    Ok(())
}

fn gan_config(cfg: &Config) -> GanConfig {
    GanConfig {
        generator: UNetConfig {
            dropout: cfg.f32("gan.dropout"),
            ..UNetConfig::new(3, 3).with_size(cfg.usize("gan.gen_depth"), cfg.usize("gan.gen_base"))
        },
        discriminator: DiscriminatorConfig {
            layers: cfg.usize("gan.disc_layers"),
            base_channels: cfg.usize("gan.disc_base"),
            seed: 0,
        },
        lambda_l1: cfg.f32("gan.lambda_l1"),
        lr: cfg.f64("gan.lr"),
        beta1: cfg.f64("gan.beta1"),
        iterations: cfg.usize("gan.iterations"),
        seed: cfg.u64("seed"),
        crop: cfg.opt_usize("gan.crop"),
        hflip_prob: cfg.f32("hflip_prob"),
        real_only: cfg.bool("gan.real_only"),
        ..GanConfig::default()
    }
}

fn cmd_train_refgan(cfg: &Config) -> CliResult<()> {
    let pairs_path = cfg
        .path("gan.pairs")
        .ok_or_else(|| CliError::Usage(format!("gan.pairs is not set\n{}", usage("train-refgan"))))?;
    let pairs = DatasetManifest::load(&pairs_path)?;
    let out = cfg.path("gan.out_dir").unwrap_or_else(|| PathBuf::from("runs/refgan"));
    write_resolved(cfg, &out)?;
    let start = Instant::now();
    let run = train_refgan(&pairs, &gan_config(cfg), Some(&out))?;
    println!(
        "trained RefGAN for {} iterations in {:.1} s; checkpoint {}",
        run.bundle.iterations,
        start.elapsed().as_secs_f64(),
        out.join(derefl::refgan::GAN_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_synthesize(cfg: &Config, gan: &Path, targets: &Path, count: usize, out: &Path) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Usage(format!("--count must be at least 1\n{}", usage("synthesize"))));
    }
    let bundle = RefGanBundle::load(gan)?;
    let source = DatasetManifest::load(targets)?;
    let mut job = SynthJob::new(source, count, cfg.u64("seed"), out);
    job.crop = cfg.opt_usize("synth.crop");
    job.stochastic = cfg.bool("synth.stochastic");
    let manifest = synthesize_dataset(&bundle, &job)?;
    println!("wrote {} pairs; manifest {}", manifest.len(), manifest.root.join("manifest.json").display());
    Ok(())
}

fn save_output(image: &derefl::imagecore::ImageRGB, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(save_image(image, path)?)
}

fn cmd_infer(cfg: &Config, model: &Path, input: &Path, out: &Path, reflection_out: Option<&Path>) -> CliResult<()> {
    require_input(input, "input image", "infer")?;
    let bundle = ModelBundle::load(model)?;
    let img = load_image(input)?;
    let backend = depth_backend(cfg)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let start = Instant::now();
    let aux = bundle.aux_settings().compute(&stem, &img, backend.as_ref())?;
    let (reflection, target) = model_forward(&bundle, &img, &aux)?;
    let elapsed = start.elapsed();
    save_output(&target, out)?;
    if let Some(path) = reflection_out {
        save_output(&reflection, path)?;
    }
    println!(
        "inferred {}x{} in {:.1} ms -> {}",
        img.width(),
        img.height(),
        elapsed.as_secs_f64() * 1e3,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &Config, model: &str, manifest: &Path, report: &Path, name: Option<&str>) -> CliResult<()> {
    let data = DatasetManifest::load(manifest)?;
    let backend = depth_backend(cfg)?;
    let loaded;
    let (net, aux): (&dyn RemovalModel, _) = if model == "identity" {
        (&IdentityModel, derefl::depthrange::AuxSettings { k: cfg.usize("k"), mode: parse(cfg, "aux_mode")? })
    } else {
        loaded = ModelBundle::load(Path::new(model))?;
        (&loaded, loaded.aux_settings())
    };
    let backends = Path::new(cfg.raw("backends_dir"));
    let lpips = match cfg.raw("eval.lpips") {
        "off" => None,
        "on" => Some(LpipsVgg::open(backends)?),
        _ => LpipsVgg::open(backends)
            .inspect_err(|e| log::warn!("LPIPS skipped: {e}"))
            .ok(),
    };
    let metrics = MetricSelection { lpips: lpips.as_ref().map(|m| m as &dyn PerceptualMetric) };
    let dataset_name = name.map(str::to_string).unwrap_or_else(|| {
        manifest
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let result = evaluate_benchmark(net, aux, &data, backend.as_ref(), metrics, &dataset_name)?;
    result.save_json(report)?;
    std::fs::write(report.with_extension("csv"), result.to_csv())?;
    let lpips_text = result.means.lpips.map(|l| format!(", LPIPS {l:.4}")).unwrap_or_default();
    println!(
        "{}: {} samples, PSNR {:.3} dB, SSIM {:.4}{}; {} failures; report {}",
        result.dataset_name,
        result.n_samples,
        result.means.psnr,
        result.means.ssim,
        lpips_text,
        result.failures.len(),
        report.display()
    );
    Ok(())
}
