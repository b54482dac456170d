//! Command-line entry point: training, evaluation, gradient verification, synthetic data and
//! attention-map rendering.
//!
//! Exit codes: 0 on success, 1 on a validation failure (bad configuration or input, failed
//! gradient check), 2 on a runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aualign::attention::LandmarkSet;
use aualign::checkpoint;
use aualign::config::RunConfig;
use aualign::dataio::synth::{synth_dataset, write_synth, SynthConfig};
use aualign::dataio::{load_image, load_manifest, save_pgm, Dataset, LoadOptions, Manifest};
use aualign::gradcheck;
use aualign::losses::{floor_rates, AuWeights};
use aualign::metrics::{self, LabelMatrix};
use aualign::network::{AttentionSeed, Targets};
use aualign::training::{self, fit};
use aualign::{Error, Network, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "aualign",
    version,
    about = "Joint facial AU detection and face alignment"
)]
struct Cli {
    /// Worker threads for numeric kernels (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set net.lambda3=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random generator (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> aualign::Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.insert(0, format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train with the staged schedule; writes checkpoints, a metrics log and the effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training manifest (overrides `data.train`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest: per-AU F1 and accuracy, alignment error and failures.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        label_threshold: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Also write the report and effective settings here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits 1 on any violation.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Parameter entries sampled by the end-to-end check.
        #[arg(long, default_value_t = 20)]
        entries: usize,
    },
    /// Generate a synthetic dataset (images, manifest, rates, rule and flip tables).
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Write initial and refined attention maps of one face as grayscale images.
    Attention {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained network; without it a freshly initialized one is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest holding the face.
        #[arg(long, conflicts_with_all = ["image", "landmarks"])]
        manifest: Option<PathBuf>,
        /// Row of the manifest (0-based).
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, requires = "landmarks")]
        image: Option<PathBuf>,
        /// Comma-separated `x0,y0,x1,y1,...` pixel coordinates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        landmarks: Option<Vec<f64>>,
        /// Seed attention from the network's predicted landmarks or the supplied ones.
        #[arg(long, value_enum, default_value_t = Source::Predicted)]
        source: Source,
        /// Nearest-neighbour magnification of the written maps.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Predicted,
    GroundTruth,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Data(_) => {
                Failure::Validation(e.to_string())
            }
            Error::Numeric(_) | Error::Io { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<(Manifest, Dataset), Failure> {
    let opts = LoadOptions {
        fail_fast: cfg.data.fail_fast,
        check_images: true,
        n_align: Some(cfg.net.n_align),
        n_au: Some(cfg.net.n_au),
    };
    let loaded = load_manifest(path, &opts)?;
    if !loaded.rejected.is_empty() {
        log::warn!("{} manifest records rejected", loaded.rejected.len());
    }
    let data = Dataset::from_manifest(&loaded.manifest, cfg.data.label_threshold)?;
    Ok((loaded.manifest, data))
}

fn cmd_train(cfg_args: &ConfigArgs, manifest: Option<&Path>, out: &Path) -> CmdResult {
    let mut cfg = cfg_args.load()?;
    if let Some(m) = manifest {
        cfg.data.train = Some(m.to_path_buf());
    }
    let train_path = cfg.data.train.clone().ok_or_else(|| {
        Failure::Validation("no training manifest (use --manifest or data.train)".into())
    })?;
    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    let (_, data) = load_dataset(&train_path, &cfg)?;
    if data.is_empty() {
        return Err(Failure::Validation(
            "training manifest has no usable records".into(),
        ));
    }
    if cfg.net.au_weights.is_empty() {
        let rates = floor_rates(&data.rates(), data.len());
        cfg.net.au_weights = AuWeights::from_rates(&rates)?.as_slice().to_vec();
    }
    let flip = cfg.flip_table()?;
    let mut net = Network::build(cfg.net.clone())?;
    log::info!("{} trainable parameters", net.param_count());
    let log_path = out.join("metrics.log");
    let mut log_file = fs::File::create(&log_path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    let stage_ends: Vec<usize> = cfg
        .train
        .stages
        .iter()
        .scan(0, |acc, s| {
            *acc += s.epochs;
            Some(*acc)
        })
        .collect();
    let started = Instant::now();
    let report = training::run_schedule(&mut net, &data, &cfg.train, &flip, |net, entry| {
        writeln!(log_file, "{}", entry.to_line()).map_err(|e| Error::io(&log_path, e))?;
        if stage_ends.contains(&entry.epoch) {
            checkpoint::save(&out.join(format!("stage{}.ckpt", entry.stage)), net)?;
        }
        Ok(())
    })?;
    checkpoint::save(&out.join("model.ckpt"), &net)?;
    if let Some(c) = report.freeze_checks.iter().find(|c| !c.held()) {
        return Err(Failure::Runtime(format!(
            "module {} changed while frozen in stage {}",
            c.module, c.stage
        )));
    }
    let ev = training::evaluate(&net, &data, cfg.data.eval_batch_size)?;
    let f1 = metrics::f1_frame(
        &LabelMatrix::from_rows(&data.labels)?,
        &LabelMatrix::from_rows(&ev.probs)?,
    )?;
    println!(
        "trained {} epochs in {:.1}s; training set e_au={:.6} f1={:.4}",
        cfg.train.total_epochs(),
        started.elapsed().as_secs_f64(),
        ev.losses.au,
        f1.average
    );
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    manifest: &Path,
    threshold: f64,
    batch: usize,
    out: Option<&Path>,
) -> CmdResult {
    let net = checkpoint::load(checkpoint_path)?;
    let mut cfg = RunConfig::preset(Default::default(), net.config.seed);
    cfg.net = net.config.clone();
    cfg.data.label_threshold = threshold;
    cfg.data.eval = Some(manifest.to_path_buf());
    cfg.data.eval_batch_size = batch;
    let (m, data) = load_dataset(manifest, &cfg)?;
    if data.is_empty() {
        return Err(Failure::Validation(
            "evaluation manifest has no usable records".into(),
        ));
    }
    let ev = training::evaluate(&net, &data, batch)?;
    let truth = LabelMatrix::from_rows(&data.labels)?;
    let pred = LabelMatrix::from_rows(&ev.probs)?;
    let f1 = metrics::f1_frame(&truth, &pred)?;
    let acc = metrics::accuracy(&truth, &pred)?;
    let align = metrics::alignment_metrics(&ev.truth_landmarks, &ev.landmarks, &ev.inter_ocular)?;
    let text = metrics::report(&m.au_ids, &f1, &acc, Some(&align));
    print!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("metrics.txt"), &text)?;
        write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    }
    Ok(())
}

fn cmd_gradcheck(seeds: &[u64], entries: usize) -> CmdResult {
    let started = Instant::now();
    let opts = gradcheck::CheckOptions::default();
    let mut failed = 0;
    for &s in seeds {
        let mut results = gradcheck::op_suite(s, &opts)?;
        results.push(gradcheck::network_check(s, entries)?);
        for r in &results {
            println!("{r}");
            failed += usize::from(!r.passed());
        }
    }
    println!(
        "{failed} failures in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Validation(format!(
            "{failed} gradient checks failed"
        )));
    }
    Ok(())
}

fn cmd_synth(cfg: SynthConfig, out: &Path) -> CmdResult {
    create_dir(out)?;
    let data = synth_dataset(&cfg)?;
    let manifest = write_synth(out, &data)?;
    let snapshot = toml_string(&cfg)?;
    write_file(&out.join("synth.toml"), &snapshot)?;
    println!(
        "wrote {} samples to {}",
        data.records.len(),
        manifest.display()
    );
    Ok(())
}

fn toml_string<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    toml::to_string(v).map_err(|e| Failure::Runtime(e.to_string()))
}

/// Nearest-neighbour upscaling of a square map.
fn magnify(values: &[f64], side: usize, k: usize) -> Vec<f64> {
    let big = side * k;
    (0..big * big)
        .map(|i| values[(i / big / k) * side + (i % big) / k])
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_attention(
    cfg_args: &ConfigArgs,
    checkpoint_path: Option<&Path>,
    manifest: Option<&Path>,
    index: usize,
    image: Option<&Path>,
    landmarks: Option<&[f64]>,
    source: Source,
    scale: usize,
    out: &Path,
) -> CmdResult {
    let cfg = cfg_args.load()?;
    let mut net = match checkpoint_path {
        Some(p) => {
            let mut n = checkpoint::load(p)?;
            // Map-shaping settings may still be overridden for rendering.
            n.config.zeta = cfg.net.zeta;
            n.config.xi = cfg.net.xi;
            n
        }
        None => Network::build(cfg.net.clone())?,
    };
    let (img, lm) = match (manifest, image, landmarks) {
        (Some(m), _, _) => {
            let loaded = load_manifest(
                m,
                &LoadOptions {
                    fail_fast: true,
                    ..Default::default()
                },
            )?;
            let rec = loaded.manifest.records.get(index).ok_or_else(|| {
                Failure::Validation(format!(
                    "manifest has {} records, index {index} requested",
                    loaded.manifest.len()
                ))
            })?;
            (
                load_image(&loaded.manifest.resolve(rec))?,
                rec.landmarks.clone(),
            )
        }
        (None, Some(i), Some(l)) => (load_image(i)?, l.to_vec()),
        _ => {
            return Err(Failure::Validation(
                "give --manifest, or --image with --landmarks".into(),
            ))
        }
    };
    let ncfg = net.config.clone();
    if lm.len() != 2 * ncfg.n_align {
        return Err(Failure::Validation(format!(
            "{} landmark coordinates given, {} expected",
            lm.len(),
            2 * ncfg.n_align
        )));
    }
    let l = ncfg.l;
    let (img, lm) = fit(&img, &lm, l)?;
    net.config.attention_seed = match source {
        Source::Predicted => AttentionSeed::Predicted,
        Source::GroundTruth => AttentionSeed::GroundTruth,
    };
    let eyes = (ncfg.eye_corners[0], ncfg.eye_corners[1]);
    let truth = LandmarkSet::from_flat(&lm, eyes)?;
    let targets = Targets {
        landmarks: Tensor::new(&[1, lm.len()], lm.clone())?,
        labels: Tensor::zeros(&[1, ncfg.n_au]),
        inter_ocular: vec![truth.inter_ocular.max(1.0)],
    };
    let images = Tensor::new(&[1, 3, l, l], img.into_data())?;
    let pass = net.forward(&images, Some(&targets), false)?;
    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    let side = ncfg.map_side();
    let plane = side * side;
    let k = scale.max(1);
    let big = side * k;
    for (i, rule) in ncfg.au_rules.rules.iter().enumerate() {
        let init = magnify(
            &pass.output.initial_maps.data()[i * plane..][..plane],
            side,
            k,
        );
        let refined = magnify(
            &pass.output.refined_maps.data()[i * plane..][..plane],
            side,
            k,
        );
        save_pgm(
            &out.join(format!("au{}_initial.pgm", rule.au)),
            big,
            big,
            &init,
        )?;
        save_pgm(
            &out.join(format!("au{}_refined.pgm", rule.au)),
            big,
            big,
            &refined,
        )?;
        let pair: Vec<f64> = (0..big)
            .flat_map(|r| {
                init[r * big..][..big]
                    .iter()
                    .chain(&refined[r * big..][..big])
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        save_pgm(
            &out.join(format!("au{}_pair.pgm", rule.au)),
            2 * big,
            big,
            &pair,
        )?;
    }
    println!(
        "wrote {} attention map pairs to {}",
        ncfg.n_au,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Train { cfg, manifest, out } => cmd_train(cfg, manifest.as_deref(), out),
        Command::Eval {
            checkpoint,
            manifest,
            label_threshold,
            batch_size,
            out,
        } => cmd_eval(
            checkpoint,
            manifest,
            *label_threshold,
            *batch_size,
            out.as_deref(),
        ),
        Command::Gradcheck { seeds, entries } => cmd_gradcheck(seeds, *entries),
        Command::Synth {
            out,
            subjects,
            frames,
            side,
            seed,
            noise,
        } => cmd_synth(
            SynthConfig {
                subjects: *subjects,
                frames: *frames,
                side: *side,
                seed: *seed,
                noise: *noise,
                ..SynthConfig::default()
            },
            out,
        ),
        Command::Attention {
            cfg,
            checkpoint,
            manifest,
            index,
            image,
            landmarks,
            source,
            scale,
            out,
        } => cmd_attention(
            cfg,
            checkpoint.as_deref(),
            manifest.as_deref(),
            *index,
            image.as_deref(),
            landmarks.as_deref(),
            *source,
            *scale,
            out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
