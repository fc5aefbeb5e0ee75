use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viewbench::binning::{self, BinSpec, BuildOptions, SubsetManifest, DEFAULT_BIN_CENTERS};
use viewbench::featstore::Upsample;
use viewbench::harness::{self, Difficulty, HarnessError, ModelConfig, OverlaySample, RunConfig};
use viewbench::membank::{self, BankParams, BankSource, SamplingPolicy};
use viewbench::pose;
use viewbench::synthetic::{self, SyntheticSpec};

/// Viewpoint-robustness benchmark for retrieval-based dense segmentation.
#[derive(Parser)]
#[command(name = "viewbench", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin the frames of one COLMAP reconstruction and report the selection.
    BinViews {
        /// COLMAP `images.txt`.
        images_txt: PathBuf,
        #[command(flatten)]
        binning: BinningArgs,
    },
    /// Curate the evaluation subset from a raw capture tree.
    BuildSubset {
        /// Root holding `<class>/<instance>/{images,masks,sparse}`.
        #[arg(long)]
        source: PathBuf,
        /// Output directory for images, masks, manifest.toml and exclusions.tsv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        binning: BinningArgs,
        /// Keep only class directories whose size in GB lies in LO-HI, e.g. 1-6.
        #[arg(long, value_name = "LO-HI", value_parser = parse_size_range)]
        size_filter_gb: Option<(u64, u64)>,
        /// Source masks are foreground/background; write class ids instead.
        #[arg(long)]
        binary_masks: bool,
    },
    /// Per-class angular selection error of a subset manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build one memory bank and save it as a snapshot.
    BuildBank {
        #[command(flatten)]
        run: RunArgs,
        /// Model whose features fill the bank.
        #[arg(long)]
        bank_model: String,
        /// Difficulty whose reference bins fill the bank.
        #[arg(long, default_value = "Extreme")]
        bank_difficulty: Difficulty,
        /// Snapshot path; provenance goes to `<out>.prov.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Experiment A: every difficulty at one bank capacity.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Experiment B: degradation curves and breaking points on the Extreme split.
    BreakingPoint {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Experiment C: repeat Experiment A per capacity and report gains.
    MemorySweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Input, ground-truth, prediction and difference images for sampled frames.
    Overlays {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "Extreme")]
        overlay_difficulty: Difficulty,
        /// Validation frames sampled per model.
        #[arg(long, default_value_t = 4)]
        per_model: usize,
        /// Experiment directory holding `predictions/`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write a small synthetic subset with features, for smoke runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Model names; one feature tree each.
        #[arg(long, value_delimiter = ',', default_value = "synthetic")]
        models: Vec<String>,
        /// Feature rotation per degree of viewpoint change, in radians.
        #[arg(long, default_value_t = 0.01)]
        drift: f32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Collect existing experiment outputs into one markdown report.
    Report {
        /// Results root; defaults to the config's output root.
        #[arg(long)]
        output_root: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BinningArgs {
    /// Bin centers in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BIN_CENTERS)]
    bins: Vec<f64>,
    /// Maximum absolute selection error in degrees.
    #[arg(long, default_value_t = binning::DEFAULT_TOLERANCE_DEG)]
    tolerance: f64,
}

/// Run settings; each flag overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Root the manifest's paths are relative to.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Feature root of a model as NAME=DIR; repeatable. Replaces configured models.
    #[arg(long = "model", value_name = "NAME=DIR", value_parser = parse_model)]
    models: Vec<(String, PathBuf)>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    capacities: Option<Vec<usize>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Difficulties to run; repeatable or comma separated.
    #[arg(long = "difficulty", value_delimiter = ',')]
    difficulties: Vec<Difficulty>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    /// `bilinear` or `nearest`.
    #[arg(long, value_parser = parse_upsample)]
    upsample: Option<Upsample>,
    /// `uniform` or `class_balanced`.
    #[arg(long, value_parser = parse_sampling)]
    sampling: Option<SamplingPolicy>,
    #[arg(long)]
    no_save_predictions: bool,
}

fn parse_model(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => {
            Ok((name.to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

fn parse_upsample(s: &str) -> Result<Upsample, String> {
    match s {
        "bilinear" => Ok(Upsample::Bilinear),
        "nearest" => Ok(Upsample::Nearest),
        _ => Err(format!("unknown upsample mode {s:?}")),
    }
}

fn parse_sampling(s: &str) -> Result<SamplingPolicy, String> {
    match s {
        "uniform" => Ok(SamplingPolicy::Uniform),
        "class_balanced" => Ok(SamplingPolicy::ClassBalanced),
        _ => Err(format!("unknown sampling policy {s:?}")),
    }
}

fn parse_size_range(s: &str) -> Result<(u64, u64), String> {
    const GB: u64 = 1 << 30;
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("expected LO-HI, got {s:?}"))?;
    let lo: u64 = lo.trim().parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi: u64 = hi.trim().parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
    if lo > hi {
        return Err(format!("empty range {s:?}"));
    }
    Ok((lo * GB, hi * GB))
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(msg) => Failure::Usage(msg),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

impl RunArgs {
    /// Config file, then the output-root environment variable, then flags.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let manifest = self.manifest.clone().ok_or_else(|| {
                    Failure::Usage("--manifest is required without --config".into())
                })?;
                let out = self.output_root.clone().unwrap_or_else(|| PathBuf::from("results"));
                RunConfig::new(manifest, out)
            }
        };
        cfg.apply_env();
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = &self.data_root {
            cfg.data_root = Some(v.clone());
        }
        if let Some(v) = &self.output_root {
            cfg.output_root = v.clone();
        }
        if !self.models.is_empty() {
            cfg.models = self
                .models
                .iter()
                .map(|(n, d)| (n.clone(), ModelConfig { features: d.clone() }))
                .collect();
        }
        if let Some(v) = self.capacity {
            cfg.capacity = v;
        }
        if let Some(v) = &self.capacities {
            cfg.capacities = v.clone();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if !self.difficulties.is_empty() {
            cfg.difficulties = self.difficulties.clone();
        }
        if let Some(v) = self.shards {
            cfg.shards = v;
        }
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = v;
        }
        if let Some(v) = self.upsample {
            cfg.upsample = v;
        }
        if let Some(v) = self.sampling {
            cfg.sampling = v;
        }
        if self.no_save_predictions {
            cfg.save_predictions = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn bin_spec(args: &BinningArgs) -> Result<BinSpec, Failure> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(Failure::Usage("--tolerance must be positive".into()));
    }
    BinSpec::new(args.bins.clone()).map_err(|e| Failure::Usage(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn stdout(text: &str) -> Result<(), Failure> {
    io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| data(format!("stdout: {e}")))
}

fn bin_views(images_txt: &Path, args: &BinningArgs) -> Result<(), Failure> {
    let spec = bin_spec(args)?;
    let file = std::fs::File::open(images_txt)
        .map_err(|e| data(format!("{}: {e}", images_txt.display())))?;
    let poses = pose::parse_colmap_images(io::BufReader::new(file)).map_err(data)?;
    let reference = pose::reference_pose(&poses, None)
        .ok_or_else(|| Failure::Data(format!("{}: no poses", images_txt.display())))?;
    let angles = pose::relative_angles(&poses, reference);
    let assignment = binning::assign_bins(&images_txt.display().to_string(), &angles, &spec);
    let validity = binning::validate_instance(&assignment, args.tolerance);

    let mut out = String::from("bin_deg\timage_id\ttheta_deg\terror_deg\n");
    for slot in &assignment.bins {
        match slot.pick {
            Some(p) => out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                slot.center, p.frame, p.theta_deg, p.error_deg
            )),
            None => out.push_str(&format!("{}\t-\t-\t-\n", slot.center)),
        }
    }
    out.push_str(&format!(
        "# reference image {}; {}; max |error| {:.6} deg (tolerance {})\n",
        reference.image_id,
        if validity.valid { "valid" } else { "invalid" },
        validity.max_abs_error_deg,
        args.tolerance
    ));
    stdout(&out)
}

fn build_subset(
    source: &Path,
    out: &Path,
    args: &BinningArgs,
    size_filter: Option<(u64, u64)>,
    binary_masks: bool,
) -> Result<(), Failure> {
    let spec = bin_spec(args)?;
    let opts = BuildOptions {
        category_size_bytes: size_filter,
    };
    let outcome = binning::build_manifest(source, &spec, args.tolerance, &opts).map_err(data)?;
    let manifest =
        binning::materialize_subset(&outcome.manifest, source, out, binary_masks).map_err(data)?;
    std::fs::create_dir_all(out).map_err(|e| data(format!("{}: {e}", out.display())))?;
    manifest.save(&out.join("manifest.toml")).map_err(data)?;
    write_text(
        &out.join("exclusions.tsv"),
        &binning::format_exclusions(&outcome.exclusions),
    )?;
    log::info!(
        "{} instances in {} classes, {} excluded",
        manifest.num_instances(),
        manifest.categories.len(),
        outcome.exclusions.len()
    );
    Ok(())
}

fn stats(manifest: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let manifest = SubsetManifest::load(manifest).map_err(data)?;
    let csv = binning::angle_stats(&manifest).to_csv();
    match out {
        Some(path) => write_text(path, &csv),
        None => stdout(&csv),
    }
}

fn build_bank(cfg: &RunConfig, model: &str, difficulty: Difficulty, out: &Path) -> Result<(), Failure> {
    let model_cfg = cfg
        .models
        .get(model)
        .ok_or_else(|| Failure::Usage(format!("model {model:?} is not configured")))?;
    let manifest = SubsetManifest::load(&cfg.manifest).map_err(data)?;
    let source = BankSource {
        data_root: cfg.data_root(),
        feature_root: model_cfg.features.clone(),
    };
    let bank = membank::build_bank(
        &manifest,
        &source,
        difficulty.reference_bins(),
        &BankParams {
            capacity: cfg.capacity,
            seed: cfg.seed,
            policy: cfg.sampling,
        },
    )
    .map_err(data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    bank.save_snapshot(out).map_err(data)?;
    log::info!("{} entries of dim {} written to {}", bank.len(), bank.dim(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::BinViews { images_txt, binning } => bin_views(&images_txt, &binning),
        Command::BuildSubset {
            source,
            out,
            binning,
            size_filter_gb,
            binary_masks,
        } => build_subset(&source, &out, &binning, size_filter_gb, binary_masks),
        Command::Stats { manifest, out } => stats(&manifest, out.as_deref()),
        Command::BuildBank {
            run,
            bank_model,
            bank_difficulty,
            out,
        } => build_bank(&run.resolve()?, &bank_model, bank_difficulty, &out),
        Command::Evaluate { run } => {
            let cfg = run.resolve()?;
            let res = harness::run_experiment_a(&cfg)?;
            log::info!("results in {}", res.out_dir.display());
            Ok(())
        }
        Command::BreakingPoint { run } => {
            let cfg = run.resolve()?;
            let res = harness::run_experiment_b(&cfg)?;
            for c in &res.curves {
                log::info!(
                    "{}: breaking point {}, biggest drop {:.4}",
                    c.model,
                    c.breaking.bin.map_or("None".to_string(), |b| format!("{b}")),
                    c.breaking.biggest_drop
                );
            }
            Ok(())
        }
        Command::MemorySweep { run } => {
            let cfg = run.resolve()?;
            let res = harness::run_experiment_c(&cfg)?;
            log::info!("results in {}", res.out_dir.display());
            Ok(())
        }
        Command::Overlays {
            run,
            overlay_difficulty,
            per_model,
            predictions,
        } => {
            let cfg = run.resolve()?;
            let summary = harness::emit_overlays(
                &cfg,
                &OverlaySample {
                    difficulty: overlay_difficulty,
                    per_model,
                    seed: cfg.seed,
                    predictions_dir: predictions,
                },
            )?;
            log::info!(
                "{} overlays written, {} skipped",
                summary.artifacts.len(),
                summary.skipped.len()
            );
            Ok(())
        }
        Command::Synth {
            out,
            models,
            drift,
            seed,
        } => {
            let spec = SyntheticSpec {
                models,
                view_drift: drift,
                jitter: 0.2,
                seed,
                ..SyntheticSpec::default()
            };
            let data = synthetic::generate(&out, &spec).map_err(data)?;
            let mut toml = format!(
                "manifest = \"manifest.toml\"\noutput_root = \"results\"\ncapacities = [500, 1000, 2000]\ncapacity = 2000\n"
            );
            for (name, root) in &data.feature_roots {
                let rel = root.strip_prefix(&out).unwrap_or(root);
                toml.push_str(&format!("\n[models.{name:?}]\nfeatures = {:?}\n", rel.display().to_string()));
            }
            write_text(&out.join("run.toml"), &toml)
        }
        Command::Report {
            output_root,
            config,
        } => {
            let root = match (output_root, config) {
                (Some(root), _) => root,
                (None, Some(path)) => {
                    let mut cfg = RunConfig::load(&path)?;
                    cfg.apply_env();
                    cfg.output_root
                }
                (None, None) => {
                    return Err(Failure::Usage("report needs --output-root or --config".into()))
                }
            };
            let text = harness::report(&root)?;
            write_text(&root.join("report.md"), &text)?;
            stdout(&text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
