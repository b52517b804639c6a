//! Command-line front end: data generation, training, detection, evaluation
//! and receptive-field inspection.
//!
//! Settings resolve as defaults, then the `--config` TOML file, then flags.
//! Every command prints its resolved settings to stderr before running.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{self, load_image, parse_manifest, synth_generate, Split, SynthConfig, DEFAULT_CLASS_NAMES};
use crate::dmsnet::{train_proposal, Branch, DmsNet, LossRecord, ProposalTrainConfig, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Benchmark, EvalConfig};
use crate::fusionnet::{
    read_crop_cache, sample_crop_pool, train_classifier, write_crop_cache, ClassifierLossRecord,
    ClassifierTrainConfig, CropSource, FusionNet,
};
use crate::nn::InitScheme;
use crate::pipeline::{detect_batch, write_detections, PipelineConfig};

/// Every tunable setting of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Network initialisation, sampling and synthesis derive from it.
    pub seed: u64,
    pub init: InitScheme,
    /// Worker cap for detection (0: one per core).
    pub threads: usize,
    /// Save model and optimiser state every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Names of sign classes 1..=N in detection files.
    pub class_names: Vec<String>,
    pub synth: SynthConfig,
    pub proposal: ProposalTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            init: InitScheme::He,
            threads: 0,
            checkpoint_every: 1000,
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            synth: SynthConfig::default(),
            proposal: ProposalTrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Copies the master seed into the component configs.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.proposal.seed = self.seed;
        self.classifier.seed = self.seed.wrapping_add(1);
    }

    pub fn dms_init_seed(&self) -> u64 {
        self.seed
    }

    pub fn fusion_init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsr", version, about = "Traffic sign detection: train, detect, evaluate")]
pub struct Cli {
    /// TOML settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchmarkArg {
    Standard,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset (images/ plus manifest.txt).
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train the proposal network.
    TrainProposal {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        /// Continue from `OUT` and its `.state` sidecar.
        #[arg(long)]
        resume: bool,
    },
    /// Train the crop classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Crop pack to reuse if present, or to write after sampling.
        #[arg(long, value_name = "FILE")]
        crop_cache: Option<PathBuf>,
    },
    /// Detect signs in every PNG/JPEG image of a directory.
    Detect {
        #[arg(long)]
        dms: PathBuf,
        #[arg(long)]
        fusion: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// Timing report (JSON); defaults to `OUT.timing.json`.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Score a detection file against a manifest.
    Evaluate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        benchmark: Option<BenchmarkArg>,
        /// Also write CSV tables, PR curves and a JSON summary here.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Print the receptive field of each proposal head.
    RfCalc {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        branch: Option<u8>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("TSR_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Defaults, then the config file, then the flags that apply to every command.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::TrainProposal { iters: Some(n), .. } => cfg.proposal.iterations = *n,
        Command::TrainClassifier { iters, batch_size, .. } => {
            if let Some(n) = iters {
                cfg.classifier.iterations = *n;
            }
            if let Some(b) = batch_size {
                cfg.classifier.batch_size = *b;
            }
        }
        Command::Detect { top_k, threads, .. } => {
            if let Some(k) = top_k {
                cfg.pipeline.proposal_top_k = *k;
            }
            if let Some(t) = threads {
                cfg.threads = *t;
            }
        }
        Command::Evaluate { benchmark: Some(b), .. } => {
            cfg.eval.benchmark = match b {
                BenchmarkArg::Standard => Benchmark::Standard,
                BenchmarkArg::Full => Benchmark::Full,
            }
        }
        _ => {}
    }
    cfg.propagate_seed();
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    eprintln!("# resolved config\n{}", cfg.to_toml());
    match &cli.command {
        Command::SynthGen { out, count, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let m = synth_generate(&cfg.synth, *count, out, split)?;
            log::info!("wrote {} images to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::TrainProposal { data, out, resume, .. } => run_train_proposal(&cfg, data, out, *resume),
        Command::TrainClassifier { data, out, crop_cache, .. } => {
            run_train_classifier(&cfg, data, out, crop_cache.as_deref())
        }
        Command::Detect { dms, fusion, images, out, report, .. } => {
            run_detect(&cfg, dms, fusion, images, out, report.as_deref())
        }
        Command::Evaluate { detections, data, out_dir, .. } => {
            run_evaluate(&cfg, detections, data, out_dir.as_deref())
        }
        Command::RfCalc { branch } => {
            let dms = DmsNet::build(0)?;
            let branches = match branch {
                Some(n) => vec![Branch::from_number(*n)?],
                None => Branch::ALL.to_vec(),
            };
            for b in branches {
                let rf = dms.rf(b);
                println!("branch={} window={} stride={} offset={}", b.number(), rf.window, rf.stride, rf.offset);
            }
            Ok(())
        }
    }
}

/// `model.tsrm` -> `model.tsrm.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

fn run_train_proposal(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let manifest = parse_manifest(data)?;
    let samples: Vec<TrainSample> = data::load_dataset(&manifest)?
        .into_iter()
        .map(|l| TrainSample {
            image: l.image,
            boxes: l.signs.iter().map(|s| s.0).collect(),
        })
        .collect();
    let state_path = sidecar(out, "state");
    let (mut dms, state) = if resume {
        let mut dms = DmsNet::load(out)?;
        let st = dms.network_mut().load_state(&state_path)?;
        log::info!("resuming after iteration {}", st.iteration);
        (dms, Some(st))
    } else {
        (DmsNet::build_with(cfg.init, cfg.dms_init_seed())?, None)
    };
    let loss_path = sidecar(out, "loss.csv");
    let mut losses = csv_writer(&loss_path, resume)?;
    let every = cfg.checkpoint_every;
    let result = train_proposal(&mut dms, &samples, &cfg.proposal, state.as_ref(), |net, st, rec: &LossRecord| {
        losses.serialize(rec).map_err(csv_err(&loss_path))?;
        if rec.iteration % 100 == 0 {
            log::info!("iteration {} head {} loss {:.4}", rec.iteration, rec.active_branch, rec.mean_selected_loss);
        }
        if every > 0 && rec.iteration % every == 0 {
            losses.flush().map_err(|e| Error::io(&loss_path, e))?;
            net.save(out)?;
            net.network().save_state(&state_path, st)?;
        }
        Ok(())
    });
    losses.flush().map_err(|e| Error::io(&loss_path, e))?;
    match result {
        Ok(log) => {
            dms.save(out)?;
            if let Some(last) = log.last() {
                log::info!("finished at iteration {}", last.iteration);
            }
            Ok(())
        }
        Err(e @ Error::Numeric(_)) => {
            let dump = sidecar(out, "failed");
            dms.save(&dump)?;
            log::error!("numeric failure; network dumped to {}", dump.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn run_train_classifier(cfg: &RunConfig, data: &Path, out: &Path, cache: Option<&Path>) -> Result<()> {
    let manifest = parse_manifest(data)?;
    let sources: Vec<CropSource> = data::load_dataset(&manifest)?
        .into_iter()
        .map(|l| CropSource {
            image: l.image,
            signs: l.signs,
        })
        .collect();
    let pool = match cache {
        Some(p) if p.exists() => {
            log::info!("reading crops from {}", p.display());
            read_crop_cache(p)?
        }
        _ => {
            let pool = sample_crop_pool(&sources, &cfg.classifier.crops, cfg.classifier.seed)?;
            if let Some(p) = cache {
                write_crop_cache(p, &pool)?;
            }
            pool
        }
    };
    log::info!("{} training crops", pool.len());
    let mut fusion = FusionNet::build_with(cfg.init, cfg.fusion_init_seed())?;
    let loss_path = sidecar(out, "loss.csv");
    let mut losses = csv_writer(&loss_path, false)?;
    let every = cfg.checkpoint_every;
    let result = train_classifier(&mut fusion, pool, &sources, &cfg.classifier, |net, rec: &ClassifierLossRecord| {
        losses.serialize(rec).map_err(csv_err(&loss_path))?;
        if rec.iteration % 50 == 0 {
            log::info!("iteration {} loss {:.4} batch accuracy {:.3}", rec.iteration, rec.loss, rec.batch_accuracy);
        }
        if every > 0 && rec.iteration % every == 0 {
            net.save(out)?;
        }
        Ok(())
    });
    losses.flush().map_err(|e| Error::io(&loss_path, e))?;
    match result {
        Ok((_, mined)) => {
            log::info!("bootstrap added {mined} crops");
            fusion.save(out)
        }
        Err(e @ Error::Numeric(_)) => {
            let dump = sidecar(out, "failed");
            fusion.save(&dump)?;
            log::error!("numeric failure; network dumped to {}", dump.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// PNG and JPEG files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn run_detect(cfg: &RunConfig, dms: &Path, fusion: &Path, images: &Path, out: &Path, report: Option<&Path>) -> Result<()> {
    let dms = DmsNet::load(dms)?;
    let fusion = FusionNet::load(fusion)?;
    let paths = list_images(images)?;
    let ids: Vec<String> = paths.iter().map(|p| data::image_id_of(p)).collect();
    let batch = detect_batch(&ids, |i| load_image(&paths[i]), &dms, &fusion, &cfg.pipeline, cfg.threads)?;
    let mut f = std::io::BufWriter::new(File::create(out).map_err(|e| Error::io(out, e))?);
    write_detections(&mut f, &batch.detections(), &cfg.class_names).map_err(|e| Error::io(out, e))?;
    let report_path = report.map_or_else(|| sidecar(out, "timing.json"), Path::to_path_buf);
    let json = serde_json::to_string_pretty(&batch).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    let n = batch.images.len().max(1) as f64;
    let mean = |f: fn(&crate::pipeline::StageTiming) -> f64| batch.images.iter().map(|r| f(&r.timing)).sum::<f64>() / n;
    eprintln!(
        "{} images, {} failed, {} detections; mean ms/image: proposal {:.1}, classification {:.1}, total {:.1}",
        batch.images.len(),
        batch.failures(),
        batch.images.iter().map(|r| r.detections.len()).sum::<usize>(),
        mean(|t| t.proposal_ms),
        mean(|t| t.classification_ms),
        mean(|t| t.total_ms),
    );
    Ok(())
}

fn run_evaluate(cfg: &RunConfig, detections: &Path, data: &Path, out_dir: Option<&Path>) -> Result<()> {
    let manifest = parse_manifest(data)?;
    let dets = crate::pipeline::read_detections(detections, &manifest.class_names)?;
    let annotations: Vec<_> = manifest.annotations().cloned().collect();
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id()).collect();
    let report = evaluate(&dets, &annotations, &ids, &manifest.class_names, &cfg.eval);
    print!("{}", report.to_text());
    if let Some(dir) = out_dir {
        report.write_dir(dir)?;
    }
    Ok(())
}
