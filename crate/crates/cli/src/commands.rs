use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lplab_core::backbone::Backbone;
use lplab_core::format::write_dataset;
use lplab_core::runner::{
    prepare_stream, run_seeds, Ablation, EvalReport, FinalState, Method, SeedOutcome, StageRecord, StreamConfig,
};
use lplab_core::synth::{pretrain_backbone, PretrainPlan, World};
use lplab_core::Scalar;
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input files (exit code 2).
    #[error("{0}")]
    Config(String),
    /// Failure while computing or writing results (exit code 3).
    #[error("{0}")]
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Lifelong few-shot prompt-tuning experiments on synthetic text streams.
#[derive(Debug, Parser)]
#[command(name = "lplab", version)]
pub struct Cli {
    /// Directory for every output file.
    #[arg(long, global = true, env = "LPLAB_OUT_DIR", default_value = "lplab-out")]
    pub out_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone and write `<out-dir>/backbone.json`.
    Pretrain(PretrainArgs),
    /// Write every stage's few-shot split and test set as JSON lines.
    GenData(GenDataArgs),
    /// Run a stream for every seed and write per-seed records and summaries.
    Run(RunArgs),
    /// Run a stream with one setting toggled, all else fixed.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Pretraining plan (TOML); the built-in plan when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Floating-point type used for training.
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Stream configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seeds, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Stream configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Method, overriding the configuration (lfpt5, pt, pt-r, ft, ewc-pt,
    /// ewc-ft, mas-pt, mas-ft, mt-pt, mt-ft).
    #[arg(long)]
    pub method: Option<Method>,
    /// Comma-separated seeds, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Pretrained backbone; defaults to `<out-dir>/backbone.json`.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Floating-point type used for prompt tuning and evaluation.
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Setting to toggle: no_kl, no_lm, no_replay or fkt.
    #[arg(long)]
    pub toggle: Ablation,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| runtime(format!("creating {}: {e}", cli.out_dir.display())))?;
    match cli.command {
        Command::Pretrain(a) => pretrain(&cli.out_dir, &a),
        Command::GenData(a) => gen_data(&cli.out_dir, &a),
        Command::Run(a) => run(&cli.out_dir, &a, None),
        Command::Ablate(a) => run(&cli.out_dir, &a.run, Some(a.toggle)),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| input(format!("reading {}: {e}", path.display())))
}

fn pretrain(out: &Path, a: &PretrainArgs) -> CliResult<()> {
    let plan = match &a.config {
        Some(p) => PretrainPlan::from_toml(&read_text(p)?).map_err(input)?,
        None => PretrainPlan::default(),
    };
    let digest = plan.digest();
    let mut manifest = RunManifest::new("pretrain", digest, Vec::new(), vec![("precision".into(), format!("{:?}", a.precision))]);
    let world = World::standard();
    let progress = |p: usize, e: usize, l: f64| log::info!("phase {p} epoch {e}: mean token loss {l:.4}");
    let path = out.join("backbone.json");
    let checksum = match a.precision {
        Precision::F32 => save_backbone(pretrain_backbone::<f32>(&world, &plan, progress).map_err(runtime)?.0, &path)?,
        Precision::F64 => save_backbone(pretrain_backbone::<f64>(&world, &plan, progress).map_err(runtime)?.0, &path)?,
    };
    manifest.inputs.push(("backbone_checksum".into(), checksum));
    manifest.outputs.push(path);
    manifest.write(out).map_err(runtime)?;
    Ok(())
}

fn save_backbone<T: Scalar>(model: Backbone<T>, path: &Path) -> CliResult<String> {
    model.save(path).map_err(runtime)?;
    Ok(model.digest())
}

fn load_config(path: &Path, seeds: &Option<Vec<u64>>) -> CliResult<StreamConfig> {
    let mut cfg = StreamConfig::from_toml(&read_text(path)?).map_err(input)?;
    if let Some(s) = seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate().map_err(input)?;
    Ok(cfg)
}

fn gen_data(out: &Path, a: &GenDataArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, &a.seeds)?;
    let world = World::standard();
    let mut manifest = RunManifest::new("gen-data", cfg.digest(), cfg.seeds.clone(), Vec::new());
    let root = out.join("data");
    for &seed in &cfg.seeds {
        let stages = prepare_stream(&cfg, &world, seed).map_err(input)?;
        for st in stages {
            let dir = root.join(format!("seed-{seed}")).join(&st.schema.domain_id);
            fs::create_dir_all(&dir).map_err(runtime)?;
            for (name, samples) in [("train", &st.split.train), ("valid", &st.split.valid), ("test", &st.split.test)] {
                let path = dir.join(format!("{name}.jsonl"));
                write_dataset(&path, samples).map_err(runtime)?;
                manifest.outputs.push(path);
            }
        }
    }
    manifest.write(&root).map_err(runtime)?;
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    manifest: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

/// Appends stage records to one JSON-lines file per seed as they arrive.
struct SeedFiles {
    manifest: String,
    files: Mutex<BTreeMap<u64, File>>,
    failed: Mutex<Option<String>>,
}

impl SeedFiles {
    fn create(dir: &Path, seeds: &[u64], manifest: &str) -> CliResult<(Self, Vec<PathBuf>)> {
        let mut files = BTreeMap::new();
        let mut paths = Vec::new();
        for &s in seeds {
            let path = dir.join(format!("seed-{s}.jsonl"));
            files.insert(s, File::create(&path).map_err(runtime)?);
            paths.push(path);
        }
        Ok((Self { manifest: manifest.to_string(), files: Mutex::new(files), failed: Mutex::new(None) }, paths))
    }

    fn record(&self, rec: &StageRecord) {
        let line = serde_json::to_string(&Tagged { manifest: &self.manifest, record: rec }).expect("records serialize");
        let mut files = self.files.lock().expect("seed files");
        let res = match files.get_mut(&rec.seed) {
            Some(f) => writeln!(f, "{line}").and_then(|_| f.flush()),
            None => Ok(()),
        };
        if let Err(e) = res {
            self.failed.lock().expect("failure slot").get_or_insert(e.to_string());
        }
    }
}

fn run(out: &Path, a: &RunArgs, toggle: Option<Ablation>) -> CliResult<()> {
    let mut cfg = load_config(&a.config, &a.seeds)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(t) = toggle {
        cfg = cfg.ablated(t);
    }
    cfg.validate().map_err(input)?;
    let backbone_path = a.backbone.clone().unwrap_or_else(|| out.join("backbone.json"));
    if !backbone_path.exists() {
        return Err(input(format!("backbone {} not found; run `lplab pretrain` first", backbone_path.display())));
    }
    match a.precision {
        Precision::F32 => run_typed(out, a, toggle, cfg, Backbone::<f32>::load(&backbone_path).map_err(input)?),
        Precision::F64 => run_typed(out, a, toggle, cfg, Backbone::<f64>::load(&backbone_path).map_err(input)?),
    }
}

fn run_typed<T: Scalar + Serialize + for<'de> serde::Deserialize<'de>>(
    out: &Path,
    a: &RunArgs,
    toggle: Option<Ablation>,
    cfg: StreamConfig,
    backbone: Backbone<T>,
) -> CliResult<()> {
    let name = match toggle {
        Some(t) => format!("{}-{}", cfg.method, t.name()),
        None => cfg.method.to_string(),
    };
    let dir = out.join(&name);
    fs::create_dir_all(&dir).map_err(runtime)?;
    let inputs = vec![
        ("backbone_checksum".to_string(), backbone.digest()),
        ("precision".to_string(), format!("{:?}", a.precision)),
    ];
    let mut manifest = RunManifest::new(&format!("run {name}"), cfg.digest(), cfg.seeds.clone(), inputs);
    let (files, paths) = SeedFiles::create(&dir, &cfg.seeds, &manifest.digest)?;
    manifest.outputs.extend(paths);
    let world = World::standard();
    let result = run_seeds(&backbone, &cfg, &world, a.workers, &|r| files.record(r));
    if let Some(e) = files.failed.lock().expect("failure slot").take() {
        return Err(runtime(format!("writing stage records: {e}")));
    }
    let outcomes = match result {
        Ok(o) => o,
        Err(e) => {
            manifest.write(&dir).map_err(runtime)?;
            return Err(runtime(format!("stream failed (records so far are in {}): {e}", dir.display())));
        }
    };
    for o in &outcomes {
        manifest.outputs.extend(save_state(&dir, o)?);
    }
    let report = EvalReport::aggregate(cfg.method, cfg.digest(), outcomes.into_iter().map(|o| o.run).collect());
    let header = format!("# manifest {}\n", manifest.digest);
    let tsv = dir.join("aggregate.tsv");
    fs::write(&tsv, format!("{header}{}", report.to_tsv())).map_err(runtime)?;
    let mut plot = format!("{header}stage\tdomain\tmetric\n");
    for (stage, domain, metric) in report.plot_points() {
        plot.push_str(&format!("{stage}\t{domain}\t{metric:.6}\n"));
    }
    let plot_path = dir.join("plot.tsv");
    fs::write(&plot_path, plot).map_err(runtime)?;
    manifest.outputs.extend([tsv, plot_path]);
    manifest.write(&dir).map_err(runtime)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn save_state<T: Scalar + Serialize + for<'de> serde::Deserialize<'de>>(
    dir: &Path,
    o: &SeedOutcome<T>,
) -> CliResult<Option<PathBuf>> {
    match &o.state {
        FinalState::Prompts(bank) => {
            let path = dir.join(format!("prompts-seed-{}.json", o.run.seed));
            bank.save(&path).map_err(runtime)?;
            Ok(Some(path))
        }
        FinalState::Model(_) => Ok(None),
    }
}
