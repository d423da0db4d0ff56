use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use ckpm_core::embeddings::KoopmanModel;
use ckpm_core::training::{curve_csv, init_model, train};
use ckpm_core::{Error, Result};

use crate::data::{self, EXTRAPOLATION_FILE, TEST_FILE, TRAIN_FILE};
use crate::eval;
use crate::experiment::{ExperimentSpec, ModelKind};
use crate::observer::Observer;
use crate::report::{content_hash, io_err, write_report, MetricsReport, Timings, TrainMetrics};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ckpm", version, about = "Compositional Koopman benchmark runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment spec as JSON; omitted keys take rope defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Block, Diag, None or KPM.
    #[arg(long, global = true)]
    pub mode: Option<ModelKind>,
    /// Evaluate on the larger extrapolation systems.
    #[arg(long, global = true)]
    pub extrapolate: bool,
    /// Koopman embedding width per object.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Control action penalty.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Metric-loss weight used by `train`.
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    /// Checkpoint to evaluate instead of `<out>/model_<mode>.json`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    #[value(name = "embedding_dim")]
    EmbeddingDim,
    #[value(name = "sysid_data")]
    SysidData,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test/extrapolation episodes and a manifest.
    Datagen,
    /// Fit the encoder and decoder on the training episodes.
    Train,
    /// Simulation error over the test (or extrapolation) episodes.
    EvalSim,
    /// Control error of open-loop or receding-horizon control.
    EvalControl,
    /// One simulation evaluation per axis value.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Summarize every report in the output directory as CSV.
    Report,
}

struct Run {
    spec: ExperimentSpec,
    out: PathBuf,
    inputs: BTreeMap<String, Vec<u8>>,
    timings: Timings,
}

impl Run {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.insert(name, bytes.clone());
        Ok(bytes)
    }

    fn episodes(&mut self, file: &str) -> Result<Vec<ckpm_core::envs::Trajectory>> {
        let path = self.data_dir().join(file);
        if !path.exists() {
            return Err(Error::Config(format!("{} not found; run datagen first", path.display())));
        }
        self.read_input(&path)?;
        data::load_split(&self.data_dir(), file)
    }

    fn checkpoint_path(&self, cli: &Cli) -> PathBuf {
        cli.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(format!("model_{}.json", self.spec.model.mode.tag())))
    }

    fn observer(&mut self, cli: &Cli) -> Result<Observer> {
        if !self.spec.model.mode.is_learned() {
            return Ok(Observer::Polynomial);
        }
        let path = self.checkpoint_path(cli);
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} not found; run train first", path.display())));
        }
        let bytes = self.read_input(&path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("checkpoint is not UTF-8: {e}")))?;
        let model = KoopmanModel::from_json(&text)?;
        if model.shape.m != self.spec.model.m {
            return Err(Error::Config(format!(
                "checkpoint has m = {}, the experiment asks for m = {}",
                model.shape.m, self.spec.model.m
            )));
        }
        if model.shape.state_dim != self.spec.env.state_dim() {
            return Err(Error::Config("checkpoint was trained on a different environment".into()));
        }
        Ok(Observer::Learned(model))
    }

    fn report(&mut self, command: &str, extrapolate: bool) -> Result<MetricsReport> {
        let portable = ExperimentSpec {
            output_dir: String::new(),
            ..self.spec.clone()
        };
        self.inputs.insert("config".into(), serde_json::to_vec(&portable)?);
        Ok(MetricsReport::new(command, &portable, extrapolate, content_hash(&self.inputs)))
    }

    fn stem(&self, command: &str, extrapolate: bool) -> String {
        let mut s = format!("{command}_{}", self.spec.model.mode.tag());
        if extrapolate {
            s.push_str("_extrap");
        }
        s
    }
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::from_json(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)?,
        None => ExperimentSpec::default(),
    };
    if let Some(out) = &cli.out {
        spec.output_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
        spec.train.seed = seed;
    }
    if let Some(mode) = cli.mode {
        spec.model.mode = mode;
    }
    if let Some(m) = cli.m {
        spec.model.m = m;
    }
    if let Some(l) = cli.lambda {
        spec.eval.action_penalty = l;
    }
    if let Some(l) = cli.lambda2 {
        spec.train.lambda2 = l;
    }
    spec.resolved()
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let spec = load_spec(cli)?;
    let mut run = Run {
        out: PathBuf::from(&spec.output_dir),
        spec,
        inputs: BTreeMap::new(),
        timings: Timings::default(),
    };
    let started = Instant::now();
    match &cli.command {
        Command::Datagen => {
            let data = data::generate(&run.spec)?;
            let manifest = data::write_dataset(&run.spec, &data, &run.data_dir())?;
            eprintln!(
                "wrote {} train / {} test / {} extrapolation episodes to {}",
                manifest.train,
                manifest.test,
                manifest.extrapolation,
                run.data_dir().display()
            );
            Ok(run.data_dir().join(data::MANIFEST_FILE))
        }
        Command::Train => {
            if !run.spec.model.mode.is_learned() {
                return Err(Error::Config("KPM has no trainable parameters".into()));
            }
            let episodes = run.episodes(TRAIN_FILE)?;
            let cfg = run.spec.train.clone();
            let mut model = init_model(&cfg, &episodes)?;
            let every = (cfg.iterations / 20).max(1);
            let outcome = train(&cfg, &episodes, model.clone(), &mut |r| {
                if r.iteration % every == 0 || r.iteration + 1 == cfg.iterations {
                    eprintln!(
                        "iter {:>6}  loss {:.5}  ae {:.5}  pred {:.5}  metric {:.5}",
                        r.iteration, r.loss_total, r.loss_ae, r.loss_pred, r.loss_metric
                    );
                }
            })?;
            run.timings.record("train", started);
            model = outcome.model;
            model.meta.insert("mode".into(), serde_json::json!(run.spec.model.mode));
            model.meta.insert("train".into(), serde_json::to_value(&cfg)?);
            let tag = run.spec.model.mode.tag();
            fs::create_dir_all(&run.out).map_err(|e| io_err(&run.out, e))?;
            let ckpt = run.out.join(format!("model_{tag}.json"));
            fs::write(&ckpt, model.to_json()?).map_err(|e| io_err(&ckpt, e))?;
            let curve = run.out.join(format!("loss_{tag}.csv"));
            fs::write(&curve, curve_csv(&outcome.curve)).map_err(|e| io_err(&curve, e))?;
            let mut report = run.report("train", false)?;
            report.train = Some(TrainMetrics {
                iterations: outcome.curve.len(),
                initial_loss: outcome.curve.first().map_or(f64::NAN, |r| r.loss_total),
                final_loss: outcome.curve.last().map_or(f64::NAN, |r| r.loss_total),
                param_count: model.param_count(),
            });
            let stem = run.stem("train", false);
            write_report(&run.out, &stem, &report, &run.timings)
        }
        Command::EvalSim => {
            let file = if cli.extrapolate { EXTRAPOLATION_FILE } else { TEST_FILE };
            let episodes = run.episodes(file)?;
            let observer = run.observer(cli)?;
            let metrics = eval::eval_sim(&run.spec, &observer, &episodes, eval::default_transitions(&run.spec), 0)?;
            run.timings.record("eval_sim", started);
            let mut report = run.report("eval-sim", cli.extrapolate)?;
            report.simulation = Some(metrics);
            let stem = run.stem("eval_sim", cli.extrapolate);
            write_report(&run.out, &stem, &report, &run.timings)
        }
        Command::EvalControl => {
            let file = if cli.extrapolate { EXTRAPOLATION_FILE } else { TEST_FILE };
            let episodes = run.episodes(file)?;
            let observer = run.observer(cli)?;
            let metrics = eval::eval_control(&run.spec, &observer, &episodes)?;
            run.timings.record("eval_control", started);
            let mut report = run.report("eval-control", cli.extrapolate)?;
            report.control = Some(metrics);
            let stem = run.stem("eval_control", cli.extrapolate);
            write_report(&run.out, &stem, &report, &run.timings)
        }
        Command::Sweep { axis } => {
            let test = run.episodes(TEST_FILE)?;
            let metrics = match axis {
                SweepAxis::SysidData => {
                    let observer = run.observer(cli)?;
                    eval::sweep_sysid_data(&run.spec, &observer, &test)?
                }
                SweepAxis::EmbeddingDim => {
                    let train_set = run.episodes(TRAIN_FILE)?;
                    eval::sweep_embedding_dim(&run.spec, &train_set, &test, &mut |_, _| {})?
                }
            };
            run.timings.record("sweep", started);
            let mut report = run.report("sweep", false)?;
            let stem = run.stem(&format!("sweep_{}", metrics.axis), false);
            report.sweep = Some(metrics);
            write_report(&run.out, &stem, &report, &run.timings)
        }
        Command::Report => summarize(&run.out),
    }
}

/// Collects every report in `dir` into `summary.csv`, one row per report.
pub fn summarize(dir: &Path) -> Result<PathBuf> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".json") && !name.ends_with(".timings.json") && !name.starts_with("model_")
        })
        .collect();
    names.sort();
    let mut out = String::from("report,command,mode,extrapolate,sim_final_median,control_median,sweep_axis\n");
    for path in &names {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let Ok(r) = serde_json::from_str::<MetricsReport>(&text) else { continue };
        let sim = r.simulation.as_ref().map(|s| s.final_median().to_string()).unwrap_or_default();
        let ctl = r.control.as_ref().map(|c| c.summary.median.to_string()).unwrap_or_default();
        let axis = r.sweep.as_ref().map(|s| s.axis.clone()).unwrap_or_default();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(out, "{name},{},{},{},{sim},{ctl},{axis}", r.command, r.mode, r.extrapolate);
    }
    let target = dir.join("summary.csv");
    fs::write(&target, out).map_err(|e| io_err(&target, e))?;
    Ok(target)
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
