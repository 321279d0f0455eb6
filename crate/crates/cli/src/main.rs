use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use plotters::prelude::*;

use softbeam::beam::MapMode;
use softbeam::metrics::{DecodeMode, EvalReport};
use softbeam::runner::{self, DecodeKind, DecodeRequest, GenSpec, ScoreMode, TrainConfig};
use softbeam::tasks::{TaggingSpec, TransductionSpec};

#[derive(Parser)]
#[command(
    name = "softbeam",
    version,
    about = "Search-aware sequence models trained through a relaxed beam search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch with teacher forcing or self-normalization.
    Pretrain(TrainArgs),
    /// Search-aware training from a warm-start checkpoint.
    Train(TrainArgs),
    /// Decode a corpus with a checkpoint and score the output.
    Decode(DecodeArgs),
    /// Score a predictions file against a corpus.
    Eval(EvalArgs),
    /// Render the result tables from the run directories under a root.
    Report(ReportArgs),
    /// Finite-difference gradient checks of every objective.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic train/dev corpus pair.
    GenData(GenArgs),
    /// Plot training curves from a train.log as SVG.
    Plot(PlotArgs),
}

/// Command-line overrides, one per config key.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    dev: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    /// unidirectional | bidirectional
    #[arg(long)]
    encoder: Option<String>,
    /// content | fixed-position
    #[arg(long)]
    attention: Option<String>,
    /// local | global
    #[arg(long)]
    normalization: Option<String>,
    /// teacher-forcing | self-normalized | soft-beam
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    warm_start: Option<String>,
    #[arg(long)]
    beam_size: Option<String>,
    #[arg(long)]
    alpha0: Option<String>,
    #[arg(long)]
    alpha_growth: Option<String>,
    #[arg(long)]
    alpha_max: Option<String>,
    #[arg(long)]
    decode_alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    restarts: Option<String>,
    /// accuracy | bleu
    #[arg(long)]
    dev_metric: Option<String>,
    /// committed | soft-states
    #[arg(long)]
    map_mode: Option<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> [(&'static str, &Option<String>); 25] {
        [
            ("task", &self.task),
            ("train", &self.train),
            ("dev", &self.dev),
            ("embed_dim", &self.embed_dim),
            ("hidden_dim", &self.hidden_dim),
            ("encoder", &self.encoder),
            ("attention", &self.attention),
            ("normalization", &self.normalization),
            ("objective", &self.objective),
            ("warm_start", &self.warm_start),
            ("beam_size", &self.beam_size),
            ("alpha0", &self.alpha0),
            ("alpha_growth", &self.alpha_growth),
            ("alpha_max", &self.alpha_max),
            ("decode_alpha", &self.decode_alpha),
            ("lambda", &self.lambda),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("clip", &self.clip),
            ("seed", &self.seed),
            ("restarts", &self.restarts),
            ("dev_metric", &self.dev_metric),
            ("map_mode", &self.map_mode),
        ]
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to a name derived from the config under $SOFTBEAM_RUN_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigArgs,
}

impl TrainArgs {
    fn resolve(&self, default_objective: &str) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => {
                let o = &self.overrides;
                let (Some(task), Some(train), Some(dev)) = (&o.task, &o.train, &o.dev) else {
                    return Err(softbeam::Error::Config(
                        "need --config or all of --task, --train, --dev".into(),
                    )
                    .into());
                };
                TrainConfig::new(task.parse()?, train.into(), dev.into())
            }
        };
        if self.overrides.objective.is_none()
            && (self.config.is_none() || default_objective == "soft-beam")
        {
            cfg.set("objective", default_objective)?;
        }
        for (key, value) in self.overrides.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| runner::run_root().join(cfg.run_name()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeModeArg {
    Greedy,
    Beam,
    SoftMap,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoresArg {
    Normalized,
    Unnormalized,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapModeArg {
    Committed,
    SoftStates,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "beam")]
    mode: DecodeModeArg,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    /// Peakedness for soft-map decoding.
    #[arg(long, default_value_t = 1000.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "committed")]
    map_mode: MapModeArg,
    /// Score mode; defaults to the checkpoint's own.
    #[arg(long, value_enum)]
    scores: Option<ScoresArg>,
    /// Write predictions here, one sequence per line.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Label stored in the report: pretrain-greedy, pretrain-beam, locally-normalized, globally-normalized.
    #[arg(long, default_value = "pretrain-beam")]
    label: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of run directories; defaults to $SOFTBEAM_RUN_DIR or ./runs.
    #[arg(long)]
    root: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Tagging,
    Transduction,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Output directory for train.txt and dev.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train_count: usize,
    #[arg(long, default_value_t = 200)]
    dev_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Tagging: fraction of ambiguous words.
    #[arg(long)]
    ambiguity_rate: Option<f64>,
    /// Tagging: number of mode markers.
    #[arg(long)]
    modes: Option<usize>,
    /// Transduction: reversed block size minus one.
    #[arg(long)]
    reorder_window: Option<usize>,
    /// Transduction: copy instead of rewriting.
    #[arg(long)]
    identity_rewrite: bool,
    /// Transduction: maximum output length including EOS.
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// A train.log written by pretrain or train.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn print_report(r: &EvalReport, json: bool) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(r)?);
    } else {
        let mut line = format!(
            "mode={} task={} count={} accuracy={:.4}",
            r.mode.label(),
            r.task,
            r.count,
            r.accuracy
        );
        if r.task == softbeam::tasks::TaskKind::Transduction {
            line += &format!(" bleu={:.2} length_ratio={:.3}", r.bleu, r.length_ratio);
        }
        println!("{line}");
    }
    Ok(())
}

fn gen_spec(a: &GenArgs) -> GenSpec {
    match a.task {
        TaskArg::Tagging => {
            let d = TaggingSpec::default();
            GenSpec::Tagging(TaggingSpec {
                min_len: a.min_len.unwrap_or(d.min_len),
                max_len: a.max_len.unwrap_or(d.max_len),
                vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
                ambiguity_rate: a.ambiguity_rate.unwrap_or(d.ambiguity_rate),
                modes: a.modes.unwrap_or(d.modes),
                count: a.train_count,
                seed: a.seed,
            })
        }
        TaskArg::Transduction => {
            let d = TransductionSpec::default();
            GenSpec::Transduction(TransductionSpec {
                min_len: a.min_len.unwrap_or(d.min_len),
                max_len: a.max_len.unwrap_or(d.max_len),
                vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
                reorder_window: a.reorder_window.unwrap_or(d.reorder_window),
                identity_rewrite: a.identity_rewrite,
                t_max: a.t_max.unwrap_or(d.t_max),
                count: a.train_count,
                seed: a.seed,
            })
        }
    }
}

fn plot(log: &Path, out: &Path) -> anyhow::Result<()> {
    let records = runner::read_log(log)?;
    if records.is_empty() {
        bail!(softbeam::Error::Data(format!(
            "{}: no epoch records",
            log.display()
        )));
    }
    let restarts = records.iter().map(|r| r.restart).max().unwrap_or(0) + 1;
    let epochs = records.iter().map(|r| r.epoch).max().unwrap_or(0).max(1);
    let max_loss = records
        .iter()
        .map(|r| r.train_loss)
        .fold(f64::MIN, f64::max)
        .max(1e-9);
    let max_dev = records
        .iter()
        .map(|r| r.dev_metric)
        .fold(f64::MIN, f64::max)
        .max(1e-9);

    let root = SVGBackend::new(out, (960, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let (left, right) = root.split_horizontally(480);
    for (area, title, max, pick) in [
        (
            &left,
            "train loss",
            max_loss,
            (|r: &softbeam::train::EpochRecord| r.train_loss) as fn(&_) -> f64,
        ),
        (
            &right,
            "dev metric",
            max_dev,
            |r: &softbeam::train::EpochRecord| r.dev_metric,
        ),
    ] {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0usize..epochs, 0.0..max * 1.05)?;
        chart.configure_mesh().x_desc("epoch").draw()?;
        for r in 0..restarts {
            let color = Palette99::pick(r);
            chart
                .draw_series(LineSeries::new(
                    records
                        .iter()
                        .filter(|x| x.restart == r)
                        .map(|x| (x.epoch, pick(x))),
                    color.stroke_width(2),
                ))?
                .label(format!("restart {r}"));
        }
    }
    root.present()
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve("teacher-forcing")?;
            let out = args.out_dir(&cfg);
            let summary = runner::cmd_pretrain(&cfg, &out)?;
            println!("run={}", out.display());
            for r in &summary.reports {
                print_report(r, false)?;
            }
        }
        Command::Train(args) => {
            let cfg = args.resolve("soft-beam")?;
            let out = args.out_dir(&cfg);
            let summary = runner::cmd_train_search_aware(&cfg, &out)?;
            println!("run={}", out.display());
            for r in &summary.reports {
                print_report(r, false)?;
            }
        }
        Command::Decode(a) => {
            let req = DecodeRequest {
                checkpoint: a.checkpoint,
                corpus: a.corpus,
                kind: match a.mode {
                    DecodeModeArg::Greedy => DecodeKind::Greedy,
                    DecodeModeArg::Beam => DecodeKind::Beam,
                    DecodeModeArg::SoftMap => DecodeKind::SoftMap,
                },
                k: a.beam_size,
                alpha: a.alpha,
                map_mode: match a.map_mode {
                    MapModeArg::Committed => MapMode::Committed,
                    MapModeArg::SoftStates => MapMode::SoftStates,
                },
                scores: a.scores.map(|s| match s {
                    ScoresArg::Normalized => ScoreMode::Normalized,
                    ScoresArg::Unnormalized => ScoreMode::Unnormalized,
                }),
            };
            let (corpus, preds, report) = runner::cmd_decode(&req)?;
            if let Some(path) = &a.output {
                runner::write_predictions(&corpus, &preds, path)?;
            }
            print_report(&report, a.json)?;
        }
        Command::Eval(a) => {
            let mode = DecodeMode::ALL
                .into_iter()
                .find(|m| m.label() == a.label)
                .ok_or_else(|| softbeam::Error::Config(format!("unknown label {:?}", a.label)))?;
            let report = runner::cmd_eval(&a.corpus, &a.predictions, mode)?;
            print_report(&report, a.json)?;
        }
        Command::Report(a) => {
            let root = a.root.unwrap_or_else(runner::run_root);
            for r in runner::cmd_report(&root)? {
                println!("{}", r.text);
            }
        }
        Command::Gradcheck(a) => {
            let lines = runner::gradcheck_suite(a.instances, a.seed, a.rel_tol)?;
            for l in &lines {
                println!("{l}");
            }
            let failed = lines.iter().filter(|l| !l.passed).count();
            if failed > 0 {
                bail!(softbeam::Error::Data(format!(
                    "{failed} of {} gradient checks failed",
                    lines.len()
                )));
            }
        }
        Command::GenData(a) => {
            let (train, dev) =
                runner::cmd_gen_data(gen_spec(&a), a.train_count, a.dev_count, &a.out)?;
            println!(
                "task={} train={} dev={} src_vocab={} tgt_vocab={} out={}",
                train.task,
                train.len(),
                dev.len(),
                train.src_vocab.len(),
                train.tgt_vocab.len(),
                a.out.display()
            );
        }
        Command::Plot(a) => plot(&a.log, &a.out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<softbeam::Error>()
                .map_or("io", softbeam::Error::kind);
            let message = format!("{e}").replace('\n', " ");
            eprintln!("error: kind={kind} message={message}");
            ExitCode::from(2)
        }
    }
}
