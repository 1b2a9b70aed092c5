use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rumen::harness::{self, RunConfig};
use rumen::Variant;

/// Two-hop gated attention reader: train, evaluate, predict, trace and
/// ablate.
#[derive(Parser, Debug)]
#[command(name = "rumen", version, about)]
struct Cli {
    /// Directory that relative data paths (train, dev, GloVe, inputs) are
    /// resolved against.
    #[arg(long, global = true, env = "RUMEN_DATA_DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, keeping the best-dev checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Per-step CSV log (step,nll,l2,aqsl,total,lr).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset and write report.txt,
    /// breakdown.csv and predictions.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Answer every question in a dataset-format file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Predictions JSON; printed to stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Export attention matrices, gate norms and span distributions as CSV.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Question ids to trace; repeat or separate with commas.
        #[arg(long = "id", required = true, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_context: Option<usize>,
    },
    /// Train and score each variant under the same configuration.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Variants to run (1..12 or full); all of them by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Override the checkpoint's decoding window.
    #[arg(long)]
    window: Option<usize>,
    /// Truncate contexts to this many tokens.
    #[arg(long)]
    max_context: Option<usize>,
}

/// Profile, then config file, then `--set`, then individual flags.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base settings: paper or desk.
    #[arg(long, default_value = "paper")]
    profile: String,
    /// key = value file; see the README for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    char_dim: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    filter_width: Option<usize>,
    #[arg(long)]
    max_word_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    lr_decayed: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    aqsl: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    dev_path: Option<PathBuf>,
    #[arg(long)]
    glove_path: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, data_dir: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::profile(&self.profile)?;
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
        let flags: [(&str, Option<String>); 23] = [
            ("d", text(&self.d)),
            ("word_dim", text(&self.word_dim)),
            ("char_dim", text(&self.char_dim)),
            ("filters", text(&self.filters)),
            ("filter_width", text(&self.filter_width)),
            ("max_word_len", text(&self.max_word_len)),
            ("batch_size", text(&self.batch_size)),
            ("lr_initial", text(&self.lr_initial)),
            ("lr_decayed", text(&self.lr_decayed)),
            ("patience", text(&self.patience)),
            ("l2", text(&self.l2)),
            ("aqsl", text(&self.aqsl)),
            ("dropout", text(&self.dropout)),
            ("window", text(&self.window)),
            ("seed", text(&self.seed)),
            ("variant", text(&self.variant)),
            ("max_steps", text(&self.max_steps)),
            ("eval_every", text(&self.eval_every)),
            ("max_context", text(&self.max_context)),
            ("train_path", p(&self.train_path)),
            ("dev_path", p(&self.dev_path)),
            ("glove_path", p(&self.glove_path)),
            ("checkpoint_dir", p(&self.checkpoint_dir)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(dir) = data_dir {
            cfg.resolve_data_dir(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn in_data_dir(data_dir: Option<&Path>, path: &Path) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let data_dir = cli.data_dir.as_deref();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config, log } => {
            let cfg = config.resolve(data_dir)?;
            let mut log_file = match &log {
                Some(path) => Some(BufWriter::new(
                    File::create(path).with_context(|| format!("creating {}", path.display()))?,
                )),
                None => None,
            };
            let outcome = harness::cmd_train(&cfg, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log_file {
                w.flush()?;
            }
            writeln!(out, "steps: {}", outcome.summary.steps)?;
            writeln!(out, "checkpoint: {}", outcome.checkpoint.display())?;
            if let Some(f1) = outcome.summary.best_dev_f1 {
                writeln!(out, "best dev F1: {f1:.2}")?;
            }
            if outcome.summary.lr_decayed {
                writeln!(out, "learning rate decayed to {}", cfg.lr_decayed)?;
            }
            if let Some(report) = outcome.dev_report {
                write!(out, "{}", report.table())?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out: out_dir,
            decode,
        } => {
            let data = in_data_dir(data_dir, &data);
            let res = harness::cmd_eval(
                &checkpoint,
                &data,
                out_dir.as_deref(),
                decode.window,
                decode.max_context,
            )
            .with_context(|| format!("evaluating {} on {}", checkpoint.display(), data.display()))?;
            write!(out, "{}", res.report.table())?;
        }
        Command::Predict {
            checkpoint,
            input,
            output,
            decode,
        } => {
            let input = in_data_dir(data_dir, &input);
            let preds = harness::cmd_predict(
                &checkpoint,
                &input,
                output.as_deref(),
                decode.window,
                decode.max_context,
            )
            .with_context(|| format!("predicting {} with {}", input.display(), checkpoint.display()))?;
            if output.is_none() {
                writeln!(out, "{}", serde_json::to_string_pretty(&preds)?)?;
            }
        }
        Command::Trace {
            checkpoint,
            data,
            ids,
            out: out_dir,
            max_context,
        } => {
            let data = in_data_dir(data_dir, &data);
            let traced = harness::cmd_trace(&checkpoint, &data, &ids, &out_dir, max_context)
                .with_context(|| format!("tracing {} with {}", data.display(), checkpoint.display()))?;
            if traced.is_empty() {
                bail!("none of the requested question ids were found in {}", data.display());
            }
            for (id, t) in &traced {
                writeln!(
                    out,
                    "{id}: span {}..={} (p = {:.4}) -> {}",
                    t.span.start,
                    t.span.end,
                    t.span.prob,
                    out_dir.join(id).display()
                )?;
            }
        }
        Command::Ablate {
            config,
            variants,
            out: table_path,
        } => {
            let cfg = config.resolve(data_dir)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            let rows = harness::cmd_ablate(&cfg, &variants)?;
            let table = harness::ablation_table(&rows);
            write!(out, "{table}")?;
            if let Some(path) = table_path {
                std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<io::Error>()
        .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

/// The cause chain, skipping causes whose text a wrapper already repeats.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
