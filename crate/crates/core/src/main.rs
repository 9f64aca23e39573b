use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use sgr::analysis::{
    delta_loss_probe, equal_partition, memory_model, render_line_plot, write_csv, AnalysisError, MemorySpec,
    PlotSpec,
};
use sgr::dataio::{
    load_mnist_idx, parse_config, serialize_config, standardize, synth_blobs, BlobSpec, ConfigError, DataError,
    Dataset, Split,
};
use sgr::localnet::{save_checkpoint, CheckpointError};
use sgr::theory::{run_suite, SuiteConfig, TheoryError};
use sgr::train::{
    ablate_lambda, build_network, pipeline_train, train, Mode, PipelineMode, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "sgr", version, about = "Local learning with gradient reconciliation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// `key = value` training config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// globalbp | layerwise | reforward | sgr
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Pipeline::Off)]
    pipeline: Pipeline,
    /// `mnist:<img>,<lbl>[,<test img>,<test lbl>]` or `blobs:<K>,<d>,<n>,<r>,<sigma>`
    #[arg(long, global = true, default_value = "blobs:10,32,200,3,1")]
    data: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pipeline {
    Off,
    Lockstep,
    Async,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write report.csv, plots, checkpoint, summary
    Train,
    /// Run the numerical verification suite
    Theory,
    /// Sweep the reconciliation weight over several seeds
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5,1,2")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Record the per-layer input-change loss probe during training
    Probe {
        /// Modules below this index stay at initialisation
        #[arg(long, default_value_t = 0)]
        frozen_below: usize,
    },
    /// Activation-memory model of global vs. local training
    Memory {
        #[arg(long, value_delimiter = ',', default_value = "784,256,256,256")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        modules: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Per-sample head units, e.g. `10` (fixed ETF) or `128,10`
        #[arg(long, value_delimiter = ',', default_value = "10")]
        head: Vec<usize>,
    },
    /// Plot columns of a CSV file as SVG
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long, default_value = "epoch")]
        x: String,
        /// Keep only rows of this split
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "plot.svg")]
        name: String,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("verification failed:\n{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Train(TrainError::Config(_)) | CliError::Analysis(AnalysisError::MissingColumn(_)) => 2,
            _ => 1,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(c: &Common) -> Result<TrainConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(l) = c.lambda {
        cfg.lambda = l;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} value `{v}`")))
        })
        .collect()
}

/// Holds out the last sixth of `all` as the test split.
fn split_holdout(all: Dataset) -> Result<(Dataset, Dataset), CliError> {
    let n = all.len();
    let cut = n - n / 6;
    if cut == 0 || cut == n {
        return Err(CliError::Usage(format!("{n} samples are too few to split")));
    }
    let part = |r: std::ops::Range<usize>, split| {
        let idx: Vec<usize> = r.collect();
        let labels = idx.iter().map(|&i| all.labels[i]).collect();
        Dataset::new(all.features.select_rows(&idx), labels, all.classes, split)
    };
    Ok((part(0..cut, Split::Train)?, part(cut..n, Split::Test)?))
}

fn load_data(spec: &str, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let (kind, args) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--data `{spec}`: expected `kind:args`")))?;
    let (mut tr, mut te) = match kind {
        "blobs" => {
            let v: Vec<f64> = parse_list(args, "blobs")?;
            let [k, d, n, r, sigma] = v[..] else {
                return Err(CliError::Usage("blobs needs K,d,n,r,sigma".into()));
            };
            if [k, d, n].iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                return Err(CliError::Usage("blobs K, d, n must be positive integers".into()));
            }
            let spec = BlobSpec {
                classes: k as usize,
                dim: d as usize,
                per_class: n as usize,
                radius: r,
                sigma,
            };
            (synth_blobs(&spec, seed, Split::Train)?, synth_blobs(&spec, seed, Split::Test)?)
        }
        "mnist" => {
            let paths: Vec<&str> = args.split(',').collect();
            match paths[..] {
                [img, lbl] => split_holdout(load_mnist_idx(Path::new(img), Path::new(lbl))?)?,
                [img, lbl, timg, tlbl] => {
                    let tr = load_mnist_idx(Path::new(img), Path::new(lbl))?;
                    let mut te = load_mnist_idx(Path::new(timg), Path::new(tlbl))?;
                    te.split = Split::Test;
                    (tr, te)
                }
                _ => return Err(CliError::Usage("mnist needs 2 or 4 comma-separated paths".into())),
            }
        }
        other => return Err(CliError::Usage(format!("unknown data kind `{other}`"))),
    };
    if tr.classes != te.classes {
        let k = tr.classes.max(te.classes);
        tr.classes = k;
        te.classes = k;
    }
    standardize(&mut tr, Some(&mut te))?;
    Ok((tr, te))
}

fn fmt_metrics(rep: &sgr::train::TrainReport) -> String {
    let mut s = String::new();
    if let Some(e) = rep.epochs.last() {
        let _ = writeln!(s, "epochs: {}", rep.epochs.len());
        let _ = writeln!(s, "final train loss: {:.6}  acc: {:.4}", e.train_loss, e.train_acc);
        let _ = writeln!(s, "final test loss: {:.6}  acc: {:.4}", e.test_loss, e.test_acc);
    }
    if let Some(g) = rep.late_sgr_mean() {
        let _ = writeln!(s, "late reconciliation loss (last quarter): {g:.6e}");
    }
    s
}

fn cmd_train(c: &Common) -> Result<String, CliError> {
    let cfg = load_config(c)?;
    let (tr, te) = load_data(&c.data, cfg.seed)?;
    let net = build_network(&cfg, tr.dim(), tr.classes)?;
    let rep = match c.pipeline {
        Pipeline::Off => train(net, &tr, &te, &cfg)?,
        Pipeline::Lockstep => pipeline_train(net, &tr, &te, &cfg, PipelineMode::Lockstep, 1)?,
        Pipeline::Async => pipeline_train(net, &tr, &te, &cfg, PipelineMode::Async, 4)?,
    };
    let csv = c.out.join("report.csv");
    write_csv(&rep, &csv)?;
    let k = rep.network.len();
    let mut plots = vec![
        ("train.svg", "train", vec!["loss".to_string(), "acc".to_string()]),
        ("test.svg", "test", vec!["loss".to_string(), "acc".to_string()]),
    ];
    if cfg.mode != Mode::GlobalBp && k > 1 {
        let mut cols = vec!["sgr_loss_mean".to_string()];
        cols.extend((2..=k).map(|i| format!("sgr_{i}")));
        plots.push(("sgr.svg", "train", cols));
    }
    for (name, split, columns) in plots {
        let spec = PlotSpec {
            x: "epoch".into(),
            columns,
            filter: Some(("split".into(), split.into())),
            title: format!("{} ({split})", cfg.mode),
        };
        render_line_plot(&csv, &spec, &c.out.join(name))?;
    }
    save_checkpoint(&rep.network, &c.out.join("checkpoint.bin"))?;
    let mut s = format!("data: {}\npipeline: {}\n", c.data, pipeline_name(c.pipeline));
    s.push_str(&serialize_config(&cfg));
    s.push_str(&fmt_metrics(&rep));
    Ok(s)
}

fn pipeline_name(p: Pipeline) -> &'static str {
    match p {
        Pipeline::Off => "off",
        Pipeline::Lockstep => "lockstep",
        Pipeline::Async => "async",
    }
}

fn cmd_theory(c: &Common) -> Result<String, CliError> {
    let seed = c.seed.unwrap_or(0);
    let rep = run_suite(&SuiteConfig::default(), seed)?;
    rep.write_csv(&c.out.join("verification.csv"))?;
    let s = format!("theory suite, seed {seed}\n{}", rep.summary());
    write_file(&c.out.join("summary.txt"), &s)?;
    if !rep.passed() {
        return Err(CliError::Verification(s));
    }
    Ok(s)
}

fn cmd_ablate(c: &Common, lambdas: &[f64], seeds: &[u64]) -> Result<String, CliError> {
    let cfg = load_config(c)?;
    let (tr, te) = load_data(&c.data, cfg.seed)?;
    let rows = ablate_lambda(&cfg, &tr, &te, lambdas, seeds)?;
    let path = c.out.join("ablation.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
    let mut header = vec!["lambda".to_string(), "mean".into(), "std".into()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header)?;
    let mut s = String::from("lambda  mean acc  std\n");
    for r in &rows {
        let mut rec = vec![format!("{:?}", r.lambda), format!("{:.16e}", r.mean), format!("{:.16e}", r.std)];
        rec.extend(r.accs.iter().map(|a| format!("{a:.16e}")));
        w.write_record(&rec)?;
        let _ = writeln!(s, "{:<7} {:.4}    {:.4}", r.lambda, r.mean, r.std);
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(s)
}

fn cmd_probe(c: &Common, frozen_below: usize) -> Result<String, CliError> {
    let cfg = load_config(c)?;
    let (tr, te) = load_data(&c.data, cfg.seed)?;
    let net = build_network(&cfg, tr.dim(), tr.classes)?;
    let (probe, rep) = delta_loss_probe(net, &tr, &te, &cfg, frozen_below)?;
    let path = c.out.join("probe.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(probe.layers.iter().map(|l| format!("delta_{l}")));
    w.write_record(&header)?;
    let iters = probe.series.first().map_or(0, Vec::len);
    for t in 0..iters {
        let mut rec = vec![t.to_string()];
        rec.extend(probe.series.iter().map(|s| format!("{:.16e}", s[t])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut s = format!("mode: {}\n", cfg.mode);
    for (i, l) in probe.layers.iter().enumerate() {
        let _ = writeln!(s, "layer {l}: mean input-change loss delta {:.6e}", probe.mean(i));
    }
    s.push_str(&fmt_metrics(&rep));
    Ok(s)
}

fn cmd_memory(widths: &[usize], modules: usize, batch: usize, head: &[usize]) -> Result<String, CliError> {
    let layers = widths.len().saturating_sub(1);
    let spec = MemorySpec {
        widths: widths.to_vec(),
        batch,
        partition: equal_partition(layers, modules)?,
        head_widths: head.to_vec(),
    };
    let m = memory_model(&spec)?;
    let mut s = String::new();
    let _ = writeln!(s, "widths {widths:?}, batch {batch}, partition {:?}, head {head:?}", spec.partition);
    let _ = writeln!(s, "global BP units: {}", m.global);
    for (k, u) in m.per_module.iter().enumerate() {
        let _ = writeln!(s, "module {} units: {u}", k + 1);
    }
    let _ = writeln!(s, "local units (peak): {}", m.local);
    let _ = writeln!(s, "ratio local/global: {:.6}", m.ratio);
    let _ = writeln!(
        s,
        "with reconciliation buffers ({} units): {:.6}",
        m.delta_buffer,
        m.ratio_with_deltas(&spec)
    );
    Ok(s)
}

fn run(cli: Cli) -> Result<String, CliError> {
    let c = &cli.common;
    fs::create_dir_all(&c.out).map_err(|source| CliError::Io {
        path: c.out.display().to_string(),
        source,
    })?;
    let summary = match &cli.command {
        Command::Train => cmd_train(c)?,
        Command::Theory => return cmd_theory(c),
        Command::Ablate { lambdas, seeds } => cmd_ablate(c, lambdas, seeds)?,
        Command::Probe { frozen_below } => cmd_probe(c, *frozen_below)?,
        Command::Memory {
            widths,
            modules,
            batch,
            head,
        } => cmd_memory(widths, *modules, *batch, head)?,
        Command::Plot {
            csv,
            columns,
            x,
            split,
            name,
        } => {
            let spec = PlotSpec {
                x: x.clone(),
                columns: columns.clone(),
                filter: split.as_ref().map(|s| ("split".to_string(), s.clone())),
                title: csv.display().to_string(),
            };
            let out = c.out.join(name);
            render_line_plot(csv, &spec, &out)?;
            format!("wrote {}\n", out.display())
        }
    };
    write_file(&c.out.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(s) => {
            print!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
