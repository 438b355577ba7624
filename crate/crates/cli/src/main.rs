use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpu_rnn::analysis::{
    bench_speed, count_params, count_steps, param_table, speed_table, ParamReport, SpeedReport,
};
use mpu_rnn::checkpoint::{load_checkpoint, save_checkpoint};
use mpu_rnn::config::{Origin, RunConfig};
use mpu_rnn::data::{
    load_dataset, save_dataset, split_dataset, synth_generate_with_jitter, Dataset,
};
use mpu_rnn::network::{ensemble_predict, init_params};
use mpu_rnn::training::{accuracy, predict_all, train, Metrics, Sample};
use mpu_rnn::verify::{self, Suite};
use mpu_rnn::{Arch, Error, NetworkConfig, Result, Rng};

#[derive(Parser)]
#[command(
    name = "mpu-rnn",
    version,
    about = "Recurrent trajectory classifiers: data, training, evaluation and checks"
)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<String>,
    /// Override any config key, e.g. `--set lr=0.002`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset and split it into train/val/test files.
    GenData(GenDataArgs),
    /// Train a network on `<data-dir>/train.txt`, validating on `val.txt`.
    Train(TrainArgs),
    /// Classification accuracy of one checkpoint or an ensemble.
    Eval(EvalArgs),
    /// Run gradient, parameter-count, step-count and invariant checks.
    Verify(VerifyArgs),
    /// Parameter totals for a network configuration.
    CountParams(CountArgs),
    /// Forward+backward wall-clock per sample.
    Bench(BenchArgs),
}

#[derive(Args, Default)]
struct NetArgs {
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    readout: Option<String>,
    #[arg(long = "readout-matrices")]
    readout_matrices: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    /// One size, or a comma list with one size per layer.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long = "input-dim")]
    input_dim: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long = "skip-input")]
    skip_input: Option<String>,
    #[arg(long = "dropout-keep")]
    dropout_keep: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<String>,
    #[arg(long = "per-class")]
    per_class: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    jitter: Option<String>,
    #[arg(long = "train-frac")]
    train_frac: Option<String>,
    #[arg(long = "val-frac")]
    val_frac: Option<String>,
    /// Output directory (config key `data_dir`).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long = "target-val-acc")]
    target_val_acc: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "data-dir")]
    data_dir: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "ensemble")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoints whose logits are summed before the arg-max.
    #[arg(long, value_delimiter = ',')]
    ensemble: Vec<PathBuf>,
    /// Dataset file; defaults to `<data-dir>/test.txt`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "data-dir")]
    data_dir: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites: grad-check, param-counts, step-counts, invariants.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    net: NetArgs,
    /// paper-table or full-actual.
    #[arg(long)]
    convention: Option<String>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Sequence length of the benchmark samples.
    #[arg(long = "T", short = 'T', default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long)]
    seed: Option<String>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn push(flags: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        flags.push((key.to_string(), v.clone()));
    }
}

impl NetArgs {
    fn flags(&self, flags: &mut Vec<(String, String)>) {
        push(flags, "cell", &self.cell);
        push(flags, "arch", &self.arch);
        push(flags, "readout", &self.readout);
        push(flags, "readout_matrices", &self.readout_matrices);
        push(flags, "layers", &self.layers);
        push(flags, "hidden", &self.hidden);
        push(flags, "input_dim", &self.input_dim);
        push(flags, "classes", &self.classes);
        push(flags, "skip_input", &self.skip_input);
        push(flags, "dropout_keep", &self.dropout_keep);
    }
}

fn command_flags(cmd: &Command) -> Vec<(String, String)> {
    let mut f = Vec::new();
    match cmd {
        Command::GenData(a) => {
            push(&mut f, "classes", &a.classes);
            push(&mut f, "per_class", &a.per_class);
            push(&mut f, "seed", &a.seed);
            push(&mut f, "input_dim", &a.dim);
            push(&mut f, "jitter", &a.jitter);
            push(&mut f, "train_frac", &a.train_frac);
            push(&mut f, "val_frac", &a.val_frac);
            push(&mut f, "data_dir", &a.out);
        }
        Command::Train(a) => {
            a.net.flags(&mut f);
            push(&mut f, "batch_size", &a.batch_size);
            push(&mut f, "epochs", &a.epochs);
            push(&mut f, "lr", &a.lr);
            push(&mut f, "decay", &a.decay);
            push(&mut f, "epsilon", &a.epsilon);
            push(&mut f, "clip_norm", &a.clip_norm);
            push(&mut f, "patience", &a.patience);
            push(&mut f, "target_val_acc", &a.target_val_acc);
            push(&mut f, "seed", &a.seed);
            push(&mut f, "data_dir", &a.data_dir);
            push(&mut f, "out_dir", &a.out_dir);
        }
        Command::Eval(a) => push(&mut f, "data_dir", &a.data_dir),
        Command::Verify(a) => push(&mut f, "seed", &a.seed),
        Command::CountParams(a) => {
            a.net.flags(&mut f);
            push(&mut f, "convention", &a.convention);
        }
        Command::Bench(a) => {
            a.net.flags(&mut f);
            push(&mut f, "seed", &a.seed);
        }
    }
    f
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut flags = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set` expects KEY=VALUE, got `{kv}`")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    push(&mut flags, "threads", &cli.threads);
    flags.extend(command_flags(&cli.command));
    RunConfig::from_env(file.as_deref(), &flags)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(rc: &RunConfig) -> Result<()> {
    let ds =
        synth_generate_with_jitter(rc.classes, rc.per_class, rc.seed, rc.input_dim, rc.jitter)?;
    let (tr, va, te) = split_dataset(&ds, rc.train_frac, rc.val_frac, rc.seed)?;
    create_dir(&rc.data_dir)?;
    for (name, split) in [("train", &tr), ("val", &va), ("test", &te)] {
        let path = rc.data_dir.join(format!("{name}.txt"));
        save_dataset(split, &path)?;
        println!(
            "{name:<5} {:>7} samples  {}",
            split.samples.len(),
            path.display()
        );
    }
    Ok(())
}

fn load_optional(path: &Path) -> Result<Option<Dataset>> {
    if path.exists() {
        load_dataset(path).map(Some)
    } else {
        Ok(None)
    }
}

fn samples(ds: &Option<Dataset>) -> Result<Vec<Sample>> {
    ds.as_ref().map_or(Ok(Vec::new()), Dataset::to_samples)
}

fn format_accuracy(acc: f64, n: usize) -> String {
    format!("{acc:.4} ({}/{n})", (acc * n as f64).round() as usize)
}

fn train_cmd(rc: &RunConfig) -> Result<()> {
    let train_ds = load_dataset(rc.data_dir.join("train.txt"))?;
    let val_ds = load_optional(&rc.data_dir.join("val.txt"))?;
    let test_ds = load_optional(&rc.data_dir.join("test.txt"))?;
    let classes = [Some(&train_ds), val_ds.as_ref(), test_ds.as_ref()]
        .into_iter()
        .flatten()
        .map(|d| d.num_classes)
        .max()
        .unwrap_or(0);
    if rc.origin("classes") != Some(Origin::Default) && rc.classes < classes {
        return Err(Error::Config(format!(
            "data has {classes} classes, `classes` is {}",
            rc.classes
        )));
    }
    let classes = if rc.origin("classes") == Some(Origin::Default) {
        classes
    } else {
        rc.classes
    };
    if rc.origin("input_dim") != Some(Origin::Default) && rc.input_dim != train_ds.dim {
        return Err(Error::Config(format!(
            "data has dimension {}, `input_dim` is {}",
            train_ds.dim, rc.input_dim
        )));
    }
    let cfg = rc.network_config(train_ds.dim, classes);
    let init = init_params(&cfg, &mut Rng::derive(rc.seed, &[0]))?;
    create_dir(&rc.out_dir)?;
    save_checkpoint(rc.out_dir.join("init.ckpt"), &cfg, &init)?;

    let train_set = train_ds.to_samples()?;
    let val_set = samples(&val_ds)?;
    let (params, metrics) = train(&cfg, init, &train_set, &val_set, &rc.train_config())?;
    let ckpt = rc.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &cfg, &params)?;
    write_file(&rc.out_dir.join("metrics.csv"), &metrics.to_csv())?;
    print_epochs(&metrics);
    println!("checkpoint {}", ckpt.display());
    if let Some(test) = &test_ds {
        let test_set = test.to_samples()?;
        if !test_set.is_empty() {
            let acc = accuracy(&predict_all(&params, &cfg, &test_set)?, &test_set);
            println!("test accuracy {}", format_accuracy(acc, test_set.len()));
        }
    }
    Ok(())
}

fn print_epochs(m: &Metrics) {
    println!(
        "{:>5} {:>10} {:>9} {:>8} {:>8}",
        "epoch", "loss", "train", "val", "seconds"
    );
    for e in &m.epochs {
        println!(
            "{:>5} {:>10.5} {:>9.4} {:>8.4} {:>8.2}",
            e.epoch, e.train_loss, e.train_acc, e.val_acc, e.seconds
        );
    }
    println!("best epoch {}", m.best_epoch);
}

fn eval_cmd(rc: &RunConfig, args: &EvalArgs) -> Result<()> {
    let paths: Vec<PathBuf> = match (&args.checkpoint, args.ensemble.is_empty()) {
        (Some(p), _) => vec![p.clone()],
        (None, false) => args.ensemble.clone(),
        (None, true) => return Err(Error::Config("give --checkpoint or --ensemble".into())),
    };
    let data_path = args
        .data
        .clone()
        .unwrap_or_else(|| rc.data_dir.join("test.txt"));
    let ds = load_dataset(&data_path)?;
    let set = ds.to_samples()?;
    if set.is_empty() {
        return Err(Error::Input(format!(
            "{} has no samples",
            data_path.display()
        )));
    }
    let mut members: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut first_cfg: Option<NetworkConfig> = None;
    for p in &paths {
        let (cfg, params) = load_checkpoint(p)?;
        if cfg.input_dim != ds.dim || cfg.num_classes < ds.num_classes {
            return Err(Error::Config(format!(
                "{} expects {}-D dots and {} classes; data has {}-D dots and {} classes",
                p.display(),
                cfg.input_dim,
                cfg.num_classes,
                ds.dim,
                ds.num_classes
            )));
        }
        if let Some(c) = &first_cfg {
            if c.num_classes != cfg.num_classes {
                return Err(Error::Config(
                    "ensemble members disagree on the class count".into(),
                ));
            }
        }
        let logits = predict_all(&params, &cfg, &set)?;
        if paths.len() > 1 {
            println!(
                "member {} accuracy {}",
                p.display(),
                format_accuracy(accuracy(&logits, &set), set.len())
            );
        }
        first_cfg.get_or_insert(cfg);
        members.push(logits);
    }
    let summed: Vec<Vec<f64>> = (0..set.len())
        .map(|i| ensemble_predict(&members.iter().map(|m| m[i].clone()).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let acc = accuracy(&summed, &set);
    let label = if paths.len() > 1 {
        "ensemble accuracy"
    } else {
        "test accuracy"
    };
    println!("{label} {}", format_accuracy(acc, set.len()));
    Ok(())
}

fn verify_cmd(rc: &RunConfig, args: &VerifyArgs) -> Result<bool> {
    let suites: Vec<Suite> = if args.only.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.only
            .iter()
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()?
    };
    let report = verify::run(&suites, rc.seed);
    for r in &report.results {
        println!(
            "{:<5} {:<14} {:<40} {}",
            if r.passed { "ok" } else { "FAIL" },
            r.suite,
            r.name,
            r.detail
        );
    }
    println!();
    print!("{}", report.summary_table());
    Ok(report.all_passed())
}

fn count_cmd(rc: &RunConfig, args: &CountArgs) -> Result<()> {
    let cfg = rc.network_config(rc.input_dim, rc.classes);
    let report = count_params(&cfg, rc.convention)?;
    let label = format!(
        "{} {} N={} K={}",
        cfg.cell,
        cfg.arch,
        cfg.num_layers(),
        cfg.num_classes
    );
    print!("{}", param_table(&[(label, report.clone())]));
    if let Some(path) = &args.csv {
        write_file(
            path,
            &format!("{}\n{}\n", ParamReport::CSV_HEADER, report.csv_row()),
        )?;
    }
    Ok(())
}

fn bench_cmd(rc: &RunConfig, args: &BenchArgs) -> Result<()> {
    if args.t < 2 {
        return Err(Error::Config("--T must be at least 2".into()));
    }
    let base = rc.network_config(rc.input_dim, rc.classes);
    let mut archs = vec![base.arch];
    for a in [Arch::Hybrid, Arch::Bidirectional] {
        if !archs.contains(&a) {
            archs.push(a);
        }
    }
    let mut rng = Rng::derive(rc.seed, &[7]);
    let set: Vec<Sample> = (0..args.samples.max(1))
        .map(|i| Sample {
            seq: (0..args.t)
                .map(|_| (0..base.input_dim).map(|_| rng.normal()).collect())
                .collect(),
            label: i % base.num_classes,
        })
        .collect();
    let mut rows: Vec<SpeedReport> = Vec::new();
    for arch in archs {
        let cfg = base.clone().with_arch(arch);
        let report = bench_speed(&cfg, &set, args.repetitions)?;
        let steps = count_steps(&cfg, args.t)?;
        println!(
            "{arch}: {} cell evaluations per sample ({} per layer)",
            steps.total, steps.per_layer
        );
        rows.push(report);
    }
    print!("{}", speed_table(&rows));
    let find = |a: Arch| rows.iter().find(|r| r.arch == a);
    if let (Some(h), Some(b)) = (find(Arch::Hybrid), find(Arch::Bidirectional)) {
        println!(
            "hybrid:bidirectional steps {:.4}  wall-clock {:.4}",
            h.cell_evals_per_sample / b.cell_evals_per_sample,
            h.seconds_per_sample / b.seconds_per_sample
        );
    }
    if let Some(path) = &args.csv {
        let mut text = format!("{}\n", SpeedReport::CSV_HEADER);
        for r in &rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        write_file(path, &text)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training { .. } | Error::Verification { .. } | Error::Internal(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rc = match resolve(&cli) {
        Ok(rc) => rc,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::GenData(_) => gen_data(&rc).map(|_| true),
        Command::Train(_) => train_cmd(&rc).map(|_| true),
        Command::Eval(a) => eval_cmd(&rc, a).map(|_| true),
        Command::Verify(a) => verify_cmd(&rc, a),
        Command::CountParams(a) => count_cmd(&rc, a).map(|_| true),
        Command::Bench(a) => bench_cmd(&rc, a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
