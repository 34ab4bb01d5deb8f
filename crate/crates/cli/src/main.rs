use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brandcap::checkpoint::Checkpoint;
use brandcap::config::{Preset, TrainConfig};
use brandcap::data::{
    load_dataset_with, load_features, save_dataset, synth_general, synth_generate, Dataset, GeneralConfig,
    SynthConfig, Tokenizer,
};
use brandcap::decode::{beam_search, BeamConfig};
use brandcap::eval::{evaluate, EvalOptions, MetricGroups};
use brandcap::report::{accuracy_svg, load_report, loss_svg, Comparison};
use brandcap::train::{train_with, Start, TrainData};
use brandcap::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Brand-aware image captioning: synthetic data, training, evaluation and reports.
#[derive(Parser, Debug)]
#[command(name = "brandcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset as JSONL.
    Synth(SynthArgs),
    /// Train one preset and write a checkpoint plus a JSONL loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a test set and write a JSON report.
    Eval(EvalArgs),
    /// Print beam-search captions for each feature vector.
    Caption(CaptionArgs),
    /// Render comparison tables from evaluation reports.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    /// Number of brand classes (at least 2).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Number of examples written to --out.
    #[arg(long, default_value_t = 100)]
    examples: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Additional held-out examples drawn from the same classes.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    test_examples: usize,
    /// Output path of the held-out examples.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Standard deviation of the class-mean entries.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Standard deviation of the per-example feature noise.
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    /// Standard deviation of annotator rating noise.
    #[arg(long, default_value_t = 0.2)]
    rating_noise: f64,
    /// Class c is drawn with weight 1/(c+1)^imbalance.
    #[arg(long, default_value_t = 0.0)]
    imbalance: f64,
    /// Write an unlabeled general caption dataset instead (--classes is ignored).
    #[arg(long)]
    general: bool,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// base, base-ft-analog, cls-aware, fuse-1, fuse-2 or fuse-3 (overrides the config file).
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint's parameters and vocabulary (required by fuse-3).
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// Continue an interrupted run from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides train_data.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Overrides general_data.
    #[arg(long)]
    general_data: Option<PathBuf>,
    /// Overrides seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Loss log path [default: <out>.log.jsonl].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also plot the total loss as SVG.
    #[arg(long)]
    loss_svg: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricName {
    Sca,
    Captions,
    Ratings,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labelled JSONL test set.
    #[arg(long)]
    test: PathBuf,
    /// JSON report output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Row label [default: the checkpoint's preset].
    #[arg(long)]
    name: Option<String>,
    /// Metric groups to compute.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MetricName::Sca, MetricName::Captions, MetricName::Ratings])]
    metrics: Vec<MetricName>,
    /// Fail unless the checkpoint vocabulary has this hash.
    #[arg(long)]
    vocab_hash: Option<String>,
    /// Extra brand phrase table used to tokenize the test captions.
    #[arg(long)]
    brand_table: Option<PathBuf>,
    /// Decoder threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(clap::Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL with `id` and `features` per line.
    #[arg(long)]
    features_file: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Json,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Reports written by `eval`.
    #[arg(long, num_args = 1.., required = true)]
    eval_json: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    out: ReportFormat,
    /// Also plot per-class accuracies as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let total = a.examples + a.test_examples;
    let data = if a.general {
        synth_general(&GeneralConfig {
            n_examples: total,
            dim: a.dim,
            seed: a.seed,
            feature_noise: a.feature_noise,
            topic_separation: a.separation,
            ..GeneralConfig::default()
        })?
    } else {
        synth_generate(&SynthConfig {
            n_classes: a.classes,
            n_examples: total,
            dim: a.dim,
            seed: a.seed,
            class_separation: a.separation,
            feature_noise: a.feature_noise,
            rating_noise: a.rating_noise,
            imbalance: a.imbalance,
            ..SynthConfig::default()
        })?
    };
    let (train, test) = match (&a.test_out, a.test_examples) {
        (Some(_), k) if k > 0 => {
            let (tr, te) = data.split(k as f64 / total as f64, a.seed)?;
            (tr, Some(te))
        }
        _ => (data, None),
    };
    save_dataset(&train, &a.out)?;
    print_summary(&a.out, &train);
    if let (Some(path), Some(test)) = (&a.test_out, test) {
        save_dataset(&test, path)?;
        print_summary(path, &test);
    }
    Ok(())
}

fn print_summary(path: &Path, data: &Dataset) {
    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for e in data.examples() {
        *hist.entry(e.class.as_deref().unwrap_or("(none)")).or_default() += 1;
    }
    println!("{}: {} examples, dim {}, vocabulary {}", path.display(), data.len(), data.dim(), data.vocab().len());
    for (class, n) in hist {
        println!("  {class:<14} {n}");
    }
}

fn tokenizer(table: Option<&Path>) -> Result<Tokenizer> {
    match table {
        Some(p) => Tokenizer::with_table_file(p),
        None => Ok(Tokenizer::default()),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p, a.preset)?,
        None => TrainConfig::for_preset(a.preset.unwrap_or(Preset::Base)),
    };
    if let Some(p) = a.train_data {
        config.train_data = Some(p);
    }
    if let Some(p) = a.general_data {
        config.general_data = Some(p);
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    config.validate()?;
    if config.preset.requires_init() && a.init_from.is_none() && a.resume.is_none() {
        return Err(Error::Config(format!(
            "preset {} requires --init-from <checkpoint> (train fuse-2 first)",
            config.preset
        )));
    }
    let tok = tokenizer(config.brand_table.as_deref())?;
    let train_path = config
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("no training data: set train_data or pass --train-data".into()))?;
    let specific = load_dataset_with(&train_path, &tok)?;
    let general = match &config.general_data {
        Some(p) if config.preset.fused() => Some(load_dataset_with(p, &tok)?),
        _ => None,
    };
    let start = match (&a.init_from, &a.resume) {
        (Some(p), _) => Start::InitFrom(Checkpoint::load(p)?),
        (_, Some(p)) => Start::Resume(Checkpoint::load(p)?),
        _ => Start::Fresh,
    };
    let out = a.out.clone();
    let outcome = train_with(&config, &TrainData { specific, general }, start, &mut |ck| {
        let mut name = out.clone().into_os_string();
        name.push(format!(".iter{}", ck.meta.iteration));
        ck.save(Path::new(&name))
    })?;
    outcome.checkpoint.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        s.into()
    });
    write_file(&log_path, outcome.log.to_jsonl())?;
    if let Some(svg) = &a.loss_svg {
        write_file(svg, loss_svg(&outcome.log)?)?;
    }
    let last = outcome.log.records.last().expect("at least one record");
    println!(
        "{}: preset {} iteration {} total loss {:.4} vocab {}",
        a.out.display(),
        config.preset,
        outcome.checkpoint.meta.iteration,
        last.total,
        outcome.checkpoint.vocab_hash()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let test = load_dataset_with(&a.test, &tokenizer(a.brand_table.as_deref())?)?;
    let opts = EvalOptions {
        beam: a.beam,
        max_len: a.max_len,
        groups: MetricGroups {
            sca: a.metrics.contains(&MetricName::Sca),
            captions: a.metrics.contains(&MetricName::Captions),
            ratings: a.metrics.contains(&MetricName::Ratings),
        },
        name: a.name,
        expected_vocab_hash: a.vocab_hash,
        workers: a.workers,
    };
    let report = evaluate(&ck, &test, &opts)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&a.out, json)?;
    if let Ok(c) = Comparison::new(std::slice::from_ref(&report)) {
        print!("{}", c.to_table());
    }
    Ok(())
}

fn caption_cmd(a: CaptionArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let records = load_features(&a.features_file)?;
    let cfg = BeamConfig::new(a.beam, a.max_len);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in records {
        let f = ck.meta.feature_view.apply(&r.id, &r.features);
        for (rank, h) in beam_search(&ck.model, &f, &cfg)?.iter().enumerate() {
            let words = ck.vocab.decode(h.words()).join(" ");
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.id, rank + 1, h.log_prob, words);
        }
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let reports = a.eval_json.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let c = Comparison::new(&reports)?;
    match a.out {
        ReportFormat::Table => print!("{}", c.to_table()),
        ReportFormat::Json => print!("{}", c.to_json()),
    }
    if let Some(svg) = &a.svg {
        write_file(svg, accuracy_svg(&reports)?)?;
    }
    Ok(())
}

/// 1 for invalid invocations or configurations, 3 for numeric failures,
/// 2 for everything caused by input data.
fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
