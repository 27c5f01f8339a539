//! `ssli` command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DatasetSource, RunConfig};
use crate::curvature::Damping;
use crate::data::{make_synthetic, write_dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::pipeline::{
    ablation_perturbation, duplicate_detection, linear_deviations, outlier_identification, removal_study,
    score_dataset, stability_study, write_correlations_csv, write_embeddings_csv, write_histogram_csv,
    write_records_csv, write_removal_csv, ExperimentReport,
};
use crate::trainer::{train_ssl, write_loss_trace};
use crate::encoder::EncoderKind;
use crate::{par, verify};

#[derive(Debug, Parser)]
#[command(
    name = "ssli",
    version,
    about = "Label-free influence scores for self-supervised encoders",
    after_help = "Set SSLI_THREADS to cap the worker count (0 or unset = all cores). \
                  Output is identical for every thread count."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clustered dataset with optional outliers and duplicates.
    Synth(SynthArgs),
    /// Train an encoder on the alignment loss and write a checkpoint.
    Train(TrainArgs),
    /// Score every example and write an influence report.
    Score(ScoreArgs),
    /// Train two encoders with different seeds and correlate their scores.
    Stability(ExperimentArgs),
    /// Remove examples by score, retrain, and probe downstream accuracy.
    Removal(ExperimentArgs),
    /// Recall of duplicate-tagged examples among the lowest scores.
    Duplicates(ExperimentArgs),
    /// Recall of outlier-tagged examples among the highest scores.
    Outliers(ExperimentArgs),
    /// Compare scores under the base augmentation and each configured variant.
    Ablate(ExperimentArgs),
    /// Check the closed-form linear theory; one PASS/FAIL line per claim.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file holding a synthetic dataset description; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub per_cluster: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// RMS distance of cluster points from their center.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// RMS distance of outliers from their between-center segment.
    #[arg(long)]
    pub outlier_spread: Option<f64>,
    #[arg(long)]
    pub duplicate_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; `.csv` writes CSV, anything else the binary format.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Run configuration; optional when --data and --checkpoint are given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file; overrides the configured dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Encoder checkpoint; overrides the configured encoder.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Absolute damping added to the curvature operator.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Augmentation scale.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Augmentation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Views averaged per example.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Report path (default: output_dir/score.json, else stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path (default: output_dir/<command>.json, else stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args`, runs the command under the `SSLI_THREADS` cap, and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR usage {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match par::with_threads(par::threads_from_env(), || run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR {} {}", e.code(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Stability(a) => experiment(a, "stability"),
        Command::Removal(a) => experiment(a, "removal"),
        Command::Duplicates(a) => experiment(a, "duplicates"),
        Command::Outliers(a) => experiment(a, "outliers"),
        Command::Ablate(a) => experiment(a, "ablate"),
        Command::Verify(a) => {
            let results = verify::run_suite(a.seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} claims failed", results.len())));
            }
            Ok(0)
        }
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { spec.$field = v; })* };
    }
    set!(clusters, per_cluster, dim, radius, outlier_fraction, outlier_spread, duplicate_pairs, seed);
    let synthetic = make_synthetic(&spec)?;
    write_dataset(&synthetic.data, &a.out)?;
    Ok(0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&a.config)?;
    let mut tc = cfg.train_config();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate()?;
    cfg.train = Some(tc.clone());
    let data = cfg.load_dataset()?;
    let out = train_ssl(cfg.encoder_spec()?, &data, &tc)?;
    out.params.write_checkpoint(BufWriter::new(File::create(&a.out)?))?;
    let trace_path = a.trace.or_else(|| cfg.output_dir.as_ref().map(|d| d.join("loss_trace.csv")));
    if let Some(p) = trace_path {
        write_loss_trace(&out.trace, create(&p)?)?;
    }
    Ok(0)
}

fn score(a: ScoreArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let data = a
                .data
                .clone()
                .ok_or_else(|| Error::Config("score needs --config or --data with --checkpoint".into()))?;
            if a.checkpoint.is_none() {
                return Err(Error::Config("score without --config needs --checkpoint".into()));
            }
            RunConfig::new(DatasetSource::Path(data))
        }
    };
    if let Some(d) = a.data {
        cfg.dataset = DatasetSource::Path(d);
    }
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = Some(c);
    }
    let mut aug = cfg.augmentation();
    if let Some(e) = a.epsilon {
        aug.epsilon = e;
    }
    if let Some(s) = a.seed {
        aug.seed = s;
    }
    if let Some(d) = a.draws {
        aug.draws = d;
    }
    cfg.augmentation = Some(aug.clone());
    cfg.validate()?;

    let data = cfg.load_dataset()?;
    let (params, _) = cfg.resolve_params(&data)?;
    let mut curvature = cfg.curvature_for(&params);
    if let Some(l) = a.lambda {
        curvature.damping = Damping::Absolute(l);
    }
    curvature.validate()?;
    cfg.curvature = Some(curvature);

    let records = score_dataset(&params, &data, cfg.loss(), &aug, &curvature)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_records_csv(&records, create(&dir.join("records.csv"))?)?;
        write_histogram_csv(&records, cfg.experiment.histogram_bins, create(&dir.join("histogram.csv"))?)?;
        write_embeddings_csv(&params, &data, create(&dir.join("embeddings.csv"))?)?;
    }
    let report = ExperimentReport::new("score", serde_json::to_value(&cfg)?).with_records(records);
    emit(&report, a.out.as_deref(), &cfg, "score")?;
    Ok(0)
}

fn experiment(a: ExperimentArgs, name: &str) -> Result<i32> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        let mut tc = cfg.train_config();
        tc.seed = s;
        cfg.train = Some(tc);
    }
    let aug = cfg.augmentation();
    cfg.augmentation = Some(aug.clone());
    let data = cfg.load_dataset()?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    let csv = |file: &str| -> Result<Option<BufWriter<File>>> {
        cfg.output_dir.as_ref().map(|d| create(&d.join(file))).transpose()
    };

    let report = match name {
        "stability" => {
            let spec = cfg.encoder_spec()?.clone();
            let tc = cfg.train_config();
            let (s1, s2) = cfg.experiment.seeds.unwrap_or((tc.seed, tc.seed.wrapping_add(1)));
            if s1 == s2 {
                return Err(Error::Config("stability seeds must differ".into()));
            }
            cfg.experiment.seeds = Some((s1, s2));
            cfg.train = Some(tc.clone());
            let init = crate::encoder::EncoderParams::init_seeded(&spec)?;
            let curvature = cfg.curvature_for(&init);
            cfg.curvature = Some(curvature);
            let result = stability_study(
                &spec,
                &data,
                &tc.clone().with_seed(s1),
                &tc.with_seed(s2),
                &aug,
                &curvature,
            )?;
            if let Some(w) = csv("records_a.csv")? {
                write_records_csv(&result.records_a, w)?;
            }
            if let Some(w) = csv("records_b.csv")? {
                write_records_csv(&result.records_b, w)?;
            }
            let mut report = ExperimentReport::new(name, serde_json::to_value(&cfg)?).with_records(result.records_a);
            report.correlations = Some(result.correlations);
            report.notices.push(format!(
                "final alignment losses {:.6e} (seed {s1}) and {:.6e} (seed {s2})",
                result.final_losses.0, result.final_losses.1
            ));
            report
        }
        "removal" => {
            let spec = cfg.encoder_spec()?.clone();
            let tc = cfg.train_config();
            cfg.train = Some(tc.clone());
            let init = crate::encoder::EncoderParams::init_seeded(&spec)?;
            let curvature = cfg.curvature_for(&init);
            cfg.curvature = Some(curvature);
            let result = removal_study(
                &spec,
                &data,
                &tc,
                &aug,
                &curvature,
                &cfg.experiment.strategies,
                &cfg.experiment.fractions,
            )?;
            if let Some(w) = csv("removal.csv")? {
                write_removal_csv(&result, w)?;
            }
            let mut report = ExperimentReport::new(name, serde_json::to_value(&cfg)?);
            report.removal = Some(result);
            report
        }
        _ => {
            let (params, _) = cfg.resolve_params(&data)?;
            let curvature = cfg.curvature_for(&params);
            cfg.curvature = Some(curvature);
            let kind = cfg.loss();
            if name == "ablate" {
                let variants: Vec<(String, _)> = cfg
                    .experiment
                    .variants
                    .iter()
                    .map(|v| (v.label.clone(), v.augmentation.clone()))
                    .collect();
                let table = ablation_perturbation(&params, &data, kind, &aug, &variants, &curvature)?;
                if let Some(w) = csv("correlations.csv")? {
                    write_correlations_csv(&table, w)?;
                }
                let mut report = ExperimentReport::new(name, serde_json::to_value(&cfg)?);
                report.ablation = Some(table);
                report
            } else {
                let records = score_dataset(&params, &data, kind, &aug, &curvature)?;
                if let Some(w) = csv("records.csv")? {
                    write_records_csv(&records, w)?;
                }
                let mut report = ExperimentReport::new(name, serde_json::to_value(&cfg)?);
                if name == "duplicates" {
                    match duplicate_detection(&records, &data)? {
                        Some(m) => report.duplicates = Some(m),
                        None => report.notices.push("no duplicate-tagged examples; no metrics".into()),
                    }
                } else {
                    let deviations = if params.kind() == EncoderKind::Linear {
                        Some(linear_deviations(&params, &data, &aug)?)
                    } else {
                        None
                    };
                    match outlier_identification(&records, &data, deviations.as_deref())? {
                        Some(m) => report.outliers = Some(m),
                        None => report.notices.push("no outlier-tagged examples; no metrics".into()),
                    }
                }
                report.with_records(records)
            }
        }
    };
    emit(&report, a.out.as_deref(), &cfg, name)?;
    Ok(0)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn emit(report: &ExperimentReport, out: Option<&Path>, cfg: &RunConfig, name: &str) -> Result<()> {
    let json = report.to_json()?;
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(|d| d.join(format!("{name}.json"))));
    match target {
        Some(p) => std::fs::write(p, json)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(json.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}
