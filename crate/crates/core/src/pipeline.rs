//! End-to-end experiments: dataset scoring, cross-seed stability, removal
//! curves, duplicate and outlier detection, perturbation ablations, and the
//! JSON/CSV report formats.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{example_view, moment_matrix, AugmentationSpec, DiscreteXi};
use crate::curvature::{Backend, CurvatureConfig, CurvatureOperator};
use crate::data::Dataset;
use crate::encoder::{EncoderKind, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::influence::{influence_deviation, influence_ssl, InfluenceRecord};
use crate::loss::LossKind;
use crate::par;
use crate::rng::{mix, Rng};
use crate::stats::{mean, std_dev, Correlations};
use crate::trainer::{linear_probe, train_ssl, ProbeResult, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

const STREAM_SPLIT: u64 = 0x5B11;
const STREAM_REMOVAL: u64 = 0x4E40;
const STREAM_MOMENT: u64 = 0x3A3A;

/// Large-scale reference values quoted in reports for comparison only.
pub fn reference_values() -> BTreeMap<String, f64> {
    [
        ("stability_pearson_cifar_min", 0.96),
        ("ablation_gaussian_noise_pearson", 0.9745),
        ("ablation_random_crop_pearson", 0.9509),
        ("log_score_mean_low", 8.13),
        ("log_score_mean_high", 8.96),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Scores every example. Scores for `draws > 1` are averaged over the
/// example's views. The rank-one backend builds one operator per example
/// from that example's first view.
pub fn score_dataset(
    p: &EncoderParams,
    data: &Dataset,
    kind: LossKind,
    aug: &AugmentationSpec,
    curvature: &CurvatureConfig,
) -> Result<Vec<InfluenceRecord>> {
    aug.validate()?;
    if data.dim() != p.input_dim() {
        return Err(Error::shape("score_dataset input", p.input_dim(), data.dim()));
    }
    let shared = match curvature.backend {
        Backend::RankOneLinear => None,
        _ => Some(CurvatureOperator::build(curvature, kind, p, data, aug)?),
    };
    par::try_map_indexed(data.len(), |i| {
        let x = data.get(i);
        let mut total = 0.0;
        let mut first: Option<InfluenceRecord> = None;
        for draw in 0..aug.draws {
            let view = example_view(aug, x, i, draw)?;
            let rec = match &shared {
                Some(op) => influence_ssl(p, op, kind, x, &view.x_hat)?,
                None => {
                    let op = CurvatureOperator::from_views(curvature, kind, p, &[(x.to_vec(), view.x_hat.clone())])?;
                    influence_ssl(p, &op, kind, x, &view.x_hat)?
                }
            };
            total += rec.raw_score;
            if first.is_none() {
                first = Some(InfluenceRecord {
                    eps_eff: view.eps_eff,
                    ..rec
                });
            }
        }
        let mut rec = first.expect("draws >= 1");
        let raw = total / aug.draws as f64;
        rec.example_index = i;
        rec.raw_score = raw;
        rec.magnitude = raw.abs();
        rec.seed = aug.example_rng(x, i, 0).stream();
        Ok(rec)
    })
}

pub fn magnitudes(records: &[InfluenceRecord]) -> Vec<f64> {
    records.iter().map(|r| r.magnitude).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    /// Mean and sample std of `log₁₀|I|` over non-zero scores.
    pub mean_log10: f64,
    pub std_log10: f64,
    pub zero_scores: usize,
    pub sign_violations: usize,
}

impl ScoreSummary {
    pub fn of(records: &[InfluenceRecord]) -> Self {
        let logs: Vec<f64> = records.iter().map(|r| r.log_magnitude()).filter(|v| v.is_finite()).collect();
        Self {
            count: records.len(),
            mean_log10: if logs.is_empty() { 0.0 } else { mean(&logs) },
            std_log10: std_dev(&logs),
            zero_scores: records.len() - logs.len(),
            sign_violations: records.iter().filter(|r| r.sign_violation()).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub seeds: (u64, u64),
    pub correlations: Correlations,
    pub final_losses: (f64, f64),
    pub records_a: Vec<InfluenceRecord>,
    pub records_b: Vec<InfluenceRecord>,
}

/// Trains two encoders that differ only in training seed, scores the same
/// data with each, and correlates the `|I|` sequences.
pub fn stability_study(
    spec: &EncoderSpec,
    data: &Dataset,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
    aug: &AugmentationSpec,
    curvature: &CurvatureConfig,
) -> Result<StabilityResult> {
    let runs = par::try_map_indexed(2, |r| {
        let cfg = if r == 0 { cfg_a } else { cfg_b };
        let out = train_ssl(spec, data, cfg)?;
        let records = score_dataset(&out.params, data, cfg.loss, aug, curvature)?;
        Ok((out.final_loss, records))
    })?;
    let [(loss_a, records_a), (loss_b, records_b)]: [(f64, Vec<InfluenceRecord>); 2] =
        runs.try_into().expect("two runs");
    let correlations = Correlations::between(&magnitudes(&records_a), &magnitudes(&records_b))?;
    Ok(StabilityResult {
        seeds: (cfg_a.seed, cfg_b.seed),
        correlations,
        final_losses: (loss_a, loss_b),
        records_a,
        records_b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalStrategy {
    /// Largest `|I|` first.
    Top,
    /// Smallest `|I|` first.
    Bottom,
    Random,
}

pub const RANDOM_REPLICATES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalPoint {
    pub strategy: RemovalStrategy,
    pub fraction: f64,
    pub replicate: usize,
    pub removed: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSpread {
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalResult {
    pub train_size: usize,
    pub holdout_size: usize,
    pub points: Vec<RemovalPoint>,
    pub random_spread: Vec<RandomSpread>,
    /// All strategies agree exactly at fraction 0 (when 0 is requested).
    pub baseline_equal: bool,
    pub baseline: ProbeResult,
}

/// Holdout fraction for the removal study's probe evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.25;

/// Deterministic train/holdout split; indices are returned sorted.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, STREAM_SPLIT).shuffle(&mut order);
    let hold = ((n as f64) * holdout_fraction).round() as usize;
    let mut holdout = order[..hold].to_vec();
    let mut train = order[hold..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

/// Removes examples by strategy, retrains from the same initialisation, and
/// probes each retrained encoder on the full labeled training split.
pub fn removal_study(
    spec: &EncoderSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    curvature: &CurvatureConfig,
    strategies: &[RemovalStrategy],
    fractions: &[f64],
) -> Result<RemovalResult> {
    if data.labels().is_none() {
        return Err(Error::Config("removal study needs labels".into()));
    }
    if fractions.is_empty() || strategies.is_empty() {
        return Err(Error::Config("removal study needs at least one strategy and fraction".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=0.9).contains(*f)) {
        return Err(Error::Config(format!("removal fraction {f} outside [0, 0.9]")));
    }
    let (train_idx, hold_idx) = split_indices(data.len(), HOLDOUT_FRACTION, cfg.seed);
    let train = data.subset(&train_idx)?;
    let holdout = data.subset(&hold_idx)?;
    let base = train_ssl(spec, &train, cfg)?;
    let baseline = linear_probe(&base.params, &train, &holdout)?;
    let records = score_dataset(&base.params, &train, cfg.loss, aug, curvature)?;
    let mut by_magnitude: Vec<usize> = (0..train.len()).collect();
    by_magnitude.sort_by(|&a, &b| records[b].magnitude.total_cmp(&records[a].magnitude).then(a.cmp(&b)));

    let mut jobs = Vec::new();
    for &strategy in strategies {
        let reps = if strategy == RemovalStrategy::Random { RANDOM_REPLICATES } else { 1 };
        for &fraction in fractions {
            for replicate in 0..reps {
                jobs.push((strategy, fraction, replicate));
            }
        }
    }
    let points = par::try_map_indexed(jobs.len(), |j| {
        let (strategy, fraction, replicate) = jobs[j];
        let removed = (fraction * train.len() as f64).round() as usize;
        let dropped: Vec<usize> = match strategy {
            RemovalStrategy::Top => by_magnitude[..removed].to_vec(),
            RemovalStrategy::Bottom => by_magnitude[by_magnitude.len() - removed..].to_vec(),
            RemovalStrategy::Random => {
                let mut order: Vec<usize> = (0..train.len()).collect();
                Rng::derive(cfg.seed, mix(STREAM_REMOVAL, replicate as u64)).shuffle(&mut order);
                order[..removed].to_vec()
            }
        };
        let mut keep_mask = vec![true; train.len()];
        for i in dropped {
            keep_mask[i] = false;
        }
        let kept: Vec<usize> = (0..train.len()).filter(|&i| keep_mask[i]).collect();
        let reduced = train.subset(&kept)?;
        let out = train_ssl(spec, &reduced, cfg)?;
        let probe = linear_probe(&out.params, &train, &holdout)?;
        Ok(RemovalPoint {
            strategy,
            fraction,
            replicate,
            removed,
            train_accuracy: probe.train_accuracy,
            holdout_accuracy: probe.holdout_accuracy,
        })
    })?;

    let zero: Vec<&RemovalPoint> = points.iter().filter(|p| p.fraction == 0.0).collect();
    let baseline_equal = zero.windows(2).all(|w| {
        w[0].holdout_accuracy == w[1].holdout_accuracy && w[0].train_accuracy == w[1].train_accuracy
    });
    let random_spread = fractions
        .iter()
        .filter(|_| strategies.contains(&RemovalStrategy::Random))
        .map(|&fraction| {
            let accs: Vec<f64> = points
                .iter()
                .filter(|p| p.strategy == RemovalStrategy::Random && p.fraction == fraction)
                .map(|p| p.holdout_accuracy)
                .collect();
            RandomSpread {
                fraction,
                mean: mean(&accs),
                std: std_dev(&accs),
            }
        })
        .collect();
    Ok(RemovalResult {
        train_size: train.len(),
        holdout_size: holdout.len(),
        points,
        random_spread,
        baseline_equal,
        baseline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub hits: usize,
    pub recall: f64,
    /// Expected recall of a uniformly random ranking, `k / n`.
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tagged: usize,
    pub recall: Vec<RecallAtK>,
}

impl DetectionMetrics {
    pub fn at(&self, k: usize) -> Option<&RecallAtK> {
        self.recall.iter().find(|r| r.k == k)
    }
}

fn recall_at(ranked: &[usize], tagged: &[bool], ks: &[usize]) -> DetectionMetrics {
    let total = tagged.iter().filter(|t| **t).count();
    let n = ranked.len();
    let mut ks: Vec<usize> = ks.iter().map(|&k| k.min(n)).collect();
    ks.sort_unstable();
    ks.dedup();
    let recall = ks
        .into_iter()
        .map(|k| {
            let hits = ranked[..k].iter().filter(|&&i| tagged[i]).count();
            RecallAtK {
                k,
                hits,
                recall: hits as f64 / total as f64,
                chance: k as f64 / n as f64,
            }
        })
        .collect();
    DetectionMetrics { tagged: total, recall }
}

/// Indices ordered by ascending `|I|` (ties by index).
pub fn rank_ascending(records: &[InfluenceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].magnitude.total_cmp(&records[b].magnitude).then(a.cmp(&b)));
    order
}

/// Indices ordered by descending `|I|` (ties by index).
pub fn rank_descending(records: &[InfluenceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].magnitude.total_cmp(&records[a].magnitude).then(a.cmp(&b)));
    order
}

/// Recall of duplicate-tagged examples among the lowest-`|I|` examples for
/// `k ∈ {5, 10, 2·#groups}`. `Ok(None)` when nothing is tagged.
pub fn duplicate_detection(records: &[InfluenceRecord], data: &Dataset) -> Result<Option<DetectionMetrics>> {
    if records.len() != data.len() {
        return Err(Error::shape("duplicate_detection records", data.len(), records.len()));
    }
    let Some(groups) = data.duplicate_groups() else {
        return Ok(None);
    };
    let tagged: Vec<bool> = groups.iter().map(|g| *g >= 0).collect();
    let mut ids: Vec<i64> = groups.iter().copied().filter(|g| *g >= 0).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Ok(None);
    }
    Ok(Some(recall_at(&rank_ascending(records), &tagged, &[5, 10, 2 * ids.len()])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummary {
    pub flagged_mean: f64,
    pub unflagged_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierMetrics {
    pub detection: DetectionMetrics,
    pub deviation: Option<DeviationSummary>,
}

/// Recall of flagged outliers among the top `2·#outliers` by `|I|`, plus
/// mean deviations when supplied.
pub fn outlier_identification(
    records: &[InfluenceRecord],
    data: &Dataset,
    deviations: Option<&[f64]>,
) -> Result<Option<OutlierMetrics>> {
    if records.len() != data.len() {
        return Err(Error::shape("outlier_identification records", data.len(), records.len()));
    }
    let Some(flags) = data.outlier_flags() else {
        return Ok(None);
    };
    let count = flags.iter().filter(|f| **f).count();
    if count == 0 {
        return Ok(None);
    }
    let detection = recall_at(&rank_descending(records), flags, &[2 * count]);
    let deviation = match deviations {
        Some(dev) => {
            if dev.len() != data.len() {
                return Err(Error::shape("outlier deviations", data.len(), dev.len()));
            }
            let pick = |want: bool| -> Vec<f64> {
                dev.iter().zip(flags).filter(|(_, f)| **f == want).map(|(d, _)| *d).collect()
            };
            Some(DeviationSummary {
                flagged_mean: mean(&pick(true)),
                unflagged_mean: mean(&pick(false)),
            })
        }
        None => None,
    };
    Ok(Some(OutlierMetrics { detection, deviation }))
}

/// Draws used to estimate each example's augmentation second moment.
pub const MOMENT_DRAWS: usize = 64;

/// Per-example `−2ε²tr(WᵀW(δδᵀ − Σ_x))` for a linear encoder, with `δ` and
/// `ε` from the example's first scored view and `Σ_x` estimated from
/// `MOMENT_DRAWS` further draws.
pub fn linear_deviations(p: &EncoderParams, data: &Dataset, aug: &AugmentationSpec) -> Result<Vec<f64>> {
    if p.kind() != EncoderKind::Linear {
        return Err(Error::Config("deviations need a linear encoder".into()));
    }
    let w = p.first_weight();
    par::try_map_indexed(data.len(), |i| {
        let x = data.get(i);
        let view = example_view(aug, x, i, 0)?;
        let mut rng = aug.example_rng(x, i, 0).fork(STREAM_MOMENT);
        let xi = DiscreteXi::from_draws(aug, x, &mut rng, MOMENT_DRAWS)?;
        let sigma = moment_matrix(&xi, Some(0))?;
        influence_deviation(&w, &view.delta, &sigma, view.eps_eff)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub augmentation: AugmentationSpec,
    pub correlations: Correlations,
    pub summary: ScoreSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base: ScoreSummary,
    pub rows: Vec<AblationRow>,
}

/// Scores the same encoder under a base augmentation and each variant.
pub fn ablation_perturbation(
    p: &EncoderParams,
    data: &Dataset,
    kind: LossKind,
    base: &AugmentationSpec,
    variants: &[(String, AugmentationSpec)],
    curvature: &CurvatureConfig,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let base_records = score_dataset(p, data, kind, base, curvature)?;
    let base_mag = magnitudes(&base_records);
    let mut rows = Vec::with_capacity(variants.len());
    for (label, aug) in variants {
        let records = score_dataset(p, data, kind, aug, curvature)?;
        rows.push(AblationRow {
            label: label.clone(),
            augmentation: aug.clone(),
            correlations: Correlations::between(&base_mag, &magnitudes(&records))?,
            summary: ScoreSummary::of(&records),
        });
    }
    Ok(AblationTable {
        base: ScoreSummary::of(&base_records),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub records: Vec<InfluenceRecord>,
    #[serde(default)]
    pub summary: Option<ScoreSummary>,
    #[serde(default)]
    pub correlations: Option<Correlations>,
    #[serde(default)]
    pub removal: Option<RemovalResult>,
    #[serde(default)]
    pub duplicates: Option<DetectionMetrics>,
    #[serde(default)]
    pub outliers: Option<OutlierMetrics>,
    #[serde(default)]
    pub ablation: Option<AblationTable>,
    #[serde(default)]
    pub notices: Vec<String>,
    pub reference: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.to_string(),
            config,
            records: Vec::new(),
            summary: None,
            correlations: None,
            removal: None,
            duplicates: None,
            outliers: None,
            ablation: None,
            notices: Vec::new(),
            reference: reference_values(),
        }
    }

    pub fn with_records(mut self, records: Vec<InfluenceRecord>) -> Self {
        self.summary = Some(ScoreSummary::of(&records));
        self.records = records;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(s)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema version {} is not supported",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_records_csv<W: Write>(records: &[InfluenceRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["example_index", "raw_score", "magnitude", "log10_magnitude", "grad_norm", "eps_eff", "seed"])?;
    for r in records {
        out.write_record([
            r.example_index.to_string(),
            float(r.raw_score),
            float(r.magnitude),
            float(r.log_magnitude()),
            float(r.grad_norm),
            float(r.eps_eff),
            r.seed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Equal-width histogram of `log₁₀|I|` over non-zero scores.
pub fn write_histogram_csv<W: Write>(records: &[InfluenceRecord], bins: usize, w: W) -> Result<()> {
    let logs: Vec<f64> = records.iter().map(|r| r.log_magnitude()).filter(|v| v.is_finite()).collect();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_low", "bin_high", "count"])?;
    if !logs.is_empty() && bins > 0 {
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for v in &logs {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            out.write_record([float(lo + b as f64 * width), float(lo + (b + 1) as f64 * width), c.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_removal_csv<W: Write>(result: &RemovalResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["strategy", "fraction", "replicate", "removed", "train_accuracy", "holdout_accuracy"])?;
    for p in &result.points {
        let strategy = serde_json::to_value(p.strategy)?;
        out.write_record([
            strategy.as_str().unwrap_or_default().to_string(),
            float(p.fraction),
            p.replicate.to_string(),
            p.removed.to_string(),
            float(p.train_accuracy),
            float(p.holdout_accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_correlations_csv<W: Write>(table: &AblationTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "pearson", "spearman", "mean_log10", "std_log10"])?;
    for r in &table.rows {
        out.write_record([
            r.label.clone(),
            float(r.correlations.pearson),
            float(r.correlations.spearman),
            float(r.summary.mean_log10),
            float(r.summary.std_log10),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Raw embeddings with optional tags, for external visualisation.
pub fn write_embeddings_csv<W: Write>(p: &EncoderParams, data: &Dataset, w: W) -> Result<()> {
    let embeddings = par::try_map_indexed(data.len(), |i| p.forward(data.get(i)))?;
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..p.output_dim()).map(|j| format!("z{j}")).collect();
    if data.labels().is_some() {
        header.push("label".into());
    }
    out.write_record(&header)?;
    for (i, z) in embeddings.iter().enumerate() {
        let mut row: Vec<String> = z.iter().map(|v| float(*v)).collect();
        if let Some(l) = data.labels() {
            row.push(l[i].to_string());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
