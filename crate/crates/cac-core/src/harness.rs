//! Training orchestration: source pretraining, target adaptation,
//! evaluation, ablations, parameter sweeps, and embedding dumps.
//!
//! Adaptation never sees source data (the function does not receive it) and
//! uses target labels only through [`evaluate`], which is called between
//! epochs for reporting. Runs are deterministic functions of the config:
//! every random choice draws from per-phase streams derived from the seed.

use crate::banks::{init_banks, Banks};
use crate::config::TrainConfig;
use crate::data::{generate_two_domain_blobs, LabeledDataset};
use crate::error::{CacError, Result};
use crate::losses::{
    build_similarity_mask, cac_loss, decay_factor, DecaySchedule, LossMode, MaskMatrix,
};
use crate::matrix::l2_normalize_rows;
use crate::model::{
    backward_from_logits, backward_from_probs, cross_entropy, forward_cached, model_forward,
    sgd_momentum_step_staged, ModelParams,
};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-phase random streams: position `slot` of a SplitMix64 master seeded
/// with the run seed. Keeps phases independent and bit-reproducible.
fn stream_seed(base: u64, slot: usize) -> u64 {
    let mut master = Rng::new(base);
    let mut value = master.next_u64();
    for _ in 0..slot {
        value = master.next_u64();
    }
    value
}

const STREAM_MODEL_INIT: usize = 0;
const STREAM_PRETRAIN_SHUFFLE: usize = 1;
const STREAM_BANK_SUBSAMPLE: usize = 2;
const STREAM_ADAPT_SHUFFLE: usize = 3;

/// Per-class and aggregate accuracy, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One entry per class; `None` marks a class absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Unweighted mean of the present per-class accuracies.
    pub avg: f64,
    /// Sample-weighted accuracy.
    pub overall: f64,
    /// (epoch, avg) after each adaptation epoch.
    pub epoch_curve: Vec<(usize, f64)>,
    /// Classes with no samples, excluded from `avg`.
    pub absent_classes: Vec<usize>,
}

/// Unweighted mean of per-class accuracies.
pub fn macro_average(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// One optimizer step's loss record for the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub pos: f64,
    pub neg: f64,
    pub alpha: f64,
}

/// Classifies a batch and scores it per class.
pub fn evaluate(params: &ModelParams, dataset: &LabeledDataset) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(CacError::Data("cannot evaluate an empty dataset".into()));
    }
    let out = model_forward(params, &dataset.x)?;
    let mut correct = vec![0usize; dataset.classes];
    let mut total = vec![0usize; dataset.classes];
    for i in 0..dataset.len() {
        let predicted = argmax(out.probs.row(i));
        total[dataset.y[i]] += 1;
        if predicted == dataset.y[i] {
            correct[dataset.y[i]] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(dataset.classes);
    let mut present = Vec::new();
    let mut absent_classes = Vec::new();
    for c in 0..dataset.classes {
        if total[c] == 0 {
            per_class.push(None);
            absent_classes.push(c);
        } else {
            let acc = 100.0 * correct[c] as f64 / total[c] as f64;
            per_class.push(Some(acc));
            present.push(acc);
        }
    }
    let overall =
        100.0 * correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>() as f64;
    Ok(MetricsReport {
        per_class_accuracy: per_class,
        avg: macro_average(&present),
        overall,
        epoch_curve: Vec::new(),
        absent_classes,
    })
}

/// Smallest index among the maxima, so ties are deterministic.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Supervised pretraining on the labeled source domain: cross-entropy with
/// staged-rate SGD momentum. Deterministic under the config seed.
pub fn pretrain_source(config: &TrainConfig, source: &LabeledDataset) -> Result<ModelParams> {
    config.validate()?;
    if source.is_empty() {
        return Err(CacError::Data("empty source dataset".into()));
    }
    let mut params = ModelParams::init(
        source.input_dim(),
        config.hidden_width,
        config.feature_dim,
        config.classes,
        stream_seed(config.seed, STREAM_MODEL_INIT),
    )?;
    let mut rng = Rng::new(stream_seed(config.seed, STREAM_PRETRAIN_SHUFFLE));
    for _ in 0..config.pretrain_epochs {
        for batch in epoch_batches(source.len(), config.batch_size, &mut rng) {
            let x = source.x.gather_rows(&batch);
            let labels: Vec<usize> = batch.iter().map(|&i| source.y[i]).collect();
            let cache = forward_cached(&params, &x)?;
            let (loss, dlogits) = cross_entropy(&cache.probs, &labels)?;
            if !loss.is_finite() {
                return Err(CacError::Numeric("pretraining diverged".into()));
            }
            let grads = backward_from_logits(&params, &cache, &dlogits)?;
            params = sgd_momentum_step_staged(
                &params,
                &grads,
                config.lr,
                config.lr * config.lr_feature_scale,
                config.momentum,
            )?;
        }
    }
    Ok(params)
}

/// Everything a finished adaptation run reports.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: ModelParams,
    pub report: MetricsReport,
    pub steps: Vec<StepRecord>,
    pub banks: Banks,
}

/// Adapts a pretrained model to the unlabeled target domain.
///
/// Per mini-batch: forward, replace the batch's bank rows, recompute the
/// batch's neighbor rows, build the similarity mask (or the permissive one
/// when `use_wsim` is off), evaluate the contrastive loss with the decayed
/// alpha, backpropagate, and take a staged-rate SGD-momentum step. Target
/// labels are read only by the per-epoch [`evaluate`] calls that fill the
/// epoch curve.
pub fn adapt_target(
    model: ModelParams,
    target: &LabeledDataset,
    config: &TrainConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if target.input_dim() != model.input_dim() {
        return Err(CacError::Config(format!(
            "target dimension {} does not match the model's {}",
            target.input_dim(),
            model.input_dim()
        )));
    }
    if model.classes() != config.classes {
        return Err(CacError::Config(format!(
            "model classifies {} classes, config expects {}",
            model.classes(),
            config.classes
        )));
    }

    let mut banks = init_banks(
        &model,
        target,
        config.k,
        config.bank_fraction,
        stream_seed(config.seed, STREAM_BANK_SUBSAMPLE),
    )?;

    let n = target.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let max_iter = config
        .max_iter_override
        .unwrap_or(steps_per_epoch * config.adapt_epochs)
        .max(1);
    let schedule = DecaySchedule {
        beta: config.beta,
        max_iter,
    };

    let mut params = model;
    let mut steps = Vec::new();
    let mut epoch_curve = Vec::new();
    let mut rng = Rng::new(stream_seed(config.seed, STREAM_ADAPT_SHUFFLE));
    let mut iter = 0usize;

    for epoch in 1..=config.adapt_epochs {
        for batch in epoch_batches(n, config.batch_size, &mut rng) {
            let x = target.x.gather_rows(&batch);
            let cache = forward_cached(&params, &x)?;
            let normalized = l2_normalize_rows(&cache.features)?;
            banks.update(&batch, &normalized, &cache.probs)?;

            let mask = if config.use_wsim {
                build_similarity_mask(&batch, &banks)?
            } else {
                MaskMatrix::all_ones(batch.len())
            };
            let alpha = decay_factor(iter, &schedule);
            let breakdown = cac_loss(
                &cache.probs,
                &batch,
                &banks,
                &mask,
                alpha,
                config.loss_mode,
            )?;
            let grads = backward_from_probs(&params, &cache, &breakdown.grad_wrt_batch_probs)?;
            params = sgd_momentum_step_staged(
                &params,
                &grads,
                config.lr,
                config.lr * config.lr_feature_scale,
                config.momentum,
            )?;

            steps.push(StepRecord {
                step: iter,
                total: breakdown.total,
                pos: breakdown.positive_term,
                neg: breakdown.negative_term,
                alpha,
            });
            iter += 1;
        }
        let epoch_report = evaluate(&params, target)?;
        epoch_curve.push((epoch, epoch_report.avg));
    }

    let mut report = evaluate(&params, target)?;
    report.epoch_curve = epoch_curve;
    Ok(AdaptOutcome {
        model: params,
        report,
        steps,
        banks,
    })
}

/// One generate / pretrain / adapt cycle under a single seed.
#[derive(Debug, Clone)]
pub struct SeededRun {
    pub seed: u64,
    pub source_only: MetricsReport,
    pub adapted: MetricsReport,
    pub steps: Vec<StepRecord>,
}

/// Runs the full benchmark pipeline for one seed: fresh datasets, source
/// pretraining, source-only evaluation on the target, then adaptation.
pub fn run_benchmark(config: &TrainConfig, seed: u64) -> Result<SeededRun> {
    let config = config.with_seed(seed);
    let (source, target) = generate_two_domain_blobs(&config.shift)?;
    let model = pretrain_source(&config, &source)?;
    let source_only = evaluate(&model, &target)?;
    let outcome = adapt_target(model, &target, &config)?;
    Ok(SeededRun {
        seed,
        source_only,
        adapted: outcome.report,
        steps: outcome.steps,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// One ablation table row: a loss variant scored over the configured seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_final_avg: f64,
    pub std_final_avg: f64,
    pub per_seed: Vec<f64>,
}

/// The four-variant component ablation: negatives only, positives only,
/// both, and both with the similarity mask.
pub fn run_ablation(config: &TrainConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let variants: [(&str, LossMode, bool); 4] = [
        ("neg", LossMode::NegOnly, false),
        ("pos", LossMode::PosOnly, false),
        ("pos+neg", LossMode::Full, false),
        ("pos+neg+wsim", LossMode::Full, true),
    ];
    let seeds = config.resolved_seeds();
    let mut rows = Vec::new();
    for (name, mode, use_wsim) in variants {
        let mut variant_config = config.clone();
        variant_config.loss_mode = mode;
        variant_config.use_wsim = use_wsim;
        let mut finals = Vec::new();
        for &seed in &seeds {
            finals.push(run_benchmark(&variant_config, seed)?.adapted.avg);
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            mean_final_avg: mean(&finals),
            std_final_avg: sample_std(&finals),
            per_seed: finals,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "variant,mean_final_avg,std_final_avg,seeds")?;
    for row in rows {
        writeln!(
            file,
            "{},{:.4},{:.4},{}",
            row.variant,
            row.mean_final_avg,
            row.std_final_avg,
            row.per_seed.len()
        )?;
    }
    Ok(())
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = CacError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepParam::K),
            "beta" => Ok(SweepParam::Beta),
            other => Err(CacError::Config(format!(
                "unknown sweep parameter {other:?} (expected K or beta)"
            ))),
        }
    }
}

/// One sweep grid cell scored over the configured seeds.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub mean_final_avg: f64,
    pub std_final_avg: f64,
    pub per_seed_final: Vec<f64>,
    pub per_seed_curves: Vec<Vec<(usize, f64)>>,
}

/// Sweeps K or beta over a grid, rerunning the full pipeline per cell and
/// seed. Grid values are validated before anything runs.
pub fn sweep_param(
    config: &TrainConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CacError::Config("sweep grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &value in grid {
        let mut cell_config = config.clone();
        match param {
            SweepParam::K => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(CacError::Config(format!(
                        "K grid value {value} is not a positive integer"
                    )));
                }
                cell_config.k = value as usize;
            }
            SweepParam::Beta => {
                if value < 0.0 {
                    return Err(CacError::Config(format!(
                        "beta grid value {value} is negative"
                    )));
                }
                cell_config.beta = value;
            }
        }
        cell_config.validate()?;
        cells.push((value, cell_config));
    }

    let seeds = config.resolved_seeds();
    let mut rows = Vec::new();
    for (value, cell_config) in cells {
        let mut finals = Vec::new();
        let mut curves = Vec::new();
        for &seed in &seeds {
            let run = run_benchmark(&cell_config, seed)?;
            finals.push(run.adapted.avg);
            curves.push(run.adapted.epoch_curve.clone());
        }
        rows.push(SweepRow {
            value,
            mean_final_avg: mean(&finals),
            std_final_avg: sample_std(&finals),
            per_seed_final: finals,
            per_seed_curves: curves,
        });
    }
    Ok(rows)
}

/// Writes the sweep table plus one epoch-curve CSV per grid cell (mean
/// curve across seeds), returning the curve paths in row order.
pub fn write_sweep_csv(
    rows: &[SweepRow],
    param: SweepParam,
    path: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let name = match param {
        SweepParam::K => "K",
        SweepParam::Beta => "beta",
    };
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sweep")
        .to_string();
    let parent = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();

    let mut curve_paths = Vec::new();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{name},mean_final_avg,std_final_avg,curve_path")?;
    for row in rows {
        let curve_path = parent.join(format!("{stem}_curve_{name}_{}.csv", row.value));
        writeln!(
            file,
            "{},{:.4},{:.4},{}",
            row.value,
            row.mean_final_avg,
            row.std_final_avg,
            curve_path.display()
        )?;
        let mut curve_file = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
        writeln!(curve_file, "epoch,mean_avg")?;
        if let Some(first) = row.per_seed_curves.first() {
            for e in 0..first.len() {
                let epoch = first[e].0;
                let avg = mean(
                    &row.per_seed_curves
                        .iter()
                        .map(|c| c[e].1)
                        .collect::<Vec<_>>(),
                );
                writeln!(curve_file, "{epoch},{avg:.4}")?;
            }
        }
        curve_paths.push(curve_path);
    }
    Ok(curve_paths)
}

/// Dumps extractor features with labels and predicted classes as CSV:
/// `f0,...,f{dim-1},label,pred`, one row per sample.
pub fn dump_embeddings(
    params: &ModelParams,
    dataset: &LabeledDataset,
    path: &Path,
) -> Result<()> {
    let out = model_forward(params, &dataset.x)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..out.features.cols()).map(|c| format!("f{c}")).collect();
    writeln!(file, "{},label,pred", header.join(","))?;
    for i in 0..dataset.len() {
        let cells: Vec<String> = out.features.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(
            file,
            "{},{},{}",
            cells.join(","),
            dataset.y[i],
            argmax(out.probs.row(i))
        )?;
    }
    Ok(())
}

/// Metrics file written by the CLI after adaptation: final report, per-step
/// loss records, and run metadata.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub report: MetricsReport,
    pub steps: Vec<StepRecord>,
}
