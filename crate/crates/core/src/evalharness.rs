//! Accuracy metrics, baselines, and ablation sweeps.
//!
//! Two numbers summarize a model: judgment accuracy (how often the
//! predicted good/normal/bad verdict matches) and reason accuracy, which
//! is conditional — it only counts samples whose ground truth is good or
//! bad *and* whose judgment was predicted correctly, since a reason for a
//! wrong verdict is meaningless. When nothing qualifies, reason accuracy
//! is undefined rather than zero.
//!
//! Prediction is batched: one graph per chunk, one backward pass for the
//! predicted-class gradients and one for the normal-class gradients, then
//! per-column argmaxes. The batched scores are bitwise identical to
//! scoring each outfit on its own graph.
//!
//! Sweeps retrain from scratch per grid point and repetition. Runs are
//! sequential and deterministic; a repetition's seed is the base seed plus
//! its index.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, VarHandle};
use crate::compatnet::{
    forward_batch, mlp_forward_mat, predict_judgment, CompatModel, FactorPartition, LayerParams,
    MlpParams, ModelConfig, ModelError, JUDGMENT_CLASSES,
};
use crate::reasoning::{
    reason_from_scores, ReasonError, ReasonFormulation, RegularizerKind,
};
use crate::record::{Judgment, OutfitRecord, Reason};
use crate::synthdata::{generate_dataset, GenConfig, SynthError};
use crate::training::{sgd_step, train, BalancedSampler, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reason(#[from] ReasonError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot encode report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Percentage of positions where prediction and ground truth agree.
pub fn judgment_accuracy(preds: &[Judgment], gts: &[Judgment]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "prediction/ground-truth length mismatch");
    assert!(!preds.is_empty(), "accuracy over zero samples is undefined");
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    100.0 * correct as f64 / preds.len() as f64
}

/// Conditional reason accuracy: over samples whose ground truth is good or
/// bad and whose judgment was predicted correctly, the percentage with the
/// right reason. `None` when no sample qualifies.
pub fn reason_accuracy(
    preds: &[(Judgment, Option<Reason>)],
    gts: &[(Judgment, Option<Reason>)],
) -> Option<f64> {
    assert_eq!(preds.len(), gts.len(), "prediction/ground-truth length mismatch");
    let mut eligible = 0usize;
    let mut correct = 0usize;
    for ((pj, pr), (gj, gr)) in preds.iter().zip(gts) {
        if *gj != Judgment::Normal && pj == gj {
            eligible += 1;
            if pr == gr {
                correct += 1;
            }
        }
    }
    (eligible > 0).then(|| 100.0 * correct as f64 / eligible as f64)
}

/// What the model says about one outfit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub outfit_id: String,
    pub judgment: Judgment,
    pub reason: Option<Reason>,
}

/// Evaluation summary over one record set.
#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub n: usize,
    /// Percent, 0..=100.
    pub judgment_accuracy: f64,
    /// Percent over qualifying samples; `None` when none qualify.
    pub reason_accuracy: Option<f64>,
    /// Counts indexed `[ground truth][prediction]` in (good, normal, bad)
    /// order.
    pub confusion: [[usize; 3]; 3],
}

/// Batched factor scores for one chunk: for each column, the three
/// per-reason scores of the requested formulation, evaluated at the
/// column's predicted judgment.
fn chunk_scores(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    preds: &[Judgment],
    formulation: ReasonFormulation,
    partition: &FactorPartition,
) -> Result<Vec<f64>, EvalError> {
    use ReasonFormulation::*;
    let b = preds.len();

    let grad_of = |g: &mut Graph, row_of: &dyn Fn(usize) -> usize| -> Result<VarHandle, EvalError> {
        let mut sel = vec![0.0; JUDGMENT_CLASSES * b];
        for col in 0..b {
            sel[row_of(col) * b + col] = 1.0;
        }
        let sel = g.constant(Tensor::matrix(JUDGMENT_CLASSES, b, sel))?;
        let picked = g.mul(y, sel)?;
        let total = g.sum(picked)?;
        Ok(g.grad(total, &[x], false)?[0])
    };
    let g_pred = grad_of(g, &|col| preds[col].index())?;
    let needs_normal = matches!(
        formulation,
        ContributionDiff | ContributionDiffRelu | PositiveContributionDiff
    );
    let g_norm =
        if needs_normal { Some(grad_of(g, &|_| Judgment::Normal.index())?) } else { None };

    // The per-element product each formulation averages.
    let elementwise = |g: &mut Graph, grad: VarHandle| -> Result<VarHandle, EvalError> {
        Ok(match formulation {
            Contribution | ContributionDiff | ContributionDiffRelu => {
                let px = g.relu(x)?;
                g.mul(grad, px)?
            }
            PositiveGradient => {
                let pg = g.relu(grad)?;
                g.mul(pg, x)?
            }
            PositiveContribution | PositiveContributionDiff => {
                let pg = g.relu(grad)?;
                let px = g.relu(x)?;
                g.mul(pg, px)?
            }
        })
    };
    let prod_pred = elementwise(g, g_pred)?;
    let prod_norm = g_norm.map(|gn| elementwise(g, gn)).transpose()?;

    // Factor means per column -> a [3 x b] score matrix.
    let mut rows = Vec::with_capacity(3);
    for reason in Reason::ALL {
        let seg = partition.reason_segment(reason);
        let ones_row = g.constant(Tensor::matrix(1, seg.len(), vec![1.0; seg.len()]))?;
        let mean_row = |g: &mut Graph, prod: VarHandle| -> Result<VarHandle, EvalError> {
            let piece = g.slice(prod, seg.start, seg.end)?;
            let sums = g.matmul(ones_row, piece)?;
            Ok(g.scale(sums, 1.0 / seg.len() as f64)?)
        };
        let own = mean_row(g, prod_pred)?;
        let row = match prod_norm {
            Some(pn) => {
                let normal = mean_row(g, pn)?;
                g.sub(own, normal)?
            }
            None => own,
        };
        rows.push(row);
    }
    let mut score_mat = g.concat(&rows)?;
    if matches!(formulation, ContributionDiffRelu) {
        score_mat = g.relu(score_mat)?;
    }
    Ok(g.value(score_mat).data().to_vec())
}

/// Predict judgments and reasons for every record, scoring reasons with
/// the given formulation. Reasons are extracted only for predicted
/// good/bad.
pub fn predict_all_with_formulation(
    model: &CompatModel,
    records: &[OutfitRecord],
    batch_size: usize,
    formulation: ReasonFormulation,
) -> Result<Vec<Prediction>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if batch_size == 0 {
        return Err(EvalError::ZeroBatchSize);
    }
    let partition = model.config.partition();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size) {
        let refs: Vec<&OutfitRecord> = chunk.iter().collect();
        let mut g = Graph::new();
        let pass = forward_batch(&mut g, model, &refs)?;
        let b = refs.len();
        let y_vals = g.value(pass.y).data().to_vec();
        let preds: Vec<Judgment> = (0..b)
            .map(|col| {
                let logits: Vec<f64> =
                    (0..JUDGMENT_CLASSES).map(|row| y_vals[row * b + col]).collect();
                predict_judgment(&logits)
            })
            .collect();

        let any_reason = preds.iter().any(|p| *p != Judgment::Normal);
        let scores = if any_reason {
            Some(chunk_scores(&mut g, pass.x, pass.y, &preds, formulation, &partition)?)
        } else {
            None
        };
        for (col, record) in refs.iter().enumerate() {
            let reason = match (preds[col], &scores) {
                (Judgment::Normal, _) => None,
                (_, Some(s)) => {
                    Some(reason_from_scores(&[s[col], s[b + col], s[2 * b + col]]))
                }
                (_, None) => unreachable!("scores exist when any column needs a reason"),
            };
            out.push(Prediction {
                outfit_id: record.outfit_id.clone(),
                judgment: preds[col],
                reason,
            });
        }
    }
    Ok(out)
}

/// [`predict_all_with_formulation`] under the default scoring (positive
/// contribution relative to normal).
pub fn predict_all(
    model: &CompatModel,
    records: &[OutfitRecord],
    batch_size: usize,
) -> Result<Vec<Prediction>, EvalError> {
    predict_all_with_formulation(
        model,
        records,
        batch_size,
        ReasonFormulation::PositiveContributionDiff,
    )
}

/// Compare predictions against the records they were made for.
pub fn metrics_from_predictions(
    records: &[OutfitRecord],
    predictions: &[Prediction],
) -> EvalMetrics {
    assert_eq!(records.len(), predictions.len());
    let mut confusion = [[0usize; 3]; 3];
    for (r, p) in records.iter().zip(predictions) {
        assert_eq!(r.outfit_id, p.outfit_id, "prediction order must match records");
        confusion[r.judgment.index()][p.judgment.index()] += 1;
    }
    let pred_j: Vec<Judgment> = predictions.iter().map(|p| p.judgment).collect();
    let gt_j: Vec<Judgment> = records.iter().map(|r| r.judgment).collect();
    let pred_pairs: Vec<(Judgment, Option<Reason>)> =
        predictions.iter().map(|p| (p.judgment, p.reason)).collect();
    let gt_pairs: Vec<(Judgment, Option<Reason>)> =
        records.iter().map(|r| (r.judgment, r.reason)).collect();
    EvalMetrics {
        n: records.len(),
        judgment_accuracy: judgment_accuracy(&pred_j, &gt_j),
        reason_accuracy: reason_accuracy(&pred_pairs, &gt_pairs),
        confusion,
    }
}

/// Evaluate with the default reason scoring.
pub fn evaluate(
    model: &CompatModel,
    records: &[OutfitRecord],
    batch_size: usize,
) -> Result<EvalMetrics, EvalError> {
    let predictions = predict_all(model, records, batch_size)?;
    Ok(metrics_from_predictions(records, &predictions))
}

/// Evaluate with an alternative reason scoring.
pub fn evaluate_with_formulation(
    model: &CompatModel,
    records: &[OutfitRecord],
    batch_size: usize,
    formulation: ReasonFormulation,
) -> Result<EvalMetrics, EvalError> {
    let predictions = predict_all_with_formulation(model, records, batch_size, formulation)?;
    Ok(metrics_from_predictions(records, &predictions))
}

/// Baseline reason extraction: argmax of the signed per-factor
/// contribution means for the predicted judgment, with no comparison
/// against the normal logit.
pub fn baseline_ifiv(
    model: &CompatModel,
    records: &[OutfitRecord],
    batch_size: usize,
) -> Result<EvalMetrics, EvalError> {
    evaluate_with_formulation(model, records, batch_size, ReasonFormulation::Contribution)
}

/// Mean and population standard deviation over repetitions.
#[derive(Clone, Debug, Serialize)]
pub struct RunStats {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl RunStats {
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(RunStats { mean, std: var.sqrt(), values })
    }
}

/// Aggregated results for one grid point.
#[derive(Clone, Debug, Serialize)]
pub struct SettingReport {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formulation: Option<String>,
    pub seeds: Vec<u64>,
    pub judgment: RunStats,
    /// Absent when reason accuracy was undefined in every repetition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<RunStats>,
    /// Confusion counts summed over repetitions, `[ground truth][pred]`.
    pub confusion: [[usize; 3]; 3],
}

/// A set of grid points from one sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub settings: Vec<SettingReport>,
}

/// Everything a sweep needs: how to generate data, the architecture, the
/// base optimizer settings, and how many repetitions to aggregate.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub repetitions: usize,
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: GenConfig::default(),
            data_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repetitions: 5,
            eval_batch: 256,
        }
    }
}

fn aggregate(
    label: String,
    alpha: Option<f64>,
    regularizer: Option<String>,
    formulation: Option<String>,
    seeds: Vec<u64>,
    runs: &[EvalMetrics],
) -> SettingReport {
    let judgment =
        RunStats::from_values(runs.iter().map(|m| m.judgment_accuracy).collect()).expect("runs");
    let reason = RunStats::from_values(runs.iter().filter_map(|m| m.reason_accuracy).collect());
    let mut confusion = [[0usize; 3]; 3];
    for m in runs {
        for i in 0..3 {
            for j in 0..3 {
                confusion[i][j] += m.confusion[i][j];
            }
        }
    }
    SettingReport { label, alpha, regularizer, formulation, seeds, judgment, reason, confusion }
}

/// Train once at a given alpha/regularizer and evaluate on the test split.
fn run_single(
    config: &ExperimentConfig,
    splits: &crate::synthdata::DatasetSplits,
    alpha: f64,
    kind: RegularizerKind,
    seed: u64,
) -> Result<EvalMetrics, EvalError> {
    let train_config = TrainConfig { alpha, regularizer: kind, seed, ..config.train.clone() };
    let outcome = train(&splits.train, None, &config.model, &train_config)?;
    evaluate(&outcome.model, &splits.test, config.eval_batch)
}

/// Sweep the regularization weight over a grid, for each regularizer kind.
/// Since `alpha = 0` ignores the regularizer entirely, those runs are
/// computed once per seed and shared across kinds — so every kind's curve
/// starts from the identical unregularized model.
pub fn sweep_alpha(
    alphas: &[f64],
    kinds: &[RegularizerKind],
    config: &ExperimentConfig,
) -> Result<RunReport, EvalError> {
    if alphas.is_empty() || kinds.is_empty() || config.repetitions == 0 {
        return Err(EvalError::EmptyGrid);
    }
    let splits = generate_dataset(&config.data, config.data_seed)?;
    let seeds: Vec<u64> = (0..config.repetitions as u64).map(|r| config.train.seed + r).collect();

    let mut zero_alpha_cache: HashMap<u64, EvalMetrics> = HashMap::new();
    let mut settings = Vec::new();
    for kind in kinds {
        for &alpha in alphas {
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in &seeds {
                let metrics = if alpha == 0.0 {
                    match zero_alpha_cache.get(&seed) {
                        Some(m) => m.clone(),
                        None => {
                            let m = run_single(config, &splits, 0.0, *kind, seed)?;
                            zero_alpha_cache.insert(seed, m.clone());
                            m
                        }
                    }
                } else {
                    run_single(config, &splits, alpha, *kind, seed)?
                };
                runs.push(metrics);
            }
            settings.push(aggregate(
                format!("alpha={alpha} reg={kind}"),
                Some(alpha),
                Some(kind.to_string()),
                None,
                seeds.clone(),
                &runs,
            ));
        }
    }
    Ok(RunReport { settings })
}

/// Compare all reason formulations on unregularized models: one `alpha=0`
/// model per repetition, scored six ways.
pub fn sweep_formulations(config: &ExperimentConfig) -> Result<RunReport, EvalError> {
    if config.repetitions == 0 {
        return Err(EvalError::EmptyGrid);
    }
    let splits = generate_dataset(&config.data, config.data_seed)?;
    let seeds: Vec<u64> = (0..config.repetitions as u64).map(|r| config.train.seed + r).collect();

    let mut models = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let train_config =
            TrainConfig { alpha: 0.0, seed, ..config.train.clone() };
        models.push(train(&splits.train, None, &config.model, &train_config)?.model);
    }

    let mut settings = Vec::new();
    for formulation in ReasonFormulation::ALL {
        let mut runs = Vec::with_capacity(models.len());
        for model in &models {
            runs.push(evaluate_with_formulation(
                model,
                &splits.test,
                config.eval_batch,
                formulation,
            )?);
        }
        settings.push(aggregate(
            format!("formulation={formulation}"),
            None,
            None,
            Some(formulation.to_string()),
            seeds.clone(),
            &runs,
        ));
    }
    Ok(RunReport { settings })
}

/// A judgment model with a parallel head that predicts the reason directly
/// from the compatibility feature.
pub struct MultitaskModel {
    pub base: CompatModel,
    pub reason_head: MlpParams,
}

fn init_reason_head(model: &ModelConfig, seed: u64) -> MlpParams {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x68656164); // distinct stream per head
    let dims = [
        (model.inter_hidden[0], model.x_dim()),
        (model.inter_hidden[1], model.inter_hidden[0]),
        (3, model.inter_hidden[1]),
    ];
    let layers = dims
        .into_iter()
        .map(|(rows, cols)| {
            let bound = 1.0 / (cols as f64).sqrt();
            let weight = Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
            );
            let bias =
                Tensor::vector((0..rows).map(|_| rng.random_range(-bound..bound)).collect());
            LayerParams { weight, bias }
        })
        .collect();
    MlpParams { layers }
}

/// Train the multitask baseline: the usual judgment loss plus a direct
/// cross-entropy on the reason head for good/bad samples. No gradient
/// attribution is involved — reasons come straight out of the head.
pub fn baseline_multitask(
    train_records: &[OutfitRecord],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<MultitaskModel, EvalError> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(EvalError::Train(TrainError::EmptyTrainSet));
    }
    let mut base = crate::compatnet::init_model(model_config, config.seed)?;
    let mut head = init_reason_head(model_config, config.seed);
    let mut sampler = BalancedSampler::new(train_records, config.seed.wrapping_add(1))?;
    let steps_per_epoch = train_records.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        for _ in 0..steps_per_epoch {
            let indices = sampler.draw_batch(config.batch_size);
            let batch: Vec<&OutfitRecord> = indices.iter().map(|&i| &train_records[i]).collect();
            let b = batch.len();
            let mut g = Graph::new();
            let pass = forward_batch(&mut g, &base, &batch)?;

            let targets: Vec<usize> = batch.iter().map(|r| r.judgment.index()).collect();
            let ce = g.softmax_cross_entropy_cols(pass.y, &targets)?;
            let ce_sum = g.sum(ce)?;
            let mut loss = g.scale(ce_sum, 1.0 / b as f64)?;

            // Reason head on x, supervised where a reason exists.
            let head_vars: Vec<(VarHandle, VarHandle)> = head
                .layers
                .iter()
                .map(|layer| {
                    Ok((g.variable(layer.weight.clone())?, g.variable(layer.bias.clone())?))
                })
                .collect::<Result<_, AutodiffError>>()?;
            let head_arr: [(VarHandle, VarHandle); 3] =
                [head_vars[0], head_vars[1], head_vars[2]];
            let ones_b = g.constant(Tensor::vector(vec![1.0; b]))?;
            let head_y = mlp_forward_mat(&mut g, &head_arr, pass.x, ones_b)?;
            let reason_targets: Vec<Option<usize>> =
                batch.iter().map(|r| r.reason.map(|x| x.index())).collect();
            let supervised = reason_targets.iter().flatten().count();
            if supervised > 0 {
                let fill: Vec<usize> =
                    reason_targets.iter().map(|t| t.unwrap_or(0)).collect();
                let head_ce = g.softmax_cross_entropy_cols(head_y, &fill)?;
                let mask: Vec<f64> = reason_targets
                    .iter()
                    .map(|t| if t.is_some() { 1.0 } else { 0.0 })
                    .collect();
                let mask = g.constant(Tensor::vector(mask))?;
                let masked = g.mul(head_ce, mask)?;
                let head_sum = g.sum(masked)?;
                let head_mean = g.scale(head_sum, 1.0 / b as f64)?;
                loss = g.add(loss, head_mean)?;
            }

            let mut params = pass.vars.all();
            params.extend(head_vars.iter().flat_map(|(w, bias)| [*w, *bias]));
            let grads = g.grad(loss, &params, false)?;
            let grad_values: Vec<Tensor> =
                grads.into_iter().map(|h| g.value(h).clone()).collect();
            let mut tensors = base.param_tensors_mut();
            for layer in head.layers.iter_mut() {
                tensors.push(&mut layer.weight);
                tensors.push(&mut layer.bias);
            }
            sgd_step(&mut tensors, &grad_values, lr, config.weight_decay);
        }
    }
    Ok(MultitaskModel { base, reason_head: head })
}

/// Evaluate the multitask baseline: judgments from the base model, reasons
/// from the head's argmax (for predicted good/bad).
pub fn evaluate_multitask(
    model: &MultitaskModel,
    records: &[OutfitRecord],
    batch_size: usize,
) -> Result<EvalMetrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if batch_size == 0 {
        return Err(EvalError::ZeroBatchSize);
    }
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size) {
        let refs: Vec<&OutfitRecord> = chunk.iter().collect();
        let b = refs.len();
        let mut g = Graph::new();
        let pass = forward_batch(&mut g, &model.base, &refs)?;
        let head_vars: Vec<(VarHandle, VarHandle)> = model
            .reason_head
            .layers
            .iter()
            .map(|layer| {
                Ok((g.constant(layer.weight.clone())?, g.constant(layer.bias.clone())?))
            })
            .collect::<Result<_, AutodiffError>>()?;
        let head_arr: [(VarHandle, VarHandle); 3] = [head_vars[0], head_vars[1], head_vars[2]];
        let ones_b = g.constant(Tensor::vector(vec![1.0; b]))?;
        let head_y = mlp_forward_mat(&mut g, &head_arr, pass.x, ones_b)?;

        let y_vals = g.value(pass.y).data().to_vec();
        let head_vals = g.value(head_y).data().to_vec();
        for (col, record) in refs.iter().enumerate() {
            let logits: Vec<f64> =
                (0..JUDGMENT_CLASSES).map(|row| y_vals[row * b + col]).collect();
            let judgment = predict_judgment(&logits);
            let reason = match judgment {
                Judgment::Normal => None,
                _ => Some(reason_from_scores(&[
                    head_vals[col],
                    head_vals[b + col],
                    head_vals[2 * b + col],
                ])),
            };
            predictions.push(Prediction {
                outfit_id: record.outfit_id.clone(),
                judgment,
                reason,
            });
        }
    }
    Ok(metrics_from_predictions(records, &predictions))
}

/// CSV rows for a report: one line per setting, empty cells where a value
/// does not apply.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "label,alpha,regularizer,formulation,runs,judgment_mean,judgment_std,reason_mean,reason_std\n",
    );
    for s in &report.settings {
        let opt_f = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_s = |v: &Option<String>| v.clone().unwrap_or_default();
        let (rm, rs) = match &s.reason {
            Some(stats) => (stats.mean.to_string(), stats.std.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.label,
            opt_f(&s.alpha),
            opt_s(&s.regularizer),
            opt_s(&s.formulation),
            s.seeds.len(),
            s.judgment.mean,
            s.judgment.std,
            rm,
            rs,
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, report: &RunReport) -> Result<(), EvalError> {
    std::fs::write(path, report_csv(report))?;
    Ok(())
}

/// JSON plot data: a flat series of settings with their aggregate
/// accuracies, ready for any plotting tool.
pub fn write_plot_json(path: &Path, report: &RunReport) -> Result<(), EvalError> {
    #[derive(Serialize)]
    struct Point<'a> {
        label: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        regularizer: Option<&'a str>,
        #[serde(skip_serializing_if = "Option::is_none")]
        formulation: Option<&'a str>,
        judgment_acc: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        reason_acc: Option<f64>,
    }
    let points: Vec<Point> = report
        .settings
        .iter()
        .map(|s| Point {
            label: &s.label,
            alpha: s.alpha,
            regularizer: s.regularizer.as_deref(),
            formulation: s.formulation.as_deref(),
            judgment_acc: s.judgment.mean,
            reason_acc: s.reason.as_ref().map(|r| r.mean),
        })
        .collect();
    let body = serde_json::to_string_pretty(&serde_json::json!({ "series": points }))?;
    std::fs::write(path, body)?;
    Ok(())
}
