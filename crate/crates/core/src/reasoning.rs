//! Gradient attribution, reason extraction, and the reason-supervision loss.
//!
//! The judgment network explains itself through its own gradients: the
//! contribution of feature element `x_i` to logit `y_j` is
//! `(∂y_j/∂x_i) · relu(x_i)`. Averaging the *positive* parts of those
//! contributions over a factor's slice of `x` scores how much that factor
//! pushed the outfit toward judgment `j`; the reason for a good or bad
//! call is the factor whose score most exceeds its score under the
//! `normal` logit.
//!
//! Because gradients here are graph nodes (see [`crate::autodiff`]), the
//! per-factor score differences form a differentiable vector `F`, and a
//! regularizer on `F` — cross-entropy, linear, or squared hinge toward the
//! labeled reason — trains the attribution itself. That pushes second-order
//! gradients through the whole network, which is exactly what
//! [`total_loss`] assembles for the optimizer.
//!
//! Everything operates per reason bucket (color, print, design) via the
//! [`FactorPartition`] fixed by the model layout.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Shape, Tensor, VarHandle};
use crate::compatnet::{predict_judgment, BatchForwardPass, FactorPartition, JUDGMENT_CLASSES};
use crate::record::{Judgment, OutfitRecord, Reason};

#[derive(Debug, Error)]
pub enum ReasonError {
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error("batch must contain at least one record")]
    EmptyBatch,
    #[error("batch has {records} records but the forward pass carries {pass}")]
    BatchMismatch { records: usize, pass: usize },
    #[error("record {outfit_id:?} is {judgment} but has no reason label")]
    MissingReasonLabel { outfit_id: String, judgment: Judgment },
}

/// Which regularizer supervises the reason vector `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RegularizerKind {
    /// `-log softmax(F)[gt]`.
    #[serde(rename = "ce")]
    CrossEntropy,
    /// `max_r F_r - F_gt`.
    #[serde(rename = "linear")]
    Linear,
    /// `(max_r F_r - F_gt)^2`.
    #[serde(rename = "square")]
    Square,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 3] =
        [RegularizerKind::CrossEntropy, RegularizerKind::Linear, RegularizerKind::Square];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::CrossEntropy => "ce",
            RegularizerKind::Linear => "linear",
            RegularizerKind::Square => "square",
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(RegularizerKind::CrossEntropy),
            "linear" => Ok(RegularizerKind::Linear),
            "square" => Ok(RegularizerKind::Square),
            other => Err(format!("unknown regularizer {other:?} (expected ce, linear, or square)")),
        }
    }
}

/// Per-reason scores as a `[3]` graph node in (color, print, design) order.
#[derive(Clone, Copy, Debug)]
pub struct ContributionVector {
    pub node: VarHandle,
}

impl ContributionVector {
    pub fn values(&self, g: &Graph) -> [f64; 3] {
        let data = g.value(self.node).data();
        [data[0], data[1], data[2]]
    }
}

/// The differentiable reason vector `F`: per reason bucket, the positive
/// contribution under the ground-truth judgment minus the positive
/// contribution under `normal`. Exactly zero when the ground truth *is*
/// `normal`, since both terms are then the same node.
#[derive(Clone, Copy, Debug)]
pub struct FVector {
    pub node: VarHandle,
}

impl FVector {
    pub fn values(&self, g: &Graph) -> [f64; 3] {
        let data = g.value(self.node).data();
        [data[0], data[1], data[2]]
    }
}

/// Scalar node for logit `y_j`.
fn logit(g: &mut Graph, y: VarHandle, j: Judgment) -> Result<VarHandle, ReasonError> {
    let s = g.slice(y, j.index(), j.index() + 1)?;
    Ok(g.sum(s)?)
}

/// `∂y_j/∂x`, kept differentiable so contributions can be trained.
fn grad_wrt_x(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    j: Judgment,
) -> Result<VarHandle, ReasonError> {
    let yj = logit(g, y, j)?;
    Ok(g.grad(yj, &[x], true)?[0])
}

/// Per-element contribution of `x` to logit `y_j`:
/// `(∂y_j/∂x_i) · relu(x_i)`. Negative activations contribute exactly 0.
pub fn contrib(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    j: Judgment,
) -> Result<VarHandle, ReasonError> {
    let gx = grad_wrt_x(g, x, y, j)?;
    let px = g.relu(x)?;
    Ok(g.mul(gx, px)?)
}

/// Mean over a partition segment, as a scalar node.
fn segment_mean(
    g: &mut Graph,
    v: VarHandle,
    range: std::ops::Range<usize>,
) -> Result<VarHandle, ReasonError> {
    let piece = g.slice(v, range.start, range.end)?;
    Ok(g.mean(piece)?)
}

/// Per-reason means of an elementwise vector over `x`.
fn factor_means(
    g: &mut Graph,
    v: VarHandle,
    partition: &FactorPartition,
) -> Result<ContributionVector, ReasonError> {
    let mut parts = Vec::with_capacity(3);
    for reason in Reason::ALL {
        parts.push(segment_mean(g, v, partition.reason_segment(reason))?);
    }
    Ok(ContributionVector { node: g.stack_scalars(&parts)? })
}

/// Positive contribution of each reason bucket to logit `y_j`: the mean of
/// `relu(∂y_j/∂x_i) · relu(x_i)` over the bucket's slice. The relu sits on
/// each gradient element *inside* the mean, so opposing elements cannot
/// cancel each other out.
pub fn positive_contrib(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    j: Judgment,
    partition: &FactorPartition,
) -> Result<ContributionVector, ReasonError> {
    let gx = grad_wrt_x(g, x, y, j)?;
    let pg = g.relu(gx)?;
    let px = g.relu(x)?;
    let prod = g.mul(pg, px)?;
    factor_means(g, prod, partition)
}

/// Argmax over reason scores; exact ties resolve to (color, print, design)
/// order.
pub fn reason_from_scores(scores: &[f64; 3]) -> Reason {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate().skip(1) {
        if *v > scores[best] {
            best = i;
        }
    }
    Reason::from_index(best).expect("index in range")
}

fn reason_against_normal(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    j: Judgment,
    partition: &FactorPartition,
) -> Result<Reason, ReasonError> {
    let c_j = positive_contrib(g, x, y, j, partition)?;
    let c_normal = positive_contrib(g, x, y, Judgment::Normal, partition)?;
    let diff = g.sub(c_j.node, c_normal.node)?;
    let values = g.value(diff).data();
    Ok(reason_from_scores(&[values[0], values[1], values[2]]))
}

/// The factor that pushed the outfit toward `good` the most, relative to
/// how much it pushed toward `normal`.
pub fn reason_good(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    partition: &FactorPartition,
) -> Result<Reason, ReasonError> {
    reason_against_normal(g, x, y, Judgment::Good, partition)
}

/// The factor that made the outfit `bad` rather than `normal`.
pub fn reason_bad(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    partition: &FactorPartition,
) -> Result<Reason, ReasonError> {
    reason_against_normal(g, x, y, Judgment::Bad, partition)
}

/// Reason for the *predicted* judgment: `good`/`bad` dispatch to their
/// extractors, `normal` yields no reason.
pub fn predict_reason(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    partition: &FactorPartition,
) -> Result<Option<Reason>, ReasonError> {
    let judged = predict_judgment(g.value(y).data());
    match judged {
        Judgment::Good => Ok(Some(reason_good(g, x, y, partition)?)),
        Judgment::Bad => Ok(Some(reason_bad(g, x, y, partition)?)),
        Judgment::Normal => Ok(None),
    }
}

/// The differentiable reason vector for a ground-truth judgment:
/// `F_r = C⁺_gt(r) − C⁺_normal(r)`.
pub fn f_vector(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    gt: Judgment,
    partition: &FactorPartition,
) -> Result<FVector, ReasonError> {
    let c_gt = positive_contrib(g, x, y, gt, partition)?;
    let c_normal = if gt == Judgment::Normal {
        // Same node on both sides: the difference is exactly zero and stays
        // exactly zero under differentiation.
        c_gt
    } else {
        positive_contrib(g, x, y, Judgment::Normal, partition)?
    };
    Ok(FVector { node: g.sub(c_gt.node, c_normal.node)? })
}

/// Cross-entropy regularizer: `-log softmax(F)[gt]`.
pub fn reg_ce(g: &mut Graph, f: &FVector, gt_reason: Reason) -> Result<VarHandle, ReasonError> {
    Ok(g.softmax_cross_entropy(f.node, gt_reason.index())?)
}

/// Linear regularizer: `max_r F_r − F_gt`; zero exactly when the labeled
/// reason already holds the maximum.
pub fn reg_linear(g: &mut Graph, f: &FVector, gt_reason: Reason) -> Result<VarHandle, ReasonError> {
    let am = g.max_index(f.node)?;
    let max_slice = g.slice(f.node, am, am + 1)?;
    let f_max = g.sum(max_slice)?;
    let gt_slice = g.slice(f.node, gt_reason.index(), gt_reason.index() + 1)?;
    let f_gt = g.sum(gt_slice)?;
    Ok(g.sub(f_max, f_gt)?)
}

/// Square regularizer: `(max_r F_r − F_gt)^2`.
pub fn reg_square(g: &mut Graph, f: &FVector, gt_reason: Reason) -> Result<VarHandle, ReasonError> {
    let lin = reg_linear(g, f, gt_reason)?;
    Ok(g.mul(lin, lin)?)
}

/// Dispatch over [`RegularizerKind`].
pub fn regularize(
    g: &mut Graph,
    f: &FVector,
    gt_reason: Reason,
    kind: RegularizerKind,
) -> Result<VarHandle, ReasonError> {
    match kind {
        RegularizerKind::CrossEntropy => reg_ce(g, f, gt_reason),
        RegularizerKind::Linear => reg_linear(g, f, gt_reason),
        RegularizerKind::Square => reg_square(g, f, gt_reason),
    }
}

/// The pieces of a training loss, all scalar nodes on the batch graph.
pub struct LossTerms {
    /// `judgment + alpha * reason` (or just `judgment` when no reason term
    /// applies).
    pub total: VarHandle,
    /// Batch-mean judgment cross-entropy.
    pub judgment: VarHandle,
    /// Batch-mean reason regularizer (normal samples contribute zero);
    /// `None` when `alpha == 0` or the batch has no good/bad samples.
    pub reason: Option<VarHandle>,
}

/// Assemble the training loss over a batched forward pass:
/// batch mean of `judgment CE + alpha * reason regularizer`, the reason
/// term applying only to samples whose ground truth is good or bad.
///
/// The reason term runs through two extra gradient passes (one for the
/// ground-truth logits, one for normal), so minimizing this loss
/// differentiates the derivative — the engine's double-backward path.
/// Column independence makes the batched gradients bitwise equal to
/// per-sample ones.
pub fn total_loss(
    g: &mut Graph,
    pass: &BatchForwardPass,
    records: &[&OutfitRecord],
    alpha: f64,
    kind: RegularizerKind,
    partition: &FactorPartition,
) -> Result<LossTerms, ReasonError> {
    if records.is_empty() {
        return Err(ReasonError::EmptyBatch);
    }
    if records.len() != pass.batch_len {
        return Err(ReasonError::BatchMismatch { records: records.len(), pass: pass.batch_len });
    }
    let b = records.len();

    let targets: Vec<usize> = records.iter().map(|r| r.judgment.index()).collect();
    let ce_vec = g.softmax_cross_entropy_cols(pass.y, &targets)?;
    let ce_sum = g.sum(ce_vec)?;
    let l_judgment = g.scale(ce_sum, 1.0 / b as f64)?;

    // Reason labels for the samples that carry one.
    let mut reason_targets = vec![None; b];
    for (i, record) in records.iter().enumerate() {
        if record.judgment != Judgment::Normal {
            let reason = record.reason.ok_or_else(|| ReasonError::MissingReasonLabel {
                outfit_id: record.outfit_id.clone(),
                judgment: record.judgment,
            })?;
            reason_targets[i] = Some(reason.index());
        }
    }
    let supervised = reason_targets.iter().flatten().count();
    if alpha == 0.0 || supervised == 0 {
        return Ok(LossTerms { total: l_judgment, judgment: l_judgment, reason: None });
    }

    // One backward pass per judgment role: summing the selected logit over
    // all columns yields every sample's ∂y_sel/∂x in its own column.
    let grad_of_selected = |g: &mut Graph, select_row: &dyn Fn(usize) -> usize| -> Result<VarHandle, ReasonError> {
        let mut sel = vec![0.0; JUDGMENT_CLASSES * b];
        for (col, _) in records.iter().enumerate() {
            sel[select_row(col) * b + col] = 1.0;
        }
        let sel = g.constant(Tensor::matrix(JUDGMENT_CLASSES, b, sel))?;
        let picked = g.mul(pass.y, sel)?;
        let total = g.sum(picked)?;
        Ok(g.grad(total, &[pass.x], true)?[0])
    };
    let g_gt = grad_of_selected(g, &|col| targets[col])?;
    let g_normal = grad_of_selected(g, &|_| Judgment::Normal.index())?;

    let px = g.relu(pass.x)?;
    let pg_gt = g.relu(g_gt)?;
    let prod_gt = g.mul(pg_gt, px)?;
    let pg_normal = g.relu(g_normal)?;
    let prod_normal = g.mul(pg_normal, px)?;

    // Per-column factor means -> one [1 x b] row per reason bucket; their
    // differences stack into the per-sample F matrix [3 x b].
    let mut f_rows = Vec::with_capacity(3);
    for reason in Reason::ALL {
        let seg = partition.reason_segment(reason);
        let ones_row = g.constant(Tensor::matrix(1, seg.len(), vec![1.0; seg.len()]))?;
        let row_mean = |g: &mut Graph, prod: VarHandle| -> Result<VarHandle, ReasonError> {
            let piece = g.slice(prod, seg.start, seg.end)?;
            let sums = g.matmul(ones_row, piece)?;
            Ok(g.scale(sums, 1.0 / seg.len() as f64)?)
        };
        let m_gt = row_mean(g, prod_gt)?;
        let m_normal = row_mean(g, prod_normal)?;
        f_rows.push(g.sub(m_gt, m_normal)?);
    }
    let f_mat = g.concat(&f_rows)?;

    // Per-sample regularizer values as a [b] vector. Normal samples get a
    // placeholder target and are masked out below.
    let reg_vec = match kind {
        RegularizerKind::CrossEntropy => {
            let ce_targets: Vec<usize> =
                reason_targets.iter().map(|t| t.unwrap_or(0)).collect();
            g.softmax_cross_entropy_cols(f_mat, &ce_targets)?
        }
        RegularizerKind::Linear | RegularizerKind::Square => {
            let f_values = g.value(f_mat).data().to_vec();
            let mut max_sel = vec![0.0; 3 * b];
            let mut gt_sel = vec![0.0; 3 * b];
            for col in 0..b {
                let mut best = 0;
                for row in 1..3 {
                    if f_values[row * b + col] > f_values[best * b + col] {
                        best = row;
                    }
                }
                max_sel[best * b + col] = 1.0;
                if let Some(t) = reason_targets[col] {
                    gt_sel[t * b + col] = 1.0;
                }
            }
            let ones3 = g.constant(Tensor::filled(Shape::Vector(3), 1.0))?;
            let max_sel = g.constant(Tensor::matrix(3, b, max_sel))?;
            let gt_sel = g.constant(Tensor::matrix(3, b, gt_sel))?;
            let picked_max = g.mul(f_mat, max_sel)?;
            let f_max = g.mat_t_vec(picked_max, ones3)?;
            let picked_gt = g.mul(f_mat, gt_sel)?;
            let f_gt = g.mat_t_vec(picked_gt, ones3)?;
            let lin = g.sub(f_max, f_gt)?;
            match kind {
                RegularizerKind::Linear => lin,
                _ => g.mul(lin, lin)?,
            }
        }
    };

    let mask: Vec<f64> =
        reason_targets.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::vector(mask))?;
    let masked = g.mul(reg_vec, mask)?;
    let reg_sum = g.sum(masked)?;
    let l_reason = g.scale(reg_sum, 1.0 / b as f64)?;

    let scaled = g.scale(l_reason, alpha)?;
    let total = g.add(l_judgment, scaled)?;
    Ok(LossTerms { total, judgment: l_judgment, reason: Some(l_reason) })
}

/// The six candidate ways to score factors for reason extraction, kept
/// around so they can be compared on equal footing. The default used
/// everywhere else is [`ReasonFormulation::PositiveContributionDiff`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReasonFormulation {
    /// Factor means of the signed contribution `grad · relu(x)`.
    Contribution,
    /// `Contribution` under `j` minus under `normal`.
    ContributionDiff,
    /// Factor means of `relu(grad) · x` (raw activations, positive grads).
    PositiveGradient,
    /// Factor means of `relu(grad) · relu(x)`.
    PositiveContribution,
    /// `relu` of `ContributionDiff`.
    ContributionDiffRelu,
    /// `PositiveContribution` under `j` minus under `normal`.
    PositiveContributionDiff,
}

impl ReasonFormulation {
    pub const ALL: [ReasonFormulation; 6] = [
        ReasonFormulation::Contribution,
        ReasonFormulation::ContributionDiff,
        ReasonFormulation::PositiveGradient,
        ReasonFormulation::PositiveContribution,
        ReasonFormulation::ContributionDiffRelu,
        ReasonFormulation::PositiveContributionDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReasonFormulation::Contribution => "contribution",
            ReasonFormulation::ContributionDiff => "contribution-diff",
            ReasonFormulation::PositiveGradient => "positive-gradient",
            ReasonFormulation::PositiveContribution => "positive-contribution",
            ReasonFormulation::ContributionDiffRelu => "contribution-diff-relu",
            ReasonFormulation::PositiveContributionDiff => "positive-contribution-diff",
        }
    }
}

impl std::fmt::Display for ReasonFormulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Score the three reason buckets for judgment `j` under one formulation.
pub fn formulation_score(
    g: &mut Graph,
    x: VarHandle,
    y: VarHandle,
    j: Judgment,
    formulation: ReasonFormulation,
    partition: &FactorPartition,
) -> Result<ContributionVector, ReasonError> {
    use ReasonFormulation::*;
    match formulation {
        Contribution => {
            let c = contrib(g, x, y, j)?;
            factor_means(g, c, partition)
        }
        ContributionDiff => {
            let own = formulation_score(g, x, y, j, Contribution, partition)?;
            let normal = if j == Judgment::Normal {
                own
            } else {
                formulation_score(g, x, y, Judgment::Normal, Contribution, partition)?
            };
            Ok(ContributionVector { node: g.sub(own.node, normal.node)? })
        }
        PositiveGradient => {
            let gx = grad_wrt_x(g, x, y, j)?;
            let pg = g.relu(gx)?;
            let prod = g.mul(pg, x)?;
            factor_means(g, prod, partition)
        }
        PositiveContribution => positive_contrib(g, x, y, j, partition),
        ContributionDiffRelu => {
            let diff = formulation_score(g, x, y, j, ContributionDiff, partition)?;
            Ok(ContributionVector { node: g.relu(diff.node)? })
        }
        PositiveContributionDiff => {
            let own = positive_contrib(g, x, y, j, partition)?;
            let normal = if j == Judgment::Normal {
                own
            } else {
                positive_contrib(g, x, y, Judgment::Normal, partition)?
            };
            Ok(ContributionVector { node: g.sub(own.node, normal.node)? })
        }
    }
}
