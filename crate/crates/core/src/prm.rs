//! Parallel second-stage heads on one shared backbone.
//!
//! During training every head draws its own minibatch from the same proposal
//! pool under its own sampling policy; the backbone receives the sum of the
//! per-head gradients. At test time the heads' pre-softmax scores are
//! averaged and the box deltas come from the head trained with the largest
//! positive fraction.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{decode_box, BBox, ProposalLabel};
use crate::metrics::{foreground_scores, proposal_accuracy};
use crate::net::{
    backbone_forward, backward, forward, head_forward, sgd_step, softmax_rows, Backbone, Dims,
    Gradients, Head, LossWeights, ParamBank, Targets, TrainConfig,
};
use crate::rga::{apply_rga, AnnealSchedule};
use crate::sampler::{sample, SampledBatch, SamplingPolicy};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PrmHead<T> {
    pub params: Head<T>,
    pub policy: SamplingPolicy,
    /// Multiplier on this head's loss; 1 in normal training.
    pub loss_scale: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmModel<T> {
    pub backbone: Backbone<T>,
    pub heads: Vec<PrmHead<T>>,
}

impl<T: Scalar> PrmModel<T> {
    /// Uniform initialization in `[-scale, scale]`, one head per policy.
    pub fn init(dims: Dims, policies: &[SamplingPolicy], rng: &mut impl Rng, scale: f64) -> Result<Self> {
        if policies.is_empty() {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        let backbone = Backbone::init(dims, rng, scale);
        let heads = policies
            .iter()
            .map(|&policy| PrmHead {
                params: Head::init(dims, rng, scale),
                policy,
                loss_scale: T::one(),
            })
            .collect();
        Ok(Self { backbone, heads })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input: self.backbone.input_dim(),
            hidden: self.backbone.hidden_dim(),
            classes: self.heads[0].params.num_outputs() - 1,
        }
    }

    pub fn policies(&self) -> Vec<SamplingPolicy> {
        self.heads.iter().map(|h| h.policy).collect()
    }

    /// Head whose regression output is trusted at test time.
    pub fn regression_head(&self) -> usize {
        regression_head_index(&self.policies())
    }
}

/// Index of the policy with the largest positive fraction; ties go to the
/// lowest index.
pub fn regression_head_index(policies: &[SamplingPolicy]) -> usize {
    let mut best = 0;
    for (i, p) in policies.iter().enumerate().skip(1) {
        let (a, b) = (p.ratio, policies[best].ratio);
        // compare a.pos/(a.pos+a.neg) > b.pos/(b.pos+b.neg) exactly
        if a.pos * (b.pos + b.neg) > b.pos * (a.pos + a.neg) {
            best = i;
        }
    }
    best
}

/// Backbone-gradient magnitudes contributed by each head at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormRecord {
    pub step: usize,
    pub head_norms: Vec<f64>,
    pub sum_norm: f64,
    /// Cosine between the first two heads' contributions.
    pub cosine: Option<f64>,
}

impl GradNormRecord {
    fn from_parts<T: Scalar>(step: usize, parts: &[&[T]]) -> Self {
        let norm = |v: &[T]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let head_norms: Vec<f64> = parts.iter().map(|p| norm(p)).collect();
        let len = parts[0].len();
        let sum: Vec<f64> = (0..len)
            .map(|i| parts.iter().map(|p| p[i].as_f64()).sum())
            .collect();
        let sum_norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = (parts.len() >= 2 && head_norms[0] > 0.0 && head_norms[1] > 0.0).then(|| {
            let dot: f64 = parts[0]
                .iter()
                .zip(parts[1])
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            dot / (head_norms[0] * head_norms[1])
        });
        Self {
            step,
            head_norms,
            sum_norm,
            cosine,
        }
    }

    /// `‖Σ g_i‖ ≤ Σ ‖g_i‖` up to `tol`.
    pub fn satisfies_triangle(&self, tol: f64) -> bool {
        self.sum_norm <= self.head_norms.iter().sum::<f64>() + tol
    }
}

pub fn gradnorm_csv_header(num_heads: usize) -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend((1..=num_heads).map(|i| format!("norm_h{i}")));
    cols.push("norm_sum".into());
    cols.push("cosine".into());
    cols.join(",")
}

pub fn write_gradnorm_csv<W: Write>(mut w: W, num_heads: usize, records: &[GradNormRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", gradnorm_csv_header(num_heads))?;
    for r in records {
        write!(w, "{}", r.step)?;
        for n in &r.head_norms {
            write!(w, ",{n:e}")?;
        }
        write!(w, ",{:e},", r.sum_norm)?;
        if let Some(c) = r.cosine {
            write!(w, "{c:.12}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Per-head outcome of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStepStats {
    pub pos_count_unique: usize,
    pub pos_count_effective: usize,
    pub neg_count: usize,
    pub pos_acc: Option<f64>,
    pub neg_acc: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub lambda: f64,
    pub grad_norms: GradNormRecord,
    pub heads: Vec<HeadStepStats>,
}

/// A labeled proposal pool: one feature row per label.
#[derive(Debug, Clone, Copy)]
pub struct ProposalPool<'a, T> {
    pub features: ArrayView2<'a, T>,
    pub labels: &'a [ProposalLabel<T>],
}

/// Sampler seed of `head` at `step`.
pub fn head_seed(base: u64, head: usize, step: usize) -> u64 {
    derive_seed(base, &[stream::SAMPLER, head as u64, step as u64])
}

struct GatheredBatch<T> {
    x: Array2<T>,
    classes: Vec<usize>,
    mult: Vec<usize>,
    reg: Vec<Option<[T; 4]>>,
}

fn gather<T: Scalar>(pool: &ProposalPool<T>, batch: &SampledBatch) -> GatheredBatch<T> {
    let idx: Vec<usize> = batch.entries.iter().map(|e| e.0).collect();
    GatheredBatch {
        x: pool.features.select(Axis(0), &idx),
        classes: idx.iter().map(|&i| pool.labels[i].class_id).collect(),
        mult: batch.entries.iter().map(|e| e.1).collect(),
        reg: idx.iter().map(|&i| pool.labels[i].regression_target).collect(),
    }
}

/// One joint optimization step of all heads.
///
/// Each head samples from `pool` with `head_seeds[i]`, computes its loss and
/// gradients, has its head gradients magnified by the schedule factor, and
/// updates its own parameters. The backbone is updated once with the sum of
/// the per-head backbone gradients, whose magnitudes are recorded first.
pub fn prm_train_step<T: Scalar>(
    model: &mut PrmModel<T>,
    pool: ProposalPool<T>,
    t: usize,
    train: &TrainConfig,
    schedule: &AnnealSchedule,
    head_seeds: &[u64],
) -> Result<StepReport> {
    if head_seeds.len() != model.heads.len() {
        return Err(Error::Shape(format!(
            "{} seeds for {} heads",
            head_seeds.len(),
            model.heads.len()
        )));
    }
    if pool.features.nrows() != pool.labels.len() {
        return Err(Error::Shape("pool features and labels differ in length".into()));
    }
    let base_weights = LossWeights {
        cls: T::lit(train.cls_weight),
        reg: T::lit(train.reg_weight),
    };
    let mut backbone_parts = Vec::with_capacity(model.heads.len());
    let mut head_grads = Vec::with_capacity(model.heads.len());
    let mut stats = Vec::with_capacity(model.heads.len());
    for (head, &seed) in model.heads.iter().zip(head_seeds) {
        let batch = sample(pool.labels, &head.policy, seed)?;
        let g = gather(&pool, &batch);
        let targets = Targets {
            classes: &g.classes,
            multiplicities: &g.mult,
            reg_targets: &g.reg,
        };
        let weights = base_weights.scaled(head.loss_scale);
        let out = forward(&model.backbone, &head.params, g.x.view())?;
        let loss = crate::net::total_loss(&out, &targets, weights);
        let (gb, gh) = backward(&head.params, &out, &targets, weights)?;
        let (pos_acc, neg_acc) = proposal_accuracy(out.logits.view(), &g.classes);
        stats.push(HeadStepStats {
            pos_count_unique: batch.pos_count_unique,
            pos_count_effective: batch.pos_count_effective,
            neg_count: batch.neg_count,
            pos_acc,
            neg_acc,
            loss: loss.as_f64(),
        });
        backbone_parts.push(gb);
        head_grads.push(gh);
    }

    let weights: Vec<&[T]> = backbone_parts
        .iter()
        .map(|b| b.weight.as_slice().expect("standard layout"))
        .collect();
    let grad_norms = GradNormRecord::from_parts(t, &weights);

    let mut parts = backbone_parts.into_iter();
    let mut backbone = parts.next().expect("at least one head");
    for p in parts {
        backbone.add_assign(&p);
    }
    let mut grads = Gradients {
        backbone,
        heads: head_grads,
    };
    let lambda = schedule.anneal_factor(t)?;
    apply_rga(&mut grads, T::lit(lambda))?;

    sgd_step(&mut model.backbone, &grads.backbone, t, train);
    for (head, g) in model.heads.iter_mut().zip(&grads.heads) {
        sgd_step(&mut head.params, g, t, train);
    }
    Ok(StepReport {
        lambda,
        grad_norms,
        heads: stats,
    })
}

/// Elementwise mean of the heads' pre-softmax scores.
pub fn ensemble_scores<T: Scalar>(per_head: &[Array2<T>]) -> Result<Array2<T>> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Shape("no head outputs to ensemble".into()))?;
    if per_head.iter().any(|l| l.dim() != first.dim()) {
        return Err(Error::Shape("head outputs differ in shape".into()));
    }
    let mut sum = first.clone();
    for l in &per_head[1..] {
        sum += l;
    }
    let k = T::from_count(per_head.len());
    sum.mapv_inplace(|v| v / k);
    Ok(sum)
}

/// The regression output of the head with the largest positive fraction,
/// returned by reference.
pub fn select_regression<'a, T>(model: &PrmModel<T>, per_head: &'a [Array2<T>]) -> &'a Array2<T>
where
    T: Scalar,
{
    &per_head[model.regression_head()]
}

/// Test-time outputs for a set of proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Softmax of the averaged logits, N×(C+1).
    pub scores: Array2<T>,
    pub boxes: Vec<BBox<T>>,
    pub head_logits: Vec<Array2<T>>,
    pub head_deltas: Vec<Array2<T>>,
}

impl<T: Scalar> Prediction<T> {
    /// Scores and boxes of head `i` alone.
    pub fn single_head(&self, i: usize, proposals: &[BBox<T>]) -> (Array2<T>, Vec<BBox<T>>) {
        (
            softmax_rows(self.head_logits[i].view()),
            decode_all(proposals, &self.head_deltas[i]),
        )
    }

    /// Foreground score of each proposal under head `i` alone.
    pub fn head_foreground(&self, i: usize) -> Vec<T> {
        foreground_scores(softmax_rows(self.head_logits[i].view()).view())
    }
}

fn decode_all<T: Scalar>(proposals: &[BBox<T>], deltas: &Array2<T>) -> Vec<BBox<T>> {
    proposals
        .iter()
        .zip(deltas.rows())
        .map(|(p, d)| decode_box(p, &[d[0], d[1], d[2], d[3]]))
        .collect()
}

pub fn prm_predict<T: Scalar>(
    model: &PrmModel<T>,
    features: ArrayView2<T>,
    proposals: &[BBox<T>],
) -> Result<Prediction<T>> {
    if features.nrows() != proposals.len() {
        return Err(Error::Shape("features and proposals differ in length".into()));
    }
    let hidden = backbone_forward(&model.backbone, features)?;
    let mut head_logits = Vec::with_capacity(model.heads.len());
    let mut head_deltas = Vec::with_capacity(model.heads.len());
    for h in &model.heads {
        let (logits, deltas, _) = head_forward(&h.params, hidden.view())?;
        head_logits.push(logits);
        head_deltas.push(deltas);
    }
    let scores = softmax_rows(ensemble_scores(&head_logits)?.view());
    let boxes = decode_all(proposals, select_regression(model, &head_deltas));
    Ok(Prediction {
        scores,
        boxes,
        head_logits,
        head_deltas,
    })
}

#[cfg(test)]
mod tests;
