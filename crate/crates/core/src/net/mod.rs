//! Shared tanh backbone plus second-stage heads, with analytic gradients.
//!
//! ```text
//! h      = tanh(x · Wb + bb)            backbone, N×H
//! s      = tanh(h · Ws + bs)            head shared fc, N×H
//! logits = s · Wc + bc                  N×(C+1)
//! deltas = s · Wr + br                  N×4, class-agnostic
//! ```
//!
//! Gradient banks reuse the parameter structs, so every gradient array has
//! exactly the shape of the parameter it belongs to.

mod optim;

pub use optim::{apply_update, sgd_step, TrainConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Named flat views over every array of a parameter (or gradient) bank.
pub trait ParamBank<T: Scalar> {
    fn slices(&self) -> Vec<(&'static str, &[T])>;
    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [T])>;

    fn scale(&mut self, factor: T) {
        for (_, s) in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

fn slice<T>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<T>(
    a: &mut ndarray::ArrayBase<impl ndarray::DataMut<Elem = T>, impl ndarray::Dimension>,
) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-scale..=scale)))
}

fn uniform1<T: Scalar>(rng: &mut impl Rng, n: usize, scale: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(n, || T::lit(rng.gen_range(-scale..=scale)))
}

/// Layer widths: input `D`, hidden `H`, and `C + 1` class outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    pub fn outputs(&self) -> usize {
        self.classes + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn zeros(d: Dims) -> Self {
        Self {
            weight: Array2::zeros((d.input, d.hidden)),
            bias: Array1::zeros(d.hidden),
        }
    }

    pub fn init(d: Dims, rng: &mut impl Rng, scale: f64) -> Self {
        Self {
            weight: uniform(rng, (d.input, d.hidden), scale),
            bias: uniform1(rng, d.hidden, scale),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.ncols()
    }
}

impl<T: Scalar> ParamBank<T> for Backbone<T> {
    fn slices(&self) -> Vec<(&'static str, &[T])> {
        vec![("weight", slice(&self.weight)), ("bias", slice(&self.bias))]
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("weight", slice_mut(&mut self.weight)),
            ("bias", slice_mut(&mut self.bias)),
        ]
    }
}

/// One second-stage head: shared fc, then classification and regression fc.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub shared_weight: Array2<T>,
    pub shared_bias: Array1<T>,
    pub cls_weight: Array2<T>,
    pub cls_bias: Array1<T>,
    pub reg_weight: Array2<T>,
    pub reg_bias: Array1<T>,
}

impl<T: Scalar> Head<T> {
    pub fn zeros(d: Dims) -> Self {
        Self {
            shared_weight: Array2::zeros((d.hidden, d.hidden)),
            shared_bias: Array1::zeros(d.hidden),
            cls_weight: Array2::zeros((d.hidden, d.outputs())),
            cls_bias: Array1::zeros(d.outputs()),
            reg_weight: Array2::zeros((d.hidden, 4)),
            reg_bias: Array1::zeros(4),
        }
    }

    pub fn init(d: Dims, rng: &mut impl Rng, scale: f64) -> Self {
        Self {
            shared_weight: uniform(rng, (d.hidden, d.hidden), scale),
            shared_bias: uniform1(rng, d.hidden, scale),
            cls_weight: uniform(rng, (d.hidden, d.outputs()), scale),
            cls_bias: uniform1(rng, d.outputs(), scale),
            reg_weight: uniform(rng, (d.hidden, 4), scale),
            reg_bias: uniform1(rng, 4, scale),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.cls_weight.ncols()
    }
}

impl<T: Scalar> ParamBank<T> for Head<T> {
    fn slices(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("shared.weight", slice(&self.shared_weight)),
            ("shared.bias", slice(&self.shared_bias)),
            ("cls.weight", slice(&self.cls_weight)),
            ("cls.bias", slice(&self.cls_bias)),
            ("reg.weight", slice(&self.reg_weight)),
            ("reg.bias", slice(&self.reg_bias)),
        ]
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("shared.weight", slice_mut(&mut self.shared_weight)),
            ("shared.bias", slice_mut(&mut self.shared_bias)),
            ("cls.weight", slice_mut(&mut self.cls_weight)),
            ("cls.bias", slice_mut(&mut self.cls_bias)),
            ("reg.weight", slice_mut(&mut self.reg_weight)),
            ("reg.bias", slice_mut(&mut self.reg_bias)),
        ]
    }
}

/// Gradients of a backbone and its heads, in head order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub backbone: Backbone<T>,
    pub heads: Vec<Head<T>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
    shared: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Array2<T>,
    pub deltas: Array2<T>,
    pub cache: Cache<T>,
}

fn tanh_in_place<T: Scalar>(a: &mut Array2<T>) {
    a.mapv_inplace(|v| v.tanh());
}

/// Backbone activations for a batch of features.
pub fn backbone_forward<T: Scalar>(backbone: &Backbone<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    if x.ncols() != backbone.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, backbone expects {}",
            x.ncols(),
            backbone.input_dim()
        )));
    }
    let mut h = x.dot(&backbone.weight) + &backbone.bias;
    tanh_in_place(&mut h);
    Ok(h)
}

/// Head outputs `(logits, deltas, shared activations)` on backbone activations.
pub fn head_forward<T: Scalar>(
    head: &Head<T>,
    hidden: ArrayView2<T>,
) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    if hidden.ncols() != head.shared_weight.nrows() {
        return Err(Error::Shape(format!(
            "hidden width {} does not match head input {}",
            hidden.ncols(),
            head.shared_weight.nrows()
        )));
    }
    let mut s = hidden.dot(&head.shared_weight) + &head.shared_bias;
    tanh_in_place(&mut s);
    let logits = s.dot(&head.cls_weight) + &head.cls_bias;
    let deltas = s.dot(&head.reg_weight) + &head.reg_bias;
    Ok((logits, deltas, s))
}

pub fn forward<T: Scalar>(
    backbone: &Backbone<T>,
    head: &Head<T>,
    x: ArrayView2<T>,
) -> Result<ForwardOutput<T>> {
    let hidden = backbone_forward(backbone, x)?;
    let (logits, deltas, shared) = head_forward(head, hidden.view())?;
    Ok(ForwardOutput {
        logits,
        deltas,
        cache: Cache {
            input: x.to_owned(),
            hidden,
            shared,
        },
    })
}

/// Supervision for one batch. `reg_targets[i]` is `Some` exactly for positives.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a, T> {
    pub classes: &'a [usize],
    pub multiplicities: &'a [usize],
    pub reg_targets: &'a [Option<[T; 4]>],
}

impl<T> Targets<'_, T> {
    fn check(&self, n: usize) -> Result<()> {
        if self.classes.len() != n || self.multiplicities.len() != n || self.reg_targets.len() != n {
            return Err(Error::Shape(format!("targets do not cover {n} rows")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub cls: T,
    pub reg: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            cls: T::one(),
            reg: T::one(),
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn scaled(self, k: T) -> Self {
        Self {
            cls: self.cls * k,
            reg: self.reg * k,
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

fn log_softmax_at<T: Scalar>(row: ndarray::ArrayView1<T>, k: usize) -> T {
    let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    row[k] - lse
}

/// Multiplicity-weighted mean softmax cross-entropy.
pub fn cls_loss<T: Scalar>(logits: ArrayView2<T>, classes: &[usize], multiplicities: &[usize]) -> T {
    let total: usize = multiplicities.iter().sum();
    if total == 0 {
        return T::zero();
    }
    let sum: T = logits
        .rows()
        .into_iter()
        .zip(classes.iter().zip(multiplicities))
        .map(|(row, (&c, &m))| -T::from_count(m) * log_softmax_at(row, c))
        .sum();
    sum / T::from_count(total)
}

fn smooth_l1<T: Scalar>(d: T) -> T {
    let beta = T::lit(SMOOTH_L1_BETA);
    let a = d.abs();
    if a < beta {
        T::lit(0.5) * a * a / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

fn smooth_l1_grad<T: Scalar>(d: T) -> T {
    let beta = T::lit(SMOOTH_L1_BETA);
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Multiplicity-weighted mean over positives of the per-row smooth-L1 sum.
/// Zero when the batch has no positives.
pub fn reg_loss<T: Scalar>(
    deltas: ArrayView2<T>,
    targets: &[Option<[T; 4]>],
    multiplicities: &[usize],
) -> T {
    let mut total = 0usize;
    let mut sum = T::zero();
    for ((row, t), &m) in deltas.rows().into_iter().zip(targets).zip(multiplicities) {
        if let Some(t) = t {
            let per: T = (0..4).map(|k| smooth_l1(row[k] - t[k])).sum();
            sum += T::from_count(m) * per;
            total += m;
        }
    }
    if total == 0 {
        T::zero()
    } else {
        sum / T::from_count(total)
    }
}

pub fn total_loss<T: Scalar>(out: &ForwardOutput<T>, targets: &Targets<T>, w: LossWeights<T>) -> T {
    w.cls * cls_loss(out.logits.view(), targets.classes, targets.multiplicities)
        + w.reg * reg_loss(out.deltas.view(), targets.reg_targets, targets.multiplicities)
}

/// Analytic gradients of [`total_loss`] for one head and the backbone.
pub fn backward<T: Scalar>(
    head: &Head<T>,
    out: &ForwardOutput<T>,
    targets: &Targets<T>,
    w: LossWeights<T>,
) -> Result<(Backbone<T>, Head<T>)> {
    let n = out.logits.nrows();
    targets.check(n)?;
    let total: usize = targets.multiplicities.iter().sum();
    let pos_total: usize = targets
        .multiplicities
        .iter()
        .zip(targets.reg_targets)
        .filter(|(_, t)| t.is_some())
        .map(|(m, _)| m)
        .sum();

    let mut d_logits = softmax_rows(out.logits.view());
    for (i, mut row) in d_logits.rows_mut().into_iter().enumerate() {
        row[targets.classes[i]] -= T::one();
        let k = if total == 0 {
            T::zero()
        } else {
            w.cls * T::from_count(targets.multiplicities[i]) / T::from_count(total)
        };
        row.mapv_inplace(|v| v * k);
    }

    let mut d_deltas = Array2::<T>::zeros((n, 4));
    if pos_total > 0 {
        for (i, t) in targets.reg_targets.iter().enumerate() {
            if let Some(t) = t {
                let k = w.reg * T::from_count(targets.multiplicities[i]) / T::from_count(pos_total);
                for c in 0..4 {
                    d_deltas[[i, c]] = k * smooth_l1_grad(out.deltas[[i, c]] - t[c]);
                }
            }
        }
    }

    let s = &out.cache.shared;
    let h = &out.cache.hidden;
    let x = &out.cache.input;

    let mut d_shared = d_logits.dot(&head.cls_weight.t()) + d_deltas.dot(&head.reg_weight.t());
    d_shared.zip_mut_with(s, |g, &a| *g *= T::one() - a * a);
    let mut d_hidden = d_shared.dot(&head.shared_weight.t());
    d_hidden.zip_mut_with(h, |g, &a| *g *= T::one() - a * a);

    let head_grad = Head {
        shared_weight: h.t().dot(&d_shared),
        shared_bias: d_shared.sum_axis(Axis(0)),
        cls_weight: s.t().dot(&d_logits),
        cls_bias: d_logits.sum_axis(Axis(0)),
        reg_weight: s.t().dot(&d_deltas),
        reg_bias: d_deltas.sum_axis(Axis(0)),
    };
    let backbone_grad = Backbone {
        weight: x.t().dot(&d_hidden),
        bias: d_hidden.sum_axis(Axis(0)),
    };
    Ok((backbone_grad, head_grad))
}
