//! Dense 64-bit array math: the primitives shared by the backbone, the
//! projector, the losses and the decoder, plus a central-difference gradient
//! oracle used throughout the tests.
//!
//! `-inf` is the only masking sentinel. NaN is always an error.

pub mod ops;
mod params;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::ParamTensors;

/// Row-major array of `f64` with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> Self {
        DenseArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Samples every element from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Errors on the first NaN or infinity.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        check_finite(&self.data, context)
    }
}

pub(crate) fn check_finite(xs: &[f64], context: &'static str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context,
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// Tolerance on `LSE(values) == 0` for a normalized log-probability vector.
pub const LOGPROB_NORM_TOL: f64 = 1e-9;

/// Log-probabilities over the vocabulary, in nats.
///
/// `-inf` entries are allowed (masked tokens) provided at least one entry is
/// finite and the finite mass still normalizes.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            let index = values
                .iter()
                .position(|v| v.is_nan() || *v == f64::INFINITY)
                .unwrap();
            return Err(Error::NonFinite {
                context: "log-probability vector",
                index,
                value: values[index],
            });
        }
        let lse = logsumexp(&values);
        if !lse.is_finite() {
            return Err(Error::invalid("log-probability vector has no finite entry"));
        }
        if lse.abs() > LOGPROB_NORM_TOL {
            return Err(Error::invalid(format!(
                "log-probabilities are not normalized: logsumexp = {lse:e}"
            )));
        }
        Ok(LogProbVector(values))
    }

    /// Normalizes raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let mut v = logits.to_vec();
        log_softmax_in_place(&mut v)?;
        Ok(LogProbVector(v))
    }

    #[cfg(test)]
    pub(crate) fn from_normalized_unchecked(values: Vec<f64>) -> Self {
        LogProbVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.exp()).collect()
    }

    /// Shannon entropy in nats computed directly from log-probabilities.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|v| v.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>()
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the maximum, lowest index on ties. `-inf` entries are never
/// preferred over finite ones.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(x)))`, max-shifted. All `-inf` yields `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one finite vector.
pub fn log_softmax_in_place(xs: &mut [f64]) -> Result<()> {
    check_finite(xs, "log_softmax input")?;
    let lse = logsumexp(xs);
    xs.iter_mut().for_each(|x| *x -= lse);
    Ok(())
}

/// Log-softmax along `axis` of an array of any rank.
pub fn log_softmax(logits: &DenseArray, axis: usize) -> Result<DenseArray> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    logits.check_finite("log_softmax input")?;
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.clone();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = out.data[base + j * inner];
            }
            let lse = logsumexp(&lane);
            for j in 0..n {
                out.data[base + j * inner] -= lse;
            }
        }
    }
    Ok(out)
}

/// Elementwise `log sum_k w_k exp(logp_k)` for a weighted mixture of
/// distributions given in log space.
///
/// Shifted by the per-entry maximum over components with positive weight, so
/// very negative inputs do not underflow. Weights are renormalized by their
/// sum after the `1e-6` tolerance check.
pub fn weighted_logsumexp(logps: &[LogProbVector], logweights: &[f64]) -> Result<LogProbVector> {
    if logps.is_empty() {
        return Err(Error::invalid("weighted_logsumexp: no components"));
    }
    if logps.len() != logweights.len() {
        return Err(Error::invalid(format!(
            "weighted_logsumexp: {} components but {} weights",
            logps.len(),
            logweights.len()
        )));
    }
    let v = logps[0].len();
    if let Some(bad) = logps.iter().find(|l| l.len() != v) {
        return Err(Error::ShapeMismatch {
            op: "weighted_logsumexp",
            left: vec![v],
            right: vec![bad.len()],
        });
    }
    if logweights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::invalid("weighted_logsumexp: invalid log-weight"));
    }
    let weights: Vec<f64> = logweights.iter().map(|w| w.exp()).collect();
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "weighted_logsumexp: weights sum to {total}, expected 1"
        )));
    }
    let weights: Vec<f64> = if total == 1.0 {
        weights
    } else {
        weights.iter().map(|w| w / total).collect()
    };
    let active: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();

    let mut out = Vec::with_capacity(v);
    for i in 0..v {
        let m = active
            .iter()
            .map(|&k| logps[k].0[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            out.push(m);
            continue;
        }
        let s: f64 = active
            .iter()
            .map(|&k| weights[k] * (logps[k].0[i] - m).exp())
            .sum();
        out.push(m + s.ln());
    }
    Ok(LogProbVector(out))
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if let Some(index) = p.iter().position(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::invalid(format!(
            "shannon_entropy: entry {index} is {}",
            p[index]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "shannon_entropy: probabilities sum to {total}"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` over every
/// coordinate of `params`.
///
/// The loss is evaluated twice at `params` first; differing results are
/// reported as [`Error::NonDeterministic`].
pub fn finite_difference_gradient<F>(mut loss_fn: F, params: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: FnMut(&DenseArray) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    let grads = finite_difference_coords(&mut loss_fn, params, &coords, h)?;
    DenseArray::from_vec(params.shape(), grads)
}

/// Central differences at a subset of flat coordinates.
pub fn finite_difference_coords<F>(
    mut loss_fn: F,
    params: &DenseArray,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&DenseArray) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= params.len() {
            return Err(Error::invalid(format!(
                "coordinate {i} out of range for {} parameters",
                params.len()
            )));
        }
        let x = params.data[i];
        probe.data[i] = x + h;
        let plus = loss_fn(&probe);
        probe.data[i] = x - h;
        let minus = loss_fn(&probe);
        probe.data[i] = x;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
