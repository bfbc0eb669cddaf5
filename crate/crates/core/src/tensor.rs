//! Dense f64 arrays, activations, losses, the Adam optimizer and a
//! finite-difference gradient oracle.
//!
//! Everything here is deliberately small: row-major `Vec<f64>` storage,
//! plain loops, no hidden global state. Backprop elsewhere in the crate is
//! written by hand against these primitives.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};

/// The single PRNG used across the crate. Always seeded explicitly.
pub type Rng = rand_xoshiro::SplitMix64;

/// Build a [`Rng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for DenseArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseArray")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 1-D array.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D array from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(&[r, c], data)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self · x` for a 2-D `self` of shape `r×c` and `x` of length `c`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols(), x.len());
        (0..self.rows()).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y` for `y` of length `r`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows(), y.len());
        let mut out = vec![0.0; self.cols()];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(&mut out, yi, self.row(i));
            }
        }
        out
    }

    /// `self += a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(self.rows(), a.len());
        debug_assert_eq!(self.cols(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                axpy(self.row_mut(i), ai, b);
            }
        }
    }

    pub fn add_assign(&mut self, other: &DenseArray) {
        debug_assert_eq!(self.shape, other.shape);
        axpy(&mut self.data, 1.0, &other.data);
    }

    pub fn transpose(&self) -> DenseArray {
        let (r, c) = (self.rows(), self.cols());
        let mut out = DenseArray::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Standard matrix product of two 2-D arrays.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseArray::zeros(&[n, m]);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av != 0.0 {
                axpy(orow, av, &b.data[p * m..(p + 1) * m]);
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax over a slice.
pub fn softmax_slice(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    // Underflowed entries are lifted to the smallest normal value so the
    // output stays strictly positive.
    out.iter_mut()
        .for_each(|x| *x = (*x / sum).max(f64::MIN_POSITIVE));
    Ok(out)
}

pub fn softmax(v: &DenseArray) -> Result<DenseArray> {
    softmax_slice(v.data()).map(DenseArray::vector)
}

/// Backward pass of softmax: given `p = softmax(x)` and `dL/dp`, returns `dL/dx`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(pi, dpi)| pi * (dpi - s)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(a: &DenseArray) -> DenseArray {
    a.map(f64::tanh)
}

pub fn sigmoid_array(a: &DenseArray) -> DenseArray {
    a.map(sigmoid)
}

pub fn relu(a: &DenseArray) -> DenseArray {
    a.map(|x| x.max(0.0))
}

/// Probability floor applied before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// `-log(dist[target])`, with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    let p = dist.get(target).ok_or_else(|| {
        Error::Domain(format!(
            "target index {target} out of range for distribution of length {}",
            dist.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform Glorot-style initialization in `[-r, r]`, `r = sqrt(6/(fan_in+fan_out))`.
pub fn glorot(shape: &[usize], rng: &mut Rng) -> DenseArray {
    let (fan_out, fan_in) = match shape {
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => {
            let r = shape[0];
            (r, shape[1..].iter().product())
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    DenseArray {
        shape: shape.to_vec(),
        data,
    }
}

/// Dropout mask with inverted scaling: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// One trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: DenseArray,
    pub grad: DenseArray,
    pub adam_m: DenseArray,
    pub adam_v: DenseArray,
}

impl Param {
    fn new(value: DenseArray) -> Self {
        let z = DenseArray::zeros(value.shape());
        Self {
            grad: z.clone(),
            adam_m: z.clone(),
            adam_v: z,
            value,
        }
    }
}

/// Gradient buffers keyed by parameter name, shaped like a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: BTreeMap<String, DenseArray>,
}

impl GradBuffer {
    pub fn get_mut(&mut self, name: &str) -> &mut DenseArray {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient buffer named {name}"))
    }

    pub fn get(&self, name: &str) -> &DenseArray {
        &self.grads[name]
    }

    /// Mutable access to several distinct buffers at once, in the order named.
    pub fn get_disjoint_mut<const N: usize>(&mut self, names: [&str; N]) -> [&mut DenseArray; N] {
        let mut slots: [Option<&mut DenseArray>; N] = std::array::from_fn(|_| None);
        for (key, g) in self.grads.iter_mut() {
            if let Some(pos) = names.iter().position(|n| n == key) {
                slots[pos] = Some(g);
            }
        }
        slots.map(|s| s.expect("gradient buffer names must exist and be distinct"))
    }

    /// Element-wise `self += scale * other`.
    pub fn merge(&mut self, other: &GradBuffer, scale: f64) {
        for (name, g) in &mut self.grads {
            axpy(g.data_mut(), scale, other.grads[name].data());
        }
    }
}

/// Named trainable arrays plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
    step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Domain(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &DenseArray {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut DenseArray {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &DenseArray {
        &self.entries[name].grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut DenseArray {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .grad
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn total_size(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Zeroed gradient buffers with the same names and shapes.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), DenseArray::zeros(p.value.shape())))
                .collect(),
        }
    }

    /// Replace all gradients with `buf * scale`.
    pub fn set_grads(&mut self, buf: &GradBuffer, scale: f64) {
        for (name, p) in &mut self.entries {
            let src = buf.get(name);
            for (g, s) in p.grad.data_mut().iter_mut().zip(src.data()) {
                *g = s * scale;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// One Adam update with bias correction, then zero the gradients.
    ///
    /// No parameter is touched if any gradient is non-finite.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if let Some((name, _)) = self.entries.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {name}"
            )));
        }
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in self.entries.values_mut() {
            let Param {
                value,
                grad,
                adam_m,
                adam_v,
            } = p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(adam_m.data_mut())
                .zip(adam_v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * *g;
                *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
                *g = 0.0;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Coordinates checked per tensor by [`finite_diff_report`] (all of them when smaller).
pub const FD_SAMPLES_PER_TENSOR: usize = 32;

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffWorst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    pub worst: Option<FiniteDiffWorst>,
}

/// Central-difference check of the gradients stored in `store`.
///
/// `loss_fn` must be deterministic and read only parameter values. Each
/// relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn finite_diff_report<F>(loss_fn: F, store: &ParameterStore, epsilon: f64) -> FiniteDiffReport
where
    F: Fn(&ParameterStore) -> f64,
{
    let mut probe = store.clone();
    let mut rng = seeded_rng(0x5eed_fd);
    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        coordinates_checked: 0,
        worst: None,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name).len();
        let coords: Vec<usize> = if n <= FD_SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, FD_SAMPLES_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = store.value(&name).data()[idx];
            probe.value_mut(&name).data_mut()[idx] = orig + epsilon;
            let up = loss_fn(&probe);
            probe.value_mut(&name).data_mut()[idx] = orig - epsilon;
            let down = loss_fn(&probe);
            probe.value_mut(&name).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = store.grad(&name).data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = Some(FiniteDiffWorst {
                    name: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    report
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn finite_diff_check<F>(loss_fn: F, store: &ParameterStore, epsilon: f64) -> f64
where
    F: Fn(&ParameterStore) -> f64,
{
    finite_diff_report(loss_fn, store, epsilon).max_relative_error
}
