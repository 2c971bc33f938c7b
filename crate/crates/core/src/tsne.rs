//! Planar embedding of per-stock indicator summaries via exact t-SNE.
//!
//! Each stock is summarized as a 50-dimensional vector: the mean and the
//! sample standard deviation of each of the 25 indicators over the
//! training range. The summaries are embedded into the plane so the
//! clustering stage can group stocks whose indicator behavior is alike.
//!
//! Conventions:
//! - Affinities are conditional Gaussians with a per-point bandwidth
//!   found by bisection so each conditional entropy equals
//!   ln(perplexity) within 1e-5, symmetrized as (p_{j|i}+p_{i|j})/(2n).
//! - The low-dimensional kernel is Student-t with one degree of freedom.
//! - Optimization is plain gradient descent with momentum 0.5 switching
//!   to 0.8 at iteration 250, early exaggeration x12 for the first 250
//!   iterations, and recentering after every step.
//! - The KL trace is recorded against the un-exaggerated affinities, one
//!   entry per iteration, measured before that iteration's update.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::market::{IndicatorPanel, INDICATOR_COUNT};
use crate::math;
use crate::rng;

/// Per-stock feature rows fed to the embedding.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub symbols: Vec<String>,
    /// n stocks x d features, row i belongs to `symbols[i]`.
    pub data: Matrix,
}

impl FeatureMatrix {
    /// Wraps a prebuilt matrix. At least 4 rows, one symbol per row, all
    /// entries finite.
    pub fn new(symbols: Vec<String>, data: Matrix) -> Result<Self> {
        if symbols.len() != data.rows {
            return Err(Error::Validation(format!(
                "{} symbols for {} feature rows",
                symbols.len(),
                data.rows
            )));
        }
        if data.rows < 4 {
            return Err(Error::InsufficientData { needed: 4, got: data.rows });
        }
        for (i, sym) in symbols.iter().enumerate() {
            for (j, v) in data.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite feature for {sym} at column {j}"
                    )));
                }
            }
        }
        Ok(FeatureMatrix { symbols, data })
    }

    /// Summarizes indicator panels over the training range: columns
    /// 0..25 are the per-indicator means, columns 25..50 the sample
    /// standard deviations, in panel indicator order.
    pub fn from_panels(panels: &[IndicatorPanel], train: Range<usize>) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: train.len() });
        }
        let mut symbols = Vec::with_capacity(panels.len());
        let mut data = Matrix::zeros(panels.len(), 2 * INDICATOR_COUNT);
        for (i, panel) in panels.iter().enumerate() {
            if train.end > panel.records() {
                return Err(Error::Validation(format!(
                    "training range ends at {} but {} has {} records",
                    train.end,
                    panel.symbol,
                    panel.records()
                )));
            }
            let mut column = Vec::with_capacity(train.len());
            for k in 0..INDICATOR_COUNT {
                column.clear();
                column.extend(train.clone().map(|r| panel.values.get(r, k)));
                data.set(i, k, math::mean(&column));
                data.set(i, INDICATOR_COUNT + k, math::sample_std(&column));
            }
            symbols.push(panel.symbol.clone());
        }
        FeatureMatrix::new(symbols, data)
    }

    /// Z-scores every column across stocks so no indicator dominates the
    /// embedding distances by raw scale. Columns with (near-)zero spread
    /// are mapped to zero, matching the panel normalization convention.
    pub fn standardized(&self) -> FeatureMatrix {
        let n = self.data.rows;
        let mut out = Matrix::zeros(n, self.data.cols);
        let mut column = vec![0.0; n];
        for c in 0..self.data.cols {
            for r in 0..n {
                column[r] = self.data.get(r, c);
            }
            let m = math::mean(&column);
            let s = math::sample_std(&column);
            if s > 1e-12 {
                for r in 0..n {
                    out.set(r, c, (column[r] - m) / s);
                }
            }
        }
        FeatureMatrix { symbols: self.symbols.clone(), data: out }
    }

    pub fn len(&self) -> usize {
        self.data.rows
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows == 0
    }
}

/// Settings for one embedding fit.
#[derive(Debug, Clone, Copy)]
pub struct TsneConfig {
    /// Target perplexity; clamped to (n-1)/3 for small universes.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, iterations: 1000, learning_rate: 200.0, seed: 0 }
    }
}

/// Symmetrized affinities plus the per-point precisions the bisection
/// settled on (beta_i = 1/(2 sigma_i^2)), kept so tests can recompute
/// each conditional entropy independently.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub p: Matrix,
    pub betas: Vec<f64>,
}

/// Final planar coordinates plus the per-iteration KL trace.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    pub kl_trace: Vec<f64>,
}

/// Number of leading iterations run with exaggerated affinities and the
/// lower momentum.
const EARLY_PHASE: usize = 250;
const EXAGGERATION: f64 = 12.0;
const MOMENTUM_EARLY: f64 = 0.5;
const MOMENTUM_LATE: f64 = 0.8;
const ENTROPY_TOL: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;

fn pairwise_sq(x: &Matrix) -> Matrix {
    let n = x.rows;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j)) {
                let diff = a - b;
                s += diff * diff;
            }
            d.set(i, j, s);
            d.set(j, i, s);
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta`, returned as
/// (weights over j != i stored dense with diagonal 0, entropy in nats).
/// A fully underflowed row reports entropy 0 so the bisection backs off.
fn conditional_row(d_sq: &Matrix, i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = d_sq.rows;
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for j in 0..n {
        if j == i {
            out[j] = 0.0;
            continue;
        }
        let d = d_sq.get(i, j);
        let e = math::exp(-beta * d);
        out[j] = e;
        sum += e;
        weighted += e * d;
    }
    if sum <= 0.0 {
        return 0.0;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    math::ln(sum) + beta * weighted / sum
}

/// Gaussian affinities with per-point bandwidths matched to `perplexity`
/// by bisection, symmetrized to a probability matrix.
pub fn compute_affinities(x: &Matrix, perplexity: f64) -> Result<Affinities> {
    let n = x.rows;
    if !(perplexity > 1.0) || perplexity >= n as f64 {
        return Err(Error::Parameter(format!(
            "perplexity must lie in (1, n={n}), got {perplexity}"
        )));
    }
    let mut p = Matrix::zeros(n, n);
    let mut betas = vec![1.0; n];
    if n == 2 {
        // A single neighbor takes all conditional mass at any bandwidth,
        // so the entropy target is unreachable and bisection is skipped.
        p.set(0, 1, 0.5);
        p.set(1, 0, 0.5);
        return Ok(Affinities { p, betas });
    }
    let d_sq = pairwise_sq(x);
    let target = math::ln(perplexity);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut lo = 0.0;
        let mut hi = f64::INFINITY;
        let mut converged = false;
        for _ in 0..BISECTION_STEPS {
            let h = conditional_row(&d_sq, i, beta, &mut row);
            if math::abs(h - target) <= ENTROPY_TOL {
                converged = true;
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "perplexity bisection did not converge for point {i}"
            )));
        }
        betas[i] = beta;
        p.row_mut(i).copy_from_slice(&row);
    }
    let norm = 1.0 / (2.0 * n as f64);
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, (p.get(i, j) + p.get(j, i)) * norm);
        }
    }
    Ok(Affinities { p: sym, betas })
}

/// KL(P||Q) against the un-exaggerated affinities and the gradient of
/// the exaggerated objective at `y`. `q_num` and `q_sum` come from
/// `student_kernel`.
fn kl_and_grad(
    p: &Matrix,
    y: &[[f64; 2]],
    q_num: &Matrix,
    q_sum: f64,
    exaggeration: f64,
    grad: &mut [[f64; 2]],
) -> f64 {
    let n = y.len();
    let mut kl = 0.0;
    for g in grad.iter_mut() {
        *g = [0.0, 0.0];
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p.get(i, j);
            let num = q_num.get(i, j);
            let q = num / q_sum;
            if pij > 0.0 {
                kl += pij * math::ln(pij / q);
            }
            let coeff = 4.0 * (exaggeration * pij - q) * num;
            grad[i][0] += coeff * (y[i][0] - y[j][0]);
            grad[i][1] += coeff * (y[i][1] - y[j][1]);
        }
    }
    kl
}

/// Student-t numerators 1/(1+d^2) with zero diagonal, plus their sum.
fn student_kernel(y: &[[f64; 2]], num: &mut Matrix) -> f64 {
    let n = y.len();
    let mut sum = 0.0;
    for i in 0..n {
        num.set(i, i, 0.0);
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num.set(i, j, v);
            num.set(j, i, v);
            sum += 2.0 * v;
        }
    }
    sum
}

/// Embeds the feature rows into the plane. Pure given (input, config):
/// the same seed reproduces the embedding bit for bit.
pub fn fit_tsne(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<Embedding> {
    if cfg.iterations == 0 {
        return Err(Error::Parameter("iterations must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    let n = features.len();
    let perplexity = if cfg.perplexity > (n as f64 - 1.0) / 3.0 {
        (n as f64 - 1.0) / 3.0
    } else {
        cfg.perplexity
    };
    if !(perplexity > 1.0) {
        return Err(Error::Parameter(format!(
            "universe of {n} stocks leaves perplexity {perplexity} out of range"
        )));
    }
    let aff = compute_affinities(&features.data, perplexity)?;

    let mut stream = rng::substream(cfg.seed, "tsne-init");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-4 * rng::normal(&mut stream), 1e-4 * rng::normal(&mut stream)])
        .collect();
    let mut velocity = vec![[0.0_f64; 2]; n];
    let mut grad = vec![[0.0_f64; 2]; n];
    let mut q_num = Matrix::zeros(n, n);
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let q_sum = student_kernel(&y, &mut q_num);
        if !(q_sum > 0.0) || !q_sum.is_finite() {
            return Err(Error::Numeric(format!(
                "degenerate low-dimensional kernel at iteration {t}"
            )));
        }
        let exaggeration = if t < EARLY_PHASE { EXAGGERATION } else { 1.0 };
        let kl = kl_and_grad(&aff.p, &y, &q_num, q_sum, exaggeration, &mut grad);
        kl_trace.push(kl);
        let momentum = if t < EARLY_PHASE { MOMENTUM_EARLY } else { MOMENTUM_LATE };
        let mut mean = [0.0_f64; 2];
        for (yi, (vi, gi)) in y.iter_mut().zip(velocity.iter_mut().zip(&grad)) {
            for a in 0..2 {
                if !gi[a].is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at iteration {t}"
                    )));
                }
                vi[a] = momentum * vi[a] - cfg.learning_rate * gi[a];
                yi[a] += vi[a];
                mean[a] += yi[a];
            }
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    Ok(Embedding { points: y, kl_trace })
}
