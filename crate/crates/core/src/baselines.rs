//! Nine classical online portfolio-selection rules.
//!
//! Each strategy carries simplex weights for the coming period and a
//! bounded memory of past price relatives. The driver plays
//! `weights()`, reveals the period's ratios through `observe(x)`, and
//! the state advances; weights therefore depend only on strictly past
//! data. All parameterizations follow the originating papers' defaults.
//!
//! Update rules, briefly:
//! - BAH drifts with returns and never rebalances.
//! - CRP rebalances to uniform every period.
//! - UP tracks a wealth-weighted mixture of constant-rebalanced
//!   portfolios over a simplex grid (exact grid up to 5 assets, a
//!   seeded Dirichlet sample above that).
//! - EG takes a multiplicative gradient step, eta = 0.05.
//! - ONS takes a Newton step (delta = 1/8, beta = 1) and projects onto
//!   the simplex in the norm of its Hessian accumulator.
//! - PAMR steps away from the last ratio vector when growth exceeds
//!   epsilon = 0.5 (the uncapped PAMR-0 variant).
//! - OLMAR steps toward a moving-average reversion forecast (window 5,
//!   epsilon = 10).
//! - RMR does the same with an L1-median forecast (Weiszfeld iteration,
//!   tolerance 1e-8).
//! - Anticor transfers wealth between assets along positive lagged
//!   cross-correlations (window 5).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, lu_solve, Matrix};
use crate::math;
use crate::rng;

/// EG learning rate.
const EG_ETA: f64 = 0.05;
/// ONS Newton-step scale.
const ONS_DELTA: f64 = 0.125;
/// ONS gradient-accumulator weight (1 + 1/beta with beta = 1).
const ONS_GRAD_WEIGHT: f64 = 2.0;
/// PAMR reversion threshold.
const PAMR_EPSILON: f64 = 0.5;
/// OLMAR/RMR reversion target.
const REVERSION_EPSILON: f64 = 10.0;
/// OLMAR/RMR/Anticor lookback window.
const WINDOW: usize = 5;
/// UP simplex-grid resolution (exact enumeration up to this many assets).
const UP_GRID_STEP: f64 = 0.05;
const UP_EXACT_ASSETS: usize = 5;
/// UP Monte-Carlo mixture size for larger universes.
const UP_SAMPLES: usize = 10_000;
/// Weiszfeld iteration limits.
const WEISZFELD_TOL: f64 = 1e-8;
const WEISZFELD_MAX_ITER: usize = 500;

/// The comparator roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Bah,
    Crp,
    Up,
    Eg,
    Ons,
    Pamr,
    Olmar,
    Rmr,
    Anticor,
}

impl Baseline {
    pub const ALL: [Baseline; 9] = [
        Baseline::Bah,
        Baseline::Crp,
        Baseline::Up,
        Baseline::Eg,
        Baseline::Ons,
        Baseline::Pamr,
        Baseline::Olmar,
        Baseline::Rmr,
        Baseline::Anticor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Bah => "bah",
            Baseline::Crp => "crp",
            Baseline::Up => "up",
            Baseline::Eg => "eg",
            Baseline::Ons => "ons",
            Baseline::Pamr => "pamr",
            Baseline::Olmar => "olmar",
            Baseline::Rmr => "rmr",
            Baseline::Anticor => "anticor",
        }
    }

    pub fn parse(name: &str) -> Result<Baseline> {
        Baseline::ALL
            .iter()
            .copied()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown strategy {name}")))
    }
}

/// Universal-portfolio mixture state: candidate portfolios and their
/// running wealths.
#[derive(Debug, Clone)]
struct UpState {
    points: Vec<Vec<f64>>,
    wealth: Vec<f64>,
}

/// ONS accumulators: A = I + sum of gradient outer products, b = the
/// weighted gradient sum.
#[derive(Debug, Clone)]
struct OnsState {
    a: Matrix,
    b: Vec<f64>,
}

/// One strategy's evolving state.
#[derive(Debug, Clone)]
pub struct BaselineState {
    kind: Baseline,
    n: usize,
    weights: Vec<f64>,
    /// Most recent price relatives, newest at the back; sized to the
    /// longest lookback any rule needs.
    history: VecDeque<Vec<f64>>,
    up: Option<UpState>,
    ons: Option<OnsState>,
}

impl BaselineState {
    pub fn new(kind: Baseline, assets: usize, seed: u64) -> Result<Self> {
        if assets == 0 {
            return Err(Error::Parameter("strategy over zero assets".into()));
        }
        let uniform = vec![1.0 / assets as f64; assets];
        let up = (kind == Baseline::Up).then(|| UpState::new(assets, seed));
        let ons = (kind == Baseline::Ons).then(|| OnsState {
            a: Matrix::identity(assets),
            b: vec![0.0; assets],
        });
        Ok(BaselineState { kind, n: assets, weights: uniform, history: VecDeque::new(), up, ons })
    }

    pub fn kind(&self) -> Baseline {
        self.kind
    }

    /// Target weights for the coming period.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Feeds the revealed price relatives and advances to the next
    /// period's weights.
    pub fn observe(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape(format!(
                "{} price relatives for {} assets",
                x.len(),
                self.n
            )));
        }
        if x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("price relatives must be positive".into()));
        }
        match self.kind {
            Baseline::Bah => {
                let growth = dot(&self.weights, x);
                for (w, &r) in self.weights.iter_mut().zip(x) {
                    *w *= r / growth;
                }
            }
            Baseline::Crp => {}
            Baseline::Up => {
                let up = self.up.as_mut().expect("UP state");
                for (wealth, point) in up.wealth.iter_mut().zip(&up.points) {
                    *wealth *= dot(point, x);
                }
                self.weights = up.mixture();
            }
            Baseline::Eg => {
                let growth = dot(&self.weights, x);
                let mut sum = 0.0;
                for (w, &r) in self.weights.iter_mut().zip(x) {
                    *w *= math::exp(EG_ETA * r / growth);
                    sum += *w;
                }
                for w in &mut self.weights {
                    *w /= sum;
                }
            }
            Baseline::Ons => {
                let growth = dot(&self.weights, x);
                let grad: Vec<f64> = x.iter().map(|&r| r / growth).collect();
                let ons = self.ons.as_mut().expect("ONS state");
                for i in 0..self.n {
                    for j in 0..self.n {
                        let v = ons.a.get(i, j) + grad[i] * grad[j];
                        ons.a.set(i, j, v);
                    }
                    ons.b[i] += ONS_GRAD_WEIGHT * grad[i];
                }
                let target = lu_solve(ons.a.clone(), &ons.b)?
                    .into_iter()
                    .map(|v| ONS_DELTA * v)
                    .collect::<Vec<f64>>();
                self.weights = project_simplex_metric(&ons.a, &target)?;
            }
            Baseline::Pamr => {
                let growth = dot(&self.weights, x);
                if growth > PAMR_EPSILON {
                    let mean = x.iter().sum::<f64>() / self.n as f64;
                    let centered: Vec<f64> = x.iter().map(|&r| r - mean).collect();
                    let denom = dot(&centered, &centered);
                    // A uniform ratio vector carries no reversion
                    // direction; leave the weights alone.
                    if denom > 0.0 {
                        let tau = (growth - PAMR_EPSILON) / denom;
                        let moved: Vec<f64> = self
                            .weights
                            .iter()
                            .zip(&centered)
                            .map(|(&w, &c)| w - tau * c)
                            .collect();
                        self.weights = project_simplex(&moved);
                    }
                }
            }
            Baseline::Olmar | Baseline::Rmr => {
                self.push_history(x);
                if self.history.len() >= WINDOW - 1 {
                    let window = self.relative_price_window();
                    let forecast = match self.kind {
                        Baseline::Olmar => column_mean(&window),
                        _ => l1_median(&window, WEISZFELD_TOL, WEISZFELD_MAX_ITER)?,
                    };
                    self.reversion_step(&forecast);
                }
            }
            Baseline::Anticor => {
                self.push_history(x);
                if self.history.len() >= 2 * WINDOW {
                    self.anticor_step();
                }
            }
        }
        self.check_simplex()
    }

    fn push_history(&mut self, x: &[f64]) {
        self.history.push_back(x.to_vec());
        if self.history.len() > 2 * WINDOW {
            self.history.pop_front();
        }
    }

    /// The last WINDOW price vectors expressed relative to the current
    /// price: entry k is price(t - k) / price(t), so entry 0 is all
    /// ones and older rows compound the inverse ratios.
    fn relative_price_window(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![1.0; self.n]];
        let mut level = vec![1.0; self.n];
        for x in self.history.iter().rev().take(WINDOW - 1) {
            for (l, &r) in level.iter_mut().zip(x) {
                *l /= r;
            }
            rows.push(level.clone());
        }
        rows
    }

    /// Passive-aggressive step toward forecast growth of at least
    /// REVERSION_EPSILON.
    fn reversion_step(&mut self, forecast: &[f64]) {
        let predicted = dot(&self.weights, forecast);
        if predicted >= REVERSION_EPSILON {
            return;
        }
        let mean = forecast.iter().sum::<f64>() / self.n as f64;
        let centered: Vec<f64> = forecast.iter().map(|&f| f - mean).collect();
        let denom = dot(&centered, &centered);
        if denom <= 0.0 {
            return;
        }
        let lambda = (REVERSION_EPSILON - predicted) / denom;
        let moved: Vec<f64> = self
            .weights
            .iter()
            .zip(&centered)
            .map(|(&w, &c)| w + lambda * c)
            .collect();
        self.weights = project_simplex(&moved);
    }

    /// Wealth transfer along positive lagged cross-correlations between
    /// the two most recent WINDOW-length log-return blocks.
    fn anticor_step(&mut self) {
        let rows: Vec<&Vec<f64>> = self.history.iter().collect();
        let older = &rows[..WINDOW];
        let newer = &rows[WINDOW..];
        let log_block = |block: &[&Vec<f64>]| -> Vec<Vec<f64>> {
            block
                .iter()
                .map(|x| x.iter().map(|&r| math::ln(r)).collect())
                .collect()
        };
        let (y1, y2) = (log_block(older), log_block(newer));
        let stats = |y: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let mut mu = vec![0.0; self.n];
            for row in y {
                for (m, &v) in mu.iter_mut().zip(row) {
                    *m += v / WINDOW as f64;
                }
            }
            let mut sd = vec![0.0; self.n];
            for j in 0..self.n {
                let var = y
                    .iter()
                    .map(|row| (row[j] - mu[j]) * (row[j] - mu[j]))
                    .sum::<f64>()
                    / (WINDOW - 1) as f64;
                sd[j] = math::sqrt(var);
            }
            (mu, sd)
        };
        let (mu1, sd1) = stats(&y1);
        let (mu2, sd2) = stats(&y2);

        let mut cor = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if sd1[i] > 0.0 && sd2[j] > 0.0 {
                    let cov = y1
                        .iter()
                        .zip(&y2)
                        .map(|(r1, r2)| (r1[i] - mu1[i]) * (r2[j] - mu2[j]))
                        .sum::<f64>()
                        / (WINDOW - 1) as f64;
                    cor.set(i, j, cov / (sd1[i] * sd2[j]));
                }
            }
        }

        // claim(i -> j): move wealth from i to j when i outgrew j and
        // their lagged correlation is positive, boosted by each asset's
        // own negative autocorrelation.
        let mut claim = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && mu2[i] > mu2[j] && cor.get(i, j) > 0.0 {
                    let boost = cor.get(i, j)
                        + math::abs(cor.get(i, i).min(0.0))
                        + math::abs(cor.get(j, j).min(0.0));
                    claim.set(i, j, boost);
                }
            }
        }

        let mut next = self.weights.clone();
        for i in 0..self.n {
            let total: f64 = (0..self.n).map(|j| claim.get(i, j)).sum();
            if total <= 0.0 {
                continue;
            }
            for j in 0..self.n {
                let transfer = self.weights[i] * claim.get(i, j) / total;
                next[i] -= transfer;
                next[j] += transfer;
            }
        }
        self.weights = next;
    }

    fn check_simplex(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= -1e-12) || !w.is_finite())
            || math::abs(sum - 1.0) > 1e-9
        {
            return Err(Error::Numeric(format!(
                "{} weights left the simplex (sum {sum})",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

impl UpState {
    fn new(assets: usize, seed: u64) -> UpState {
        let points = if assets <= UP_EXACT_ASSETS {
            let ticks = math::round(1.0 / UP_GRID_STEP) as usize;
            let mut points = Vec::new();
            let mut acc = vec![0usize; assets];
            grid_points(&mut points, &mut acc, 0, ticks);
            points
        } else {
            let mut stream = rng::substream(seed, "up-grid");
            (0..UP_SAMPLES)
                .map(|_| {
                    use rand::Rng;
                    let mut g: Vec<f64> =
                        (0..assets).map(|_| -math::ln(1.0 - stream.gen::<f64>())).collect();
                    let sum: f64 = g.iter().sum();
                    g.iter_mut().for_each(|v| *v /= sum);
                    g
                })
                .collect()
        };
        let wealth = vec![1.0; points.len()];
        UpState { points, wealth }
    }

    /// Wealth-weighted average of the candidate portfolios.
    fn mixture(&self) -> Vec<f64> {
        let n = self.points[0].len();
        let total: f64 = self.wealth.iter().sum();
        let mut out = vec![0.0; n];
        for (point, &wealth) in self.points.iter().zip(&self.wealth) {
            for (o, &p) in out.iter_mut().zip(point) {
                *o += wealth * p / total;
            }
        }
        out
    }
}

/// Enumerates all compositions of `ticks` grid steps over the remaining
/// coordinates.
fn grid_points(out: &mut Vec<Vec<f64>>, acc: &mut Vec<usize>, coord: usize, left: usize) {
    let n = acc.len();
    if coord == n - 1 {
        acc[coord] = left;
        let ticks: f64 = acc.iter().sum::<usize>() as f64;
        out.push(acc.iter().map(|&k| k as f64 / ticks).collect());
        return;
    }
    for k in 0..=left {
        acc[coord] = k;
        grid_points(out, acc, coord + 1, left - k);
    }
}

/// Euclidean projection onto the probability simplex (sorting
/// algorithm): the unique w >= 0 with sum 1 minimizing ||w - v||.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite weights"));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        acc += u;
        let candidate = (acc - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&u| (u - theta).max(0.0)).collect()
}

/// Projection onto the simplex in the metric of a positive-definite A:
/// argmin (w - q)' A (w - q) subject to w >= 0, sum w = 1. Active-set
/// iteration: solve the equality-constrained problem on the free set,
/// pin the most negative coordinate, repeat.
pub fn project_simplex_metric(a: &Matrix, q: &[f64]) -> Result<Vec<f64>> {
    let n = q.len();
    if a.rows != n || a.cols != n {
        return Err(Error::Shape(format!(
            "metric is {}x{} for {n} coordinates",
            a.rows, a.cols
        )));
    }
    let mut free: Vec<usize> = (0..n).collect();
    for _round in 0..n {
        // KKT on the free set: A_ff (w_f - q_f) = nu * 1 with the bound
        // coordinates pinned at zero, i.e. w_f = q_f + nu * A_ff^{-1} 1
        // + correction for the pinned block.
        let m = free.len();
        let mut a_ff = Matrix::zeros(m, m);
        for (ri, &i) in free.iter().enumerate() {
            for (ci, &j) in free.iter().enumerate() {
                a_ff.set(ri, ci, a.get(i, j));
            }
        }
        // Right-hand sides: u solves A_ff u = 1, c solves A_ff c = A_fb q_b.
        let ones = vec![1.0; m];
        let u = lu_solve(a_ff.clone(), &ones)?;
        let bound: Vec<usize> = (0..n).filter(|i| !free.contains(i)).collect();
        let mut rhs_c = vec![0.0; m];
        for (ri, &i) in free.iter().enumerate() {
            rhs_c[ri] = bound.iter().map(|&j| a.get(i, j) * q[j]).sum();
        }
        let c = lu_solve(a_ff, &rhs_c)?;
        let q_f_sum: f64 = free.iter().map(|&i| q[i]).sum();
        let u_sum: f64 = u.iter().sum();
        if u_sum == 0.0 {
            return Err(Error::Numeric("degenerate metric in simplex projection".into()));
        }
        let c_sum: f64 = c.iter().sum();
        let nu = (1.0 - q_f_sum - c_sum) / u_sum;

        let mut w = vec![0.0; n];
        let mut worst: Option<(usize, f64)> = None;
        for (ri, &i) in free.iter().enumerate() {
            let wi = q[i] + c[ri] + nu * u[ri];
            w[i] = wi;
            if wi < -1e-12 {
                let cur = worst.map(|(_, v)| v).unwrap_or(0.0);
                if wi < cur {
                    worst = Some((i, wi));
                }
            }
        }
        match worst {
            None => {
                for v in &mut w {
                    *v = v.max(0.0);
                }
                return Ok(w);
            }
            Some((pin, _)) => {
                free.retain(|&i| i != pin);
                if free.is_empty() {
                    break;
                }
            }
        }
    }
    Err(Error::Numeric("simplex projection did not settle on a support".into()))
}

/// Geometric (L1) median by Weiszfeld fixed-point iteration. A point
/// coinciding with a data point is returned as is, since the objective
/// is non-smooth there.
pub fn l1_median(points: &[Vec<f64>], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Parameter("median of no points".into()));
    }
    let mut mu = column_mean(points);
    for _ in 0..max_iter {
        let mut num = vec![0.0; mu.len()];
        let mut den = 0.0;
        for p in points {
            let d = distance(&mu, p);
            if d < 1e-15 {
                return Ok(p.clone());
            }
            for (nv, &pv) in num.iter_mut().zip(p) {
                *nv += pv / d;
            }
            den += 1.0 / d;
        }
        let next: Vec<f64> = num.into_iter().map(|v| v / den).collect();
        let shift = distance(&next, &mu);
        mu = next;
        if shift <= tol {
            return Ok(mu);
        }
    }
    Err(Error::Numeric(format!(
        "L1 median did not converge within {max_iter} iterations"
    )))
}

fn column_mean(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points[0].len();
    let mut mu = vec![0.0; n];
    for p in points {
        for (m, &v) in mu.iter_mut().zip(p) {
            *m += v / points.len() as f64;
        }
    }
    mu
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>())
}
