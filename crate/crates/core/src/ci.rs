//! Conservative confidence interval for a linear functional `E_G η`.
//!
//! Observations are binned into `M` cells. With cell counts `n_j` and
//! `p_G^j = P_G(cell j) = (Cw)_j`, the confidence set is
//!
//! ```text
//! Γ_α = { w ∈ simplex : Σ_j n_j ln (Cw)_j ≥ Σ_j n_j ln(n_j / n) − ½ χ²_{M−1, 1−α} }
//! ```
//!
//! and the interval is `[min, max]` of `η·w` over `Γ_α`. Cells with `n_j = 0`
//! contribute nothing to either side.
//!
//! Each bound is found by scalarising: for a multiplier `ν ≥ 0` maximise
//! `ν η̃·w + ℓ(w)` over the simplex (`η̃` is `η` shifted to be nonnegative, or
//! its reflection for the lower bound), then search `ln ν` by regula falsi
//! until the constraint `ℓ(w) = T` is active. Each subproblem is solved by a
//! log-barrier Newton method whose Hessian is diagonal plus rank `M`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::grid::{MixingDistribution, ParameterGrid};
use crate::models::{CountKernel, CountObservation};

/// Tolerance on the column sums of a cell-probability matrix.
pub const CELL_MASS_TOL: f64 = 1e-8;

/// A partition of the count outcome space into cells. When `tail` is set,
/// every outcome not listed falls into one final catch-all cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScheme {
    cells: Vec<Vec<CountObservation>>,
    tail: bool,
    #[serde(skip)]
    lookup: HashMap<CountObservation, usize>,
}

impl CellScheme {
    pub fn new(cells: Vec<Vec<CountObservation>>, tail: bool) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (j, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::InvalidCells(format!("cell {j} is empty")));
            }
            for &o in cell {
                o.validate()?;
                if lookup.insert(o, j).is_some() {
                    return Err(Error::InvalidCells(format!(
                        "outcome ({}, {}) appears in two cells",
                        o.x, o.k
                    )));
                }
            }
        }
        let scheme = Self {
            cells,
            tail,
            lookup,
        };
        if scheme.m() < 2 {
            return Err(Error::InvalidCells(format!(
                "need at least 2 cells, got {}",
                scheme.m()
            )));
        }
        Ok(scheme)
    }

    /// Number of cells `M`, tail included.
    pub fn m(&self) -> usize {
        self.cells.len() + usize::from(self.tail)
    }

    pub fn cells(&self) -> &[Vec<CountObservation>] {
        &self.cells
    }

    pub fn has_tail(&self) -> bool {
        self.tail
    }

    /// Cell index of an outcome; `None` if the scheme does not cover it.
    pub fn cell_of(&self, obs: &CountObservation) -> Option<usize> {
        match self.lookup.get(obs) {
            Some(&j) => Some(j),
            None if self.tail => Some(self.cells.len()),
            None => None,
        }
    }

    pub fn counts(&self, data: &[CountObservation]) -> Result<CellCounts> {
        let mut counts = vec![0u64; self.m()];
        for (i, o) in data.iter().enumerate() {
            let j = self.cell_of(o).ok_or_else(|| Error::InvalidObservation {
                index: i,
                reason: format!("outcome ({}, {}) is in no cell", o.x, o.k),
            })?;
            counts[j] += 1;
        }
        Ok(CellCounts { counts })
    }

    /// Human-readable cell labels, e.g. `(1,2)` or `tail`.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .cells
            .iter()
            .map(|cell| {
                cell.iter()
                    .map(|o| format!("({},{})", o.x, o.k))
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect();
        if self.tail {
            labels.push("tail".into());
        }
        labels
    }
}

/// Observed cell counts `n_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    counts: Vec<u64>,
}

impl CellCounts {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `C_{jk} = P_{atom_k}(cell j)`, row-major `M × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMatrix {
    cells: usize,
    atoms: usize,
    values: Vec<f64>,
}

impl CellMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cells = rows.len();
        let atoms = rows.first().map_or(0, Vec::len);
        if cells < 2 || atoms == 0 {
            return Err(Error::InvalidCells(format!(
                "cell matrix must be at least 2 x 1, got {cells} x {atoms}"
            )));
        }
        let mut values = Vec::with_capacity(cells * atoms);
        for row in rows {
            if row.len() != atoms {
                return Err(Error::DimensionMismatch {
                    expected: atoms,
                    found: row.len(),
                });
            }
            values.extend(row);
        }
        let matrix = Self {
            cells,
            atoms,
            values,
        };
        matrix.check_columns()?;
        Ok(matrix)
    }

    fn check_columns(&self) -> Result<()> {
        for k in 0..self.atoms {
            let sum: f64 = (0..self.cells).map(|j| self.get(j, k)).sum();
            if (sum - 1.0).abs() > CELL_MASS_TOL || (0..self.cells).any(|j| self.get(j, k) < 0.0) {
                return Err(Error::CellMassDefect { atom: k, sum });
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.atoms + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.atoms..(j + 1) * self.atoms]
    }

    /// `p_G = C w`.
    pub fn cell_probs(&self, w: &[f64]) -> Vec<f64> {
        (0..self.cells)
            .map(|j| self.row(j).iter().zip(w).map(|(c, w)| c * w).sum())
            .collect()
    }
}

/// Cell probabilities of every grid atom under `kernel`. The tail cell gets
/// `1 − Σ(other cells)`.
pub fn cell_probabilities<K: CountKernel>(
    kernel: &K,
    grid: &ParameterGrid<K::Atom>,
    scheme: &CellScheme,
) -> Result<CellMatrix> {
    let listed = scheme.cells().len();
    let m = grid.len();
    let mut rows = vec![vec![0.0; m]; scheme.m()];
    for (k, atom) in grid.atoms().iter().enumerate() {
        let mut covered = 0.0;
        for (j, cell) in scheme.cells().iter().enumerate() {
            let mut p = 0.0;
            for o in cell {
                p += kernel.density(o, atom)?;
            }
            rows[j][k] = p;
            covered += p;
        }
        if scheme.has_tail() {
            let rest = 1.0 - covered;
            if rest < -CELL_MASS_TOL {
                return Err(Error::CellMassDefect {
                    atom: k,
                    sum: covered,
                });
            }
            rows[listed][k] = rest.max(0.0);
        }
    }
    CellMatrix::from_rows(rows)
}

/// Settings for [`default_cell_scheme`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSchemeConfig {
    /// Outcomes with `k` above this percentile of observed `k` go to the tail.
    pub k_percentile: f64,
    pub max_cells: usize,
}

impl Default for CellSchemeConfig {
    fn default() -> Self {
        Self {
            k_percentile: 0.95,
            max_cells: 30,
        }
    }
}

/// One cell per observed outcome with `k ≤ k_cap` (nearest-rank percentile of
/// observed `k`), plus a tail cell unless the cells already exhaust a finite
/// sample space. Beyond `max_cells`, the rarest outcomes are folded into the tail.
pub fn default_cell_scheme(
    data: &[CountObservation],
    finite_space: Option<&[CountObservation]>,
    config: &CellSchemeConfig,
) -> Result<CellScheme> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if config.max_cells < 2 || !(0.0..=1.0).contains(&config.k_percentile) {
        return Err(Error::Config(format!(
            "invalid cell scheme config {config:?}"
        )));
    }
    let mut ks: Vec<u32> = data.iter().map(|o| o.k).collect();
    ks.sort_unstable();
    let rank = ((config.k_percentile * ks.len() as f64).ceil() as usize).clamp(1, ks.len());
    let k_cap = ks[rank - 1];

    let mut freq: HashMap<CountObservation, u64> = HashMap::new();
    for o in data.iter().filter(|o| o.k <= k_cap) {
        *freq.entry(*o).or_default() += 1;
    }
    let mut outcomes: Vec<(CountObservation, u64)> = freq.into_iter().collect();
    outcomes.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| (a.0.k, a.0.x).cmp(&(b.0.k, b.0.x)))
    });

    let covers_space = |kept: &[(CountObservation, u64)]| {
        finite_space.is_some_and(|space| {
            space.len() == kept.len() && space.iter().all(|o| kept.iter().any(|(c, _)| c == o))
        })
    };
    let mut tail = !covers_space(&outcomes);
    if outcomes.len() + usize::from(tail) > config.max_cells {
        outcomes.truncate(config.max_cells - 1);
        tail = true;
    }
    outcomes.sort_by_key(|(o, _)| (o.k, o.x));
    CellScheme::new(outcomes.into_iter().map(|(o, _)| vec![o]).collect(), tail)
}

/// Standard normal quantile.
fn normal_quantile(level: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(2.0 * level - 1.0)
}

/// Quantile of the chi-square distribution with `df` degrees of freedom.
///
/// Newton iteration on the regularized lower incomplete gamma from a
/// Wilson–Hilferty start, safeguarded by bisection.
pub fn chi2_quantile(df: u32, level: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidParameter("chi-square df must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile level {level} outside (0, 1)"
        )));
    }
    let k = f64::from(df);
    let a = k / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let ln_norm = a * std::f64::consts::LN_2 + ln_gamma(a);
    let pdf = |x: f64| ((a - 1.0) * x.ln() - x / 2.0 - ln_norm).exp();

    let z = normal_quantile(level);
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    let (mut lo, mut hi) = (0.0, x.max(1.0));
    while cdf(hi) < level {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let f = cdf(x) - level;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let d = pdf(x);
        let mut next = x - f / d;
        if !(next.is_finite() && next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * x.max(1e-300) || hi - lo <= 1e-14 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Solver settings for [`ci_bounds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiConfig {
    /// Constraint activation tolerance, relative to `|T|`.
    pub constraint_rel_tol: f64,
    /// Optimality gap left by the barrier in each subproblem, relative to `n`.
    pub barrier_gap: f64,
    /// Newton steps per barrier stage.
    pub max_newton: usize,
    /// Cap on multiplier evaluations per bound.
    pub max_outer: usize,
}

impl Default for CiConfig {
    fn default() -> Self {
        Self {
            constraint_rel_tol: 1e-6,
            barrier_gap: 1e-9,
            max_newton: 100,
            max_outer: 200,
        }
    }
}

/// An interval `[η^L, η^U]` and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub eta_lower: f64,
    pub eta_upper: f64,
    pub alpha: f64,
    pub cells: usize,
    /// `T`, the cell log-likelihood threshold defining the confidence set.
    pub threshold: f64,
    /// Largest attainable cell log-likelihood over the grid.
    pub max_cell_loglik: f64,
    /// `ℓ(w) − T` at the lower and upper bound solutions.
    pub constraint_slack_at_bounds: (f64, f64),
    pub solver_iterations: usize,
    #[serde(skip)]
    pub lower_weights: Option<MixingDistribution>,
    #[serde(skip)]
    pub upper_weights: Option<MixingDistribution>,
}

impl CiResult {
    pub fn contains(&self, value: f64, slack: f64) -> bool {
        value >= self.eta_lower - slack && value <= self.eta_upper + slack
    }
}

/// Cell log-likelihood restricted to cells with positive counts.
struct CellProblem {
    /// Active rows of `C`, `A × m`.
    rows: Vec<Vec<f64>>,
    counts: Vec<f64>,
    n: f64,
    atoms: usize,
}

impl CellProblem {
    fn new(c: &CellMatrix, counts: &CellCounts) -> Self {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (j, &nj) in counts.counts().iter().enumerate() {
            if nj > 0 {
                rows.push(c.row(j).to_vec());
                weights.push(nj as f64);
            }
        }
        Self {
            rows,
            n: weights.iter().sum(),
            counts: weights,
            atoms: c.atoms(),
        }
    }

    /// The same problem over a subset of atoms.
    fn restrict(&self, cols: &[usize]) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| cols.iter().map(|&k| r[k]).collect())
                .collect(),
            counts: self.counts.clone(),
            n: self.n,
            atoms: cols.len(),
        }
    }

    fn saturated(&self) -> f64 {
        self.counts.iter().map(|&nj| nj * (nj / self.n).ln()).sum()
    }

    fn probs(&self, w: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(r, w)).collect()
    }

    fn ell(&self, w: &[f64]) -> f64 {
        self.probs(w)
            .iter()
            .zip(&self.counts)
            .map(|(p, n)| n * p.ln())
            .sum()
    }

    /// Maximises `ν b·w + ℓ(w)` over the simplex.
    ///
    /// Log-barrier Newton method: maximise `ν b·w + ℓ(w) + μ Σ ln w_k` on
    /// `Σ w = 1` for a decreasing sequence of `μ`, down to the value where the
    /// barrier's optimality gap `m μ` is `barrier_gap · n`. The negative Hessian is
    /// `μ W⁻² + Cᵀ diag(n_j / p_j²) C`, diagonal plus rank `A`, so each
    /// Newton system is solved through an `A × A` Cholesky factor.
    fn solve(&self, nu: f64, b: &[f64], cfg: &CiConfig) -> (Vec<f64>, f64, usize) {
        let m = self.atoms;
        let a = self.rows.len();
        let mut w = vec![1.0 / m as f64; m];
        let mu_final = cfg.barrier_gap * self.n / m as f64;
        let mut mu = (self.n / m as f64).max(mu_final);
        let mut steps = 0;
        let phi = |w: &[f64], mu: f64| {
            nu * dot(b, w) + self.ell(w) + mu * w.iter().map(|x| x.ln()).sum::<f64>()
        };
        loop {
            for _ in 0..cfg.max_newton {
                let p = self.probs(&w);
                let ratio: Vec<f64> = p.iter().zip(&self.counts).map(|(p, n)| n / p).collect();
                let mut grad: Vec<f64> = (0..m).map(|k| nu * b[k] + mu / w[k]).collect();
                for (row, r) in self.rows.iter().zip(&ratio) {
                    for (g, c) in grad.iter_mut().zip(row) {
                        *g += c * r;
                    }
                }
                // V_kj = w_k C_jk √n_j / p_j, so the scaled system is (μ I + V Vᵀ) z = W x.
                let root: Vec<f64> = p
                    .iter()
                    .zip(&self.counts)
                    .map(|(p, n)| n.sqrt() / p)
                    .collect();
                let v = DMatrix::from_fn(m, a, |k, j| w[k] * self.rows[j][k] * root[j]);
                let mut core = v.tr_mul(&v);
                for j in 0..a {
                    core[(j, j)] += mu;
                }
                let Some(chol) = core.cholesky() else { break };
                let solve = |x: &[f64]| -> Vec<f64> {
                    let y = DVector::from_iterator(m, x.iter().zip(&w).map(|(x, w)| x * w));
                    let u = chol.solve(&v.tr_mul(&y));
                    let z = (y - &v * u) / mu;
                    z.iter().zip(&w).map(|(z, w)| z * w).collect()
                };
                let ng = solve(&grad);
                let n1 = solve(&vec![1.0; m]);
                let kappa = ng.iter().sum::<f64>() / n1.iter().sum::<f64>();
                let delta: Vec<f64> = ng.iter().zip(&n1).map(|(g, o)| g - kappa * o).collect();
                let decrement = dot(&delta, &grad);
                steps += 1;
                if decrement.is_nan() || decrement <= 1e-12 * self.n {
                    break;
                }
                let mut t: f64 = 1.0;
                for (wk, dk) in w.iter().zip(&delta) {
                    if *dk < 0.0 {
                        t = t.min(-0.99 * wk / dk);
                    }
                }
                let base = phi(&w, mu);
                let mut moved = false;
                while t > 1e-14 {
                    let mut cand: Vec<f64> =
                        w.iter().zip(&delta).map(|(wk, dk)| wk + t * dk).collect();
                    let sum: f64 = cand.iter().sum();
                    cand.iter_mut().for_each(|x| *x /= sum);
                    let value = phi(&cand, mu);
                    if value >= base + 0.25 * t * decrement {
                        w = cand;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if mu <= mu_final {
                break;
            }
            mu = (mu * 0.1).max(mu_final);
        }
        let ell = self.ell(&w);
        (w, ell, steps)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Bound {
    value: f64,
    weights: Vec<f64>,
    slack: f64,
    iterations: usize,
}

/// Maximises `eta·w` over `ℓ(w) ≥ threshold`, given a maximiser `w_ml` of `ℓ`.
fn max_linear(
    prob: &CellProblem,
    eta: &[f64],
    threshold: f64,
    w_ml: &[f64],
    cfg: &CiConfig,
) -> Result<Bound> {
    let top = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bottom = eta.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = cfg.constraint_rel_tol * threshold.abs().max(1.0);
    let mut iterations = 0;
    let done = |w: Vec<f64>, ell: f64, iterations: usize| Bound {
        value: dot(eta, &w),
        weights: w,
        slack: ell - threshold,
        iterations,
    };

    // If the face where η is maximal meets the set, its best point is the answer.
    let face: Vec<usize> = (0..eta.len()).filter(|&k| eta[k] == top).collect();
    let face_prob = prob.restrict(&face);
    if face_prob
        .probs(&vec![1.0; face.len()])
        .iter()
        .all(|&p| p > 0.0)
    {
        let zeros = vec![0.0; face.len()];
        let (wf, ell, it) = face_prob.solve(0.0, &zeros, cfg);
        iterations += it;
        if ell >= threshold {
            let mut w = vec![0.0; eta.len()];
            for (&k, x) in face.iter().zip(wf) {
                w[k] = x;
            }
            return Ok(Bound {
                value: top,
                weights: w,
                slack: ell - threshold,
                iterations,
            });
        }
    }

    let ell_ml = prob.ell(w_ml);
    if ell_ml - threshold <= tol {
        return Ok(done(w_ml.to_vec(), ell_ml, iterations));
    }

    let b: Vec<f64> = eta.iter().map(|e| e - bottom).collect();
    let range = (top - bottom).max(f64::MIN_POSITIVE);
    let evals = std::cell::Cell::new(0usize);
    let eval = |s: f64, iterations: &mut usize| {
        let (w, ell, it) = prob.solve(s.exp(), &b, cfg);
        *iterations += it;
        evals.set(evals.get() + 1);
        (w, ell)
    };
    let stalled = |evals: usize, gap: f64| Error::NonConvergence {
        what: "confidence bound multiplier search",
        iterations: evals,
        gap,
    };

    // Bracket the active multiplier in s = ln ν: lo feasible, hi infeasible.
    let s0 = (0.1 * prob.n / range).ln();
    let (w0, ell0) = eval(s0, &mut iterations);
    if (ell0 - threshold).abs() <= tol && ell0 >= threshold {
        return Ok(done(w0, ell0, iterations));
    }
    let step = std::f64::consts::LN_10;
    let (mut lo, mut hi) = if ell0 >= threshold {
        let mut lo = (s0, w0, ell0);
        loop {
            if evals.get() >= cfg.max_outer {
                return Err(stalled(evals.get(), lo.2 - threshold));
            }
            let s = lo.0 + step;
            let (w, ell) = eval(s, &mut iterations);
            if ell < threshold {
                break (lo, (s, ell));
            }
            if ell - threshold <= tol {
                return Ok(done(w, ell, iterations));
            }
            lo = (s, w, ell);
        }
    } else {
        let mut hi = (s0, ell0);
        loop {
            if evals.get() >= cfg.max_outer {
                return Err(stalled(evals.get(), hi.1 - threshold));
            }
            let s = hi.0 - step;
            let (w, ell) = eval(s, &mut iterations);
            if ell >= threshold {
                if ell - threshold <= tol {
                    return Ok(done(w, ell, iterations));
                }
                break ((s, w, ell), hi);
            }
            hi = (s, ell);
        }
    };

    // Illinois regula falsi on g(s) = ℓ(w(e^s)) − T.
    let mut g_lo = lo.2 - threshold;
    let mut g_hi = hi.1 - threshold;
    let mut side = 0i8;
    while evals.get() < cfg.max_outer {
        let mut s = lo.0 - g_lo * (hi.0 - lo.0) / (g_hi - g_lo);
        if !(s > lo.0 && s < hi.0) {
            s = 0.5 * (lo.0 + hi.0);
        }
        let (w, ell) = eval(s, &mut iterations);
        let g = ell - threshold;
        if g >= 0.0 {
            if g <= tol {
                return Ok(done(w, ell, iterations));
            }
            lo = (s, w, ell);
            g_lo = g;
            if side == 1 {
                g_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = (s, ell);
            g_hi = g;
            if side == -1 {
                g_lo *= 0.5;
            }
            side = -1;
        }
        if hi.0 - lo.0 <= 1e-13 * lo.0.abs().max(1.0) {
            // The multiplier is pinned down; accept the feasible side.
            return Ok(done(lo.1, lo.2, iterations));
        }
    }
    Err(stalled(evals.get(), g_lo))
}

/// Computes `[η^L, η^U]` over `Γ_α`.
pub fn ci_bounds(
    c: &CellMatrix,
    counts: &CellCounts,
    eta_values: &[f64],
    alpha: f64,
    config: &CiConfig,
) -> Result<CiResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha = {alpha} outside (0, 1)"
        )));
    }
    if counts.counts().len() != c.cells() {
        return Err(Error::DimensionMismatch {
            expected: c.cells(),
            found: counts.counts().len(),
        });
    }
    if eta_values.len() != c.atoms() {
        return Err(Error::DimensionMismatch {
            expected: c.atoms(),
            found: eta_values.len(),
        });
    }
    if counts.n() == 0 {
        return Err(Error::EmptyData);
    }
    let prob = CellProblem::new(c, counts);
    let df = (c.cells() - 1) as u32;
    let threshold = prob.saturated() - 0.5 * chi2_quantile(df, 1.0 - alpha)?;

    let uniform = vec![1.0 / c.atoms() as f64; c.atoms()];
    if prob.probs(&uniform).iter().any(|&p| p <= 0.0) {
        return Err(Error::Infeasible {
            best: f64::NEG_INFINITY,
            threshold,
        });
    }
    let zeros = vec![0.0; c.atoms()];
    let (w_ml, ell_ml, mut iterations) = prob.solve(0.0, &zeros, config);
    let tol = config.constraint_rel_tol * threshold.abs().max(1.0);
    if ell_ml < threshold - tol {
        return Err(Error::Infeasible {
            best: ell_ml,
            threshold,
        });
    }
    // Within tolerance of the maximum, the set shrinks to the maximisers.
    let effective = threshold.min(ell_ml);

    let upper = max_linear(&prob, eta_values, effective, &w_ml, config)?;
    let negated: Vec<f64> = eta_values.iter().map(|e| -e).collect();
    let lower = max_linear(&prob, &negated, effective, &w_ml, config)?;
    iterations += upper.iterations + lower.iterations;

    let lower_value = -lower.value;
    let upper_value = upper.value.max(lower_value);
    Ok(CiResult {
        eta_lower: lower_value,
        eta_upper: upper_value,
        alpha,
        cells: c.cells(),
        threshold,
        max_cell_loglik: ell_ml,
        constraint_slack_at_bounds: (
            lower.slack + effective - threshold,
            upper.slack + effective - threshold,
        ),
        solver_iterations: iterations,
        lower_weights: Some(MixingDistribution::normalized(lower.weights)?),
        upper_weights: Some(MixingDistribution::normalized(upper.weights)?),
    })
}

/// Cell log-likelihood `Σ_j n_j ln (Cw)_j` over cells with `n_j > 0`.
pub fn cell_log_likelihood(c: &CellMatrix, counts: &CellCounts, w: &[f64]) -> f64 {
    CellProblem::new(c, counts).ell(w)
}

/// Interval for count data under `kernel` with the default cell scheme.
pub fn ci_for_data<K: CountKernel>(
    kernel: &K,
    grid: &ParameterGrid<K::Atom>,
    data: &[CountObservation],
    eta_values: &[f64],
    alpha: f64,
    scheme_config: &CellSchemeConfig,
    config: &CiConfig,
) -> Result<(CellScheme, CiResult)> {
    let space = kernel.finite_sample_space();
    let scheme = default_cell_scheme(data, space.as_deref(), scheme_config)?;
    let counts = scheme.counts(data)?;
    let c = cell_probabilities(kernel, grid, &scheme)?;
    let result = ci_bounds(&c, &counts, eta_values, alpha, config)?;
    Ok((scheme, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AxisSpec;
    use crate::models::{
        BinomialStratumKernel, BinomialStratumParam, PoissonStratumKernel, PoissonStratumParam,
    };
    use approx::assert_relative_eq;

    fn obs(x: u32, k: u32) -> CountObservation {
        CountObservation { x, k }
    }

    /// `P(a, x)` by its power series, with `Γ(a + 1)` supplied exactly.
    fn lower_gamma_series(a: f64, x: f64, gamma_a_plus_1: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..500 {
            term *= x / (a + n as f64);
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        x.powf(a) * (-x).exp() / gamma_a_plus_1 * sum
    }

    #[test]
    fn chi2_quantile_examples() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let q = chi2_quantile(1, 0.95).unwrap();
        assert_relative_eq!(q, 3.841_459, epsilon = 1e-6);
        assert_relative_eq!(
            lower_gamma_series(0.5, q / 2.0, sqrt_pi / 2.0),
            0.95,
            epsilon = 1e-10
        );

        let q = chi2_quantile(2, 0.95).unwrap();
        assert_relative_eq!(q, -2.0 * 0.05f64.ln(), max_relative = 1e-10);

        let q = chi2_quantile(5, 0.5).unwrap();
        assert_relative_eq!(q, 4.351_460, epsilon = 1e-6);
        assert_relative_eq!(
            lower_gamma_series(2.5, q / 2.0, 15.0 * sqrt_pi / 8.0),
            0.5,
            epsilon = 1e-10
        );
    }

    #[test]
    fn chi2_quantile_domain() {
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(3, 1.0).is_err());
        assert!(chi2_quantile(3, 0.0).is_err());
        let mut prev = 0.0;
        for level in [0.01, 0.1, 0.5, 0.9, 0.999] {
            let q = chi2_quantile(29, level).unwrap();
            assert!(q > prev);
            prev = q;
        }
    }

    #[test]
    fn cell_probabilities_examples() {
        let kernel = BinomialStratumKernel::new(1).unwrap();
        let grid =
            ParameterGrid::from_atoms(vec![BinomialStratumParam { pi: 0.5, p: 0.3 }]).unwrap();
        let scheme = CellScheme::new(vec![vec![obs(0, 0)]], true).unwrap();
        let c = cell_probabilities(&kernel, &grid, &scheme).unwrap();
        assert_relative_eq!(c.get(0, 0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(c.get(1, 0), 0.5, epsilon = 1e-15);

        let grid =
            ParameterGrid::from_atoms(vec![PoissonStratumParam { xi1: 1.0, xi2: 1.0 }]).unwrap();
        let c = cell_probabilities(&PoissonStratumKernel, &grid, &scheme).unwrap();
        assert_relative_eq!(c.get(0, 0), (-2.0f64).exp(), epsilon = 1e-15);

        assert!(matches!(
            CellScheme::new(vec![vec![obs(0, 0)]], false),
            Err(Error::InvalidCells(_))
        ));
        assert!(CellScheme::new(vec![vec![obs(0, 0)], vec![obs(0, 0)]], false).is_err());
        // a scheme that does not cover the sample space and has no tail is rejected
        let partial = CellScheme::new(vec![vec![obs(0, 0)], vec![obs(1, 1)]], false).unwrap();
        assert!(matches!(
            cell_probabilities(&PoissonStratumKernel, &grid, &partial),
            Err(Error::CellMassDefect { .. })
        ));
    }

    #[test]
    fn default_scheme_examples() {
        let kernel = BinomialStratumKernel::new(1).unwrap();
        let space = kernel.finite_sample_space().unwrap();
        let data = vec![obs(1, 1), obs(0, 1), obs(0, 0), obs(0, 0)];
        let s = default_cell_scheme(&data, Some(&space), &CellSchemeConfig::default()).unwrap();
        assert_eq!(s.m(), 3);
        assert!(!s.has_tail());

        let same = vec![obs(1, 2); 7];
        let s = default_cell_scheme(&same, None, &CellSchemeConfig::default()).unwrap();
        assert_eq!(s.m(), 2);
        assert_eq!(s.cells(), &[vec![obs(1, 2)]]);

        let heavy: Vec<CountObservation> = (0..200u32).map(|i| obs(i % 7, i % 7 + i / 7)).collect();
        let s = default_cell_scheme(&heavy, None, &CellSchemeConfig::default()).unwrap();
        assert_eq!(s.m(), 30);
        assert!(s.has_tail());
        let counts = s.counts(&heavy).unwrap();
        assert_eq!(counts.n(), 200);
    }

    #[test]
    fn identity_instance_matches_root_finding_oracle() {
        // bounds solve 5 ln w + 5 ln(1 − w) = 10 ln ½ − ½ χ²_{1,0.95}; roots by bisection
        let target = 10.0 * 0.5f64.ln() - 0.5 * 3.841_458_820_694_124;
        let g = |w: f64| 5.0 * w.ln() + 5.0 * (1.0 - w).ln() - target;
        let bisect = |mut a: f64, mut b: f64| {
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if (g(m) > 0.0) == (g(a) > 0.0) {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        let (lo, hi) = (bisect(1e-12, 0.5), bisect(0.5, 1.0 - 1e-12));
        assert_relative_eq!(lo, 0.217_614, epsilon = 1e-6);
        assert_relative_eq!(hi, 0.782_386, epsilon = 1e-6);

        let c = CellMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = ci_bounds(
            &c,
            &CellCounts::new(vec![5, 5]),
            &[0.0, 1.0],
            0.05,
            &CiConfig::default(),
        )
        .unwrap();
        assert!((r.eta_lower - lo).abs() < 2e-3, "{r:?}");
        assert!((r.eta_upper - hi).abs() < 2e-3, "{r:?}");
        assert!(r.constraint_slack_at_bounds.0 >= -1e-7 * r.threshold.abs());
        assert!(r.constraint_slack_at_bounds.1 >= -1e-7 * r.threshold.abs());
    }

    #[test]
    fn three_atom_instance_matches_simplex_scan() {
        let c = CellMatrix::from_rows(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.3, 0.6],
        ])
        .unwrap();
        let counts = CellCounts::new(vec![9, 7, 4]);
        let eta = [0.1, 0.5, 0.9];
        let r = ci_bounds(&c, &counts, &eta, 0.1, &CiConfig::default()).unwrap();
        // exhaustive scan of the 2-simplex at resolution 1/2000
        let steps = 2000;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=steps {
            for j in 0..=steps - i {
                let w = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                if cell_log_likelihood(&c, &counts, &w) >= r.threshold {
                    let v = eta[0] * w[0] + eta[1] * w[1] + eta[2] * w[2];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        assert!((r.eta_lower - lo).abs() < 2e-3, "{r:?} vs [{lo}, {hi}]");
        assert!((r.eta_upper - hi).abs() < 2e-3, "{r:?} vs [{lo}, {hi}]");
        assert!(r.eta_lower <= lo + 1e-9 && r.eta_upper >= hi - 1e-9);
    }

    #[test]
    fn constant_eta_gives_point_interval() {
        let c = CellMatrix::from_rows(vec![vec![0.2, 0.7, 0.5], vec![0.8, 0.3, 0.5]]).unwrap();
        let r = ci_bounds(
            &c,
            &CellCounts::new(vec![4, 6]),
            &[0.3; 3],
            0.1,
            &CiConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(r.eta_lower, 0.3, epsilon = 1e-12);
        assert_relative_eq!(r.eta_upper, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn interval_shrinks_toward_cell_mle_as_alpha_grows() {
        let c = CellMatrix::from_rows(vec![vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        let counts = CellCounts::new(vec![12, 8]);
        // cell MLE: 0.9 w + 0.2 (1 − w) = 0.6  ⇒  w1 = 4/7, η·w = w2 = 3/7
        let r = ci_bounds(&c, &counts, &[0.0, 1.0], 0.999_999, &CiConfig::default()).unwrap();
        assert!((r.eta_lower - 3.0 / 7.0).abs() < 5e-3, "{r:?}");
        assert!((r.eta_upper - 3.0 / 7.0).abs() < 5e-3, "{r:?}");
        let wide = ci_bounds(&c, &counts, &[0.0, 1.0], 0.05, &CiConfig::default()).unwrap();
        assert!(wide.eta_lower <= r.eta_lower && wide.eta_upper >= r.eta_upper);
    }

    #[test]
    fn vertex_optimum_when_feasible() {
        // η maximal on an atom that explains the data as well as any other
        let c = CellMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let r = ci_bounds(
            &c,
            &CellCounts::new(vec![3, 3]),
            &[0.1, 0.9],
            0.05,
            &CiConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(r.eta_upper, 0.9, epsilon = 1e-12);
        assert_relative_eq!(r.eta_lower, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_set_is_reported() {
        let c = CellMatrix::from_rows(vec![vec![0.99, 0.98], vec![0.01, 0.02]]).unwrap();
        assert!(matches!(
            ci_bounds(
                &c,
                &CellCounts::new(vec![10, 90]),
                &[0.0, 1.0],
                0.05,
                &CiConfig::default()
            ),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn zero_count_cells_do_not_enter() {
        let c =
            CellMatrix::from_rows(vec![vec![0.6, 0.1], vec![0.3, 0.3], vec![0.1, 0.6]]).unwrap();
        let counts = CellCounts::new(vec![7, 3, 0]);
        let w = [0.5, 0.5];
        let ell = cell_log_likelihood(&c, &counts, &w);
        assert_relative_eq!(ell, 7.0 * 0.35f64.ln() + 3.0 * 0.3f64.ln(), epsilon = 1e-12);
        let r = ci_bounds(&c, &counts, &[0.0, 1.0], 0.05, &CiConfig::default()).unwrap();
        assert!(r.eta_lower <= r.eta_upper);
    }

    #[test]
    fn ci_for_data_binomial_model() {
        let kernel = BinomialStratumKernel::new(2).unwrap();
        let grid: ParameterGrid<BinomialStratumParam> =
            ParameterGrid::product(&[AxisSpec::new(0.0, 1.0, 6), AxisSpec::new(0.0, 1.0, 6)])
                .unwrap();
        let eta = grid.eta_values(|a| a.p);
        let mut data = vec![obs(0, 0); 10];
        data.extend(vec![obs(1, 1); 12]);
        data.extend(vec![obs(0, 1); 9]);
        data.extend(vec![obs(2, 2); 6]);
        data.extend(vec![obs(1, 2); 8]);
        data.extend(vec![obs(0, 2); 5]);
        let (scheme, r) = ci_for_data(
            &kernel,
            &grid,
            &data,
            &eta,
            0.05,
            &CellSchemeConfig::default(),
            &CiConfig::default(),
        )
        .unwrap();
        assert_eq!(scheme.m(), 6);
        assert!(r.eta_lower < r.eta_upper);
        assert!((0.0..=1.0).contains(&r.eta_lower) && (0.0..=1.0).contains(&r.eta_upper));
    }
}
