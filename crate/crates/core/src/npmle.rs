//! Grid-constrained GMLE of a mixing distribution by EM.
//!
//! The likelihood matrix stores one row per *distinct* observation together
//! with its multiplicity. EM on the deduplicated rows is the same iteration as
//! EM on all `n` rows (duplicate rows receive identical updates), but costs
//! `O(distinct · m)` instead of `O(n · m)`; for stratum count data a thousand
//! strata typically collapse to a few dozen rows.
//!
//! Each row is stored divided by its largest entry, with the log of that
//! factor kept aside. Scaling a row changes the log-likelihood by a constant
//! and leaves the EM iterates untouched, so large counts cannot underflow.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MixingDistribution, ParameterGrid};
use crate::models::Kernel;
use crate::par;

/// Slack allowed on EM ascent between successive log-likelihoods.
pub const ASCENT_TOL: f64 = 1e-9;

/// `f(Y_i | atom_j)` over distinct observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    n_rows: usize,
    n_cols: usize,
    /// Row-major, each row scaled to max 1.
    values: Vec<f64>,
    /// Column-major copy of `values`.
    by_col: Vec<f64>,
    row_ln_scale: Vec<f64>,
    counts: Vec<f64>,
    obs_rows: Vec<usize>,
}

impl LikelihoodMatrix {
    /// Evaluates `kernel` for every (distinct observation, atom) pair.
    pub fn build<K: Kernel>(
        kernel: &K,
        data: &[K::Obs],
        grid: &ParameterGrid<K::Atom>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        if grid.is_empty() {
            return Err(Error::InvalidParameter("grid has no atoms".into()));
        }
        let mut index: HashMap<&K::Obs, usize> = HashMap::new();
        let mut distinct: Vec<(&K::Obs, usize)> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut obs_rows = Vec::with_capacity(data.len());
        for (i, obs) in data.iter().enumerate() {
            let row = *index.entry(obs).or_insert_with(|| {
                distinct.push((obs, i));
                counts.push(0.0);
                distinct.len() - 1
            });
            counts[row] += 1.0;
            obs_rows.push(row);
        }

        let atoms = grid.atoms();
        let rows = par::map_indices(distinct.len(), |r| {
            let (obs, first) = distinct[r];
            atoms
                .iter()
                .map(|atom| kernel.ln_density(obs, atom))
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| Error::InvalidObservation {
                    index: first,
                    reason: e.to_string(),
                })
        });
        let mut ln_rows = Vec::with_capacity(rows.len());
        for row in rows {
            ln_rows.push(row?);
        }
        let first_index: Vec<usize> = distinct.iter().map(|&(_, i)| i).collect();
        Self::from_ln_rows(ln_rows, counts, obs_rows, &first_index)
    }

    /// A matrix from explicit values, one row per observation.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidObservation {
                    index: i,
                    reason: format!("likelihood entry {v} is not finite and nonnegative"),
                });
            }
        }
        let ln_rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(f64::ln).collect())
            .collect();
        let first: Vec<usize> = (0..n).collect();
        Self::from_ln_rows(ln_rows, vec![1.0; n], (0..n).collect(), &first)
    }

    fn from_ln_rows(
        ln_rows: Vec<Vec<f64>>,
        counts: Vec<f64>,
        obs_rows: Vec<usize>,
        first_index: &[usize],
    ) -> Result<Self> {
        let n_rows = ln_rows.len();
        let n_cols = ln_rows[0].len();
        if n_cols == 0 {
            return Err(Error::InvalidParameter(
                "likelihood matrix has no columns".into(),
            ));
        }
        let mut values = Vec::with_capacity(n_rows * n_cols);
        let mut row_ln_scale = Vec::with_capacity(n_rows);
        for (r, row) in ln_rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::InvalidObservation {
                    index: first_index[r],
                    reason: "kernel returned NaN".into(),
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::ZeroLikelihoodRow {
                    index: first_index[r],
                });
            }
            row_ln_scale.push(max);
            values.extend(row.iter().map(|v| (v - max).exp()));
        }
        let mut by_col = vec![0.0; n_rows * n_cols];
        for i in 0..n_rows {
            for j in 0..n_cols {
                by_col[j * n_rows + i] = values[i * n_cols + j];
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
            by_col,
            row_ln_scale,
            counts,
            obs_rows,
        })
    }

    /// Number of observations `n` (with multiplicity).
    pub fn n_obs(&self) -> usize {
        self.obs_rows.len()
    }

    /// Number of distinct rows.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of atoms `m`.
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `f(Y_i | atom_j)` for original observation `i`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        let r = self.obs_rows[i];
        (self.values[r * self.n_cols + j].ln() + self.row_ln_scale[r]).exp()
    }

    /// Row of observation `i` in the deduplicated matrix.
    pub fn row_of(&self, i: usize) -> usize {
        self.obs_rows[i]
    }

    pub fn multiplicities(&self) -> &[f64] {
        &self.counts
    }

    /// Scaled row `r` (max entry 1).
    pub fn scaled_row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    fn scaled_col(&self, j: usize) -> &[f64] {
        &self.by_col[j * self.n_rows..(j + 1) * self.n_rows]
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_cols {
            return Err(Error::DimensionMismatch {
                expected: self.n_cols,
                found: w.len(),
            });
        }
        Ok(())
    }

    /// Scaled mixture likelihoods `(Lw)_r` per distinct row.
    pub(crate) fn mix_lik_into(&self, w: &[f64], out: &mut [f64]) {
        par::fill(out, self.n_rows * self.n_cols, |r| {
            dot(self.scaled_row(r), w)
        });
    }

    pub(crate) fn first_zero_row(&self, lw: &[f64]) -> Option<usize> {
        lw.iter()
            .position(|&v| v <= 0.0)
            .map(|r| self.obs_rows.iter().position(|&x| x == r).unwrap_or(r))
    }

    fn ln_lik_from(&self, lw: &[f64]) -> f64 {
        lw.iter()
            .zip(&self.counts)
            .zip(&self.row_ln_scale)
            .map(|((l, c), s)| c * (l.ln() + s))
            .sum()
    }

    /// `D_j = n^{-1} Σ_i L_ij / (Lw)_i` written into `out`.
    fn em_multipliers(&self, lw: &[f64], ratio: &mut [f64], out: &mut [f64]) {
        let n = self.n_obs() as f64;
        for ((r, c), l) in ratio.iter_mut().zip(&self.counts).zip(lw) {
            *r = c / (n * l);
        }
        let ratio: &[f64] = ratio;
        par::fill(out, self.n_rows * self.n_cols, |j| {
            dot(self.scaled_col(j), ratio)
        });
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `build_likelihood_matrix` under its operation name.
pub fn build_likelihood_matrix<K: Kernel>(
    kernel: &K,
    data: &[K::Obs],
    grid: &ParameterGrid<K::Atom>,
) -> Result<LikelihoodMatrix> {
    LikelihoodMatrix::build(kernel, data, grid)
}

/// `Σ_i ln Σ_j w_j f(Y_i | atom_j)`.
pub fn log_likelihood(l: &LikelihoodMatrix, w: &MixingDistribution) -> Result<f64> {
    l.check_weights(w.weights())?;
    let mut lw = vec![0.0; l.n_rows];
    l.mix_lik_into(w.weights(), &mut lw);
    if let Some(index) = l.first_zero_row(&lw) {
        return Err(Error::ZeroMixtureLikelihood { index });
    }
    Ok(l.ln_lik_from(&lw))
}

/// EM stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once a step gains less log-likelihood than this; 0 disables.
    pub stop_tol: f64,
    /// Stop once the fixed-point residual drops below this.
    pub residual_tol: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            stop_tol: 0.0,
            residual_tol: None,
        }
    }
}

impl EmConfig {
    pub fn iterations(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }

    /// Runs until the fixed-point residual is below `tol` or `max_iters`.
    pub fn to_fixed_point(tol: f64, max_iters: usize) -> Self {
        Self {
            max_iters,
            stop_tol: 0.0,
            residual_tol: Some(tol),
        }
    }
}

/// Outcome of an EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmReport {
    pub weights: MixingDistribution,
    /// Log-likelihood at the initial weights and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations_run: usize,
    /// `max_j |w_j D_j - w_j|` at the returned weights.
    pub fixed_point_residual: f64,
}

impl EmReport {
    pub fn final_loglik(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace holds the initial value")
    }

    /// Whether every step kept the log-likelihood within `ASCENT_TOL` of its predecessor.
    pub fn is_ascending(&self) -> bool {
        self.loglik_trace
            .windows(2)
            .all(|p| p[1] >= p[0] - ASCENT_TOL)
    }

    pub fn summary(&self, include_trace: bool) -> EmSummary {
        EmSummary {
            weights: self.weights.weights().to_vec(),
            final_loglik: self.final_loglik(),
            iterations: self.iterations_run,
            fixed_point_residual: self.fixed_point_residual,
            loglik_trace: include_trace.then(|| self.loglik_trace.clone()),
        }
    }
}

/// JSON form of an [`EmReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub weights: Vec<f64>,
    pub final_loglik: f64,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik_trace: Option<Vec<f64>>,
}

/// Fits grid weights by EM, `w_j ← w_j · n^{-1} Σ_i L_ij / (Lw)_i`.
///
/// Starts from `init` or the uniform distribution. Atoms with zero initial
/// weight stay at zero.
pub fn em_fit(
    l: &LikelihoodMatrix,
    init: Option<&MixingDistribution>,
    config: &EmConfig,
) -> Result<EmReport> {
    let m = l.n_cols;
    let mut w = match init {
        Some(init) => {
            l.check_weights(init.weights())?;
            init.weights().to_vec()
        }
        None => MixingDistribution::uniform(m)?.into_weights(),
    };
    let mut lw = vec![0.0; l.n_rows];
    let mut ratio = vec![0.0; l.n_rows];
    let mut mult = vec![0.0; m];

    l.mix_lik_into(&w, &mut lw);
    if let Some(index) = l.first_zero_row(&lw) {
        return Err(Error::ZeroMixtureLikelihood { index });
    }
    let mut ll = l.ln_lik_from(&lw);
    let mut trace = Vec::with_capacity(config.max_iters.min(1 << 20) + 1);
    trace.push(ll);

    let mut iterations = 0;
    while iterations < config.max_iters {
        l.em_multipliers(&lw, &mut ratio, &mut mult);
        let mut residual = 0.0f64;
        let mut sum = 0.0;
        for (wj, dj) in w.iter_mut().zip(&mult) {
            let next = *wj * dj;
            residual = residual.max((next - *wj).abs());
            *wj = next;
            sum += next;
        }
        w.iter_mut().for_each(|wj| *wj /= sum);
        iterations += 1;

        l.mix_lik_into(&w, &mut lw);
        let next_ll = l.ln_lik_from(&lw);
        trace.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        if config.stop_tol > 0.0 && gain < config.stop_tol {
            break;
        }
        if config.residual_tol.is_some_and(|tol| residual < tol) {
            break;
        }
    }

    l.em_multipliers(&lw, &mut ratio, &mut mult);
    let fixed_point_residual = w
        .iter()
        .zip(&mult)
        .map(|(wj, dj)| (wj * dj - wj).abs())
        .fold(0.0, f64::max);

    Ok(EmReport {
        weights: MixingDistribution::normalized(w)?,
        loglik_trace: trace,
        iterations_run: iterations,
        fixed_point_residual,
    })
}

/// Per-atom EM multipliers `D_j` at `w`; at a fixed point `D_j = 1` on the support.
pub fn em_multipliers(l: &LikelihoodMatrix, w: &MixingDistribution) -> Result<Vec<f64>> {
    l.check_weights(w.weights())?;
    let mut lw = vec![0.0; l.n_rows];
    l.mix_lik_into(w.weights(), &mut lw);
    if let Some(index) = l.first_zero_row(&lw) {
        return Err(Error::ZeroMixtureLikelihood { index });
    }
    let mut ratio = vec![0.0; l.n_rows];
    let mut mult = vec![0.0; l.n_cols];
    l.em_multipliers(&lw, &mut ratio, &mut mult);
    Ok(mult)
}

/// Exhaustive search of the weight simplex for `m ≤ 3` atoms.
///
/// Scans at resolution 1e-3, then once more at 1e-5 in a ±1e-3 box around
/// the best point. A test oracle: it shares nothing with [`em_fit`].
pub fn brute_force_gmle(l: &LikelihoodMatrix) -> Result<MixingDistribution> {
    let m = l.n_cols;
    if m > 3 {
        return Err(Error::TooManyAtoms(m));
    }
    let eval = |w: &[f64]| -> f64 {
        (0..l.n_rows)
            .map(|r| {
                let s: f64 = l.scaled_row(r).iter().zip(w).map(|(a, b)| a * b).sum();
                l.counts[r] * s.ln()
            })
            .sum()
    };
    match m {
        1 => MixingDistribution::new(vec![1.0]),
        2 => {
            let scan = |lo: f64, hi: f64, step: f64| -> f64 {
                let steps = ((hi - lo) / step).round() as usize;
                let mut best = (f64::NEG_INFINITY, lo);
                for s in 0..=steps {
                    let a = (lo + step * s as f64).clamp(0.0, 1.0);
                    let v = eval(&[a, 1.0 - a]);
                    if v > best.0 {
                        best = (v, a);
                    }
                }
                best.1
            };
            let coarse = scan(0.0, 1.0, 1e-3);
            let fine = scan((coarse - 1e-3).max(0.0), (coarse + 1e-3).min(1.0), 1e-5);
            MixingDistribution::normalized(vec![fine, 1.0 - fine])
        }
        _ => {
            let scan = |a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64, step: f64| -> (f64, f64) {
                let na = ((a_hi - a_lo) / step).round() as usize;
                let nb = ((b_hi - b_lo) / step).round() as usize;
                let mut best = (f64::NEG_INFINITY, a_lo, b_lo);
                for ia in 0..=na {
                    let a = (a_lo + step * ia as f64).clamp(0.0, 1.0);
                    for ib in 0..=nb {
                        let b = (b_lo + step * ib as f64).clamp(0.0, 1.0);
                        if a + b > 1.0 + 1e-12 {
                            break;
                        }
                        let c = (1.0 - a - b).max(0.0);
                        let v = eval(&[a, b, c]);
                        if v > best.0 {
                            best = (v, a, b);
                        }
                    }
                }
                (best.1, best.2)
            };
            let (a, b) = scan(0.0, 1.0, 0.0, 1.0, 1e-3);
            let (a, b) = scan(
                (a - 1e-3).max(0.0),
                (a + 1e-3).min(1.0),
                (b - 1e-3).max(0.0),
                (b + 1e-3).min(1.0),
                1e-5,
            );
            MixingDistribution::normalized(vec![a, b, (1.0 - a - b).max(0.0)])
        }
    }
}
