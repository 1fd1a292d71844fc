//! Estimators of the population proportion: the naive mean of stratum
//! proportions, the pooled ("extreme collapse") ratio, the GMLE plug-in and
//! its per-stratum posterior means, and the reweighting that recovers `Ĝ` from
//! a fit to responders only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{functional_mean, MixingDistribution, ParameterGrid};
use crate::models::{BinomialStratumParam, CountObservation, Kernel};
use crate::npmle::{em_fit, EmConfig, EmReport, LikelihoodMatrix};

/// Below this response probability, truncation reweighting is flagged as near-singular.
pub const NEAR_SINGULAR_RESPONSE: f64 = 1e-3;

/// A point estimate that may be undefined for the data at hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    Value(f64),
    Undefined { empty_strata: usize },
}

impl Estimate {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Self::Value(v) => Some(v),
            Self::Undefined { .. } => None,
        }
    }
}

fn empty_strata(data: &[CountObservation]) -> usize {
    data.iter().filter(|o| o.k == 0).count()
}

/// `n^{-1} Σ X_i / K_i`; undefined when any stratum is empty.
pub fn naive_estimator(data: &[CountObservation]) -> Estimate {
    let empty = empty_strata(data);
    if empty > 0 || data.is_empty() {
        return Estimate::Undefined {
            empty_strata: empty,
        };
    }
    Estimate::Value(mean_proportion(data.iter()))
}

/// The naive estimator over non-empty strata only, i.e. treating empty strata
/// as missing at random. Undefined only when every stratum is empty.
pub fn naive_nonempty_estimator(data: &[CountObservation]) -> Estimate {
    let empty = empty_strata(data);
    if empty == data.len() {
        return Estimate::Undefined {
            empty_strata: empty,
        };
    }
    Estimate::Value(mean_proportion(data.iter().filter(|o| o.k > 0)))
}

fn mean_proportion<'a>(strata: impl Iterator<Item = &'a CountObservation>) -> f64 {
    let (sum, n) = strata.fold((0.0, 0usize), |(s, n), o| {
        (s + f64::from(o.x) / f64::from(o.k), n + 1)
    });
    sum / n as f64
}

/// `Σ X_i / Σ K_i`; undefined when `Σ K_i = 0`.
pub fn extreme_collapse_estimator(data: &[CountObservation]) -> Estimate {
    let (x, k) = data.iter().fold((0u64, 0u64), |(x, k), o| {
        (x + u64::from(o.x), k + u64::from(o.k))
    });
    if k == 0 {
        return Estimate::Undefined {
            empty_strata: data.len(),
        };
    }
    Estimate::Value(x as f64 / k as f64)
}

/// `E_Ĝ η = Σ_j w_j η_j`.
pub fn gmle_plug_in(w: &MixingDistribution, eta_values: &[f64]) -> Result<f64> {
    functional_mean(w, eta_values)
}

/// `E_Ĝ(η | Y_i) = Σ_j η_j w_j L_ij / Σ_j w_j L_ij`.
pub fn posterior_mean(
    l: &LikelihoodMatrix,
    w: &MixingDistribution,
    eta_values: &[f64],
    i: usize,
) -> Result<f64> {
    check_dims(l, w, eta_values)?;
    if i >= l.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: l.n_obs(),
            found: i + 1,
        });
    }
    row_posterior_mean(l.scaled_row(l.row_of(i)), w.weights(), eta_values)
        .ok_or(Error::ZeroMixtureLikelihood { index: i })
}

/// Posterior means for every observation, in input order. Each distinct row
/// is computed once.
pub fn posterior_means(
    l: &LikelihoodMatrix,
    w: &MixingDistribution,
    eta_values: &[f64],
) -> Result<Vec<f64>> {
    check_dims(l, w, eta_values)?;
    let per_row = crate::par::map_indices(l.n_rows(), |r| {
        row_posterior_mean(l.scaled_row(r), w.weights(), eta_values)
    });
    (0..l.n_obs())
        .map(|i| per_row[l.row_of(i)].ok_or(Error::ZeroMixtureLikelihood { index: i }))
        .collect()
}

fn row_posterior_mean(row: &[f64], w: &[f64], eta: &[f64]) -> Option<f64> {
    let (num, den) = row
        .iter()
        .zip(w)
        .zip(eta)
        .fold((0.0, 0.0), |(num, den), ((l, w), e)| {
            let joint = l * w;
            (num + joint * e, den + joint)
        });
    (den > 0.0).then(|| num / den)
}

fn check_dims(l: &LikelihoodMatrix, w: &MixingDistribution, eta: &[f64]) -> Result<()> {
    for found in [w.len(), eta.len()] {
        if found != l.n_cols() {
            return Err(Error::DimensionMismatch {
                expected: l.n_cols(),
                found,
            });
        }
    }
    Ok(())
}

/// `Ĝ` recovered from a fit to responders only.
#[derive(Debug, Clone, PartialEq)]
pub struct Reweighted {
    pub mixture: MixingDistribution,
    /// Positively weighted atoms whose response probability is below
    /// [`NEAR_SINGULAR_RESPONSE`].
    pub near_singular_atoms: Vec<usize>,
}

/// `w_j ∝ w^t_j / (1 - (1 - π_j)^κ0)`.
///
/// Fails when a positively weighted atom has `π = 0`.
pub fn truncated_reweight(
    w_t: &MixingDistribution,
    grid: &ParameterGrid<BinomialStratumParam>,
    kappa0: u32,
) -> Result<Reweighted> {
    if grid.len() != w_t.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            found: w_t.len(),
        });
    }
    if kappa0 == 0 {
        return Err(Error::InvalidParameter("kappa0 must be positive".into()));
    }
    let mut singular = Vec::new();
    let mut near_singular_atoms = Vec::new();
    let mut raw = Vec::with_capacity(grid.len());
    for (j, (atom, &w)) in grid.atoms().iter().zip(w_t.weights()).enumerate() {
        let respond = 1.0 - (1.0 - atom.pi).powi(kappa0 as i32);
        if w > 0.0 {
            if respond <= 0.0 {
                singular.push(j);
                continue;
            }
            if respond < NEAR_SINGULAR_RESPONSE {
                near_singular_atoms.push(j);
            }
            raw.push(w / respond);
        } else {
            raw.push(0.0);
        }
    }
    if !singular.is_empty() {
        return Err(Error::TruncationSingular { atoms: singular });
    }
    Ok(Reweighted {
        mixture: MixingDistribution::normalized(raw)?,
        near_singular_atoms,
    })
}

/// Every estimator on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSet {
    pub n_strata: usize,
    pub empty_strata: usize,
    pub naive: Estimate,
    pub naive_nonempty: Estimate,
    pub extreme_collapse: Estimate,
    pub gmle: f64,
    pub posterior_means: Vec<f64>,
}

/// Likelihood matrix, EM fit and all estimators in one call.
pub fn estimate_all<K>(
    kernel: &K,
    data: &[CountObservation],
    grid: &ParameterGrid<K::Atom>,
    eta_values: &[f64],
    em_config: &EmConfig,
) -> Result<(EstimateSet, EmReport)>
where
    K: Kernel<Obs = CountObservation>,
{
    let l = LikelihoodMatrix::build(kernel, data, grid)?;
    let report = em_fit(&l, None, em_config)?;
    let gmle = gmle_plug_in(&report.weights, eta_values)?;
    let posterior_means = posterior_means(&l, &report.weights, eta_values)?;
    let set = EstimateSet {
        n_strata: data.len(),
        empty_strata: empty_strata(data),
        naive: naive_estimator(data),
        naive_nonempty: naive_nonempty_estimator(data),
        extreme_collapse: extreme_collapse_estimator(data),
        gmle,
        posterior_means,
    };
    Ok((set, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AxisSpec;
    use crate::models::{PoissonStratumKernel, PoissonStratumParam, ProportionParam};
    use crate::npmle::{build_likelihood_matrix, em_fit};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn obs(x: u32, k: u32) -> CountObservation {
        CountObservation { x, k }
    }

    #[test]
    fn naive_examples() {
        assert_eq!(
            naive_estimator(&[obs(1, 2), obs(0, 1)]),
            Estimate::Value(0.25)
        );
        assert_eq!(naive_estimator(&[obs(1, 1)]), Estimate::Value(1.0));
        assert_eq!(
            naive_estimator(&[obs(0, 0), obs(1, 1)]),
            Estimate::Undefined { empty_strata: 1 }
        );
        assert_eq!(
            naive_nonempty_estimator(&[obs(0, 0), obs(1, 1)]),
            Estimate::Value(1.0)
        );
        assert_eq!(
            naive_nonempty_estimator(&[obs(0, 0)]),
            Estimate::Undefined { empty_strata: 1 }
        );
    }

    #[test]
    fn extreme_collapse_examples() {
        let v = extreme_collapse_estimator(&[obs(1, 2), obs(0, 1)])
            .value()
            .unwrap();
        assert_relative_eq!(v, 1.0 / 3.0);
        assert!(extreme_collapse_estimator(&[obs(0, 0), obs(0, 0)])
            .value()
            .is_none());
        assert_eq!(
            extreme_collapse_estimator(&[obs(2, 4)]),
            Estimate::Value(0.5)
        );
    }

    #[test]
    fn estimate_json_shape() {
        let json = serde_json::to_string(&Estimate::Undefined { empty_strata: 3 }).unwrap();
        assert_eq!(json, r#"{"undefined":{"empty_strata":3}}"#);
        assert_eq!(
            serde_json::to_string(&Estimate::Value(0.5)).unwrap(),
            r#"{"value":0.5}"#
        );
    }

    #[test]
    fn posterior_mean_examples() {
        let l = LikelihoodMatrix::from_rows(vec![vec![0.2, 0.8], vec![0.5, 0.1]]).unwrap();
        let half = MixingDistribution::uniform(2).unwrap();
        assert_relative_eq!(
            posterior_mean(&l, &half, &[0.0, 1.0], 0).unwrap(),
            0.8,
            epsilon = 1e-15
        );
        let deg = MixingDistribution::degenerate(2, 1).unwrap();
        for i in 0..2 {
            assert_eq!(posterior_mean(&l, &deg, &[0.3, 0.7], i).unwrap(), 0.7);
            assert_relative_eq!(posterior_mean(&l, &half, &[0.4, 0.4], i).unwrap(), 0.4);
        }
        let l = LikelihoodMatrix::from_rows(vec![vec![0.0, 0.8]]).unwrap();
        let first = MixingDistribution::degenerate(2, 0).unwrap();
        assert!(posterior_mean(&l, &first, &[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn plug_in_examples() {
        let deg = MixingDistribution::degenerate(3, 2).unwrap();
        assert_eq!(gmle_plug_in(&deg, &[0.1, 0.2, 0.9]).unwrap(), 0.9);
        let g2 = MixingDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_relative_eq!(gmle_plug_in(&g2, &[1.0, 0.0, 1.0]).unwrap(), 0.75);
        let u = MixingDistribution::uniform(2).unwrap();
        assert_relative_eq!(gmle_plug_in(&u, &[0.0, 1.0]).unwrap(), 0.5);
    }

    fn pi_grid(pis: &[f64]) -> ParameterGrid<BinomialStratumParam> {
        ParameterGrid::from_atoms(
            pis.iter()
                .map(|&pi| BinomialStratumParam { pi, p: 0.5 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn truncated_reweight_examples() {
        let w = MixingDistribution::new(vec![0.3, 0.7]).unwrap();
        let r = truncated_reweight(&w, &pi_grid(&[1.0, 1.0]), 3).unwrap();
        assert_eq!(r.mixture, w);

        let w = MixingDistribution::uniform(2).unwrap();
        let r = truncated_reweight(&w, &pi_grid(&[0.5, 1.0]), 1).unwrap();
        assert_relative_eq!(r.mixture.weights()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r.mixture.weights()[1], 1.0 / 3.0, epsilon = 1e-15);

        assert!(matches!(
            truncated_reweight(&w, &pi_grid(&[0.0, 1.0]), 2),
            Err(Error::TruncationSingular { ref atoms }) if atoms == &[0]
        ));
        // a zero-weight atom at π = 0 is harmless
        let w = MixingDistribution::new(vec![0.0, 1.0]).unwrap();
        assert!(truncated_reweight(&w, &pi_grid(&[0.0, 1.0]), 2).is_ok());
        // near-singular atoms are reported, not rejected
        let w = MixingDistribution::uniform(2).unwrap();
        let r = truncated_reweight(&w, &pi_grid(&[1e-4, 1.0]), 2).unwrap();
        assert_eq!(r.near_singular_atoms, vec![0]);
    }

    #[test]
    fn estimate_all_pipeline() {
        let grid: ParameterGrid<PoissonStratumParam> =
            ParameterGrid::product(&[AxisSpec::new(0.02, 4.0, 8), AxisSpec::new(0.02, 4.0, 8)])
                .unwrap();
        let eta = grid.eta_values(ProportionParam::eta_proportion);
        let data = vec![
            obs(1, 2),
            obs(0, 0),
            obs(3, 3),
            obs(0, 1),
            obs(0, 0),
            obs(2, 5),
        ];
        let cfg = EmConfig::default();
        let (set, report) = estimate_all(&PoissonStratumKernel, &data, &grid, &eta, &cfg).unwrap();
        assert_eq!(set.naive, Estimate::Undefined { empty_strata: 2 });
        assert_eq!(set.empty_strata, 2);
        let l = build_likelihood_matrix(&PoissonStratumKernel, &data, &grid).unwrap();
        let direct = em_fit(&l, None, &cfg).unwrap();
        assert_eq!(direct.weights, report.weights);
        assert_eq!(set.gmle, gmle_plug_in(&direct.weights, &eta).unwrap());
        assert_eq!(set.posterior_means.len(), data.len());
        assert_eq!(set.posterior_means[1], set.posterior_means[4]);
        assert!((0.0..=1.0).contains(&set.gmle));

        let single = [obs(3, 4)];
        let (set, _) = estimate_all(&PoissonStratumKernel, &single, &grid, &eta, &cfg).unwrap();
        assert_eq!(set.naive, Estimate::Value(0.75));
        assert_eq!(set.extreme_collapse, Estimate::Value(0.75));
    }

    proptest! {
        #[test]
        fn reweight_is_scale_invariant(
            raw in proptest::collection::vec(0.01f64..1.0, 4),
            scale in 0.01f64..100.0,
            kappa0 in 1u32..6,
        ) {
            let grid = pi_grid(&[0.1, 0.4, 0.7, 1.0]);
            let eta = [0.2, 0.4, 0.6, 0.8];
            let a = MixingDistribution::normalized(raw.clone()).unwrap();
            let b = MixingDistribution::normalized(raw.iter().map(|w| w * scale).collect()).unwrap();
            let ea = functional_mean(&truncated_reweight(&a, &grid, kappa0).unwrap().mixture, &eta).unwrap();
            let eb = functional_mean(&truncated_reweight(&b, &grid, kappa0).unwrap().mixture, &eta).unwrap();
            prop_assert!((ea - eb).abs() < 1e-12);
        }

        #[test]
        fn posterior_means_lie_within_eta_range(
            rows in proptest::collection::vec(proptest::collection::vec(0.001f64..1.0, 3), 1..10),
            eta in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let l = LikelihoodMatrix::from_rows(rows).unwrap();
            let w = em_fit(&l, None, &EmConfig::iterations(50)).unwrap().weights;
            let lo = eta.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in posterior_means(&l, &w, &eta).unwrap() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
