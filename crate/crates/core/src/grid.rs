//! Finite parameter grids and mixing distributions over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BinomialStratumParam, CountObservation, PoissonStratumParam};

/// Tolerance on `Σ w = 1` for a valid mixing distribution.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// Floor of the default ξ-axes; keeps `λ = 0` out of the support.
pub const XI_FLOOR: f64 = 0.02;

/// One equally spaced axis `lo, ..., hi` with `count` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    fn validate(&self, axis: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidAxis { axis, reason });
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return bad(format!("non-finite range [{}, {}]", self.lo, self.hi));
        }
        if self.lo > self.hi {
            return bad(format!("lo = {} > hi = {}", self.lo, self.hi));
        }
        if self.count == 0 {
            return bad("count = 0".into());
        }
        Ok(())
    }

    /// The axis points; endpoints are hit exactly.
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let span = self.hi - self.lo;
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i == self.count - 1 {
                    self.hi
                } else {
                    self.lo + span * (i as f64) / last
                }
            })
            .collect()
    }
}

/// Parameter types that can sit on a product grid.
pub trait GridAtom: Copy + std::fmt::Debug + Send + Sync {
    const DIM: usize;
    fn from_coords(coords: &[f64]) -> Result<Self>;
    fn coords(&self) -> Vec<f64>;
}

impl GridAtom for f64 {
    const DIM: usize = 1;

    fn from_coords(coords: &[f64]) -> Result<Self> {
        Ok(coords[0])
    }

    fn coords(&self) -> Vec<f64> {
        vec![*self]
    }
}

impl GridAtom for PoissonStratumParam {
    const DIM: usize = 2;

    fn from_coords(coords: &[f64]) -> Result<Self> {
        PoissonStratumParam::new(coords[0], coords[1])
    }

    fn coords(&self) -> Vec<f64> {
        vec![self.xi1, self.xi2]
    }
}

impl GridAtom for BinomialStratumParam {
    const DIM: usize = 2;

    fn from_coords(coords: &[f64]) -> Result<Self> {
        BinomialStratumParam::new(coords[0], coords[1])
    }

    fn coords(&self) -> Vec<f64> {
        vec![self.pi, self.p]
    }
}

/// Candidate mixture atoms. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid<A> {
    atoms: Vec<A>,
    dims: Vec<usize>,
    ranges: Vec<(f64, f64)>,
}

impl<A: GridAtom> ParameterGrid<A> {
    /// Cartesian product of equally spaced axes, first axis outermost.
    pub fn product(axes: &[AxisSpec]) -> Result<Self> {
        if axes.len() != A::DIM {
            return Err(Error::DimensionMismatch {
                expected: A::DIM,
                found: axes.len(),
            });
        }
        for (i, axis) in axes.iter().enumerate() {
            axis.validate(i)?;
        }
        let points: Vec<Vec<f64>> = axes.iter().map(AxisSpec::points).collect();
        let total: usize = axes.iter().map(|a| a.count).product();
        let mut atoms = Vec::with_capacity(total);
        let mut index = vec![0usize; axes.len()];
        let mut coords = vec![0.0; axes.len()];
        for _ in 0..total {
            for (d, &i) in index.iter().enumerate() {
                coords[d] = points[d][i];
            }
            atoms.push(A::from_coords(&coords)?);
            for d in (0..axes.len()).rev() {
                index[d] += 1;
                if index[d] < axes[d].count {
                    break;
                }
                index[d] = 0;
            }
        }
        Ok(Self {
            atoms,
            dims: axes.iter().map(|a| a.count).collect(),
            ranges: axes.iter().map(|a| (a.lo, a.hi)).collect(),
        })
    }

    /// An explicit list of atoms (not necessarily a product).
    pub fn from_atoms(atoms: Vec<A>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidParameter("grid has no atoms".into()));
        }
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); A::DIM];
        for atom in &atoms {
            for (r, c) in ranges.iter_mut().zip(atom.coords()) {
                r.0 = r.0.min(c);
                r.1 = r.1.max(c);
            }
        }
        let n = atoms.len();
        Ok(Self {
            atoms,
            dims: vec![n],
            ranges,
        })
    }
}

impl<A> ParameterGrid<A> {
    pub fn atoms(&self) -> &[A] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    /// `η` evaluated at every atom.
    pub fn eta_values(&self, eta: impl Fn(&A) -> f64) -> Vec<f64> {
        self.atoms.iter().map(eta).collect()
    }
}

/// `build_product_grid` under its operation name.
pub fn build_product_grid<A: GridAtom>(axes: &[AxisSpec]) -> Result<ParameterGrid<A>> {
    ParameterGrid::product(axes)
}

/// Probability weights over the atoms of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixingDistribution {
    weights: Vec<f64>,
}

impl MixingDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no weights".into()));
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidWeights(format!(
                "weight {j} = {} is not a nonnegative finite number",
                weights[j]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self { weights })
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Self::new(weights)
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidWeights("no atoms".into()));
        }
        Ok(Self {
            weights: vec![1.0 / m as f64; m],
        })
    }

    /// All mass on atom `j` of `m`.
    pub fn degenerate(m: usize, j: usize) -> Result<Self> {
        if j >= m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: j + 1,
            });
        }
        let mut weights = vec![0.0; m];
        weights[j] = 1.0;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

impl TryFrom<Vec<f64>> for MixingDistribution {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<MixingDistribution> for Vec<f64> {
    fn from(m: MixingDistribution) -> Self {
        m.weights
    }
}

/// `E_G η = Σ_j w_j η(atom_j)`.
pub fn functional_mean(mix: &MixingDistribution, eta_values: &[f64]) -> Result<f64> {
    if eta_values.len() != mix.len() {
        return Err(Error::DimensionMismatch {
            expected: mix.len(),
            found: eta_values.len(),
        });
    }
    Ok(mix.weights.iter().zip(eta_values).map(|(w, e)| w * e).sum())
}

/// Persisted form of a fitted mixture: `{"atoms": [[a, b], ...], "weights": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFile {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl MixtureFile {
    pub fn new<A: GridAtom>(grid: &ParameterGrid<A>, mix: &MixingDistribution) -> Result<Self> {
        if grid.len() != mix.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: mix.len(),
            });
        }
        Ok(Self {
            atoms: grid.atoms().iter().map(GridAtom::coords).collect(),
            weights: mix.weights().to_vec(),
        })
    }

    /// Rebuilds the grid and mixture, validating both.
    pub fn into_parts<A: GridAtom>(self) -> Result<(ParameterGrid<A>, MixingDistribution)> {
        if self.atoms.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.atoms.len(),
                found: self.weights.len(),
            });
        }
        let atoms = self
            .atoms
            .iter()
            .map(|c| {
                if c.len() != A::DIM {
                    return Err(Error::DimensionMismatch {
                        expected: A::DIM,
                        found: c.len(),
                    });
                }
                A::from_coords(c)
            })
            .collect::<Result<Vec<A>>>()?;
        Ok((
            ParameterGrid::from_atoms(atoms)?,
            MixingDistribution::new(self.weights)?,
        ))
    }
}

/// Default `[lo, hi]` for both ξ-axes given count data: `lo = 0.02`,
/// `hi = c + 3·sqrt(c + 1)` where `c` is the largest of all `x_i` and `k_i - x_i`.
pub fn default_xi_range(data: &[CountObservation]) -> Result<(f64, f64)> {
    let c = data
        .iter()
        .map(|o| o.x.max(o.failures()))
        .max()
        .ok_or(Error::EmptyData)?;
    let c = f64::from(c);
    Ok((XI_FLOOR, c + 3.0 * (c + 1.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn product_grid_endpoints() {
        let g: ParameterGrid<BinomialStratumParam> =
            build_product_grid(&[AxisSpec::new(0.0, 1.0, 2), AxisSpec::new(0.0, 1.0, 2)]).unwrap();
        let coords: Vec<Vec<f64>> = g.atoms().iter().map(GridAtom::coords).collect();
        assert_eq!(
            coords,
            vec![
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0]
            ]
        );
        assert_eq!(g.dims(), &[2, 2]);
    }

    #[test]
    fn degenerate_axis_and_spacing() {
        let g: ParameterGrid<f64> = build_product_grid(&[AxisSpec::new(0.5, 0.5, 1)]).unwrap();
        assert_eq!(g.atoms(), &[0.5]);
        let g: ParameterGrid<f64> = build_product_grid(&[AxisSpec::new(0.0, 2.0, 41)]).unwrap();
        assert_eq!(g.atoms()[10], 0.5);
        assert_eq!(g.atoms()[40], 2.0);
        for w in g.atoms().windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.05, epsilon = 1e-15);
        }
    }

    #[test]
    fn invalid_axes_rejected() {
        assert!(matches!(
            build_product_grid::<f64>(&[AxisSpec::new(1.0, 0.0, 3)]),
            Err(Error::InvalidAxis { axis: 0, .. })
        ));
        assert!(build_product_grid::<f64>(&[AxisSpec::new(0.0, 1.0, 0)]).is_err());
        assert!(build_product_grid::<f64>(&[
            AxisSpec::new(0.0, 1.0, 2),
            AxisSpec::new(0.0, 1.0, 2)
        ])
        .is_err());
        // atom invariants are enforced
        assert!(build_product_grid::<BinomialStratumParam>(&[
            AxisSpec::new(0.0, 1.5, 3),
            AxisSpec::new(0.0, 1.0, 2)
        ])
        .is_err());
    }

    #[test]
    fn default_xi_range_examples() {
        let zeros = vec![CountObservation { x: 0, k: 0 }; 5];
        assert_eq!(default_xi_range(&zeros).unwrap(), (0.02, 3.0));
        let data = [
            CountObservation { x: 4, k: 5 },
            CountObservation { x: 0, k: 2 },
        ];
        let (lo, hi) = default_xi_range(&data).unwrap();
        assert_eq!(lo, 0.02);
        assert_relative_eq!(hi, 4.0 + 3.0 * 5f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(default_xi_range(&[]), Err(Error::EmptyData)));
    }

    #[test]
    fn functional_mean_examples() {
        let atoms = vec![
            BinomialStratumParam { pi: 0.0, p: 1.0 },
            BinomialStratumParam { pi: 1.0, p: 0.0 },
            BinomialStratumParam { pi: 1.0, p: 1.0 },
            BinomialStratumParam { pi: 0.5, p: 0.5 },
        ];
        let grid = ParameterGrid::from_atoms(atoms).unwrap();
        let eta = grid.eta_values(|a| a.p);
        let g2 = MixingDistribution::new(vec![0.5, 0.25, 0.25, 0.0]).unwrap();
        assert_relative_eq!(functional_mean(&g2, &eta).unwrap(), 0.75);
        let g1 = MixingDistribution::degenerate(4, 3).unwrap();
        assert_relative_eq!(functional_mean(&g1, &eta).unwrap(), 0.5);
        assert!(functional_mean(&g1, &eta[..3]).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(MixingDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(MixingDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(MixingDistribution::new(vec![]).is_err());
        let m = MixingDistribution::normalized(vec![2.0, 6.0]).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn mixture_file_json_round_trip() {
        let grid: ParameterGrid<PoissonStratumParam> =
            build_product_grid(&[AxisSpec::new(0.02, 1.0, 2), AxisSpec::new(0.02, 1.0, 3)])
                .unwrap();
        let mix = MixingDistribution::uniform(6).unwrap();
        let file = MixtureFile::new(&grid, &mix).unwrap();
        let json = serde_json::to_string(&file).unwrap();
        assert!(json.starts_with("{\"atoms\":[[0.02,0.02]"));
        let back: MixtureFile = serde_json::from_str(&json).unwrap();
        let (g2, m2) = back.into_parts::<PoissonStratumParam>().unwrap();
        assert_eq!(g2.atoms(), grid.atoms());
        assert_eq!(m2, mix);
        let bad = MixtureFile {
            atoms: vec![vec![0.1]],
            weights: vec![1.0],
        };
        assert!(bad.into_parts::<PoissonStratumParam>().is_err());
    }

    proptest! {
        #[test]
        fn atom_count_is_product(a in 1usize..12, b in 1usize..12) {
            let g: ParameterGrid<PoissonStratumParam> =
                build_product_grid(&[AxisSpec::new(0.02, 3.0, a), AxisSpec::new(0.02, 5.0, b)]).unwrap();
            prop_assert_eq!(g.len(), a * b);
        }

        #[test]
        fn functional_mean_is_linear(
            raw_w in proptest::collection::vec(0.0f64..1.0, 5),
            raw_v in proptest::collection::vec(0.0f64..1.0, 5),
            eta in proptest::collection::vec(-3.0f64..3.0, 5),
            alpha in 0.0f64..=1.0,
        ) {
            prop_assume!(raw_w.iter().sum::<f64>() > 1e-3 && raw_v.iter().sum::<f64>() > 1e-3);
            let w = MixingDistribution::normalized(raw_w).unwrap();
            let v = MixingDistribution::normalized(raw_v).unwrap();
            let mixed: Vec<f64> = w.weights().iter().zip(v.weights())
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let mixed = MixingDistribution::normalized(mixed).unwrap();
            let lhs = functional_mean(&mixed, &eta).unwrap();
            let rhs = alpha * functional_mean(&w, &eta).unwrap()
                + (1.0 - alpha) * functional_mean(&v, &eta).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
