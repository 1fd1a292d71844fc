//! Seeded Monte Carlo campaigns for both sampling models.
//!
//! Every replication owns a ChaCha8 stream: `ChaCha8Rng::seed_from_u64(seed)`
//! with `set_stream(index)`. Replications run through [`crate::par`] and are
//! aggregated in index order, so a campaign is a pure function of its inputs
//! regardless of thread count or feature set.

use std::fmt::Write as _;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_all, EstimateSet};
use crate::grid::{default_xi_range, AxisSpec, GridAtom, ParameterGrid, XI_FLOOR};
use crate::models::{
    BinomialStratumKernel, BinomialStratumParam, CountObservation, PoissonStratumKernel,
    PoissonStratumParam,
};
use crate::npmle::{EmConfig, EmReport};
use crate::par;

/// Grid points per axis in the default protocol.
pub const PROTOCOL_GRID_POINTS: usize = 40;
/// Upper end of both ξ axes in the default Model (ii) protocol grid.
pub const PROTOCOL_XI_MAX: f64 = 6.0;
/// Smoothing constant for the proportion test function of the probe.
pub const PROBE_EPSILON: f64 = 0.05;

/// Stream reserved for drawing a fixed population and its full sample.
const POPULATION_STREAM: u64 = u64::MAX;

/// The rng for replication `index` of a campaign seeded with `seed`.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sampling model for stratum sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `K ~ Poisson(λ)`, `X | K ~ Bin(K, p)`.
    PoissonSizes,
    /// `K ~ Bin(κ, π)`, `X | K ~ Bin(K, p)`.
    BinomialSizes { kappa: u32 },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PoissonSizes => "poisson_sizes",
            Self::BinomialSizes { .. } => "binomial_sizes",
        }
    }
}

/// Law of one stratum parameter within a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AxisLaw {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl AxisLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Fixed(v) => v,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            Self::Fixed(v) => (v, v),
            Self::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Fixed(v) => v,
            Self::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi).sample(rng),
        }
    }
}

/// A block of strata sharing parameter laws. `size` is `λ` under Poisson sizes
/// and `π` under binomial sizes; `size` and `p` are drawn independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub n_strata: usize,
    pub size: AxisLaw,
    pub p: AxisLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub model: ModelSpec,
    pub groups: Vec<GroupSpec>,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_strata() == 0 {
            return Err(Error::Config("population has no strata".into()));
        }
        for (g, group) in self.groups.iter().enumerate() {
            let (slo, shi) = group.size.bounds();
            let (plo, phi) = group.p.bounds();
            let bad = |what: &str| Err(Error::Config(format!("group {g}: {what}")));
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(slo <= shi) || !(plo <= phi) {
                return bad("uniform law with lo > hi");
            }
            if !(slo.is_finite() && shi.is_finite()) || slo < 0.0 {
                return bad("size parameter must be finite and nonnegative");
            }
            if matches!(self.model, ModelSpec::BinomialSizes { .. }) && shi > 1.0 {
                return bad("response probability must lie in [0, 1]");
            }
            if !(plo >= 0.0 && phi <= 1.0) {
                return bad("p must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn total_strata(&self) -> usize {
        self.groups.iter().map(|g| g.n_strata).sum()
    }
}

/// Latent parameters of one stratum (`size` as in [`GroupSpec`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumTruth {
    pub size: f64,
    pub p: f64,
}

/// Strata-weighted average of the expected `p` of each group.
pub fn true_eta(spec: &PopulationSpec) -> f64 {
    let total = spec.total_strata() as f64;
    spec.groups
        .iter()
        .map(|g| g.n_strata as f64 * g.p.mean())
        .sum::<f64>()
        / total
}

/// Draws every stratum's parameters, group by group.
pub fn draw_population<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> Vec<StratumTruth> {
    let mut out = Vec::with_capacity(spec.total_strata());
    for g in &spec.groups {
        for _ in 0..g.n_strata {
            let size = g.size.sample(rng);
            let p = g.p.sample(rng);
            out.push(StratumTruth { size, p });
        }
    }
    out
}

fn binomial<R: Rng + ?Sized>(n: u32, p: f64, rng: &mut R) -> Result<u32> {
    let dist = Binomial::new(u64::from(n), p)
        .map_err(|e| Error::InvalidParameter(format!("binomial({n}, {p}): {e}")))?;
    Ok(dist.sample(rng) as u32)
}

/// Draws `K` then `X | K` for every stratum.
pub fn draw_observations<R: Rng + ?Sized>(
    params: &[StratumTruth],
    model: &ModelSpec,
    rng: &mut R,
) -> Result<Vec<CountObservation>> {
    params
        .iter()
        .map(|t| {
            let k = match *model {
                ModelSpec::PoissonSizes => {
                    if t.size == 0.0 {
                        0
                    } else {
                        let dist = Poisson::new(t.size).map_err(|e| {
                            Error::InvalidParameter(format!("poisson({}): {e}", t.size))
                        })?;
                        dist.sample(rng) as u32
                    }
                }
                ModelSpec::BinomialSizes { kappa } => binomial(kappa, t.size, rng)?,
            };
            let x = binomial(k, t.p, rng)?;
            Ok(CountObservation { x, k })
        })
        .collect()
}

/// Keeps each sampled individual independently with probability `gamma`.
/// Poisson(λ) sizes become Poisson(γλ); Bin(κ, π) sizes become Bin(κ, γπ).
pub fn thin_observations<R: Rng + ?Sized>(
    data: &[CountObservation],
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<CountObservation>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "retain probability {gamma} outside [0, 1]"
        )));
    }
    data.iter()
        .map(|o| {
            let x = binomial(o.x, gamma, rng)?;
            let f = binomial(o.failures(), gamma, rng)?;
            Ok(CountObservation { x, k: x + f })
        })
        .collect()
}

/// Axes of the product grid used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisSpec>,
}

impl GridConfig {
    pub fn square(lo: f64, hi: f64, count: usize) -> Self {
        Self {
            axes: vec![AxisSpec::new(lo, hi, count); 2],
        }
    }

    /// The protocol grid: `[0.02, 6]²` in ξ for Poisson sizes, `[0, 1]²` in `(π, p)` otherwise.
    pub fn default_for(model: &ModelSpec, count: usize) -> Self {
        match model {
            ModelSpec::PoissonSizes => Self::square(XI_FLOOR, PROTOCOL_XI_MAX, count),
            ModelSpec::BinomialSizes { .. } => Self::square(0.0, 1.0, count),
        }
    }

    /// Like [`GridConfig::default_for`], but the ξ range follows the data.
    pub fn for_data(model: &ModelSpec, data: &[CountObservation], count: usize) -> Result<Self> {
        match model {
            ModelSpec::PoissonSizes => {
                let (lo, hi) = default_xi_range(data)?;
                Ok(Self::square(lo, hi, count))
            }
            ModelSpec::BinomialSizes { .. } => Ok(Self::default_for(model, count)),
        }
    }

    /// Parses `N` (default ranges, `N` points per axis) or
    /// `lo:hi:n,lo:hi:n` (explicit axes).
    pub fn parse(text: &str, model: &ModelSpec) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse grid {text:?}"));
        if let Ok(count) = text.trim().parse::<usize>() {
            return Ok(Self::default_for(model, count));
        }
        let axes = text
            .split(',')
            .map(|axis| {
                let parts: Vec<&str> = axis.trim().split(':').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                let lo = parts[0].parse::<f64>().map_err(|_| bad())?;
                let hi = parts[1].parse::<f64>().map_err(|_| bad())?;
                let count = parts[2].parse::<usize>().map_err(|_| bad())?;
                Ok(AxisSpec::new(lo, hi, count))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { axes })
    }
}

/// A model's kernel, grid and `η(atom) = p` values, ready to fit datasets.
pub enum Fitter {
    Poisson {
        grid: ParameterGrid<PoissonStratumParam>,
        eta: Vec<f64>,
    },
    Binomial {
        kernel: BinomialStratumKernel,
        grid: ParameterGrid<BinomialStratumParam>,
        eta: Vec<f64>,
    },
}

impl Fitter {
    pub fn new(model: &ModelSpec, grid: &GridConfig) -> Result<Self> {
        Ok(match *model {
            ModelSpec::PoissonSizes => {
                let grid: ParameterGrid<PoissonStratumParam> = ParameterGrid::product(&grid.axes)?;
                let eta = grid.eta_values(|a| a.proportion_smoothed(0.0));
                Self::Poisson { grid, eta }
            }
            ModelSpec::BinomialSizes { kappa } => {
                let kernel = BinomialStratumKernel::new(kappa)?;
                let grid: ParameterGrid<BinomialStratumParam> = ParameterGrid::product(&grid.axes)?;
                let eta = grid.eta_values(|a| a.p);
                Self::Binomial { kernel, grid, eta }
            }
        })
    }

    pub fn eta_values(&self) -> &[f64] {
        match self {
            Self::Poisson { eta, .. } | Self::Binomial { eta, .. } => eta,
        }
    }

    /// Grid atoms as coordinate vectors.
    pub fn atom_coords(&self) -> Vec<Vec<f64>> {
        match self {
            Self::Poisson { grid, .. } => grid.atoms().iter().map(GridAtom::coords).collect(),
            Self::Binomial { grid, .. } => grid.atoms().iter().map(GridAtom::coords).collect(),
        }
    }

    pub fn fit(&self, data: &[CountObservation], em: &EmConfig) -> Result<(EstimateSet, EmReport)> {
        match self {
            Self::Poisson { grid, eta } => estimate_all(&PoissonStratumKernel, data, grid, eta, em),
            Self::Binomial { kernel, grid, eta } => estimate_all(kernel, data, grid, eta, em),
        }
    }
}

/// Estimates from one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub empty_strata: usize,
    pub naive: Option<f64>,
    pub naive_nonempty: Option<f64>,
    pub extreme_collapse: Option<f64>,
    pub gmle: f64,
    pub final_loglik: f64,
}

/// Mean and sample standard deviation over the replications where an
/// estimator is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub undefined: usize,
}

impl EstimatorSummary {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => undefined += 1,
            }
        }
        let n = defined.len() as f64;
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / n);
        let sd = mean
            .filter(|_| defined.len() > 1)
            .map(|m| (defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt());
        Self {
            mean,
            sd,
            undefined,
        }
    }

    /// `mean, (sd)`, as in the campaign tables.
    pub fn cell(&self) -> String {
        let mut s = match (self.mean, self.sd) {
            (Some(m), Some(sd)) => format!("{m:.3}, ({sd:.3})"),
            (Some(m), None) => format!("{m:.3}, (-)"),
            _ => "undefined".to_string(),
        };
        if self.undefined > 0 && self.mean.is_some() {
            let _ = write!(s, " [{} undef]", self.undefined);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub seed: u64,
    pub replications: usize,
    pub true_eta: f64,
    pub mean_empty_strata: f64,
    pub naive: EstimatorSummary,
    pub naive_nonempty: EstimatorSummary,
    pub extreme_collapse: EstimatorSummary,
    pub gmle: EstimatorSummary,
    pub outcomes: Vec<ReplicationOutcome>,
}

impl SimResult {
    fn aggregate(seed: u64, true_eta: f64, outcomes: Vec<ReplicationOutcome>) -> Self {
        let reps = outcomes.len();
        let summary = |f: fn(&ReplicationOutcome) -> Option<f64>| {
            EstimatorSummary::from_values(outcomes.iter().map(f))
        };
        Self {
            seed,
            replications: reps,
            true_eta,
            mean_empty_strata: outcomes.iter().map(|o| o.empty_strata as f64).sum::<f64>()
                / reps as f64,
            naive: summary(|o| o.naive),
            naive_nonempty: summary(|o| o.naive_nonempty),
            extreme_collapse: summary(|o| o.extreme_collapse),
            gmle: summary(|o| Some(o.gmle)),
            outcomes,
        }
    }
}

fn outcome(index: usize, fit: (EstimateSet, EmReport)) -> ReplicationOutcome {
    let (set, report) = fit;
    ReplicationOutcome {
        index,
        empty_strata: set.empty_strata,
        naive: set.naive.value(),
        naive_nonempty: set.naive_nonempty.value(),
        extreme_collapse: set.extreme_collapse.value(),
        gmle: set.gmle,
        final_loglik: report.final_loglik(),
    }
}

fn collect_replications(
    replications: usize,
    run: impl Fn(usize) -> Result<ReplicationOutcome> + Sync + Send,
) -> Result<Vec<ReplicationOutcome>> {
    if replications == 0 {
        return Err(Error::Config("replications must be >= 1".into()));
    }
    par::map_indices(replications, run)
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Replication {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Draws a fresh population and sample per replication and fits every estimator.
pub fn run_campaign(
    spec: &PopulationSpec,
    grid: &GridConfig,
    em: &EmConfig,
    replications: usize,
    seed: u64,
) -> Result<SimResult> {
    spec.validate()?;
    let fitter = Fitter::new(&spec.model, grid)?;
    let outcomes = collect_replications(replications, |r| {
        let mut rng = replication_rng(seed, r as u64);
        let population = draw_population(spec, &mut rng);
        let data = draw_observations(&population, &spec.model, &mut rng)?;
        Ok(outcome(r, fitter.fit(&data, em)?))
    })?;
    Ok(SimResult::aggregate(seed, true_eta(spec), outcomes))
}

/// Fixed population with its full sample, drawn from the reserved stream of `seed`.
pub fn draw_fixed_sample(
    spec: &PopulationSpec,
    seed: u64,
) -> Result<(Vec<StratumTruth>, Vec<CountObservation>)> {
    spec.validate()?;
    let mut rng = replication_rng(seed, POPULATION_STREAM);
    let population = draw_population(spec, &mut rng);
    let data = draw_observations(&population, &spec.model, &mut rng)?;
    Ok((population, data))
}

/// Repeatedly thins one full sample at rate `gamma` and fits every estimator.
/// `true_eta` is the finite-population target, e.g. the mean `p` of the strata.
#[allow(clippy::too_many_arguments)]
pub fn run_thinning_campaign(
    full: &[CountObservation],
    model: &ModelSpec,
    true_eta: f64,
    gamma: f64,
    grid: &GridConfig,
    em: &EmConfig,
    replications: usize,
    seed: u64,
) -> Result<SimResult> {
    let fitter = Fitter::new(model, grid)?;
    let outcomes = collect_replications(replications, |r| {
        let mut rng = replication_rng(seed, r as u64);
        let data = thin_observations(full, gamma, &mut rng)?;
        Ok(outcome(r, fitter.fit(&data, em)?))
    })?;
    Ok(SimResult::aggregate(seed, true_eta, outcomes))
}

/// One row of a campaign table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignRow {
    pub label: String,
    pub population: PopulationSpec,
    /// When set, a single population and full sample are drawn once and every
    /// replication thins it at this rate.
    #[serde(default)]
    pub retain_prob: Option<f64>,
}

/// A table of campaigns sharing seed, replication count and fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub name: String,
    pub seed: u64,
    pub replications: usize,
    /// Points per grid axis when `grid` is absent.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub em: EmConfig,
    pub rows: Vec<CampaignRow>,
}

fn default_grid_points() -> usize {
    PROTOCOL_GRID_POINTS
}

impl SimulationConfig {
    pub fn grid_for(&self, model: &ModelSpec) -> GridConfig {
        self.grid
            .clone()
            .unwrap_or_else(|| GridConfig::default_for(model, self.grid_points))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub result: SimResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTable {
    pub name: String,
    pub seed: u64,
    pub replications: usize,
    pub rows: Vec<RowResult>,
}

/// Runs every row of `config`; each row uses the table seed.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimTable> {
    if config.rows.is_empty() {
        return Err(Error::Config("simulation config has no rows".into()));
    }
    let rows = config
        .rows
        .iter()
        .map(|row| {
            let grid = config.grid_for(&row.population.model);
            let result = match row.retain_prob {
                None => run_campaign(
                    &row.population,
                    &grid,
                    &config.em,
                    config.replications,
                    config.seed,
                )?,
                Some(gamma) => {
                    let (population, full) = draw_fixed_sample(&row.population, config.seed)?;
                    let eta = population.iter().map(|t| t.p).sum::<f64>() / population.len() as f64;
                    run_thinning_campaign(
                        &full,
                        &row.population.model,
                        eta,
                        gamma,
                        &grid,
                        &config.em,
                        config.replications,
                        config.seed,
                    )?
                }
            };
            Ok(RowResult {
                label: row.label.clone(),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimTable {
        name: config.name.clone(),
        seed: config.seed,
        replications: config.replications,
        rows,
    })
}

impl SimTable {
    /// Aligned plain-text table with `mean, (sd)` cells.
    pub fn render(&self) -> String {
        let header = [
            "row",
            "true eta",
            "naive",
            "naive (K>0)",
            "extreme collapse",
            "GMLE",
        ];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for row in &self.rows {
            let r = &row.result;
            lines.push(vec![
                row.label.clone(),
                format!("{:.3}", r.true_eta),
                r.naive.cell(),
                r.naive_nonempty.cell(),
                r.extreme_collapse.cell(),
                r.gmle.cell(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = format!(
            "{} (seed {}, {} replications)\n",
            self.name, self.seed, self.replications
        );
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("-+-"));
                out.push('\n');
            }
        }
        out
    }
}

/// Bounded test functions on grid coordinates for the convergence probe.
fn probe_functions(model: &ModelSpec, coords: &[f64]) -> [f64; 5] {
    let (a, b) = (coords[0], coords[1]);
    let eta = match model {
        ModelSpec::PoissonSizes => {
            let lambda = a + b;
            if lambda > 0.0 {
                a / (lambda + PROBE_EPSILON)
            } else {
                0.0
            }
        }
        ModelSpec::BinomialSizes { .. } => b,
    };
    [a, b, a * a, b * b, eta]
}

/// Names of the probe test functions, in evaluation order.
pub const PROBE_FUNCTIONS: [&str; 5] = [
    "mean_1",
    "mean_2",
    "second_moment_1",
    "second_moment_2",
    "eta_smoothed",
];

/// Discrepancies between the fitted and empirical mixing distributions at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub n: usize,
    /// Largest discrepancy over the whole battery.
    pub discrepancy: f64,
    /// Largest discrepancy over the coordinate means.
    pub mean_discrepancy: f64,
    /// Per-function discrepancies, ordered as [`PROBE_FUNCTIONS`].
    pub functions: Vec<f64>,
}

fn truth_coords(model: &ModelSpec, t: &StratumTruth) -> Result<Vec<f64>> {
    Ok(match model {
        ModelSpec::PoissonSizes => PoissonStratumParam::from_lambda_p(t.size, t.p)?.coords(),
        ModelSpec::BinomialSizes { .. } => BinomialStratumParam::new(t.size, t.p)?.coords(),
    })
}

/// For each `n`, takes `θ_i = thetas[i mod len]` for `i < n`, draws one
/// observation per stratum, fits `Ĝ^n`, and compares `E_{Ĝ^n} f` with the
/// empirical `E_{G^n} f` over the test battery.
pub fn weak_convergence_probe(
    thetas: &[StratumTruth],
    model: &ModelSpec,
    grid: &GridConfig,
    em: &EmConfig,
    n_schedule: &[usize],
    seed: u64,
) -> Result<Vec<ProbePoint>> {
    if thetas.is_empty() {
        return Err(Error::EmptyData);
    }
    let fitter = Fitter::new(model, grid)?;
    let atom_values: Vec<[f64; 5]> = fitter
        .atom_coords()
        .iter()
        .map(|c| probe_functions(model, c))
        .collect();
    n_schedule
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Config("probe sizes must be >= 1".into()));
            }
            let array: Vec<StratumTruth> = (0..n).map(|i| thetas[i % thetas.len()]).collect();
            let mut empirical = [0.0; 5];
            for t in &array {
                let values = probe_functions(model, &truth_coords(model, t)?);
                for (e, v) in empirical.iter_mut().zip(values) {
                    *e += v / n as f64;
                }
            }
            let mut rng = replication_rng(seed, n as u64);
            let data = draw_observations(&array, model, &mut rng)?;
            let (_, report) = fitter.fit(&data, em)?;
            let mut fitted = [0.0; 5];
            for (w, values) in report.weights.weights().iter().zip(&atom_values) {
                for (f, v) in fitted.iter_mut().zip(values) {
                    *f += w * v;
                }
            }
            let functions: Vec<f64> = fitted
                .iter()
                .zip(&empirical)
                .map(|(f, e)| (f - e).abs())
                .collect();
            Ok(ProbePoint {
                n,
                discrepancy: functions.iter().copied().fold(0.0, f64::max),
                mean_discrepancy: functions[0].max(functions[1]),
                functions,
            })
        })
        .collect()
}

/// Medians of the probe over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub n: usize,
    pub median_discrepancy: f64,
    pub median_mean_discrepancy: f64,
    pub seeds: Vec<u64>,
    pub points: Vec<ProbePoint>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs [`weak_convergence_probe`] once per seed (seeds in parallel).
pub fn probe_over_seeds(
    thetas: &[StratumTruth],
    model: &ModelSpec,
    grid: &GridConfig,
    em: &EmConfig,
    n_schedule: &[usize],
    seeds: &[u64],
) -> Result<Vec<ProbeSummary>> {
    if seeds.is_empty() {
        return Err(Error::Config("probe needs at least one seed".into()));
    }
    let runs = par::map_indices(seeds.len(), |s| {
        weak_convergence_probe(thetas, model, grid, em, n_schedule, seeds[s])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(n_schedule
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let points: Vec<ProbePoint> = runs.iter().map(|r| r[i].clone()).collect();
            let mut d: Vec<f64> = points.iter().map(|p| p.discrepancy).collect();
            let mut m: Vec<f64> = points.iter().map(|p| p.mean_discrepancy).collect();
            ProbeSummary {
                n,
                median_discrepancy: median(&mut d),
                median_mean_discrepancy: median(&mut m),
                seeds: seeds.to_vec(),
                points,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(model: ModelSpec, a: (f64, f64), b: (f64, f64)) -> PopulationSpec {
        PopulationSpec {
            model,
            groups: vec![
                GroupSpec {
                    n_strata: 500,
                    size: AxisLaw::Fixed(a.0),
                    p: AxisLaw::Fixed(a.1),
                },
                GroupSpec {
                    n_strata: 500,
                    size: AxisLaw::Fixed(b.0),
                    p: AxisLaw::Fixed(b.1),
                },
            ],
        }
    }

    #[test]
    fn true_eta_examples() {
        let s = two_point(ModelSpec::PoissonSizes, (2.0, 0.4), (1.0, 0.6));
        assert!((true_eta(&s) - 0.5).abs() < 1e-15);
        let s = two_point(ModelSpec::PoissonSizes, (2.0, 0.2), (1.0, 0.8));
        assert!((true_eta(&s) - 0.5).abs() < 1e-15);
        let single = PopulationSpec {
            model: ModelSpec::PoissonSizes,
            groups: vec![GroupSpec {
                n_strata: 3,
                size: AxisLaw::Fixed(1.0),
                p: AxisLaw::Fixed(0.3),
            }],
        };
        assert_eq!(true_eta(&single), 0.3);
    }

    #[test]
    fn population_draws() {
        let mut rng = replication_rng(1, 0);
        let s = two_point(ModelSpec::PoissonSizes, (2.0, 0.4), (1.0, 0.6));
        let pop = draw_population(&s, &mut rng);
        assert_eq!(pop.len(), 1000);
        assert!(pop[..500]
            .iter()
            .all(|t| *t == StratumTruth { size: 2.0, p: 0.4 }));

        let degenerate = AxisLaw::Uniform { lo: 0.5, hi: 0.5 };
        assert!((0..100).all(|_| degenerate.sample(&mut rng) == 0.5));

        let law = AxisLaw::Uniform { lo: 0.5, hi: 2.0 };
        let n = 100_000;
        let mean = (0..n).map(|_| law.sample(&mut rng)).sum::<f64>() / n as f64;
        let sd = 1.5 / 12f64.sqrt();
        assert!((mean - 1.25).abs() <= 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn observation_draws() {
        let mut rng = replication_rng(2, 0);
        let zero = vec![StratumTruth { size: 0.0, p: 0.5 }; 50];
        let data = draw_observations(&zero, &ModelSpec::PoissonSizes, &mut rng).unwrap();
        assert!(data.iter().all(|o| *o == CountObservation { x: 0, k: 0 }));

        let full = vec![StratumTruth { size: 1.0, p: 1.0 }; 50];
        let data =
            draw_observations(&full, &ModelSpec::BinomialSizes { kappa: 4 }, &mut rng).unwrap();
        assert!(data.iter().all(|o| *o == CountObservation { x: 4, k: 4 }));

        let n = 100_000;
        let two = vec![StratumTruth { size: 2.0, p: 0.3 }; n];
        let data = draw_observations(&two, &ModelSpec::PoissonSizes, &mut rng).unwrap();
        let mean = data.iter().map(|o| f64::from(o.k)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() <= 3.0 * 2f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn thinning_scales_poisson_sizes() {
        let mut rng = replication_rng(3, 0);
        let n = 50_000;
        let pop = vec![StratumTruth { size: 4.0, p: 0.4 }; n];
        let data = draw_observations(&pop, &ModelSpec::PoissonSizes, &mut rng).unwrap();
        let thinned = thin_observations(&data, 0.25, &mut rng).unwrap();
        let mean = thinned.iter().map(|o| f64::from(o.k)).sum::<f64>() / n as f64;
        // thinned sizes are Poisson(1)
        assert!((mean - 1.0).abs() <= 3.0 / (n as f64).sqrt());
        assert!(thinned
            .iter()
            .zip(&data)
            .all(|(t, d)| t.x <= d.x && t.k <= d.k));
        assert!(thin_observations(&data, 1.5, &mut rng).is_err());
        assert_eq!(thin_observations(&data, 1.0, &mut rng).unwrap(), data);
    }

    #[test]
    fn spec_validation_and_json() {
        let json = r#"{"model":{"kind":"binomial_sizes","kappa":4},
            "groups":[{"n_strata":2,"size":{"uniform":{"lo":0.1,"hi":0.6}},"p":{"fixed":0.3}}]}"#;
        let spec: PopulationSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.model, ModelSpec::BinomialSizes { kappa: 4 });
        let bad = r#"{"model":{"kind":"gamma_sizes"},"groups":[]}"#;
        assert!(serde_json::from_str::<PopulationSpec>(bad).is_err());

        let mut inverted = spec.clone();
        inverted.groups[0].size = AxisLaw::Uniform { lo: 0.6, hi: 0.1 };
        assert!(inverted.validate().is_err());
        let empty = PopulationSpec {
            model: ModelSpec::PoissonSizes,
            groups: vec![],
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = GridConfig::parse("12", &ModelSpec::PoissonSizes).unwrap();
        assert_eq!(g, GridConfig::square(XI_FLOOR, PROTOCOL_XI_MAX, 12));
        let g = GridConfig::parse("0:1:5, 0.1:0.9:3", &ModelSpec::PoissonSizes).unwrap();
        assert_eq!(
            g.axes,
            vec![AxisSpec::new(0.0, 1.0, 5), AxisSpec::new(0.1, 0.9, 3)]
        );
        assert!(GridConfig::parse("0:1", &ModelSpec::PoissonSizes).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = EstimatorSummary::from_values([Some(1.0), None, Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.sd, Some(2f64.sqrt()));
        assert_eq!(s.undefined, 1);
        assert_eq!(s.cell(), "2.000, (1.414) [1 undef]");
        let none = EstimatorSummary::from_values([None, None]);
        assert_eq!(none.cell(), "undefined");
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_campaign_is_deterministic_and_sane() {
        let spec = two_point(
            ModelSpec::BinomialSizes { kappa: 3 },
            (1.0, 0.3),
            (1.0, 0.7),
        );
        let grid = GridConfig::default_for(&spec.model, 8);
        let em = EmConfig::iterations(200);
        let a = run_campaign(&spec, &grid, &em, 3, 11).unwrap();
        let b = run_campaign(&spec, &grid, &em, 3, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.replications, 3);
        assert_eq!(a.naive.undefined, 0);
        assert!((a.naive.mean.unwrap() - 0.5).abs() < 0.05);
        assert!((a.gmle.mean.unwrap() - 0.5).abs() < 0.05);
        assert!(run_campaign(&spec, &grid, &em, 0, 11).is_err());
    }

    #[test]
    fn table_rendering() {
        let config = SimulationConfig {
            name: "smoke".into(),
            seed: 5,
            replications: 2,
            grid_points: 6,
            grid: None,
            em: EmConfig::iterations(50),
            rows: vec![CampaignRow {
                label: "a".into(),
                population: two_point(ModelSpec::PoissonSizes, (2.0, 0.4), (1.0, 0.6)),
                retain_prob: None,
            }],
        };
        let table = run_simulation(&config).unwrap();
        let text = table.render();
        assert!(text.starts_with("smoke (seed 5, 2 replications)\n"));
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("undefined"));
    }

    #[test]
    fn probe_on_point_mass() {
        let thetas = [StratumTruth { size: 2.0, p: 0.5 }];
        let grid = GridConfig::square(0.0, 2.0, 11);
        let points = weak_convergence_probe(
            &thetas,
            &ModelSpec::PoissonSizes,
            &grid,
            &EmConfig::default(),
            &[1600],
            9,
        )
        .unwrap();
        assert_eq!(points[0].functions.len(), PROBE_FUNCTIONS.len());
        assert!(points[0].mean_discrepancy <= 0.05, "{:?}", points[0]);
    }
}
