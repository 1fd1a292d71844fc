//! Parametric kernels `f(y | θ)` for the stratified sampling models.
//!
//! * Post-stratification: `K ~ Poisson(λ)`, `X | K ~ Bin(K, p)`, evaluated in the
//!   equivalent two-Poisson form `X ~ Poisson(ξ1)`, `K - X ~ Poisson(ξ2)` with
//!   `ξ1 = pλ`, `ξ2 = (1 - p)λ`.
//! * Stratified sampling with non-response: `K ~ Bin(κ, π)`, `X | K ~ Bin(K, p)`.
//! * Repeated interview attempts: the attempt count is truncated-geometric in
//!   `π` with at most `κ0` attempts.
//! * Scalar exponential families (unit-variance normal, Poisson, Bernoulli) in
//!   the mean parametrisation.
//!
//! Everything is computed in log space; `0^0 = 1` so boundary atoms are legal.

use std::fmt::Debug;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `x * ln(y)` with the convention `0 * ln(0) = 0`.
#[inline]
pub(crate) fn xlny(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[inline]
fn ln_factorial(k: u32) -> f64 {
    if k < 2 {
        0.0
    } else {
        ln_gamma(f64::from(k) + 1.0)
    }
}

#[inline]
fn ln_choose(n: u32, k: u32) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Log Poisson pmf with `Pois(0; 0) = 1`.
#[inline]
pub fn ln_poisson_pmf(w: u32, rate: f64) -> f64 {
    if rate == 0.0 {
        return if w == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    f64::from(w) * rate.ln() - rate - ln_factorial(w)
}

/// Log binomial pmf `C(n, x) p^x (1-p)^(n-x)`.
#[inline]
pub fn ln_binomial_pmf(x: u32, n: u32, p: f64) -> f64 {
    debug_assert!(x <= n);
    ln_choose(n, x) + xlny(f64::from(x), p) + xlny(f64::from(n - x), 1.0 - p)
}

/// Stratum outcome: `x` successes among `k` responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CountObservation {
    pub x: u32,
    pub k: u32,
}

impl CountObservation {
    pub fn new(x: u32, k: u32) -> Result<Self> {
        let obs = Self { x, k };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x > self.k {
            return Err(Error::InvalidParameter(format!(
                "observation has x = {} > k = {}",
                self.x, self.k
            )));
        }
        Ok(())
    }

    /// Failures `k - x`.
    pub fn failures(&self) -> u32 {
        self.k - self.x
    }
}

/// Two-Poisson rates `(ξ1, ξ2)` for the post-stratification model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonStratumParam {
    pub xi1: f64,
    pub xi2: f64,
}

impl PoissonStratumParam {
    pub fn new(xi1: f64, xi2: f64) -> Result<Self> {
        if !(xi1.is_finite() && xi2.is_finite() && xi1 >= 0.0 && xi2 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Poisson rates must be finite and nonnegative, got ({xi1}, {xi2})"
            )));
        }
        Ok(Self { xi1, xi2 })
    }

    /// From the natural `(λ, p)` parametrisation.
    pub fn from_lambda_p(lambda: f64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("p = {p} outside [0, 1]")));
        }
        Self::new(p * lambda, (1.0 - p) * lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.xi1 + self.xi2
    }

    /// `p = ξ1 / (ξ1 + ξ2)`; `None` at the origin.
    pub fn p(&self) -> Option<f64> {
        let lambda = self.lambda();
        (lambda > 0.0).then(|| self.xi1 / lambda)
    }

    /// `ξ1 / (ξ1 + ξ2 + ε)` on `ξ1 + ξ2 > 0`, zero at the origin.
    pub fn proportion_smoothed(&self, eps: f64) -> f64 {
        let lambda = self.lambda();
        if lambda > 0.0 {
            self.xi1 / (lambda + eps)
        } else {
            0.0
        }
    }
}

/// `(π, p)`: response probability and trait proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialStratumParam {
    pub pi: f64,
    pub p: f64,
}

impl BinomialStratumParam {
    pub fn new(pi: f64, p: f64) -> Result<Self> {
        if !((0.0..=1.0).contains(&pi) && (0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidParameter(format!(
                "(pi, p) = ({pi}, {p}) outside [0, 1]^2"
            )));
        }
        Ok(Self { pi, p })
    }
}

/// Result of up to `κ0` interview attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterviewOutcome {
    /// Answer `z` obtained on attempt `kappa` (1-based).
    Answered { z: bool, kappa: u32 },
    /// No response in `κ0` attempts.
    Null,
}

/// Scalar observation for exponential-family kernels. Hashing and equality
/// are bitwise so identical values share a likelihood row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalarObservation(pub f64);

impl PartialEq for ScalarObservation {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for ScalarObservation {}

impl Hash for ScalarObservation {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

/// One-parameter exponential families in mean parametrisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpFamily {
    NormalUnitVariance,
    Poisson,
    Bernoulli,
}

impl ExpFamily {
    fn name(self) -> &'static str {
        match self {
            Self::NormalUnitVariance => "normal",
            Self::Poisson => "poisson",
            Self::Bernoulli => "bernoulli",
        }
    }
}

/// A likelihood kernel `f(obs | atom)`.
///
/// Implementations are pure; the likelihood-matrix builder calls them from
/// several threads at once.
pub trait Kernel: Sync {
    type Obs: Clone + Eq + Hash + Debug + Send + Sync;
    type Atom: Copy + Debug + Send + Sync;

    /// `ln f(obs | atom)`; `-inf` for impossible outcomes.
    fn ln_density(&self, obs: &Self::Obs, atom: &Self::Atom) -> Result<f64>;

    fn density(&self, obs: &Self::Obs, atom: &Self::Atom) -> Result<f64> {
        Ok(self.ln_density(obs, atom)?.exp())
    }

    fn name(&self) -> &'static str;

    /// Number of coordinates in a parameter atom.
    fn param_dim(&self) -> usize;
}

/// Kernels over `(x, k)` count outcomes.
pub trait CountKernel: Kernel<Obs = CountObservation> {
    /// The full outcome space when it is finite.
    fn finite_sample_space(&self) -> Option<Vec<CountObservation>>;
}

/// Post-stratification kernel `Pois(x; ξ1) · Pois(k - x; ξ2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoissonStratumKernel;

impl Kernel for PoissonStratumKernel {
    type Obs = CountObservation;
    type Atom = PoissonStratumParam;

    fn ln_density(&self, obs: &CountObservation, atom: &PoissonStratumParam) -> Result<f64> {
        obs.validate()?;
        Ok(ln_poisson_pmf(obs.x, atom.xi1) + ln_poisson_pmf(obs.failures(), atom.xi2))
    }

    fn name(&self) -> &'static str {
        "poisson_sizes"
    }

    fn param_dim(&self) -> usize {
        2
    }
}

impl CountKernel for PoissonStratumKernel {
    fn finite_sample_space(&self) -> Option<Vec<CountObservation>> {
        None
    }
}

/// Non-response kernel `Bin(k; κ, π) · Bin(x; k, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialStratumKernel {
    pub kappa: u32,
}

impl BinomialStratumKernel {
    pub fn new(kappa: u32) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::InvalidParameter("kappa must be positive".into()));
        }
        Ok(Self { kappa })
    }
}

impl Kernel for BinomialStratumKernel {
    type Obs = CountObservation;
    type Atom = BinomialStratumParam;

    fn ln_density(&self, obs: &CountObservation, atom: &BinomialStratumParam) -> Result<f64> {
        obs.validate()?;
        if obs.k > self.kappa {
            return Err(Error::ObservationExceedsDesign {
                k: obs.k,
                kappa: self.kappa,
            });
        }
        Ok(ln_binomial_pmf(obs.k, self.kappa, atom.pi) + ln_binomial_pmf(obs.x, obs.k, atom.p))
    }

    fn name(&self) -> &'static str {
        "binomial_sizes"
    }

    fn param_dim(&self) -> usize {
        2
    }
}

impl CountKernel for BinomialStratumKernel {
    fn finite_sample_space(&self) -> Option<Vec<CountObservation>> {
        let mut space = Vec::new();
        for k in 0..=self.kappa {
            for x in 0..=k {
                space.push(CountObservation { x, k });
            }
        }
        Some(space)
    }
}

/// Interview-attempt kernel with at most `κ0` attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGeometricKernel {
    pub kappa0: u32,
}

impl TruncatedGeometricKernel {
    pub fn new(kappa0: u32) -> Result<Self> {
        if kappa0 == 0 {
            return Err(Error::InvalidParameter("kappa0 must be positive".into()));
        }
        Ok(Self { kappa0 })
    }

    /// `P_θ(response within κ0 attempts) = 1 - (1 - π)^κ0`.
    pub fn response_probability(&self, pi: f64) -> f64 {
        1.0 - (1.0 - pi).powi(self.kappa0 as i32)
    }
}

impl Kernel for TruncatedGeometricKernel {
    type Obs = InterviewOutcome;
    type Atom = BinomialStratumParam;

    fn ln_density(&self, obs: &InterviewOutcome, atom: &BinomialStratumParam) -> Result<f64> {
        match *obs {
            InterviewOutcome::Null => Ok(xlny(f64::from(self.kappa0), 1.0 - atom.pi)),
            InterviewOutcome::Answered { z, kappa } => {
                if kappa == 0 || kappa > self.kappa0 {
                    return Err(Error::InvalidParameter(format!(
                        "answer on attempt {kappa} outside 1..={}",
                        self.kappa0
                    )));
                }
                let answer = if z { atom.p.ln() } else { (1.0 - atom.p).ln() };
                Ok(xlny(f64::from(kappa - 1), 1.0 - atom.pi) + atom.pi.ln() + answer)
            }
        }
    }

    fn name(&self) -> &'static str {
        "truncated_geometric"
    }

    fn param_dim(&self) -> usize {
        2
    }
}

/// Scalar exponential-family kernel, mean-parametrised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpFamKernel {
    pub family: ExpFamily,
}

impl Kernel for ExpFamKernel {
    type Obs = ScalarObservation;
    type Atom = f64;

    fn ln_density(&self, obs: &ScalarObservation, atom: &f64) -> Result<f64> {
        ln_expfam(self.family, obs.0, *atom)
    }

    fn name(&self) -> &'static str {
        self.family.name()
    }

    fn param_dim(&self) -> usize {
        1
    }
}

fn ln_expfam(family: ExpFamily, y: f64, mean: f64) -> Result<f64> {
    let domain = || Error::Domain {
        family: family.name(),
        atom: mean,
    };
    match family {
        ExpFamily::NormalUnitVariance => {
            if !mean.is_finite() {
                return Err(domain());
            }
            let d = y - mean;
            Ok(-0.5 * d * d - 0.5 * (2.0 * std::f64::consts::PI).ln())
        }
        ExpFamily::Poisson => {
            if !(mean.is_finite() && mean > 0.0) {
                return Err(domain());
            }
            let w = count_value(y)?;
            Ok(ln_poisson_pmf(w, mean))
        }
        ExpFamily::Bernoulli => {
            if !(0.0..=1.0).contains(&mean) {
                return Err(domain());
            }
            match count_value(y)? {
                0 => Ok(xlny(1.0, 1.0 - mean)),
                1 => Ok(xlny(1.0, mean)),
                _ => Err(Error::InvalidParameter(format!(
                    "Bernoulli observation {y} not in {{0, 1}}"
                ))),
            }
        }
    }
}

fn count_value(y: f64) -> Result<u32> {
    if y >= 0.0 && y.fract() == 0.0 && y <= f64::from(u32::MAX) {
        Ok(y as u32)
    } else {
        Err(Error::InvalidParameter(format!(
            "{y} is not a nonnegative integer count"
        )))
    }
}

/// `Pois(x; ξ1) · Pois(k - x; ξ2)`.
pub fn poisson_stratum_kernel(obs: CountObservation, param: PoissonStratumParam) -> Result<f64> {
    PoissonStratumKernel.density(&obs, &param)
}

/// `C(κ, k) π^k (1-π)^(κ-k) · C(k, x) p^x (1-p)^(k-x)`.
pub fn binomial_stratum_kernel(
    obs: CountObservation,
    param: BinomialStratumParam,
    kappa: u32,
) -> Result<f64> {
    BinomialStratumKernel::new(kappa)?.density(&obs, &param)
}

/// Truncated-geometric interview kernel.
pub fn truncated_geometric_kernel(
    obs: InterviewOutcome,
    param: BinomialStratumParam,
    kappa0: u32,
) -> Result<f64> {
    TruncatedGeometricKernel::new(kappa0)?.density(&obs, &param)
}

/// Exponential-family density/pmf at mean parameter `atom`.
pub fn expfam_kernel(family: ExpFamily, obs: ScalarObservation, atom: f64) -> Result<f64> {
    Ok(ln_expfam(family, obs.0, atom)?.exp())
}

/// Parameter types carrying a proportion `p`.
pub trait ProportionParam {
    /// The target functional `η(θ) = p`.
    fn eta_proportion(&self) -> f64;
}

impl ProportionParam for BinomialStratumParam {
    fn eta_proportion(&self) -> f64 {
        self.p
    }
}

impl ProportionParam for PoissonStratumParam {
    /// `ξ1 / (ξ1 + ξ2)`, and 0 at the origin.
    fn eta_proportion(&self) -> f64 {
        self.proportion_smoothed(0.0)
    }
}

/// `η(θ) = p` for either stratum parametrisation.
pub fn eta_proportion<P: ProportionParam>(param: &P) -> f64 {
    param.eta_proportion()
}
