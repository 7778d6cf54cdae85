//! Network primitives for the parallel game: one safe path with fixed
//! latency, `M` stochastic paths whose latency carries over between slots,
//! per-user costs and the social cost of an allocation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

/// Per-slot arrival distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArrivalDist<S> {
    UniformInteger,
    /// Normal(mean, std) rounded to the nearest integer and truncated to `[min, max]`.
    TruncatedNormal { std: S },
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalModel<S> {
    pub min: u32,
    pub max: u32,
    pub mean: S,
    pub dist: ArrivalDist<S>,
}

impl<S: Scalar> ArrivalModel<S> {
    pub fn constant(n: u32) -> Self {
        Self {
            min: n,
            max: n,
            mean: S::from_count(n),
            dist: ArrivalDist::Constant,
        }
    }

    pub fn uniform(min: u32, max: u32) -> Self {
        Self {
            min,
            max,
            mean: S::lit((min + max) as f64 / 2.0),
            dist: ArrivalDist::UniformInteger,
        }
    }

    pub fn truncated_normal(mean: S, std: S, min: u32, max: u32) -> Self {
        Self {
            min,
            max,
            mean,
            dist: ArrivalDist::TruncatedNormal { std },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mean = self.mean.as_f64();
        if self.min > self.max {
            return Err(Error::config("arrivals.min", "exceeds arrivals.max"));
        }
        if !(mean >= self.min as f64 && mean <= self.max as f64) {
            return Err(Error::config("arrivals.mean", "outside [min, max]"));
        }
        match &self.dist {
            ArrivalDist::Constant if self.min != self.max => Err(Error::config(
                "arrivals.dist",
                "constant arrivals need min == max",
            )),
            ArrivalDist::TruncatedNormal { std } if !(std.as_f64() > 0.0) => {
                Err(Error::config("arrivals.dist.std", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Probability mass over every count in `[min, max]` with positive mass.
    pub fn pmf(&self) -> Vec<(u32, f64)> {
        match &self.dist {
            ArrivalDist::Constant => vec![(self.min, 1.0)],
            ArrivalDist::UniformInteger => {
                let k = (self.max - self.min + 1) as f64;
                (self.min..=self.max).map(|n| (n, 1.0 / k)).collect()
            }
            ArrivalDist::TruncatedNormal { std } => {
                let normal = Normal::new(self.mean.as_f64(), std.as_f64())
                    .expect("validated normal parameters");
                let mut out: Vec<(u32, f64)> = (self.min..=self.max)
                    .map(|n| {
                        let lo = if n == self.min { f64::NEG_INFINITY } else { n as f64 - 0.5 };
                        let hi = if n == self.max { f64::INFINITY } else { n as f64 + 0.5 };
                        (n, normal.cdf(hi) - normal.cdf(lo))
                    })
                    .filter(|&(_, p)| p > 1e-12)
                    .collect();
                let z: f64 = out.iter().map(|p| p.1).sum();
                for p in &mut out {
                    p.1 /= z;
                }
                out
            }
        }
    }

    pub fn expected(&self) -> f64 {
        self.pmf().iter().map(|&(n, p)| n as f64 * p).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match &self.dist {
            ArrivalDist::Constant => self.min,
            ArrivalDist::UniformInteger => rng.gen_range(self.min..=self.max),
            ArrivalDist::TruncatedNormal { .. } => {
                let u: f64 = rng.gen();
                let pmf = self.pmf();
                let mut acc = 0.0;
                for &(n, p) in &pmf {
                    acc += p;
                    if u < acc {
                        return n;
                    }
                }
                pmf.last().map(|p| p.0).unwrap_or(self.max)
            }
        }
    }
}

/// Distribution users hold over the long-run hazard frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Prior<S> {
    Point { value: S },
    Uniform { lo: S, hi: S },
    Beta { a: S, b: S },
}

impl<S: Scalar> Prior<S> {
    pub fn mean(&self) -> S {
        match self {
            Prior::Point { value } => *value,
            Prior::Uniform { lo, hi } => (*lo + *hi) / S::lit(2.0),
            Prior::Beta { a, b } => *a / (*a + *b),
        }
    }

    /// Mass strictly below `x`.
    pub fn cdf(&self, x: S) -> S {
        match self {
            Prior::Point { value } => {
                if *value < x {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Prior::Uniform { lo, hi } => ((x - *lo) / (*hi - *lo)).max(S::zero()).min(S::one()),
            Prior::Beta { a, b } => {
                let d = Beta::new(a.as_f64(), b.as_f64()).expect("validated beta prior");
                S::lit(d.cdf(x.as_f64().clamp(0.0, 1.0)))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: S| v > S::zero() && v < S::one();
        let ok = match self {
            Prior::Point { value } => inside(*value),
            Prior::Uniform { lo, hi } => inside(*lo) && inside(*hi) && lo < hi,
            Prior::Beta { a, b } => *a > S::one() && *b > S::one(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "hazard.prior",
                "support must sit strictly inside (0, 1)",
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardModel<S> {
    pub alpha_high: S,
    pub alpha_low: S,
    /// True long-run hazard frequency. Only the simulator reads this.
    pub xbar_true: S,
    pub prior: Prior<S>,
    #[serde(default)]
    pub transition: Option<crate::belief::TransitionMatrix<S>>,
}

impl<S: Scalar> HazardModel<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_high >= S::one()) {
            return Err(Error::config("hazard.alpha_high", "must be >= 1"));
        }
        if !(self.alpha_low >= S::zero() && self.alpha_low < S::one()) {
            return Err(Error::config("hazard.alpha_low", "must lie in [0, 1)"));
        }
        if !(self.xbar_true >= S::zero() && self.xbar_true <= S::one()) {
            return Err(Error::config("hazard.xbar_true", "must be a probability"));
        }
        if let Some(tm) = &self.transition {
            tm.validate()?;
        }
        self.prior.validate()
    }
}

/// A count-indexed detection probability curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QCurve<S> {
    /// Standard normal CDF evaluated at `(n - mean) / sqrt(variance)`.
    GaussianCdf { mean: S, variance: S },
    /// `values[n - 1]`, holding the last entry for larger counts.
    Table { values: Vec<S> },
    Constant { value: S },
}

impl<S: Scalar> QCurve<S> {
    pub fn eval(&self, n: u32) -> S {
        match self {
            QCurve::GaussianCdf { mean, variance } => {
                let sd = variance.as_f64().sqrt();
                let z = (n as f64 - mean.as_f64()) / sd;
                S::lit(Normal::new(0.0, 1.0).expect("unit normal").cdf(z))
            }
            QCurve::Table { values } => {
                if values.is_empty() {
                    return S::zero();
                }
                let idx = (n.max(1) as usize - 1).min(values.len() - 1);
                values[idx]
            }
            QCurve::Constant { value } => *value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationModel<S> {
    pub q_high: QCurve<S>,
    /// `None` means `1 - q_high(n)`.
    #[serde(default)]
    pub q_low: Option<QCurve<S>>,
}

impl<S: Scalar> ObservationModel<S> {
    pub fn gaussian(mean: S, variance: S) -> Self {
        Self {
            q_high: QCurve::GaussianCdf { mean, variance },
            q_low: None,
        }
    }

    pub fn constant(q_high: S, q_low: S) -> Self {
        Self {
            q_high: QCurve::Constant { value: q_high },
            q_low: Some(QCurve::Constant { value: q_low }),
        }
    }

    pub fn q_high(&self, n: u32) -> S {
        self.q_high.eval(n)
    }

    pub fn q_low(&self, n: u32) -> S {
        match &self.q_low {
            Some(c) => c.eval(n),
            None => S::one() - self.q_high.eval(n),
        }
    }

    /// Checks ordering and monotonicity over `1..=n_max`.
    pub fn validate(&self, n_max: u32) -> Result<()> {
        let mut prev: Option<(S, S)> = None;
        for n in 1..=n_max.max(1) {
            let (h, l) = (self.q_high(n), self.q_low(n));
            if !(S::zero() <= l && l <= h && h <= S::one()) {
                return Err(Error::config(
                    "observation",
                    format!("need 0 <= q_low({n}) <= q_high({n}) <= 1"),
                ));
            }
            if let Some((ph, pl)) = prev {
                if h < ph || l > pl {
                    return Err(Error::config(
                        "observation",
                        format!("q_high must not fall and q_low must not rise at n = {n}"),
                    ));
                }
            }
            prev = Some((h, l));
        }
        Ok(())
    }
}

/// Extra per-user cost left by how many travellers reported last slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VarianceCost<S> {
    /// `min(a / n, b)`, with `V(0) = b`.
    CappedReciprocal { a: S, b: S },
    /// `values[n]` for integer part of `n`, holding the last entry afterwards.
    Table { values: Vec<S> },
    Zero,
}

impl<S: Scalar> VarianceCost<S> {
    pub fn eval(&self, n_prev: S) -> S {
        match self {
            VarianceCost::CappedReciprocal { a, b } => {
                if n_prev <= S::zero() {
                    *b
                } else {
                    (*a / n_prev).min(*b)
                }
            }
            VarianceCost::Table { values } => {
                if values.is_empty() {
                    return S::zero();
                }
                let idx = n_prev.max(S::zero()).floor().to_usize().unwrap_or(usize::MAX);
                values[idx.min(values.len() - 1)]
            }
            VarianceCost::Zero => S::zero(),
        }
    }

    pub fn cap(&self) -> S {
        self.eval(S::zero())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            VarianceCost::CappedReciprocal { a, b } if *a < S::zero() || *b < S::zero() => {
                Err(Error::config("variance", "a and b must be nonnegative"))
            }
            VarianceCost::Table { values } => {
                if values.windows(2).any(|w| w[1] > w[0]) || values.iter().any(|v| *v < S::zero()) {
                    Err(Error::config("variance.values", "must be nonnegative and nonincreasing"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Latency carry-over map `l(t+1) = f(l(t), n(t), alpha)`.
pub trait LatencyMap<S> {
    fn apply(&self, ell: S, n: S, alpha: S) -> S;
}

impl<S, F: Fn(S, S, S) -> S> LatencyMap<S> for F {
    fn apply(&self, ell: S, n: S, alpha: S) -> S {
        self(ell, n, alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Correlation<S> {
    /// `alpha * (ell + n)`.
    #[default]
    Linear,
    /// `alpha * (carry * ell + load * n)`.
    Affine { carry: S, load: S },
    /// Latency never moves.
    Static,
}

impl<S: Scalar> LatencyMap<S> for Correlation<S> {
    fn apply(&self, ell: S, n: S, alpha: S) -> S {
        match self {
            Correlation::Linear => alpha * (ell + n),
            Correlation::Affine { carry, load } => alpha * (*carry * ell + *load * n),
            Correlation::Static => ell,
        }
    }
}

/// Initial condition of one stochastic path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticPath<S> {
    pub initial_latency: S,
    pub initial_belief: S,
    /// Travellers on the path in the slot before the first one.
    #[serde(default)]
    pub initial_count: u32,
    /// Latency uninformed users assume; defaults to `initial_latency`.
    #[serde(default)]
    pub nominal_latency: Option<S>,
    /// Per-path override of `hazard.xbar_true`.
    #[serde(default)]
    pub xbar_true: Option<S>,
}

impl<S: Scalar> StochasticPath<S> {
    pub fn new(initial_latency: S, initial_belief: S) -> Self {
        Self {
            initial_latency,
            initial_belief,
            initial_count: 0,
            nominal_latency: None,
            xbar_true: None,
        }
    }

    pub fn nominal(&self) -> S {
        self.nominal_latency.unwrap_or(self.initial_latency)
    }
}

/// Everything needed to simulate or plan on a parallel network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig<S> {
    pub arrivals: ArrivalModel<S>,
    pub hazard: HazardModel<S>,
    pub observation: ObservationModel<S>,
    pub variance: VarianceCost<S>,
    #[serde(default)]
    pub correlation: Correlation<S>,
    pub safe_latency: S,
    pub paths: Vec<StochasticPath<S>>,
    pub rho: S,
}

impl<S: Scalar> NetworkConfig<S> {
    pub fn m(&self) -> usize {
        self.paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.arrivals.validate()?;
        self.hazard.validate()?;
        self.observation.validate(self.arrivals.max)?;
        self.variance.validate()?;
        if self.paths.is_empty() {
            return Err(Error::config("paths", "need at least one stochastic path"));
        }
        if !(self.safe_latency >= S::zero()) {
            return Err(Error::config("paths", "safe latency must be >= 0"));
        }
        for (i, p) in self.paths.iter().enumerate() {
            if !(p.initial_latency >= S::zero()) {
                return Err(Error::config(format!("paths[{i}].latency"), "must be >= 0"));
            }
            if !(p.initial_belief >= S::zero() && p.initial_belief <= S::one()) {
                return Err(Error::config(format!("paths[{i}].belief"), "must lie in [0, 1]"));
            }
            if let Some(x) = p.xbar_true {
                if !(x >= S::zero() && x <= S::one()) {
                    return Err(Error::config(format!("paths[{i}].xbar_true"), "must be a probability"));
                }
            }
        }
        if !(self.rho >= S::zero() && self.rho < S::one()) {
            return Err(Error::config("rho", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn xbar_of(&self, path: usize) -> S {
        self.paths[path].xbar_true.unwrap_or(self.hazard.xbar_true)
    }

    /// Platform state at the first slot with `arrivals` users.
    pub fn initial_state(&self, arrivals: u32) -> NetworkState<S> {
        NetworkState {
            safe_latency: self.safe_latency,
            paths: self
                .paths
                .iter()
                .map(|p| PathBeliefState {
                    expected_latency: p.initial_latency,
                    belief: p.initial_belief,
                    last_count: S::from_count(p.initial_count),
                })
                .collect(),
            arrivals,
        }
    }

    /// Stable digest of the serialized config.
    pub fn digest(&self) -> String
    where
        S: Serialize,
    {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&bytes);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBeliefState<S> {
    pub expected_latency: S,
    pub belief: S,
    pub last_count: S,
}

/// Platform-visible state at the start of a slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState<S> {
    pub safe_latency: S,
    pub paths: Vec<PathBeliefState<S>>,
    pub arrivals: u32,
}

impl<S: Scalar> NetworkState<S> {
    pub fn m(&self) -> usize {
        self.paths.len()
    }

    /// Per-user cost on path `i` (0 is the safe path) with `n` travellers.
    pub fn path_cost(&self, i: usize, n: S, v: &VarianceCost<S>) -> S {
        if i == 0 {
            self.safe_latency + n
        } else {
            let p = &self.paths[i - 1];
            p.expected_latency + n + v.eval(p.last_count)
        }
    }

    /// Cost on path `i` with nobody on it.
    pub fn free_cost(&self, i: usize, v: &VarianceCost<S>) -> S {
        self.path_cost(i, S::zero(), v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    Fractional,
    Integer,
}

/// Travellers per path for one slot; index 0 is the safe path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation<S> {
    pub counts: Vec<S>,
    pub mode: AllocationMode,
}

impl<S: Scalar> Allocation<S> {
    pub fn fractional(counts: Vec<S>) -> Self {
        Self {
            counts,
            mode: AllocationMode::Fractional,
        }
    }

    pub fn integer(counts: &[u32]) -> Self {
        Self {
            counts: counts.iter().map(|&c| S::from_count(c)).collect(),
            mode: AllocationMode::Integer,
        }
    }

    pub fn total(&self) -> S {
        self.counts.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn validate(&self, state: &NetworkState<S>) -> Result<()> {
        if self.counts.len() != state.m() + 1 {
            return Err(Error::InvalidInput(format!(
                "allocation has {} entries, network has {} paths",
                self.counts.len(),
                state.m() + 1
            )));
        }
        if self.counts.iter().any(|c| !(*c >= S::zero())) {
            return Err(Error::InvalidInput("negative or NaN count".into()));
        }
        let n = S::from_count(state.arrivals);
        let tol = S::lit(1e-6) * (S::one() + n);
        if (self.total() - n).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "counts sum to {} but {} users arrived",
                self.total(),
                n
            )));
        }
        if self.mode == AllocationMode::Integer && self.counts.iter().any(|c| c.fract() != S::zero()) {
            return Err(Error::InvalidInput("integer allocation holds a fraction".into()));
        }
        Ok(())
    }

    /// Largest-remainder rounding to integer counts summing to `n`.
    pub fn round_to(&self, n: u32) -> Vec<u32> {
        largest_remainder(&self.counts.iter().map(|c| c.as_f64()).collect::<Vec<_>>(), n)
    }
}

/// Rounds nonnegative weights to integers with sum `n`, giving leftovers to
/// the largest fractional parts (ties to the lower index).
pub fn largest_remainder(x: &[f64], n: u32) -> Vec<u32> {
    let total: f64 = x.iter().map(|v| v.max(0.0)).sum();
    if x.is_empty() {
        return vec![];
    }
    if total <= 0.0 {
        let mut out = vec![0; x.len()];
        out[0] = n;
        return out;
    }
    let scale = n as f64 / total;
    let exact: Vec<f64> = x.iter().map(|v| v.max(0.0) * scale).collect();
    let mut out: Vec<u32> = exact.iter().map(|v| (v + 1e-9).floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    if assigned > n {
        // only reachable through the epsilon nudge
        let mut extra = assigned - n;
        for c in out.iter_mut().rev() {
            while extra > 0 && *c > 0 {
                *c -= 1;
                extra -= 1;
            }
        }
        return out;
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - out[a] as f64;
        let fb = exact[b] - out[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take((n - assigned) as usize) {
        out[i] += 1;
    }
    out
}

pub fn variance_cost<S: Scalar>(v: &VarianceCost<S>, n_prev: S) -> S {
    v.eval(n_prev)
}

pub fn sample_arrivals<S: Scalar, R: Rng + ?Sized>(model: &ArrivalModel<S>, rng: &mut R) -> u32 {
    model.sample(rng)
}

/// Per-path user costs and the social cost `sum n_i c_i(n_i)`.
pub fn immediate_costs<S: Scalar>(
    state: &NetworkState<S>,
    alloc: &Allocation<S>,
    v: &VarianceCost<S>,
) -> Result<(Vec<S>, S)> {
    if alloc.counts.len() != state.m() + 1 {
        return Err(Error::InvalidInput(format!(
            "allocation has {} entries, network has {} paths",
            alloc.counts.len(),
            state.m() + 1
        )));
    }
    let per: Vec<S> = alloc
        .counts
        .iter()
        .enumerate()
        .map(|(i, &n)| state.path_cost(i, n, v))
        .collect();
    let social = per
        .iter()
        .zip(&alloc.counts)
        .fold(S::zero(), |acc, (&c, &n)| acc + n * c);
    Ok((per, social))
}
