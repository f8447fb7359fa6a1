//! Interval-based up-and-down rules and the beta-binomial posterior quantities
//! every other module builds on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Slack applied when comparing observed rates or true probabilities against the
/// interval bounds, so that values like 1/4 land inside `[0.25, 0.35]` regardless
/// of how the bounds were rounded.
pub const BOUNDARY_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval", into = "RawInterval")]
pub struct EquivalenceInterval {
    target: f64,
    eps_below: f64,
    eps_above: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInterval {
    p_t: f64,
    eps1: f64,
    eps2: f64,
}

impl TryFrom<RawInterval> for EquivalenceInterval {
    type Error = Error;
    fn try_from(r: RawInterval) -> Result<Self> {
        EquivalenceInterval::new(r.p_t, r.eps1, r.eps2)
    }
}

impl From<EquivalenceInterval> for RawInterval {
    fn from(ei: EquivalenceInterval) -> Self {
        RawInterval { p_t: ei.target, eps1: ei.eps_below, eps2: ei.eps_above }
    }
}

impl EquivalenceInterval {
    pub fn new(p_t: f64, eps1: f64, eps2: f64) -> Result<Self> {
        let fail = |what: &str| Err(Error::InvalidParams(format!("equivalence interval: {what} (p_T={p_t}, eps1={eps1}, eps2={eps2})")));
        if !(p_t > 0.0 && p_t < 1.0) {
            return fail("p_T must lie in (0, 1)");
        }
        if !(0.0..).contains(&eps1) || !(0.0..).contains(&eps2) {
            return fail("eps1 and eps2 must be nonnegative");
        }
        if p_t - eps1 <= 0.0 {
            return fail("lower bound p_T - eps1 must be > 0");
        }
        if p_t + eps2 >= 1.0 {
            return fail("upper bound p_T + eps2 must be < 1");
        }
        Ok(Self { target: p_t, eps_below: eps1, eps_above: eps2 })
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn eps1(&self) -> f64 {
        self.eps_below
    }

    pub fn eps2(&self) -> f64 {
        self.eps_above
    }

    pub fn lower(&self) -> f64 {
        self.target - self.eps_below
    }

    pub fn upper(&self) -> f64 {
        self.target + self.eps_above
    }

    pub fn is_below(&self, p: f64) -> bool {
        p < self.lower() - BOUNDARY_SLACK
    }

    pub fn is_above(&self, p: f64) -> bool {
        p > self.upper() + BOUNDARY_SLACK
    }

    /// Closed interval membership.
    pub fn contains(&self, p: f64) -> bool {
        !self.is_below(p) && !self.is_above(p)
    }
}

impl Default for EquivalenceInterval {
    fn default() -> Self {
        Self { target: 0.3, eps_below: 0.05, eps_above: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DoseObservation {
    /// Patients with a dose-limiting toxicity.
    pub y: u32,
    /// Patients treated.
    pub n: u32,
}

impl DoseObservation {
    pub fn new(y: u32, n: u32) -> Result<Self> {
        if y > n {
            return Err(Error::InvalidObservation(format!("{y} DLTs among {n} patients")));
        }
        Ok(Self { y, n })
    }

    pub fn rate(&self) -> f64 {
        f64::from(self.y) / f64::from(self.n)
    }

    pub fn is_tested(&self) -> bool {
        self.n > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "E")]
    Escalate,
    #[serde(rename = "S")]
    Stay,
    #[serde(rename = "D")]
    DeEscalate,
    /// De-escalate and exclude the current combination and everything above it.
    #[serde(rename = "DU")]
    DeEscalateUnacceptable,
}

impl Decision {
    pub fn code(&self) -> &'static str {
        match self {
            Decision::Escalate => "E",
            Decision::Stay => "S",
            Decision::DeEscalate => "D",
            Decision::DeEscalateUnacceptable => "DU",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Decision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "E" => Ok(Decision::Escalate),
            "S" => Ok(Decision::Stay),
            "D" => Ok(Decision::DeEscalate),
            "DU" => Ok(Decision::DeEscalateUnacceptable),
            other => Err(Error::Parse(format!("unknown decision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBeta", into = "RawBeta")]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBeta {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawBeta> for BetaParams {
    type Error = Error;
    fn try_from(r: RawBeta) -> Result<Self> {
        BetaParams::new(r.alpha, r.beta)
    }
}

impl From<BetaParams> for RawBeta {
    fn from(b: BetaParams) -> Self {
        RawBeta { alpha: b.alpha, beta: b.beta }
    }
}

impl BetaParams {
    pub const UNIFORM: BetaParams = BetaParams { alpha: 1.0, beta: 1.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParams(format!("beta prior needs alpha, beta > 0 (got {alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn posterior(&self, obs: DoseObservation) -> BetaParams {
        BetaParams {
            alpha: self.alpha + f64::from(obs.y),
            beta: self.beta + f64::from(obs.n - obs.y),
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(self.alpha, self.beta, x)
        }
    }
}

/// Single-agent i3+3 rule on cumulative data at the current dose. Never returns DU.
pub fn i3p3_decision(obs: DoseObservation, ei: &EquivalenceInterval) -> Result<Decision> {
    if obs.n == 0 {
        return Err(Error::InvalidObservation("decision requires at least one treated patient".into()));
    }
    if obs.y > obs.n {
        return Err(Error::InvalidObservation(format!("{} DLTs among {} patients", obs.y, obs.n)));
    }
    let rate = obs.rate();
    if ei.is_below(rate) {
        return Ok(Decision::Escalate);
    }
    if !ei.is_above(rate) {
        return Ok(Decision::Stay);
    }
    let one_fewer = f64::from(obs.y - 1) / f64::from(obs.n);
    Ok(if ei.is_below(one_fewer) { Decision::Stay } else { Decision::DeEscalate })
}

/// Posterior probability that the toxicity rate lies in the equivalence interval.
pub fn prob_in_interval(obs: DoseObservation, prior: &BetaParams, ei: &EquivalenceInterval) -> f64 {
    let post = prior.posterior(obs);
    (post.cdf(ei.upper()) - post.cdf(ei.lower())).clamp(0.0, 1.0)
}

/// Posterior probability that the toxicity rate exceeds `p_t`.
pub fn prob_exceeds(obs: DoseObservation, prior: &BetaParams, p_t: f64) -> f64 {
    (1.0 - prior.posterior(obs).cdf(p_t)).clamp(0.0, 1.0)
}

/// Safety rule: at least `min_n` patients and `Pr(p > p_T) > threshold` under a Beta(1,1) prior.
pub fn is_unacceptably_toxic(obs: DoseObservation, p_t: f64, threshold: f64, min_n: u32) -> bool {
    obs.n >= min_n && prob_exceeds(obs, &BetaParams::UNIFORM, p_t) > threshold
}

/// The full up-and-down rule for one dose: DU when the safety rule fires, else i3+3.
pub fn dose_decision(obs: DoseObservation, ei: &EquivalenceInterval, threshold: f64, min_n: u32) -> Result<Decision> {
    let base = i3p3_decision(obs, ei)?;
    if is_unacceptably_toxic(obs, ei.target(), threshold, min_n) {
        Ok(Decision::DeEscalateUnacceptable)
    } else {
        Ok(base)
    }
}

/// Pretabulated decisions for every `(n, y)` with `1 <= n <= n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTable {
    pub ei: EquivalenceInterval,
    pub threshold: f64,
    pub min_n: u32,
    pub n_max: u32,
    /// `columns[n - 1][y]`.
    columns: Vec<Vec<Decision>>,
}

impl DecisionTable {
    pub fn new(ei: EquivalenceInterval, threshold: f64, min_n: u32, n_max: u32) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::InvalidParams("decision table needs n_max >= 1".into()));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidParams(format!("exclusion threshold must lie in (0, 1), got {threshold}")));
        }
        let columns = (1..=n_max)
            .map(|n| (0..=n).map(|y| dose_decision(DoseObservation { y, n }, &ei, threshold, min_n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ei, threshold, min_n, n_max, columns })
    }

    pub fn get(&self, n: u32, y: u32) -> Option<Decision> {
        if n == 0 || y > n {
            return None;
        }
        self.columns.get(n as usize - 1).map(|c| c[y as usize])
    }

    /// `(n, y, decision)` ordered by `n`, then `y`.
    pub fn cells(&self) -> impl Iterator<Item = (u32, u32, Decision)> + '_ {
        self.columns
            .iter()
            .enumerate()
            .flat_map(|(k, col)| col.iter().enumerate().map(move |(y, d)| (k as u32 + 1, y as u32, *d)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,y,decision\n");
        for (n, y, d) in self.cells() {
            out.push_str(&format!("{n},{y},{d}\n"));
        }
        out
    }

    /// Columns are patients treated, rows are patients with DLT.
    pub fn to_text(&self) -> String {
        let w = 3usize.max(self.n_max.to_string().len() + 1);
        let mut out = format!(
            "p_T = {}, EI = [{}, {}], exclusion threshold = {}\n",
            self.ei.target(),
            self.ei.lower(),
            self.ei.upper(),
            self.threshold
        );
        out.push_str(&format!("{:>6}", "y \\ n"));
        for n in 1..=self.n_max {
            out.push_str(&format!("{n:>w$}"));
        }
        out.push('\n');
        for y in 0..=self.n_max {
            out.push_str(&format!("{y:>6}"));
            for n in 1..=self.n_max {
                let cell = self.get(n, y).map_or("", |d| d.code());
                out.push_str(&format!("{cell:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Memoized decisions and posterior interval probabilities for all `(n, y)` up
/// to a cap, falling back to direct evaluation beyond it.
#[derive(Debug, Clone)]
pub struct RuleCache {
    ei: EquivalenceInterval,
    prior: BetaParams,
    threshold: f64,
    min_n: u32,
    cap: u32,
    /// Triangular storage: offset(n) + y.
    xi: Vec<f64>,
    decision: Vec<Option<Decision>>,
}

impl RuleCache {
    pub fn new(ei: EquivalenceInterval, prior: BetaParams, threshold: f64, min_n: u32, cap: u32) -> Self {
        let size = Self::offset(cap + 1);
        let mut xi = Vec::with_capacity(size);
        let mut decision = Vec::with_capacity(size);
        for n in 0..=cap {
            for y in 0..=n {
                let obs = DoseObservation { y, n };
                xi.push(prob_in_interval(obs, &prior, &ei));
                decision.push(dose_decision(obs, &ei, threshold, min_n).ok());
            }
        }
        Self { ei, prior, threshold, min_n, cap, xi, decision }
    }

    fn offset(n: u32) -> usize {
        let n = n as usize;
        n * (n + 1) / 2
    }

    fn slot(&self, obs: DoseObservation) -> Option<usize> {
        (obs.n <= self.cap && obs.y <= obs.n).then(|| Self::offset(obs.n) + obs.y as usize)
    }

    pub fn ei(&self) -> &EquivalenceInterval {
        &self.ei
    }

    pub fn xi(&self, obs: DoseObservation) -> f64 {
        match self.slot(obs) {
            Some(k) => self.xi[k],
            None => prob_in_interval(obs, &self.prior, &self.ei),
        }
    }

    /// Decision including DU. `None` for untested doses.
    pub fn decision(&self, obs: DoseObservation) -> Option<Decision> {
        match self.slot(obs) {
            Some(k) => self.decision[k],
            None => dose_decision(obs, &self.ei, self.threshold, self.min_n).ok(),
        }
    }

    pub fn is_toxic(&self, obs: DoseObservation) -> bool {
        self.decision(obs) == Some(Decision::DeEscalateUnacceptable)
    }
}
