//! The two-stage combination trial as a replayable state machine.
//!
//! Stage I escalates along a fixed escalation path while the up-and-down rule says
//! escalate. Stage II chooses among the adjacent candidate sets using the posterior
//! probability of lying in the equivalence interval, with exploration of untested
//! orderless neighbours when every candidate already looks like an MTDC.
//!
//! Randomness: each trial owns one ChaCha8 stream, consumed only when a uniform
//! pick among two or more combinations is needed (orderless exploration, the
//! optional untested-exploration rule, argmax ties). The stream position is part
//! of the serialized state, so replaying the cohort log reproduces every
//! assignment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{BetaParams, Decision, DecisionTable, DoseObservation, EquivalenceInterval, RuleCache};
use crate::error::{Error, Result};
use crate::grid::{adjacent_sets, orderless_ring, DcCoord, DcMap, DoseGrid, EscalationPath, PathChoice};
use crate::selection::{select_mtdc, MtdcResult};

/// Largest `n` for which decisions and posterior probabilities are pretabulated.
const RULE_CACHE_CAP: u32 = 240;

const XI_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignParams {
    pub ei: EquivalenceInterval,
    pub cohort_size: u32,
    /// Total patient cap `N`.
    pub max_n: u32,
    /// A combination is excluded when `Pr(p > p_T | data) > exclusion_threshold`.
    pub exclusion_threshold: f64,
    /// Minimum patients before the exclusion rule may fire.
    pub exclusion_min_n: u32,
    /// Prior for the posterior probability of lying in the EI.
    pub working_prior: BetaParams,
    /// Prior for the posterior means used in final selection.
    pub selection_prior: BetaParams,
    /// Combinations with `n <= selection_min_n` are not eligible for selection.
    pub selection_min_n: u32,
    pub ep: PathChoice,
    pub skip_stage1: bool,
    /// Prefer untested candidates after a stay decision once the current combination
    /// has `modified_rule_min_n` patients.
    pub modified_rule: bool,
    pub modified_rule_min_n: u32,
    pub rng_seed: u64,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            ei: EquivalenceInterval::default(),
            cohort_size: 3,
            max_n: 96,
            exclusion_threshold: 0.95,
            exclusion_min_n: 3,
            working_prior: BetaParams::UNIFORM,
            selection_prior: BetaParams::new(0.005, 0.005).expect("valid prior"),
            selection_min_n: 3,
            ep: PathChoice::P3,
            skip_stage1: false,
            modified_rule: false,
            modified_rule_min_n: 12,
            rng_seed: 0,
        }
    }
}

impl DesignParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.cohort_size == 0 {
            return bad("cohort_size must be at least 1".into());
        }
        if self.max_n == 0 || !self.max_n.is_multiple_of(self.cohort_size) {
            return bad(format!(
                "max_n must be a positive multiple of cohort_size (max_n={}, cohort_size={})",
                self.max_n, self.cohort_size
            ));
        }
        if !(self.exclusion_threshold > 0.0 && self.exclusion_threshold < 1.0) {
            return bad(format!("exclusion_threshold must lie in (0, 1), got {}", self.exclusion_threshold));
        }
        Ok(())
    }
}

/// Validated parameters bound to a grid, with the resolved escalation path and
/// pretabulated rules. Shared read-only across trials.
#[derive(Debug, Clone)]
pub struct Design {
    grid: DoseGrid,
    params: DesignParams,
    path: EscalationPath,
    rules: RuleCache,
}

impl Design {
    pub fn new(grid: DoseGrid, params: DesignParams) -> Result<Self> {
        params.validate()?;
        let path = EscalationPath::resolve(&grid, &params.ep)?;
        let cap = params.max_n.min(RULE_CACHE_CAP);
        let rules = RuleCache::new(params.ei, params.working_prior, params.exclusion_threshold, params.exclusion_min_n, cap);
        Ok(Self { grid, params, path, rules })
    }

    pub fn grid(&self) -> DoseGrid {
        self.grid
    }

    pub fn params(&self) -> &DesignParams {
        &self.params
    }

    pub fn path(&self) -> &EscalationPath {
        &self.path
    }

    pub fn rules(&self) -> &RuleCache {
        &self.rules
    }

    pub fn decision_table(&self, n_max: u32) -> Result<DecisionTable> {
        DecisionTable::new(self.params.ei, self.params.exclusion_threshold, self.params.exclusion_min_n, n_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DcState {
    #[serde(flatten)]
    pub obs: DoseObservation,
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    StageI,
    StageII,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The lowest combination was excluded as overly toxic.
    D11Toxic,
    /// The patient cap was reached.
    MaxN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Assign(DcCoord),
    Stop(StopReason),
}

impl Recommendation {
    pub fn dc(&self) -> Option<DcCoord> {
        match self {
            Recommendation::Assign(dc) => Some(*dc),
            Recommendation::Stop(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub dc: DcCoord,
    pub dlt: u32,
    /// Stage in which the cohort was enrolled.
    pub stage: Stage,
    /// The cohort was placed somewhere other than the recommendation.
    #[serde(default, rename = "override")]
    pub overridden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickRule {
    /// Stage I escalation to the next member of the escalation path.
    EscalationPath,
    /// Highest posterior probability of lying in the EI.
    MaxPosterior,
    /// Uniform pick among untested orderless neighbours of the candidate set.
    OrderlessExploration,
    /// Uniform pick among untested candidates (optional modified rule).
    UntestedExploration,
    /// No lower candidate exists at d11; stay there.
    Stay,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub dc: DcCoord,
    #[serde(flatten)]
    pub obs: DoseObservation,
    /// Posterior probability of lying in the EI under the working prior.
    pub xi: f64,
    /// The up-and-down rule at this candidate, when tested.
    pub decision: Option<Decision>,
}

/// How the most recent recommendation was derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub from: DcCoord,
    #[serde(flatten)]
    pub obs: DoseObservation,
    /// Rule outcome at `from`, including DU.
    pub decision: Decision,
    /// The candidate set actually searched after DU and empty-set fallbacks.
    pub applied: Option<Decision>,
    pub stage: Stage,
    pub candidates: Vec<Candidate>,
    /// Untested orderless neighbours considered for exploration.
    pub ring: Vec<DcCoord>,
    pub rule: PickRule,
    pub next: Recommendation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub grid: DoseGrid,
    pub params: DesignParams,
    /// Seed of the trial's random stream.
    pub seed: u64,
    pub dcs: DcMap<DcState>,
    pub stage: Stage,
    /// Combination for the next cohort; the last one treated once stopped.
    pub current: DcCoord,
    pub stop_reason: Option<StopReason>,
    pub log: Vec<CohortRecord>,
    pub last_step: Option<StepReport>,
    /// Position of the trial's random stream.
    #[serde(with = "rng_cursor")]
    pub rng: ChaCha8Rng,
}

/// The stream as key, stream id and word position; the word position is a
/// decimal string because it is a `u128`.
mod rng_cursor {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Cursor {
        key: String,
        stream: u64,
        word_pos: String,
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
        let key = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Cursor { key, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
        let c = Cursor::deserialize(d)?;
        if c.key.len() != 64 || !c.key.is_ascii() {
            return Err(D::Error::custom("rng key must be 64 hex digits"));
        }
        let mut key = [0u8; 32];
        for (k, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&c.key[2 * k..2 * k + 2], 16).map_err(D::Error::custom)?;
        }
        let word_pos: u128 = c.word_pos.parse().map_err(D::Error::custom)?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(c.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

impl TrialState {
    pub fn enrolled(&self) -> u32 {
        self.log.len() as u32 * self.params.cohort_size
    }

    pub fn obs(&self, dc: DcCoord) -> DoseObservation {
        self.dcs[dc].obs
    }

    pub fn is_excluded(&self, dc: DcCoord) -> bool {
        self.dcs[dc].excluded
    }

    pub fn recommendation(&self) -> Recommendation {
        match (self.stage, self.stop_reason) {
            (Stage::Stopped, Some(reason)) => Recommendation::Stop(reason),
            _ => Recommendation::Assign(self.current),
        }
    }

    pub fn dcs_used(&self) -> usize {
        self.dcs.values().iter().filter(|s| s.obs.n > 0).count()
    }

    pub fn observations(&self) -> DcMap<DoseObservation> {
        self.dcs.map(|_, s| s.obs)
    }
}

pub const STATE_FORMAT: &str = "ci3p3/trial-state";
pub const STATE_VERSION: u32 = 1;

/// Versioned on-disk form of a trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialDocument {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub state: TrialState,
}

#[derive(Debug, Clone)]
pub struct Trial {
    design: Arc<Design>,
    state: TrialState,
}

impl Trial {
    pub fn new(design: Arc<Design>) -> Self {
        let seed = design.params.rng_seed;
        Self::with_seed(design, seed)
    }

    pub fn with_seed(design: Arc<Design>, seed: u64) -> Self {
        let grid = design.grid;
        let stage = if design.params.skip_stage1 { Stage::StageII } else { Stage::StageI };
        let state = TrialState {
            grid,
            params: design.params.clone(),
            seed,
            dcs: DcMap::filled(grid, DcState::default()),
            stage,
            current: DcCoord::ORIGIN,
            stop_reason: None,
            log: Vec::new(),
            last_step: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        Self { design, state }
    }

    /// Rebuilds a trial by feeding the cohort log through the engine.
    pub fn replay(design: Arc<Design>, seed: u64, log: &[CohortRecord]) -> Result<Self> {
        let mut trial = Self::with_seed(design, seed);
        for (k, rec) in log.iter().enumerate() {
            let expected_stage = trial.state.stage;
            let overridden = trial.state.stage != Stage::Stopped && rec.dc != trial.state.current;
            trial.record_cohort(rec.dc, rec.dlt).map_err(|e| Error::Integrity(format!("cohort {}: {e}", k + 1)))?;
            let stored = trial.state.log.last().unwrap();
            if rec.stage != expected_stage || rec.overridden != overridden || stored != rec {
                return Err(Error::Integrity(format!("cohort {} disagrees with replayed engine", k + 1)));
            }
        }
        Ok(trial)
    }

    /// Loads a serialized state, verifying it against a replay of its own log.
    pub fn from_state(state: TrialState) -> Result<Self> {
        let design = Arc::new(Design::new(state.grid, state.params.clone())?);
        let replayed = Self::replay(design, state.seed, &state.log)?;
        if replayed.state != state {
            return Err(Error::Integrity("stored state does not match a replay of its cohort log".into()));
        }
        Ok(replayed)
    }

    pub fn from_document(doc: TrialDocument) -> Result<Self> {
        if doc.format != STATE_FORMAT {
            return Err(Error::Integrity(format!("unexpected document format {:?}", doc.format)));
        }
        if doc.version != STATE_VERSION {
            return Err(Error::Integrity(format!("unsupported state version {}", doc.version)));
        }
        Self::from_state(doc.state)
    }

    pub fn to_document(&self) -> TrialDocument {
        TrialDocument { format: STATE_FORMAT.into(), version: STATE_VERSION, state: self.state.clone() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TrialDocument = serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable state: {e}")))?;
        Self::from_document(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("trial state serializes")
    }

    pub fn design(&self) -> &Arc<Design> {
        &self.design
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    pub fn next_assignment(&self) -> Recommendation {
        self.state.recommendation()
    }

    pub fn last_step(&self) -> Option<&StepReport> {
        self.state.last_step.as_ref()
    }

    /// Enrolls one cohort at `dc` with `dlt` toxicities and advances the
    /// recommendation. Placing the cohort anywhere but the current recommendation
    /// is recorded as an override.
    pub fn record_cohort(&mut self, dc: DcCoord, dlt: u32) -> Result<Recommendation> {
        let cohort = self.state.params.cohort_size;
        if self.state.stage == Stage::Stopped {
            return Err(Error::TrialStopped);
        }
        self.state.grid.check(dc)?;
        if self.state.is_excluded(dc) {
            return Err(Error::ExcludedDc(dc));
        }
        if dlt > cohort {
            return Err(Error::InvalidObservation(format!("{dlt} DLTs in a cohort of {cohort}")));
        }
        let enrolled = self.state.enrolled();
        if enrolled + cohort > self.state.params.max_n {
            return Err(Error::SampleSizeExceeded { enrolled, requested: cohort, max_n: self.state.params.max_n });
        }

        let overridden = dc != self.state.current;
        self.state.log.push(CohortRecord { dc, dlt, stage: self.state.stage, overridden });
        let cell = &mut self.state.dcs[dc];
        cell.obs.n += cohort;
        cell.obs.y += dlt;
        let obs = cell.obs;
        if self.design.rules.is_toxic(obs) {
            self.apply_exclusion(dc);
        }

        let step = self.advance(dc);
        let next = step.next;
        self.state.last_step = Some(step);
        Ok(next)
    }

    /// Excludes `dc` and every combination at least as high in both agents.
    /// Excluding d11 terminates the trial.
    pub fn apply_exclusion(&mut self, dc: DcCoord) {
        let grid = self.state.grid;
        for c in grid.upward_set(dc) {
            self.state.dcs[c].excluded = true;
        }
        if self.state.is_excluded(DcCoord::ORIGIN) {
            self.stop(StopReason::D11Toxic);
        }
    }

    /// Preview of the recommendation after a cohort with `dlt` toxicities at the
    /// current recommendation. Runs on a copy; this trial and its random stream are
    /// untouched.
    pub fn what_if(&self, dlt: u32) -> Result<StepReport> {
        let mut fork = self.clone();
        fork.record_cohort(self.state.current, dlt)?;
        Ok(fork.state.last_step.expect("step recorded"))
    }

    /// Final MTDC selection on the current data. Uses a copy of the random stream
    /// for tie-breaking, so repeated calls agree.
    pub fn finalize(&self) -> MtdcResult {
        let mut rng = self.state.rng.clone();
        select_mtdc(&self.state, &mut rng)
    }

    fn stop(&mut self, reason: StopReason) {
        self.state.stage = Stage::Stopped;
        if self.state.stop_reason.is_none() {
            self.state.stop_reason = Some(reason);
        }
    }

    fn advance(&mut self, from: DcCoord) -> StepReport {
        let obs = self.state.obs(from);
        let decision = self.design.rules.decision(obs).expect("treated combination has data");
        let stopped = |reason, stage| StepReport {
            from,
            obs,
            decision,
            applied: None,
            stage,
            candidates: Vec::new(),
            ring: Vec::new(),
            rule: PickRule::Stop,
            next: Recommendation::Stop(reason),
        };
        if self.state.is_excluded(DcCoord::ORIGIN) {
            self.stop(StopReason::D11Toxic);
            return stopped(StopReason::D11Toxic, self.state.stage);
        }
        if self.state.enrolled() >= self.state.params.max_n {
            let stage = self.state.stage;
            self.stop(StopReason::MaxN);
            return stopped(StopReason::MaxN, stage);
        }
        let step = match self.state.stage {
            Stage::StageI => self.stage1_step(from, decision),
            _ => self.stage2_step(from, decision),
        };
        if let Recommendation::Assign(dc) = step.next {
            self.state.current = dc;
        }
        step
    }

    /// Continue up the escalation path on E; otherwise hand the same decision to Stage II.
    fn stage1_step(&mut self, from: DcCoord, decision: Decision) -> StepReport {
        if decision == Decision::Escalate && !self.state.is_excluded(from) {
            if let Some(next) = self.design.path.next_after(from).filter(|nx| !self.state.is_excluded(*nx)) {
                let cand = self.candidate(next);
                return StepReport {
                    from,
                    obs: self.state.obs(from),
                    decision,
                    applied: Some(Decision::Escalate),
                    stage: Stage::StageI,
                    candidates: vec![cand],
                    ring: Vec::new(),
                    rule: PickRule::EscalationPath,
                    next: Recommendation::Assign(next),
                };
            }
        }
        self.state.stage = Stage::StageII;
        self.stage2_step(from, decision)
    }

    fn stage2_step(&mut self, from: DcCoord, decision: Decision) -> StepReport {
        let grid = self.state.grid;
        let obs = self.state.obs(from);
        let sets = adjacent_sets(&grid, from);
        let mut applied = match decision {
            _ if self.state.is_excluded(from) => Decision::DeEscalate,
            Decision::DeEscalateUnacceptable => Decision::DeEscalate,
            d => d,
        };
        let report = |applied, candidates, ring, rule, next| StepReport {
            from,
            obs,
            decision,
            applied: Some(applied),
            stage: Stage::StageII,
            candidates,
            ring,
            rule,
            next: Recommendation::Assign(next),
        };

        let omega: Vec<DcCoord> = loop {
            let set = match applied {
                Decision::Escalate => &sets.escalate,
                Decision::Stay => &sets.stay,
                _ => &sets.deescalate,
            };
            let omega: Vec<DcCoord> = set.iter().copied().filter(|c| !self.state.is_excluded(*c)).collect();
            if !omega.is_empty() {
                break omega;
            }
            match applied {
                Decision::Escalate => applied = Decision::Stay,
                Decision::Stay => applied = Decision::DeEscalate,
                _ => {
                    // Empty de-escalation set only happens at d11, which is never
                    // excluded while the trial runs.
                    assert!(!self.state.is_excluded(from), "no admissible combination below excluded {from}");
                    return report(applied, Vec::new(), Vec::new(), PickRule::Stay, from);
                }
            }
        };
        let candidates: Vec<Candidate> = omega.iter().map(|&c| self.candidate(c)).collect();

        let params = &self.state.params;
        if params.modified_rule && applied == Decision::Stay && obs.n >= params.modified_rule_min_n {
            let untested: Vec<DcCoord> = candidates.iter().filter(|c| c.obs.n == 0).map(|c| c.dc).collect();
            if !untested.is_empty() {
                let next = pick_uniform(&mut self.state.rng, &untested);
                return report(applied, candidates, untested, PickRule::UntestedExploration, next);
            }
        }

        let all_stay = candidates.iter().all(|c| c.obs.n > 0 && c.decision == Some(Decision::Stay));
        let mut ring = Vec::new();
        if all_stay {
            ring = orderless_ring(&grid, &omega, |pq| {
                let s = self.state.dcs[pq];
                s.obs.n == 0 && !s.excluded
            });
            if !ring.is_empty() {
                let next = pick_uniform(&mut self.state.rng, &ring);
                return report(applied, candidates, ring, PickRule::OrderlessExploration, next);
            }
        }

        let next = argmax_xi(&candidates, &mut self.state.rng);
        report(applied, candidates, ring, PickRule::MaxPosterior, next)
    }

    fn candidate(&self, dc: DcCoord) -> Candidate {
        let obs = self.state.obs(dc);
        Candidate { dc, obs, xi: self.design.rules.xi(obs), decision: self.design.rules.decision(obs) }
    }
}

/// Uniform pick; consumes the stream only when there is a real choice.
pub(crate) fn pick_uniform<R: Rng>(rng: &mut R, options: &[DcCoord]) -> DcCoord {
    match options.len() {
        0 => panic!("uniform pick from an empty set"),
        1 => options[0],
        k => options[rng.random_range(0..k)],
    }
}

/// Highest posterior probability of lying in the EI; ties go to the combination
/// with fewer patients, then to a uniform pick.
fn argmax_xi<R: Rng>(candidates: &[Candidate], rng: &mut R) -> DcCoord {
    let best = candidates.iter().map(|c| c.xi).fold(f64::NEG_INFINITY, f64::max);
    let top: Vec<&Candidate> = candidates.iter().filter(|c| best - c.xi <= XI_TIE).collect();
    let fewest = top.iter().map(|c| c.obs.n).min().expect("nonempty candidate set");
    let tied: Vec<DcCoord> = top.iter().filter(|c| c.obs.n == fewest).map(|c| c.dc).collect();
    pick_uniform(rng, &tied)
}
