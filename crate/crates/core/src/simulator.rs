//! Monte Carlo operating characteristics.
//!
//! Every trial gets its own seed derived from `(master_seed, scenario index,
//! replicate)`, so results do not depend on scheduling or worker count. The
//! engine consumes stream 0 of that seed and simulated outcomes consume stream 1.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::EquivalenceInterval;
use crate::engine::{Design, DesignParams, Recommendation, StopReason, Trial};
use crate::error::{Error, Result};
use crate::grid::{DcCoord, DcMap, PathChoice};
use crate::scenario::{classify_truth, Scenario, TrueClassification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    SkipStage1,
    EpP1,
    EpP2,
    ModifiedRule,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::SkipStage1, Variant::EpP1, Variant::EpP2, Variant::ModifiedRule];

    pub fn apply(&self, params: &DesignParams) -> DesignParams {
        let mut p = params.clone();
        match self {
            Variant::Base => {}
            Variant::SkipStage1 => p.skip_stage1 = true,
            Variant::EpP1 => p.ep = PathChoice::P1,
            Variant::EpP2 => p.ep = PathChoice::P2,
            Variant::ModifiedRule => p.modified_rule = true,
        }
        p
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::SkipStage1 => "skip_stage1",
            Variant::EpP1 => "ep_p1",
            Variant::EpP2 => "ep_p2",
            Variant::ModifiedRule => "modified_rule",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Parse(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: DesignParams,
    pub variant: Variant,
    pub scenarios: Vec<Scenario>,
    pub n_reps: u32,
    pub master_seed: u64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl SimConfig {
    pub fn new(params: DesignParams, scenarios: Vec<Scenario>) -> Self {
        Self { params, variant: Variant::Base, scenarios, n_reps: 1000, master_seed: 0, workers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub selected: Option<DcCoord>,
    pub n: DcMap<u32>,
    pub y: DcMap<u32>,
    pub enrolled: u32,
    pub stop_reason: Option<StopReason>,
    pub dcs_used: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one replicate of one scenario.
pub fn trial_seed(master_seed: u64, scenario_index: u64, replicate: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ scenario_index) ^ replicate)
}

/// Runs one simulated trial to completion. `observe` sees the trial before each
/// cohort together with the combination about to be treated.
pub fn simulate_trial_with(
    scenario: &Scenario,
    design: &Arc<Design>,
    seed: u64,
    mut observe: impl FnMut(&Trial, DcCoord),
) -> Result<Trial> {
    if scenario.matrix().grid() != design.grid() {
        return Err(Error::InvalidScenario(format!(
            "{} is {}x{} but the design grid is {}x{}",
            scenario.id(),
            scenario.matrix().grid().rows,
            scenario.matrix().grid().cols,
            design.grid().rows,
            design.grid().cols
        )));
    }
    let mut trial = Trial::with_seed(Arc::clone(design), seed);
    let mut outcomes = ChaCha8Rng::seed_from_u64(seed);
    outcomes.set_stream(1);
    let cohort = design.params().cohort_size;
    while let Recommendation::Assign(dc) = trial.next_assignment() {
        observe(&trial, dc);
        let p = scenario.matrix()[dc];
        let dlt = (0..cohort).filter(|_| outcomes.random::<f64>() < p).count() as u32;
        trial.record_cohort(dc, dlt)?;
    }
    Ok(trial)
}

pub fn run_trial(scenario: &Scenario, design: &Arc<Design>, seed: u64) -> Result<TrialResult> {
    let trial = simulate_trial_with(scenario, design, seed, |_, _| {})?;
    let state = trial.state();
    Ok(TrialResult {
        selected: trial.finalize().selected,
        n: state.dcs.map(|_, s| s.obs.n),
        y: state.dcs.map(|_, s| s.obs.y),
        enrolled: state.enrolled(),
        stop_reason: state.stop_reason,
        dcs_used: state.dcs_used(),
    })
}

/// Scalar operating characteristics for one scenario, or their cross-scenario
/// mean or standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub pcs: f64,
    pub pos: f64,
    pub pus: f64,
    /// Fraction of trials selecting nothing.
    pub no_selection: f64,
    pub avg_nsel: f64,
    pub ca: f64,
    pub oa: f64,
    pub ua: f64,
    pub total: f64,
    pub accuracy_index: f64,
    pub assignment_index: f64,
    pub dcs_used: f64,
}

impl Metrics {
    pub const FIELDS: [&'static str; 12] = [
        "pcs",
        "pos",
        "pus",
        "no_selection",
        "avg_nsel",
        "ca",
        "oa",
        "ua",
        "total",
        "accuracy_index",
        "assignment_index",
        "dcs_used",
    ];

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.pcs,
            self.pos,
            self.pus,
            self.no_selection,
            self.avg_nsel,
            self.ca,
            self.oa,
            self.ua,
            self.total,
            self.accuracy_index,
            self.assignment_index,
            self.dcs_used,
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        let [pcs, pos, pus, no_selection, avg_nsel, ca, oa, ua, total, accuracy_index, assignment_index, dcs_used] = a;
        Self { pcs, pos, pus, no_selection, avg_nsel, ca, oa, ua, total, accuracy_index, assignment_index, dcs_used }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSummary {
    pub scenario_id: String,
    pub n_reps: usize,
    pub truth: TrueClassification,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Fraction of trials selecting each combination.
    pub selection_freq: DcMap<f64>,
    /// Mean patients per combination.
    pub mean_patients: DcMap<f64>,
}

/// `1 - I*J * sum(rho * w) / sum(rho)` with `rho = |p - p_T|`. Equals 1 when
/// every true probability is on target.
fn weighted_distance_index(weights: &DcMap<f64>, truth: &DcMap<f64>, p_t: f64) -> f64 {
    assert_eq!(weights.grid(), truth.grid(), "grid mismatch");
    let rho: Vec<f64> = truth.values().iter().map(|p| (p - p_t).abs()).collect();
    let total: f64 = rho.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    let mass: f64 = rho.iter().zip(weights.values()).map(|(r, w)| r * w).sum();
    1.0 - truth.grid().len() as f64 * mass / total
}

pub fn accuracy_index(selection_freq: &DcMap<f64>, truth: &DcMap<f64>, p_t: f64) -> f64 {
    weighted_distance_index(selection_freq, truth, p_t)
}

pub fn assignment_index(allocation: &DcMap<f64>, truth: &DcMap<f64>, p_t: f64) -> f64 {
    weighted_distance_index(allocation, truth, p_t)
}

pub fn compute_metrics(scenario: &Scenario, results: &[TrialResult], ei: &EquivalenceInterval) -> Result<OcSummary> {
    if results.is_empty() {
        return Err(Error::InvalidParams("no trial results to summarize".into()));
    }
    let matrix = scenario.matrix();
    let grid = matrix.grid();
    let truth = classify_truth(matrix, ei);
    let reps = results.len() as f64;
    let frac = |f: &dyn Fn(&TrialResult) -> bool| results.iter().filter(|r| f(r)).count() as f64 / reps;

    let pcs = if truth.mtdc_set.is_empty() {
        frac(&|r| r.selected.is_none())
    } else {
        frac(&|r| r.selected.is_some_and(|dc| truth.is_mtdc(dc)))
    };
    let pos = frac(&|r| r.selected.is_some_and(|dc| truth.is_over(dc)));
    let pus = frac(&|r| r.selected.is_some_and(|dc| truth.is_under(dc)));
    let no_selection = frac(&|r| r.selected.is_none());

    let mut selection_freq = DcMap::filled(grid, 0.0);
    let mut mean_patients = DcMap::filled(grid, 0.0);
    for r in results {
        if let Some(dc) = r.selected {
            selection_freq[dc] += 1.0;
        }
        for (dc, &n) in r.n.iter() {
            mean_patients[dc] += f64::from(n);
        }
    }
    let selection_freq = selection_freq.map(|_, c| c / reps);
    let mean_patients = mean_patients.map(|_, n| n / reps);
    let patients_in = |set: &[DcCoord]| set.iter().map(|&dc| mean_patients[dc]).sum::<f64>();
    let total = results.iter().map(|r| f64::from(r.enrolled)).sum::<f64>() / reps;
    let allocation = mean_patients.map(|_, n| n / total);
    let p_t = ei.target();

    let metrics = Metrics {
        pcs,
        pos,
        pus,
        no_selection,
        avg_nsel: 1.0 - no_selection,
        ca: patients_in(&truth.mtdc_set),
        oa: patients_in(&truth.over_set),
        ua: patients_in(&truth.under_set),
        total,
        accuracy_index: accuracy_index(&selection_freq, matrix, p_t),
        assignment_index: assignment_index(&allocation, matrix, p_t),
        dcs_used: results.iter().map(|r| r.dcs_used as f64).sum::<f64>() / reps,
    };
    Ok(OcSummary { scenario_id: scenario.id().to_string(), n_reps: results.len(), truth, metrics, selection_freq, mean_patients })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcReport {
    pub variant: Variant,
    pub n_reps: u32,
    pub master_seed: u64,
    pub params: DesignParams,
    pub scenarios: Vec<OcSummary>,
    /// Mean across scenarios of the per-scenario values.
    pub mean: Metrics,
    /// Sample standard deviation across scenarios; zero for a single scenario.
    pub sd: Metrics,
}

pub fn run_oc(config: &SimConfig) -> Result<OcReport> {
    if config.n_reps == 0 {
        return Err(Error::InvalidParams("n_reps must be at least 1".into()));
    }
    let Some(first) = config.scenarios.first() else {
        return Err(Error::InvalidParams("no scenarios to simulate".into()));
    };
    let params = config.variant.apply(&config.params);
    let design = Arc::new(Design::new(first.matrix().grid(), params.clone())?);
    let reps = config.n_reps as usize;
    let jobs = config.scenarios.len() * reps;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder.build().map_err(|e| Error::InvalidParams(format!("cannot start workers: {e}")))?;
    let results: Vec<TrialResult> = pool.install(|| {
        (0..jobs)
            .into_par_iter()
            .map(|k| {
                let (s, r) = (k / reps, k % reps);
                run_trial(&config.scenarios[s], &design, trial_seed(config.master_seed, s as u64, r as u64))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let summaries = config
        .scenarios
        .iter()
        .zip(results.chunks(reps))
        .map(|(s, chunk)| compute_metrics(s, chunk, &params.ei))
        .collect::<Result<Vec<_>>>()?;
    let (mean, sd) = mean_sd(&summaries);
    Ok(OcReport { variant: config.variant, n_reps: config.n_reps, master_seed: config.master_seed, params, scenarios: summaries, mean, sd })
}

fn mean_sd(summaries: &[OcSummary]) -> (Metrics, Metrics) {
    let k = summaries.len() as f64;
    let rows: Vec<[f64; 12]> = summaries.iter().map(|s| s.metrics.to_array()).collect();
    let mut mean = [0.0; 12];
    let mut sd = [0.0; 12];
    for f in 0..12 {
        mean[f] = rows.iter().map(|r| r[f]).sum::<f64>() / k;
        if summaries.len() > 1 {
            sd[f] = (rows.iter().map(|r| (r[f] - mean[f]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        }
    }
    (Metrics::from_array(mean), Metrics::from_array(sd))
}

impl OcReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per scenario followed by `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("scenario,category,{}\n", Metrics::FIELDS.join(","));
        let row = |out: &mut String, id: &str, cat: &str, m: &Metrics| {
            let vals: Vec<String> = m.to_array().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{id},{cat},{}", vals.join(","));
        };
        for s in &self.scenarios {
            row(&mut out, &s.scenario_id, s.truth.category.bucket(), &s.metrics);
        }
        row(&mut out, "mean", "", &self.mean);
        row(&mut out, "sd", "", &self.sd);
        out
    }

    /// Long format for stacked bar charts: selection outcomes (correct, over,
    /// under, none) and allocation (correct, over, under) per scenario.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("scenario,panel,outcome,value\n");
        for s in &self.scenarios {
            let m = &s.metrics;
            for (panel, outcome, v) in [
                ("selection", "correct", m.pcs),
                ("selection", "over", m.pos),
                ("selection", "under", m.pus),
                ("selection", "none", m.no_selection),
                ("allocation", "correct", m.ca),
                ("allocation", "over", m.oa),
                ("allocation", "under", m.ua),
            ] {
                let _ = writeln!(out, "{},{panel},{outcome},{v:.6}", s.scenario_id);
            }
        }
        out
    }

    /// Mean (sd) per column, one line per metric.
    pub fn to_table(&self) -> String {
        let mut out = format!("variant {} | {} scenarios x {} reps\n", self.variant.name(), self.scenarios.len(), self.n_reps);
        for ((name, m), s) in Metrics::FIELDS.iter().zip(self.mean.to_array()).zip(self.sd.to_array()) {
            let _ = writeln!(out, "{name:>17}  {m:.3} ({s:.3})");
        }
        out
    }
}
