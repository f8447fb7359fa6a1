//! Final MTDC selection from isotonically smoothed posterior means.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{prob_exceeds, BetaParams, DoseObservation, BOUNDARY_SLACK};
use crate::engine::{pick_uniform, StopReason, TrialState};
use crate::grid::{DcCoord, DcMap};
use crate::isotonic::bivariate_isotonic;

const ESTIMATE_TIE: f64 = 1e-12;

/// Why a combination could not be selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elimination {
    TooFewPatients,
    Excluded,
    ProbablyToxic,
    AboveInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionCell {
    pub dc: DcCoord,
    #[serde(flatten)]
    pub obs: DoseObservation,
    pub raw_estimate: f64,
    pub isotonic_estimate: f64,
    pub eliminated: Option<Elimination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtdcResult {
    pub selected: Option<DcCoord>,
    pub stop_reason: Option<StopReason>,
    pub enrolled: u32,
    pub cohorts: usize,
    pub overridden_cohorts: usize,
    pub cells: Vec<SelectionCell>,
}

impl MtdcResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dc,i,j,y,n,raw_estimate,isotonic_estimate,eliminated,selected\n");
        for c in &self.cells {
            let elim = c.eliminated.map(|e| serde_json::to_value(e).unwrap().as_str().unwrap().to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{},{}\n",
                c.dc,
                c.dc.i,
                c.dc.j,
                c.obs.y,
                c.obs.n,
                c.raw_estimate,
                c.isotonic_estimate,
                elim,
                self.selected == Some(c.dc)
            ));
        }
        out
    }
}

/// Posterior means `(y + a) / (n + a + b)` and their weights `n + a + b`.
pub fn posterior_mean_matrix(obs: &DcMap<DoseObservation>, prior: &BetaParams) -> (DcMap<f64>, DcMap<f64>) {
    let means = obs.map(|_, o| prior.posterior(*o).mean());
    let weights = obs.map(|_, o| f64::from(o.n) + prior.alpha() + prior.beta());
    (means, weights)
}

/// Selects the combination whose smoothed toxicity estimate is closest to the
/// target among combinations with enough data that are not judged too toxic.
pub fn select_mtdc<R: Rng>(state: &TrialState, rng: &mut R) -> MtdcResult {
    let params = &state.params;
    let ei = &params.ei;
    let obs = state.observations();
    let (raw, weights) = posterior_mean_matrix(&obs, &params.selection_prior);
    let smooth = bivariate_isotonic(&raw, &weights);

    let cells: Vec<SelectionCell> = state
        .grid
        .coords()
        .map(|dc| {
            let o = obs[dc];
            let p = smooth[dc];
            let eliminated = if state.is_excluded(dc) {
                Some(Elimination::Excluded)
            } else if o.n <= params.selection_min_n {
                Some(Elimination::TooFewPatients)
            } else if prob_exceeds(o, &BetaParams::UNIFORM, ei.target()) > params.exclusion_threshold {
                Some(Elimination::ProbablyToxic)
            } else if p > ei.upper() + BOUNDARY_SLACK {
                Some(Elimination::AboveInterval)
            } else {
                None
            };
            SelectionCell { dc, obs: o, raw_estimate: raw[dc], isotonic_estimate: p, eliminated }
        })
        .collect();

    let selected = if state.stop_reason == Some(StopReason::D11Toxic) {
        None
    } else {
        let eligible: Vec<&SelectionCell> = cells.iter().filter(|c| c.eliminated.is_none()).collect();
        choose_closest(&eligible, ei.target(), rng)
    };

    MtdcResult {
        selected,
        stop_reason: state.stop_reason,
        enrolled: state.enrolled(),
        cohorts: state.log.len(),
        overridden_cohorts: state.log.iter().filter(|r| r.overridden).count(),
        cells,
    }
}

fn choose_closest<R: Rng>(eligible: &[&SelectionCell], target: f64, rng: &mut R) -> Option<DcCoord> {
    let dist = |c: &SelectionCell| (c.isotonic_estimate - target).abs();
    let best = eligible.iter().map(|c| dist(c)).fold(f64::INFINITY, f64::min);
    let mut tied: Vec<&SelectionCell> = eligible.iter().copied().filter(|c| dist(c) - best <= ESTIMATE_TIE).collect();
    if tied.is_empty() {
        return None;
    }
    // Equal distance on both sides of the target: the lower estimate wins.
    let below = |c: &&SelectionCell| c.isotonic_estimate <= target;
    if tied.iter().any(below) && !tied.iter().all(below) {
        tied.retain(below);
    }
    if tied.len() == 1 {
        return Some(tied[0].dc);
    }
    let same_row = tied.iter().all(|c| c.dc.i == tied[0].dc.i);
    let same_col = tied.iter().all(|c| c.dc.j == tied[0].dc.j);
    if same_row || same_col {
        // Along one agent the estimates are ordered; take the highest dose when
        // below the target and the lowest when above.
        let dcs = tied.iter().map(|c| c.dc);
        return if tied[0].isotonic_estimate <= target { dcs.max() } else { dcs.min() };
    }
    let options: Vec<DcCoord> = tied.iter().map(|c| c.dc).collect();
    Some(pick_uniform(rng, &options))
}
