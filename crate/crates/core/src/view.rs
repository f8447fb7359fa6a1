//! Read-only snapshot of a trial for display: per-combination data and
//! posteriors, the candidate sets around the current combination, and the most
//! recent step. Used by both the command line and the HTTP service.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::Decision;
use crate::engine::{Candidate, Recommendation, Stage, StepReport, StopReason, Trial};
use crate::grid::{adjacent_sets, DcCoord, DoseGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellView {
    pub dc: DcCoord,
    pub y: u32,
    pub n: u32,
    /// Posterior probability of lying in the EI.
    pub xi: f64,
    pub excluded: bool,
    /// Rule outcome on the data at this combination, when tested.
    pub decision: Option<Decision>,
    pub is_current: bool,
    /// Which candidate set of the current combination this cell belongs to.
    pub candidate_of: Option<Decision>,
}

/// Admissible members of the three candidate sets around the current combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub escalate: Vec<Candidate>,
    pub stay: Vec<Candidate>,
    pub deescalate: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub grid: DoseGrid,
    pub stage: Stage,
    pub recommendation: Recommendation,
    pub current: DcCoord,
    pub stop_reason: Option<StopReason>,
    pub enrolled: u32,
    pub max_n: u32,
    pub cohort_size: u32,
    pub cohorts: usize,
    pub overridden_cohorts: usize,
    pub cells: Vec<CellView>,
    pub candidate_sets: CandidateView,
    pub last_step: Option<StepReport>,
}

impl Trial {
    pub fn view(&self) -> TrialView {
        let state = self.state();
        let rules = self.design().rules();
        let grid = state.grid;
        let current = state.current;
        let sets = adjacent_sets(&grid, current);
        let membership = |dc: DcCoord| {
            if sets.escalate.contains(&dc) {
                Some(Decision::Escalate)
            } else if sets.stay.contains(&dc) {
                Some(Decision::Stay)
            } else if sets.deescalate.contains(&dc) {
                Some(Decision::DeEscalate)
            } else {
                None
            }
        };
        let candidate = |dc: DcCoord| {
            let obs = state.obs(dc);
            Candidate { dc, obs, xi: rules.xi(obs), decision: rules.decision(obs) }
        };
        let admissible = |v: &[DcCoord]| v.iter().copied().filter(|c| !state.is_excluded(*c)).map(candidate).collect();
        let cells = grid
            .coords()
            .map(|dc| {
                let s = state.dcs[dc];
                CellView {
                    dc,
                    y: s.obs.y,
                    n: s.obs.n,
                    xi: rules.xi(s.obs),
                    excluded: s.excluded,
                    decision: rules.decision(s.obs),
                    is_current: dc == current,
                    candidate_of: membership(dc),
                }
            })
            .collect();
        TrialView {
            grid,
            stage: state.stage,
            recommendation: state.recommendation(),
            current,
            stop_reason: state.stop_reason,
            enrolled: state.enrolled(),
            max_n: state.params.max_n,
            cohort_size: state.params.cohort_size,
            cohorts: state.log.len(),
            overridden_cohorts: state.log.iter().filter(|r| r.overridden).count(),
            cells,
            candidate_sets: CandidateView {
                escalate: admissible(&sets.escalate),
                stay: admissible(&sets.stay),
                deescalate: admissible(&sets.deescalate),
            },
            last_step: state.last_step.clone(),
        }
    }
}

impl TrialView {
    /// Grid of `y/n` cells with agent A levels increasing upward, as usually
    /// drawn. `*` marks the current combination and `x` excluded ones.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stage: {}   enrolled: {}/{}", stage_name(self.stage), self.enrolled, self.max_n);
        for i in (1..=self.grid.rows).rev() {
            let _ = write!(out, "A{i:<3}");
            for j in 1..=self.grid.cols {
                let c = &self.cells[self.grid.index(DcCoord::new(i, j))];
                let mark = if c.excluded {
                    'x'
                } else if c.is_current {
                    '*'
                } else {
                    ' '
                };
                let _ = write!(out, " {:>6}{mark}", format!("{}/{}", c.y, c.n));
            }
            out.push('\n');
        }
        out.push_str("    ");
        for j in 1..=self.grid.cols {
            let _ = write!(out, " {:>6} ", format!("B{j}"));
        }
        out.push('\n');
        if let Some(step) = &self.last_step {
            out.push_str(&step.to_text());
        }
        match self.recommendation {
            Recommendation::Assign(dc) => {
                let _ = writeln!(out, "next cohort: {dc}");
            }
            Recommendation::Stop(reason) => {
                let _ = writeln!(out, "trial stopped: {}", stop_name(reason));
            }
        }
        out
    }
}

impl StepReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} with {}/{}: decision {}",
            self.from,
            self.obs.y,
            self.obs.n,
            self.decision.code()
        );
        if let Some(a) = self.applied.filter(|a| *a != self.decision) {
            let _ = write!(out, " (searched {})", a.code());
        }
        out.push('\n');
        for c in &self.candidates {
            let _ = writeln!(out, "  candidate {:<6} {:>3}/{:<3} xi = {:.4}", c.dc.to_string(), c.obs.y, c.obs.n, c.xi);
        }
        if !self.ring.is_empty() {
            let ring: Vec<String> = self.ring.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "  exploring untested: {}", ring.join(", "));
        }
        out
    }
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::StageI => "I",
        Stage::StageII => "II",
        Stage::Stopped => "stopped",
    }
}

pub fn stop_name(reason: StopReason) -> &'static str {
    match reason {
        StopReason::D11Toxic => "lowest combination is unacceptably toxic",
        StopReason::MaxN => "maximum sample size reached",
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::engine::{Design, DesignParams};

    #[test]
    fn candidate_membership_around_center() {
        let design = Design::new(DoseGrid::new(5, 5).unwrap(), DesignParams::default()).unwrap();
        let mut t = Trial::new(Arc::new(design));
        for (dc, y) in [(DcCoord::new(1, 1), 0), (DcCoord::new(2, 1), 0), (DcCoord::new(2, 2), 0), (DcCoord::new(3, 2), 0)] {
            t.record_cohort(dc, y).unwrap();
        }
        assert_eq!(t.next_assignment(), Recommendation::Assign(DcCoord::new(3, 3)));
        let v = t.view();
        let count = |d| v.cells.iter().filter(|c| c.candidate_of == Some(d)).count();
        assert_eq!((count(Decision::Escalate), count(Decision::Stay), count(Decision::DeEscalate)), (2, 3, 2));
        assert_eq!(v.candidate_sets.stay.len(), 3);
        assert!(v.to_text().contains("next cohort: d33"));
    }
}
