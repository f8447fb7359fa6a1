//! Two-agent combination dose finding with interval-based up-and-down rules.

pub mod design;
pub mod engine;
pub mod error;
pub mod grid;
pub mod isotonic;
pub mod scenario;
pub mod selection;
pub mod simulator;
pub mod view;

pub use design::{BetaParams, Decision, DecisionTable, DoseObservation, EquivalenceInterval};
pub use engine::{CohortRecord, Design, DesignParams, Recommendation, Stage, StepReport, StopReason, Trial, TrialState};
pub use error::{Error, Result};
pub use grid::{DcCoord, DcMap, DoseGrid, EscalationPath, PathChoice};
pub use scenario::{classify_truth, Category, Scenario, TrueClassification};
pub use selection::{select_mtdc, MtdcResult};
pub use simulator::{run_oc, OcReport, SimConfig, Variant};
