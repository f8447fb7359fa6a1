//! True toxicity scenarios and their ground-truth classification.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::design::{EquivalenceInterval, BOUNDARY_SLACK};
use crate::error::{Error, Result};
use crate::grid::{DcCoord, DcMap};

/// Single-agent toxicity curves used to generate the 100-scenario suite.
pub const STUDY2_CURVES: [[f64; 4]; 5] = [
    [0.15, 0.30, 0.45, 0.60],
    [0.10, 0.20, 0.30, 0.40],
    [0.08, 0.16, 0.24, 0.44],
    [0.06, 0.12, 0.18, 0.24],
    [0.26, 0.38, 0.50, 0.62],
];

/// Interaction coefficients, ascending.
pub const STUDY2_ETAS: [f64; 4] = [-2.0, -0.2, 0.2, 0.7];

/// How a generated scenario was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// 1-based index into [`STUDY2_CURVES`] for agent A.
    pub curve_a: usize,
    pub curve_b: usize,
    pub eta: f64,
}

/// Matrix of true toxicity probabilities, nondecreasing in both agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario", into = "RawScenario")]
pub struct Scenario {
    id: String,
    label: String,
    matrix: DcMap<f64>,
    intended_mtdcs: Vec<DcCoord>,
    generator: Option<Generator>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    id: String,
    #[serde(default)]
    label: String,
    matrix: DcMap<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    intended_mtdcs: Vec<DcCoord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<Generator>,
}

impl TryFrom<RawScenario> for Scenario {
    type Error = Error;
    fn try_from(r: RawScenario) -> Result<Self> {
        let mut s = Scenario::new(r.id, r.label, r.matrix)?;
        for dc in &r.intended_mtdcs {
            s.matrix.grid().check(*dc)?;
        }
        s.intended_mtdcs = r.intended_mtdcs;
        s.generator = r.generator;
        Ok(s)
    }
}

impl From<Scenario> for RawScenario {
    fn from(s: Scenario) -> Self {
        RawScenario { id: s.id, label: s.label, matrix: s.matrix, intended_mtdcs: s.intended_mtdcs, generator: s.generator }
    }
}

impl Scenario {
    pub fn new(id: impl Into<String>, label: impl Into<String>, matrix: DcMap<f64>) -> Result<Self> {
        let id = id.into();
        for (dc, &p) in matrix.iter() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidScenario(format!("{id}: p at {dc} is {p}, outside (0, 1)")));
            }
        }
        for (dc, &p) in matrix.iter() {
            for next in [DcCoord::new(dc.i + 1, dc.j), DcCoord::new(dc.i, dc.j + 1)] {
                if let Some(&q) = matrix.get(next) {
                    if q < p {
                        return Err(Error::InvalidScenario(format!("{id}: p decreases from {dc} to {next}")));
                    }
                }
            }
        }
        Ok(Self { id, label: label.into(), matrix, intended_mtdcs: Vec::new(), generator: None })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn matrix(&self) -> &DcMap<f64> {
        &self.matrix
    }

    /// Combinations marked as MTDCs by whoever wrote the scenario; empty when unknown.
    pub fn intended_mtdcs(&self) -> &[DcCoord] {
        &self.intended_mtdcs
    }

    pub fn generator(&self) -> Option<Generator> {
        self.generator
    }

    /// Writes the matrix as comma-separated rows, agent A levels down, agent B across.
    pub fn to_csv(&self) -> String {
        self.matrix
            .rows()
            .map(|row| row.iter().map(|p| format!("{p}")).collect::<Vec<_>>().join(","))
            .map(|line| line + "\n")
            .collect()
    }

    /// Reads a matrix written by [`Scenario::to_csv`]. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_csv(id: &str, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", k + 1))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Scenario::new(id, "", DcMap::from_rows(rows)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Odds-interaction combination of two single-agent curves:
/// `odds_ij = odds(1 - (1 - pA_i)(1 - pB_j)) * exp(eta)`.
pub fn combine(pa: &[f64], pb: &[f64], eta: f64) -> Result<DcMap<f64>> {
    for (name, curve) in [("A", pa), ("B", pb)] {
        if curve.is_empty() || curve.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidScenario(format!("agent {name} curve must be nonempty with entries in (0, 1)")));
        }
        if curve.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidScenario(format!("agent {name} curve must be nondecreasing")));
        }
    }
    let factor = eta.exp();
    let rows = pa
        .iter()
        .map(|&a| {
            pb.iter()
                .map(|&b| {
                    let p0 = a + b - a * b;
                    let odds = p0 / (1.0 - p0) * factor;
                    odds / (1.0 + odds)
                })
                .collect()
        })
        .collect();
    DcMap::from_rows(rows)
}

/// Percentages by row, with the combinations marked as MTDCs.
type PercentScenario = ([[u32; 4]; 4], &'static [(u32, u32)]);

fn percent_matrix(rows: [[u32; 4]; 4]) -> DcMap<f64> {
    DcMap::from_rows(rows.iter().map(|r| r.iter().map(|&v| f64::from(v) / 100.0).collect()).collect()).unwrap()
}

/// The eight 4x4 scenarios of the first simulation study, with their marked MTDCs.
pub fn builtin_study1() -> Vec<Scenario> {
    let table: [PercentScenario; 8] = [
        ([[4, 8, 12, 16], [10, 14, 18, 22], [16, 20, 24, 28], [22, 26, 30, 34]], &[(3, 4), (4, 2), (4, 3), (4, 4)]),
        ([[2, 4, 6, 8], [5, 7, 9, 11], [8, 10, 12, 14], [11, 13, 15, 17]], &[(4, 4)]),
        ([[10, 20, 30, 40], [25, 35, 45, 55], [40, 50, 60, 70], [55, 65, 75, 85]], &[(1, 3), (2, 1), (2, 2)]),
        ([[44, 48, 52, 56], [50, 54, 58, 62], [56, 60, 64, 68], [62, 66, 70, 74]], &[]),
        (
            [[8, 18, 28, 29], [9, 19, 29, 30], [10, 20, 30, 31], [11, 21, 31, 41]],
            &[(1, 3), (1, 4), (2, 3), (2, 4), (3, 3), (3, 4), (4, 3)],
        ),
        ([[12, 13, 14, 15], [16, 18, 20, 22], [44, 45, 46, 47], [50, 52, 54, 55]], &[(2, 4)]),
        ([[1, 2, 3, 4], [4, 10, 15, 20], [6, 15, 30, 45], [10, 30, 50, 80]], &[(3, 3), (4, 2)]),
        ([[1, 2, 3, 4], [4, 10, 15, 20], [6, 15, 30, 36], [10, 30, 38, 40]], &[(3, 3), (4, 2)]),
    ];
    table
        .into_iter()
        .enumerate()
        .map(|(k, (m, bold))| {
            let mut s = Scenario::new(format!("study1/sc{}", k + 1), format!("Study 1 scenario {}", k + 1), percent_matrix(m))
                .expect("builtin scenario is valid");
            s.intended_mtdcs = bold.iter().map(|&(i, j)| DcCoord::new(i, j)).collect();
            s
        })
        .collect()
}

/// All ordered pairs of the five single-agent curves crossed with four
/// interaction coefficients: agent-A curve varies slowest, then agent-B curve,
/// then eta ascending. IDs are `study2/000` to `study2/099` in that order.
pub fn builtin_study2() -> Vec<Scenario> {
    let mut out = Vec::with_capacity(100);
    for (a, ca) in STUDY2_CURVES.iter().enumerate() {
        for (b, cb) in STUDY2_CURVES.iter().enumerate() {
            for &eta in &STUDY2_ETAS {
                let k = out.len();
                let m = combine(ca, cb, eta).expect("builtin curves are valid");
                let mut s = Scenario::new(
                    format!("study2/{k:03}"),
                    format!("A curve {}, B curve {}, eta {eta}", a + 1, b + 1),
                    m,
                )
                .expect("generated scenario is valid");
                s.generator = Some(Generator { curve_a: a + 1, curve_b: b + 1, eta });
                out.push(s);
            }
        }
    }
    out
}

/// Looks up a suite (`study1`, `study2`) or a single scenario (`study1/sc3`,
/// `study2/042`).
pub fn builtin(id: &str) -> Result<Vec<Scenario>> {
    let suite = match id.split('/').next().unwrap_or_default() {
        "study1" => builtin_study1(),
        "study2" => builtin_study2(),
        _ => return Err(Error::InvalidScenario(format!("unknown builtin {id:?}; expected study1 or study2"))),
    };
    if !id.contains('/') {
        return Ok(suite);
    }
    suite
        .into_iter()
        .find(|s| s.id == id)
        .map(|s| vec![s])
        .ok_or_else(|| Error::InvalidScenario(format!("unknown builtin scenario {id:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Every combination is below the EI.
    AllSafe,
    /// Number of true MTDCs, counting the fallback set when nothing lies in the EI.
    Mtdcs(usize),
    /// Every combination is above the EI; the correct action is to select nothing.
    AllToxic,
}

impl Category {
    /// Histogram bucket: `all_safe`, `1`, `2`, `3`, `>3` or `all_toxic`.
    pub fn bucket(&self) -> &'static str {
        match self {
            Category::AllSafe => "all_safe",
            Category::AllToxic => "all_toxic",
            Category::Mtdcs(1) => "1",
            Category::Mtdcs(2) => "2",
            Category::Mtdcs(3) => "3",
            Category::Mtdcs(_) => ">3",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.bucket())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueClassification {
    pub mtdc_set: Vec<DcCoord>,
    pub over_set: Vec<DcCoord>,
    pub under_set: Vec<DcCoord>,
    /// No combination lies in the EI and the MTDC set holds the highest
    /// combinations below the target instead.
    pub fallback: bool,
    pub category: Category,
}

impl TrueClassification {
    pub fn is_mtdc(&self, dc: DcCoord) -> bool {
        self.mtdc_set.binary_search(&dc).is_ok()
    }

    pub fn is_over(&self, dc: DcCoord) -> bool {
        self.over_set.binary_search(&dc).is_ok()
    }

    pub fn is_under(&self, dc: DcCoord) -> bool {
        self.under_set.binary_search(&dc).is_ok()
    }
}

/// True MTDCs are the combinations inside the EI; if there are none, the maximal
/// combinations (in the partial order) with `p < p_T`. Other combinations are
/// overdoses above the EI and underdoses otherwise.
pub fn classify_truth(matrix: &DcMap<f64>, ei: &EquivalenceInterval) -> TrueClassification {
    let coords: Vec<DcCoord> = matrix.grid().coords().collect();
    let mut mtdc_set: Vec<DcCoord> = coords.iter().copied().filter(|&c| ei.contains(matrix[c])).collect();
    let fallback = mtdc_set.is_empty();
    if fallback {
        let below: Vec<DcCoord> = coords.iter().copied().filter(|&c| matrix[c] < ei.target() - BOUNDARY_SLACK).collect();
        mtdc_set = below.iter().copied().filter(|a| !below.iter().any(|b| b != a && a.le_partial(b))).collect();
    }
    let over_set: Vec<DcCoord> =
        coords.iter().copied().filter(|c| !mtdc_set.contains(c) && ei.is_above(matrix[*c])).collect();
    let under_set: Vec<DcCoord> =
        coords.iter().copied().filter(|c| !mtdc_set.contains(c) && !over_set.contains(c)).collect();
    let category = if matrix.values().iter().all(|&p| ei.is_below(p)) {
        Category::AllSafe
    } else if matrix.values().iter().all(|&p| ei.is_above(p)) {
        Category::AllToxic
    } else {
        Category::Mtdcs(mtdc_set.len())
    };
    TrueClassification { mtdc_set, over_set, under_set, fallback, category }
}

/// Counts of scenarios per category bucket.
pub fn category_histogram(scenarios: &[Scenario], ei: &EquivalenceInterval) -> BTreeMap<&'static str, usize> {
    let mut hist = BTreeMap::new();
    for key in ["all_safe", "1", "2", "3", ">3", "all_toxic"] {
        hist.insert(key, 0);
    }
    for s in scenarios {
        *hist.get_mut(classify_truth(s.matrix(), ei).category.bucket()).unwrap() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(i: u32, j: u32) -> DcCoord {
        DcCoord::new(i, j)
    }

    #[test]
    fn combine_examples() {
        let at = |eta| combine(&[0.15], &[0.10], eta).unwrap()[d(1, 1)];
        assert!((at(0.0) - 0.235).abs() < 1e-12);
        assert!((at(0.7) - 0.3821836).abs() < 1e-7);
        assert!((at(-2.0) - 0.0399142).abs() < 1e-7);
        let top = combine(&STUDY2_CURVES[0], &STUDY2_CURVES[0], 0.7).unwrap()[d(4, 4)];
        assert!((top - 0.9135860).abs() < 1e-7);
    }

    #[test]
    fn combine_rejects_bad_curves() {
        assert!(combine(&[0.2, 0.1], &[0.1], 0.0).is_err());
        assert!(combine(&[1.0], &[0.1], 0.0).is_err());
        assert!(combine(&[], &[0.1], 0.0).is_err());
    }

    #[test]
    fn study1_entries_and_truth() {
        let s = builtin_study1();
        assert_eq!(s.len(), 8);
        let ei = EquivalenceInterval::default();
        assert_eq!(s[0].matrix()[d(1, 1)], 0.04);
        assert_eq!(s[7].matrix()[d(4, 4)], 0.40);
        assert_eq!(classify_truth(s[3].matrix(), &ei).category, Category::AllToxic);
        assert_eq!(classify_truth(s[2].matrix(), &ei).mtdc_set, vec![d(1, 3), d(2, 1), d(2, 2)]);
        let sc2 = classify_truth(s[1].matrix(), &ei);
        assert!(sc2.fallback);
        assert_eq!(sc2.mtdc_set, vec![d(4, 4)]);
        for sc in &s {
            assert_eq!(classify_truth(sc.matrix(), &ei).mtdc_set, sc.intended_mtdcs(), "{}", sc.id());
        }
    }

    #[test]
    fn uniform_low_matrix_falls_back_to_top() {
        let m = DcMap::filled(crate::grid::DoseGrid::new(3, 2).unwrap(), 0.05);
        let t = classify_truth(&m, &EquivalenceInterval::default());
        assert_eq!(t.mtdc_set, vec![d(3, 2)]);
        assert_eq!(t.category, Category::AllSafe);
        assert_eq!(t.under_set.len(), 5);
    }

    #[test]
    fn study2_order_and_ids() {
        let s = builtin_study2();
        assert_eq!(s.len(), 100);
        assert_eq!(s[0].id(), "study2/000");
        assert_eq!(s[0].generator(), Some(Generator { curve_a: 1, curve_b: 1, eta: -2.0 }));
        assert_eq!(s[99].generator(), Some(Generator { curve_a: 5, curve_b: 5, eta: 0.7 }));
        assert_eq!(s[5].generator(), Some(Generator { curve_a: 1, curve_b: 2, eta: -0.2 }));
        assert_eq!(builtin("study2/042").unwrap()[0], s[42]);
        assert!(builtin("study3").is_err());
        assert!(builtin("study1/sc9").is_err());
    }

    #[test]
    fn rejects_non_monotone_matrix() {
        let m = DcMap::from_rows(vec![vec![0.2, 0.1]]).unwrap();
        assert!(Scenario::new("x", "", m).is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let s = builtin_study1().remove(6);
        let back = Scenario::from_csv("study1/sc7", &s.to_csv()).unwrap();
        assert_eq!(back.matrix(), s.matrix());
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
        assert!(Scenario::from_json(r#"{"id":"x","matrix":[[0.3,0.2]]}"#).is_err());
    }
}
