//! Dose-combination lattice: coordinates, per-DC storage, adjacency and escalation paths.
//!
//! Coordinates are 1-based. `i` indexes agent A, `j` indexes agent B, and toxicity
//! is assumed nondecreasing in both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DcCoord {
    pub i: u32,
    pub j: u32,
}

impl DcCoord {
    pub const fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }

    pub const ORIGIN: DcCoord = DcCoord::new(1, 1);

    /// Componentwise order: `self` is known to be no more toxic than `other`.
    pub fn le_partial(&self, other: &DcCoord) -> bool {
        self.i <= other.i && self.j <= other.j
    }

    fn offset(&self, di: i64, dj: i64) -> Option<DcCoord> {
        let i = i64::from(self.i) + di;
        let j = i64::from(self.j) + dj;
        if i < 1 || j < 1 {
            return None;
        }
        Some(DcCoord::new(i as u32, j as u32))
    }
}

impl fmt::Display for DcCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.i < 10 && self.j < 10 {
            write!(f, "d{}{}", self.i, self.j)
        } else {
            write!(f, "d{},{}", self.i, self.j)
        }
    }
}

impl FromStr for DcCoord {
    type Err = Error;

    /// Accepts `i,j`, `(i,j)`, `d32` or `d3,2`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('d').trim_matches(|c| c == '(' || c == ')');
        let bad = || Error::Parse(format!("cannot parse dose combination {s:?}"));
        let (i, j) = match t.split_once(',') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None if t.len() == 2 && t.chars().all(|c| c.is_ascii_digit()) => {
                let d: Vec<u32> = t.chars().map(|c| c.to_digit(10).unwrap()).collect();
                (d[0], d[1])
            }
            None => return Err(bad()),
        };
        if i == 0 || j == 0 {
            return Err(bad());
        }
        Ok(DcCoord::new(i, j))
    }
}

/// Chebyshev distance; `b` is an "M-degree" neighbour of `a` for `M = dc_distance(a, b)`.
pub fn dc_distance(a: DcCoord, b: DcCoord) -> u32 {
    a.i.abs_diff(b.i).max(a.j.abs_diff(b.j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseGrid {
    /// Levels of agent A.
    pub rows: u32,
    /// Levels of agent B.
    pub cols: u32,
}

impl DoseGrid {
    pub fn new(rows: u32, cols: u32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParams(format!(
                "grid must have at least one level per agent, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, dc: DcCoord) -> bool {
        (1..=self.rows).contains(&dc.i) && (1..=self.cols).contains(&dc.j)
    }

    pub fn check(&self, dc: DcCoord) -> Result<()> {
        if self.contains(dc) {
            Ok(())
        } else {
            Err(Error::OffGrid { dc, rows: self.rows, cols: self.cols })
        }
    }

    pub fn top(&self) -> DcCoord {
        DcCoord::new(self.rows, self.cols)
    }

    pub fn index(&self, dc: DcCoord) -> usize {
        debug_assert!(self.contains(dc));
        ((dc.i - 1) * self.cols + (dc.j - 1)) as usize
    }

    pub fn coord(&self, index: usize) -> DcCoord {
        let index = index as u32;
        DcCoord::new(index / self.cols + 1, index % self.cols + 1)
    }

    /// Row-major iteration.
    pub fn coords(&self) -> impl Iterator<Item = DcCoord> + '_ {
        (0..self.len()).map(|k| self.coord(k))
    }

    fn shifted(&self, dc: DcCoord, di: i64, dj: i64) -> Option<DcCoord> {
        dc.offset(di, dj).filter(|c| self.contains(*c))
    }

    /// `dc` and every combination at least as high in both agents.
    pub fn upward_set(&self, dc: DcCoord) -> impl Iterator<Item = DcCoord> + '_ {
        self.coords().filter(move |c| dc.le_partial(c))
    }
}

/// Dense per-DC storage, row-major. Serialized as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<T>>", try_from = "Vec<Vec<T>>")]
#[serde(bound(serialize = "T: Clone + Serialize", deserialize = "T: Clone + Deserialize<'de>"))]
pub struct DcMap<T> {
    grid: DoseGrid,
    data: Vec<T>,
}

impl<T> DcMap<T> {
    pub fn from_fn(grid: DoseGrid, mut f: impl FnMut(DcCoord) -> T) -> Self {
        let data = grid.coords().map(&mut f).collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> DoseGrid {
        self.grid
    }

    pub fn get(&self, dc: DcCoord) -> Option<&T> {
        self.grid.contains(dc).then(|| &self.data[self.grid.index(dc)])
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (DcCoord, &T)> + '_ {
        self.data.iter().enumerate().map(|(k, v)| (self.grid.coord(k), v))
    }

    pub fn map<U>(&self, mut f: impl FnMut(DcCoord, &T) -> U) -> DcMap<U> {
        DcMap {
            grid: self.grid,
            data: self.iter().map(|(c, v)| f(c, v)).collect(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks(self.grid.cols as usize)
    }
}

impl<T: Clone> DcMap<T> {
    pub fn filled(grid: DoseGrid, value: T) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::Parse("matrix rows must be nonempty and equally long".into()));
        }
        let grid = DoseGrid::new(r as u32, c as u32)?;
        Ok(Self { grid, data: rows.into_iter().flatten().collect() })
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.rows().map(<[T]>::to_vec).collect()
    }
}

impl<T> std::ops::Index<DcCoord> for DcMap<T> {
    type Output = T;
    fn index(&self, dc: DcCoord) -> &T {
        assert!(self.grid.contains(dc), "{dc} outside grid");
        &self.data[self.grid.index(dc)]
    }
}

impl<T> std::ops::IndexMut<DcCoord> for DcMap<T> {
    fn index_mut(&mut self, dc: DcCoord) -> &mut T {
        assert!(self.grid.contains(dc), "{dc} outside grid");
        let k = self.grid.index(dc);
        &mut self.data[k]
    }
}

impl<T: Clone> From<DcMap<T>> for Vec<Vec<T>> {
    fn from(m: DcMap<T>) -> Self {
        m.to_rows()
    }
}

impl<T: Clone> TryFrom<Vec<Vec<T>>> for DcMap<T> {
    type Error = Error;
    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        DcMap::from_rows(rows)
    }
}

/// The 1-degree neighbourhoods reachable after an escalate, stay or de-escalate decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub escalate: Vec<DcCoord>,
    pub stay: Vec<DcCoord>,
    pub deescalate: Vec<DcCoord>,
}

/// Offsets whose coordinate sum is +1, 0 and -1 respectively, pruned to the grid.
/// Exclusion is not applied here.
pub fn adjacent_sets(grid: &DoseGrid, dc: DcCoord) -> CandidateSets {
    let pick = |offsets: &[(i64, i64)]| -> Vec<DcCoord> {
        let mut v: Vec<DcCoord> = offsets.iter().filter_map(|&(di, dj)| grid.shifted(dc, di, dj)).collect();
        v.sort();
        v
    };
    CandidateSets {
        escalate: pick(&[(1, 0), (0, 1)]),
        stay: pick(&[(0, 0), (1, -1), (-1, 1)]),
        deescalate: pick(&[(-1, 0), (0, -1)]),
    }
}

/// Untested combinations that are orderless (anti-diagonal 1-degree neighbours) to
/// some member of `omega`. `untested` decides eligibility; callers fold exclusion
/// into it.
pub fn orderless_ring(grid: &DoseGrid, omega: &[DcCoord], untested: impl Fn(DcCoord) -> bool) -> Vec<DcCoord> {
    let mut out: Vec<DcCoord> = omega
        .iter()
        .flat_map(|&kl| [(0, 0), (1, -1), (-1, 1)].into_iter().filter_map(move |(dp, dq)| grid.shifted(kl, dp, dq)))
        .filter(|&pq| untested(pq))
        .collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathChoice {
    /// Agent B first, then agent A.
    P1,
    /// Agent A first, then agent B.
    P2,
    /// Alternate, starting with agent A.
    P3,
    Custom(Vec<DcCoord>),
}

impl FromStr for PathChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(PathChoice::P1),
            "P2" => Ok(PathChoice::P2),
            "P3" => Ok(PathChoice::P3),
            other => Err(Error::Parse(format!("unknown escalation path {other:?}, expected P1, P2 or P3"))),
        }
    }
}

/// A completely ordered chain from (1,1) to (I,J), each step raising one agent by one level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DcCoord>", into = "Vec<DcCoord>")]
pub struct EscalationPath(Vec<DcCoord>);

impl EscalationPath {
    pub fn new(grid: &DoseGrid, steps: Vec<DcCoord>) -> Result<Self> {
        let path = Self::try_from(steps)?;
        let last = *path.0.last().unwrap();
        if last != grid.top() {
            return Err(Error::InvalidPath(format!("must end at {}, ends at {last}", grid.top())));
        }
        Ok(path)
    }

    pub fn resolve(grid: &DoseGrid, choice: &PathChoice) -> Result<Self> {
        let [p1, p2, p3] = standard_paths(grid);
        match choice {
            PathChoice::P1 => Ok(p1),
            PathChoice::P2 => Ok(p2),
            PathChoice::P3 => Ok(p3),
            PathChoice::Custom(steps) => Self::new(grid, steps.clone()),
        }
    }

    pub fn steps(&self) -> &[DcCoord] {
        &self.0
    }

    pub fn position(&self, dc: DcCoord) -> Option<usize> {
        self.0.iter().position(|&c| c == dc)
    }

    /// The member following `dc`, or `None` at the terminus or when `dc` is off the path.
    pub fn next_after(&self, dc: DcCoord) -> Option<DcCoord> {
        self.position(dc).and_then(|k| self.0.get(k + 1).copied())
    }
}

impl TryFrom<Vec<DcCoord>> for EscalationPath {
    type Error = Error;
    fn try_from(steps: Vec<DcCoord>) -> Result<Self> {
        if steps.first() != Some(&DcCoord::ORIGIN) {
            return Err(Error::InvalidPath("must start at d11".into()));
        }
        for w in steps.windows(2) {
            let (a, b) = (w[0], w[1]);
            let up_one = (b.i == a.i + 1 && b.j == a.j) || (b.i == a.i && b.j == a.j + 1);
            if !up_one {
                return Err(Error::InvalidPath(format!("step {a} -> {b} must raise exactly one agent by one level")));
            }
        }
        Ok(Self(steps))
    }
}

impl From<EscalationPath> for Vec<DcCoord> {
    fn from(p: EscalationPath) -> Self {
        p.0
    }
}

pub fn standard_paths(grid: &DoseGrid) -> [EscalationPath; 3] {
    let (rows, cols) = (grid.rows, grid.cols);
    let p1 = (1..=cols).map(|j| DcCoord::new(1, j)).chain((2..=rows).map(|i| DcCoord::new(i, cols))).collect();
    let p2 = (1..=rows).map(|i| DcCoord::new(i, 1)).chain((2..=cols).map(|j| DcCoord::new(rows, j))).collect();
    let mut p3 = vec![DcCoord::ORIGIN];
    let mut cur = DcCoord::ORIGIN;
    let mut raise_a = true;
    while cur != grid.top() {
        let a_ok = cur.i < rows;
        let b_ok = cur.j < cols;
        if (raise_a && a_ok) || !b_ok {
            cur.i += 1;
        } else {
            cur.j += 1;
        }
        raise_a = !raise_a;
        p3.push(cur);
    }
    [EscalationPath(p1), EscalationPath(p2), EscalationPath(p3)]
}
