//! Shortest-path pseudometric induced by an arbitrary non-negative function
//! on a finite state set, plus checks of its properties.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_STATES: usize = 64;
/// Comparison slack for float-valued matrices.
pub const FLOAT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("at most {MAX_STATES} states are supported, got {0}")]
    TooLarge(usize),
    #[error("matrix must be {n}x{n}: {detail}")]
    Shape { n: usize, detail: String },
    #[error("entry d[{i}][{j}] = {value} is negative or NaN")]
    Negative { i: usize, j: usize, value: f64 },
    #[error("state index {index} out of range for {n} states")]
    Index { index: usize, n: usize },
    #[error("empty path")]
    EmptyPath,
    #[error("embedding table has {got} rows, expected {n}")]
    Embedding { n: usize, got: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDistance {
    n: usize,
    d: Vec<Vec<f64>>,
}

impl FiniteDistance {
    pub fn new(d: Vec<Vec<f64>>) -> Result<Self, PseudoError> {
        let n = d.len();
        if n > MAX_STATES {
            return Err(PseudoError::TooLarge(n));
        }
        for (i, row) in d.iter().enumerate() {
            if row.len() != n {
                return Err(PseudoError::Shape {
                    n,
                    detail: format!("row {i} has {} entries", row.len()),
                });
            }
            for (j, &value) in row.iter().enumerate() {
                if !(value >= 0.0) {
                    return Err(PseudoError::Negative { i, j, value });
                }
            }
        }
        Ok(Self { n, d })
    }

    /// Parses `{"n": int, "d": [[...]]}`.
    pub fn from_json(text: &str) -> Result<Self, PseudoError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            n: usize,
            d: Vec<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.d.len() != raw.n {
            return Err(PseudoError::Shape {
                n: raw.n,
                detail: format!("{} rows", raw.d.len()),
            });
        }
        Self::new(raw.d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedMetric {
    n: usize,
    dtilde: Vec<Vec<f64>>,
}

impl InducedMetric {
    /// Wraps a matrix without checking any axioms.
    pub fn from_matrix(dtilde: Vec<Vec<f64>>) -> Self {
        Self {
            n: dtilde.len(),
            dtilde,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.dtilde
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dtilde[i][j]
    }

    pub fn to_finite_distance(&self) -> Result<FiniteDistance, PseudoError> {
        FiniteDistance::new(self.dtilde.clone())
    }
}

/// `min(d, d^T)` entrywise.
pub fn symmetrize(fd: &FiniteDistance) -> Vec<Vec<f64>> {
    (0..fd.n)
        .map(|i| (0..fd.n).map(|j| fd.d[i][j].min(fd.d[j][i])).collect())
        .collect()
}

/// Sum of symmetrized costs along consecutive states of `path`.
pub fn path_cost(fd: &FiniteDistance, path: &[usize]) -> Result<f64, PseudoError> {
    if path.is_empty() {
        return Err(PseudoError::EmptyPath);
    }
    if let Some(&index) = path.iter().find(|&&i| i >= fd.n) {
        return Err(PseudoError::Index { index, n: fd.n });
    }
    Ok(path
        .windows(2)
        .map(|w| fd.d[w[0]][w[1]].min(fd.d[w[1]][w[0]]))
        .sum())
}

/// Shortest symmetrized path cost between every pair, zero on the diagonal.
/// Dense Dijkstra from every source.
pub fn induce(fd: &FiniteDistance) -> InducedMetric {
    let n = fd.n;
    let ds = symmetrize(fd);
    let mut out = vec![vec![f64::INFINITY; n]; n];
    for (src, row) in out.iter_mut().enumerate() {
        let mut done = vec![false; n];
        row[src] = 0.0;
        for _ in 0..n {
            let Some(u) = (0..n)
                .filter(|&v| !done[v] && row[v].is_finite())
                .min_by(|&a, &b| row[a].total_cmp(&row[b]))
            else {
                break;
            };
            done[u] = true;
            for v in 0..n {
                let via = row[u] + ds[u][v];
                if via < row[v] {
                    row[v] = via;
                }
            }
        }
    }
    // both directions are valid path costs; the smaller makes the result
    // exactly symmetric under rounding
    for i in 0..n {
        for j in 0..i {
            let m = out[i][j].min(out[j][i]);
            out[i][j] = m;
            out[j][i] = m;
        }
        out[i][i] = 0.0;
    }
    InducedMetric { n, dtilde: out }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AxiomReport {
    Pass,
    NonzeroDiagonal { i: usize, value: f64 },
    Asymmetric { i: usize, j: usize, dij: f64, dji: f64 },
    Triangle { x: usize, y: usize, z: usize, direct: f64, via: f64 },
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        matches!(self, AxiomReport::Pass)
    }
}

/// Zero diagonal, symmetry and every triangle `d(x,z) <= d(x,y) + d(y,z)`,
/// each up to `tol`. Reports the first violation found.
pub fn check_axioms(im: &InducedMetric, tol: f64) -> AxiomReport {
    let d = &im.dtilde;
    let n = im.n;
    for i in 0..n {
        if d[i][i].abs() > tol {
            return AxiomReport::NonzeroDiagonal { i, value: d[i][i] };
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if (d[i][j] - d[j][i]).abs() > tol {
                return AxiomReport::Asymmetric {
                    i,
                    j,
                    dij: d[i][j],
                    dji: d[j][i],
                };
            }
        }
    }
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let via = d[x][y] + d[y][z];
                if d[x][z] > via + tol {
                    return AxiomReport::Triangle {
                        x,
                        y,
                        z,
                        direct: d[x][z],
                        via,
                    };
                }
            }
        }
    }
    AxiomReport::Pass
}

#[derive(Debug, Clone, PartialEq)]
pub enum LowerBoundReport {
    Pass,
    Negative { i: usize, j: usize, value: f64 },
    Exceeds { i: usize, j: usize, dtilde: f64, d: f64 },
    SizeMismatch { fd: usize, im: usize },
}

impl LowerBoundReport {
    pub fn passed(&self) -> bool {
        matches!(self, LowerBoundReport::Pass)
    }
}

/// `0 <= dtilde(x,y) <= d(x,y)` for every ordered pair.
pub fn check_lower_bound(fd: &FiniteDistance, im: &InducedMetric, tol: f64) -> LowerBoundReport {
    if fd.n != im.n {
        return LowerBoundReport::SizeMismatch { fd: fd.n, im: im.n };
    }
    for i in 0..fd.n {
        for j in 0..fd.n {
            let t = im.dtilde[i][j];
            if t < -tol {
                return LowerBoundReport::Negative { i, j, value: t };
            }
            if t > fd.d[i][j] + tol {
                return LowerBoundReport::Exceeds {
                    i,
                    j,
                    dtilde: t,
                    d: fd.d[i][j],
                };
            }
        }
    }
    LowerBoundReport::Pass
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// First ordered pair with `||phi(x) - phi(y)|| > d(x, y)`.
    pub original_violation: Option<(usize, usize)>,
    /// First ordered pair with `||phi(x) - phi(y)|| > dtilde(x, y)`.
    pub induced_violation: Option<(usize, usize)>,
}

impl EquivalenceReport {
    pub fn original_holds(&self) -> bool {
        self.original_violation.is_none()
    }

    pub fn induced_holds(&self) -> bool {
        self.induced_violation.is_none()
    }

    /// Both constraint sets agree on this embedding.
    pub fn consistent(&self) -> bool {
        self.original_holds() == self.induced_holds()
    }
}

/// Evaluates both constraint sets on the embedding table `phi` (one row per
/// state) and reports where each one fails.
pub fn check_constraint_equivalence(
    fd: &FiniteDistance,
    im: &InducedMetric,
    phi: &[Vec<f64>],
    tol: f64,
) -> Result<EquivalenceReport, PseudoError> {
    if phi.len() != fd.n || im.n != fd.n {
        return Err(PseudoError::Embedding {
            n: fd.n,
            got: phi.len(),
        });
    }
    let dist = |i: usize, j: usize| {
        phi[i]
            .iter()
            .zip(&phi[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let first = |m: &dyn Fn(usize, usize) -> f64| {
        (0..fd.n)
            .flat_map(|i| (0..fd.n).map(move |j| (i, j)))
            .find(|&(i, j)| dist(i, j) > m(i, j) + tol)
    };
    Ok(EquivalenceReport {
        original_violation: first(&|i, j| fd.d[i][j]),
        induced_violation: first(&|i, j| im.dtilde[i][j]),
    })
}
