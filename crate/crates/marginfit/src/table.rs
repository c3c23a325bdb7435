//! Contingency-table schema, lexicographic cell indexing, and the canonical
//! log-linear coordinate system.
//!
//! The canonical parameters `theta` of a table with `t` cells live in a
//! `(t-1)`-dimensional space fixed by a full-column-rank design matrix `G`
//! and a matching row-contrast matrix `L` with `L * G = I`.  The mapping to
//! joint probabilities is
//!
//! ```text
//! log(pi) = G*theta - 1 * logsumexp(G*theta)   <=>   theta = L * log(pi)
//! ```
//!
//! Cells are ordered lexicographically with the *last* variable varying
//! fastest; every margin and contrast construction in this crate honours the
//! same convention.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Margins smaller than this are rejected with a conditioning error wherever
/// `diag(M*pi)` must be inverted.
pub const MARGIN_FLOOR: f64 = 1e-12;

/// Cell probabilities below this are flagged as boundary drift.
pub const BOUNDARY_PI: f64 = 1e-10;

/// Dimensions of a multi-way contingency table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    dims: Vec<usize>,
    t: usize,
}

impl TableSchema {
    /// Builds a schema from per-variable category counts.  Every count must
    /// be at least 2 and the list must be nonempty.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDimensions("empty dimension list".into()));
        }
        if let Some(&bad) = dims.iter().find(|&&c| c < 2) {
            return Err(Error::InvalidDimensions(format!(
                "every variable needs at least 2 categories, found {bad}"
            )));
        }
        let t = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            t,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.dims.len()
    }

    /// Total number of cells `t`.
    pub fn num_cells(&self) -> usize {
        self.t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Lexicographic index of a cell given 0-based levels, last variable
    /// fastest.  Panics if the tuple has the wrong length or a level is out
    /// of range.
    pub fn cell_index(&self, levels: &[usize]) -> usize {
        assert_eq!(levels.len(), self.dims.len(), "level tuple length");
        let mut idx = 0;
        for (&lv, &c) in levels.iter().zip(&self.dims) {
            assert!(lv < c, "level {lv} out of range for {c} categories");
            idx = idx * c + lv;
        }
        idx
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_levels(&self, mut index: usize) -> Vec<usize> {
        assert!(index < self.t, "cell index out of range");
        let mut levels = vec![0; self.dims.len()];
        for (slot, &c) in levels.iter_mut().zip(&self.dims).rev() {
            *slot = index % c;
            index /= c;
        }
        levels
    }

    /// Default canonical basis for this table size.
    pub fn default_basis(&self) -> CanonicalBasis {
        CanonicalBasis::default_for(self.t)
    }
}

/// Strictly positive cell probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(DVector<f64>);

impl ProbVector {
    /// Validates strict positivity and unit sum (tolerance 1e-12).
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbabilities("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probability vector".into()));
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, &v)| v <= 0.0) {
            return Err(Error::InvalidProbabilities(format!(
                "entry {i} is {v}; all cell probabilities must be strictly positive"
            )));
        }
        let sum: f64 = values.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProbabilities(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    /// Normalizes a strictly positive vector to sum to one.
    pub fn normalized(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::InvalidProbabilities(
                "normalization requires strictly positive finite entries".into(),
            ));
        }
        let sum = values.sum();
        Self::new(values / sum)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.min()
    }
}

/// Nonnegative cell counts with their total.
#[derive(Debug, Clone, PartialEq)]
pub struct CountVector {
    values: DVector<f64>,
    n: f64,
}

impl CountVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidCounts("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("count vector".into()));
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(Error::InvalidCounts(format!("entry {i} is negative ({v})")));
        }
        let n = values.sum();
        if n <= 0.0 {
            return Err(Error::InvalidCounts("total count is zero".into()));
        }
        Ok(Self { values, n })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Smoothed empirical probabilities `(y + 1/2) / (n + t/2)`, strictly
    /// positive even with observed zeros.  Standard starting point for fits.
    pub fn smoothed_probs(&self) -> ProbVector {
        let t = self.values.len() as f64;
        let denom = self.n + t / 2.0;
        ProbVector::new(self.values.map(|y| (y + 0.5) / denom))
            .expect("smoothed probabilities are interior by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// `G` is the identity of size `t` with the first column removed and
    /// `L = (-1 | I)`.  Enables the explicit Fisher-information inverse.
    Default,
    Custom,
}

/// Full-rank design matrix `G` (t x (t-1)) together with a row-contrast
/// matrix `L` ((t-1) x t) satisfying `L * G = I`.
#[derive(Debug, Clone)]
pub struct CanonicalBasis {
    g: DMatrix<f64>,
    l: DMatrix<f64>,
    kind: BasisKind,
}

impl CanonicalBasis {
    /// Default basis for a table with `t` cells: `G` is the identity with
    /// the first column removed, `L` contrasts every cell against the first.
    pub fn default_for(t: usize) -> Self {
        assert!(t >= 2, "a table needs at least 2 cells");
        let g = DMatrix::from_fn(t, t - 1, |i, j| if i == j + 1 { 1.0 } else { 0.0 });
        let l = DMatrix::from_fn(t - 1, t, |i, j| {
            if j == 0 {
                -1.0
            } else if j == i + 1 {
                1.0
            } else {
                0.0
            }
        });
        Self {
            g,
            l,
            kind: BasisKind::Default,
        }
    }

    /// Wraps a user-supplied pair, checking `L * G = I` and that the rows of
    /// `L` are contrasts (sum to zero).
    pub fn custom(g: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self> {
        let t = g.nrows();
        if g.ncols() != t - 1 || l.nrows() != t - 1 || l.ncols() != t {
            return Err(Error::DimensionMismatch {
                what: "canonical basis (G, L)".into(),
                expected: (t, t - 1),
                found: (g.nrows(), g.ncols()),
            });
        }
        let prod = &l * &g;
        let id = DMatrix::<f64>::identity(t - 1, t - 1);
        if (&prod - &id).amax() > 1e-10 {
            return Err(Error::InvalidDimensions(
                "L * G must equal the identity".into(),
            ));
        }
        for i in 0..l.nrows() {
            if l.row(i).sum().abs() > 1e-10 {
                return Err(Error::InvalidDimensions(format!(
                    "row {i} of L is not a contrast (sums to {})",
                    l.row(i).sum()
                )));
            }
        }
        Ok(Self {
            g,
            l,
            kind: BasisKind::Custom,
        })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of cells `t`.
    pub fn num_cells(&self) -> usize {
        self.g.nrows()
    }

    /// Dimension of the canonical parameter, `t - 1`.
    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    /// Maps canonical parameters to cell probabilities,
    /// `log(pi) = G*theta - 1*logsumexp(G*theta)`.
    ///
    /// The normalizer is evaluated with max-subtraction; a `theta` so extreme
    /// that cells underflow to zero is reported as a boundary error.
    pub fn theta_to_pi(&self, theta: &DVector<f64>) -> Result<ProbVector> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "theta".into(),
                expected: (self.dim(), 1),
                found: (theta.len(), 1),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        let z = &self.g * theta;
        let zmax = z.max();
        let w = z.map(|v| (v - zmax).exp());
        let total = w.sum();
        let pi = w / total;
        let min = pi.min();
        if min <= 0.0 {
            return Err(Error::BoundaryProbability { min });
        }
        ProbVector::new(pi)
    }

    /// Maps strictly positive probabilities back to canonical parameters,
    /// `theta = L * log(pi)`.
    pub fn pi_to_theta(&self, pi: &ProbVector) -> DVector<f64> {
        let log_pi = pi.values().map(f64::ln);
        &self.l * log_pi
    }
}
