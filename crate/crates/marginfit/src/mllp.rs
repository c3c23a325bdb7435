//! Marginal log-linear parameterizations: margins, effects, the matrices
//! `C` and `M`, and the map `eta = C * log(M * pi)` together with its
//! Jacobian machinery.
//!
//! A parameterization lists margins (subsets of the variables) in
//! non-decreasing inclusion order and assigns every interaction effect to a
//! margin containing it.  It is *complete* when every nonempty effect is
//! assigned to exactly one margin, and *hierarchical* when no effect that
//! fits inside a margin is assigned to a later one.  Completeness is what
//! makes constrained models smooth, so the fitting routines refuse
//! parameterizations that are not complete.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::table::{CanonicalBasis, ProbVector, TableSchema, MARGIN_FLOOR};

/// A subset of the table's variables, stored as a bitmask over 0-based
/// variable indices.  Supports at most 16 variables, far beyond the dense
/// desk-scale tables this crate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarSet(u32);

impl VarSet {
    pub const MAX_VARS: usize = 16;

    pub fn empty() -> Self {
        VarSet(0)
    }

    pub fn from_indices(vars: &[usize]) -> Self {
        let mut bits = 0u32;
        for &v in vars {
            assert!(v < Self::MAX_VARS, "variable index {v} out of range");
            bits |= 1 << v;
        }
        VarSet(bits)
    }

    /// The full set {0, .., d-1}.
    pub fn full(d: usize) -> Self {
        assert!(d <= Self::MAX_VARS);
        VarSet((1u32 << d) - 1)
    }

    pub fn contains(&self, var: usize) -> bool {
        var < Self::MAX_VARS && self.0 & (1 << var) != 0
    }

    pub fn is_subset_of(&self, other: &VarSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn cardinality(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Member variables in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..Self::MAX_VARS).filter(move |&v| self.contains(v))
    }

    pub fn max_var(&self) -> Option<usize> {
        (0..Self::MAX_VARS).rev().find(|&v| self.contains(v))
    }

    /// All nonempty subsets, in (cardinality, bitmask) order.
    pub fn nonempty_subsets(&self) -> Vec<VarSet> {
        let mask = self.0;
        let mut subs = Vec::new();
        let mut s = mask;
        while s != 0 {
            subs.push(VarSet(s));
            s = (s - 1) & mask;
        }
        subs.sort_by_key(|v| (v.cardinality(), v.0));
        subs
    }

    /// Ordering used for canonical effect listings: by cardinality, then by
    /// bitmask.
    pub fn canonical_key(&self) -> (usize, u32) {
        (self.cardinality(), self.0)
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, v) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

/// Contrast coding for the parameters of one effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coding {
    /// Contrasts against the first level within each margin.
    #[default]
    Baseline,
    /// Sum-to-zero contrasts (deviations from the margin mean).
    Effect,
}

/// Ordered margins plus the effect-to-margin assignment defining a marginal
/// log-linear parameterization.
#[derive(Debug, Clone)]
pub struct MllpSpec {
    margins: Vec<VarSet>,
    /// (effect, margin index) pairs; duplicates representable so that the
    /// validator can report them.
    assignment: Vec<(VarSet, usize)>,
    coding: Coding,
    coding_overrides: Vec<(VarSet, Coding)>,
}

impl MllpSpec {
    /// Builds the standard hierarchical parameterization for an ordered
    /// margin list: every effect is assigned to the first margin containing
    /// it.
    pub fn hierarchical(margins: Vec<VarSet>, coding: Coding) -> Self {
        let mut assignment = Vec::new();
        let mut seen: Vec<VarSet> = Vec::new();
        for (j, margin) in margins.iter().enumerate() {
            for sub in margin.nonempty_subsets() {
                if !seen.contains(&sub) {
                    seen.push(sub);
                    assignment.push((sub, j));
                }
            }
        }
        Self {
            margins,
            assignment,
            coding,
            coding_overrides: Vec::new(),
        }
    }

    /// Single-margin parameterization over the whole table (ordinary
    /// log-linear parameters).
    pub fn saturated(d: usize, coding: Coding) -> Self {
        Self::hierarchical(vec![VarSet::full(d)], coding)
    }

    /// Explicit effect assignment; validated lazily by
    /// [`validate_spec`].
    pub fn with_assignment(
        margins: Vec<VarSet>,
        assignment: Vec<(VarSet, usize)>,
        coding: Coding,
    ) -> Self {
        Self {
            margins,
            assignment,
            coding,
            coding_overrides: Vec::new(),
        }
    }

    pub fn set_coding_override(&mut self, effect: VarSet, coding: Coding) {
        self.coding_overrides.retain(|(e, _)| *e != effect);
        self.coding_overrides.push((effect, coding));
    }

    pub fn margins(&self) -> &[VarSet] {
        &self.margins
    }

    pub fn assignment(&self) -> &[(VarSet, usize)] {
        &self.assignment
    }

    pub fn coding_for(&self, effect: VarSet) -> Coding {
        self.coding_overrides
            .iter()
            .find(|(e, _)| *e == effect)
            .map(|(_, c)| *c)
            .unwrap_or(self.coding)
    }

    pub fn validate(&self, schema: &TableSchema) -> SpecReport {
        validate_spec(self, schema)
    }
}

/// One validation finding; the validator never fails, it reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecViolation {
    VarOutOfRange { margin: VarSet, var: usize },
    DuplicateMargin { first: usize, second: usize },
    MarginOrder { earlier: usize, later: usize },
    EffectOutsideMargin { effect: VarSet, margin: usize },
    EffectUnassigned { effect: VarSet },
    EffectMultiplyAssigned { effect: VarSet, margins: Vec<usize> },
    EffectAssignedLate { effect: VarSet, assigned: usize, containing: usize },
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::VarOutOfRange { margin, var } => {
                write!(f, "margin {margin} references variable {var} outside the schema")
            }
            SpecViolation::DuplicateMargin { first, second } => {
                write!(f, "margins #{first} and #{second} are identical")
            }
            SpecViolation::MarginOrder { earlier, later } => write!(
                f,
                "margin #{later} is contained in the earlier margin #{earlier}; \
                 list margins in non-decreasing inclusion order"
            ),
            SpecViolation::EffectOutsideMargin { effect, margin } => {
                write!(f, "effect {effect} is not a subset of its margin #{margin}")
            }
            SpecViolation::EffectUnassigned { effect } => {
                write!(f, "effect {effect} is not defined in any margin")
            }
            SpecViolation::EffectMultiplyAssigned { effect, margins } => {
                write!(f, "effect {effect} is defined in margins {margins:?}")
            }
            SpecViolation::EffectAssignedLate {
                effect,
                assigned,
                containing,
            } => write!(
                f,
                "effect {effect} fits in margin #{containing} but is defined in the later margin #{assigned}"
            ),
        }
    }
}

/// Validity report: completeness and hierarchy flags plus every violation
/// found.  Fitting requires a complete parameterization with margins in
/// non-decreasing order; validation itself never rejects.
#[derive(Debug, Clone)]
pub struct SpecReport {
    pub complete: bool,
    pub hierarchical: bool,
    pub violations: Vec<SpecViolation>,
}

impl SpecReport {
    /// True when the spec can be handed to the fitting routines.
    pub fn fit_ready(&self) -> bool {
        self.complete
            && !self.violations.iter().any(|v| {
                matches!(
                    v,
                    SpecViolation::VarOutOfRange { .. }
                        | SpecViolation::DuplicateMargin { .. }
                        | SpecViolation::MarginOrder { .. }
                        | SpecViolation::EffectOutsideMargin { .. }
                )
            })
    }

    pub fn violation_strings(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }
}

/// Checks completeness (every nonempty effect defined in precisely one
/// margin), hierarchy (no effect defined later than a margin containing it),
/// margin ordering, and basic well-formedness.
pub fn validate_spec(spec: &MllpSpec, schema: &TableSchema) -> SpecReport {
    let d = schema.num_vars();
    let full = VarSet::full(d);
    let mut violations = Vec::new();

    for margin in spec.margins() {
        if let Some(var) = margin.iter().find(|&v| v >= d) {
            violations.push(SpecViolation::VarOutOfRange { margin: *margin, var });
        }
        if margin.is_empty() {
            violations.push(SpecViolation::VarOutOfRange { margin: *margin, var: 0 });
        }
    }

    let mut order_ok = true;
    for j in 1..spec.margins().len() {
        for i in 0..j {
            if spec.margins()[j] == spec.margins()[i] {
                violations.push(SpecViolation::DuplicateMargin { first: i, second: j });
                order_ok = false;
            } else if spec.margins()[j].is_subset_of(&spec.margins()[i]) {
                violations.push(SpecViolation::MarginOrder { earlier: i, later: j });
                order_ok = false;
            }
        }
    }

    for &(effect, margin) in spec.assignment() {
        if margin >= spec.margins().len() || !effect.is_subset_of(&spec.margins()[margin]) {
            violations.push(SpecViolation::EffectOutsideMargin { effect, margin });
        }
    }

    // Completeness: every nonempty subset of the full variable set assigned
    // exactly once.
    let mut complete = true;
    for effect in full.nonempty_subsets() {
        let homes: Vec<usize> = spec
            .assignment()
            .iter()
            .filter(|(e, _)| *e == effect)
            .map(|(_, j)| *j)
            .collect();
        match homes.len() {
            0 => {
                complete = false;
                violations.push(SpecViolation::EffectUnassigned { effect });
            }
            1 => {}
            _ => {
                complete = false;
                violations.push(SpecViolation::EffectMultiplyAssigned {
                    effect,
                    margins: homes,
                });
            }
        }
    }

    // Hierarchy relative to the listed ordering.
    let mut hierarchy_ok = true;
    for &(effect, assigned) in spec.assignment() {
        for (j, margin) in spec.margins().iter().enumerate().take(assigned) {
            if effect.is_subset_of(margin) {
                violations.push(SpecViolation::EffectAssignedLate {
                    effect,
                    assigned,
                    containing: j,
                });
                hierarchy_ok = false;
                break;
            }
        }
    }

    SpecReport {
        complete,
        hierarchical: order_ok && hierarchy_ok,
        violations,
    }
}

/// Location of one margin's rows inside the stacked matrix `M`.
#[derive(Debug, Clone)]
pub struct MarginBlock {
    pub vars: VarSet,
    pub offset: usize,
    pub cells: usize,
}

/// Location of one effect's coordinates inside `eta`.
#[derive(Debug, Clone)]
pub struct EffectBlock {
    pub effect: VarSet,
    pub margin: usize,
    pub offset: usize,
    pub len: usize,
    pub coding: Coding,
}

/// Identifies a single `eta` coordinate: its effect, host margin, and the
/// (0-based) level of each effect variable.  Level 0 is the reference level
/// and never appears here.
#[derive(Debug, Clone)]
pub struct CoordinateDescriptor {
    pub effect: VarSet,
    pub margin_vars: VarSet,
    /// One (variable, level) pair per effect variable, increasing order.
    pub levels: Vec<(usize, usize)>,
}

/// The matrices of the map `eta = C * log(M * pi)` for a complete
/// parameterization: `C` is `(t-1) x u` with zero-sum rows, `M` is `u x t`
/// with 0/1 entries stacking the margins.
#[derive(Debug, Clone)]
pub struct MllpMatrices {
    c: DMatrix<f64>,
    m: DMatrix<f64>,
    margins: Vec<MarginBlock>,
    effects: Vec<EffectBlock>,
    dims: Vec<usize>,
}

impl MllpMatrices {
    /// Builds `(C, M)` for a complete spec.  Rejects incomplete specs and
    /// margin-order violations, and verifies that the Jacobian of
    /// `pi -> C log(M pi)` is invertible at the uniform distribution.
    pub fn build(spec: &MllpSpec, schema: &TableSchema) -> Result<Self> {
        let report = validate_spec(spec, schema);
        if !report.complete {
            return Err(Error::IncompleteSpec {
                violations: report.violation_strings(),
            });
        }
        if !report.fit_ready() {
            return Err(Error::MarginOrder(report.violation_strings().join("; ")));
        }

        let t = schema.num_cells();
        let d = schema.num_vars();
        let dims = schema.dims().to_vec();

        // M blocks: Kronecker product over all variables of either the
        // identity (variable in the margin) or a row of ones (marginalized
        // out); this matches the last-variable-fastest cell order.
        let mut margin_blocks = Vec::with_capacity(spec.margins().len());
        let mut m_rows: Vec<DMatrix<f64>> = Vec::with_capacity(spec.margins().len());
        let mut u = 0;
        for margin in spec.margins() {
            let mut block = DMatrix::from_element(1, 1, 1.0);
            for v in 0..d {
                let factor = if margin.contains(v) {
                    DMatrix::identity(dims[v], dims[v])
                } else {
                    DMatrix::from_element(1, dims[v], 1.0)
                };
                block = block.kronecker(&factor);
            }
            margin_blocks.push(MarginBlock {
                vars: *margin,
                offset: u,
                cells: block.nrows(),
            });
            u += block.nrows();
            m_rows.push(block);
        }
        let mut m = DMatrix::zeros(u, t);
        for (mb, rows) in margin_blocks.iter().zip(&m_rows) {
            m.view_mut((mb.offset, 0), (rows.nrows(), t)).copy_from(rows);
        }

        // C blocks: for each margin, its effects in canonical order; the
        // contrast for one effect is the Kronecker product over the margin's
        // variables of a per-variable contrast (effect variables) or a
        // reference row (remaining variables).
        let mut effect_blocks = Vec::new();
        let mut c_parts: Vec<(usize, DMatrix<f64>)> = Vec::new();
        let mut eta_offset = 0;
        for (j, margin) in spec.margins().iter().enumerate() {
            let mut effects: Vec<VarSet> = spec
                .assignment()
                .iter()
                .filter(|(_, mj)| *mj == j)
                .map(|(e, _)| *e)
                .collect();
            effects.sort_by_key(|e| e.canonical_key());
            for effect in effects {
                let coding = spec.coding_for(effect);
                let mut block = DMatrix::from_element(1, 1, 1.0);
                for v in margin.iter() {
                    let cv = dims[v];
                    let factor = if effect.contains(v) {
                        contrast_rows(cv, coding)
                    } else {
                        reference_row(cv, coding)
                    };
                    block = block.kronecker(&factor);
                }
                effect_blocks.push(EffectBlock {
                    effect,
                    margin: j,
                    offset: eta_offset,
                    len: block.nrows(),
                    coding,
                });
                eta_offset += block.nrows();
                c_parts.push((margin_blocks[j].offset, block));
            }
        }
        debug_assert_eq!(eta_offset, t - 1, "complete spec yields t-1 parameters");

        let mut c = DMatrix::zeros(t - 1, u);
        let mut row = 0;
        for (col_offset, block) in &c_parts {
            c.view_mut((row, *col_offset), (block.nrows(), block.ncols()))
                .copy_from(block);
            row += block.nrows();
        }

        let built = Self {
            c,
            m,
            margins: margin_blocks,
            effects: effect_blocks,
            dims,
        };

        // Invertibility of the eta/theta Jacobian at the uniform
        // distribution; a failure here indicates a degenerate coding.
        let uniform = ProbVector::new(DVector::from_element(t, 1.0 / t as f64))?;
        let basis = CanonicalBasis::default_for(t);
        built.jacobian_r(&basis, &uniform).map_err(|_| {
            Error::Singular(
                "eta/theta Jacobian is singular at the uniform distribution".into(),
            )
        })?;

        Ok(built)
    }

    /// Wraps explicit `(C, M)` matrices.  `C` rows must be contrasts within
    /// the stacked margins and `M` must be a 0/1 matrix.
    pub fn custom(c: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        let u = m.nrows();
        let t = m.ncols();
        if c.ncols() != u || c.nrows() != t - 1 {
            return Err(Error::DimensionMismatch {
                what: "C".into(),
                expected: (t - 1, u),
                found: (c.nrows(), c.ncols()),
            });
        }
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidDimensions(
                "M must contain only zeros and ones".into(),
            ));
        }
        for i in 0..c.nrows() {
            if c.row(i).sum().abs() > 1e-10 {
                return Err(Error::InvalidDimensions(format!(
                    "row {i} of C is not a contrast (sums to {})",
                    c.row(i).sum()
                )));
            }
        }
        Ok(Self {
            c,
            m,
            margins: vec![MarginBlock {
                vars: VarSet::empty(),
                offset: 0,
                cells: u,
            }],
            effects: Vec::new(),
            dims: Vec::new(),
        })
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Number of stacked marginal cells, `u >= t`.
    pub fn num_marginal_cells(&self) -> usize {
        self.m.nrows()
    }

    pub fn num_cells(&self) -> usize {
        self.m.ncols()
    }

    pub fn eta_len(&self) -> usize {
        self.c.nrows()
    }

    pub fn margin_blocks(&self) -> &[MarginBlock] {
        &self.margins
    }

    pub fn effect_blocks(&self) -> &[EffectBlock] {
        &self.effects
    }

    /// Coordinates of `eta` belonging to one effect, as a row range.
    pub fn effect_coordinates(&self, effect: VarSet) -> Option<std::ops::Range<usize>> {
        self.effects
            .iter()
            .find(|b| b.effect == effect)
            .map(|b| b.offset..b.offset + b.len)
    }

    /// Per-coordinate descriptors in `eta` order (empty for custom
    /// matrices).
    pub fn coordinate_descriptors(&self) -> Vec<CoordinateDescriptor> {
        let mut out = Vec::with_capacity(self.eta_len());
        for block in &self.effects {
            let vars: Vec<usize> = block.effect.iter().collect();
            let sizes: Vec<usize> = vars.iter().map(|&v| self.dims[v] - 1).collect();
            let mut counter = vec![0usize; vars.len()];
            for _ in 0..block.len {
                out.push(CoordinateDescriptor {
                    effect: block.effect,
                    margin_vars: self.margins[block.margin].vars,
                    levels: vars
                        .iter()
                        .zip(&counter)
                        .map(|(&v, &lv)| (v, lv + 1))
                        .collect(),
                });
                // advance the level counter, last variable fastest
                for k in (0..counter.len()).rev() {
                    counter[k] += 1;
                    if counter[k] < sizes[k] {
                        break;
                    }
                    counter[k] = 0;
                }
            }
        }
        out
    }

    /// Marginal probabilities `M * pi`, rejecting margins below the
    /// conditioning floor.
    pub fn margins_of(&self, pi: &ProbVector) -> Result<DVector<f64>> {
        let m = &self.m * pi.values();
        if let Some((i, &v)) = m.iter().enumerate().find(|(_, &v)| v < MARGIN_FLOOR) {
            return Err(Error::MarginTooSmall { index: i, value: v });
        }
        Ok(m)
    }

    /// `eta = C log(M pi)`.
    pub fn eta(&self, pi: &ProbVector) -> Result<DVector<f64>> {
        let margins = self.margins_of(pi)?;
        Ok(&self.c * margins.map(f64::ln))
    }

    /// The Jacobian `d eta / d theta' = C diag(M pi)^-1 M diag(pi) G`.
    ///
    /// `Omega` has been replaced by `diag(pi)` here, which is exact because
    /// the rows of `C` are contrasts (eta is homogeneous in pi).
    pub fn eta_theta_jacobian(
        &self,
        basis: &CanonicalBasis,
        pi: &ProbVector,
    ) -> Result<DMatrix<f64>> {
        let margins = self.margins_of(pi)?;
        // rows of M scaled by 1/margin, columns by pi
        let mut scaled = self.m.clone();
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= pi.values()[j] / margins[i];
            }
        }
        Ok(&self.c * scaled * basis.g())
    }

    /// `R = [d eta / d theta']^-1 = d theta / d eta'`, the Jacobian used by
    /// the regression algorithm.  Singularity signals a non-smooth point or
    /// an incomplete parameterization.
    pub fn jacobian_r(&self, basis: &CanonicalBasis, pi: &ProbVector) -> Result<DMatrix<f64>> {
        let jac = self.eta_theta_jacobian(basis, pi)?;
        jac.clone().try_inverse().ok_or_else(|| {
            Error::Singular("eta/theta Jacobian is not invertible at this point".into())
        })
    }

    /// Solves `eta(theta) = target` by Newton iteration with step halving.
    /// The result is certified by the forward map: on success the residual
    /// is below `1e-12` in max norm.
    pub fn theta_from_eta(
        &self,
        basis: &CanonicalBasis,
        target: &DVector<f64>,
        init: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        if target.len() != self.eta_len() {
            return Err(Error::DimensionMismatch {
                what: "eta target".into(),
                expected: (self.eta_len(), 1),
                found: (target.len(), 1),
            });
        }
        let mut theta = match init {
            Some(v) => v.clone(),
            None => DVector::zeros(basis.dim()),
        };
        let mut pi = basis.theta_to_pi(&theta)?;
        let mut resid = target - self.eta(&pi)?;
        for _ in 0..200 {
            if resid.amax() < 1e-12 {
                return Ok(theta);
            }
            let r = self.jacobian_r(basis, &pi)?;
            let full_step = &r * &resid;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let candidate = &theta + &full_step * alpha;
                if let Ok(cand_pi) = basis.theta_to_pi(&candidate) {
                    if let Ok(cand_eta) = self.eta(&cand_pi) {
                        let cand_resid = target - cand_eta;
                        if cand_resid.amax() < resid.amax() {
                            theta = candidate;
                            pi = cand_pi;
                            resid = cand_resid;
                            accepted = true;
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::InversionFailed(format!(
                    "no descent step found at residual {:.3e}",
                    resid.amax()
                )));
            }
        }
        if resid.amax() < 1e-12 {
            Ok(theta)
        } else {
            Err(Error::InversionFailed(format!(
                "Newton iteration stalled at residual {:.3e}",
                resid.amax()
            )))
        }
    }
}

/// Contrast rows for one variable: `(c-1) x c`.
fn contrast_rows(c: usize, coding: Coding) -> DMatrix<f64> {
    match coding {
        Coding::Baseline => DMatrix::from_fn(c - 1, c, |i, j| {
            if j == 0 {
                -1.0
            } else if j == i + 1 {
                1.0
            } else {
                0.0
            }
        }),
        Coding::Effect => DMatrix::from_fn(c - 1, c, |i, j| {
            let centered = -1.0 / c as f64;
            if j == i + 1 {
                1.0 + centered
            } else {
                centered
            }
        }),
    }
}

/// Reference row for a margin variable outside the effect: `1 x c`.
fn reference_row(c: usize, coding: Coding) -> DMatrix<f64> {
    match coding {
        Coding::Baseline => DMatrix::from_fn(1, c, |_, j| if j == 0 { 1.0 } else { 0.0 }),
        Coding::Effect => DMatrix::from_element(1, c, 1.0 / c as f64),
    }
}
