//! Data model for the multiple index model: the dataset, the partition of
//! exposures into index groups with their transformations, and the algebra
//! relating the unconstrained weights to unit-norm and proportion weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{BmimError, Result};

/// Tolerance for the orthonormality check on basis transforms.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Mean and standard deviation used to standardize one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnScaling {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScaling {
    pub fn fit(values: &[f64]) -> Self {
        let mean = crate::stats::mean(values);
        let sd = crate::stats::variance(values).sqrt();
        ColumnScaling { mean, sd }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Outcome, exposures and covariates sharing one row count.
///
/// Exposure columns are expected on the standardized scale; the scalings that
/// produced them are kept so new exposure rows can be mapped identically.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub outcome_name: String,
    pub exposure_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub exposure_scaling: Vec<ColumnScaling>,
    pub covariate_scaling: Vec<Option<ColumnScaling>>,
    pub outcome_scaling: Option<ColumnScaling>,
}

impl Dataset {
    /// Builds a dataset from already-prepared matrices. Names are generated
    /// and no scaling is recorded.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let p = x.ncols();
        let q = z.ncols();
        let ds = Dataset {
            y,
            x,
            z,
            outcome_name: "y".into(),
            exposure_names: (1..=p).map(|i| format!("x{i}")).collect(),
            covariate_names: (1..=q).map(|i| format!("z{i}")).collect(),
            exposure_scaling: vec![
                ColumnScaling {
                    mean: 0.0,
                    sd: 1.0
                };
                p
            ],
            covariate_scaling: vec![None; q],
            outcome_scaling: None,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_exposures(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.nrows() != n || self.z.nrows() != n {
            return Err(BmimError::Dimension(format!(
                "outcome has {n} rows, exposures {} and covariates {}",
                self.x.nrows(),
                self.z.nrows()
            )));
        }
        if self.exposure_names.len() != self.x.ncols() || self.covariate_names.len() != self.z.ncols() {
            return Err(BmimError::Dimension("column names do not match matrix widths".into()));
        }
        if self.y.iter().chain(self.x.iter()).chain(self.z.iter()).any(|v| !v.is_finite()) {
            return Err(BmimError::NonFinite("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    /// Returns a dataset restricted to the given rows, keeping names and scalings.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
            outcome_name: self.outcome_name.clone(),
            exposure_names: self.exposure_names.clone(),
            covariate_names: self.covariate_names.clone(),
            exposure_scaling: self.exposure_scaling.clone(),
            covariate_scaling: self.covariate_scaling.clone(),
            outcome_scaling: self.outcome_scaling,
        }
    }
}

/// Standardizes each column in place and returns the scalings used.
pub fn standardize_columns(m: &mut DMatrix<f64>) -> Result<Vec<ColumnScaling>> {
    let mut out = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        let s = ColumnScaling::fit(&col);
        if !(s.sd.is_finite() && s.sd > 0.0) {
            return Err(BmimError::Data(format!("column {} has zero or undefined variance", j + 1)));
        }
        for v in m.column_mut(j).iter_mut() {
            *v = s.apply(*v);
        }
        out.push(s);
    }
    Ok(out)
}

/// Per-index transformation of the raw exposures before weighting.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// Square invertible `A` with weights `theta* = A beta`; exposures map to `x A`.
    LinearMap(DMatrix<f64>),
    /// Orthonormal basis `Psi` (T x J); exposures map to `x Psi`.
    Basis(DMatrix<f64>),
}

impl Transform {
    /// Number of free coefficients for a group of `l` exposures.
    pub fn coef_dim(&self, l: usize) -> usize {
        match self {
            Transform::Identity | Transform::LinearMap(_) => l,
            Transform::Basis(psi) => psi.ncols(),
        }
    }

    /// The L x J matrix mapping coefficients to weights on the raw exposures.
    pub fn loading(&self, l: usize) -> DMatrix<f64> {
        match self {
            Transform::Identity => DMatrix::identity(l, l),
            Transform::LinearMap(a) | Transform::Basis(a) => a.clone(),
        }
    }
}

/// Full-order transformation: lower-triangular matrix of ones, so that
/// nonnegative increments give nondecreasing weights.
pub fn full_order_matrix(l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, l, |i, j| if j <= i { 1.0 } else { 0.0 })
}

/// Full-order transformation for an arbitrary potency ordering. `order[k]`
/// is the position (within the group) of the k-th least potent exposure.
pub fn ordering_matrix(order: &[usize]) -> Result<DMatrix<f64>> {
    let l = order.len();
    let mut seen = vec![false; l];
    for &o in order {
        if o >= l || seen[o] {
            return Err(BmimError::Structure(format!("ordering {order:?} is not a permutation")));
        }
        seen[o] = true;
    }
    let mut a = DMatrix::zeros(l, l);
    for (k, &row) in order.iter().enumerate() {
        for j in 0..=k {
            a[(row, j)] = 1.0;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexGroup {
    pub name: String,
    /// Zero-based exposure column indices.
    pub columns: Vec<usize>,
    pub transform: Transform,
}

impl IndexGroup {
    pub fn new(name: impl Into<String>, columns: Vec<usize>) -> Self {
        IndexGroup {
            name: name.into(),
            columns,
            transform: Transform::Identity,
        }
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn coef_dim(&self) -> usize {
        self.transform.coef_dim(self.len())
    }
}

/// Ordered partition of exposure columns into index groups.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexStructure {
    pub groups: Vec<IndexGroup>,
}

impl IndexStructure {
    pub fn new(groups: Vec<IndexGroup>) -> Self {
        IndexStructure { groups }
    }

    /// One index holding every exposure.
    pub fn single(p: usize) -> Self {
        IndexStructure::new(vec![IndexGroup::new("index1", (0..p).collect())])
    }

    /// One index per exposure (the kernel machine regression special case).
    pub fn singletons(p: usize) -> Self {
        IndexStructure::new((0..p).map(|j| IndexGroup::new(format!("x{}", j + 1), vec![j])).collect())
    }

    pub fn n_indices(&self) -> usize {
        self.groups.len()
    }

    /// Checks disjointness, column ranges and transform invariants against
    /// a total of `p` exposure columns.
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(BmimError::Structure("no index groups declared".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; p];
        for (m, g) in self.groups.iter().enumerate() {
            if g.columns.is_empty() {
                return Err(BmimError::Structure(format!("index {} is empty", m + 1)));
            }
            for &c in &g.columns {
                if c >= p {
                    return Err(BmimError::Structure(format!(
                        "index {} references column {} but only {p} exposures exist",
                        m + 1,
                        c + 1
                    )));
                }
                if let Some(prev) = owner[c] {
                    return Err(BmimError::Structure(format!(
                        "overlapping groups: column {} is in index {} and index {}",
                        c + 1,
                        prev + 1,
                        m + 1
                    )));
                }
                owner[c] = Some(m);
            }
            validate_transform(&g.transform, g.len()).map_err(|e| match e {
                BmimError::Structure(msg) => BmimError::Structure(format!("index {}: {msg}", m + 1)),
                other => other,
            })?;
        }
        Ok(())
    }
}

fn validate_transform(t: &Transform, l: usize) -> Result<()> {
    match t {
        Transform::Identity => Ok(()),
        Transform::LinearMap(a) => {
            if a.nrows() != l || a.ncols() != l {
                return Err(BmimError::Structure(format!(
                    "linear map is {}x{} but the group has {l} members",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let lu = a.clone().lu();
            let det = lu.determinant();
            let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
            if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(l as i32) {
                return Err(BmimError::Structure("singular linear map".into()));
            }
            Ok(())
        }
        Transform::Basis(psi) => {
            if psi.nrows() != l {
                return Err(BmimError::Structure(format!(
                    "basis has {} rows but the group has {l} members",
                    psi.nrows()
                )));
            }
            if psi.ncols() == 0 || psi.ncols() > l {
                return Err(BmimError::Structure(format!("basis has {} columns", psi.ncols())));
            }
            let gram = psi.transpose() * psi;
            let dev = (gram - DMatrix::<f64>::identity(psi.ncols(), psi.ncols()))
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            if dev > ORTHONORMAL_TOL {
                return Err(BmimError::Structure(format!(
                    "non-orthonormal basis: max |Psi^T Psi - I| = {dev:.3e}"
                )));
            }
            Ok(())
        }
    }
}

/// Validates `structure` against the exposure columns of `dataset`.
pub fn validate_structure(dataset: &Dataset, structure: IndexStructure) -> Result<IndexStructure> {
    structure.validate(dataset.n_exposures())?;
    Ok(structure)
}

/// Maps an `n x L` exposure block to the transformed `n x J` design.
pub fn apply_transform(x_m: &DMatrix<f64>, transform: &Transform) -> Result<DMatrix<f64>> {
    match transform {
        Transform::Identity => Ok(x_m.clone()),
        Transform::LinearMap(a) | Transform::Basis(a) => {
            if a.nrows() != x_m.ncols() {
                return Err(BmimError::Dimension(format!(
                    "transform expects {} columns, exposure block has {}",
                    a.nrows(),
                    x_m.ncols()
                )));
            }
            Ok(x_m * a)
        }
    }
}

/// Extracts the columns of one group from the full exposure matrix.
pub fn group_block(x: &DMatrix<f64>, group: &IndexGroup) -> DMatrix<f64> {
    x.select_columns(&group.columns)
}

/// Index matrix `E` with `E[i, m] = x*_im . coef_m`.
pub fn compute_indices(designs: &[DMatrix<f64>], coefs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if designs.len() != coefs.len() {
        return Err(BmimError::Dimension(format!(
            "{} design blocks but {} weight vectors",
            designs.len(),
            coefs.len()
        )));
    }
    let n = designs.first().map_or(0, |d| d.nrows());
    let mut e = DMatrix::zeros(n, designs.len());
    for (m, (d, c)) in designs.iter().zip(coefs).enumerate() {
        if d.ncols() != c.len() || d.nrows() != n {
            return Err(BmimError::Dimension(format!(
                "index {}: design is {}x{}, weights have length {}",
                m + 1,
                d.nrows(),
                d.ncols(),
                c.len()
            )));
        }
        e.set_column(m, &(d * c));
    }
    Ok(e)
}

/// The three views of one index's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecomposition {
    /// Squared L2 norm of the unconstrained weights.
    pub rho: f64,
    /// Unit-norm weights; absent when every weight is zero.
    pub theta: Option<Vec<f64>>,
    /// Proportion weights; absent unless all weights are nonnegative with a positive sum.
    pub w: Option<Vec<f64>>,
}

pub fn decompose_weights(theta_star: &[f64]) -> WeightDecomposition {
    let rho: f64 = theta_star.iter().map(|v| v * v).sum();
    let theta = (rho > 0.0).then(|| {
        let norm = rho.sqrt();
        theta_star.iter().map(|v| v / norm).collect()
    });
    let sum: f64 = theta_star.iter().sum();
    let w = (theta_star.iter().all(|&v| v >= 0.0) && sum > 0.0)
        .then(|| theta_star.iter().map(|v| v / sum).collect());
    WeightDecomposition { rho, theta, w }
}

/// Unconstrained-scale coefficients and inclusion indicators of one index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexWeights {
    pub coef: Vec<f64>,
    pub nu: Vec<bool>,
}

/// Weights of every index.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub indices: Vec<IndexWeights>,
}

/// Flips `coef` in place when its entries sum below zero. Returns whether a
/// flip happened.
pub fn canonical_sign(coef: &mut [f64]) -> bool {
    if coef.iter().sum::<f64>() < 0.0 {
        coef.iter_mut().for_each(|v| *v = -*v);
        true
    } else {
        false
    }
}
