//! Discretized Hilbert-space primitives.
//!
//! Units throughout the crate are ħ = 1 and m = 1/2, so the kinetic energy
//! operator is −d²/dx² and a plane wave e^{ikx} has energy k² and group
//! velocity 2k.
//!
//! Composite spaces are ordered position ⊗ spin ⊗ pointer with the last
//! factor varying fastest in the amplitude vector. Continuous factors carry
//! their grid spacing as quadrature weight, so the inner product is
//! ⟨a|b⟩ = Σ conj(a_k)·b_k·(∏ dx).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const HBAR: f64 = 1.0;
pub const MASS: f64 = 0.5;

/// Tolerance used to decide whether a matrix flagged Hermitian really is.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Uniform 1D grid with `n_points` nodes including both end points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n_points: usize,
    x_min: f64,
    x_max: f64,
}

impl Grid {
    pub fn new(n_points: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::Parameter(format!("grid needs at least 3 points, got {n_points}")));
        }
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::Parameter(format!("grid bounds [{x_min}, {x_max}] are not increasing")));
        }
        Ok(Self { n_points, x_min, x_max })
    }

    /// Grid with spacing `dx` whose node `center_index` sits at zero. Used
    /// for periodic pointer axes.
    pub fn centered(n_points: usize, dx: f64) -> Result<Self> {
        let half = (n_points / 2) as f64;
        Self::new(n_points, -half * dx, (n_points as f64 - 1.0 - half) * dx)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn point(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.point(j)).collect()
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest_index(&self, x: f64) -> usize {
        let j = ((x - self.x_min) / self.dx()).round();
        j.clamp(0.0, (self.n_points - 1) as f64) as usize
    }
}

/// One tensor factor of a composite Hilbert space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FactorSpace {
    Position(Grid),
    Spin2,
    Pointer(Grid),
}

impl FactorSpace {
    pub fn dimension(&self) -> usize {
        match self {
            FactorSpace::Position(g) | FactorSpace::Pointer(g) => g.n_points(),
            FactorSpace::Spin2 => 2,
        }
    }

    /// Quadrature weight contributed to the inner product.
    pub fn measure(&self) -> f64 {
        match self {
            FactorSpace::Position(g) | FactorSpace::Pointer(g) => g.dx(),
            FactorSpace::Spin2 => 1.0,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            FactorSpace::Position(_) => 0,
            FactorSpace::Spin2 => 1,
            FactorSpace::Pointer(_) => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FactorSpace::Position(_) => "position",
            FactorSpace::Spin2 => "spin2",
            FactorSpace::Pointer(_) => "pointer",
        }
    }
}

pub fn space_dimension(space: &[FactorSpace]) -> usize {
    space.iter().map(FactorSpace::dimension).product()
}

pub fn space_measure(space: &[FactorSpace]) -> f64 {
    space.iter().map(FactorSpace::measure).product()
}

/// Checks the canonical position ⊗ spin ⊗ pointer ordering with each kind
/// appearing at most once.
pub fn validate_space(space: &[FactorSpace]) -> Result<()> {
    if space.is_empty() {
        return Err(Error::Structural("empty factor-space list".into()));
    }
    for w in space.windows(2) {
        if w[0].rank() >= w[1].rank() {
            return Err(Error::Structural(format!(
                "factor order must be position ⊗ spin ⊗ pointer, found {} before {}",
                w[0].label(),
                w[1].label()
            )));
        }
    }
    Ok(())
}

/// A state vector over an ordered list of factor spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    space: Vec<FactorSpace>,
    amplitudes: CVector,
    time: f64,
}

impl QuantumState {
    pub fn new(space: Vec<FactorSpace>, amplitudes: CVector, time: f64) -> Result<Self> {
        validate_space(&space)?;
        let dim = space_dimension(&space);
        if amplitudes.len() != dim {
            return Err(Error::Structural(format!(
                "amplitude vector has length {} but the space has dimension {dim}",
                amplitudes.len()
            )));
        }
        Ok(Self { space, amplitudes, time })
    }

    /// Position-space state sampled from `f` on every grid node.
    pub fn from_fn(grid: Grid, time: f64, f: impl Fn(f64) -> C64) -> Self {
        let amps = CVector::from_iterator(grid.n_points(), grid.points().into_iter().map(f));
        Self { space: vec![FactorSpace::Position(grid)], amplitudes: amps, time }
    }

    pub fn space(&self) -> &[FactorSpace] {
        &self.space
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> CVector {
        self.amplitudes
    }

    /// Representation time of the amplitudes.
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dimension(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn measure(&self) -> f64 {
        space_measure(&self.space)
    }

    /// The position grid, if the first factor is a position factor.
    pub fn position_grid(&self) -> Option<Grid> {
        match self.space.first() {
            Some(FactorSpace::Position(g)) => Some(*g),
            _ => None,
        }
    }

    /// Same space and time with new amplitudes.
    pub fn with_amplitudes(&self, amplitudes: CVector) -> Result<Self> {
        Self::new(self.space.clone(), amplitudes, self.time)
    }

    pub fn at_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.measure()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Parameter("cannot normalize a state of zero or non-finite norm".into()));
        }
        Ok(Self {
            space: self.space.clone(),
            amplitudes: self.amplitudes.unscale(n),
            time: self.time,
        })
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            space: self.space.clone(),
            amplitudes: &self.amplitudes * c,
            time: self.time,
        }
    }

    /// α·self + β·other on a shared space.
    pub fn combine(&self, alpha: C64, other: &QuantumState, beta: C64) -> Result<Self> {
        check_same_space(&self.space, &other.space)?;
        Ok(Self {
            space: self.space.clone(),
            amplitudes: &self.amplitudes * alpha + &other.amplitudes * beta,
            time: self.time,
        })
    }

    pub fn inner(&self, other: &QuantumState) -> Result<C64> {
        inner_product(self, other)
    }

    /// self ⊗ other; the combined factor list must stay canonically ordered.
    pub fn tensor(&self, other: &QuantumState) -> Result<Self> {
        let mut space = self.space.clone();
        space.extend_from_slice(&other.space);
        let (na, nb) = (self.dimension(), other.dimension());
        let mut amps = CVector::zeros(na * nb);
        for i in 0..na {
            for j in 0..nb {
                amps[i * nb + j] = self.amplitudes[i] * other.amplitudes[j];
            }
        }
        Self::new(space, amps, self.time)
    }
}

fn check_same_space(a: &[FactorSpace], b: &[FactorSpace]) -> Result<()> {
    if a != b {
        return Err(Error::Structural(format!(
            "factor spaces differ: [{}] vs [{}]",
            a.iter().map(FactorSpace::label).collect::<Vec<_>>().join(", "),
            b.iter().map(FactorSpace::label).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

/// ⟨a|b⟩ with the grid quadrature weight; conjugate-linear in `a`.
pub fn inner_product(a: &QuantumState, b: &QuantumState) -> Result<C64> {
    check_same_space(&a.space, &b.space)?;
    Ok(a.amplitudes.dotc(&b.amplitudes) * a.measure())
}

/// Dense operator on a composite space.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    space: Vec<FactorSpace>,
    entries: CMatrix,
    hermitian: bool,
}

impl OperatorMatrix {
    pub fn new(space: Vec<FactorSpace>, entries: CMatrix, hermitian: bool) -> Result<Self> {
        validate_space(&space)?;
        let dim = space_dimension(&space);
        if entries.nrows() != dim || entries.ncols() != dim {
            return Err(Error::Structural(format!(
                "operator is {}x{} but the space has dimension {dim}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let op = Self { space, entries, hermitian };
        if hermitian {
            let defect = op.hermiticity_defect();
            if defect >= HERMITIAN_TOL {
                return Err(Error::Contract(format!(
                    "operator flagged Hermitian has max|M - M†| = {defect:.3e}"
                )));
            }
        }
        Ok(op)
    }

    pub fn identity(space: Vec<FactorSpace>) -> Result<Self> {
        let dim = space_dimension(&space);
        Self::new(space, CMatrix::identity(dim, dim), true)
    }

    pub fn diagonal(space: Vec<FactorSpace>, diag: &[f64]) -> Result<Self> {
        let dim = space_dimension(&space);
        if diag.len() != dim {
            return Err(Error::Structural(format!("diagonal has {} entries, space dimension {dim}", diag.len())));
        }
        let d = CVector::from_iterator(dim, diag.iter().map(|&x| C64::new(x, 0.0)));
        Self::new(space, CMatrix::from_diagonal(&d), true)
    }

    pub fn pauli_x() -> Self {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        Self::pauli([o, l, l, o])
    }

    pub fn pauli_y() -> Self {
        let o = C64::new(0.0, 0.0);
        let i = C64::new(0.0, 1.0);
        Self::pauli([o, -i, i, o])
    }

    /// σ_z in the basis (|↑⟩, |↓⟩) = (+1, −1).
    pub fn pauli_z() -> Self {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        Self::pauli([l, o, o, -l])
    }

    fn pauli(e: [C64; 4]) -> Self {
        Self {
            space: vec![FactorSpace::Spin2],
            entries: CMatrix::from_row_slice(2, 2, &e),
            hermitian: true,
        }
    }

    pub fn space(&self) -> &[FactorSpace] {
        &self.space
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    /// max |M − M†| over all entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.entries.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let d = (self.entries[(i, j)] - self.entries[(j, i)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Diagonal entries if every off-diagonal entry is exactly zero.
    pub fn as_real_diagonal(&self) -> Option<Vec<f64>> {
        let n = self.dimension();
        for j in 0..n {
            for i in 0..n {
                if i != j && self.entries[(i, j)] != C64::new(0.0, 0.0) {
                    return None;
                }
            }
        }
        let d: Vec<C64> = (0..n).map(|i| self.entries[(i, i)]).collect();
        if d.iter().any(|z| z.im != 0.0) {
            return None;
        }
        Some(d.into_iter().map(|z| z.re).collect())
    }

    pub fn apply(&self, state: &QuantumState) -> Result<QuantumState> {
        check_same_space(&self.space, &state.space)?;
        state.with_amplitudes(&self.entries * &state.amplitudes)
    }

    /// ⟨bra|M|ket⟩ with the quadrature weight.
    pub fn matrix_element(&self, bra: &QuantumState, ket: &QuantumState) -> Result<C64> {
        inner_product(bra, &self.apply(ket)?)
    }

    pub fn expectation(&self, state: &QuantumState) -> Result<C64> {
        self.matrix_element(state, state)
    }

    /// self · other. The product is flagged Hermitian only when it passes the
    /// Hermiticity check.
    pub fn compose(&self, other: &OperatorMatrix) -> Result<Self> {
        check_same_space(&self.space, &other.space)?;
        let entries = &self.entries * &other.entries;
        let mut op = Self { space: self.space.clone(), entries, hermitian: false };
        op.hermitian = op.hermiticity_defect() < HERMITIAN_TOL;
        Ok(op)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            space: self.space.clone(),
            entries: &self.entries * C64::new(s, 0.0),
            hermitian: self.hermitian,
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            space: self.space.clone(),
            entries: self.entries.adjoint(),
            hermitian: self.hermitian,
        }
    }
}

/// Spatial region Ω. A grid node x_j belongs to Ω iff x_lo ≤ x_j < x_hi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_lo: f64,
    pub x_hi: f64,
}

impl Region {
    pub fn new(x_lo: f64, x_hi: f64) -> Result<Self> {
        if !(x_lo < x_hi) {
            return Err(Error::Parameter(format!("region needs x_lo < x_hi, got [{x_lo}, {x_hi})")));
        }
        Ok(Self { x_lo, x_hi })
    }

    /// Region covering every node of `grid`.
    pub fn full(grid: &Grid) -> Self {
        Self { x_lo: grid.x_min() - 0.5 * grid.dx(), x_hi: grid.x_max() + 0.5 * grid.dx() }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.x_lo <= x && x < self.x_hi
    }

    pub fn indices(&self, grid: &Grid) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..grid.n_points()).filter(|&j| self.contains(grid.point(j))).collect();
        if idx.is_empty() {
            return Err(Error::EmptyRegion { x_lo: self.x_lo, x_hi: self.x_hi });
        }
        Ok(idx)
    }

    /// 0/1 indicator of the region on the grid nodes.
    pub fn indicator(&self, grid: &Grid) -> Result<Vec<f64>> {
        let mut d = vec![0.0; grid.n_points()];
        for j in self.indices(grid)? {
            d[j] = 1.0;
        }
        Ok(d)
    }
}

/// Projector P̂_Ω on a position grid.
pub fn projector(region: &Region, grid: &Grid) -> Result<OperatorMatrix> {
    OperatorMatrix::diagonal(vec![FactorSpace::Position(*grid)], &region.indicator(grid)?)
}

/// Extends `op` to `full_space` by Kronecker products with identities on the
/// absent factors.
pub fn tensor_extend(op: &OperatorMatrix, full_space: &[FactorSpace]) -> Result<OperatorMatrix> {
    validate_space(full_space)?;
    // positions of op's factors inside full_space, in order
    let mut present = Vec::with_capacity(op.space.len());
    let mut cursor = 0;
    for f in &op.space {
        let found = full_space[cursor..].iter().position(|g| g == f);
        match found {
            Some(off) => {
                present.push(cursor + off);
                cursor += off + 1;
            }
            None => {
                return Err(Error::Structural(format!("factor {} is not part of the target space", f.label())));
            }
        }
    }
    let dims: Vec<usize> = full_space.iter().map(FactorSpace::dimension).collect();
    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let absent: Vec<usize> = (0..dims.len()).filter(|k| !present.contains(k)).collect();

    // offset in the full index contributed by a sub-index of op / of the absent factors
    let offsets = |factors: &[usize], mut flat: usize| -> usize {
        let mut off = 0;
        for &k in factors.iter().rev() {
            let d = dims[k];
            off += (flat % d) * strides[k];
            flat /= d;
        }
        off
    };
    let sub_dim = op.dimension();
    let rest_dim: usize = absent.iter().map(|&k| dims[k]).product();
    let full_dim: usize = dims.iter().product();

    let op_off: Vec<usize> = (0..sub_dim).map(|a| offsets(&present, a)).collect();
    let rest_off: Vec<usize> = (0..rest_dim).map(|r| offsets(&absent, r)).collect();

    let mut m = CMatrix::zeros(full_dim, full_dim);
    for &r in &rest_off {
        for b in 0..sub_dim {
            for a in 0..sub_dim {
                let v = op.entries[(a, b)];
                if v != C64::new(0.0, 0.0) {
                    m[(op_off[a] + r, op_off[b] + r)] = v;
                }
            }
        }
    }
    Ok(OperatorMatrix { space: full_space.to_vec(), entries: m, hermitian: op.hermitian })
}

/// Normalized Gaussian packet ∝ exp(−(x−x0)²/(4σ²))·exp(i k0 x).
///
/// `sigma` is the standard deviation of |ψ|². It must resolve at least three
/// grid spacings.
pub fn gaussian_packet(grid: &Grid, x0: f64, sigma: f64, k0: f64) -> Result<QuantumState> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("packet width must be positive, got {sigma}")));
    }
    if sigma <= 3.0 * grid.dx() {
        return Err(Error::Parameter(format!(
            "packet width {sigma} does not resolve the grid spacing {} (need sigma > 3 dx)",
            grid.dx()
        )));
    }
    let psi = QuantumState::from_fn(*grid, 0.0, |x| {
        let env = (-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp();
        C64::from_polar(env, k0 * x)
    });
    psi.normalized()
}

/// Distance from the packet centre to the nearer grid edge, in units of σ.
pub fn packet_edge_margin(grid: &Grid, x0: f64, sigma: f64) -> f64 {
    ((x0 - grid.x_min()).min(grid.x_max() - x0)) / sigma
}

/// Eigenvalues in ascending order and eigenvectors normalized under the
/// weighted inner product.
pub fn eigendecompose(op: &OperatorMatrix) -> Result<(Vec<f64>, Vec<QuantumState>)> {
    if !op.hermitian {
        return Err(Error::Contract("eigendecompose requires a Hermitian operator".into()));
    }
    let eig = SymmetricEigen::new(op.entries.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = op.space.iter().map(FactorSpace::measure).product::<f64>().sqrt();
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| {
            let col = eig.eigenvectors.column(k).unscale(scale);
            QuantumState { space: op.space.clone(), amplitudes: col, time: 0.0 }
        })
        .collect();
    Ok((values, vectors))
}
