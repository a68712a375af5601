//! Hamiltonians and time evolution.
//!
//! Two propagators share one interface: a dense matrix exponential, used as
//! the oracle on small grids, and an implicit Cayley (Crank–Nicolson) step
//! that exploits the tridiagonal structure of the 1D kinetic term. Both
//! freeze a time-dependent Hamiltonian at the midpoint of each step, which
//! realizes the time-ordered exponential to second order in `dt`.
//!
//! The implicit stepper never builds the composite matrix. Spin couples only
//! through σ_z and the pointer enters only through an eigenvalue of π̂, so
//! every sector is a tridiagonal problem on the position grid.

use std::collections::HashMap;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    space_dimension, tensor_extend, CMatrix, FactorSpace, Grid, OperatorMatrix, QuantumState, Region, HBAR,
    MASS,
};

const I: C64 = C64::new(0.0, 1.0);

/// Tolerance on `n·dt` reproducing an evolution interval.
pub const STEP_ALIGN_TOL: f64 = 1e-9;

/// Measurement window (t_i, t_f).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_i: f64,
    pub t_f: f64,
}

impl Window {
    pub fn new(t_i: f64, t_f: f64) -> Result<Self> {
        if !(t_f > t_i) || !t_i.is_finite() || !t_f.is_finite() {
            return Err(Error::Parameter(format!("window needs t_i < t_f, got ({t_i}, {t_f})")));
        }
        Ok(Self { t_i, t_f })
    }

    pub fn length(&self) -> f64 {
        self.t_f - self.t_i
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t_i < t && t < self.t_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileShape {
    Rectangular,
    /// Rectangular over a single time step ending at the hit time.
    Impulsive,
}

/// Normalized coupling profile h(t) with ∫h dt = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingProfile {
    pub t_i: f64,
    pub t_f: f64,
    pub shape: ProfileShape,
}

impl CouplingProfile {
    pub fn rectangular(window: Window) -> Self {
        Self { t_i: window.t_i, t_f: window.t_f, shape: ProfileShape::Rectangular }
    }

    /// h(t) ≈ δ(t − t_hit), realized as one step of width `dt` ending at `t_hit`.
    pub fn impulsive(t_hit: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Parameter(format!("impulsive profile needs dt > 0, got {dt}")));
        }
        Ok(Self { t_i: t_hit - dt, t_f: t_hit, shape: ProfileShape::Impulsive })
    }

    pub fn window(&self) -> Window {
        Window { t_i: self.t_i, t_f: self.t_f }
    }

    pub fn value(&self, t: f64) -> f64 {
        if self.t_i < t && t < self.t_f {
            1.0 / (self.t_f - self.t_i)
        } else {
            0.0
        }
    }

    /// ∫h dt over (t_from, t_to) with the midpoint rule used by the steppers.
    pub fn integral(&self, t_from: f64, t_to: f64, dt: f64) -> Result<f64> {
        let n = step_count(t_from, t_to, dt)?;
        Ok((0..n).map(|k| self.value(t_from + (k as f64 + 0.5) * dt) * dt).sum())
    }
}

/// Larmor term (ħω_L/2)·f(t)·σ̂_z ⊗ P̂_Ω, with f the indicator of `active`
/// (or 1 everywhere when `active` is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpinCoupling {
    pub omega: f64,
    pub region: Region,
    pub active: Option<Window>,
}

impl SpinCoupling {
    fn switch(&self, t: f64) -> f64 {
        match self.active {
            Some(w) if !w.contains(t) => 0.0,
            _ => 1.0,
        }
    }
}

/// Pointer side of the interaction term: the full operator π̂ on a pointer
/// factor, or one of its eigenvalues (a sector of the π-representation).
#[derive(Debug, Clone, PartialEq)]
pub enum PointerMomentum {
    Operator(OperatorMatrix),
    Eigenvalue(f64),
}

/// G·h(t)·π̂ ⊗ Â.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTerm {
    pub coupling: f64,
    pub profile: CouplingProfile,
    pub pointer_momentum: PointerMomentum,
    pub system_operator: OperatorMatrix,
}

/// Kinetic + real potential + imaginary potential + optional Larmor term +
/// optional meter interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    space: Vec<FactorSpace>,
    kinetic: bool,
    potential_real: Vec<f64>,
    potential_imag: Vec<f64>,
    spin_coupling: Option<SpinCoupling>,
    interaction: Option<InteractionTerm>,
}

impl Hamiltonian {
    /// −d²/dx² + V(x) on a position grid.
    pub fn position(grid: Grid, potential: Vec<f64>) -> Result<Self> {
        if potential.len() != grid.n_points() {
            return Err(Error::Structural(format!(
                "potential has {} entries, grid has {}",
                potential.len(),
                grid.n_points()
            )));
        }
        Ok(Self {
            space: vec![FactorSpace::Position(grid)],
            kinetic: true,
            potential_imag: vec![0.0; grid.n_points()],
            potential_real: potential,
            spin_coupling: None,
            interaction: None,
        })
    }

    pub fn free(grid: Grid) -> Self {
        Self::position(grid, vec![0.0; grid.n_points()]).expect("sizes match")
    }

    /// H = 0 on a bare spin-1/2 system (meter toys).
    pub fn two_level() -> Self {
        Self {
            space: vec![FactorSpace::Spin2],
            kinetic: false,
            potential_real: Vec::new(),
            potential_imag: Vec::new(),
            spin_coupling: None,
            interaction: None,
        }
    }

    /// Adds V·P̂_Ω to the real potential.
    pub fn with_added_potential(mut self, region: &Region, v: f64) -> Result<Self> {
        let grid = self.require_grid()?;
        for j in region.indices(&grid)? {
            self.potential_real[j] += v;
        }
        Ok(self)
    }

    /// Adds −i(Γ/2)·P̂_Ω. Γ must be non-negative.
    pub fn with_absorber(mut self, region: &Region, gamma: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::Parameter(format!("absorption rate must be >= 0, got {gamma}")));
        }
        let grid = self.require_grid()?;
        for j in region.indices(&grid)? {
            self.potential_imag[j] -= 0.5 * gamma;
        }
        Ok(self)
    }

    pub fn with_spin_coupling(mut self, coupling: SpinCoupling) -> Result<Self> {
        let grid = self.require_grid()?;
        coupling.region.indices(&grid)?;
        if !self.space.contains(&FactorSpace::Spin2) {
            self.space.insert(1, FactorSpace::Spin2);
        }
        self.spin_coupling = Some(coupling);
        Ok(self)
    }

    pub fn with_interaction(mut self, term: InteractionTerm) -> Result<Self> {
        let system: Vec<FactorSpace> =
            self.space.iter().copied().filter(|f| !matches!(f, FactorSpace::Pointer(_))).collect();
        if term.system_operator.space() != system.as_slice() {
            return Err(Error::Structural("interaction operator does not act on the system space".into()));
        }
        if let PointerMomentum::Operator(pi) = &term.pointer_momentum {
            match pi.space() {
                [p @ FactorSpace::Pointer(_)] => {
                    if !self.space.contains(p) {
                        self.space.push(*p);
                    }
                }
                _ => return Err(Error::Structural("pointer momentum must act on a single pointer factor".into())),
            }
        }
        self.interaction = Some(term);
        Ok(self)
    }

    /// H₀: the same Hamiltonian with clock and meter terms removed.
    pub fn without_couplings(&self) -> Self {
        let space = self
            .space
            .iter()
            .copied()
            .filter(|f| matches!(f, FactorSpace::Position(_)) || !self.kinetic)
            .filter(|f| !matches!(f, FactorSpace::Pointer(_)))
            .collect();
        Self {
            space,
            kinetic: self.kinetic,
            potential_real: self.potential_real.clone(),
            potential_imag: self.potential_imag.clone(),
            spin_coupling: None,
            interaction: None,
        }
    }

    pub fn space(&self) -> &[FactorSpace] {
        &self.space
    }

    pub fn dimension(&self) -> usize {
        space_dimension(&self.space)
    }

    pub fn grid(&self) -> Option<Grid> {
        match self.space.first() {
            Some(FactorSpace::Position(g)) => Some(*g),
            _ => None,
        }
    }

    fn require_grid(&self) -> Result<Grid> {
        self.grid().ok_or_else(|| Error::Structural("operation needs a position factor".into()))
    }

    pub fn potential_real(&self) -> &[f64] {
        &self.potential_real
    }

    pub fn potential_imag(&self) -> &[f64] {
        &self.potential_imag
    }

    pub fn spin_coupling(&self) -> Option<&SpinCoupling> {
        self.spin_coupling.as_ref()
    }

    pub fn interaction(&self) -> Option<&InteractionTerm> {
        self.interaction.as_ref()
    }

    pub fn is_dissipative(&self) -> bool {
        self.potential_imag.iter().any(|&w| w != 0.0)
    }

    /// True when no term depends on time.
    pub fn is_static(&self) -> bool {
        let spin_static = self.spin_coupling.as_ref().map_or(true, |s| s.active.is_none());
        spin_static && self.interaction.is_none()
    }

    /// Time-dependent scalar prefactors (Larmor switch, G·h(t)).
    fn coefficients(&self, t: f64) -> (f64, f64) {
        let f = self.spin_coupling.as_ref().map_or(0.0, |s| s.switch(t));
        let g = self.interaction.as_ref().map_or(0.0, |it| it.coupling * it.profile.value(t));
        (f, g)
    }

    /// Largest |diagonal entry|, used for the default time step.
    pub fn max_diagonal(&self) -> f64 {
        let kin = self.grid().map_or(0.0, |g| if self.kinetic { 2.0 * kinetic_scale(&g) } else { 0.0 });
        let pot = self
            .potential_real
            .iter()
            .zip(&self.potential_imag)
            .map(|(v, w)| (kin + v).abs().max(w.abs()))
            .fold(kin, f64::max);
        let spin = self.spin_coupling.as_ref().map_or(0.0, |s| 0.5 * HBAR * s.omega.abs());
        pot + spin
    }

    /// Default step dt = 0.1·ħ/max|H_jj|.
    pub fn default_dt(&self) -> f64 {
        0.1 * HBAR / self.max_diagonal().max(f64::MIN_POSITIVE)
    }
}

/// ħ²/(2m·dx²), the off-diagonal magnitude of the kinetic stencil.
fn kinetic_scale(grid: &Grid) -> f64 {
    HBAR * HBAR / (2.0 * MASS * grid.dx() * grid.dx())
}

/// Finite-difference kinetic operator on a grid with hard walls.
pub fn kinetic_operator(grid: &Grid) -> OperatorMatrix {
    let n = grid.n_points();
    let s = kinetic_scale(grid);
    let m = CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(2.0 * s, 0.0)
        } else if i.abs_diff(j) == 1 {
            C64::new(-s, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    OperatorMatrix::new(vec![FactorSpace::Position(*grid)], m, true).expect("kinetic matrix is Hermitian")
}

/// Dense matrix of H(t).
pub fn assemble(h: &Hamiltonian, t: f64) -> Result<OperatorMatrix> {
    let (f, g) = h.coefficients(t);
    let m = assemble_with(h, f, g)?;
    let hermitian = !h.is_dissipative();
    let mut op = OperatorMatrix::new(h.space.clone(), m, false)?;
    if hermitian && op.hermiticity_defect() < crate::hilbert::HERMITIAN_TOL {
        op = OperatorMatrix::new(h.space.clone(), op.into_entries(), true)?;
    }
    Ok(op)
}

fn assemble_with(h: &Hamiltonian, f: f64, g: f64) -> Result<CMatrix> {
    let dim = h.dimension();
    let mut m = CMatrix::zeros(dim, dim);
    if let Some(grid) = h.grid() {
        let pos = vec![FactorSpace::Position(grid)];
        let mut local = if h.kinetic { kinetic_operator(&grid).into_entries() } else { CMatrix::zeros(grid.n_points(), grid.n_points()) };
        for j in 0..grid.n_points() {
            local[(j, j)] += C64::new(h.potential_real[j], h.potential_imag[j]);
        }
        let local = OperatorMatrix::new(pos, local, false)?;
        m += tensor_extend(&local, &h.space)?.entries();
        if let Some(sc) = &h.spin_coupling {
            if f != 0.0 {
                let p = crate::hilbert::projector(&sc.region, &grid)?;
                let zp = tensor_extend(&OperatorMatrix::pauli_z(), &h.space)?
                    .compose(&tensor_extend(&p, &h.space)?)?;
                m += zp.entries() * C64::new(0.5 * HBAR * sc.omega * f, 0.0);
            }
        }
    }
    if let Some(it) = &h.interaction {
        if g != 0.0 {
            let a = tensor_extend(&it.system_operator, &h.space)?;
            let term = match &it.pointer_momentum {
                PointerMomentum::Operator(pi) => a.compose(&tensor_extend(pi, &h.space)?)?.into_entries(),
                PointerMomentum::Eigenvalue(p) => a.into_entries() * C64::new(*p, 0.0),
            };
            m += term * C64::new(g, 0.0);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMethod {
    DenseExponential,
    ImplicitStep,
}

/// Number of steps of size `dt` covering (t_from, t_to).
pub fn step_count(t_from: f64, t_to: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("time step must be positive, got {dt}")));
    }
    let span = t_to - t_from;
    if span < -STEP_ALIGN_TOL {
        return Err(Error::Parameter(format!("evolution interval runs backwards: {t_from} -> {t_to}")));
    }
    let n = (span / dt).round();
    if (n * dt - span).abs() > STEP_ALIGN_TOL {
        return Err(Error::Parameter(format!("dt = {dt} does not divide the interval {span}")));
    }
    Ok(n as usize)
}

/// Tridiagonal Cayley factor for one sector: solves (1 + iK)x = (1 − iK)ψ
/// with K = H·dt/(2ħ).
struct CayleySector {
    diag_k: Vec<C64>,
    off_k: C64,
    // forward-elimination coefficients of (1 + iK)
    c_prime: Vec<C64>,
    inv_denom: Vec<C64>,
}

impl CayleySector {
    fn new(diag_h: &[f64], diag_h_imag: &[f64], off_h: f64, dt: f64) -> Result<Self> {
        let n = diag_h.len();
        let half = dt / (2.0 * HBAR);
        let diag_k: Vec<C64> = diag_h.iter().zip(diag_h_imag).map(|(&r, &i)| C64::new(r, i) * half).collect();
        let off_k = C64::new(off_h * half, 0.0);
        let b = I * off_k;
        let mut c_prime = vec![C64::new(0.0, 0.0); n];
        let mut inv_denom = vec![C64::new(0.0, 0.0); n];
        let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
        let mut prev_c = C64::new(0.0, 0.0);
        for j in 0..n {
            let a = C64::new(1.0, 0.0) + I * diag_k[j];
            let denom = if j == 0 { a } else { a - b * prev_c };
            let mag = denom.norm();
            pmin = pmin.min(mag);
            pmax = pmax.max(mag);
            if !(mag > 1e-300) || !mag.is_finite() {
                return Err(Error::Numerical {
                    message: "zero pivot in the implicit step".into(),
                    condition: if pmin > 0.0 { pmax / pmin } else { f64::INFINITY },
                });
            }
            inv_denom[j] = denom.inv();
            c_prime[j] = b * inv_denom[j];
            prev_c = c_prime[j];
        }
        Ok(Self { diag_k, off_k, c_prime, inv_denom })
    }

    /// One step applied in place to `psi`; `scratch` must have the same length.
    fn apply(&self, psi: &mut [C64], scratch: &mut [C64]) {
        let n = psi.len();
        let b = I * self.off_k;
        // rhs = (1 − iK)ψ
        for j in 0..n {
            let mut kpsi = self.diag_k[j] * psi[j];
            if j > 0 {
                kpsi += self.off_k * psi[j - 1];
            }
            if j + 1 < n {
                kpsi += self.off_k * psi[j + 1];
            }
            scratch[j] = psi[j] - I * kpsi;
        }
        // forward sweep
        let mut prev = C64::new(0.0, 0.0);
        for j in 0..n {
            let d = if j == 0 { scratch[0] } else { scratch[j] - b * prev };
            scratch[j] = d * self.inv_denom[j];
            prev = scratch[j];
        }
        // back substitution
        psi[n - 1] = scratch[n - 1];
        for j in (0..n - 1).rev() {
            psi[j] = scratch[j] - self.c_prime[j] * psi[j + 1];
        }
    }
}

/// Key for caching per-step operators of a Hamiltonian whose only time
/// dependence is through scalar prefactors.
fn coeff_key(f: f64, g: f64) -> (u64, u64) {
    (f.to_bits(), g.to_bits())
}

/// Time evolution of states under a fixed [`Hamiltonian`].
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    method: PropagationMethod,
    dt: f64,
    hamiltonian: Hamiltonian,
}

impl Propagator {
    pub fn new(method: PropagationMethod, dt: f64, hamiltonian: Hamiltonian) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Parameter(format!("time step must be positive, got {dt}")));
        }
        if method == PropagationMethod::ImplicitStep {
            check_structured(&hamiltonian)?;
        }
        Ok(Self { method, dt, hamiltonian })
    }

    pub fn method(&self) -> PropagationMethod {
        self.method
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.hamiltonian
    }

    /// Same method and step with another Hamiltonian.
    pub fn with_hamiltonian(&self, hamiltonian: Hamiltonian) -> Result<Self> {
        Self::new(self.method, self.dt, hamiltonian)
    }

    /// Propagator of H₀ (no clock or meter terms).
    pub fn free(&self) -> Self {
        Self { method: self.method, dt: self.dt, hamiltonian: self.hamiltonian.without_couplings() }
    }

    pub fn evolve(&self, state: &QuantumState, t_from: f64, t_to: f64) -> Result<QuantumState> {
        if state.space() != self.hamiltonian.space() {
            return Err(Error::Structural("state and Hamiltonian live on different spaces".into()));
        }
        let block = CMatrix::from_column_slice(state.dimension(), 1, state.amplitudes().as_slice());
        let out = self.evolve_block(block, t_from, t_to, |_, _| Ok(()))?;
        QuantumState::new(state.space().to_vec(), out.column(0).into_owned(), t_to)
    }

    /// Evolution with interaction and clock terms removed.
    pub fn evolve_free(&self, state: &QuantumState, t_from: f64, t_to: f64) -> Result<QuantumState> {
        self.free().evolve(state, t_from, t_to)
    }

    /// Backward evolution from `t_from` down to `t_to ≤ t_from`.
    pub fn evolve_backward(&self, state: &QuantumState, t_from: f64, t_to: f64) -> Result<QuantumState> {
        let n = step_count(t_to, t_from, self.dt)?;
        let block = CMatrix::from_column_slice(state.dimension(), 1, state.amplitudes().as_slice());
        let out = self.run_steps(block, t_from, n, -self.dt, &mut |_, _| Ok(()))?;
        QuantumState::new(state.space().to_vec(), out.column(0).into_owned(), t_to)
    }

    /// Evolves every column of `block` from `t_from` to `t_to`. `observe` is
    /// called with the step index k = 0..=n and the block after k steps.
    pub fn evolve_block(
        &self,
        block: CMatrix,
        t_from: f64,
        t_to: f64,
        mut observe: impl FnMut(usize, &CMatrix) -> Result<()>,
    ) -> Result<CMatrix> {
        let n = step_count(t_from, t_to, self.dt)?;
        self.run_steps(block, t_from, n, self.dt, &mut observe)
    }

    /// Backward counterpart of [`Propagator::evolve_block`], from `t_from`
    /// down to `t_to ≤ t_from`; step k lands at `t_from − k·dt`.
    pub fn evolve_block_backward(
        &self,
        block: CMatrix,
        t_from: f64,
        t_to: f64,
        mut observe: impl FnMut(usize, &CMatrix) -> Result<()>,
    ) -> Result<CMatrix> {
        let n = step_count(t_to, t_from, self.dt)?;
        self.run_steps(block, t_from, n, -self.dt, &mut observe)
    }

    /// The full evolution operator U(t_to, t_from) as a dense matrix.
    pub fn evolution_matrix(&self, t_from: f64, t_to: f64) -> Result<CMatrix> {
        let d = self.hamiltonian.dimension();
        self.evolve_block(CMatrix::identity(d, d), t_from, t_to, |_, _| Ok(()))
    }

    fn run_steps(
        &self,
        mut block: CMatrix,
        t_from: f64,
        n: usize,
        dt: f64,
        observe: &mut dyn FnMut(usize, &CMatrix) -> Result<()>,
    ) -> Result<CMatrix> {
        if block.nrows() != self.hamiltonian.dimension() {
            return Err(Error::Structural("block rows do not match the Hamiltonian dimension".into()));
        }
        observe(0, &block)?;
        match self.method {
            PropagationMethod::DenseExponential => {
                let mut cache: HashMap<(u64, u64), CMatrix> = HashMap::new();
                for k in 0..n {
                    let t_mid = t_from + (k as f64 + 0.5) * dt;
                    let (f, g) = self.hamiltonian.coefficients(t_mid);
                    let key = coeff_key(f, g);
                    if !cache.contains_key(&key) {
                        let h = assemble_with(&self.hamiltonian, f, g)?;
                        let u = (h * (-I * dt / HBAR)).exp();
                        cache.insert(key, u);
                    }
                    block = &cache[&key] * &block;
                    observe(k + 1, &block)?;
                }
            }
            PropagationMethod::ImplicitStep => {
                let layout = SectorLayout::of(&self.hamiltonian)?;
                let mut cache: HashMap<(u64, u64), Vec<CayleySector>> = HashMap::new();
                let np = layout.n_pos;
                let mut buf = vec![C64::new(0.0, 0.0); np];
                let mut scratch = vec![C64::new(0.0, 0.0); np];
                for k in 0..n {
                    let t_mid = t_from + (k as f64 + 0.5) * dt;
                    let (f, g) = self.hamiltonian.coefficients(t_mid);
                    let key = coeff_key(f, g);
                    if !cache.contains_key(&key) {
                        let sectors = layout.sectors(&self.hamiltonian, f, g, dt)?;
                        cache.insert(key, sectors);
                    }
                    let sectors = &cache[&key];
                    for mut col in block.column_iter_mut() {
                        for (s, sector) in sectors.iter().enumerate() {
                            for j in 0..np {
                                buf[j] = col[j * layout.n_spin + s];
                            }
                            sector.apply(&mut buf, &mut scratch);
                            for j in 0..np {
                                col[j * layout.n_spin + s] = buf[j];
                            }
                        }
                    }
                    observe(k + 1, &block)?;
                }
            }
        }
        Ok(block)
    }
}

fn check_structured(h: &Hamiltonian) -> Result<()> {
    SectorLayout::of(h).map(|_| ())
}

/// Index layout of position ⊗ (spin) for the implicit stepper.
struct SectorLayout {
    grid: Grid,
    n_pos: usize,
    n_spin: usize,
    /// Diagonal of Â on the position grid, if an interaction is present.
    interaction_diag: Option<(f64, Vec<f64>)>,
    larmor_diag: Option<(f64, Vec<f64>)>,
}

impl SectorLayout {
    fn of(h: &Hamiltonian) -> Result<Self> {
        let grid = h
            .grid()
            .filter(|_| h.kinetic)
            .ok_or_else(|| Error::Structural("implicit stepping needs a kinetic position factor".into()))?;
        let n_spin = match &h.space[1..] {
            [] => 1,
            [FactorSpace::Spin2] => 2,
            _ => {
                return Err(Error::Structural(
                    "implicit stepping supports position or position ⊗ spin; pointer factors are handled by sector decomposition"
                        .into(),
                ))
            }
        };
        let interaction_diag = match &h.interaction {
            None => None,
            Some(it) => {
                let p = match it.pointer_momentum {
                    PointerMomentum::Eigenvalue(p) => p,
                    PointerMomentum::Operator(_) => {
                        return Err(Error::Structural("implicit stepping needs a pointer-momentum eigenvalue".into()))
                    }
                };
                if it.system_operator.space() != [FactorSpace::Position(grid)] {
                    return Err(Error::Structural("implicit stepping needs Â acting on position only".into()));
                }
                let d = it
                    .system_operator
                    .as_real_diagonal()
                    .ok_or_else(|| Error::Structural("implicit stepping needs Â diagonal in position".into()))?;
                Some((p, d))
            }
        };
        let larmor_diag = match &h.spin_coupling {
            None => None,
            Some(sc) => Some((0.5 * HBAR * sc.omega, sc.region.indicator(&grid)?)),
        };
        Ok(Self { grid, n_pos: grid.n_points(), n_spin, interaction_diag, larmor_diag })
    }

    fn sectors(&self, h: &Hamiltonian, f: f64, g: f64, dt: f64) -> Result<Vec<CayleySector>> {
        let s = kinetic_scale(&self.grid);
        (0..self.n_spin)
            .map(|spin| {
                let sign = if self.n_spin == 1 { 0.0 } else if spin == 0 { 1.0 } else { -1.0 };
                let diag: Vec<f64> = (0..self.n_pos)
                    .map(|j| {
                        let mut d = 2.0 * s + h.potential_real[j];
                        if let Some((half_omega, ind)) = &self.larmor_diag {
                            d += sign * half_omega * f * ind[j];
                        }
                        if let Some((p, a)) = &self.interaction_diag {
                            d += g * p * a[j];
                        }
                        d
                    })
                    .collect();
                CayleySector::new(&diag, &h.potential_imag, -s, dt)
            })
            .collect()
    }
}

/// U₀(t_f, t)·op·U₀(t_f, t)† under the free part of `prop`.
pub fn heisenberg_conjugate(prop: &Propagator, op: &OperatorMatrix, t_f: f64, t: f64) -> Result<OperatorMatrix> {
    let free = prop.free();
    if free.hamiltonian.is_dissipative() {
        return Err(Error::Contract("Heisenberg conjugation needs Hermitian free evolution".into()));
    }
    if op.space() != free.hamiltonian.space() {
        return Err(Error::Structural("operator and Hamiltonian live on different spaces".into()));
    }
    let u = free.evolution_matrix(t, t_f)?;
    let m = &u * op.entries() * u.adjoint();
    let hermitian = op.is_hermitian();
    let m = if hermitian { (&m + m.adjoint()) * C64::new(0.5, 0.0) } else { m };
    OperatorMatrix::new(op.space().to_vec(), m, hermitian)
}
