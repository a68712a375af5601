//! Weak values, dwell times and the sojourn-time operator.
//!
//! Two independent routes compute the same quantities:
//!
//! * the operator route builds I_H(Â) = ∫h(t) U₀(t_f,t) Â U₀(t_f,t)† dt as a
//!   dense matrix, and all weak values, moments and sum rules are matrix
//!   elements of it;
//! * the two-state route evolves ψ and χ backward from t_f and integrates
//!   ⟨χ(t)|Â|ψ(t)⟩ directly, which needs no dense matrices at all.
//!
//! Both use the same trapezoid nodes, placed on propagator steps.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_count, CouplingProfile, Propagator, Window};
use crate::error::{Error, Result};
use crate::hilbert::{projector, CMatrix, CVector, FactorSpace, Grid, OperatorMatrix, QuantumState, Region};

/// Relative floor on |⟨χ|ψ⟩| below which conditional values are undefined.
pub const DEFAULT_OVERLAP_FLOOR: f64 = 1e-8;
/// |conditional time| above this multiple of the window length is flagged.
pub const ANOMALY_FACTOR: f64 = 10.0;
pub const MAX_MOMENT: usize = 4;

const TIME_TOL: f64 = 1e-9;
const GEMM_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    Trapezoid,
}

/// I_H(Â) realized on the grid.
#[derive(Debug, Clone)]
pub struct IntegratedOperator {
    pub base: OperatorMatrix,
    pub window: Window,
    pub profile: CouplingProfile,
    pub matrix: OperatorMatrix,
    pub rule: QuadratureRule,
    pub n_slices: usize,
}

/// t̂_ΩH = (t_f − t_i)·I_H(P̂_Ω).
#[derive(Debug, Clone)]
pub struct SojournOperator {
    pub region: Region,
    pub integrated: IntegratedOperator,
    pub matrix: OperatorMatrix,
}

impl SojournOperator {
    pub fn window(&self) -> Window {
        self.integrated.window
    }

    pub fn length(&self) -> f64 {
        self.integrated.window.length()
    }

    pub fn space(&self) -> &[FactorSpace] {
        self.matrix.space()
    }

    /// (t̂_ΩH)^l ψ by repeated application.
    pub fn power_apply(&self, amplitudes: &CVector, l: usize) -> CVector {
        let mut v = amplitudes.clone();
        for _ in 0..l {
            v = self.matrix.entries() * v;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakValueResult {
    pub value: C64,
    pub observable: String,
    pub postselection: Option<String>,
    pub window: Window,
}

impl WeakValueResult {
    /// |value| beyond `ANOMALY_FACTOR·scale`.
    pub fn is_anomalous(&self, scale: f64) -> bool {
        self.value.norm() > ANOMALY_FACTOR * scale
    }

    pub fn is_negative(&self) -> bool {
        self.value.re < 0.0
    }
}

/// Second moment for a particle found in one grid cell, in the two forms
/// Re{⟨r|t²|ψ⟩/⟨r|ψ⟩} and ⟨ψ|t P_r t|ψ⟩/⟨ψ|P_r|ψ⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSecondMoment {
    pub weak: f64,
    pub symmetrized: f64,
}

/// Trapezoid nodes, as (steps back from t_f, weight).
#[derive(Debug, Clone)]
struct Schedule {
    nodes: Vec<(usize, f64)>,
}

impl Schedule {
    fn last_step(&self) -> usize {
        self.nodes.iter().map(|n| n.0).max().unwrap_or(0)
    }
}

/// Weak-value engine bound to the free evolution of one Hamiltonian.
#[derive(Debug, Clone)]
pub struct SojournEngine {
    propagator: Propagator,
    n_slices: Option<usize>,
    overlap_floor: f64,
}

impl SojournEngine {
    /// Uses the free part of `prop`. `n_slices = None` puts a node on
    /// every propagator step.
    pub fn new(prop: &Propagator, n_slices: Option<usize>) -> Result<Self> {
        let free = prop.free();
        if free.hamiltonian().is_dissipative() {
            return Err(Error::Contract("weak values need Hermitian free evolution".into()));
        }
        if !free.hamiltonian().is_static() {
            return Err(Error::Contract("free Hamiltonian must be time independent".into()));
        }
        if let Some(n) = n_slices {
            if n < 2 {
                return Err(Error::Parameter(format!("need at least 2 slices, got {n}")));
            }
        }
        Ok(Self { propagator: free, n_slices, overlap_floor: DEFAULT_OVERLAP_FLOOR })
    }

    pub fn with_overlap_floor(mut self, floor: f64) -> Self {
        self.overlap_floor = floor;
        self
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn overlap_floor(&self) -> f64 {
        self.overlap_floor
    }

    pub fn grid(&self) -> Result<Grid> {
        self.propagator.hamiltonian().grid().ok_or_else(|| Error::Structural("engine needs a position grid".into()))
    }

    fn space(&self) -> &[FactorSpace] {
        self.propagator.hamiltonian().space()
    }

    /// Free evolution of `psi` to time `t` (either direction).
    pub fn state_at(&self, psi: &QuantumState, t: f64) -> Result<QuantumState> {
        if (psi.time() - t).abs() <= TIME_TOL {
            return Ok(psi.clone().at_time(t));
        }
        if t > psi.time() {
            self.propagator.evolve(psi, psi.time(), t)
        } else {
            self.propagator.evolve_backward(psi, psi.time(), t)
        }
    }

    fn slices_for(&self, profile: &CouplingProfile) -> Result<usize> {
        match self.n_slices {
            Some(n) => Ok(n),
            None => step_count(profile.t_i, profile.t_f, self.propagator.dt()),
        }
    }

    fn schedule(&self, window: Window, profile: &CouplingProfile, n_slices: usize) -> Result<Schedule> {
        if n_slices == 0 {
            return Err(Error::Parameter("need at least one slice".into()));
        }
        if profile.t_i < window.t_i - TIME_TOL || profile.t_f > window.t_f + TIME_TOL {
            return Err(Error::Parameter("coupling profile extends outside the window".into()));
        }
        let dt = self.propagator.dt();
        let span = profile.t_f - profile.t_i;
        let delta = span / n_slices as f64;
        let per_slice = step_count(0.0, delta, dt)
            .map_err(|_| Error::Parameter(format!("slice width {delta} is not a multiple of dt = {dt}")))?;
        if per_slice == 0 {
            return Err(Error::Parameter(format!("slice width {delta} is below dt = {dt}")));
        }
        let k_lo = step_count(profile.t_f, window.t_f, dt)?;
        let h = 1.0 / span;
        let nodes = (0..=n_slices)
            .map(|j| {
                let end = j == 0 || j == n_slices;
                (k_lo + j * per_slice, delta * h * if end { 0.5 } else { 1.0 })
            })
            .collect();
        Ok(Schedule { nodes })
    }

    /// I_H(Â) with the engine's default slicing.
    pub fn integrate(&self, a: &OperatorMatrix, window: Window, profile: &CouplingProfile) -> Result<IntegratedOperator> {
        let n = self.slices_for(profile)?;
        self.integrate_heisenberg(a, window, profile, n)
    }

    /// Trapezoid quadrature of ∫h(t) U₀(t_f,t)·Â·U₀(t_f,t)† dt.
    pub fn integrate_heisenberg(
        &self,
        a: &OperatorMatrix,
        window: Window,
        profile: &CouplingProfile,
        n_slices: usize,
    ) -> Result<IntegratedOperator> {
        if n_slices < 2 {
            return Err(Error::Parameter(format!("need at least 2 slices, got {n_slices}")));
        }
        if !a.is_hermitian() {
            return Err(Error::Contract("integrated operator needs a Hermitian base".into()));
        }
        if a.space() != self.space() {
            return Err(Error::Structural("operator and Hamiltonian live on different spaces".into()));
        }
        let schedule = self.schedule(window, profile, n_slices)?;
        let (columns, weights) = factor_hermitian(a);
        let dim = a.dimension();
        let mut acc = OuterAccumulator::new(dim);
        if !weights.is_empty() {
            let wanted: std::collections::BTreeMap<usize, f64> = schedule.nodes.iter().copied().collect();
            self.propagator.evolve_block(
                columns,
                0.0,
                schedule.last_step() as f64 * self.propagator.dt(),
                |k, block| {
                    if let Some(&w) = wanted.get(&k) {
                        acc.push(block, &weights, w);
                    }
                    Ok(())
                },
            )?;
        }
        let m = acc.finish();
        let matrix = OperatorMatrix::new(a.space().to_vec(), m, true)?;
        Ok(IntegratedOperator {
            base: a.clone(),
            window,
            profile: *profile,
            matrix,
            rule: QuadratureRule::Trapezoid,
            n_slices,
        })
    }

    /// t̂_ΩH with a rectangular profile over the window.
    pub fn sojourn_matrix(&self, region: &Region, window: Window, n_slices: Option<usize>) -> Result<SojournOperator> {
        let grid = self.grid()?;
        let p = projector(region, &grid)?;
        let profile = CouplingProfile::rectangular(window);
        let n = match n_slices {
            Some(n) => n,
            None => self.slices_for(&profile)?,
        };
        let integrated = self.integrate_heisenberg(&p, window, &profile, n)?;
        let matrix = integrated.matrix.scaled(window.length());
        Ok(SojournOperator { region: *region, integrated, matrix })
    }

    fn at_final(&self, psi: &QuantumState, window: Window) -> Result<QuantumState> {
        if psi.space() != self.space() {
            return Err(Error::Structural("state and Hamiltonian live on different spaces".into()));
        }
        self.state_at(psi, window.t_f)
    }

    fn postselected(&self, chi: &QuantumState, window: Window) -> Result<QuantumState> {
        if chi.space() != self.space() {
            return Err(Error::Structural("postselected state lives on a different space".into()));
        }
        if (chi.time() - window.t_f).abs() > TIME_TOL {
            return Err(Error::Timing(format!(
                "postselected state is given at t = {}, expected t_f = {}",
                chi.time(),
                window.t_f
            )));
        }
        Ok(chi.clone())
    }

    /// ⟨χ|ψ⟩ checked against the overlap floor.
    pub fn checked_overlap(&self, chi: &QuantumState, psi: &QuantumState) -> Result<C64> {
        let overlap = chi.inner(psi)?;
        let floor = self.overlap_floor * chi.norm() * psi.norm();
        if overlap.norm() <= floor {
            return Err(Error::DegeneratePostselection { overlap: overlap.norm(), floor });
        }
        Ok(overlap)
    }

    /// ⟨Φ₀|I_H(Â)|Φ₀⟩ for a normalized ψ₀ (taken to t_f if needed).
    pub fn weak_value(&self, a_int: &IntegratedOperator, psi0: &QuantumState) -> Result<WeakValueResult> {
        let psi = self.at_final(psi0, a_int.window)?;
        let value = a_int.matrix.expectation(&psi)? / psi.norm_sqr();
        Ok(WeakValueResult { value, observable: "integrated".into(), postselection: None, window: a_int.window })
    }

    /// ⟨χ|I_H(Â)|ψ₀⟩/⟨χ|ψ₀⟩ with χ given at t_f.
    pub fn conditional_weak_value(
        &self,
        a_int: &IntegratedOperator,
        psi0: &QuantumState,
        chi: &QuantumState,
    ) -> Result<WeakValueResult> {
        let psi = self.at_final(psi0, a_int.window)?;
        let chi = self.postselected(chi, a_int.window)?;
        let overlap = self.checked_overlap(&chi, &psi)?;
        let value = a_int.matrix.matrix_element(&chi, &psi)? / overlap;
        Ok(WeakValueResult {
            value,
            observable: "integrated".into(),
            postselection: Some("chi".into()),
            window: a_int.window,
        })
    }

    /// ∫h ⟨χ(t)|P̂_Ω|ψ(t)⟩ dt by evolving both states backward from t_f.
    fn two_state_projector(
        &self,
        psi_tf: &QuantumState,
        chi_tf: Option<&QuantumState>,
        region: &Region,
        window: Window,
    ) -> Result<C64> {
        let grid = self.grid()?;
        let profile = CouplingProfile::rectangular(window);
        let n = self.slices_for(&profile)?;
        let schedule = self.schedule(window, &profile, n)?;
        let idx = region.indices(&grid)?;
        let dim = psi_tf.dimension();
        let ncols = if chi_tf.is_some() { 2 } else { 1 };
        let mut block = CMatrix::zeros(dim, ncols);
        block.set_column(0, psi_tf.amplitudes());
        if let Some(chi) = chi_tf {
            block.set_column(1, chi.amplitudes());
        }
        let wanted: std::collections::BTreeMap<usize, f64> = schedule.nodes.iter().copied().collect();
        let measure = psi_tf.measure();
        let mut total = C64::new(0.0, 0.0);
        self.propagator.evolve_block_backward(
            block,
            window.t_f,
            window.t_f - schedule.last_step() as f64 * self.propagator.dt(),
            |k, b| {
                if let Some(&w) = wanted.get(&k) {
                    let c = b.column(ncols - 1);
                    let p = b.column(0);
                    let s: C64 = idx.iter().map(|&j| c[j].conj() * p[j]).sum();
                    total += s * (w * measure);
                }
                Ok(())
            },
        )?;
        Ok(total)
    }

    /// τ_D = (t_f − t_i)·⟨P̂_Ω⟩_w.
    pub fn dwell_time(&self, psi0: &QuantumState, region: &Region, window: Window) -> Result<f64> {
        let psi = self.at_final(psi0, window)?;
        let v = self.two_state_projector(&psi, None, region, window)?;
        Ok(window.length() * v.re / psi.norm_sqr())
    }

    /// Complex conditional time (t_f − t_i)·P_Ωw⁽ⁿ⁾.
    pub fn conditional_time(
        &self,
        psi0: &QuantumState,
        region: &Region,
        window: Window,
        chi: &QuantumState,
    ) -> Result<WeakValueResult> {
        let psi = self.at_final(psi0, window)?;
        let chi = self.postselected(chi, window)?;
        let overlap = self.checked_overlap(&chi, &psi)?;
        let v = self.two_state_projector(&psi, Some(&chi), region, window)?;
        Ok(WeakValueResult {
            value: v * window.length() / overlap,
            observable: "sojourn".into(),
            postselection: Some("chi".into()),
            window,
        })
    }

    /// Re of [`SojournEngine::conditional_time`].
    pub fn conditional_dwell_time(
        &self,
        psi0: &QuantumState,
        region: &Region,
        window: Window,
        chi: &QuantumState,
    ) -> Result<f64> {
        Ok(self.conditional_time(psi0, region, window, chi)?.value.re)
    }

    /// ⟨χ|t̂^l|ψ⟩/⟨χ|ψ⟩ (complex).
    pub fn moment_complex(
        &self,
        psi0: &QuantumState,
        chi: &QuantumState,
        sojourn: &SojournOperator,
        l: usize,
    ) -> Result<C64> {
        if l == 0 || l > MAX_MOMENT {
            return Err(Error::Parameter(format!("moment order must be in 1..={MAX_MOMENT}, got {l}")));
        }
        let window = sojourn.window();
        let psi = self.at_final(psi0, window)?;
        let chi = self.postselected(chi, window)?;
        let overlap = self.checked_overlap(&chi, &psi)?;
        let tl = psi.with_amplitudes(sojourn.power_apply(psi.amplitudes(), l))?;
        Ok(chi.inner(&tl)? / overlap)
    }

    /// ⟨t^l⟩⁽ⁿ⁾ = Re{⟨χ|t̂^l|ψ⟩/⟨χ|ψ⟩}.
    pub fn moment(&self, psi0: &QuantumState, chi: &QuantumState, sojourn: &SojournOperator, l: usize) -> Result<f64> {
        Ok(self.moment_complex(psi0, chi, sojourn, l)?.re)
    }

    /// Σ_r |t_Ω^(r)|²·|ψ(r,t_f)|²·dx with t_Ω^(r) the cell-postselected time.
    pub fn second_moment_position_integral(&self, psi0: &QuantumState, sojourn: &SojournOperator) -> Result<f64> {
        let psi = self.at_final(psi0, sojourn.window())?;
        let grid = self.grid()?;
        let dx = grid.dx();
        let t_psi = sojourn.power_apply(psi.amplitudes(), 1);
        let amp = psi.amplitudes();
        let cell_floor = self.overlap_floor * psi.norm() / dx.sqrt();
        let mut total = 0.0;
        for r in 0..amp.len() {
            let weight = amp[r].norm_sqr() * dx;
            if amp[r].norm() > cell_floor {
                let t_r = t_psi[r] / amp[r];
                total += t_r.norm_sqr() * weight;
            } else {
                total += t_psi[r].norm_sqr() * dx;
            }
        }
        Ok(total / psi.norm_sqr())
    }

    /// Both second-moment forms for a particle found in cell `r`.
    pub fn second_moment_position_postselected(
        &self,
        psi0: &QuantumState,
        r: usize,
        sojourn: &SojournOperator,
    ) -> Result<CellSecondMoment> {
        let psi = self.at_final(psi0, sojourn.window())?;
        let grid = self.grid()?;
        if r >= grid.n_points() {
            return Err(Error::Parameter(format!("cell {r} outside the grid")));
        }
        let chi = cell_state(&grid, r, sojourn.window().t_f);
        self.checked_overlap(&chi, &psi)?;
        let amp = psi.amplitudes();
        let t1 = sojourn.power_apply(amp, 1);
        let t2 = sojourn.power_apply(amp, 2);
        Ok(CellSecondMoment { weak: (t2[r] / amp[r]).re, symmetrized: (t1[r] / amp[r]).norm_sqr() })
    }
}

/// Normalized indicator of one grid cell, e_r/√dx.
pub fn cell_state(grid: &Grid, r: usize, time: f64) -> QuantumState {
    let mut v = CVector::zeros(grid.n_points());
    v[r] = C64::new(1.0 / grid.dx().sqrt(), 0.0);
    QuantumState::new(vec![FactorSpace::Position(*grid)], v, time).expect("sizes match")
}

/// A = B·diag(d)·B† with plain-orthonormal columns of B.
fn factor_hermitian(a: &OperatorMatrix) -> (CMatrix, Vec<f64>) {
    let dim = a.dimension();
    if let Some(d) = a.as_real_diagonal() {
        let keep: Vec<usize> = (0..dim).filter(|&j| d[j] != 0.0).collect();
        let mut b = CMatrix::zeros(dim, keep.len());
        for (c, &j) in keep.iter().enumerate() {
            b[(j, c)] = C64::new(1.0, 0.0);
        }
        return (b, keep.iter().map(|&j| d[j]).collect());
    }
    let eig = a.entries().clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let keep: Vec<usize> = (0..dim).filter(|&k| eig.eigenvalues[k].abs() > 1e-14 * scale).collect();
    let mut b = CMatrix::zeros(dim, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        b.set_column(c, &eig.eigenvectors.column(k));
    }
    (b, keep.iter().map(|&k| eig.eigenvalues[k]).collect())
}

/// Accumulates Σ w·W·diag(d)·W† with real GEMMs over batched columns.
struct OuterAccumulator {
    dim: usize,
    re: DMatrix<f64>,
    im: DMatrix<f64>,
    left_re: DMatrix<f64>,
    left_im: DMatrix<f64>,
    right_re_t: DMatrix<f64>,
    right_im_t: DMatrix<f64>,
    filled: usize,
}

impl OuterAccumulator {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            re: DMatrix::zeros(dim, dim),
            im: DMatrix::zeros(dim, dim),
            left_re: DMatrix::zeros(dim, GEMM_CHUNK),
            left_im: DMatrix::zeros(dim, GEMM_CHUNK),
            right_re_t: DMatrix::zeros(GEMM_CHUNK, dim),
            right_im_t: DMatrix::zeros(GEMM_CHUNK, dim),
            filled: 0,
        }
    }

    fn push(&mut self, block: &CMatrix, d: &[f64], w: f64) {
        for (c, col) in block.column_iter().enumerate() {
            if self.filled == GEMM_CHUNK {
                self.flush();
            }
            let s = w * d[c];
            let f = self.filled;
            for i in 0..self.dim {
                let z = col[i];
                self.left_re[(i, f)] = s * z.re;
                self.left_im[(i, f)] = s * z.im;
                self.right_re_t[(f, i)] = z.re;
                self.right_im_t[(f, i)] = z.im;
            }
            self.filled += 1;
        }
    }

    fn flush(&mut self) {
        let f = self.filled;
        if f == 0 {
            return;
        }
        let lr = self.left_re.columns(0, f);
        let li = self.left_im.columns(0, f);
        let rr = self.right_re_t.rows(0, f);
        let ri = self.right_im_t.rows(0, f);
        // (Lr + iLi)(Rr − iRi)ᵀ
        self.re.gemm(1.0, &lr, &rr, 1.0);
        self.re.gemm(1.0, &li, &ri, 1.0);
        self.im.gemm(1.0, &li, &rr, 1.0);
        self.im.gemm(-1.0, &lr, &ri, 1.0);
        self.filled = 0;
    }

    fn finish(mut self) -> CMatrix {
        self.flush();
        let m = CMatrix::from_fn(self.dim, self.dim, |i, j| C64::new(self.re[(i, j)], self.im[(i, j)]));
        (&m + m.adjoint()) * C64::new(0.5, 0.0)
    }
}
