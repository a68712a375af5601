//! Von Neumann meter on system ⊗ pointer.
//!
//! The pointer momentum π̂ is diagonal in the discrete Fourier basis of the
//! pointer grid, so the composite evolution splits into independent system
//! evolutions, one per pointer frequency, under H_Σ + G·h(t)·π_k·Â. The
//! final composite state is reassembled with an inverse FFT. A dense
//! composite path (π̂ ⊗ Â built explicitly) exists for small systems and
//! serves as a cross-check.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::clocks::{extrapolate_complex, Extrapolation};
use crate::dynamics::{CouplingProfile, InteractionTerm, PointerMomentum, PropagationMethod, Propagator, Window};
use crate::error::{Error, Result};
use crate::hilbert::{
    space_measure, CMatrix, CVector, FactorSpace, Grid, OperatorMatrix, QuantumState,
};
use crate::sojourn::{SojournOperator, DEFAULT_OVERLAP_FLOOR};

/// Sectors whose pointer amplitude is below this fraction of the largest
/// one are not evolved.
pub const SECTOR_CUTOFF: f64 = 1e-14;
/// Largest pointer probability tolerated within 4Δq of the grid edge.
pub const EDGE_MASS_LIMIT: f64 = 1e-6;
pub const DEFAULT_POINTER_POINTS: usize = 256;

/// Gaussian pointer centered at q = 0 on a periodic grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerSpec {
    pub grid: Grid,
    pub width: f64,
}

impl PointerSpec {
    pub fn new(n_points: usize, extent: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::Parameter(format!("pointer width must be positive, got {width}")));
        }
        if n_points % 2 != 0 {
            return Err(Error::Parameter("pointer grid needs an even number of points".into()));
        }
        let grid = Grid::centered(n_points, extent / n_points as f64)?;
        if width < 3.0 * grid.dx() {
            return Err(Error::Parameter(format!("pointer width {width} is not resolved by dq = {}", grid.dx())));
        }
        Ok(Self { grid, width })
    }

    /// 256 points over 20·max(Δq, G·a_max) (at least 12× the larger scale).
    pub fn for_coupling(width: f64, max_shift: f64) -> Result<Self> {
        Self::new(DEFAULT_POINTER_POINTS, 20.0 * width.max(max_shift.abs()), width)
    }

    pub fn factor(&self) -> FactorSpace {
        FactorSpace::Pointer(self.grid)
    }

    /// φ_i(q) ∝ exp(−q²/(4Δq²)), normalized.
    pub fn initial_state(&self) -> QuantumState {
        let amps = CVector::from_iterator(
            self.grid.n_points(),
            self.grid.points().iter().map(|q| C64::new((-q * q / (4.0 * self.width * self.width)).exp(), 0.0)),
        );
        let state = QuantumState::new(vec![self.factor()], amps, 0.0).expect("sizes match");
        state.normalized().expect("nonzero Gaussian")
    }

    /// Eigenvalues of π̂ in FFT order.
    pub fn momenta(&self) -> Vec<f64> {
        let n = self.grid.n_points();
        let dk = 2.0 * PI / (n as f64 * self.grid.dx());
        (0..n).map(|k| if k < n / 2 { k as f64 * dk } else { (k as f64 - n as f64) * dk }).collect()
    }

    /// Dense π̂ on the pointer factor (Fourier convention, periodic).
    pub fn momentum_operator(&self) -> OperatorMatrix {
        let n = self.grid.n_points();
        let pis = self.momenta();
        let m = CMatrix::from_fn(n, n, |j, l| {
            let d = j as f64 - l as f64;
            pis.iter()
                .enumerate()
                .map(|(k, p)| C64::from_polar(*p, 2.0 * PI * k as f64 * d / n as f64))
                .sum::<C64>()
                / n as f64
        });
        let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        OperatorMatrix::new(vec![self.factor()], m, true).expect("Hermitian by construction")
    }

    pub fn position_operator(&self) -> OperatorMatrix {
        OperatorMatrix::diagonal(vec![self.factor()], &self.grid.points()).expect("sizes match")
    }
}

/// Result of one meter experiment.
#[derive(Debug, Clone)]
pub struct MeterRun {
    pub spec: PointerSpec,
    pub coupling: f64,
    pub window: Window,
    pub observable: String,
    /// ψ₀(t_f): the system state had the meter been absent.
    pub free_final: QuantumState,
    /// Φ(t_f) on system ⊗ pointer.
    pub final_state: QuantumState,
}

impl MeterRun {
    pub fn system_space(&self) -> &[FactorSpace] {
        self.free_final.space()
    }

    fn n_system(&self) -> usize {
        self.free_final.dimension()
    }

    fn n_pointer(&self) -> usize {
        self.spec.grid.n_points()
    }

    /// ⟨χ, q|Φ⟩ for every pointer node.
    pub fn projected_pointer(&self, chi: &QuantumState) -> Result<CVector> {
        if chi.space() != self.system_space() {
            return Err(Error::Structural("postselected state lives on a different space".into()));
        }
        let (ns, nq) = (self.n_system(), self.n_pointer());
        let mu = space_measure(self.system_space());
        let amp = self.final_state.amplitudes();
        let c = chi.amplitudes();
        Ok(CVector::from_fn(nq, |j, _| (0..ns).map(|s| c[s].conj() * amp[s * nq + j]).sum::<C64>() * mu))
    }

    /// System state in the pointer-momentum sector `k`, divided by ⟨π_k|φ_i⟩.
    pub fn sector_state(&self, k: usize) -> Result<QuantumState> {
        let (ns, nq) = (self.n_system(), self.n_pointer());
        if k >= nq {
            return Err(Error::Parameter(format!("sector {k} outside the pointer grid")));
        }
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(nq);
        let phi_hat = {
            let mut v: Vec<C64> = self.spec.initial_state().amplitudes().iter().copied().collect();
            fft.process(&mut v);
            v[k]
        };
        let amp = self.final_state.amplitudes();
        let mut buf = vec![C64::new(0.0, 0.0); nq];
        let mut out = CVector::zeros(ns);
        for s in 0..ns {
            buf.copy_from_slice(&amp.as_slice()[s * nq..(s + 1) * nq]);
            fft.process(&mut buf);
            out[s] = buf[k] / phi_hat;
        }
        QuantumState::new(self.system_space().to_vec(), out, self.window.t_f)
    }
}

fn check_aliasing(spec: &PointerSpec, density: &[f64]) -> Result<()> {
    let grid = spec.grid;
    let q_lo = grid.x_min() + 4.0 * spec.width;
    let q_hi = grid.x_max() - 4.0 * spec.width;
    let total: f64 = density.iter().sum();
    let edge: f64 = grid
        .points()
        .iter()
        .zip(density)
        .filter(|(q, _)| **q < q_lo || **q > q_hi)
        .map(|(_, f)| f)
        .sum();
    let frac = edge / total;
    if frac > EDGE_MASS_LIMIT {
        return Err(Error::Aliasing(format!(
            "pointer probability {frac:.3e} within 4 widths of the grid edge; widen the pointer grid"
        )));
    }
    Ok(())
}

fn marginal(run_space: &[FactorSpace], amp: &CVector, ns: usize, nq: usize) -> Vec<f64> {
    let mu = space_measure(run_space);
    (0..nq).map(|j| (0..ns).map(|s| amp[s * nq + j].norm_sqr()).sum::<f64>() * mu).collect()
}

/// Assembles Φ = Σ_k ψ_k ⊗ φ̂_k|π_k⟩ from per-sector system states.
fn assemble_sectors(
    spec: &PointerSpec,
    system_space: &[FactorSpace],
    sectors: &[Option<CVector>],
    phi_hat: &[C64],
    t_f: f64,
) -> Result<QuantumState> {
    let nq = spec.grid.n_points();
    let ns = crate::hilbert::space_dimension(system_space);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(nq);
    let mut amp = CVector::zeros(ns * nq);
    let mut buf = vec![C64::new(0.0, 0.0); nq];
    for s in 0..ns {
        for k in 0..nq {
            buf[k] = match &sectors[k] {
                Some(v) => v[s] * phi_hat[k],
                None => C64::new(0.0, 0.0),
            };
        }
        ifft.process(&mut buf);
        for j in 0..nq {
            amp[s * nq + j] = buf[j] / nq as f64;
        }
    }
    let mut space = system_space.to_vec();
    space.push(spec.factor());
    QuantumState::new(space, amp, t_f)
}

fn pointer_spectrum(spec: &PointerSpec) -> Vec<C64> {
    let mut v: Vec<C64> = spec.initial_state().amplitudes().iter().copied().collect();
    FftPlanner::<f64>::new().plan_fft_forward(v.len()).process(&mut v);
    v
}

fn active_sectors(phi_hat: &[C64]) -> Vec<bool> {
    let max = phi_hat.iter().map(|c| c.norm()).fold(0.0, f64::max);
    phi_hat.iter().map(|c| c.norm() >= SECTOR_CUTOFF * max).collect()
}

/// Evolves ψ₀⊗φ_i under H_Σ + G·h(t)·π̂⊗Â, sector by sector.
///
/// `prop` carries H_Σ and the stepping method; `psi0` is the system state
/// at `window.t_i`.
pub fn run_meter(
    prop: &Propagator,
    spec: &PointerSpec,
    psi0: &QuantumState,
    a: &OperatorMatrix,
    coupling: f64,
    profile: CouplingProfile,
    window: Window,
) -> Result<MeterRun> {
    let h_sys = prop.hamiltonian().without_couplings();
    if psi0.space() != h_sys.space() || a.space() != h_sys.space() {
        return Err(Error::Structural("system state, observable and Hamiltonian must share one space".into()));
    }
    if (psi0.time() - window.t_i).abs() > 1e-9 {
        return Err(Error::Timing(format!("initial state given at {}, window opens at {}", psi0.time(), window.t_i)));
    }
    let free = prop.with_hamiltonian(h_sys.clone())?;
    let free_final = free.evolve(psi0, window.t_i, window.t_f)?;
    let phi_hat = pointer_spectrum(spec);
    let active = active_sectors(&phi_hat);
    let momenta = spec.momenta();
    let sectors = (0..momenta.len())
        .into_par_iter()
        .map(|k| {
            if !active[k] {
                return Ok(None);
            }
            if coupling == 0.0 || momenta[k] == 0.0 {
                return Ok(Some(free_final.amplitudes().clone()));
            }
            let term = InteractionTerm {
                coupling,
                profile,
                pointer_momentum: PointerMomentum::Eigenvalue(momenta[k]),
                system_operator: a.clone(),
            };
            let p = prop.with_hamiltonian(h_sys.clone().with_interaction(term)?)?;
            Ok(Some(p.evolve(psi0, window.t_i, window.t_f)?.into_amplitudes()))
        })
        .collect::<Result<Vec<_>>>()?;
    let final_state = assemble_sectors(spec, psi0.space(), &sectors, &phi_hat, window.t_f)?;
    let density = marginal(final_state.space(), final_state.amplitudes(), psi0.dimension(), spec.grid.n_points());
    check_aliasing(spec, &density)?;
    Ok(MeterRun { spec: *spec, coupling, window, observable: "A".into(), free_final, final_state })
}

/// Same experiment with π̂⊗Â built as a dense composite matrix.
pub fn run_meter_dense(
    prop: &Propagator,
    spec: &PointerSpec,
    psi0: &QuantumState,
    a: &OperatorMatrix,
    coupling: f64,
    profile: CouplingProfile,
    window: Window,
) -> Result<MeterRun> {
    let h_sys = prop.hamiltonian().without_couplings();
    let free = Propagator::new(PropagationMethod::DenseExponential, prop.dt(), h_sys.clone())?;
    let free_final = free.evolve(psi0, window.t_i, window.t_f)?;
    let term = InteractionTerm {
        coupling,
        profile,
        pointer_momentum: PointerMomentum::Operator(spec.momentum_operator()),
        system_operator: a.clone(),
    };
    let h = h_sys.with_interaction(term)?;
    let composite = Propagator::new(PropagationMethod::DenseExponential, prop.dt(), h)?;
    let phi = psi0.tensor(&spec.initial_state().at_time(psi0.time()))?;
    let final_state = composite.evolve(&phi, window.t_i, window.t_f)?;
    Ok(MeterRun { spec: *spec, coupling, window, observable: "A".into(), free_final, final_state })
}

/// Eigendecomposition of t̂_ΩH, shared by all moment meters of one scenario.
#[derive(Debug, Clone)]
pub struct SojournSpectrum {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
    pub window: Window,
    pub space: Vec<FactorSpace>,
}

impl SojournSpectrum {
    pub fn new(sojourn: &SojournOperator) -> Self {
        let eig = sojourn.matrix.entries().clone().symmetric_eigen();
        Self {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
            window: sojourn.window(),
            space: sojourn.space().to_vec(),
        }
    }

    /// exp(−iλ·t̂^l)·v.
    pub fn exp_apply(&self, v: &CVector, lambda: f64, l: usize) -> CVector {
        let mut c = self.vectors.ad_mul(v);
        for (ci, tau) in c.iter_mut().zip(&self.values) {
            *ci *= C64::from_polar(1.0, -lambda * tau.powi(l as i32));
        }
        &self.vectors * c
    }
}

/// Moment meter: interaction G_l·h(t)·π̂⊗t̂_Ω(t)^l, with t̂_Ω(t) the
/// Schrödinger-picture operator whose Heisenberg image is t̂_ΩH. In the
/// interaction picture the generator is constant, so each sector is
/// ψ_k = exp(−iG_lπ_k t̂_ΩH^l)ψ₀(t_f).
pub fn run_moment_meter(
    prop: &Propagator,
    spec: &PointerSpec,
    psi0: &QuantumState,
    spectrum: &SojournSpectrum,
    l: usize,
    coupling: f64,
) -> Result<MeterRun> {
    if l == 0 || l > crate::sojourn::MAX_MOMENT {
        return Err(Error::Parameter(format!("moment order must be in 1..=4, got {l}")));
    }
    let window = spectrum.window;
    if psi0.space() != spectrum.space.as_slice() {
        return Err(Error::Structural("state and sojourn operator live on different spaces".into()));
    }
    let free = prop.free();
    let free_final = free.evolve(psi0, window.t_i, window.t_f)?;
    let phi_hat = pointer_spectrum(spec);
    let active = active_sectors(&phi_hat);
    let momenta = spec.momenta();
    let sectors: Vec<Option<CVector>> = (0..momenta.len())
        .into_par_iter()
        .map(|k| active[k].then(|| spectrum.exp_apply(free_final.amplitudes(), coupling * momenta[k], l)))
        .collect();
    let final_state = assemble_sectors(spec, psi0.space(), &sectors, &phi_hat, window.t_f)?;
    let density = marginal(final_state.space(), final_state.amplitudes(), psi0.dimension(), spec.grid.n_points());
    check_aliasing(spec, &density)?;
    Ok(MeterRun { spec: *spec, coupling, window, observable: format!("t^{l}"), free_final, final_state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerDistribution {
    pub q: Vec<f64>,
    pub density: Vec<f64>,
    /// Probability of the postselection outcome (1 when unconditioned).
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
    pub postselection: Option<String>,
}

impl PointerDistribution {
    fn from_density(q: Vec<f64>, raw: Vec<f64>, dq: f64, postselection: Option<String>) -> Self {
        let weight: f64 = raw.iter().sum::<f64>() * dq;
        let density: Vec<f64> = raw.iter().map(|f| f / weight).collect();
        let mean = q.iter().zip(&density).map(|(x, f)| x * f).sum::<f64>() * dq;
        let variance = q.iter().zip(&density).map(|(x, f)| (x - mean).powi(2) * f).sum::<f64>() * dq;
        Self { q, density, weight, mean, variance, postselection }
    }

    /// Local maxima above `threshold` times the global maximum.
    pub fn peak_count(&self, threshold: f64) -> usize {
        let max = self.density.iter().copied().fold(0.0, f64::max);
        let n = self.density.len();
        (0..n)
            .filter(|&j| {
                let f = self.density[j];
                let left = self.density[(j + n - 1) % n];
                let right = self.density[(j + 1) % n];
                f > threshold * max && f > left && f >= right
            })
            .count()
    }

    /// ∫ f(q) dq over q > 0 (or q < 0).
    pub fn side_weight(&self, positive: bool) -> f64 {
        let dq = self.q[1] - self.q[0];
        self.q
            .iter()
            .zip(&self.density)
            .filter(|(q, _)| if positive { **q > 0.0 } else { **q < 0.0 })
            .map(|(_, f)| f * dq)
            .sum()
    }
}

/// f(q), or f(q)⁽ⁿ⁾ ∝ |⟨χ, q|Φ⟩|² when postselecting on χ (given at t_f).
pub fn pointer_distribution(run: &MeterRun, postselect: Option<(&QuantumState, &str)>) -> Result<PointerDistribution> {
    let grid = run.spec.grid;
    let dq = grid.dx();
    match postselect {
        None => {
            let raw = marginal(run.final_state.space(), run.final_state.amplitudes(), run.n_system(), run.n_pointer());
            Ok(PointerDistribution::from_density(grid.points(), raw, dq, None))
        }
        Some((chi, label)) => {
            let overlap = chi.inner(&run.free_final)?;
            let floor = DEFAULT_OVERLAP_FLOOR * chi.norm() * run.free_final.norm();
            if overlap.norm() <= floor {
                return Err(Error::DegeneratePostselection { overlap: overlap.norm(), floor });
            }
            let c = run.projected_pointer(chi)?;
            let raw: Vec<f64> = c.iter().map(|z| z.norm_sqr()).collect();
            Ok(PointerDistribution::from_density(grid.points(), raw, dq, Some(label.to_string())))
        }
    }
}

/// P₀ = Σ_q |⟨ψ₀(t_f), q|Φ⟩|²·dq.
pub fn survival_probability(run: &MeterRun) -> Result<f64> {
    let chi = run.free_final.normalized()?;
    let c = run.projected_pointer(&chi)?;
    Ok(c.iter().map(|z| z.norm_sqr()).sum::<f64>() * run.spec.grid.dx())
}

/// Conditional weak quantities read from derivatives of the sector
/// amplitudes, next to their direct values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    /// Entry l−1 holds (iħ/π ∂_G)^l of ⟨χ,π|Φ⟩/⟨χ,π|Φ₀⟩ at the smallest
    /// pointer frequencies, extrapolated over the ladder. The first entry
    /// is the π → 0 derivative i∂/∂(Gπ).
    pub derivatives: Vec<C64>,
    pub fits: Vec<Extrapolation>,
    pub direct: Vec<C64>,
    pub discrepancy: Vec<f64>,
}

impl DerivativeReport {
    /// Every discrepancy within max(tol, extrapolation residual).
    pub fn agrees(&self, tol: f64) -> bool {
        self.discrepancy.iter().zip(&self.fits).all(|(d, f)| *d <= tol.max(f.residual))
    }
}

/// Finite differences in λ = Gπ on the sectors k = 0, ±1 of each run.
/// All runs must share a pointer spec; `direct[l−1]` is the l-th
/// conditional moment of the coupled observable computed without a meter.
/// Orders beyond the first are only meaningful when the interaction-picture
/// generator is time independent, as for moment meters.
pub fn derivative_identity_check(runs: &[MeterRun], chi: &QuantumState, direct: &[C64]) -> Result<DerivativeReport> {
    if runs.len() < 3 {
        return Err(Error::Fit("need at least 3 runs in the ladder".into()));
    }
    if direct.is_empty() || direct.len() > 2 {
        return Err(Error::Parameter("derivative check covers orders 1 and 2".into()));
    }
    let spec = runs[0].spec;
    if runs.iter().any(|r| r.spec != spec) {
        return Err(Error::Parameter("runs use different pointer grids".into()));
    }
    let n = spec.grid.n_points();
    let pi1 = spec.momenta()[1];
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut lambdas = Vec::new();
    for run in runs {
        let f0 = chi.inner(&run.sector_state(0)?)?;
        let fp = chi.inner(&run.sector_state(1)?)?;
        let fm = chi.inner(&run.sector_state(n - 1)?)?;
        let lambda = run.coupling * pi1;
        if lambda == 0.0 {
            return Err(Error::Fit("zero coupling in the ladder".into()));
        }
        first.push(C64::new(0.0, 1.0) * (fp - fm) / (2.0 * lambda) / f0);
        second.push(-(fp - 2.0 * f0 + fm) / (lambda * lambda) / f0);
        lambdas.push(lambda.abs());
    }
    let mut derivatives = Vec::new();
    let mut fits = Vec::new();
    for series in [first, second].iter().take(direct.len()) {
        let (v, fit) = extrapolate_complex(&lambdas, series, 2)?;
        derivatives.push(v);
        fits.push(fit);
    }
    let discrepancy = derivatives.iter().zip(direct).map(|(a, b)| (a - b).norm()).collect();
    Ok(DerivativeReport { derivatives, fits, direct: direct.to_vec(), discrepancy })
}

/// Cell-resolved λ-derivative moments: for each cell r,
/// Re{(iħ∂_λ)^l Φ(λ,r)/Φ₀(r)}, from sectors of a ladder of first-moment
/// meters, integrated with weight |ψ₀(r,t_f)|²·dx.
pub fn lambda_moment(runs: &[MeterRun], l: usize) -> Result<(f64, Extrapolation)> {
    if !(1..=2).contains(&l) {
        return Err(Error::Parameter(format!("λ-derivative route implemented for l = 1, 2, got {l}")));
    }
    if runs.len() < 3 {
        return Err(Error::Fit("need at least 3 runs in the ladder".into()));
    }
    let n = runs[0].spec.grid.n_points();
    let pi1 = runs[0].spec.momenta()[1];
    let mut values = Vec::new();
    let mut lambdas = Vec::new();
    for run in runs {
        let p0 = run.sector_state(0)?;
        let pp = run.sector_state(1)?;
        let pm = run.sector_state(n - 1)?;
        let lambda = run.coupling * pi1;
        let psi = run.free_final.amplitudes();
        let mu = run.free_final.measure();
        let mut acc = 0.0;
        for r in 0..psi.len() {
            let (a0, ap, am) = (p0.amplitudes()[r], pp.amplitudes()[r], pm.amplitudes()[r]);
            let num = if l == 1 {
                C64::new(0.0, 1.0) * (ap - am) / (2.0 * lambda)
            } else {
                -(ap - 2.0 * a0 + am) / (lambda * lambda)
            };
            // weight |ψ_r|² times Re{num/ψ_r}, written without the division
            acc += (psi[r].conj() * num).re * mu;
        }
        values.push(C64::new(acc / run.free_final.norm_sqr(), 0.0));
        lambdas.push(lambda.abs());
    }
    let (v, fit) = extrapolate_complex(&lambdas, &values, 2)?;
    Ok((v.re, fit))
}

/// Ordinary least squares y = a + b·x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Fit("need matching samples, at least 2".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Slope of log(y) against log(x).
pub fn loglog_order(x: &[f64], y: &[f64]) -> Result<f64> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    Ok(linear_fit(&lx, &ly)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Hamiltonian;
    use crate::hilbert::{gaussian_packet, projector, Region};
    use approx::assert_abs_diff_eq;

    fn two_level_prop(dt: f64) -> Propagator {
        Propagator::new(PropagationMethod::DenseExponential, dt, Hamiltonian::two_level()).unwrap()
    }

    fn spin(a: f64, b: f64) -> QuantumState {
        QuantumState::new(vec![FactorSpace::Spin2], CVector::from_vec(vec![C64::new(a, 0.0), C64::new(b, 0.0)]), 0.0)
            .unwrap()
            .normalized()
            .unwrap()
    }

    fn impulsive_run(width: f64, g: f64, psi0: &QuantumState, n: usize) -> MeterRun {
        let dt = 0.01;
        let w = Window::new(0.0, 1.0).unwrap();
        let spec = PointerSpec::new(n, 24.0 * width.max(g), width).unwrap();
        let profile = CouplingProfile::impulsive(1.0, dt).unwrap();
        run_meter(&two_level_prop(dt), &spec, psi0, &OperatorMatrix::pauli_z(), g, profile, w).unwrap()
    }

    #[test]
    fn pointer_state_is_centered_and_normalized() {
        let spec = PointerSpec::new(256, 20.0, 1.0).unwrap();
        let phi = spec.initial_state();
        assert_abs_diff_eq!(phi.norm_sqr(), 1.0, epsilon = 1e-12);
        let mean: f64 =
            spec.grid.points().iter().zip(phi.amplitudes().iter()).map(|(q, a)| q * a.norm_sqr()).sum::<f64>() * spec.grid.dx();
        assert!(mean.abs() < spec.grid.dx());
    }

    #[test]
    fn zero_coupling_leaves_product_state() {
        let psi0 = spin(1.0, 1.0);
        let run = impulsive_run(1.0, 0.0, &psi0, 128);
        let expect = run.free_final.tensor(&run.spec.initial_state().at_time(1.0)).unwrap();
        assert!((run.final_state.amplitudes() - expect.amplitudes()).camax() < 1e-13);
    }

    #[test]
    fn identity_observable_translates_pointer() {
        let psi0 = spin(1.0, 0.3);
        let dt = 0.01;
        let spec = PointerSpec::new(256, 24.0, 1.0).unwrap();
        let w = Window::new(0.0, 1.0).unwrap();
        let id = OperatorMatrix::identity(vec![FactorSpace::Spin2]).unwrap();
        let g = 2.0;
        let run =
            run_meter(&two_level_prop(dt), &spec, &psi0, &id, g, CouplingProfile::rectangular(w), w).unwrap();
        let d = pointer_distribution(&run, None).unwrap();
        assert_abs_diff_eq!(d.mean, g, epsilon = 1e-9);
        assert_abs_diff_eq!(d.variance, 1.0, epsilon = 1e-9);
        let sys = run.sector_state(0).unwrap();
        assert!((sys.amplitudes() - psi0.amplitudes()).camax() < 1e-12);
    }

    #[test]
    fn strong_measurement_splits_pointer() {
        let psi0 = spin(1.0, 1.0);
        let run = impulsive_run(0.1, 1.0, &psi0, 1024);
        let d = pointer_distribution(&run, None).unwrap();
        assert_eq!(d.peak_count(0.01), 2);
        assert_abs_diff_eq!(d.side_weight(true), 0.5, epsilon = 0.01);
        assert_abs_diff_eq!(survival_probability(&run).unwrap(), 0.5, epsilon = 0.01);
        let ip = d.q.iter().zip(&d.density).filter(|(q, _)| **q > 0.0).max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_abs_diff_eq!(*ip, 1.0, epsilon = 2.0 * run.spec.grid.dx());
    }

    #[test]
    fn eigenstate_survives() {
        let psi0 = spin(1.0, 0.0);
        let run = impulsive_run(0.1, 1.0, &psi0, 1024);
        assert_abs_diff_eq!(survival_probability(&run).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn narrow_grid_aliases() {
        let psi0 = spin(1.0, 1.0);
        let spec = PointerSpec::new(128, 6.0, 0.3).unwrap();
        let w = Window::new(0.0, 1.0).unwrap();
        let r = run_meter(
            &two_level_prop(0.01),
            &spec,
            &psi0,
            &OperatorMatrix::pauli_z(),
            2.5,
            CouplingProfile::impulsive(1.0, 0.01).unwrap(),
            w,
        );
        assert!(matches!(r, Err(Error::Aliasing(_))));
    }

    #[test]
    fn sector_path_matches_dense_composite() {
        let g = Grid::new(12, 0.0, 6.0).unwrap();
        let h = Hamiltonian::free(g).with_added_potential(&Region::new(2.5, 3.5).unwrap(), 1.0).unwrap();
        let prop = Propagator::new(PropagationMethod::DenseExponential, 0.02, h).unwrap();
        let psi0 = QuantumState::from_fn(g, 0.0, |x| C64::from_polar((-(x - 2.0f64).powi(2)).exp(), 0.7 * x)).normalized().unwrap();
        let spec = PointerSpec::new(64, 20.0, 1.0).unwrap();
        let w = Window::new(0.0, 0.4).unwrap();
        let a = projector(&Region::new(2.5, 3.5).unwrap(), &g).unwrap();
        let prof = CouplingProfile::rectangular(w);
        let s = run_meter(&prop, &spec, &psi0, &a, 0.8, prof, w).unwrap();
        let d = run_meter_dense(&prop, &spec, &psi0, &a, 0.8, prof, w).unwrap();
        assert!((s.final_state.amplitudes() - d.final_state.amplitudes()).camax() < 1e-10);
        assert_abs_diff_eq!(d.final_state.norm_sqr(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn weak_shift_follows_weak_value() {
        // ψ₀ = cosθ|↑⟩ + sinθ|↓⟩, σ_z weak value cos 2θ
        let psi0 = spin(0.8, 0.6);
        let aw = 0.64 - 0.36;
        let gs = [4e-3, 2e-3, 1e-3, 5e-4];
        let shifts: Vec<f64> = gs
            .iter()
            .map(|&g| pointer_distribution(&impulsive_run(1.0, g, &psi0, 256), None).unwrap().mean)
            .collect();
        let (intercept, slope) = linear_fit(&gs, &shifts).unwrap();
        assert!(intercept.abs() < 1e-6);
        assert!((slope - aw).abs() < 1e-3 * aw);
    }

    #[test]
    fn survival_loss_is_second_order_in_g() {
        let psi0 = spin(1.0, 1.0);
        let gs = [0.08, 0.04, 0.02, 0.01];
        let loss: Vec<f64> = gs.iter().map(|&g| 1.0 - survival_probability(&impulsive_run(1.0, g, &psi0, 256)).unwrap()).collect();
        assert!(loglog_order(&gs, &loss).unwrap() >= 1.5);
    }

    #[test]
    fn moment_meter_matches_schrodinger_picture_stepping() {
        let g = Grid::new(10, 0.0, 5.0).unwrap();
        let h = Hamiltonian::free(g).with_added_potential(&Region::new(2.0, 3.0).unwrap(), 1.5).unwrap();
        let dt = 0.01;
        let prop = Propagator::new(PropagationMethod::DenseExponential, dt, h.clone()).unwrap();
        let eng = crate::sojourn::SojournEngine::new(&prop, None).unwrap();
        let w = Window::new(0.0, 0.3).unwrap();
        let t = eng.sojourn_matrix(&Region::new(2.0, 3.0).unwrap(), w, None).unwrap();
        let spectrum = SojournSpectrum::new(&t);
        let spec = PointerSpec::new(64, 20.0, 1.0).unwrap();
        let psi0 = QuantumState::from_fn(g, 0.0, |x| C64::from_polar((-(x - 1.5f64).powi(2)).exp(), x)).normalized().unwrap();
        let gl = 0.3;
        for l in [1usize, 2] {
            let mm = run_moment_meter(&prop, &spec, &psi0, &spectrum, l, gl).unwrap();
            // Schrödinger picture: t_Ω(t) = U₀(t_f,t)† t̂^l U₀(t_f,t), frozen at step midpoints
            let h0 = crate::dynamics::assemble(&h, 0.0).unwrap().into_entries();
            let tl = (0..l).fold(CMatrix::identity(10, 10), |m, _| m * t.matrix.entries());
            let pis = spec.momenta();
            let steps = 30;
            let mut sectors = Vec::new();
            for &p in &pis {
                let mut v = psi0.amplitudes().clone();
                for k in 0..steps {
                    let tm = (k as f64 + 0.5) * dt;
                    let u = (h0.clone() * C64::new(0.0, -(w.t_f - tm))).exp();
                    let a = u.adjoint() * &tl * &u;
                    let hk = &h0 + a * C64::new(gl * p / w.length(), 0.0);
                    v = (hk * C64::new(0.0, -dt)).exp() * v;
                }
                sectors.push(Some(v));
            }
            let phi_hat = pointer_spectrum(&spec);
            let direct = assemble_sectors(&spec, psi0.space(), &sectors, &phi_hat, w.t_f).unwrap();
            let diff = (mm.final_state.amplitudes() - direct.amplitudes()).camax();
            assert!(diff < 1e-4, "l = {l}: {diff}");
        }
    }

    #[test]
    fn derivative_identity_on_position_system() {
        let g = Grid::new(48, 0.0, 20.0).unwrap();
        let region = Region::new(9.5, 10.5).unwrap();
        let h = Hamiltonian::free(g).with_added_potential(&region, 3.0).unwrap();
        let prop = Propagator::new(PropagationMethod::ImplicitStep, 0.01, h).unwrap();
        let psi0 = gaussian_packet(&g, 7.0, 1.5, 1.5).unwrap();
        let w = Window::new(0.0, 2.0).unwrap();
        let eng = crate::sojourn::SojournEngine::new(&prop, None).unwrap();
        let t = eng.sojourn_matrix(&region, w, None).unwrap();
        let spectrum = SojournSpectrum::new(&t);
        let spec = PointerSpec::new(64, 20.0, 1.0).unwrap();
        let chi = crate::sojourn::cell_state(&g, 30, w.t_f);
        let runs: Vec<MeterRun> = [4e-3, 2e-3, 1e-3]
            .iter()
            .map(|&gl| run_moment_meter(&prop, &spec, &psi0, &spectrum, 1, gl).unwrap())
            .collect();
        let direct = [
            eng.moment_complex(&psi0, &chi, &t, 1).unwrap(),
            eng.moment_complex(&psi0, &chi, &t, 2).unwrap(),
        ];
        let rep = derivative_identity_check(&runs, &chi, &direct).unwrap();
        assert!(rep.discrepancy[0] < 1e-6 * direct[0].norm(), "{:?}", rep);
        assert!(rep.discrepancy[1] < 1e-5 * direct[1].norm(), "{:?}", rep);
        let (m2, _) = lambda_moment(&runs, 2).unwrap();
        let op = eng.moment(&psi0, &eng.state_at(&psi0, w.t_f).unwrap(), &t, 2).unwrap();
        assert!((m2 - op).abs() < 1e-5 * op);
    }

    #[test]
    fn peaks_merge_as_pointer_widens() {
        let psi0 = spin(1.0, 1.0);
        let ratios = [0.1, 0.3, 1.0, 3.0, 10.0, 100.0];
        let counts: Vec<usize> = ratios
            .iter()
            .map(|&r| {
                let n = if r < 1.0 { 1024 } else { 256 };
                pointer_distribution(&impulsive_run(r, 1.0, &psi0, n), None).unwrap().peak_count(0.01)
            })
            .collect();
        assert_eq!(counts[0], 2);
        assert_eq!(*counts.last().unwrap(), 1);
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }

    #[test]
    fn conditional_means_sum_to_unconditioned() {
        let psi0 = spin(0.8, 0.6);
        let basis = [spin(1.0, 1.0).at_time(1.0), spin(1.0, -1.0).at_time(1.0)];
        for g in [0.01, 0.5, 2.0] {
            let run = impulsive_run(1.0, g, &psi0, 256);
            let total = pointer_distribution(&run, None).unwrap().mean;
            let sum: f64 = basis
                .iter()
                .map(|chi| {
                    let d = pointer_distribution(&run, Some((chi, "x"))).unwrap();
                    d.weight * d.mean
                })
                .sum();
            assert_abs_diff_eq!(sum, total, epsilon = 1e-8);
            assert_abs_diff_eq!(run.final_state.norm_sqr(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn conditional_variance_excess_vanishes_faster_than_g() {
        let psi0 = spin(0.8, 0.6);
        let chi = spin(1.0, 1.0).at_time(1.0);
        let gs = [0.04, 0.02, 0.01, 0.005];
        let excess: Vec<f64> = gs
            .iter()
            .map(|&g| {
                let d = pointer_distribution(&impulsive_run(1.0, g, &psi0, 256), Some((&chi, "+x"))).unwrap();
                d.variance - 1.0
            })
            .collect();
        assert!(loglog_order(&gs, &excess).unwrap() > 1.0);
    }

    #[test]
    fn interaction_picture_steps_commute() {
        let g = Grid::new(16, 0.0, 8.0).unwrap();
        let region = Region::new(3.0, 5.0).unwrap();
        let h = Hamiltonian::free(g).with_added_potential(&region, 2.0).unwrap();
        let prop = Propagator::new(PropagationMethod::DenseExponential, 0.02, h).unwrap();
        let eng = crate::sojourn::SojournEngine::new(&prop, None).unwrap();
        let w = Window::new(0.0, 0.4).unwrap();
        let t = eng.sojourn_matrix(&region, w, None).unwrap();
        let psi = gaussian_packet(&g, 2.5, 1.7, 1.0).unwrap().into_amplitudes();
        let lambda = 0.7;
        let steps = 20;
        // Schrödinger-picture t̂_Ω(t_k), mapped back through the free evolution
        let step_ops: Vec<CMatrix> = (0..steps)
            .map(|k| {
                let tk = k as f64 * 0.02;
                let u = prop.evolution_matrix(tk, w.t_f).unwrap();
                let s_op = OperatorMatrix::new(t.space().to_vec(), u.adjoint() * t.matrix.entries() * &u, true).unwrap();
                let g_op = crate::dynamics::heisenberg_conjugate(&prop, &s_op, w.t_f, tk).unwrap();
                (g_op.into_entries() * C64::new(0.0, -lambda / steps as f64)).exp()
            })
            .collect();
        let ordered = step_ops.iter().fold(psi.clone(), |v, m| m * v);
        let shuffled = step_ops.iter().rev().step_by(2).chain(step_ops.iter().step_by(2)).fold(psi.clone(), |v, m| m * v);
        let whole = SojournSpectrum::new(&t).exp_apply(&psi, lambda, 1);
        assert!((&ordered - &shuffled).camax() < 1e-8);
        assert!((&ordered - &whole).camax() < 1e-8);
    }
}
