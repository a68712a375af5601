//! Physical clocks: a small perturbation confined to Ω, swept toward zero.
//!
//! * real potential V·P̂_Ω, read through i∂_V⟨χ|Φ(V)⟩/⟨χ|Φ₀⟩ with central
//!   differences over ±V;
//! * imaginary potential −i(Γ/2)P̂_Ω, read through −2∂_Γ⟨χ|Φ(Γ)⟩/⟨χ|Φ₀⟩
//!   with one-sided differences (Γ ≥ 0 only);
//! * Larmor precession (ω/2)σ̂_z⊗P̂_Ω on a spin prepared along +x, read
//!   through the y-component of the spin.
//!
//! Every sweep is extrapolated to zero strength by Richardson/Neville
//! elimination of the leading error term.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Hamiltonian, Propagator, SpinCoupling, Window};
use crate::error::{Error, Result};
use crate::hilbert::{CVector, FactorSpace, QuantumState, Region};

/// Smallest admissible perturbation strength.
pub const STRENGTH_FLOOR: f64 = 1e-7;
/// Largest tolerated absorbed fraction at the strongest Γ.
pub const MAX_ABSORBED: f64 = 0.2;
/// Accepted range of fitted convergence orders.
pub const ORDER_RANGE: (f64, f64) = (0.8, 2.5);

const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMethod {
    RealPotential,
    ImaginaryPotential,
    Larmor,
}

impl ClockMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ClockMethod::RealPotential => "real_potential",
            ClockMethod::ImaginaryPotential => "imaginary_potential",
            ClockMethod::Larmor => "larmor",
        }
    }

    /// Power of the strength in the leading error term of the readout.
    pub fn error_order(&self) -> u32 {
        match self {
            ClockMethod::ImaginaryPotential => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeScheme {
    /// Readout at the smallest strength, no extrapolation.
    Central,
    /// Extrapolation through the `levels` smallest strengths.
    Richardson { levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockConfig {
    pub method: ClockMethod,
    pub strengths: Vec<f64>,
    pub region: Region,
    pub window: Window,
    pub postselection: String,
    pub scheme: DerivativeScheme,
}

impl ClockConfig {
    /// Default ladder {8ε, 4ε, 2ε, ε} with ε = 1e−3/(t_f − t_i).
    pub fn new(method: ClockMethod, region: Region, window: Window, postselection: &str) -> Self {
        Self {
            method,
            strengths: default_ladder(window),
            region,
            window,
            postselection: postselection.to_string(),
            scheme: DerivativeScheme::Richardson { levels: 4 },
        }
    }

    /// Replaces the ladder; a Richardson scheme then uses all of it.
    pub fn with_strengths(mut self, strengths: Vec<f64>) -> Self {
        if let DerivativeScheme::Richardson { .. } = self.scheme {
            self.scheme = DerivativeScheme::Richardson { levels: strengths.len() };
        }
        self.strengths = strengths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strengths.len() < 3 {
            return Err(Error::Parameter(format!("need at least 3 strengths, got {}", self.strengths.len())));
        }
        if self.strengths.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Parameter("strengths must be strictly decreasing".into()));
        }
        let smallest = *self.strengths.last().expect("non-empty");
        if !(smallest > STRENGTH_FLOOR) {
            return Err(Error::Parameter(format!("smallest strength {smallest} is below {STRENGTH_FLOOR}")));
        }
        if let DerivativeScheme::Richardson { levels } = self.scheme {
            if levels < 2 || levels > self.strengths.len() {
                return Err(Error::Parameter(format!("richardson levels {levels} out of range")));
            }
        }
        Ok(())
    }
}

pub fn default_ladder(window: Window) -> Vec<f64> {
    let eps = 1e-3 / window.length();
    vec![8.0 * eps, 4.0 * eps, 2.0 * eps, eps]
}

/// Zero-strength limit of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub value: f64,
    /// Observed order of the leading error; `None` when the readouts agree
    /// to rounding and no order can be measured.
    pub order: Option<f64>,
    pub residual: f64,
}

impl Extrapolation {
    pub fn order_accepted(&self) -> bool {
        self.order.map_or(true, |p| (ORDER_RANGE.0..=ORDER_RANGE.1).contains(&p))
    }
}

/// Neville extrapolation to h = 0 of `points = [(h, f(h))]`, assuming
/// f(h) = f(0) + c₁h^p + c₂h^{2p} + …
pub fn extrapolate_to_zero(points: &[(f64, f64)], p: u32) -> Result<Extrapolation> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    let value = neville_at_zero(points, p)?;
    let without_coarsest = {
        let mut pts = points.to_vec();
        let coarsest = pts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.abs().total_cmp(&b.1 .0.abs()))
            .map(|(i, _)| i)
            .expect("non-empty");
        pts.remove(coarsest);
        neville_at_zero(&pts, p)?
    };
    let residual = (value - without_coarsest).abs();

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
    let scale = sorted.iter().map(|q| q.1.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let order = observed_order(&sorted[..3], scale);
    Ok(Extrapolation { value, order, residual })
}

/// Order q of f(h) = f₀ + c·h^q through three points sorted by |h|.
fn observed_order(finest: &[(f64, f64)], scale: f64) -> Option<f64> {
    let (h2, h1, h0) = (finest[0].0.abs(), finest[1].0.abs(), finest[2].0.abs());
    let d1 = finest[2].1 - finest[1].1;
    let d2 = finest[1].1 - finest[0].1;
    if d1.abs() <= 1e-11 * scale || d2.abs() <= 1e-11 * scale || d1.signum() != d2.signum() {
        return if d1.abs() <= 1e-11 * scale && d2.abs() <= 1e-11 * scale { None } else { Some(0.0) };
    }
    let target = d1 / d2;
    let ratio = |q: f64| (h0.powf(q) - h1.powf(q)) / (h1.powf(q) - h2.powf(q));
    let (mut lo, mut hi) = (1e-3, 12.0);
    if target <= ratio(lo) {
        return Some(lo);
    }
    if target >= ratio(hi) {
        return Some(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn neville_at_zero(points: &[(f64, f64)], p: u32) -> Result<f64> {
    let u: Vec<f64> = points.iter().map(|q| q.0.abs().powi(p as i32)).collect();
    let mut t: Vec<f64> = points.iter().map(|q| q.1).collect();
    let n = t.len();
    for m in 1..n {
        for i in 0..n - m {
            let du = u[i + m] - u[i];
            if du.abs() <= f64::EPSILON * u[i].abs().max(u[i + m].abs()) {
                return Err(Error::Fit("coincident strengths".into()));
            }
            // p(0) from the interpolants on [i, i+m−1] and [i+1, i+m]
            t[i] = (u[i + m] * t[i] - u[i] * t[i + 1]) / du;
        }
    }
    Ok(t[0])
}

/// Complex counterpart: real and imaginary parts extrapolated separately.
pub fn extrapolate_complex(strengths: &[f64], readouts: &[C64], p: u32) -> Result<(C64, Extrapolation)> {
    let re: Vec<(f64, f64)> = strengths.iter().zip(readouts).map(|(h, z)| (*h, z.re)).collect();
    let im: Vec<(f64, f64)> = strengths.iter().zip(readouts).map(|(h, z)| (*h, z.im)).collect();
    let er = extrapolate_to_zero(&re, p)?;
    let ei = extrapolate_to_zero(&im, p)?;
    Ok((C64::new(er.value, ei.value), er))
}

/// A named readout series with its own extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSeries {
    pub name: String,
    pub readouts: Vec<C64>,
    pub value: C64,
    pub fit: Extrapolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: ClockMethod,
    pub postselection: String,
    pub strengths: Vec<f64>,
    pub readouts: Vec<C64>,
    pub extrapolated: C64,
    pub fit: Extrapolation,
    pub alternates: Vec<ReadoutSeries>,
    pub flags: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl SweepRecord {
    /// The real time read by the clock.
    pub fn time(&self) -> f64 {
        self.extrapolated.re
    }

    pub fn order(&self) -> Option<f64> {
        self.fit.order
    }

    pub fn residual(&self) -> f64 {
        self.fit.residual
    }

    pub fn alternate(&self, name: &str) -> Option<&ReadoutSeries> {
        self.alternates.iter().find(|s| s.name == name)
    }
}

fn finish_series(cfg: &ClockConfig, readouts: &[C64]) -> Result<(C64, Extrapolation)> {
    let p = cfg.method.error_order();
    match cfg.scheme {
        DerivativeScheme::Central => {
            let n = readouts.len();
            let value = readouts[n - 1];
            let full = extrapolate_complex(&cfg.strengths, readouts, p)?.1;
            let residual = (readouts[n - 1].re - readouts[n - 2].re).abs();
            Ok((value, Extrapolation { value: value.re, order: full.order, residual }))
        }
        DerivativeScheme::Richardson { levels } => {
            let k = cfg.strengths.len() - levels;
            extrapolate_complex(&cfg.strengths[k..], &readouts[k..], p)
        }
    }
}

fn build_record(
    cfg: &ClockConfig,
    readouts: Vec<C64>,
    alternates: Vec<(String, Vec<C64>)>,
    metadata: BTreeMap<String, String>,
) -> Result<SweepRecord> {
    let (extrapolated, fit) = finish_series(cfg, &readouts)?;
    let mut flags = Vec::new();
    if !fit.order_accepted() {
        flags.push("order_out_of_range".to_string());
    }
    let alternates = alternates
        .into_iter()
        .map(|(name, r)| {
            let (value, fit) = finish_series(cfg, &r)?;
            Ok(ReadoutSeries { name, readouts: r, value, fit })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepRecord {
        method: cfg.method,
        postselection: cfg.postselection.clone(),
        strengths: cfg.strengths.clone(),
        readouts,
        extrapolated,
        fit,
        alternates,
        flags,
        metadata,
    })
}

fn check_inputs(prop: &Propagator, cfg: &ClockConfig, psi0: &QuantumState, chi: Option<&QuantumState>) -> Result<()> {
    cfg.validate()?;
    let h = prop.hamiltonian();
    if psi0.space() != h.space() {
        return Err(Error::Structural("initial state and Hamiltonian live on different spaces".into()));
    }
    if (psi0.time() - cfg.window.t_i).abs() > 1e-9 {
        return Err(Error::Timing(format!("initial state given at {}, window opens at {}", psi0.time(), cfg.window.t_i)));
    }
    if let Some(c) = chi {
        if c.space() != h.space() {
            return Err(Error::Structural("postselected state lives on a different space".into()));
        }
        if (c.time() - cfg.window.t_f).abs() > 1e-9 {
            return Err(Error::Timing(format!("postselected state given at {}, window closes at {}", c.time(), cfg.window.t_f)));
        }
    }
    Ok(())
}

fn evolve_with(prop: &Propagator, h: Hamiltonian, psi0: &QuantumState, window: Window) -> Result<QuantumState> {
    prop.with_hamiltonian(h)?.evolve(psi0, window.t_i, window.t_f)
}

/// ⟨χ|·⟩ reference amplitudes: χ itself, or Φ₀(t_f) when unconditioned.
fn reference(chi: Option<&QuantumState>, phi0: &QuantumState) -> QuantumState {
    chi.cloned().unwrap_or_else(|| phi0.clone())
}

/// Real-potential clock: ⟨t⟩ = Re{i∂_V⟨χ|Φ(V)⟩/⟨χ|Φ₀⟩}.
pub fn clock_real_potential(
    prop: &Propagator,
    cfg: &ClockConfig,
    psi0: &QuantumState,
    chi: Option<&QuantumState>,
) -> Result<SweepRecord> {
    if cfg.method != ClockMethod::RealPotential {
        return Err(Error::Parameter("config is not a real-potential clock".into()));
    }
    check_inputs(prop, cfg, psi0, chi)?;
    let h0 = prop.hamiltonian().without_couplings();
    let phi0 = evolve_with(prop, h0.clone(), psi0, cfg.window)?;
    let chi = reference(chi, &phi0);
    let f0 = chi.inner(&phi0)?;
    let ratios = cfg
        .strengths
        .par_iter()
        .map(|&v| {
            let plus = evolve_with(prop, h0.clone().with_added_potential(&cfg.region, v)?, psi0, cfg.window)?;
            let minus = evolve_with(prop, h0.clone().with_added_potential(&cfg.region, -v)?, psi0, cfg.window)?;
            let d = (chi.inner(&plus)? - chi.inner(&minus)?) / (2.0 * v);
            Ok(I * d / f0)
        })
        .collect::<Result<Vec<C64>>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("meter_representation".into(), format!("V = G*pi/{}", cfg.window.length()));
    meta.insert("reference_overlap".into(), format!("{:.12e}", f0.norm()));
    build_record(cfg, ratios, Vec::new(), meta)
}

/// Imaginary-potential clock. With a postselected χ the readout is
/// Re{−2∂_Γ⟨χ|Φ(Γ)⟩/⟨χ|Φ₀⟩}; without, it is the absorption rate
/// −∂_Γ‖Φ(Γ)‖², and the Φ₀-projected ratio is kept as an alternate.
pub fn clock_imaginary_potential(
    prop: &Propagator,
    cfg: &ClockConfig,
    psi0: &QuantumState,
    chi: Option<&QuantumState>,
) -> Result<SweepRecord> {
    if cfg.method != ClockMethod::ImaginaryPotential {
        return Err(Error::Parameter("config is not an imaginary-potential clock".into()));
    }
    check_inputs(prop, cfg, psi0, chi)?;
    let h0 = prop.hamiltonian().without_couplings();
    let phi0 = evolve_with(prop, h0.clone(), psi0, cfg.window)?;
    let n0 = phi0.norm_sqr();
    let reference_state = reference(chi, &phi0);
    let f0 = reference_state.inner(&phi0)?;
    let runs = cfg
        .strengths
        .par_iter()
        .map(|&g| evolve_with(prop, h0.clone().with_absorber(&cfg.region, g)?, psi0, cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let absorbed = 1.0 - runs[0].norm_sqr() / n0;
    if absorbed > MAX_ABSORBED {
        return Err(Error::Precondition(format!(
            "absorbed fraction {absorbed:.3} at the largest rate exceeds {MAX_ABSORBED}"
        )));
    }
    let ratio = runs
        .iter()
        .zip(&cfg.strengths)
        .map(|(phi, &g)| Ok(-2.0 * (reference_state.inner(phi)? - f0) / (g * f0)))
        .collect::<Result<Vec<C64>>>()?;
    let norm_loss: Vec<C64> =
        runs.iter().zip(&cfg.strengths).map(|(phi, &g)| C64::new(-(phi.norm_sqr() / n0 - 1.0) / g, 0.0)).collect();
    let mut meta = BTreeMap::new();
    meta.insert("absorbed_fraction_max".into(), format!("{absorbed:.6e}"));
    let record = if chi.is_some() {
        build_record(cfg, ratio, vec![("norm_loss".into(), norm_loss)], meta)?
    } else {
        build_record(cfg, norm_loss, vec![("projected_ratio".into(), ratio)], meta)?
    };
    Ok(record)
}

fn plus_x() -> QuantumState {
    let a = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    QuantumState::new(vec![FactorSpace::Spin2], CVector::from_vec(vec![a, a]), 0.0).expect("two amplitudes")
}

/// Spatial components (up, down) of a position⊗spin state.
fn spin_components(phi: &QuantumState) -> Result<(QuantumState, QuantumState)> {
    let grid = phi.position_grid().ok_or_else(|| Error::Structural("expected a position factor".into()))?;
    let n = grid.n_points();
    let amp = phi.amplitudes();
    let up = CVector::from_fn(n, |j, _| amp[2 * j]);
    let down = CVector::from_fn(n, |j, _| amp[2 * j + 1]);
    let space = vec![FactorSpace::Position(grid)];
    Ok((
        QuantumState::new(space.clone(), up, phi.time())?,
        QuantumState::new(space, down, phi.time())?,
    ))
}

/// Larmor clock. The spin starts along +x and precesses under
/// (ω/2)σ̂_z⊗P̂_Ω. Two readouts come from the same runs:
///
/// * `amplitude` (primary): Re{2⟨χ,+x|σ̂_y|Φ⟩/(ω⟨χ,+x|Φ₀⟩)};
/// * `expectation`: the conditional ⟨σ̂_y⟩/ω, which tends to Re t_w.
///
/// `psi0` and `chi` are spatial states.
pub fn clock_larmor(
    prop: &Propagator,
    cfg: &ClockConfig,
    psi0: &QuantumState,
    chi: Option<&QuantumState>,
) -> Result<SweepRecord> {
    if cfg.method != ClockMethod::Larmor {
        return Err(Error::Parameter("config is not a Larmor clock".into()));
    }
    check_inputs(prop, cfg, psi0, chi)?;
    let h0 = prop.hamiltonian().without_couplings();
    let phi0 = evolve_with(prop, h0.clone(), psi0, cfg.window)?;
    let chi_state = reference(chi, &phi0);
    let f0 = chi_state.inner(&phi0)?;
    let spinor = psi0.tensor(&plus_x().at_time(psi0.time()))?;
    let runs = cfg
        .strengths
        .par_iter()
        .map(|&omega| {
            let h = h0.clone().with_spin_coupling(SpinCoupling { omega, region: cfg.region, active: None })?;
            let phi = evolve_with(prop, h, &spinor, cfg.window)?;
            let (up, down) = spin_components(&phi)?;
            let a = chi_state.inner(&up)?;
            let b = chi_state.inner(&down)?;
            // σ_y(a, b) = (−ib, ia); ⟨+x| = (1, 1)/√2
            let sy_amp = I * (a - b) * std::f64::consts::FRAC_1_SQRT_2;
            let amplitude = 2.0 * sy_amp / (omega * f0);
            let expectation = if chi.is_some() {
                2.0 * (a.conj() * b).im / (a.norm_sqr() + b.norm_sqr()) / omega
            } else {
                let s = up.inner(&down)?;
                2.0 * s.im / (up.norm_sqr() + down.norm_sqr()) / omega
            };
            Ok((amplitude, C64::new(expectation, 0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    let amplitude: Vec<C64> = runs.iter().map(|r| r.0).collect();
    let expectation: Vec<C64> = runs.iter().map(|r| r.1).collect();
    let mut meta = BTreeMap::new();
    meta.insert("initial_spin".into(), "+x".into());
    meta.insert("pointer".into(), "q = sigma_y, pi = sigma_z/2".into());
    build_record(cfg, amplitude, vec![("expectation".into(), expectation)], meta)
}

/// Dispatch on `cfg.method`.
pub fn run_clock(
    prop: &Propagator,
    cfg: &ClockConfig,
    psi0: &QuantumState,
    chi: Option<&QuantumState>,
) -> Result<SweepRecord> {
    match cfg.method {
        ClockMethod::RealPotential => clock_real_potential(prop, cfg, psi0, chi),
        ClockMethod::ImaginaryPotential => clock_imaginary_potential(prop, cfg, psi0, chi),
        ClockMethod::Larmor => clock_larmor(prop, cfg, psi0, chi),
    }
}
