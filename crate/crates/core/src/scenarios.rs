//! Scenario catalog, configuration, postselection channels and result
//! bundles.
//!
//! A scenario is read from a TOML file of dotted keys (`grid.n = 512`,
//! `potential.v0 = 2.0`, ...). [`run_scenario`] builds the system, runs the
//! requested pipelines and collects every number with its method,
//! tolerance and residual in a [`ResultBundle`], together with the
//! cross-checks between methods.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clocks::{extrapolate_to_zero, run_clock, ClockConfig, ClockMethod, SweepRecord};
use crate::dynamics::{
    assemble, step_count, CouplingProfile, Hamiltonian, PropagationMethod, Propagator, Window,
};
use crate::error::{Error, Result};
use crate::hilbert::{
    eigendecompose, gaussian_packet, projector, CVector, FactorSpace, Grid, OperatorMatrix, QuantumState, Region,
};
use crate::meter::{
    derivative_identity_check, lambda_moment, linear_fit, loglog_order, pointer_distribution, run_meter,
    run_moment_meter, survival_probability, MeterRun, PointerDistribution, PointerSpec, SojournSpectrum,
};
use crate::sojourn::{cell_state, SojournEngine, SojournOperator};

/// Largest probability left inside the barrier when splitting into
/// transmitted and reflected parts.
pub const BARRIER_RESIDUAL_BUDGET: f64 = 1e-3;
/// Largest probability allowed in the outer 5% of the box during the window.
pub const BOUNDARY_BUDGET: f64 = 1e-6;
/// Clearance between the initial packet and any feature next to Ω, in σ.
pub const PACKET_CLEARANCE: f64 = 5.0;
/// Channels whose probability falls below this are dropped.
pub const CHANNEL_FLOOR: f64 = 1e-12;

pub const SUM_RULE_TOL: f64 = 1e-8;
pub const CLOCK_REL_TOL: f64 = 1e-2;
pub const METER_REL_TOL: f64 = 1e-2;
pub const INTERCEPT_TOL: f64 = 1e-6;
pub const MOMENT_REL_TOL: f64 = 1e-3;
pub const DERIVATIVE_TOL: f64 = 1e-4;
pub const STRONG_TOL: f64 = 2e-2;
pub const SURVIVAL_MIN_ORDER: f64 = 1.5;

const CATALOG: [(&str, &str); 5] = [
    ("a_free", include_str!("../catalog/a_free.toml")),
    ("b_well", include_str!("../catalog/b_well.toml")),
    ("c_barrier", include_str!("../catalog/c_barrier.toml")),
    ("d_far_side", include_str!("../catalog/d_far_side.toml")),
    ("e_two_level", include_str!("../catalog/e_two_level.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    #[default]
    Position,
    TwoLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    #[default]
    Free,
    Barrier,
    DoubleBarrier,
    Well,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default)]
    pub kind: PotentialKind,
    #[serde(default)]
    pub v0: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Gap between the two barriers of a double barrier.
    pub separation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    #[default]
    Gaussian,
    Eigenstate,
    Spin,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    #[serde(default)]
    pub kind: PacketKind,
    pub x0: Option<f64>,
    pub sigma: Option<f64>,
    pub k0: Option<f64>,
    #[serde(default)]
    pub level: usize,
    pub up: Option<f64>,
    pub down: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default)]
    pub t_i: f64,
    pub t_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostselectionMode {
    #[default]
    None,
    TransmittedReflected,
    /// Split the box at `cuts`; one channel per piece.
    Partition,
    PositionCell,
    /// Gaussian packet given by x0, sigma, k0 at t_f.
    Custom,
    /// σ_x eigenstates, for the two-level system.
    SpinX,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostselectionConfig {
    #[serde(default)]
    pub mode: PostselectionMode,
    #[serde(default)]
    pub cuts: Vec<f64>,
    pub cell: Option<usize>,
    pub x0: Option<f64>,
    pub sigma: Option<f64>,
    pub k0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    #[default]
    Implicit,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    #[serde(default)]
    pub method: MethodConfig,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "yes")]
    pub sojourn: bool,
    #[serde(default)]
    pub clocks: bool,
    #[serde(default)]
    pub meter: bool,
    #[serde(default)]
    pub moments: bool,
}

fn yes() -> bool {
    true
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { sojourn: true, clocks: false, meter: false, moments: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SojournConfig {
    /// Quadrature nodes for the sojourn matrix; every step when absent.
    pub slices: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClocksConfig {
    #[serde(default = "all_clocks")]
    pub methods: Vec<ClockMethod>,
    pub strengths: Option<Vec<f64>>,
}

fn all_clocks() -> Vec<ClockMethod> {
    vec![ClockMethod::RealPotential, ClockMethod::ImaginaryPotential, ClockMethod::Larmor]
}

impl Default for ClocksConfig {
    fn default() -> Self {
        Self { methods: all_clocks(), strengths: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterConfig {
    #[serde(default = "one")]
    pub width: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    /// First-order pointer shift at the weakest coupling, in pointer widths.
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "one")]
    pub strong_coupling: f64,
    #[serde(default = "default_strong_width")]
    pub strong_width: f64,
    #[serde(default = "default_crossover")]
    pub crossover: Vec<f64>,
}

fn one() -> f64 {
    1.0
}
fn default_points() -> usize {
    256
}
fn default_shift() -> f64 {
    1e-4
}
fn default_strong_width() -> f64 {
    0.05
}
fn default_crossover() -> Vec<f64> {
    vec![0.1, 0.3, 1.0, 3.0, 10.0, 100.0]
}

impl Default for MeterConfig {
    fn default() -> Self {
        Self {
            width: 1.0,
            points: default_points(),
            shift: default_shift(),
            strong_coupling: 1.0,
            strong_width: default_strong_width(),
            crossover: default_crossover(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectConfig {
    /// Channels whose negative conditional times are expected.
    #[serde(default)]
    pub negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub system: SystemKind,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub potential: PotentialConfig,
    pub packet: PacketConfig,
    pub window: WindowConfig,
    pub region: Option<RegionConfig>,
    #[serde(default)]
    pub postselection: PostselectionConfig,
    #[serde(default)]
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub pipelines: PipelineConfig,
    #[serde(default)]
    pub sojourn: SojournConfig,
    #[serde(default)]
    pub clocks: ClocksConfig,
    #[serde(default)]
    pub meter: MeterConfig,
    #[serde(default)]
    pub expect: ExpectConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// SHA-256 of the canonical JSON form; insensitive to key order.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Names of the shipped scenarios.
pub fn catalog_names() -> Vec<&'static str> {
    CATALOG.iter().map(|(n, _)| *n).collect()
}

pub fn catalog_config(name: &str) -> Result<ScenarioConfig> {
    CATALOG
        .iter()
        .find(|(n, _)| *n == name || n.split('_').next() == Some(name))
        .map(|(_, text)| ScenarioConfig::from_toml(text))
        .unwrap_or_else(|| Err(Error::Config(format!("no catalog scenario named {name:?}"))))
}

pub fn catalog() -> Result<Vec<ScenarioConfig>> {
    CATALOG.iter().map(|(_, t)| ScenarioConfig::from_toml(t)).collect()
}

/// A built scenario: Hamiltonian, propagator and initial state.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub window: Window,
    pub propagator: Propagator,
    /// State at `window.t_i`.
    pub psi0: QuantumState,
    pub region: Option<Region>,
    /// Overall extent of the barrier structure.
    pub barrier: Option<Region>,
}

fn need(v: Option<f64>, key: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("missing key {key}")))
}

impl Scenario {
    pub fn build(config: &ScenarioConfig) -> Result<Self> {
        let window = Window::new(config.window.t_i, config.window.t_f).map_err(|e| e.context("window"))?;
        match config.system {
            SystemKind::Position => Self::build_position(config, window),
            SystemKind::TwoLevel => Self::build_two_level(config, window),
        }
    }

    fn build_two_level(config: &ScenarioConfig, window: Window) -> Result<Self> {
        let p = &config.pipelines;
        if p.sojourn || p.clocks || p.moments {
            return Err(Error::Config("two-level scenarios support only the meter pipeline".into()));
        }
        if config.packet.kind != PacketKind::Spin {
            return Err(Error::Config("two-level scenarios need packet.kind = \"spin\"".into()));
        }
        let amps = CVector::from_vec(vec![
            C64::new(need(config.packet.up, "packet.up")?, 0.0),
            C64::new(need(config.packet.down, "packet.down")?, 0.0),
        ]);
        let psi0 = QuantumState::new(vec![FactorSpace::Spin2], amps, window.t_i)?.normalized()?;
        let h = Hamiltonian::two_level();
        let dt = config.propagation.dt.unwrap_or(window.length() / 100.0);
        step_count(window.t_i, window.t_f, dt)?;
        let propagator = Propagator::new(PropagationMethod::DenseExponential, dt, h)?;
        Ok(Self { config: config.clone(), window, propagator, psi0, region: None, barrier: None })
    }

    fn build_position(config: &ScenarioConfig, window: Window) -> Result<Self> {
        let gc = config.grid.ok_or_else(|| Error::Config("missing grid.n, grid.x_min, grid.x_max".into()))?;
        let grid = Grid::new(gc.n, gc.x_min, gc.x_max)?;
        let pc = &config.potential;
        let mut h = Hamiltonian::free(grid);
        let mut barrier = None;
        match pc.kind {
            PotentialKind::Free => {}
            PotentialKind::Barrier | PotentialKind::Well | PotentialKind::DoubleBarrier => {
                let r = Region::new(need(pc.lo, "potential.lo")?, need(pc.hi, "potential.hi")?)?;
                if pc.kind == PotentialKind::Well {
                    h = h.with_added_potential(&r, -pc.v0)?;
                } else {
                    h = h.with_added_potential(&r, pc.v0)?;
                    barrier = Some(r);
                }
                if pc.kind == PotentialKind::DoubleBarrier {
                    let gap = need(pc.separation, "potential.separation")?;
                    let second = Region::new(r.x_hi + gap, r.x_hi + gap + (r.x_hi - r.x_lo))?;
                    h = h.with_added_potential(&second, pc.v0)?;
                    barrier = Some(Region::new(r.x_lo, second.x_hi)?);
                }
            }
        }
        let region = match config.region {
            Some(rc) => {
                let r = Region::new(rc.lo, rc.hi)?;
                r.indices(&grid)?;
                Some(r)
            }
            None => None,
        };
        let dt = match config.propagation.dt {
            Some(dt) => dt,
            None => {
                let dt0 = h.default_dt();
                window.length() / (window.length() / dt0).ceil()
            }
        };
        step_count(window.t_i, window.t_f, dt).map_err(|e| e.context("propagation.dt"))?;
        let method = match config.propagation.method {
            MethodConfig::Implicit => PropagationMethod::ImplicitStep,
            MethodConfig::Dense => PropagationMethod::DenseExponential,
        };
        let psi0 = match config.packet.kind {
            PacketKind::Gaussian => gaussian_packet(
                &grid,
                need(config.packet.x0, "packet.x0")?,
                need(config.packet.sigma, "packet.sigma")?,
                config.packet.k0.unwrap_or(0.0),
            )?,
            PacketKind::Eigenstate => {
                let (_, states) = eigendecompose(&assemble(&h, window.t_i)?)?;
                states
                    .into_iter()
                    .nth(config.packet.level)
                    .ok_or_else(|| Error::Config(format!("no level {}", config.packet.level)))?
            }
            PacketKind::Spin => return Err(Error::Config("spin packets need system = \"two_level\"".into())),
        }
        .at_time(window.t_i);
        let propagator = Propagator::new(method, dt, h)?;
        Ok(Self { config: config.clone(), window, propagator, psi0, region, barrier })
    }

    pub fn grid(&self) -> Option<Grid> {
        self.propagator.hamiltonian().grid()
    }

    pub fn final_state(&self) -> Result<QuantumState> {
        self.propagator.evolve(&self.psi0, self.window.t_i, self.window.t_f)
    }
}

/// Outcome of configuration checks that do not stop a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub warnings: Vec<String>,
}

/// Builds the scenario and checks packet clearance and the wall budget.
pub fn validate(config: &ScenarioConfig) -> Result<(Scenario, Validation)> {
    let sc = Scenario::build(config)?;
    let mut v = Validation::default();
    let Some(grid) = sc.grid() else { return Ok((sc, v)) };
    if config.pipelines.sojourn || config.pipelines.clocks || config.pipelines.meter || config.pipelines.moments {
        if sc.region.is_none() {
            return Err(Error::Config("pipelines need region.lo and region.hi".into()));
        }
    }
    if config.postselection.mode == PostselectionMode::TransmittedReflected && sc.barrier.is_none() {
        return Err(Error::Config("transmitted/reflected postselection needs a barrier".into()));
    }
    if config.packet.kind == PacketKind::Gaussian {
        let x0 = need(config.packet.x0, "packet.x0")?;
        let sigma = need(config.packet.sigma, "packet.sigma")?;
        let inside = |e: f64| e > grid.x_min() + grid.dx() && e < grid.x_max() - grid.dx();
        let mut features: Vec<f64> = Vec::new();
        if let Some(b) = sc.barrier {
            features.extend([b.x_lo, b.x_hi]);
        }
        if let Some(r) = sc.region {
            features.extend([r.x_lo, r.x_hi]);
        }
        for e in features.into_iter().filter(|e| inside(*e)) {
            if (x0 - e).abs() < PACKET_CLEARANCE * sigma {
                return Err(Error::Config(format!(
                    "packet at {x0} is within {PACKET_CLEARANCE} widths of the feature at {e}"
                )));
            }
        }
        if let Some(r) = sc.region {
            let k0 = config.packet.k0.unwrap_or(0.0);
            let reach = x0 + 2.0 * k0 * sc.window.length();
            let spread = 3.0 * sigma;
            if (k0 >= 0.0 && reach + spread < r.x_lo) || (k0 <= 0.0 && reach - spread > r.x_hi) {
                v.warnings.push("window too short for the packet to reach the region; expect zero dwell".into());
            }
        }
    }
    let edge = boundary_probability(&sc)?;
    if edge > BOUNDARY_BUDGET {
        return Err(Error::Config(format!(
            "probability {edge:.2e} reaches the outer 5% of the box; enlarge the box or shorten the window"
        )));
    }
    Ok((sc, v))
}

/// Largest probability in the outer 5% of the box over the window, under H₀.
pub fn boundary_probability(sc: &Scenario) -> Result<f64> {
    let Some(grid) = sc.grid() else { return Ok(0.0) };
    let margin = 0.05 * grid.length();
    let dx = grid.dx();
    let edge: Vec<usize> = (0..grid.n_points())
        .filter(|&j| {
            let x = grid.point(j);
            x < grid.x_min() + margin || x > grid.x_max() - margin
        })
        .collect();
    let block = nalgebra::DMatrix::from_column_slice(grid.n_points(), 1, sc.psi0.amplitudes().as_slice());
    let mut worst: f64 = 0.0;
    sc.propagator.free().evolve_block(block, sc.window.t_i, sc.window.t_f, |_, b| {
        worst = worst.max(edge.iter().map(|&j| b[(j, 0)].norm_sqr() * dx).sum::<f64>());
        Ok(())
    })?;
    Ok(worst)
}

/// Half-line split of a final state around a barrier.
#[derive(Debug, Clone)]
pub struct TransmittedReflected {
    pub chi_t: QuantumState,
    pub chi_r: QuantumState,
    /// Normalized part left inside the barrier; completes the pair for sum
    /// rules.
    pub chi_b: Option<QuantumState>,
    pub p_t: C64,
    pub p_r: C64,
    pub p_b: C64,
}

fn masked(psi: &QuantumState, keep: impl Fn(f64) -> bool) -> Result<Option<(QuantumState, C64)>> {
    let grid = psi.position_grid().ok_or_else(|| Error::Structural("postselection needs a position space".into()))?;
    let amps = CVector::from_fn(psi.dimension(), |j, _| {
        if keep(grid.point(j)) {
            psi.amplitudes()[j]
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let part = psi.with_amplitudes(amps)?;
    let n = part.norm();
    if n * n < CHANNEL_FLOOR * psi.norm_sqr() {
        return Ok(None);
    }
    let chi = part.normalized()?;
    let p = chi.inner(psi)?;
    Ok(Some((chi, p)))
}

pub fn postselect_transmitted_reflected(psi_final: &QuantumState, barrier: &Region) -> Result<TransmittedReflected> {
    let norm = psi_final.norm_sqr();
    let inside = masked(psi_final, |x| barrier.contains(x))?;
    let residual = inside.as_ref().map_or(0.0, |(_, p)| p.norm_sqr()) / norm;
    if residual > BARRIER_RESIDUAL_BUDGET {
        return Err(Error::Timing(format!(
            "probability {residual:.2e} still inside the barrier at t_f; lengthen the window"
        )));
    }
    let zero = || -> Result<(QuantumState, C64)> {
        Ok((psi_final.with_amplitudes(CVector::zeros(psi_final.dimension()))?, C64::new(0.0, 0.0)))
    };
    let (chi_t, p_t) = match masked(psi_final, |x| x >= barrier.x_hi)? {
        Some(v) => v,
        None => zero()?,
    };
    let (chi_r, p_r) = match masked(psi_final, |x| x < barrier.x_lo)? {
        Some(v) => v,
        None => zero()?,
    };
    let (chi_b, p_b) = match inside {
        Some((c, p)) => (Some(c), p),
        None => (None, C64::new(0.0, 0.0)),
    };
    Ok(TransmittedReflected { chi_t, chi_r, chi_b, p_t, p_r, p_b })
}

/// One postselection outcome.
#[derive(Debug, Clone)]
pub struct Channel {
    pub label: String,
    /// Postselected state at t_f; ψ(t_f) normalized for "none".
    pub chi: QuantumState,
    /// |⟨χ|ψ(t_f)⟩|² for a normalized ψ.
    pub weight: f64,
    pub conditional: bool,
    pub reported: bool,
    /// Indicator of the position set the outcome corresponds to, when the
    /// outcome is a region of the box.
    pub support: Option<Vec<f64>>,
}

/// Channels implied by the configured postselection. The first one is
/// always the unconditioned "none". `complete` tells whether the
/// conditional channels exhaust ψ(t_f).
pub fn channels(sc: &Scenario, psi_final: &QuantumState) -> Result<(Vec<Channel>, bool)> {
    let psi_n = psi_final.normalized()?;
    let mut out = vec![Channel {
        label: "none".into(),
        chi: psi_n.clone(),
        weight: 1.0,
        conditional: false,
        reported: true,
        support: None,
    }];
    let ps = &sc.config.postselection;
    let region_channel = |label: &str, lo: f64, hi: f64, reported: bool| -> Result<Option<Channel>> {
        let grid = psi_n.position_grid().expect("position scenario");
        let inside = |x: f64| x >= lo && x < hi;
        Ok(masked(&psi_n, inside)?.map(|(chi, p)| Channel {
            label: label.into(),
            chi,
            weight: p.norm_sqr(),
            conditional: true,
            reported,
            support: Some(grid.points().iter().map(|x| if inside(*x) { 1.0 } else { 0.0 }).collect()),
        }))
    };
    let complete = match ps.mode {
        PostselectionMode::None => false,
        PostselectionMode::TransmittedReflected => {
            let b = sc.barrier.ok_or_else(|| Error::Config("transmitted/reflected needs a barrier".into()))?;
            postselect_transmitted_reflected(&psi_n, &b)?;
            let grid = sc.grid().expect("position scenario");
            let (lo, hi) = (grid.x_min() - 1.0, grid.x_max() + 1.0);
            out.extend(region_channel("transmitted", b.x_hi, hi, true)?);
            out.extend(region_channel("reflected", lo, b.x_lo, true)?);
            out.extend(region_channel("barrier", b.x_lo, b.x_hi, false)?);
            true
        }
        PostselectionMode::Partition => {
            let grid = sc.grid().ok_or_else(|| Error::Config("partition needs a grid".into()))?;
            let mut edges = vec![grid.x_min() - 1.0];
            edges.extend(ps.cuts.iter().copied());
            edges.push(grid.x_max() + 1.0);
            if edges.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("postselection.cuts must increase inside the box".into()));
            }
            for (k, w) in edges.windows(2).enumerate() {
                out.extend(region_channel(&format!("part{k}"), w[0], w[1], true)?);
            }
            true
        }
        PostselectionMode::PositionCell => {
            let grid = sc.grid().ok_or_else(|| Error::Config("cell postselection needs a grid".into()))?;
            let r = ps.cell.ok_or_else(|| Error::Config("missing postselection.cell".into()))?;
            if r >= grid.n_points() {
                return Err(Error::Config(format!("cell {r} outside the grid")));
            }
            let chi = cell_state(&grid, r, sc.window.t_f);
            let weight = chi.inner(&psi_n)?.norm_sqr();
            out.push(Channel { label: format!("cell{r}"), chi, weight, conditional: true, reported: true, support: None });
            false
        }
        PostselectionMode::Custom => {
            let grid = sc.grid().ok_or_else(|| Error::Config("custom postselection needs a grid".into()))?;
            let chi = gaussian_packet(
                &grid,
                need(ps.x0, "postselection.x0")?,
                need(ps.sigma, "postselection.sigma")?,
                ps.k0.unwrap_or(0.0),
            )?
            .at_time(sc.window.t_f);
            let weight = chi.inner(&psi_n)?.norm_sqr();
            out.push(Channel { label: "custom".into(), chi, weight, conditional: true, reported: true, support: None });
            false
        }
        PostselectionMode::SpinX => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            for (label, sign) in [("+x", 1.0), ("-x", -1.0)] {
                let chi = QuantumState::new(
                    vec![FactorSpace::Spin2],
                    CVector::from_vec(vec![C64::new(s, 0.0), C64::new(sign * s, 0.0)]),
                    sc.window.t_f,
                )?;
                let weight = chi.inner(&psi_n)?.norm_sqr();
                if weight > CHANNEL_FLOOR {
                    out.push(Channel { label: label.into(), chi, weight, conditional: true, reported: true, support: None });
                }
            }
            true
        }
    };
    for c in out.iter_mut().skip(1) {
        if c.weight < CHANNEL_FLOOR {
            c.reported = false;
        }
    }
    Ok((out, complete))
}

/// One reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scenario: String,
    pub method: String,
    pub postselection: String,
    pub l: u32,
    pub value: f64,
    /// Imaginary part for complex weak values; zero otherwise.
    pub imag: f64,
    pub tolerance: f64,
    pub residual: f64,
    pub flags: Vec<String>,
}

/// A comparison between two routes to the same quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub postselection: String,
    pub l: u32,
    pub discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: String,
    pub propagation: String,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub scenario: String,
    pub provenance: Provenance,
    /// |p_T|² when the scenario splits into transmitted and reflected parts.
    pub reference_transmission: Option<f64>,
    pub records: Vec<ResultRecord>,
    pub checks: Vec<CheckRecord>,
    pub sweeps: Vec<SweepRecord>,
    pub warnings: Vec<String>,
}

impl ResultBundle {
    pub fn empty(scenario: &str, provenance: Provenance) -> Self {
        Self {
            scenario: scenario.into(),
            provenance,
            reference_transmission: None,
            records: Vec::new(),
            checks: Vec::new(),
            sweeps: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn record(&self, method: &str, postselection: &str, l: u32) -> Option<&ResultRecord> {
        self.records.iter().find(|r| r.method == method && r.postselection == postselection && r.l == l)
    }

    pub fn checks_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a CheckRecord> + 'a {
        self.checks.iter().filter(move |c| c.name == name)
    }

    pub fn failed_checks(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(ser)?;
        for r in &self.records {
            w.write_record([
                r.scenario.clone(),
                r.method.clone(),
                r.postselection.clone(),
                r.l.to_string(),
                r.value.to_string(),
                r.tolerance.to_string(),
                r.residual.to_string(),
                r.flags.join(";"),
            ])
            .map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

pub const CSV_COLUMNS: [&str; 8] = ["scenario", "method", "postselection", "l", "value", "tolerance", "residual", "flags"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        })
    }
}

/// Writes `<out_dir>/<scenario>.<format>` and returns its path.
pub fn emit(bundle: &ResultBundle, format: OutputFormat, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{}.{format}", bundle.scenario));
    let text = match format {
        OutputFormat::Csv => bundle.to_csv()?,
        OutputFormat::Json => bundle.to_json()? + "\n",
    };
    std::fs::write(&path, text)?;
    Ok(path)
}

struct Collector {
    scenario: String,
    records: Vec<ResultRecord>,
    checks: Vec<CheckRecord>,
    sweeps: Vec<SweepRecord>,
}

impl Collector {
    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, method: &str, post: &str, l: u32, value: C64, tolerance: f64, residual: f64, flags: Vec<String>) {
        self.records.push(ResultRecord {
            scenario: self.scenario.clone(),
            method: method.into(),
            postselection: post.into(),
            l,
            value: value.re,
            imag: value.im,
            tolerance,
            residual,
            flags,
        });
    }

    fn check(&mut self, name: &str, post: &str, l: u32, discrepancy: f64, tolerance: f64) {
        self.checks.push(CheckRecord {
            name: name.into(),
            postselection: post.into(),
            l,
            discrepancy,
            tolerance,
            passed: discrepancy.is_finite() && discrepancy <= tolerance,
        });
    }
}

fn sum_rule_tol(reference: f64) -> f64 {
    SUM_RULE_TOL * reference.abs().max(1.0)
}

/// Flags for a time outside [0, T] by more than `slack`.
fn time_flags(value: C64, length: f64, slack: f64, label: &str, expect: &ExpectConfig) -> Vec<String> {
    let mut flags = Vec::new();
    if value.re < -slack || value.re > length + slack {
        flags.push("anomalous".to_string());
    }
    if value.re < -slack {
        flags.push("negative".to_string());
    }
    if !flags.is_empty() && expect.negative.iter().any(|c| c == label) {
        flags.push("expected".to_string());
    }
    flags
}

/// Runs every configured pipeline and collects the bundle.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ResultBundle> {
    let (sc, validation) = validate(config)?;
    let provenance = Provenance {
        config_sha256: config.hash(),
        seed: config.seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        propagation: format!("{:?}", sc.propagator.method()),
        dt: sc.propagator.dt(),
    };
    let mut col = Collector { scenario: config.name.clone(), records: Vec::new(), checks: Vec::new(), sweeps: Vec::new() };
    let reference_transmission = match config.system {
        SystemKind::Position => position_pipelines(&sc, &mut col).map_err(|e| e.context(&config.name))?,
        SystemKind::TwoLevel => {
            two_level_pipeline(&sc, &mut col).map_err(|e| e.context(&config.name))?;
            None
        }
    };
    Ok(ResultBundle {
        scenario: config.name.clone(),
        provenance,
        reference_transmission,
        records: col.records,
        checks: col.checks,
        sweeps: col.sweeps,
        warnings: validation.warnings,
    })
}

/// Sojourn-module values per channel, reused by the other pipelines.
struct SojournValues {
    /// Conditional times (unconditioned dwell time for "none").
    times: Vec<C64>,
    operator: SojournOperator,
    /// ⟨t^l⟩⁽ⁿ⁾ for l = 1, 2.
    moments: Vec<[C64; 2]>,
}

fn position_pipelines(sc: &Scenario, col: &mut Collector) -> Result<Option<f64>> {
    let cfg = &sc.config;
    let region = sc.region.ok_or_else(|| Error::Config("pipelines need a region".into()))?;
    let w = sc.window;
    let psi_f = sc.final_state()?;
    let (chans, complete) = channels(sc, &psi_f)?;
    let reference_transmission = chans.iter().find(|c| c.label == "transmitted").map(|c| c.weight);
    let engine = SojournEngine::new(&sc.propagator, None)?;

    let mut times = Vec::new();
    for c in &chans {
        let t = if c.conditional {
            engine.conditional_time(&sc.psi0, &region, w, &c.chi)?.value
        } else {
            C64::new(engine.dwell_time(&sc.psi0, &region, w)?, 0.0)
        };
        times.push(t);
    }
    let operator = engine.sojourn_matrix(&region, w, cfg.sojourn.slices)?;
    let mut moments = Vec::new();
    for c in &chans {
        moments.push([
            engine.moment_complex(&sc.psi0, &c.chi, &operator, 1)?,
            engine.moment_complex(&sc.psi0, &c.chi, &operator, 2)?,
        ]);
    }
    let sv = SojournValues { times, operator, moments };

    if cfg.pipelines.sojourn {
        sojourn_pipeline(sc, &engine, &chans, complete, &sv, col)?;
    }
    if cfg.pipelines.clocks {
        clock_pipeline(sc, &chans, complete, &sv, col)?;
    }
    if cfg.pipelines.meter {
        meter_pipeline(sc, &region, &chans, &sv, col)?;
    }
    if cfg.pipelines.moments {
        moment_pipeline(sc, &engine, &chans, complete, &sv, col)?;
    }
    Ok(reference_transmission)
}

fn sojourn_pipeline(
    sc: &Scenario,
    engine: &SojournEngine,
    chans: &[Channel],
    complete: bool,
    sv: &SojournValues,
    col: &mut Collector,
) -> Result<()> {
    let length = sc.window.length();
    for (c, t) in chans.iter().zip(&sv.times) {
        if c.reported {
            let flags = time_flags(*t, length, SUM_RULE_TOL * length, &c.label, &sc.config.expect);
            col.record("sojourn", &c.label, 1, *t, SUM_RULE_TOL, 0.0, flags);
        }
    }
    for (c, m) in chans.iter().zip(&sv.moments) {
        if c.reported {
            col.record("sojourn_operator", &c.label, 2, m[1], SUM_RULE_TOL, 0.0, Vec::new());
        }
    }
    let integral = engine.second_moment_position_integral(&sc.psi0, &sv.operator)?;
    col.record("position_integral", "none", 2, C64::new(integral, 0.0), MOMENT_REL_TOL * integral.abs(), 0.0, Vec::new());
    col.check("position_integral_vs_operator", "none", 2, (integral - sv.moments[0][1].re).abs(), MOMENT_REL_TOL * integral.abs());

    // two forms of the cell-resolved second moment, at the densest cell
    let psi_f = engine.state_at(&sc.psi0, sc.window.t_f)?;
    let r = psi_f.amplitudes().iter().enumerate().max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr())).map(|(j, _)| j).unwrap_or(0);
    let cell = engine.second_moment_position_postselected(&sc.psi0, r, &sv.operator)?;
    let rel = (cell.weak - cell.symmetrized).abs() / cell.weak.abs().max(cell.symmetrized.abs()).max(f64::MIN_POSITIVE);
    let flags = if rel > MOMENT_REL_TOL { vec!["forms_differ".to_string()] } else { Vec::new() };
    let label = format!("cell{r}");
    col.record("cell_weak", &label, 2, C64::new(cell.weak, 0.0), 0.0, 0.0, flags.clone());
    col.record("cell_symmetrized", &label, 2, C64::new(cell.symmetrized, 0.0), 0.0, 0.0, flags);

    if complete {
        let parts: Vec<(&Channel, usize)> = chans.iter().enumerate().filter(|(_, c)| c.conditional).map(|(k, c)| (c, k)).collect();
        // A_w = Σ|p_n|² A_w⁽ⁿ⁾ for A = P_Ω averaged over the window
        let aw = engine.weak_value(&sv.operator.integrated, &sc.psi0)?.value;
        let mut sum = C64::new(0.0, 0.0);
        for (c, _) in &parts {
            sum += c.weight * engine.conditional_weak_value(&sv.operator.integrated, &sc.psi0, &c.chi)?.value;
        }
        col.check("weak_value_decomposition", "all", 1, (sum - aw).norm(), sum_rule_tol(aw.norm()));
        let tau: C64 = parts.iter().map(|(c, k)| c.weight * sv.times[*k]).sum();
        col.check("dwell_sum_rule", "all", 1, (tau - sv.times[0]).norm(), sum_rule_tol(sv.times[0].re));
        for l in 0..2 {
            let m: C64 = parts.iter().map(|(c, k)| c.weight * sv.moments[*k][l]).sum();
            let reference = sv.moments[0][l];
            col.check("moment_sum_rule", "all", l as u32 + 1, (m - reference).norm(), sum_rule_tol(reference.re));
        }
    }
    Ok(())
}

fn clock_pipeline(sc: &Scenario, chans: &[Channel], complete: bool, sv: &SojournValues, col: &mut Collector) -> Result<()> {
    let region = sc.region.expect("checked by caller");
    let length = sc.window.length();
    for &method in &sc.config.clocks.methods {
        let mut readings = Vec::new();
        for (c, t) in chans.iter().zip(&sv.times) {
            if !c.reported {
                continue;
            }
            let mut cc = ClockConfig::new(method, region, sc.window, &c.label);
            if let Some(s) = &sc.config.clocks.strengths {
                cc = cc.with_strengths(s.clone());
            }
            let chi = c.conditional.then_some(&c.chi);
            let sweep = run_clock(&sc.propagator, &cc, &sc.psi0, chi)?;
            let value = sweep.extrapolated;
            let tol = (CLOCK_REL_TOL * value.re.abs()).max(sweep.residual());
            let mut flags = sweep.flags.clone();
            flags.extend(time_flags(value, length, tol, &c.label, &sc.config.expect));
            col.record(method.label(), &c.label, 1, value, tol, sweep.residual(), flags);
            col.check("clock_vs_sojourn", &format!("{}:{}", method.label(), c.label), 1, (value.re - t.re).abs(), tol);
            readings.push((c, value.re, tol));
            col.sweeps.push(sweep);
        }
        if complete {
            // channels without a clock run enter with their sojourn value
            let (none_value, none_tol) = (readings[0].1, readings[0].2);
            let mut sum = 0.0;
            let mut tol = none_tol;
            for (c, t) in chans.iter().zip(&sv.times).filter(|(c, _)| c.conditional) {
                match readings.iter().find(|(r, _, _)| r.label == c.label) {
                    Some((_, v, e)) => {
                        sum += c.weight * v;
                        tol += c.weight * e;
                    }
                    None => sum += c.weight * t.re,
                }
            }
            col.check("clock_sum_rule", method.label(), 1, (sum - none_value).abs(), tol);
        }
    }
    Ok(())
}

fn geometric_ladder(eps: f64) -> Vec<f64> {
    vec![8.0 * eps, 4.0 * eps, 2.0 * eps, eps]
}

fn region_distribution(run: &MeterRun, support: &[f64], label: &str) -> Result<PointerDistribution> {
    let nq = run.spec.grid.n_points();
    let ns = run.free_final.dimension();
    let mu = run.free_final.measure();
    let amp = run.final_state.amplitudes();
    let raw: Vec<f64> = (0..nq)
        .map(|j| (0..ns).filter(|s| support[*s] > 0.0).map(|s| amp[s * nq + j].norm_sqr()).sum::<f64>() * mu)
        .collect();
    let dq = run.spec.grid.dx();
    let weight: f64 = raw.iter().sum::<f64>() * dq;
    let q = run.spec.grid.points();
    let mean = if weight > 0.0 { q.iter().zip(&raw).map(|(x, f)| x * f).sum::<f64>() * dq / weight } else { 0.0 };
    let density: Vec<f64> = raw.iter().map(|f| if weight > 0.0 { f / weight } else { 0.0 }).collect();
    let variance = q.iter().zip(&density).map(|(x, f)| (x - mean).powi(2) * f).sum::<f64>() * dq;
    Ok(PointerDistribution { q, density, weight, mean, variance, postselection: Some(label.to_string()) })
}

/// Weak P_Ω meter over the window: linearity, derivative identity and the
/// sum rule of conditional means.
fn meter_pipeline(sc: &Scenario, region: &Region, chans: &[Channel], sv: &SojournValues, col: &mut Collector) -> Result<()> {
    let mc = &sc.config.meter;
    let length = sc.window.length();
    let grid = sc.grid().expect("position scenario");
    let a = projector(region, &grid)?;
    let spec = PointerSpec::new(mc.points, 20.0 * mc.width, mc.width)?;
    let profile = CouplingProfile::rectangular(sc.window);
    let reported: Vec<(usize, &Channel)> = chans.iter().enumerate().filter(|(_, c)| c.reported).collect();
    // A_w⁽ⁿ⁾ = τ⁽ⁿ⁾/T for this coupling
    let scale = reported.iter().map(|(k, _)| sv.times[*k].re.abs() / length).fold(1e-3, f64::max);
    let ladder = geometric_ladder(mc.shift * mc.width / scale);
    let runs = ladder
        .iter()
        .map(|&g| run_meter(&sc.propagator, &spec, &sc.psi0, &a, g, profile, sc.window))
        .collect::<Result<Vec<_>>>()?;
    for (k, c) in &reported {
        let shifts = runs
            .iter()
            .map(|r| Ok(pointer_distribution(r, Some((&c.chi, &c.label)))?.mean))
            .collect::<Result<Vec<f64>>>()?;
        let (intercept, slope) = linear_fit(&ladder, &shifts)?;
        let aw = sv.times[*k] / length;
        let tol = METER_REL_TOL * aw.re.abs() * length;
        col.record("meter", &c.label, 1, C64::new(slope * length, 0.0), tol, intercept.abs(), Vec::new());
        col.check("meter_linearity", &c.label, 1, (slope - aw.re).abs() * length, tol);
        col.check("meter_intercept", &c.label, 1, intercept.abs(), INTERCEPT_TOL);
        let report = derivative_identity_check(&runs, &c.chi, &[aw])?;
        col.check("derivative_identity", &c.label, 1, report.discrepancy[0], DERIVATIVE_TOL.max(report.fits[0].residual));
    }
    // Σ_n W_n⟨q⟩⁽ⁿ⁾ = ⟨q⟩ over a partition of the box
    let partition: Vec<Vec<f64>> = {
        let parts: Vec<Vec<f64>> = chans.iter().filter_map(|c| c.support.clone()).collect();
        let covered: Vec<f64> = (0..grid.n_points()).map(|j| parts.iter().map(|p| p[j]).sum()).collect();
        if !parts.is_empty() && covered.iter().all(|v| *v == 1.0) {
            parts
        } else {
            let inside = region.indicator(&grid)?;
            let outside = inside.iter().map(|v| 1.0 - v).collect();
            vec![inside, outside]
        }
    };
    for (g, run) in ladder.iter().zip(&runs) {
        let total = pointer_distribution(run, None)?;
        let mut sum = 0.0;
        for p in &partition {
            let d = region_distribution(run, p, "part")?;
            sum += d.weight * d.mean;
        }
        col.check("pointer_mean_sum_rule", &format!("G={g:e}"), 1, (sum - total.mean).abs(), sum_rule_tol(total.mean));
        col.check("composite_norm", &format!("G={g:e}"), 0, (run.final_state.norm_sqr() - 1.0).abs(), SUM_RULE_TOL);
    }
    Ok(())
}

fn moment_pipeline(
    sc: &Scenario,
    engine: &SojournEngine,
    chans: &[Channel],
    complete: bool,
    sv: &SojournValues,
    col: &mut Collector,
) -> Result<()> {
    let mc = &sc.config.meter;
    let spec = PointerSpec::new(mc.points, 20.0 * mc.width, mc.width)?;
    let spectrum = SojournSpectrum::new(&sv.operator);
    let mut by_order: BTreeMap<usize, (Vec<f64>, Vec<MeterRun>)> = BTreeMap::new();
    for l in 1..=2usize {
        let scale = chans
            .iter()
            .zip(&sv.moments)
            .filter(|(c, _)| c.reported)
            .map(|(_, m)| m[l - 1].norm())
            .fold(1e-3, f64::max);
        let ladder = geometric_ladder(mc.shift * mc.width / scale);
        let runs = ladder
            .iter()
            .map(|&g| run_moment_meter(&sc.propagator, &spec, &sc.psi0, &spectrum, l, g))
            .collect::<Result<Vec<_>>>()?;
        let mut readings = Vec::new();
        for (k, c) in chans.iter().enumerate() {
            let per_g = ladder
                .iter()
                .zip(&runs)
                .map(|(g, r)| Ok((*g, pointer_distribution(r, Some((&c.chi, &c.label)))?.mean / g)))
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let fit = extrapolate_to_zero(&per_g, 1)?;
            let direct = sv.moments[k][l - 1].re;
            let tol = (MOMENT_REL_TOL * direct.abs()).max(fit.residual);
            if c.reported {
                col.record("moment_meter", &c.label, l as u32, C64::new(fit.value, 0.0), tol, fit.residual, Vec::new());
                col.check("moment_meter_vs_operator", &c.label, l as u32, (fit.value - direct).abs(), tol);
            }
            readings.push((fit.value, tol));
        }
        if complete {
            let mut sum = 0.0;
            let mut tol = readings[0].1;
            for (c, (v, e)) in chans.iter().zip(&readings).filter(|(c, _)| c.conditional) {
                sum += c.weight * v;
                tol += c.weight * e;
            }
            col.check("moment_meter_sum_rule", "all", l as u32, (sum - readings[0].0).abs(), tol);
        }
        if l == 1 {
            for (k, c) in chans.iter().enumerate().filter(|(_, c)| c.reported) {
                let report = derivative_identity_check(&runs, &c.chi, &sv.moments[k])?;
                for (j, d) in report.discrepancy.iter().enumerate() {
                    col.check(
                        "moment_derivative_identity",
                        &c.label,
                        j as u32 + 1,
                        *d,
                        DERIVATIVE_TOL.max(report.fits[j].residual).max(DERIVATIVE_TOL * sv.moments[k][j].norm()),
                    );
                }
            }
        }
        by_order.insert(l, (ladder, runs));
    }
    let (lam, lam_fit) = lambda_moment(&by_order[&1].1, 2)?;
    let operator = sv.moments[0][1].re;
    col.record("lambda_derivative", "none", 2, C64::new(lam, 0.0), MOMENT_REL_TOL * lam.abs(), lam_fit.residual, Vec::new());
    let meter = col
        .records
        .iter()
        .find(|r| r.method == "moment_meter" && r.postselection == "none" && r.l == 2)
        .map(|r| r.value)
        .unwrap_or(f64::NAN);
    let integral = engine.second_moment_position_integral(&sc.psi0, &sv.operator)?;
    let routes = [("operator", operator), ("position_integral", integral), ("moment_meter", meter), ("lambda_derivative", lam)];
    for i in 0..routes.len() {
        for j in i + 1..routes.len() {
            let (a, b) = (routes[i].1, routes[j].1);
            col.check(
                &format!("second_moment_{}_vs_{}", routes[i].0, routes[j].0),
                "none",
                2,
                (a - b).abs() / a.abs().max(b.abs()),
                MOMENT_REL_TOL,
            );
        }
    }
    Ok(())
}

fn spin_state(up: f64, down: f64, time: f64) -> Result<QuantumState> {
    QuantumState::new(vec![FactorSpace::Spin2], CVector::from_vec(vec![C64::new(up, 0.0), C64::new(down, 0.0)]), time)?
        .normalized()
}

fn pointer_for(width: f64, shift: f64) -> Result<PointerSpec> {
    let extent = 24.0 * width.max(shift);
    let mut n = 256;
    while extent / (n as f64) > width / 4.0 {
        n *= 2;
    }
    PointerSpec::new(n, extent, width)
}

/// Impulsive σ_z meter on a spin: strong statistics, crossover, weak
/// linearity and survival.
fn two_level_pipeline(sc: &Scenario, col: &mut Collector) -> Result<()> {
    let mc = &sc.config.meter;
    let w = sc.window;
    let dt = sc.propagator.dt();
    let prop = &sc.propagator;
    let sz = OperatorMatrix::pauli_z();
    let profile = CouplingProfile::impulsive(w.t_f, dt)?;
    let psi_f = sc.final_state()?;
    let (chans, complete) = channels(sc, &psi_f)?;
    let c = sc.psi0.amplitudes();
    let (w_up, w_down) = (c[0].norm_sqr(), c[1].norm_sqr());

    // strong regime
    let g_strong = mc.strong_coupling;
    let strong = run_meter(prop, &pointer_for(mc.strong_width, g_strong)?, &sc.psi0, &sz, g_strong, profile, w)?;
    let d = pointer_distribution(&strong, None)?;
    let (plus, minus) = (d.side_weight(true), d.side_weight(false));
    let p0 = survival_probability(&strong)?;
    let p0_expected = w_up * w_up + w_down * w_down;
    col.record("strong_peak_weight", "up", 1, C64::new(plus, 0.0), STRONG_TOL, (plus - w_up).abs(), Vec::new());
    col.record("strong_peak_weight", "down", 1, C64::new(minus, 0.0), STRONG_TOL, (minus - w_down).abs(), Vec::new());
    col.record("strong_survival", "none", 0, C64::new(p0, 0.0), STRONG_TOL, (p0 - p0_expected).abs(), Vec::new());
    col.check("strong_peak_weight", "up", 1, (plus - w_up).abs(), STRONG_TOL);
    col.check("strong_peak_weight", "down", 1, (minus - w_down).abs(), STRONG_TOL);
    col.check("strong_survival", "none", 0, (p0 - p0_expected).abs(), STRONG_TOL);

    let up = spin_state(1.0, 0.0, w.t_i)?;
    let eig = run_meter(prop, &pointer_for(mc.strong_width, g_strong)?, &up, &sz, g_strong, profile, w)?;
    col.check("eigenstate_survival", "up", 0, (survival_probability(&eig)? - 1.0).abs(), SUM_RULE_TOL);

    // strong to weak crossover at fixed G
    let mut counts = Vec::new();
    for &ratio in &mc.crossover {
        let width = ratio * g_strong;
        let run = run_meter(prop, &pointer_for(width, g_strong)?, &sc.psi0, &sz, g_strong, profile, w)?;
        let n = pointer_distribution(&run, None)?.peak_count(0.01);
        col.record("crossover_peaks", "none", 0, C64::new(n as f64, 0.0), 0.0, 0.0, vec![format!("width_over_g={ratio}")]);
        counts.push(n);
    }
    let monotone = counts.first() == Some(&2) && counts.last() == Some(&1) && counts.windows(2).all(|p| p[1] <= p[0]);
    col.check("crossover_monotone", "none", 0, if monotone { 0.0 } else { 1.0 }, 0.0);

    // weak regime
    let spec = pointer_for(mc.width, 0.0)?;
    let weak_values: Vec<C64> = chans
        .iter()
        .map(|c| Ok(sz.matrix_element(&c.chi, &psi_f)? / c.chi.inner(&psi_f)?))
        .collect::<Result<_>>()?;
    let scale = weak_values.iter().map(|v| v.re.abs()).fold(1e-3, f64::max);
    let ladder = geometric_ladder(mc.shift * mc.width / scale);
    let runs = ladder.iter().map(|&g| run_meter(prop, &spec, &sc.psi0, &sz, g, profile, w)).collect::<Result<Vec<_>>>()?;
    for (c, aw) in chans.iter().zip(&weak_values) {
        let shifts = runs
            .iter()
            .map(|r| Ok(pointer_distribution(r, Some((&c.chi, &c.label)))?.mean))
            .collect::<Result<Vec<f64>>>()?;
        let (intercept, slope) = linear_fit(&ladder, &shifts)?;
        let tol = METER_REL_TOL * aw.re.abs();
        let flags = if aw.re.abs() > 1.0 { vec!["anomalous".to_string()] } else { Vec::new() };
        col.record("meter", &c.label, 1, C64::new(slope, 0.0), tol, intercept.abs(), flags.clone());
        col.record("weak_value", &c.label, 1, *aw, SUM_RULE_TOL, 0.0, flags);
        col.check("meter_linearity", &c.label, 1, (slope - aw.re).abs(), tol);
        col.check("meter_intercept", &c.label, 1, intercept.abs(), INTERCEPT_TOL);
        if c.conditional {
            let report = derivative_identity_check(&runs, &c.chi, &[*aw])?;
            col.check("derivative_identity", &c.label, 1, report.discrepancy[0], DERIVATIVE_TOL.max(report.fits[0].residual));
        }
    }
    let losses = runs.iter().map(|r| Ok(1.0 - survival_probability(r)?)).collect::<Result<Vec<f64>>>()?;
    let order = loglog_order(&ladder, &losses)?;
    col.record("survival_order", "none", 0, C64::new(order, 0.0), 0.0, 0.0, Vec::new());
    col.check("survival_order", "none", 0, (SURVIVAL_MIN_ORDER - order).max(0.0), 0.0);

    if complete {
        for l in 1..=2u32 {
            let op = (1..l).fold(sz.clone(), |m, _| m.compose(&sz).expect("same space"));
            let direct = op.expectation(&psi_f)? / psi_f.norm_sqr();
            let mut sum = C64::new(0.0, 0.0);
            for c in chans.iter().filter(|c| c.conditional) {
                sum += c.weight * op.matrix_element(&c.chi, &psi_f)? / c.chi.inner(&psi_f)?;
            }
            col.check("weak_value_decomposition", "all", l, (sum - direct).norm(), sum_rule_tol(direct.norm()));
        }
        for (g, run) in ladder.iter().zip(&runs).chain(std::iter::once((&g_strong, &strong))) {
            let total = pointer_distribution(run, None)?.mean;
            let mut sum = 0.0;
            for c in chans.iter().filter(|c| c.conditional) {
                let d = pointer_distribution(run, Some((&c.chi, &c.label)))?;
                sum += d.weight * d.mean;
            }
            col.check("pointer_mean_sum_rule", &format!("G={g:e}"), 1, (sum - total).abs(), sum_rule_tol(total));
        }
    }
    Ok(())
}
