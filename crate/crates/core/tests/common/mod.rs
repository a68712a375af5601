//! Brute-force reference built straight from an eigendecomposition of H.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;

/// How a single step of length dt acts on an energy eigenvalue.
#[derive(Debug, Clone, Copy)]
pub enum StepRule {
    Exact,
    Cayley,
}

pub struct Oracle {
    pub x: Vec<f64>,
    pub dx: f64,
    pub dt: f64,
    pub rule: StepRule,
    energies: DVector<f64>,
    modes: DMatrix<f64>,
}

impl Oracle {
    /// Hard-wall box with an optional flat step `(lo, hi, v)` on lo ≤ x < hi.
    pub fn new(n: usize, x_min: f64, x_max: f64, step: Option<(f64, f64, f64)>, dt: f64, rule: StepRule) -> Self {
        let dx = (x_max - x_min) / (n - 1) as f64;
        let x: Vec<f64> = (0..n).map(|j| x_min + j as f64 * dx).collect();
        let c = 1.0 / (dx * dx);
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            h[(j, j)] = 2.0 * c;
            if let Some((lo, hi, v)) = step {
                if x[j] >= lo && x[j] < hi {
                    h[(j, j)] += v;
                }
            }
            if j + 1 < n {
                h[(j, j + 1)] = -c;
                h[(j + 1, j)] = -c;
            }
        }
        let eig = SymmetricEigen::new(h);
        Self { x, dx, dt, rule, energies: eig.eigenvalues, modes: eig.eigenvectors }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    fn phase(&self, e: f64, steps: usize) -> C64 {
        let one = match self.rule {
            StepRule::Exact => C64::from_polar(1.0, -e * self.dt),
            StepRule::Cayley => C64::new(1.0, -0.5 * e * self.dt) / C64::new(1.0, 0.5 * e * self.dt),
        };
        one.powi(steps as i32)
    }

    /// Evolution over `steps` steps.
    pub fn evolution(&self, steps: usize) -> DMatrix<C64> {
        let n = self.dim();
        let v = self.modes.map(|r| C64::new(r, 0.0));
        let d = DMatrix::from_diagonal(&DVector::from_iterator(n, self.energies.iter().map(|&e| self.phase(e, steps))));
        &v * d * v.transpose()
    }

    pub fn indicator(&self, lo: f64, hi: f64) -> DMatrix<C64> {
        let d: Vec<C64> = self.x.iter().map(|&x| C64::new(if x >= lo && x < hi { 1.0 } else { 0.0 }, 0.0)).collect();
        DMatrix::from_diagonal(&DVector::from_vec(d))
    }

    /// Σ_j w_j U(s_j)·A·U(s_j)† over `slices + 1` trapezoid nodes covering a
    /// span of `steps` steps that ends `offset` steps before the window close.
    pub fn heisenberg_sum(&self, a: &DMatrix<C64>, offset: usize, steps: usize, slices: usize) -> DMatrix<C64> {
        assert_eq!(steps % slices, 0);
        let per = steps / slices;
        let delta = (steps as f64 * self.dt) / slices as f64;
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for j in 0..=slices {
            let w = if j == 0 || j == slices { 0.5 * delta } else { delta };
            let u = self.evolution(offset + j * per);
            acc += (&u * a * u.adjoint()) * C64::new(w, 0.0);
        }
        acc
    }

    /// Normalized Gaussian amplitudes with Σ|a|²dx = 1.
    pub fn packet(&self, x0: f64, sigma: f64, k0: f64) -> DVector<C64> {
        let v = DVector::from_iterator(
            self.dim(),
            self.x.iter().map(|&x| C64::from_polar((-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp(), k0 * x)),
        );
        let norm = (v.norm_squared() * self.dx).sqrt();
        v.unscale(norm)
    }
}

pub fn dot(a: &DVector<C64>, b: &DVector<C64>) -> C64 {
    a.dotc(b)
}

pub fn max_abs_diff(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a - b).iter().fold(0.0, |m, z| m.max(z.norm()))
}

use traversal_core::dynamics::{heisenberg_conjugate, CouplingProfile, Hamiltonian, PropagationMethod, Propagator, Window};
use traversal_core::hilbert::{FactorSpace, Grid, OperatorMatrix, QuantumState, Region};
use traversal_core::meter::SojournSpectrum;
use traversal_core::sojourn::SojournEngine;

const N: usize = 32;
const X_MAX: f64 = 12.0;
const STEP: (f64, f64, f64) = (5.5, 6.5, 3.0);
const REGION: (f64, f64) = (4.5, 7.5);
const T_F: f64 = 1.2;
const DT: f64 = 0.01;
const STEPS: usize = 120;

/// Engine-versus-oracle discrepancies for every sojourn quantity on a small box.
pub fn sojourn_discrepancies(method: PropagationMethod) -> Vec<(String, f64)> {
    let rule = match method {
        PropagationMethod::DenseExponential => StepRule::Exact,
        PropagationMethod::ImplicitStep => StepRule::Cayley,
    };
    let o = Oracle::new(N, 0.0, X_MAX, Some(STEP), DT, rule);
    let grid = Grid::new(N, 0.0, X_MAX).unwrap();
    let space = vec![FactorSpace::Position(grid)];
    let h = Hamiltonian::free(grid).with_added_potential(&Region::new(STEP.0, STEP.1).unwrap(), STEP.2).unwrap();
    let prop = Propagator::new(method, DT, h).unwrap();
    let engine = SojournEngine::new(&prop, None).unwrap();
    let window = Window::new(0.0, T_F).unwrap();
    let region = Region::new(REGION.0, REGION.1).unwrap();
    let mut out = Vec::new();
    let mut push = |name: &str, d: f64| out.push((name.to_string(), d));

    let p = o.indicator(REGION.0, REGION.1);
    let t_ref = o.heisenberg_sum(&p, 0, STEPS, STEPS);
    let sojourn = engine.sojourn_matrix(&region, window, None).unwrap();
    push("sojourn operator", max_abs_diff(sojourn.matrix.entries(), &t_ref));
    let coarse = engine.sojourn_matrix(&region, window, Some(24)).unwrap();
    push("sojourn operator, 24 slices", max_abs_diff(coarse.matrix.entries(), &o.heisenberg_sum(&p, 0, STEPS, 24)));

    let a = DMatrix::from_fn(N, N, |j, k| {
        let d = o.x[j] - o.x[k];
        C64::from_polar((-d * d).exp(), 0.3 * d)
    });
    let a_op = OperatorMatrix::new(space.clone(), a.clone(), true).unwrap();
    let profile = CouplingProfile { t_i: 0.3, t_f: 0.9, ..CouplingProfile::rectangular(window) };
    let integrated = engine.integrate(&a_op, window, &profile).unwrap();
    let i_ref = o.heisenberg_sum(&a, 30, 60, 60).unscale(0.6);
    push("integrated operator, sub-window profile", max_abs_diff(integrated.matrix.entries(), &i_ref));

    let psi0 = o.packet(2.5, 1.3, 1.5);
    let psi_f = o.evolution(STEPS) * &psi0;
    let norm = dot(&psi_f, &psi_f);
    let psi0_state = QuantumState::new(space.clone(), psi0.clone(), 0.0).unwrap();
    let chi = o.packet(6.5, 1.5, 0.5);
    let chi_state = QuantumState::new(space.clone(), chi.clone(), T_F).unwrap();
    let overlap = dot(&chi, &psi_f);

    let dwell = (dot(&psi_f, &(&t_ref * &psi_f)) / norm).re;
    push("dwell time", (engine.dwell_time(&psi0_state, &region, window).unwrap() - dwell).abs());
    let cond = dot(&chi, &(&t_ref * &psi_f)) / overlap;
    push(
        "conditional time",
        (engine.conditional_time(&psi0_state, &region, window, &chi_state).unwrap().value - cond).norm(),
    );
    let mut power = psi_f.clone();
    for l in 1..=4 {
        power = &t_ref * power;
        let m = dot(&chi, &power) / overlap;
        push(
            &format!("conditional moment l={l}"),
            (engine.moment_complex(&psi0_state, &chi_state, &sojourn, l).unwrap() - m).norm(),
        );
    }

    let wv = dot(&psi_f, &(&i_ref * &psi_f)) / norm;
    push("weak value", (engine.weak_value(&integrated, &psi0_state).unwrap().value - wv).norm());
    let cwv = dot(&chi, &(&i_ref * &psi_f)) / overlap;
    push(
        "conditional weak value",
        (engine.conditional_weak_value(&integrated, &psi0_state, &chi_state).unwrap().value - cwv).norm(),
    );

    let t_psi = &t_ref * &psi_f;
    let integral = t_psi.norm_squared() / norm.re;
    push(
        "position-integral second moment",
        (engine.second_moment_position_integral(&psi0_state, &sojourn).unwrap() - integral).abs(),
    );
    let r = (0..N).max_by(|&i, &j| psi_f[i].norm_sqr().total_cmp(&psi_f[j].norm_sqr())).unwrap();
    let t2_psi = &t_ref * &t_psi;
    let cell = engine.second_moment_position_postselected(&psi0_state, r, &sojourn).unwrap();
    push("cell second moment, weak form", (cell.weak - (t2_psi[r] / psi_f[r]).re).abs());
    push("cell second moment, symmetrized form", (cell.symmetrized - (t_psi[r] / psi_f[r]).norm_sqr()).abs());

    let mut want: Vec<f64> = t_ref.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    want.sort_by(f64::total_cmp);
    let mut got = SojournSpectrum::new(&sojourn).values;
    got.sort_by(f64::total_cmp);
    push("sojourn spectrum", want.iter().zip(&got).fold(0.0, |m, (a, b)| m.max((a - b).abs())));

    let p_op = OperatorMatrix::new(space.clone(), p.clone(), true).unwrap();
    let u = o.evolution(70);
    let conj = heisenberg_conjugate(&prop, &p_op, T_F, 0.5).unwrap();
    push("heisenberg conjugate", max_abs_diff(conj.entries(), &(&u * &p * u.adjoint())));

    let back = engine.state_at(&QuantumState::new(space, psi_f, T_F).unwrap(), 0.0).unwrap();
    push("backward state", (back.amplitudes() - &psi0).iter().fold(0.0, |m, z| m.max(z.norm())));
    out
}
