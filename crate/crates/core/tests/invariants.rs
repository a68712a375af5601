use proptest::prelude::*;
use traversal_core::dynamics::{Hamiltonian, PropagationMethod, Propagator, Window};
use traversal_core::hilbert::{gaussian_packet, FactorSpace, Grid, OperatorMatrix, Region};
use traversal_core::sojourn::SojournEngine;

const N: usize = 20;
const X_MAX: f64 = 10.0;

fn propagator(potential: Vec<f64>, method: PropagationMethod) -> Propagator {
    let grid = Grid::new(N, 0.0, X_MAX).unwrap();
    Propagator::new(method, 0.01, Hamiltonian::position(grid, potential).unwrap()).unwrap()
}

fn methods() -> impl Strategy<Value = PropagationMethod> {
    prop_oneof![Just(PropagationMethod::DenseExponential), Just(PropagationMethod::ImplicitStep)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sojourn_operator_hermitian_with_spectrum_in_window(
        potential in prop::collection::vec(-2.0f64..4.0, N),
        lo in 0.0f64..5.0,
        width in 0.6f64..5.0,
        steps in 10usize..80,
        method in methods(),
    ) {
        let prop = propagator(potential, method);
        let engine = SojournEngine::new(&prop, None).unwrap();
        let t_f = steps as f64 * 0.01;
        let window = Window::new(0.0, t_f).unwrap();
        let sojourn = engine.sojourn_matrix(&Region::new(lo, lo + width).unwrap(), window, None).unwrap();
        let m = sojourn.matrix.entries();
        prop_assert!((m - m.adjoint()).iter().all(|z| z.norm() < 1e-12));
        let eig = m.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&v| v > -1e-10 && v < t_f + 1e-10));
    }

    #[test]
    fn sojourn_operator_is_additive_over_regions(
        potential in prop::collection::vec(0.0f64..3.0, N),
        cut in 1.0f64..9.0,
        method in methods(),
    ) {
        let prop = propagator(potential, method);
        let engine = SojournEngine::new(&prop, None).unwrap();
        let window = Window::new(0.0, 0.5).unwrap();
        let part = |lo, hi| engine.sojourn_matrix(&Region::new(lo, hi).unwrap(), window, None).unwrap().matrix;
        let whole = part(0.0, X_MAX + 1.0);
        let split = part(0.0, cut).entries() + part(cut, X_MAX + 1.0).entries();
        prop_assert!((whole.entries() - &split).iter().all(|z| z.norm() < 1e-10));
        let identity = OperatorMatrix::identity(vec![FactorSpace::Position(Grid::new(N, 0.0, X_MAX).unwrap())]).unwrap();
        prop_assert!((whole.entries() - identity.entries().scale(0.5)).iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn hermitian_evolution_conserves_norm(
        potential in prop::collection::vec(-3.0f64..3.0, N),
        x0 in 3.0f64..7.0,
        k0 in -2.0f64..2.0,
        method in methods(),
    ) {
        let prop = propagator(potential, method);
        let grid = Grid::new(N, 0.0, X_MAX).unwrap();
        let psi = gaussian_packet(&grid, x0, 1.8, k0).unwrap();
        let out = prop.evolve(&psi, 0.0, 2.0).unwrap();
        prop_assert!((out.norm_sqr() - 1.0).abs() < 1e-8);
        let back = prop.evolve_backward(&out, 2.0, 0.0).unwrap();
        prop_assert!((back.amplitudes() - psi.amplitudes()).iter().all(|z| z.norm() < 1e-8));
    }
}
