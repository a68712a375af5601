mod common;

use std::process::ExitCode;
use std::time::Instant;

use traversal_core::dynamics::{Hamiltonian, PropagationMethod, Propagator};
use traversal_core::hilbert::{gaussian_packet, Grid, Region};
use traversal_core::scenarios::{catalog, catalog_config, run_scenario, ResultBundle};

const ORACLE_TOL: f64 = 1e-8;
const ORACLE_BUDGET_SECS: f64 = 30.0;
const ORDER_RATIO: (f64, f64) = (3.5, 4.5);
const NORM_TOL: f64 = 1e-8;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn bundle<'a>(bundles: &'a [ResultBundle], prefix: &str) -> &'a ResultBundle {
    bundles.iter().find(|b| b.scenario.starts_with(prefix)).expect("catalog scenario present")
}

/// Passes when every named check exists at least `min` times and all pass.
fn checks_pass(b: &ResultBundle, names: &[&str], min: usize) -> (bool, usize, usize) {
    let found: Vec<_> = b.checks.iter().filter(|c| names.contains(&c.name.as_str())).collect();
    let failed = found.iter().filter(|c| !c.passed).count();
    (found.len() >= min && failed == 0, found.len(), failed)
}

fn oracle_equivalence() -> Verdict {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for method in [PropagationMethod::DenseExponential, PropagationMethod::ImplicitStep] {
        for (_, d) in common::sojourn_discrepancies(method) {
            worst = worst.max(d);
            count += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < ORACLE_TOL && secs < ORACLE_BUDGET_SECS,
        format!("{count} quantities, worst discrepancy {worst:.2e}, {secs:.2} s"),
    )
}

fn method_agreement(bundles: &[ResultBundle]) -> Verdict {
    let b = bundle(bundles, "c");
    let mut passed = true;
    let mut worst = 0.0f64;
    let mut count = 0;
    for method in ["real_potential", "imaginary_potential", "larmor"] {
        for post in ["none", "transmitted", "reflected"] {
            let label = format!("{method}:{post}");
            match b.checks.iter().find(|c| c.name == "clock_vs_sojourn" && c.postselection == label) {
                Some(c) => {
                    passed &= c.passed;
                    worst = worst.max(c.discrepancy / c.tolerance);
                    count += 1;
                }
                None => passed = false,
            }
        }
    }
    verdict(passed && count == 9, format!("{count}/9 clock readings, worst discrepancy/tolerance {worst:.3}"))
}

fn meter_linearity(bundles: &[ResultBundle]) -> Verdict {
    let mut passed = true;
    let mut total = 0;
    let mut scenarios = 0;
    for b in bundles {
        let (ok, n, _) = checks_pass(b, &["meter_linearity", "meter_intercept"], 0);
        if n > 0 {
            scenarios += 1;
        }
        passed &= ok;
        total += n;
    }
    passed &= bundle(bundles, "c").checks_named("meter_linearity").count() == 3;
    verdict(passed, format!("{total} slope/intercept checks over {scenarios} scenarios"))
}

fn strong_statistics(bundles: &[ResultBundle]) -> Verdict {
    let b = bundle(bundles, "e");
    let (ok, n, failed) = checks_pass(b, &["strong_peak_weight", "strong_survival"], 3);
    let p0 = b.record("strong_survival", "none", 0).map_or(f64::NAN, |r| r.value);
    verdict(ok, format!("{n} checks, {failed} failed, P0 = {p0:.4}"))
}

fn sum_rules(bundles: &[ResultBundle]) -> Verdict {
    let mut passed = true;
    let mut notes = Vec::new();
    for b in bundles {
        let two_level = b.scenario.starts_with('e');
        let needed: &[(&str, usize)] = if two_level {
            &[("weak_value_decomposition", 2), ("pointer_mean_sum_rule", 1)]
        } else {
            &[("weak_value_decomposition", 1), ("dwell_sum_rule", 1), ("moment_sum_rule", 2), ("pointer_mean_sum_rule", 1)]
        };
        let mut n = 0;
        for &(name, min) in needed {
            let (ok, found, _) = checks_pass(b, &[name], min);
            passed &= ok;
            n += found;
        }
        notes.push(format!("{}:{n}", &b.scenario[..1]));
    }
    verdict(passed, format!("checks per scenario {}", notes.join(" ")))
}

fn higher_moments(bundles: &[ResultBundle]) -> Verdict {
    let b = bundle(bundles, "c");
    let pairs: Vec<_> = b.checks.iter().filter(|c| c.name.starts_with("second_moment_")).collect();
    let worst = pairs.iter().fold(0.0f64, |m, c| m.max(c.discrepancy / c.tolerance));
    let value = b.record("sojourn_operator", "none", 2).map_or(f64::NAN, |r| r.value);
    verdict(
        pairs.len() == 6 && pairs.iter().all(|c| c.passed),
        format!("{} route pairs, <t^2> = {value:.6}, worst discrepancy/tolerance {worst:.3}", pairs.len()),
    )
}

fn negative_time(bundles: &[ResultBundle]) -> Verdict {
    let b = bundle(bundles, "d");
    let w = catalog_config("d").expect("catalog scenario").window;
    let t = w.t_f - w.t_i;
    let (Some(refl), Some(none)) = (b.record("sojourn", "reflected", 1), b.record("sojourn", "none", 1)) else {
        return verdict(false, "missing sojourn records".into());
    };
    let flagged = refl.flags.iter().any(|f| f == "negative");
    verdict(
        refl.value < 0.0 && flagged && (0.0..=t).contains(&none.value),
        format!("reflected {:.5} flags {:?}, unconditioned {:.5}", refl.value, refl.flags, none.value),
    )
}

fn survival_scaling(bundles: &[ResultBundle]) -> Verdict {
    let b = bundle(bundles, "e");
    let (ok, n, _) = checks_pass(b, &["survival_order"], 1);
    let order = b.record("survival_order", "none", 0).map_or(f64::NAN, |r| r.value);
    verdict(ok && n == 1, format!("fitted order {order:.3}"))
}

fn numerical_hygiene(bundles: &[ResultBundle]) -> Verdict {
    let grid = Grid::new(128, 0.0, 40.0).unwrap();
    let h = Hamiltonian::free(grid).with_added_potential(&Region::new(22.0, 23.0).unwrap(), 1.5).unwrap();
    let psi = gaussian_packet(&grid, 18.0, 2.0, 1.2).unwrap();
    let exact = Propagator::new(PropagationMethod::DenseExponential, 0.01, h.clone()).unwrap().evolve(&psi, 0.0, 2.0).unwrap();
    let err = |dt: f64| {
        let out = Propagator::new(PropagationMethod::ImplicitStep, dt, h.clone()).unwrap().evolve(&psi, 0.0, 2.0).unwrap();
        (out.amplitudes() - exact.amplitudes()).norm() * grid.dx().sqrt()
    };
    let (e1, e2) = (err(0.01), err(0.005));
    let ratio = e1 / e2;

    let mut norm_defect = 0.0f64;
    let cn = Propagator::new(PropagationMethod::ImplicitStep, 0.01, h.clone()).unwrap();
    let mut state = psi.clone();
    for k in 0..20 {
        state = cn.evolve(&state, k as f64 * 0.5, (k + 1) as f64 * 0.5).unwrap();
        norm_defect = norm_defect.max((state.norm_sqr() - 1.0).abs());
    }
    for b in bundles {
        for c in b.checks_named("composite_norm") {
            norm_defect = norm_defect.max(c.discrepancy);
        }
    }

    let absorbing = h.with_absorber(&Region::new(22.0, 23.0).unwrap(), 0.2).unwrap();
    let gp = Propagator::new(PropagationMethod::ImplicitStep, 0.01, absorbing).unwrap();
    let mut norms = vec![1.0];
    let mut state = psi;
    for k in 0..100 {
        state = gp.evolve(&state, k as f64 * 0.05, (k + 1) as f64 * 0.05).unwrap();
        norms.push(state.norm_sqr());
    }
    let monotone = norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-14));
    let lost = 1.0 - norms[norms.len() - 1];

    verdict(
        (ORDER_RATIO.0..=ORDER_RATIO.1).contains(&ratio) && norm_defect < NORM_TOL && monotone && lost > 0.0,
        format!("dt ratio {ratio:.3}, norm defect {norm_defect:.1e}, absorbed {lost:.3e} monotone {monotone}"),
    )
}

fn determinism(first: &[ResultBundle], second: &[ResultBundle]) -> Verdict {
    let mut same = first.len() == second.len();
    for (a, b) in first.iter().zip(second) {
        same &= a.to_csv().unwrap() == b.to_csv().unwrap() && a.to_json().unwrap() == b.to_json().unwrap();
    }
    verdict(same, format!("{} scenarios, csv and json compared byte for byte", first.len()))
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let configs = catalog().expect("catalog parses");
    let run = || configs.iter().map(|c| run_scenario(c).expect("catalog scenario runs")).collect::<Vec<_>>();
    let (first, second) = rayon::join(run, run);
    println!("catalog ran twice in {:.1} s", t0.elapsed().as_secs_f64());

    let results = [
        ("oracle equivalence", oracle_equivalence()),
        ("clock and sojourn agreement on (c)", method_agreement(&first)),
        ("meter linearity", meter_linearity(&first)),
        ("strong-measurement statistics", strong_statistics(&first)),
        ("sum rules on every catalog scenario", sum_rules(&first)),
        ("second-moment routes on (c)", higher_moments(&first)),
        ("negative reflected time on (d)", negative_time(&first)),
        ("survival scaling", survival_scaling(&first)),
        ("numerical hygiene", numerical_hygiene(&first)),
        ("determinism", determinism(&first, &second)),
    ];
    let mut failed = 0;
    for (k, (name, v)) in results.iter().enumerate() {
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("{status} criterion {}: {name} ({})", k + 1, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
