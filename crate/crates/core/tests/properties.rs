//! Invariants of the analytic and numerical modules over random parameter points.

use proptest::prelude::*;
use spiked_core::analysis::{powerlaw_extrapolate, relaxation_time, Axis};
use spiked_core::lse_dyngrid::{integrate_dyngrid, DynGridConfig};
use spiked_core::lse_fixed::{integrate_fixed, AnnealSchedule, FixedGridConfig};
use spiked_core::replica_1rsb::{saddle_metastable, saddle_residuals, threshold_roots, threshold_states};
use spiked_core::rs_landscape::{
    langevin_threshold, rs_free_entropy, rs_free_entropy_variational, se_fixed_point, se_map, se_residual, se_two_param_iterate, SEState,
    EPS_INIT, INFORMATIVE_INIT,
};
use spiked_core::ModelParams;

fn params() -> impl Strategy<Value = ModelParams> {
    (3u32..=5, 0.2f64..3.0, 0.1f64..3.0).prop_map(|(p, d2, dp)| ModelParams::new(p, d2, dp).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn se_fixed_points_solve_the_residual(params in params()) {
        for m0 in [EPS_INIT, INFORMATIVE_INIT] {
            let m = se_fixed_point(m0, &params);
            prop_assert!((0.0..1.0).contains(&m));
            prop_assert!(se_residual(m, &params).abs() < 1e-9, "m = {m}");
        }
    }

    #[test]
    fn se_map_is_monotone(params in params(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(se_map(lo, &params) <= se_map(hi, &params));
    }

    #[test]
    fn nishimori_line_is_closed(params in params(), m in 0.0f64..0.99) {
        let next = se_two_param_iterate(SEState { m, q: m }, &params).unwrap();
        prop_assert!((next.m - next.q).abs() < 1e-12);
        prop_assert!((next.m - se_map(m, &params)).abs() < 1e-12);
    }

    #[test]
    fn free_entropy_forms_agree_at_fixed_points(params in params()) {
        let m = se_fixed_point(INFORMATIVE_INIT, &params);
        let a = rs_free_entropy(m, &params).unwrap();
        let b = rs_free_entropy_variational(m, &params);
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn langevin_roots_are_marginal_threshold_states(p in 3u32..=5, dp in 0.05f64..1.9) {
        let base = ModelParams::new(p, 1.0, dp).unwrap();
        for s in langevin_threshold(&base).roots {
            let at = ModelParams::new(p, s, dp).unwrap();
            let roots = threshold_roots(&at);
            prop_assert!(roots.iter().any(|q| (q - (1.0 - s)).abs() < 1e-8), "s = {s}, roots {roots:?}");
        }
    }

    #[test]
    fn threshold_saddle_is_marginal(params in params()) {
        let th = threshold_states(&params);
        prop_assume!(th.exists);
        let (q, x, e) = (th.q_th.unwrap(), th.x_th.unwrap(), th.e_th.unwrap());
        prop_assume!(x > 0.05 && x < 0.95);
        let s = saddle_metastable(x, &params).unwrap();
        prop_assume!(s.is_some());
        let s = s.unwrap();
        prop_assume!((s.q_big - q).abs() < 1e-6);
        let r = saddle_residuals(s.q_big, s.q_small, s.m, x, &params).unwrap();
        prop_assert!(r.iter().all(|v| v.abs() < 1e-8), "{r:?}");
        prop_assert!(s.lambda_ii.abs() < 1e-7, "λ_II = {}", s.lambda_ii);
        prop_assert!((s.energy - e).abs() < 1e-7, "{} vs {e}", s.energy);
    }

    #[test]
    fn relaxation_time_scales_with_time(a in 0.1f64..10.0, b in 0.1f64..5.0, rate in 0.2f64..3.0) {
        let base: Vec<(f64, f64)> = (0..200).map(|k| {
            let t = k as f64 * 0.05;
            (t, 1.0 - (-rate * t).exp())
        }).collect();
        let tau = relaxation_time(&base, None).unwrap().tau().unwrap();
        let scaled: Vec<(f64, f64)> = base.iter().map(|&(t, c)| (a * t, b * c)).collect();
        let tau_s = relaxation_time(&scaled, None).unwrap().tau().unwrap();
        prop_assert!((tau_s - a * tau).abs() < 1e-9 * a.max(1.0) * tau.max(1.0));
    }

    #[test]
    fn power_law_is_inverted(d_star in 0.5f64..1.0, gamma in 1.0f64..3.5, log_a in -1.0f64..2.0) {
        // Samples on the slow side of the divergence, 1/Δ below 1/Δ*.
        let samples: Vec<(f64, f64)> = (1..=6).map(|k| {
            let d = d_star * (1.0 + 0.04 * k as f64);
            (d, log_a.exp() * (1.0 / d_star - 1.0 / d).abs().powf(-gamma))
        }).collect();
        let fit = powerlaw_extrapolate(&samples, Axis::Delta2).unwrap();
        prop_assert!((fit.delta_star - d_star).abs() < 1e-5, "{} vs {d_star}", fit.delta_star);
        prop_assert!((fit.gamma - gamma).abs() < 1e-4, "{} vs {gamma}", fit.gamma);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fixed_grid_respects_causality(params in params(), cbar0 in 0.0f64..0.9) {
        let config = FixedGridConfig { dt: 0.05, t_max: 3.0, cbar0, ..FixedGridConfig::default() };
        let f = integrate_fixed(&params, &AnnealSchedule::constant(), &config).unwrap();
        for i in 0..f.len() {
            prop_assert!((f.corr(i, i) - 1.0).abs() < 1e-12);
            prop_assert_eq!(f.resp(i, i), 0.0);
            if i > 0 {
                prop_assert_eq!(f.resp(i, i - 1), 1.0);
            }
            for j in 0..=i {
                prop_assert!(f.corr(i, j).abs() <= 1.0 + 1e-9);
            }
            prop_assert!(f.cbar[i].abs() <= 1.0 + 1e-9);
        }
    }

    // Moderate signal strengths, so that the coarse grid resolves the initial relaxation.
    #[test]
    fn dynamic_grid_keeps_the_diagonal(
        params in (3u32..=5, 0.4f64..3.0, 0.4f64..3.0).prop_map(|(p, d2, dp)| ModelParams::new(p, d2, dp).unwrap()),
        cbar0 in 0.0f64..0.9,
    ) {
        let config = DynGridConfig { nt: 32, n_doublings: 2, dt0: 0.01, cbar0, sc_tol: 1e-12, ..DynGridConfig::default() };
        let run = integrate_dyngrid(&params, &config).unwrap();
        let g = &run.grid;
        prop_assert!(g.diagonal_defect() < 1e-10, "defect {}", g.diagonal_defect());
        for i in 0..=g.filled {
            prop_assert!((g.c.at(i, i) - 1.0).abs() < 1e-12);
            prop_assert!(g.q.at(i, i).abs() < 1e-12);
        }
        prop_assert!(run.trajectory.windows(2).all(|w| w[1].t > w[0].t));
        prop_assert!(run.trajectory.iter().all(|r| r.cbar.abs() <= 1.0 + 1e-9));
    }
}
