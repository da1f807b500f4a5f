mod common;

use common::{max_abs_diff, random_game, random_params, rng, two_by_two};
use proptest::prelude::*;
use symvae::tabular_oracle::{
    dual_solve, exact_gradients, exact_utilities, kl, realize, solve_equilibrium, tv, SolveMode, SolveOptions,
    TabularDist, TabularGameSpec, TabularParams,
};
use symvae::Error;

fn enumerate_p(spec: &TabularGameSpec, u: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = (0..spec.states())
        .map(|s| {
            let z = s % spec.nz;
            spec.pi_z[z] * spec.phi_row(s).iter().zip(u).map(|(a, b)| a * b).sum::<f64>().exp()
        })
        .collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

#[test]
fn zero_params_are_uniform_in_the_free_coordinate() {
    let spec = random_game(3, 5, 2, 3, 11);
    let (p, q) = realize(&spec, &TabularParams::zeros(&spec)).unwrap();
    for x in 0..3 {
        for z in 0..5 {
            assert!((p.probs[x * 5 + z] - spec.pi_z[z] / 3.0).abs() < 1e-15);
            assert!((q.probs[x * 5 + z] - spec.pi_x[x] / 5.0).abs() < 1e-15);
        }
    }
}

#[test]
fn single_state_game_is_degenerate() {
    let spec = TabularGameSpec::new(vec![1.0], vec![1.0], 1, vec![0.3], 1, vec![-2.0]).unwrap();
    let (p, q) = realize(&spec, &TabularParams { u: vec![4.0], v: vec![-1.0] }).unwrap();
    assert_eq!(p.probs, vec![1.0]);
    assert_eq!(q.probs, vec![1.0]);
}

#[test]
fn two_by_two_matches_hand_enumeration() {
    let spec = two_by_two([0.3, 0.7], [0.6, 0.4]);
    let u = [0.7, -1.3];
    let v = [0.2, 0.9];
    let (p, q) = realize(&spec, &TabularParams { u: u.to_vec(), v: v.to_vec() }).unwrap();
    // States in order (x,z) = (0,0), (0,1), (1,0), (1,1).
    let wp = [0.6, 0.4, 0.6 * (0.7f64).exp(), 0.4 * (0.7f64 - 1.3).exp()];
    let wq = [0.3, 0.3 * (0.2f64).exp(), 0.7, 0.7 * (0.2f64 + 0.9).exp()];
    let (sp, sq): (f64, f64) = (wp.iter().sum(), wq.iter().sum());
    for s in 0..4 {
        assert!((p.probs[s] - wp[s] / sp).abs() < 1e-15);
        assert!((q.probs[s] - wq[s] / sq).abs() < 1e-15);
    }
}

#[test]
fn uniform_utilities() {
    let (nx, nz) = (3, 4);
    let spec = TabularGameSpec::new(
        vec![1.0 / 3.0; 3],
        vec![0.25; 4],
        1,
        (0..12).map(|i| i as f64).collect(),
        1,
        (0..12).map(|i| (i % 5) as f64).collect(),
    )
    .unwrap();
    let (lp, lq) = exact_utilities(&spec, &TabularParams::zeros(&spec)).unwrap();
    let expect = -((nx * nz) as f64).ln();
    assert!((lp - expect).abs() < 1e-12);
    assert!((lq - expect).abs() < 1e-12);
}

#[test]
fn utility_equals_closed_form_expectation() {
    let spec = random_game(4, 3, 2, 2, 5);
    let params = random_params(&spec, 1.0, &mut rng(9));
    let (lp, _) = exact_utilities(&spec, &params).unwrap();
    let (_, q) = realize(&spec, &params).unwrap();
    // E_q[log pi(z) + <phi,u>] - A(u), with A(u) summed independently.
    let a: f64 = (0..spec.states())
        .map(|s| spec.pi_z[s % spec.nz] * spec.phi_row(s).iter().zip(&params.u).map(|(a, b)| a * b).sum::<f64>().exp())
        .sum::<f64>()
        .ln();
    let direct: f64 = (0..spec.states())
        .map(|s| {
            let lin: f64 = spec.phi_row(s).iter().zip(&params.u).map(|(a, b)| a * b).sum();
            q.probs[s] * (spec.pi_z[s % spec.nz].ln() + lin)
        })
        .sum::<f64>()
        - a;
    assert!((lp - direct).abs() < 1e-12, "{lp} vs {direct}");
}

#[test]
fn gradients_vanish_when_joints_coincide() {
    let mut r = rng(3);
    let (nx, nz, d) = (3, 3, 3);
    let stats = common::normal_vec(nx * nz * d, 1.0, &mut r);
    let spec =
        TabularGameSpec::new(vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3], d, stats.clone(), d, stats).unwrap();
    let w = common::normal_vec(d, 1.0, &mut r);
    let params = TabularParams { u: w.clone(), v: w };
    let (p, q) = realize(&spec, &params).unwrap();
    assert!(tv(&p, &q) < 1e-15);
    let (gu, gv) = exact_gradients(&spec, &params).unwrap();
    assert!(gu.iter().chain(&gv).all(|g| g.abs() < 1e-15));
}

#[test]
fn concentrated_encoder_gradient() {
    let spec = two_by_two([0.5, 0.5], [0.5, 0.5]);
    let params = TabularParams { u: vec![0.0, 0.0], v: vec![40.0, 40.0] };
    let (gu, _) = exact_gradients(&spec, &params).unwrap();
    let p0 = enumerate_p(&spec, &[0.0, 0.0]);
    let e_phi = [p0[2] + p0[3], p0[3]];
    // phi(1,1) = (1, 1).
    assert!((gu[0] - (1.0 - e_phi[0])).abs() < 1e-12);
    assert!((gu[1] - (1.0 - e_phi[1])).abs() < 1e-12);
}

#[test]
fn ascent_direction_increases_utility() {
    let spec = random_game(4, 4, 3, 3, 21);
    let params = random_params(&spec, 0.5, &mut rng(2));
    let (gu, gv) = exact_gradients(&spec, &params).unwrap();
    let (lp, lq) = exact_utilities(&spec, &params).unwrap();
    let h = 1e-4;
    let up = TabularParams { u: params.u.iter().zip(&gu).map(|(a, g)| a + h * g).collect(), v: params.v.clone() };
    let vp = TabularParams { u: params.u.clone(), v: params.v.iter().zip(&gv).map(|(a, g)| a + h * g).collect() };
    assert!(exact_utilities(&spec, &up).unwrap().0 > lp);
    assert!(exact_utilities(&spec, &vp).unwrap().1 > lq);
}

fn fd_relative_error(spec: &TabularGameSpec, params: &TabularParams) -> f64 {
    let (gu, gv) = exact_gradients(spec, params).unwrap();
    let h = 1e-5;
    let mut num = Vec::new();
    for i in 0..spec.dim_u {
        let mut a = params.clone();
        let mut b = params.clone();
        a.u[i] += h;
        b.u[i] -= h;
        num.push((exact_utilities(spec, &a).unwrap().0 - exact_utilities(spec, &b).unwrap().0) / (2.0 * h));
    }
    for i in 0..spec.dim_v {
        let mut a = params.clone();
        let mut b = params.clone();
        a.v[i] += h;
        b.v[i] -= h;
        num.push((exact_utilities(spec, &a).unwrap().1 - exact_utilities(spec, &b).unwrap().1) / (2.0 * h));
    }
    let exact: Vec<f64> = gu.into_iter().chain(gv).collect();
    let scale = exact.iter().chain(&num).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
    max_abs_diff(&exact, &num) / scale
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let spec = random_game(5, 4, 3, 2, 100 + seed);
        let params = random_params(&spec, 0.7, &mut rng(seed));
        let err = fd_relative_error(&spec, &params);
        assert!(err < 1e-7, "seed {seed}: {err}");
    }
}

#[test]
fn solver_stops_immediately_at_an_equilibrium() {
    let spec = random_game(4, 4, 2, 2, 8);
    let opts = SolveOptions::default();
    let (eq, _) = solve_equilibrium(&spec, &TabularParams::zeros(&spec), &opts).unwrap();
    let (again, trace) = solve_equilibrium(&spec, &eq, &opts).unwrap();
    assert_eq!(trace.iterations, 0);
    assert_eq!(again, eq);
}

#[test]
fn solver_reports_non_convergence_with_trace() {
    let spec = random_game(6, 6, 3, 3, 4);
    let opts = SolveOptions { max_iters: 5, ..Default::default() };
    match solve_equilibrium(&spec, &random_params(&spec, 2.0, &mut rng(1)), &opts) {
        Err(Error::NoConvergence { iterations, trace, residual }) => {
            assert_eq!(iterations, 5);
            assert_eq!(trace.len(), 6);
            assert!(residual > opts.tol);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn invalid_solver_settings_are_rejected() {
    let spec = random_game(2, 2, 1, 1, 4);
    let init = TabularParams::zeros(&spec);
    assert!(solve_equilibrium(&spec, &init, &SolveOptions { tol: 0.0, ..Default::default() }).is_err());
    assert!(solve_equilibrium(&spec, &init, &SolveOptions { step: Some(-1.0), ..Default::default() }).is_err());
}

/// The 2x2 game with `phi = (x, xz)` and `psi = (z)`: three statistics
/// for three degrees of freedom, so the moment equations are independent.
fn two_by_two_unshared() -> TabularGameSpec {
    let mut phi = Vec::new();
    let mut psi = Vec::new();
    for x in 0..2 {
        for z in 0..2 {
            phi.extend([x as f64, (x * z) as f64]);
            psi.push(z as f64);
        }
    }
    TabularGameSpec::new(vec![0.35, 0.65], vec![0.55, 0.45], 2, phi, 1, psi).unwrap()
}

#[test]
fn two_by_two_equilibrium_is_the_unique_grid_stationary_point() {
    let spec = two_by_two_unshared();
    let (eq, _) = solve_equilibrium(&spec, &TabularParams::zeros(&spec), &SolveOptions::default()).unwrap();
    // Brute force over the whole parameter space (u1, u2, v) at resolution
    // 0.01 in a box around the solution: the gradient residual must have a
    // single grid-local minimum, at the solver's answer.
    let half = 80i64;
    let n = (2 * half + 1) as usize;
    let h = 0.01;
    let at = |i: i64, j: i64, k: i64| [eq.u[0] + i as f64 * h, eq.u[1] + j as f64 * h, eq.v[0] + k as f64 * h];
    let mut res = vec![0f32; n * n * n];
    let idx = |i: i64, j: i64, k: i64| (((i + half) as usize * n) + (j + half) as usize) * n + (k + half) as usize;
    for i in -half..=half {
        for j in -half..=half {
            for k in -half..=half {
                let w = at(i, j, k);
                let params = TabularParams { u: vec![w[0], w[1]], v: vec![w[2]] };
                let (gu, gv) = exact_gradients(&spec, &params).unwrap();
                res[idx(i, j, k)] = gu.iter().chain(&gv).fold(0.0f64, |m, g| m.max(g.abs())) as f32;
            }
        }
    }
    let mut minima = Vec::new();
    for i in -half + 1..half {
        for j in -half + 1..half {
            for k in -half + 1..half {
                let r = res[idx(i, j, k)];
                let mut is_min = true;
                for (a, b, c) in (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c)))) {
                    if (a, b, c) != (0, 0, 0) && res[idx(i + a, j + b, k + c)] < r {
                        is_min = false;
                    }
                }
                if is_min {
                    minima.push((i, j, k, r));
                }
            }
        }
    }
    // The valley is narrow, so the grid shows spurious local minima along it;
    // each must lead back to the same equilibrium under the solver.
    assert!(minima.iter().any(|&(i, j, k, _)| i.abs() <= 1 && j.abs() <= 1 && k.abs() <= 1), "{minima:?}");
    let target = realize(&spec, &eq).unwrap();
    for &(i, j, k, _) in &minima {
        let w = at(i, j, k);
        let start = TabularParams { u: vec![w[0], w[1]], v: vec![w[2]] };
        let (found, _) = solve_equilibrium(&spec, &start, &SolveOptions::default()).unwrap();
        let joint = realize(&spec, &found).unwrap();
        assert!(tv(&joint.0, &target.0) < 1e-6, "minimum at {:?}", (i, j, k));
        assert!(tv(&joint.1, &target.1) < 1e-6, "minimum at {:?}", (i, j, k));
        let d = found.u.iter().chain(&found.v).zip(eq.u.iter().chain(&eq.v)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(d < 1e-4, "minimum at {:?} led to a different point ({d})", (i, j, k));
    }
}

#[test]
fn shared_statistics_leave_a_line_of_equilibria() {
    // With phi = (x, xz) and psi = (z, xz) the xz gradients of the two
    // players are negatives of each other, so u2 + v2 is conserved and the
    // limit depends on the start.
    let spec = two_by_two([0.35, 0.65], [0.55, 0.45]);
    let mut joints = Vec::new();
    for init in [[0.0, 0.0, 0.0, 0.0], [1.0, 2.0, -1.0, 3.0], [-2.0, 0.0, 2.0, -3.0]] {
        let init = TabularParams { u: init[..2].to_vec(), v: init[2..].to_vec() };
        let (eq, _) = solve_equilibrium(&spec, &init, &SolveOptions::default()).unwrap();
        assert!(((eq.u[1] + eq.v[1]) - (init.u[1] + init.v[1])).abs() < 1e-9);
        let (p, q) = realize(&spec, &eq).unwrap();
        assert!(tv(&p, &q) < 1e-9);
        joints.push(p);
    }
    assert!(tv(&joints[0], &joints[1]) > 0.1 && tv(&joints[0], &joints[2]) > 0.1);
}

#[test]
fn random_starts_reach_the_same_equilibrium() {
    let spec = random_game(4, 4, 3, 3, 31);
    let mut r = rng(77);
    let mut joints = Vec::new();
    for _ in 0..10 {
        let init = random_params(&spec, 2.0, &mut r);
        let (eq, _) = solve_equilibrium(&spec, &init, &SolveOptions::default()).unwrap();
        joints.push(realize(&spec, &eq).unwrap());
    }
    for a in &joints {
        for b in &joints {
            assert!(tv(&a.0, &b.0) < 1e-4 && tv(&a.1, &b.1) < 1e-4);
        }
    }
}

#[test]
fn sequential_and_parallel_modes_agree() {
    let spec = random_game(5, 3, 2, 3, 12);
    let init = TabularParams::zeros(&spec);
    let (a, _) = solve_equilibrium(&spec, &init, &SolveOptions::default()).unwrap();
    let (b, _) =
        solve_equilibrium(&spec, &init, &SolveOptions { mode: SolveMode::Sequential, ..Default::default() }).unwrap();
    let (pa, qa) = realize(&spec, &a).unwrap();
    let (pb, qb) = realize(&spec, &b).unwrap();
    assert!(tv(&pa, &pb) < 1e-8 && tv(&qa, &qb) < 1e-8);
}

#[test]
fn dual_of_the_baseline_moments_is_the_baseline() {
    let spec = random_game(3, 4, 2, 2, 41);
    let (p0, q0) = realize(&spec, &TabularParams::zeros(&spec)).unwrap();
    let (rp, rq) =
        dual_solve(&spec, &p0.expect(&spec.phi, spec.dim_u), &q0.expect(&spec.psi, spec.dim_v)).unwrap();
    assert!(rp.gamma.iter().chain(&rq.gamma).all(|g| g.abs() < 1e-8), "{:?} {:?}", rp.gamma, rq.gamma);
    assert!(tv(&rp.solution, &p0) < 1e-10 && tv(&rq.solution, &q0) < 1e-10);
    // With zero multipliers A(0) = log sum_{x,z} pi(z) = log |X|.
    assert!((rp.lambda - (1.0 - 3f64.ln())).abs() < 1e-8);
}

#[test]
fn dual_reproduces_the_equilibrium() {
    let spec = random_game(6, 5, 3, 4, 51);
    let (eq, _) = solve_equilibrium(&spec, &TabularParams::zeros(&spec), &SolveOptions::default()).unwrap();
    let (p, q) = realize(&spec, &eq).unwrap();
    let (rp, rq) = dual_solve(&spec, &q.expect(&spec.phi, spec.dim_u), &p.expect(&spec.psi, spec.dim_v)).unwrap();
    assert!(rp.constraint_residual < 1e-8 && rq.constraint_residual < 1e-8);
    assert!(tv(&rp.solution, &p) < 1e-5 && tv(&rq.solution, &q) < 1e-5);
    // The entropy objective equals the Fenchel dual value <gamma, t> - A(gamma).
    let t = q.expect(&spec.phi, spec.dim_u);
    let dual_value: f64 = rp.gamma.iter().zip(&t).map(|(g, m)| g * m).sum::<f64>() - (1.0 - rp.lambda);
    assert!((rp.entropy_objective - dual_value).abs() < 1e-8);
}

#[test]
fn boundary_targets_are_infeasible() {
    let spec = two_by_two([0.5, 0.5], [0.5, 0.5]);
    // E[x] = 1 forces all mass onto x = 1.
    let r = dual_solve(&spec, &[1.0, 0.5], &[0.5, 0.25]);
    assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
    // Interior per coordinate but E[xz] > E[x] is outside the polytope.
    let r = dual_solve(&spec, &[0.3, 0.4], &[0.5, 0.25]);
    assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
}

#[test]
fn singular_newton_systems_fall_back_to_regularization() {
    // Duplicate statistic columns make the covariance singular.
    let mut phi = Vec::new();
    for s in 0..4 {
        let x = (s / 2) as f64;
        phi.extend([x, x]);
    }
    let spec = TabularGameSpec::new(vec![0.5; 2], vec![0.5; 2], 2, phi.clone(), 2, phi).unwrap();
    let (rp, _) = dual_solve(&spec, &[0.3, 0.3], &[0.6, 0.6]).unwrap();
    assert!(rp.regularized);
    assert!(rp.constraint_residual < 1e-8);
}

#[test]
fn kl_examples() {
    let a = TabularDist::new(vec![1.0, 0.0]).unwrap();
    let b = TabularDist::new(vec![0.5, 0.5]).unwrap();
    assert_eq!(kl(&b, &b), 0.0);
    assert!((kl(&a, &b) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(kl(&b, &a), f64::INFINITY);
    let mut r = rng(5);
    let x = TabularDist::from_weights(common::positive_probs(7, &mut r)).unwrap();
    let y = TabularDist::from_weights(common::positive_probs(7, &mut r)).unwrap();
    let mut oracle = 0.0;
    for i in 0..7 {
        oracle += x.probs[i] * x.probs[i].ln() - x.probs[i] * y.probs[i].ln();
    }
    assert!((kl(&x, &y) - oracle).abs() < 1e-14);
}

#[test]
fn text_form_round_trips() {
    let spec = random_game(3, 2, 2, 3, 61);
    let back = TabularGameSpec::from_text(&spec.to_text()).unwrap();
    assert_eq!(back, spec);
    assert!(TabularGameSpec::from_text("nope").is_err());
}

#[test]
fn oversized_supports_are_rejected() {
    let n = 300;
    let r = TabularGameSpec::new(vec![1.0 / n as f64; n], vec![1.0 / n as f64; n], 0, vec![], 0, vec![]);
    assert!(matches!(r, Err(Error::SupportTooLarge { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn realized_joints_are_normalized(seed in 0u64..1000, nx in 1usize..6, nz in 1usize..6) {
        let spec = random_game(nx, nz, 2, 2, seed);
        let params = random_params(&spec, 3.0, &mut rng(seed + 1));
        let (p, q) = realize(&spec, &params).unwrap();
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn own_gradient_steps_never_decrease_own_utility(seed in 0u64..1000) {
        let spec = random_game(4, 3, 3, 2, seed);
        let params = random_params(&spec, 1.0, &mut rng(seed ^ 7));
        let (gu, gv) = exact_gradients(&spec, &params).unwrap();
        let (lp, lq) = exact_utilities(&spec, &params).unwrap();
        let step = 1e-3;
        let up = TabularParams { u: params.u.iter().zip(&gu).map(|(a, g)| a + step * g).collect(), v: params.v.clone() };
        let vp = TabularParams { u: params.u.clone(), v: params.v.iter().zip(&gv).map(|(a, g)| a + step * g).collect() };
        prop_assert!(exact_utilities(&spec, &up).unwrap().0 >= lp - 1e-14);
        prop_assert!(exact_utilities(&spec, &vp).unwrap().1 >= lq - 1e-14);
    }

    #[test]
    fn exact_gradients_match_finite_differences(seed in 0u64..1000) {
        let spec = random_game(3, 4, 2, 3, seed);
        let params = random_params(&spec, 1.0, &mut rng(seed + 3));
        prop_assert!(fd_relative_error(&spec, &params) < 1e-7);
    }

    #[test]
    fn equilibria_match_moments(seed in 0u64..1000) {
        let spec = random_game(4, 4, 2, 2, seed);
        let (eq, _) = solve_equilibrium(&spec, &TabularParams::zeros(&spec), &SolveOptions::default()).unwrap();
        let (p, q) = realize(&spec, &eq).unwrap();
        prop_assert!(max_abs_diff(&p.expect(&spec.phi, 2), &q.expect(&spec.phi, 2)) < 1e-6);
        prop_assert!(max_abs_diff(&p.expect(&spec.psi, 2), &q.expect(&spec.psi, 2)) < 1e-6);
    }
}
