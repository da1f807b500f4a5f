#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use symvae::tabular_oracle::{TabularDist, TabularGameSpec, TabularParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn positive_probs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

pub fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random lifted game with full-support base measures and Gaussian
/// statistic matrices.
pub fn random_game(nx: usize, nz: usize, du: usize, dv: usize, seed: u64) -> TabularGameSpec {
    let mut r = rng(seed);
    let pi_x = positive_probs(nx, &mut r);
    let pi_z = positive_probs(nz, &mut r);
    let phi = normal_vec(nx * nz * du, 1.0, &mut r);
    let psi = normal_vec(nx * nz * dv, 1.0, &mut r);
    TabularGameSpec::new(pi_x, pi_z, du, phi, dv, psi).unwrap()
}

/// The 2x2 game with `phi = (x, xz)` and `psi = (z, xz)`.
pub fn two_by_two(pi_x: [f64; 2], pi_z: [f64; 2]) -> TabularGameSpec {
    let mut phi = Vec::new();
    let mut psi = Vec::new();
    for x in 0..2 {
        for z in 0..2 {
            let (xf, zf) = (x as f64, z as f64);
            phi.extend([xf, xf * zf]);
            psi.extend([zf, xf * zf]);
        }
    }
    TabularGameSpec::new(pi_x.to_vec(), pi_z.to_vec(), 2, phi, 2, psi).unwrap()
}

pub fn random_params(spec: &TabularGameSpec, scale: f64, rng: &mut ChaCha8Rng) -> TabularParams {
    TabularParams { u: normal_vec(spec.dim_u, scale, rng), v: normal_vec(spec.dim_v, scale, rng) }
}

pub fn tv(a: &TabularDist, b: &TabularDist) -> f64 {
    0.5 * a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

use symvae::efcore::FamilyDescriptor;
use symvae::equilibrium::{build_models, Architecture, ModelSet, PriorKind, Scenario, ScenarioOptions, Variant};

/// A single-latent scenario whose maps are affine in one-hot inputs, so every
/// conditional table is realizable.
pub fn tabular_scenario(variant: Variant, data: FamilyDescriptor, latent: FamilyDescriptor, prior: PriorKind) -> Scenario {
    let mut o = ScenarioOptions::new(data, latent);
    o.prior = prior;
    Scenario::new(variant, o).unwrap()
}

/// Models with every player's parameters drawn `N(0, scale^2)`.
pub fn tabular_models(scenario: &Scenario, seed: u64, scale: f64) -> ModelSet {
    let mut r = rng(seed);
    let mut m = build_models(scenario, &Architecture { hidden: vec![] }, &mut r).unwrap();
    for p in 0..m.players.len() {
        let n = m.player_param_len(p);
        m.set_player_params(p, &normal_vec(n, scale, &mut r)).unwrap();
    }
    m
}

/// Sets categorical tables directly: `dec[z * nx + x]` are the logits of
/// `p(x|z)`, `enc[x * nz + z]` those of `q(z|x)`, `prior` those of `p(z)`.
/// Requires categorical data and latent families with one site each.
pub fn set_tables(m: &mut ModelSet, nx: usize, nz: usize, prior: Option<&[f64]>, dec: &[f64], enc: &[f64]) {
    let mut p0 = Vec::new();
    if let Some(pr) = prior {
        p0.extend_from_slice(pr);
    }
    for x in 0..nx {
        for z in 0..nz {
            p0.push(dec[z * nx + x]);
        }
    }
    p0.extend(std::iter::repeat_n(0.0, nx));
    m.set_player_params(0, &p0).unwrap();
    let mut p1 = Vec::new();
    for z in 0..nz {
        for x in 0..nx {
            p1.push(enc[x * nz + z]);
        }
    }
    p1.extend(std::iter::repeat_n(0.0, nz));
    m.set_player_params(1, &p1).unwrap();
}

/// Stationary vector of a row-stochastic matrix by a dense linear solve of
/// `m (T - I) = 0`, `sum m = 1`.
pub fn dense_stationary(n: usize, probs: &[f64]) -> Vec<f64> {
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = probs[i * n + j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

pub fn tv_slices(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
