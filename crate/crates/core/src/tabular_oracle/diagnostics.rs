//! Consistency of a decoder/encoder pair on enumerable spaces.

use crate::chain::{stationary_distribution, TransitionMatrix};
use crate::efcore::Value;
use crate::equilibrium::{factor_names, Assignment, ModelSet, Var};
use crate::error::{invalid, Result};

use super::{kl_slices, tv, TabularDist, SUPPORT_CAP};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyDiagnostics {
    /// `E_{q(x)} KL(q(z|x) || p(z|x))`, with `q(x)` the data marginal.
    pub kl_rev: f64,
    /// `E_{p(x)} KL(p(z|x) || q(z|x))`.
    pub kl_fwd: f64,
    /// Total variation between the two limiting joints of the alternating
    /// chain, `m(x) q(z|x)` and `m(z) p(x|z)`.
    pub tv_mixture: f64,
}

/// Row-conditionals `a(z|x)` (`by_x`) or `a(x|z)` of a joint; conditionals
/// of zero-mass rows are taken uniform.
fn conditional(joint: &TabularDist, nx: usize, nz: usize, by_x: bool) -> (Vec<f64>, Vec<f64>) {
    let (outer, inner) = if by_x { (nx, nz) } else { (nz, nx) };
    let idx = |o: usize, i: usize| if by_x { o * nz + i } else { i * nz + o };
    let mut marg = vec![0.0; outer];
    let mut cond = vec![0.0; outer * inner];
    for o in 0..outer {
        marg[o] = (0..inner).map(|i| joint.probs[idx(o, i)]).sum();
        for i in 0..inner {
            cond[o * inner + i] =
                if marg[o] > 0.0 { joint.probs[idx(o, i)] / marg[o] } else { 1.0 / inner as f64 };
        }
    }
    (marg, cond)
}

const STATIONARY_TOL: f64 = 1e-13;

fn lazy_stationary(n: usize, kernel: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>> {
    let mut probs = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            probs[a * n + b] = 0.5 * kernel(a, b) + if a == b { 0.5 } else { 0.0 };
        }
    }
    stationary_distribution(&TransitionMatrix { n, probs }, STATIONARY_TOL)
}

/// Reverse and forward conditional KLs and the mixture-component TV of two
/// joints over `X x Z` (index `x * nz + z`).
pub fn consistency_diagnostics(p_joint: &TabularDist, q_joint: &TabularDist, nx: usize, nz: usize) -> Result<ConsistencyDiagnostics> {
    if p_joint.len() != nx * nz || q_joint.len() != nx * nz {
        return invalid("joints do not match the declared space");
    }
    let (px, p_zx) = conditional(p_joint, nx, nz, true);
    let (qx, q_zx) = conditional(q_joint, nx, nz, true);
    let (_, p_xz) = conditional(p_joint, nx, nz, false);
    let row = |c: &[f64], x: usize| c[x * nz..(x + 1) * nz].to_vec();
    let mut kl_rev = 0.0;
    let mut kl_fwd = 0.0;
    for x in 0..nx {
        if qx[x] > 0.0 {
            kl_rev += qx[x] * kl_slices(&row(&q_zx, x), &row(&p_zx, x));
        }
        if px[x] > 0.0 {
            kl_fwd += px[x] * kl_slices(&row(&p_zx, x), &row(&q_zx, x));
        }
    }
    // x-chain: x -> z ~ q(z|x) -> x' ~ p(x'|z); z-chain likewise.
    let m_x = lazy_stationary(nx, |a, b| (0..nz).map(|z| q_zx[a * nz + z] * p_xz[z * nx + b]).sum())?;
    let m_z = lazy_stationary(nz, |a, b| (0..nx).map(|x| p_xz[a * nx + x] * q_zx[x * nz + b]).sum())?;
    let mut after_z = vec![0.0; nx * nz];
    let mut after_x = vec![0.0; nx * nz];
    for x in 0..nx {
        for z in 0..nz {
            after_z[x * nz + z] = m_x[x] * q_zx[x * nz + z];
            after_x[x * nz + z] = m_z[z] * p_xz[z * nx + x];
        }
    }
    let tv_mixture = tv(&TabularDist { probs: after_z }, &TabularDist { probs: after_x });
    Ok(ConsistencyDiagnostics { kl_rev: kl_rev.max(0.0), kl_fwd: kl_fwd.max(0.0), tv_mixture })
}

/// Tabular joints of a single-latent model set: `p(z) p(x|z)` and
/// `pi(x) q(z|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJoints {
    pub nx: usize,
    pub nz: usize,
    pub p: TabularDist,
    pub q: TabularDist,
}

fn empirical(fam: crate::efcore::FamilyDescriptor, n: usize, samples: &[Value]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return invalid("an empirical marginal needs samples");
    }
    let mut counts = vec![0.0; n];
    for v in samples {
        counts[fam.index_of(v)? as usize] += 1.0;
    }
    Ok(counts.into_iter().map(|c| c / samples.len() as f64).collect())
}

/// Builds both joints from the factors `prior.z0` (or, when absent, the
/// empirical `z_samples`), `dec.x` and `enc.z0`; `pi(x)` is the empirical
/// distribution of `x_samples`.
pub fn model_joints(models: &ModelSet, x_samples: &[Value], z_samples: &[Value]) -> Result<ModelJoints> {
    let xf = models.family(Var::X)?;
    let zf = models.family(Var::Z(0))?;
    let xs = xf.enumerate(SUPPORT_CAP)?;
    let zs = zf.enumerate(SUPPORT_CAP)?;
    let (nx, nz) = (xs.len(), zs.len());
    if nx * nz > SUPPORT_CAP {
        return invalid("joint space exceeds the enumeration cap");
    }
    let dec = models.use_of(factor_names::DEC_X)?;
    let enc = models.use_of(&factor_names::enc(0))?;
    let prior_z = match models.use_of(&factor_names::prior(0)) {
        Ok(u) => {
            let mut asg = Assignment::new();
            zs.iter()
                .map(|z| {
                    asg.set(Var::Z(0), z.clone());
                    models.log_density(&u, &asg).map(f64::exp)
                })
                .collect::<Result<Vec<f64>>>()?
        }
        Err(_) => empirical(zf, nz, z_samples)?,
    };
    let pi_x = empirical(xf, nx, x_samples)?;
    let mut p = vec![0.0; nx * nz];
    let mut q = vec![0.0; nx * nz];
    let mut asg = Assignment::new();
    for (zi, z) in zs.iter().enumerate() {
        asg.set(Var::Z(0), z.clone());
        let eta = models.natural_params(&dec, &asg)?;
        for (xi, x) in xs.iter().enumerate() {
            p[xi * nz + zi] = prior_z[zi] * xf.log_density(&eta, x)?.exp();
        }
    }
    for (xi, x) in xs.iter().enumerate() {
        asg.set(Var::X, x.clone());
        let eta = models.natural_params(&enc, &asg)?;
        for (zi, z) in zs.iter().enumerate() {
            q[xi * nz + zi] = pi_x[xi] * zf.log_density(&eta, z)?.exp();
        }
    }
    Ok(ModelJoints { nx, nz, p: TabularDist::from_weights(p)?, q: TabularDist::from_weights(q)? })
}
