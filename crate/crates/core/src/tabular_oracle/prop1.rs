//! Decoder-side equivalence with the ELBO-like utility
//! `L'_p = E_pi(x) [log p(x) - KL(q(z|x) || p(z|x))]`.

use crate::efcore::log_sum_exp;
use crate::error::{invalid, Result};

use super::{kl_slices, TabularDist, SUPPORT_CAP};

/// A tabular decoder `pi(z) p_theta(x|z)` with log-linear conditionals
/// `p_theta(x|z) ∝ exp(<stats(x,z), theta>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDecoder {
    pub nx: usize,
    pub nz: usize,
    pub pi_z: Vec<f64>,
    pub dim: usize,
    /// Row `x * nz + z` holds `stats(x, z)`.
    pub stats: Vec<f64>,
}

impl TabularDecoder {
    pub fn validate(&self, theta: &[f64]) -> Result<()> {
        if self.nx * self.nz == 0 || self.nx * self.nz > SUPPORT_CAP {
            return invalid("decoder support is empty or too large");
        }
        if self.pi_z.len() != self.nz || self.pi_z.iter().any(|p| !(*p > 0.0)) {
            return invalid("pi_z must be strictly positive with nz entries");
        }
        if self.stats.len() != self.nx * self.nz * self.dim || theta.len() != self.dim {
            return invalid("statistics or theta have the wrong shape");
        }
        Ok(())
    }

    fn row(&self, x: usize, z: usize) -> &[f64] {
        let s = x * self.nz + z;
        &self.stats[s * self.dim..(s + 1) * self.dim]
    }

    /// `log p_theta(x|z)` as an `nx x nz` table (row-major by x).
    pub fn log_conditional(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.validate(theta)?;
        let mut out = vec![0.0; self.nx * self.nz];
        for z in 0..self.nz {
            let scores: Vec<f64> = (0..self.nx)
                .map(|x| self.row(x, z).iter().zip(theta).map(|(a, b)| a * b).sum())
                .collect();
            let a = log_sum_exp(&scores);
            for x in 0..self.nx {
                out[x * self.nz + z] = scores[x] - a;
            }
        }
        Ok(out)
    }

    /// `E_{p(x'|z)} stats(x', z)` per z.
    fn conditional_means(&self, logc: &[f64]) -> Vec<Vec<f64>> {
        (0..self.nz)
            .map(|z| {
                let mut m = vec![0.0; self.dim];
                for x in 0..self.nx {
                    let p = logc[x * self.nz + z].exp();
                    for (mi, s) in m.iter_mut().zip(self.row(x, z)) {
                        *mi += p * s;
                    }
                }
                m
            })
            .collect()
    }
}

struct Split {
    pi_x: Vec<f64>,
    q_cond: Vec<f64>,
}

/// `pi(x)` and `q(z|x)` of a joint; rows with zero mass are uniform.
fn split(q: &TabularDist, nx: usize, nz: usize) -> Result<Split> {
    if q.len() != nx * nz {
        return invalid("joint has the wrong number of states");
    }
    let pi_x: Vec<f64> = (0..nx).map(|x| q.probs[x * nz..(x + 1) * nz].iter().sum()).collect();
    let mut q_cond = vec![1.0 / nz as f64; nx * nz];
    for x in 0..nx {
        if pi_x[x] > 0.0 {
            for z in 0..nz {
                q_cond[x * nz + z] = q.probs[x * nz + z] / pi_x[x];
            }
        }
    }
    Ok(Split { pi_x, q_cond })
}

/// Posterior `log p(z|x)` and evidence `log p(x)` of the decoder.
fn posterior(dec: &TabularDecoder, logc: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nx, nz) = (dec.nx, dec.nz);
    let mut log_post = vec![0.0; nx * nz];
    let mut log_px = vec![0.0; nx];
    for x in 0..nx {
        let joint: Vec<f64> = (0..nz).map(|z| dec.pi_z[z].ln() + logc[x * nz + z]).collect();
        let lp = log_sum_exp(&joint);
        log_px[x] = lp;
        for z in 0..nz {
            log_post[x * nz + z] = joint[z] - lp;
        }
    }
    (log_post, log_px)
}

/// `L_p = E_q log p(x|z)` and its gradient.
pub fn decoder_utility(dec: &TabularDecoder, q: &TabularDist, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let logc = dec.log_conditional(theta)?;
    split(q, dec.nx, dec.nz)?;
    let means = dec.conditional_means(&logc);
    let mut value = 0.0;
    let mut grad = vec![0.0; dec.dim];
    for x in 0..dec.nx {
        for z in 0..dec.nz {
            let w = q.probs[x * dec.nz + z];
            if w == 0.0 {
                continue;
            }
            value += w * logc[x * dec.nz + z];
            for (g, (s, m)) in grad.iter_mut().zip(dec.row(x, z).iter().zip(&means[z])) {
                *g += w * (s - m);
            }
        }
    }
    Ok((value, grad))
}

/// `L'_p` summed directly: evidence minus posterior KL, per data point.
pub fn lp_prime_direct(dec: &TabularDecoder, q: &TabularDist, theta: &[f64]) -> Result<f64> {
    let logc = dec.log_conditional(theta)?;
    let sp = split(q, dec.nx, dec.nz)?;
    let (log_post, log_px) = posterior(dec, &logc);
    let nz = dec.nz;
    let mut total = 0.0;
    for x in 0..dec.nx {
        if sp.pi_x[x] == 0.0 {
            continue;
        }
        let post: Vec<f64> = log_post[x * nz..(x + 1) * nz].iter().map(|l| l.exp()).collect();
        total += sp.pi_x[x] * (log_px[x] - kl_slices(&sp.q_cond[x * nz..(x + 1) * nz], &post));
    }
    Ok(total)
}

/// `L'_p` as `L_p - E_pi(x) KL(q(z|x) || pi(z))`.
pub fn lp_prime_elbo(dec: &TabularDecoder, q: &TabularDist, theta: &[f64]) -> Result<f64> {
    let (lp, _) = decoder_utility(dec, q, theta)?;
    let sp = split(q, dec.nx, dec.nz)?;
    let nz = dec.nz;
    let penalty: f64 = (0..dec.nx)
        .filter(|x| sp.pi_x[*x] > 0.0)
        .map(|x| sp.pi_x[x] * kl_slices(&sp.q_cond[x * nz..(x + 1) * nz], &dec.pi_z))
        .sum();
    Ok(lp - penalty)
}

/// Gradient of `L'_p`: the evidence term `sum_z p(z|x) g(x,z)` minus the
/// gradient of the posterior KL, `-sum_z q(z|x) (g(x,z) - sum_z' p(z'|x) g(x,z'))`,
/// with `g(x,z) = grad log p(x|z)`.
pub fn lp_prime_gradient(dec: &TabularDecoder, q: &TabularDist, theta: &[f64]) -> Result<Vec<f64>> {
    let logc = dec.log_conditional(theta)?;
    let sp = split(q, dec.nx, dec.nz)?;
    let (log_post, _) = posterior(dec, &logc);
    let means = dec.conditional_means(&logc);
    let (nz, d) = (dec.nz, dec.dim);
    let mut grad = vec![0.0; d];
    for x in 0..dec.nx {
        if sp.pi_x[x] == 0.0 {
            continue;
        }
        let g = |z: usize| -> Vec<f64> { dec.row(x, z).iter().zip(&means[z]).map(|(s, m)| s - m).collect() };
        let mut evidence = vec![0.0; d];
        for z in 0..nz {
            let pz = log_post[x * nz + z].exp();
            for (e, gi) in evidence.iter_mut().zip(g(z)) {
                *e += pz * gi;
            }
        }
        let mut kl_grad = vec![0.0; d];
        for z in 0..nz {
            let qz = sp.q_cond[x * nz + z];
            for (k, (gi, ei)) in kl_grad.iter_mut().zip(g(z).iter().zip(&evidence)) {
                *k -= qz * (gi - ei);
            }
        }
        for i in 0..d {
            grad[i] += sp.pi_x[x] * (evidence[i] - kl_grad[i]);
        }
    }
    Ok(grad)
}

/// `max |grad L_p - grad L'_p|` at `theta` for a fixed encoder joint.
pub fn prop1_residual(dec: &TabularDecoder, q_fixed: &TabularDist, theta: &[f64]) -> Result<f64> {
    let (_, g) = decoder_utility(dec, q_fixed, theta)?;
    let g2 = lp_prime_gradient(dec, q_fixed, theta)?;
    Ok(g.iter().zip(&g2).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}
