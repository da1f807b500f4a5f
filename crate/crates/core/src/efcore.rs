//! Factorized exponential families used as decoder and encoder output laws.
//!
//! Three families are supported, each with a fixed sufficient-statistic map:
//!
//! | family | support | statistic | `stat_dim` |
//! |---|---|---|---|
//! | `bernoulli:n` | `{0,1}^n` | the bits | `n` |
//! | `categorical:kxs` | `{0..k-1}^s` | one-hot per site, row-major | `k*s` |
//! | `gaussian:n` | `R^n` | `(x_1..x_n, x_1^2..x_n^2)` | `2n` |
//!
//! Densities are `exp(<stats(v), eta> - A(eta))` and all arithmetic stays in
//! log space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// An exponential family over a factorized sample space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyDescriptor {
    BernoulliVector { n: usize },
    Categorical { k: usize, sites: usize },
    DiagonalGaussian { n: usize },
}

/// Natural parameters of a family, laid out like its sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams(pub Vec<f64>);

/// A point in the support of a family.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bits(Vec<bool>),
    Labels(Vec<usize>),
    Reals(Vec<f64>),
}

impl Value {
    /// Number of independent sites (bits, labels or coordinates).
    pub fn site_count(&self) -> usize {
        match self {
            Value::Bits(b) => b.len(),
            Value::Labels(l) => l.len(),
            Value::Reals(r) => r.len(),
        }
    }

    /// The value of one site as a real number (labels become their index).
    pub fn site(&self, i: usize) -> f64 {
        match self {
            Value::Bits(b) => f64::from(u8::from(b[i])),
            Value::Labels(l) => l[i] as f64,
            Value::Reals(r) => r[i],
        }
    }

    /// Copies site `i` of `other` into `self`. Both must be the same variant.
    pub fn copy_site_from(&mut self, other: &Value, i: usize) {
        match (self, other) {
            (Value::Bits(a), Value::Bits(b)) => a[i] = b[i],
            (Value::Labels(a), Value::Labels(b)) => a[i] = b[i],
            (Value::Reals(a), Value::Reals(b)) => a[i] = b[i],
            _ => panic!("copy_site_from: mismatched value kinds"),
        }
    }

    /// All sites as reals, see [`Value::site`].
    pub fn to_reals(&self) -> Vec<f64> {
        (0..self.site_count()).map(|i| self.site(i)).collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sum exp` of a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl FamilyDescriptor {
    pub fn bernoulli(n: usize) -> Result<Self> {
        Self::BernoulliVector { n }.validated()
    }

    pub fn categorical(k: usize, sites: usize) -> Result<Self> {
        Self::Categorical { k, sites }.validated()
    }

    pub fn gaussian(n: usize) -> Result<Self> {
        Self::DiagonalGaussian { n }.validated()
    }

    fn validated(self) -> Result<Self> {
        match self {
            Self::BernoulliVector { n } | Self::DiagonalGaussian { n } if n == 0 => {
                invalid("family dimension must be at least 1")
            }
            Self::Categorical { k, .. } if k < 2 => invalid("categorical needs k >= 2"),
            Self::Categorical { sites, .. } if sites == 0 => {
                invalid("categorical needs at least one site")
            }
            ok => Ok(ok),
        }
    }

    pub fn stat_dim(&self) -> usize {
        match *self {
            Self::BernoulliVector { n } => n,
            Self::Categorical { k, sites } => k * sites,
            Self::DiagonalGaussian { n } => 2 * n,
        }
    }

    pub fn site_count(&self) -> usize {
        match *self {
            Self::BernoulliVector { n } | Self::DiagonalGaussian { n } => n,
            Self::Categorical { sites, .. } => sites,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Self::DiagonalGaussian { .. })
    }

    /// Width of the feature vector used when a value of this family feeds a
    /// parametric map: bits, one-hot labels, or raw reals.
    pub fn input_dim(&self) -> usize {
        match *self {
            Self::BernoulliVector { n } | Self::DiagonalGaussian { n } => n,
            Self::Categorical { k, sites } => k * sites,
        }
    }

    /// Number of support points, `None` for continuous families.
    pub fn support_size(&self) -> Option<u128> {
        match *self {
            Self::BernoulliVector { n } => 2u128.checked_pow(n as u32),
            Self::Categorical { k, sites } => (k as u128).checked_pow(sites as u32),
            Self::DiagonalGaussian { .. } => None,
        }
    }

    /// Natural parameters of the "neutral" member: uniform for discrete
    /// families, standard normal for the Gaussian.
    pub fn reference_params(&self) -> NaturalParams {
        match *self {
            Self::DiagonalGaussian { n } => {
                let mut v = vec![0.0; 2 * n];
                v[n..].iter_mut().for_each(|e| *e = -0.5);
                NaturalParams(v)
            }
            _ => NaturalParams(vec![0.0; self.stat_dim()]),
        }
    }

    pub fn check_value(&self, v: &Value) -> Result<()> {
        match (*self, v) {
            (Self::BernoulliVector { n }, Value::Bits(b)) if b.len() == n => Ok(()),
            (Self::Categorical { k, sites }, Value::Labels(l)) if l.len() == sites => {
                if l.iter().all(|&c| c < k) {
                    Ok(())
                } else {
                    invalid(format!("label out of range for {self}"))
                }
            }
            (Self::DiagonalGaussian { n }, Value::Reals(r)) if r.len() == n => {
                if r.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    invalid("non-finite real value")
                }
            }
            _ => invalid(format!(
                "value with {} sites does not belong to {self}",
                v.site_count()
            )),
        }
    }

    pub fn check_params(&self, eta: &NaturalParams) -> Result<()> {
        if eta.0.len() != self.stat_dim() {
            return invalid(format!(
                "natural parameters of length {} for {self} (expected {})",
                eta.0.len(),
                self.stat_dim()
            ));
        }
        if eta.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite natural parameter".into()));
        }
        if let Self::DiagonalGaussian { n } = *self {
            if eta.0[n..].iter().any(|&q| q >= 0.0) {
                return Err(Error::InvalidParameter(
                    "gaussian quadratic coefficient must be negative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn suff_stats(&self, v: &Value) -> Result<Vec<f64>> {
        self.check_value(v)?;
        Ok(match (*self, v) {
            (Self::BernoulliVector { .. }, Value::Bits(b)) => {
                b.iter().map(|&x| f64::from(u8::from(x))).collect()
            }
            (Self::Categorical { k, sites }, Value::Labels(l)) => {
                let mut s = vec![0.0; k * sites];
                for (i, &c) in l.iter().enumerate() {
                    s[i * k + c] = 1.0;
                }
                s
            }
            (Self::DiagonalGaussian { .. }, Value::Reals(r)) => {
                r.iter().copied().chain(r.iter().map(|x| x * x)).collect()
            }
            _ => unreachable!(),
        })
    }

    /// Features fed to a parametric map when `v` is a conditioning value.
    pub fn encode_input(&self, v: &Value, out: &mut Vec<f64>) {
        match v {
            Value::Bits(b) => out.extend(b.iter().map(|&x| f64::from(u8::from(x)))),
            Value::Labels(l) => {
                let k = match *self {
                    Self::Categorical { k, .. } => k,
                    _ => panic!("labels encoded with non-categorical family"),
                };
                for &c in l {
                    let start = out.len();
                    out.resize(start + k, 0.0);
                    out[start + c] = 1.0;
                }
            }
            Value::Reals(r) => out.extend_from_slice(r),
        }
    }

    pub fn log_partition(&self, eta: &NaturalParams) -> Result<f64> {
        self.check_params(eta)?;
        let e = &eta.0;
        Ok(match *self {
            Self::BernoulliVector { .. } => e.iter().map(|&x| softplus(x)).sum(),
            Self::Categorical { k, .. } => e.chunks(k).map(log_sum_exp).sum(),
            Self::DiagonalGaussian { n } => (0..n)
                .map(|i| {
                    let (a, b) = (e[i], e[n + i]);
                    -a * a / (4.0 * b) + 0.5 * (LN_PI - (-b).ln())
                })
                .sum(),
        })
    }

    pub fn log_density(&self, eta: &NaturalParams, v: &Value) -> Result<f64> {
        self.check_params(eta)?;
        self.check_value(v)?;
        let e = &eta.0;
        Ok(match (*self, v) {
            (Self::BernoulliVector { .. }, Value::Bits(b)) => b
                .iter()
                .zip(e)
                .map(|(&x, &t)| if x { -softplus(-t) } else { -softplus(t) })
                .sum(),
            (Self::Categorical { k, .. }, Value::Labels(l)) => l
                .iter()
                .zip(e.chunks(k))
                .map(|(&c, site)| site[c] - log_sum_exp(site))
                .sum(),
            (Self::DiagonalGaussian { .. }, Value::Reals(_)) => {
                let s = self.suff_stats(v)?;
                s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() - self.log_partition(eta)?
            }
            _ => unreachable!(),
        })
    }

    /// Expected sufficient statistics `E[stats]`, i.e. the gradient of the
    /// log-partition function.
    pub fn mean_params(&self, eta: &NaturalParams) -> Result<Vec<f64>> {
        self.check_params(eta)?;
        let e = &eta.0;
        Ok(match *self {
            Self::BernoulliVector { .. } => e.iter().map(|&x| sigmoid(x)).collect(),
            Self::Categorical { k, .. } => {
                let mut out = vec![0.0; e.len()];
                for (o, site) in out.chunks_mut(k).zip(e.chunks(k)) {
                    softmax_into(site, o);
                }
                out
            }
            Self::DiagonalGaussian { n } => {
                let mut out = vec![0.0; 2 * n];
                for i in 0..n {
                    let (a, b) = (e[i], e[n + i]);
                    let mean = -a / (2.0 * b);
                    out[i] = mean;
                    out[n + i] = mean * mean - 1.0 / (2.0 * b);
                }
                out
            }
        })
    }

    /// Covariance of the sufficient statistics applied to `v` (the Fisher
    /// information in natural coordinates).
    pub fn fisher_vector_product(&self, eta: &NaturalParams, v: &[f64]) -> Result<Vec<f64>> {
        let mu = self.mean_params(eta)?;
        if v.len() != mu.len() {
            return invalid("fisher_vector_product: length mismatch");
        }
        let e = &eta.0;
        Ok(match *self {
            Self::BernoulliVector { .. } => {
                mu.iter().zip(v).map(|(m, x)| m * (1.0 - m) * x).collect()
            }
            Self::Categorical { k, .. } => {
                let mut out = vec![0.0; v.len()];
                for ((o, p), x) in out.chunks_mut(k).zip(mu.chunks(k)).zip(v.chunks(k)) {
                    let dot: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        o[j] = p[j] * (x[j] - dot);
                    }
                }
                out
            }
            Self::DiagonalGaussian { n } => {
                let mut out = vec![0.0; 2 * n];
                for i in 0..n {
                    let s2 = -1.0 / (2.0 * e[n + i]);
                    let m = mu[i];
                    let c11 = s2;
                    let c12 = 2.0 * m * s2;
                    let c22 = 4.0 * m * m * s2 + 2.0 * s2 * s2;
                    out[i] = c11 * v[i] + c12 * v[n + i];
                    out[n + i] = c12 * v[i] + c22 * v[n + i];
                }
                out
            }
        })
    }

    /// `KL(self(eta_a) || self(eta_b))`.
    pub fn kl(&self, eta_a: &NaturalParams, eta_b: &NaturalParams) -> Result<f64> {
        let mu = self.mean_params(eta_a)?;
        let diff: f64 = mu
            .iter()
            .zip(eta_a.0.iter().zip(&eta_b.0))
            .map(|(m, (a, b))| m * (a - b))
            .sum();
        Ok((diff - self.log_partition(eta_a)? + self.log_partition(eta_b)?).max(0.0))
    }

    /// Gradient of `KL(a || b)` with respect to `eta_a`.
    pub fn kl_grad_first(&self, eta_a: &NaturalParams, eta_b: &NaturalParams) -> Result<Vec<f64>> {
        let d: Vec<f64> = eta_a.0.iter().zip(&eta_b.0).map(|(a, b)| a - b).collect();
        self.fisher_vector_product(eta_a, &d)
    }

    pub fn sample<R: Rng + ?Sized>(&self, eta: &NaturalParams, rng: &mut R) -> Result<Value> {
        self.check_params(eta)?;
        let e = &eta.0;
        Ok(match *self {
            Self::BernoulliVector { .. } => {
                Value::Bits(e.iter().map(|&t| rng.random::<f64>() < sigmoid(t)).collect())
            }
            Self::Categorical { k, .. } => {
                let mut p = vec![0.0; k];
                Value::Labels(
                    e.chunks(k)
                        .map(|site| {
                            softmax_into(site, &mut p);
                            let u: f64 = rng.random();
                            let mut acc = 0.0;
                            for (j, pj) in p.iter().enumerate() {
                                acc += pj;
                                if u < acc {
                                    return j;
                                }
                            }
                            k - 1
                        })
                        .collect(),
                )
            }
            Self::DiagonalGaussian { n } => Value::Reals(
                (0..n)
                    .map(|i| {
                        let (a, b) = (e[i], e[n + i]);
                        let sd = (-0.5 / b).sqrt();
                        let z: f64 = rng.sample(StandardNormal);
                        -a / (2.0 * b) + sd * z
                    })
                    .collect(),
            ),
        })
    }

    /// The `index`-th support point in mixed-radix order (site 0 least
    /// significant).
    pub fn value_at(&self, index: u128) -> Result<Value> {
        let size = self.support_size().ok_or_else(|| {
            Error::InvalidInput(format!("{self} has no enumerable support"))
        })?;
        if index >= size {
            return invalid("support index out of range");
        }
        Ok(match *self {
            Self::BernoulliVector { n } => Value::Bits((0..n).map(|i| (index >> i) & 1 == 1).collect()),
            Self::Categorical { k, sites } => {
                let mut rest = index;
                Value::Labels(
                    (0..sites)
                        .map(|_| {
                            let c = (rest % k as u128) as usize;
                            rest /= k as u128;
                            c
                        })
                        .collect(),
                )
            }
            Self::DiagonalGaussian { .. } => unreachable!(),
        })
    }

    /// Inverse of [`FamilyDescriptor::value_at`].
    pub fn index_of(&self, v: &Value) -> Result<u128> {
        self.check_value(v)?;
        Ok(match (*self, v) {
            (Self::BernoulliVector { .. }, Value::Bits(b)) => b
                .iter()
                .enumerate()
                .map(|(i, &x)| u128::from(x) << i)
                .sum(),
            (Self::Categorical { k, .. }, Value::Labels(l)) => {
                l.iter().rev().fold(0u128, |acc, &c| acc * k as u128 + c as u128)
            }
            _ => return invalid(format!("{self} has no enumerable support")),
        })
    }

    /// Every support point, in [`FamilyDescriptor::value_at`] order.
    pub fn enumerate(&self, cap: usize) -> Result<Vec<Value>> {
        let size = self.support_size().ok_or_else(|| {
            Error::InvalidInput(format!("{self} has no enumerable support"))
        })?;
        if size > cap as u128 {
            return Err(Error::SupportTooLarge { size, cap });
        }
        (0..size).map(|i| self.value_at(i)).collect()
    }
}

impl fmt::Display for FamilyDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::BernoulliVector { n } => write!(f, "bernoulli:{n}"),
            Self::Categorical { k, sites } => write!(f, "categorical:{k}x{sites}"),
            Self::DiagonalGaussian { n } => write!(f, "gaussian:{n}"),
        }
    }
}

impl FromStr for FamilyDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("cannot parse family descriptor `{s}`"));
        let (kind, dims) = s.trim().split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        match kind.trim() {
            "bernoulli" => Self::bernoulli(num(dims)?),
            "gaussian" => Self::gaussian(num(dims)?),
            "categorical" => {
                let (k, sites) = dims.split_once('x').ok_or_else(bad)?;
                Self::categorical(num(k)?, num(sites)?)
            }
            _ => Err(bad()),
        }
    }
}
