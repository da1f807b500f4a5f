//! The lifted log-linear game on a finite product space `X x Z`:
//! `p_u(x,z) = pi(z) exp(<phi(x,z),u> - A(u))` and
//! `q_v(x,z) = pi(x) exp(<psi(x,z),v> - B(v))`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::efcore::log_sum_exp;
use crate::error::{invalid, Error, Result};

use super::{TabularDist, SUPPORT_CAP};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularGameSpec {
    pub nx: usize,
    pub nz: usize,
    pub pi_x: Vec<f64>,
    pub pi_z: Vec<f64>,
    pub dim_u: usize,
    pub dim_v: usize,
    /// Row `x * nz + z` holds `phi(x, z)`.
    pub phi: Vec<f64>,
    /// Row `x * nz + z` holds `psi(x, z)`.
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularParams {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl TabularParams {
    pub fn zeros(spec: &TabularGameSpec) -> Self {
        Self { u: vec![0.0; spec.dim_u], v: vec![0.0; spec.dim_v] }
    }
}

fn check_prob(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return invalid(format!("{name} must be non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return invalid(format!("{name} sums to {total}, not 1"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl TabularGameSpec {
    pub fn new(
        pi_x: Vec<f64>,
        pi_z: Vec<f64>,
        dim_u: usize,
        phi: Vec<f64>,
        dim_v: usize,
        psi: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self { nx: pi_x.len(), nz: pi_z.len(), pi_x, pi_z, dim_u, dim_v, phi, psi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn states(&self) -> usize {
        self.nx * self.nz
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nx as u128 * self.nz as u128;
        if n == 0 {
            return invalid("empty support");
        }
        if n > SUPPORT_CAP as u128 {
            return Err(Error::SupportTooLarge { size: n, cap: SUPPORT_CAP });
        }
        check_prob("pi_x", &self.pi_x)?;
        check_prob("pi_z", &self.pi_z)?;
        if self.phi.len() != self.states() * self.dim_u || self.psi.len() != self.states() * self.dim_v {
            return invalid("statistic matrices do not match the support size");
        }
        if self.phi.iter().chain(&self.psi).any(|x| !x.is_finite()) {
            return invalid("statistic matrices must be finite");
        }
        Ok(())
    }

    pub fn phi_row(&self, s: usize) -> &[f64] {
        &self.phi[s * self.dim_u..(s + 1) * self.dim_u]
    }

    pub fn psi_row(&self, s: usize) -> &[f64] {
        &self.psi[s * self.dim_v..(s + 1) * self.dim_v]
    }

    fn base_p(&self) -> Vec<f64> {
        (0..self.states()).map(|s| self.pi_z[s % self.nz]).collect()
    }

    fn base_q(&self) -> Vec<f64> {
        (0..self.states()).map(|s| self.pi_x[s / self.nz]).collect()
    }

    /// Structured text form; f64 values use their shortest round-trip repr.
    pub fn to_text(&self) -> String {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::from("tabular-game\n");
        let _ = writeln!(s, "nx {}\nnz {}\ndim_u {}\ndim_v {}", self.nx, self.nz, self.dim_u, self.dim_v);
        let _ = writeln!(s, "pi_x {}\npi_z {}", row(&self.pi_x), row(&self.pi_z));
        s.push_str("phi\n");
        for st in 0..self.states() {
            let _ = writeln!(s, "{}", row(self.phi_row(st)));
        }
        s.push_str("psi\n");
        for st in 0..self.states() {
            let _ = writeln!(s, "{}", row(self.psi_row(st)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::InvalidInput(format!("missing {what}")));
        if next("header")? != "tabular-game" {
            return invalid("not a tabular-game document");
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
                .ok_or_else(|| Error::InvalidInput(format!("expected `{key}`, found `{line}`")))
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::InvalidInput(format!("bad count `{s}`: {e}")));
        let reals = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad number `{t}`: {e}"))))
                .collect()
        };
        let nx = num(field(next("nx")?, "nx")?)?;
        let nz = num(field(next("nz")?, "nz")?)?;
        let dim_u = num(field(next("dim_u")?, "dim_u")?)?;
        let dim_v = num(field(next("dim_v")?, "dim_v")?)?;
        let pi_x = reals(field(next("pi_x")?, "pi_x")?)?;
        let pi_z = reals(field(next("pi_z")?, "pi_z")?)?;
        if pi_x.len() != nx || pi_z.len() != nz {
            return invalid("base measure lengths disagree with nx / nz");
        }
        field(next("phi")?, "phi")?;
        let mut phi = Vec::new();
        for _ in 0..nx * nz {
            phi.extend(reals(next("phi row")?)?);
        }
        field(next("psi")?, "psi")?;
        let mut psi = Vec::new();
        for _ in 0..nx * nz {
            psi.extend(reals(next("psi row")?)?);
        }
        Self::new(pi_x, pi_z, dim_u, phi, dim_v, psi)
    }
}

fn log_linear(base: &[f64], table: &[f64], dim: usize, w: &[f64]) -> (Vec<f64>, f64) {
    let lw: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(s, b)| if *b > 0.0 { b.ln() + dot(&table[s * dim..(s + 1) * dim], w) } else { f64::NEG_INFINITY })
        .collect();
    let a = log_sum_exp(&lw);
    (lw, a)
}

fn normalized(lw: &[f64], a: f64) -> TabularDist {
    TabularDist { probs: lw.iter().map(|l| (l - a).exp()).collect() }
}

/// The two joints realized by the parameters.
pub fn realize(spec: &TabularGameSpec, params: &TabularParams) -> Result<(TabularDist, TabularDist)> {
    if params.u.len() != spec.dim_u || params.v.len() != spec.dim_v {
        return invalid("parameter dimensions do not match the spec");
    }
    if params.u.iter().chain(&params.v).any(|x| !x.is_finite()) {
        return invalid("parameters must be finite");
    }
    let (lp, a) = log_linear(&spec.base_p(), &spec.phi, spec.dim_u, &params.u);
    let (lq, b) = log_linear(&spec.base_q(), &spec.psi, spec.dim_v, &params.v);
    Ok((normalized(&lp, a), normalized(&lq, b)))
}

fn cross_log(a: &TabularDist, b: &TabularDist) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.probs.iter().zip(&b.probs) {
        if *pa > 0.0 {
            total += if *pb > 0.0 { pa * pb.ln() } else { f64::NEG_INFINITY };
        }
    }
    total
}

/// `(L_p, L_q) = (E_q log p_u, E_p log q_v)` by full summation.
pub fn exact_utilities(spec: &TabularGameSpec, params: &TabularParams) -> Result<(f64, f64)> {
    let (p, q) = realize(spec, params)?;
    Ok((cross_log(&q, &p), cross_log(&p, &q)))
}

fn gradients_of(spec: &TabularGameSpec, p: &TabularDist, q: &TabularDist) -> (Vec<f64>, Vec<f64>) {
    let (qp, pp) = (q.expect(&spec.phi, spec.dim_u), p.expect(&spec.phi, spec.dim_u));
    let (ps, qs) = (p.expect(&spec.psi, spec.dim_v), q.expect(&spec.psi, spec.dim_v));
    (
        qp.iter().zip(&pp).map(|(a, b)| a - b).collect(),
        ps.iter().zip(&qs).map(|(a, b)| a - b).collect(),
    )
}

/// `grad_u = E_q phi - E_p phi`, `grad_v = E_p psi - E_q psi`.
pub fn exact_gradients(spec: &TabularGameSpec, params: &TabularParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let (p, q) = realize(spec, params)?;
    Ok(gradients_of(spec, &p, &q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Initial step size; `None` uses `0.5 / L` per player, with `L` the
    /// largest squared row norm of that player's statistic matrix.
    pub step: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub mode: SolveMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { step: None, tol: 1e-10, max_iters: 200_000, mode: SolveMode::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    /// `(L_p, L_q)` at the start of every iteration.
    pub utilities: Vec<(f64, f64)>,
    /// Number of parameter updates performed.
    pub iterations: usize,
    pub final_step_u: f64,
    pub final_step_v: f64,
}

fn lipschitz(table: &[f64], dim: usize) -> f64 {
    if dim == 0 {
        return 1.0;
    }
    table.chunks(dim).map(|r| dot(r, r)).fold(0.0, f64::max).max(1e-12)
}

/// Gradient step on one player's own parameters, halving `step` (for good)
/// while the player's utility would decrease.
fn own_step(w: &[f64], g: &[f64], step: &mut f64, current: f64, utility: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    for _ in 0..60 {
        let cand: Vec<f64> = w.iter().zip(g).map(|(a, d)| a + *step * d).collect();
        let val = utility(&cand)?;
        if val >= current - 1e-13 * (1.0 + current.abs()) {
            return Ok(cand);
        }
        *step *= 0.5;
    }
    Ok(w.to_vec())
}

/// Runs the gradient game until both gradients are below `tol` in the max
/// norm. Fails with the utility trace when `max_iters` updates do not suffice.
pub fn solve_equilibrium(
    spec: &TabularGameSpec,
    init: &TabularParams,
    opts: &SolveOptions,
) -> Result<(TabularParams, SolveTrace)> {
    spec.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    if let Some(s) = opts.step {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
    }
    let mut step_u = opts.step.unwrap_or(0.5 / lipschitz(&spec.phi, spec.dim_u));
    let mut step_v = opts.step.unwrap_or(0.5 / lipschitz(&spec.psi, spec.dim_v));
    let mut params = init.clone();
    let mut trace = Vec::new();
    let lp_at = |u: &[f64], v: &[f64]| exact_utilities(spec, &TabularParams { u: u.to_vec(), v: v.to_vec() }).map(|r| r.0);
    let lq_at = |u: &[f64], v: &[f64]| exact_utilities(spec, &TabularParams { u: u.to_vec(), v: v.to_vec() }).map(|r| r.1);
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iters {
        let (p, q) = realize(spec, &params)?;
        let (gu, gv) = gradients_of(spec, &p, &q);
        let (lp, lq) = (cross_log(&q, &p), cross_log(&p, &q));
        trace.push((lp, lq));
        residual = max_abs(&gu).max(max_abs(&gv));
        if residual < opts.tol {
            return Ok((params, SolveTrace { utilities: trace, iterations: it, final_step_u: step_u, final_step_v: step_v }));
        }
        if it == opts.max_iters {
            break;
        }
        match opts.mode {
            SolveMode::Parallel => {
                let v = params.v.clone();
                let u_new = own_step(&params.u, &gu, &mut step_u, lp, |u| lp_at(u, &v))?;
                let u = params.u.clone();
                let v_new = own_step(&params.v, &gv, &mut step_v, lq, |v| lq_at(&u, v))?;
                params = TabularParams { u: u_new, v: v_new };
            }
            SolveMode::Sequential => {
                let v = params.v.clone();
                params.u = own_step(&params.u, &gu, &mut step_u, lp, |u| lp_at(u, &v))?;
                let (p, q) = realize(spec, &params)?;
                let (_, gv) = gradients_of(spec, &p, &q);
                let lq = cross_log(&p, &q);
                let u = params.u.clone();
                params.v = own_step(&params.v, &gv, &mut step_v, lq, |v| lq_at(&u, v))?;
            }
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iters, residual, trace })
}

/// Solution of one moment-constrained relative-entropy minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolveReport {
    pub solution: TabularDist,
    /// Multipliers of the moment constraints (the recovered natural parameters).
    pub gamma: Vec<f64>,
    /// Multiplier of the normalization constraint, `1 - A(gamma)`.
    pub lambda: f64,
    /// Max-norm violation of the moment constraints.
    pub constraint_residual: f64,
    /// `sum s log(s / base)` at the solution.
    pub entropy_objective: f64,
    pub iterations: usize,
    /// Whether a singular Newton system forced a regularized step.
    pub regularized: bool,
}

const DUAL_MAX_ITERS: usize = 500;
const DUAL_PARAM_LIMIT: f64 = 1e3;

/// Minimizes `sum s log(s / base)` subject to `E_s[table] = target` by damped
/// Newton on the convex dual `A(w) - <w, target>`.
fn maxent(base: &[f64], table: &[f64], dim: usize, target: &[f64]) -> Result<DualSolveReport> {
    if target.len() != dim || target.iter().any(|t| !t.is_finite()) {
        return invalid("target moments have the wrong length or are not finite");
    }
    // Targets on or beyond the range of a statistic cannot be met by any
    // distribution with full support.
    for j in 0..dim {
        let (lo, hi) = base
            .iter()
            .enumerate()
            .filter(|(_, b)| **b > 0.0)
            .map(|(s, _)| table[s * dim + j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        let t = target[j];
        if lo < hi && (t <= lo + slack || t >= hi - slack) || lo == hi && (t - lo).abs() > slack {
            return Err(Error::Infeasible(format!("moment {j} = {t} lies outside the interior of [{lo}, {hi}]")));
        }
    }
    let mut w = vec![0.0; dim];
    let objective = |w: &[f64]| {
        let (_, a) = log_linear(base, table, dim, w);
        a - dot(w, target)
    };
    let mut regularized = false;
    let mut iterations = 0;
    loop {
        let (lw, a) = log_linear(base, table, dim, &w);
        let s = normalized(&lw, a);
        let mean = s.expect(table, dim);
        let g: Vec<f64> = mean.iter().zip(target).map(|(m, t)| m - t).collect();
        let residual = max_abs(&g);
        if residual < 1e-13 || iterations >= DUAL_MAX_ITERS {
            if residual >= 1e-8 {
                return Err(Error::Infeasible(format!(
                    "dual Newton stalled with residual {residual:e} after {iterations} iterations"
                )));
            }
            let entropy_objective = s
                .probs
                .iter()
                .zip(base)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, b)| p * (p / b).ln())
                .sum();
            return Ok(DualSolveReport {
                solution: s,
                lambda: 1.0 - a,
                gamma: w,
                constraint_residual: residual,
                entropy_objective,
                iterations,
                regularized,
            });
        }
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for (st, p) in s.probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let r = &table[st * dim..(st + 1) * dim];
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in 0..dim {
                    h[(i, j)] += p * di * (r[j] - mean[j]);
                }
            }
        }
        let rhs = -DVector::from_column_slice(&g);
        let scale = (0..dim).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let mut dir = h.clone().cholesky().map(|c| c.solve(&rhs));
        let mut mu = 1e-12 * scale;
        while dir.is_none() && mu < 1e6 * scale {
            regularized = true;
            let hr = &h + DMatrix::<f64>::identity(dim, dim) * mu;
            dir = hr.cholesky().map(|c| c.solve(&rhs));
            mu *= 10.0;
        }
        let dir = dir.ok_or_else(|| Error::Infeasible("Newton system could not be regularized".into()))?;
        let f0 = objective(&w);
        let slope = dot(&g, dir.as_slice());
        let mut t = 1.0;
        let mut next = w.clone();
        for _ in 0..60 {
            next = w.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if objective(&next) <= f0 + 1e-4 * t * slope + 1e-15 * f0.abs() {
                break;
            }
            t *= 0.5;
        }
        w = next;
        iterations += 1;
        if max_abs(&w) > DUAL_PARAM_LIMIT {
            return Err(Error::Infeasible(format!(
                "dual variables diverge (|w| > {DUAL_PARAM_LIMIT:e}); the target is on or near the boundary"
            )));
        }
    }
}

/// Solves both moment-matching entropy problems: `p` with base `pi(z)` and
/// `E_p phi = target_p`, and `q` with base `pi(x)` and `E_q psi = target_q`.
pub fn dual_solve(
    spec: &TabularGameSpec,
    target_moments_p: &[f64],
    target_moments_q: &[f64],
) -> Result<(DualSolveReport, DualSolveReport)> {
    spec.validate()?;
    Ok((
        maxent(&spec.base_p(), &spec.phi, spec.dim_u, target_moments_p)?,
        maxent(&spec.base_q(), &spec.psi, spec.dim_v, target_moments_q)?,
    ))
}
