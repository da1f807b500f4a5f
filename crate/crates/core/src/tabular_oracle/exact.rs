//! Exact interpretation of utility plans by enumerating every draw.

use crate::efcore::Value;
use crate::equilibrium::{bind_record, Assignment, Batch, Draw, ModelSet, PlayerEstimate, PlayerPlan, PlayerTotals, Term, TermSums, Use, Var};
use crate::error::{Error, Result};

use super::SUPPORT_CAP;

/// Cap on the number of joint completions enumerated for one record.
const LEAF_CAP: usize = 1 << 22;

enum Op<'a> {
    Bind(&'a [Var]),
    Sample(&'a Use),
    Reference(Var),
}

fn flatten(draws: &[Draw]) -> Vec<Op<'_>> {
    let mut ops = Vec::new();
    for d in draws {
        match d {
            Draw::Data { vars, .. } => ops.push(Op::Bind(vars)),
            Draw::Sample(u) => ops.push(Op::Sample(u)),
            Draw::Gibbs { init, stages, sweeps } => {
                ops.push(Op::Reference(*init));
                for _ in 0..*sweeps {
                    ops.extend(stages.iter().map(Op::Sample));
                }
            }
        }
    }
    ops
}

fn walk<F>(
    models: &ModelSet,
    ops: &[Op<'_>],
    record: Option<&[Value]>,
    asg: &mut Assignment,
    weight: f64,
    leaves: &mut usize,
    leaf: &mut F,
) -> Result<()>
where
    F: FnMut(&Assignment, f64) -> Result<()>,
{
    let Some((op, rest)) = ops.split_first() else {
        *leaves += 1;
        if *leaves > LEAF_CAP {
            return Err(Error::SupportTooLarge { size: *leaves as u128, cap: LEAF_CAP });
        }
        return leaf(asg, weight);
    };
    let (var, fam, eta) = match op {
        Op::Bind(vars) => {
            bind_record(vars, record.expect("data term without record"), asg)?;
            return walk(models, rest, record, asg, weight, leaves, leaf);
        }
        Op::Sample(u) => {
            let fam = models.factors[u.factor].family;
            (u.output, fam, models.natural_params(u, asg)?)
        }
        Op::Reference(v) => {
            let fam = models.family(*v)?;
            (*v, fam, fam.reference_params())
        }
    };
    for value in fam.enumerate(SUPPORT_CAP)? {
        let p = fam.log_density(&eta, &value)?.exp();
        if p == 0.0 {
            continue;
        }
        asg.set(var, value);
        walk(models, rest, record, asg, weight * p, leaves, leaf)?;
    }
    Ok(())
}

/// Every completion of a term for one record, with its probability.
pub fn enumerate_term(models: &ModelSet, term: &Term, record: Option<&[Value]>) -> Result<Vec<(Assignment, f64)>> {
    let ops = flatten(&term.draws);
    let mut out = Vec::new();
    let mut leaves = 0;
    walk(models, &ops, record, &mut Assignment::new(), 1.0, &mut leaves, &mut |a, w| {
        out.push((a.clone(), w));
        Ok(())
    })?;
    Ok(out)
}

/// Exact utility and own-parameter gradient of a plan, with completions
/// drawn from `draw_models` and log-densities scored by `score_models`.
/// The two coincide in training; keeping them apart lets the gradient be
/// checked against finite differences of [`exact_plan_utility`].
pub fn exact_player_estimate_split(
    draw_models: &ModelSet,
    score_models: &ModelSet,
    plan: &PlayerPlan,
    batch: &Batch,
) -> Result<PlayerEstimate> {
    let player = plan.player;
    let mut totals = PlayerTotals::new(score_models);
    for term in &plan.terms {
        let ops = flatten(&term.draws);
        let records: Vec<Option<&[Value]>> = match term.stream() {
            Some(s) => batch.records(s).iter().map(|r| Some(r.as_slice())).collect(),
            None => vec![None],
        };
        if records.is_empty() {
            continue;
        }
        let mut sums = TermSums::new(score_models);
        for record in &records {
            let mut leaves = 0;
            walk(draw_models, &ops, *record, &mut Assignment::new(), 1.0, &mut leaves, &mut |asg, w| {
                for u in &term.scores {
                    let fam = score_models.factors[u.factor].family;
                    let eta = score_models.natural_params(u, asg)?;
                    let value = asg.require(u.output)?;
                    sums.log_density += w * fam.log_density(&eta, value)?;
                    if score_models.factor_owner(u.factor) == Some(player) {
                        let stats = fam.suff_stats(value)?;
                        let mean = fam.mean_params(&eta)?;
                        let cot: Vec<f64> = stats.iter().zip(&mean).map(|(s, m)| w * (s - m)).collect();
                        score_models.accumulate_eta_cotangent(u, asg, &cot, &mut sums.grads)?;
                    }
                }
                Ok(())
            })?;
        }
        totals.fold(score_models, player, &term.id, term.weight, records.len(), &sums)?;
    }
    Ok(totals.finish(score_models, player))
}

/// Exact utility and gradient of a player's plan at the given models.
pub fn exact_player_estimate(models: &ModelSet, plan: &PlayerPlan, batch: &Batch) -> Result<PlayerEstimate> {
    exact_player_estimate_split(models, models, plan, batch)
}

/// Exact utility with separate draw and score models.
pub fn exact_plan_utility(draw_models: &ModelSet, score_models: &ModelSet, plan: &PlayerPlan, batch: &Batch) -> Result<f64> {
    exact_player_estimate_split(draw_models, score_models, plan, batch).map(|e| e.utility)
}
