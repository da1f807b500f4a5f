//! Parameter blocks, conditional factors and variable assignments.

use std::collections::BTreeMap;

use rand::Rng;

use crate::efcore::{FamilyDescriptor, NaturalParams, Value};
use crate::error::{invalid, Error, Result};
use crate::netparam::{LadderEncoderMap, ParametricMap};

/// Variables appearing in the games. `XAlt`/`SAlt` hold the re-sampled copies
/// used by the completion terms of the three-player game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    X,
    S,
    XAlt,
    SAlt,
    Class,
    Z(u8),
}

impl Var {
    fn slot(self) -> usize {
        match self {
            Var::X => 0,
            Var::S => 1,
            Var::XAlt => 2,
            Var::SAlt => 3,
            Var::Class => 4,
            Var::Z(i) => 5 + i as usize,
        }
    }

    pub fn name(self) -> String {
        match self {
            Var::X => "x".into(),
            Var::S => "s".into(),
            Var::XAlt => "x_alt".into(),
            Var::SAlt => "s_alt".into(),
            Var::Class => "c".into(),
            Var::Z(i) => format!("z{i}"),
        }
    }
}

/// A (partial) assignment of values to variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    slots: Vec<Option<Value>>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, var: Var) -> Option<&Value> {
        self.slots.get(var.slot()).and_then(|v| v.as_ref())
    }

    pub fn get_mut(&mut self, var: Var) -> Option<&mut Value> {
        self.slots.get_mut(var.slot()).and_then(|v| v.as_mut())
    }

    pub fn set(&mut self, var: Var, value: Value) {
        let s = var.slot();
        if self.slots.len() <= s {
            self.slots.resize(s + 1, None);
        }
        self.slots[s] = Some(value);
    }

    pub fn require(&self, var: Var) -> Result<&Value> {
        self.get(var)
            .ok_or_else(|| Error::InvalidInput(format!("variable {} is unassigned", var.name())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Map(ParametricMap),
    Ladder(LadderEncoderMap),
}

impl Block {
    pub fn param_len(&self) -> usize {
        match self {
            Block::Map(m) => m.param_len(),
            Block::Ladder(l) => l.param_len(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Block::Map(m) => out.extend_from_slice(m.params()),
            Block::Ladder(l) => l.write_params(out),
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            Block::Map(m) => {
                if src.len() != m.param_len() {
                    return invalid("block parameter vector has the wrong length");
                }
                m.params_mut().copy_from_slice(src);
                Ok(())
            }
            Block::Ladder(l) => l.read_params(src),
        }
    }

    /// The named parametric maps making up this block, for checkpoints.
    pub fn maps(&self) -> Vec<(String, &ParametricMap)> {
        match self {
            Block::Map(m) => vec![(String::new(), m)],
            Block::Ladder(l) => {
                let mut v = vec![("backbone".to_string(), &l.backbone)];
                v.extend(l.heads.iter().enumerate().map(|(i, h)| (format!("head{i}"), h)));
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    /// Index of the player owning these parameters; `None` for frozen blocks.
    pub owner: Option<usize>,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Natural parameters produced by a [`Block::Map`].
    Map { block: usize },
    /// Fixed natural parameters (e.g. a uniform prior).
    Fixed(NaturalParams),
    /// Ladder encoder head: prior factor logits plus the head output. The
    /// factor's first input is the data variable, the rest feed the prior.
    Ladder { block: usize, head: usize, prior: usize },
}

/// A conditional density `output | inputs` of a fixed family.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub family: FamilyDescriptor,
    pub output: Var,
    pub inputs: Vec<Var>,
    pub kind: FactorKind,
}

/// One use of a factor with a concrete variable binding.
#[derive(Debug, Clone, PartialEq)]
pub struct Use {
    pub factor: usize,
    pub output: Var,
    pub inputs: Vec<Var>,
}

impl Use {
    /// Replaces `from` by `to` in the output and input bindings.
    pub fn rebind(mut self, from: Var, to: Var) -> Self {
        if self.output == from {
            self.output = to;
        }
        for v in &mut self.inputs {
            if *v == from {
                *v = to;
            }
        }
        self
    }
}

/// Every model of a game: parameter blocks, factors over them, the family of
/// every variable and the player names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub players: Vec<String>,
    pub blocks: Vec<ParamBlock>,
    pub factors: Vec<Factor>,
    pub families: BTreeMap<Var, FamilyDescriptor>,
}

impl ModelSet {
    pub fn new(players: Vec<String>) -> Self {
        Self { players, blocks: Vec::new(), factors: Vec::new(), families: BTreeMap::new() }
    }

    pub fn declare(&mut self, var: Var, family: FamilyDescriptor) {
        self.families.insert(var, family);
    }

    pub fn add_block(&mut self, name: &str, owner: Option<usize>, block: Block) -> usize {
        self.blocks.push(ParamBlock { name: name.into(), owner, block });
        self.blocks.len() - 1
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize> {
        let fam = self.family(factor.output)?;
        if fam != factor.family {
            return invalid(format!("factor {} emits {} but {} is {fam}", factor.name, factor.family, factor.output.name()));
        }
        let in_dim: usize = factor
            .inputs
            .iter()
            .map(|v| self.family(*v).map(|f| f.input_dim()))
            .sum::<Result<usize>>()?;
        match &factor.kind {
            FactorKind::Map { block } => match &self.blocks[*block].block {
                Block::Map(m) => {
                    if m.input_dim() != in_dim || m.output_dim() != fam.stat_dim() {
                        return invalid(format!(
                            "factor {}: map shape {:?} does not fit input {in_dim} / output {}",
                            factor.name,
                            m.layer_sizes(),
                            fam.stat_dim()
                        ));
                    }
                }
                Block::Ladder(_) => return invalid("map factor bound to a ladder block"),
            },
            FactorKind::Fixed(eta) => fam.check_params(eta)?,
            FactorKind::Ladder { prior, .. } => {
                if !fam.is_discrete() {
                    return invalid("ladder factors need a discrete family");
                }
                if self.factors[*prior].family != fam {
                    return invalid("ladder prior has a different family");
                }
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn family(&self, var: Var) -> Result<FamilyDescriptor> {
        self.families
            .get(&var)
            .copied()
            .ok_or_else(|| Error::Configuration(format!("variable {} has no family", var.name())))
    }

    pub fn factor_id(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// A use of the named factor with its default binding.
    pub fn use_of(&self, name: &str) -> Result<Use> {
        let id = self
            .factor_id(name)
            .ok_or_else(|| Error::Configuration(format!("no factor named `{name}`")))?;
        let f = &self.factors[id];
        Ok(Use { factor: id, output: f.output, inputs: f.inputs.clone() })
    }

    /// Owner of the parameters that a factor's gradient flows into.
    pub fn factor_owner(&self, factor: usize) -> Option<usize> {
        match self.factors[factor].kind {
            FactorKind::Map { block } | FactorKind::Ladder { block, .. } => self.blocks[block].owner,
            FactorKind::Fixed(_) => None,
        }
    }

    fn encode(&self, vars: &[Var], asg: &Assignment) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &v in vars {
            self.family(v)?.encode_input(asg.require(v)?, &mut out);
        }
        Ok(out)
    }

    fn natural_for(&self, factor: usize, inputs: &[Var], asg: &Assignment) -> Result<NaturalParams> {
        let f = &self.factors[factor];
        match &f.kind {
            FactorKind::Map { block } => match &self.blocks[*block].block {
                Block::Map(m) => m.forward(&self.encode(inputs, asg)?),
                Block::Ladder(_) => unreachable!(),
            },
            FactorKind::Fixed(eta) => Ok(eta.clone()),
            FactorKind::Ladder { block, head, prior } => {
                let Block::Ladder(l) = &self.blocks[*block].block else { unreachable!() };
                let prior_eta = self.natural_for(*prior, &inputs[1..], asg)?;
                l.encoder_logits(&prior_eta.0, &self.encode(&inputs[..1], asg)?, *head)
            }
        }
    }

    pub fn natural_params(&self, u: &Use, asg: &Assignment) -> Result<NaturalParams> {
        self.natural_for(u.factor, &u.inputs, asg)
    }

    pub fn log_density(&self, u: &Use, asg: &Assignment) -> Result<f64> {
        let eta = self.natural_params(u, asg)?;
        self.factors[u.factor].family.log_density(&eta, asg.require(u.output)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, u: &Use, asg: &Assignment, rng: &mut R) -> Result<Value> {
        let eta = self.natural_params(u, asg)?;
        self.factors[u.factor].family.sample(&eta, rng)
    }

    /// Adds `d/dparams log p(output | inputs)` into the gradient buffer of the
    /// owning block. Returns the log density. Frozen factors only score.
    pub fn accumulate_log_density_grad(&self, u: &Use, asg: &Assignment, grads: &mut [Vec<f64>]) -> Result<f64> {
        let fam = self.factors[u.factor].family;
        let eta = self.natural_params(u, asg)?;
        let value = asg.require(u.output)?;
        let ld = fam.log_density(&eta, value)?;
        let stats = fam.suff_stats(value)?;
        let mean = fam.mean_params(&eta)?;
        let cot: Vec<f64> = stats.iter().zip(&mean).map(|(s, m)| s - m).collect();
        self.accumulate_eta_cotangent(u, asg, &cot, grads)?;
        Ok(ld)
    }

    /// Back-propagates a cotangent on the factor's natural parameters into
    /// its block's gradient buffer.
    pub fn accumulate_eta_cotangent(&self, u: &Use, asg: &Assignment, cot: &[f64], grads: &mut [Vec<f64>]) -> Result<()> {
        match &self.factors[u.factor].kind {
            FactorKind::Map { block } => {
                let Block::Map(m) = &self.blocks[*block].block else { unreachable!() };
                m.vjp_into(&self.encode(&u.inputs, asg)?, cot, &mut grads[*block])?;
            }
            FactorKind::Fixed(_) => {}
            FactorKind::Ladder { block, head, .. } => {
                let Block::Ladder(l) = &self.blocks[*block].block else { unreachable!() };
                l.accumulate_grad(&self.encode(&u.inputs[..1], asg)?, *head, cot, &mut grads[*block])?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| vec![0.0; b.block.param_len()]).collect()
    }

    pub fn player_blocks(&self, player: usize) -> impl Iterator<Item = usize> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.owner == Some(player))
            .map(|(i, _)| i)
    }

    pub fn player_param_len(&self, player: usize) -> usize {
        self.player_blocks(player).map(|b| self.blocks[b].block.param_len()).sum()
    }

    pub fn player_params(&self, player: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.player_param_len(player));
        for b in self.player_blocks(player) {
            self.blocks[b].block.write_params(&mut out);
        }
        out
    }

    pub fn set_player_params(&mut self, player: usize, src: &[f64]) -> Result<()> {
        if src.len() != self.player_param_len(player) {
            return invalid("player parameter vector has the wrong length");
        }
        let ids: Vec<usize> = self.player_blocks(player).collect();
        let mut offset = 0;
        for b in ids {
            let len = self.blocks[b].block.param_len();
            self.blocks[b].block.read_params(&src[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    /// Concatenates the per-block gradients owned by `player`.
    pub fn flatten_player_grad(&self, player: usize, grads: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.player_param_len(player));
        for b in self.player_blocks(player) {
            out.extend_from_slice(&grads[b]);
        }
        out
    }

    /// `params += alpha * direction` for one player.
    pub fn ascend(&mut self, player: usize, direction: &[f64], alpha: f64) -> Result<()> {
        let mut p = self.player_params(player);
        if p.len() != direction.len() {
            return invalid("update direction has the wrong length");
        }
        for (a, d) in p.iter_mut().zip(direction) {
            *a += alpha * d;
        }
        self.set_player_params(player, &p)
    }
}
