//! Learning scenarios and construction of their models.

use rand::Rng;

use crate::efcore::FamilyDescriptor;
use crate::error::{Error, Result};
use crate::netparam::{LadderEncoderMap, OutputAdapter, ParametricMap};

use super::models::{Block, Factor, FactorKind, ModelSet, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Only marginal samples `x ~ pi(x)`, `z ~ pi(z)`; no decoder prior.
    MarginalsOnly,
    /// Marginal samples plus complete pairs, decoder with its own prior.
    SemiSupervisedMixed,
    /// Only `x ~ pi(x)`; the encoder learns from decoder samples.
    Unsupervised,
    /// Latent layers `z0..zm`, ladder encoder sharing the decoder priors.
    Hierarchical,
    /// `p(s | x, z)`, `p(x | s, z)` and `q(z | x, s)` as three players.
    TripleGame,
}

/// How the decoder's latent prior is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Parametrized and trained with the decoder.
    Learned,
    /// Fixed at the family's reference member (uniform / standard normal).
    Fixed,
    /// Only available through samples `z ~ pi(z)`.
    Implicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    pub data: FamilyDescriptor,
    /// One family per latent layer (a single entry except for hierarchical models).
    pub latent: Vec<FamilyDescriptor>,
    pub prior: PriorKind,
    /// Number of classes `c` split off the first latent layer, `z0 = (l, c)`.
    pub classes: Option<usize>,
    /// Whether labelled pairs `(x, z0)` (or `(x, c)`) contribute utility terms.
    pub labelled: bool,
    /// Weight of the labelled encoder term; zero drops it.
    pub labelled_encoder_weight: f64,
    /// Segmentation family for the three-player game.
    pub segmentation: Option<FamilyDescriptor>,
    /// Gibbs sweeps used to draw `(x, s) ~ p(x, s | z)` in the three-player game.
    pub gibbs_sweeps: usize,
}

impl ScenarioOptions {
    pub fn new(data: FamilyDescriptor, latent: FamilyDescriptor) -> Self {
        Self {
            data,
            latent: vec![latent],
            prior: PriorKind::Learned,
            classes: None,
            labelled: false,
            labelled_encoder_weight: 1.0,
            segmentation: None,
            gibbs_sweeps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub variant: Variant,
    pub options: ScenarioOptions,
}

/// Hidden widths shared by every parametric map of a model set.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

impl Scenario {
    pub fn new(variant: Variant, options: ScenarioOptions) -> Result<Self> {
        let s = Self { variant, options };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.options;
        let cfg = |m: &str| Err(Error::Configuration(format!("{:?}: {m}", self.variant)));
        if o.latent.is_empty() {
            return cfg("at least one latent family is required");
        }
        if self.variant != Variant::Hierarchical {
            if o.latent.len() != 1 {
                return cfg("exactly one latent layer is supported");
            }
            if o.classes.is_some() {
                return cfg("class split requires the hierarchical variant");
            }
        }
        if o.labelled && !matches!(self.variant, Variant::Hierarchical) {
            return cfg("labelled (x, z0) terms belong to the hierarchical variant");
        }
        if o.labelled_encoder_weight < 0.0 || !o.labelled_encoder_weight.is_finite() {
            return cfg("labelled encoder weight must be finite and non-negative");
        }
        match self.variant {
            Variant::SemiSupervisedMixed | Variant::Hierarchical if o.prior == PriorKind::Implicit => {
                cfg("an explicit latent prior is required")
            }
            Variant::Hierarchical if o.latent.iter().any(|f| !f.is_discrete()) => {
                cfg("ladder encoders need discrete latent layers")
            }
            Variant::Hierarchical if o.latent.len() > 200 => cfg("too many latent layers"),
            Variant::TripleGame if o.segmentation.is_none() => cfg("a segmentation family is required"),
            Variant::TripleGame if o.gibbs_sweeps == 0 => cfg("gibbs_sweeps must be positive"),
            _ => Ok(()),
        }
    }

    pub fn players(&self) -> Vec<String> {
        match self.variant {
            Variant::TripleGame => vec!["seg".into(), "image".into(), "encoder".into()],
            _ => vec!["decoder".into(), "encoder".into()],
        }
    }

    /// Number of latent layers `m + 1`.
    pub fn layers(&self) -> usize {
        self.options.latent.len()
    }
}

fn adapter_for(f: FamilyDescriptor) -> OutputAdapter {
    if f.is_discrete() {
        OutputAdapter::Identity
    } else {
        OutputAdapter::GaussianHead
    }
}

fn mlp<R: Rng + ?Sized>(input: usize, hidden: &[usize], out: FamilyDescriptor, rng: &mut R) -> Result<ParametricMap> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(out.stat_dim());
    ParametricMap::glorot(sizes, adapter_for(out), rng)
}

fn prior_map(out: FamilyDescriptor) -> Result<ParametricMap> {
    ParametricMap::zeros(vec![0, out.stat_dim()], adapter_for(out))
}

/// Zeroes the first-layer weights reading input columns `cols`.
fn zero_input_columns(map: &mut ParametricMap, cols: std::ops::Range<usize>) {
    let (fan_in, fan_out) = (map.layer_sizes()[0], map.layer_sizes()[1]);
    let p = map.params_mut();
    for r in 0..fan_out {
        for c in cols.clone() {
            p[r * fan_in + c] = 0.0;
        }
    }
}

pub mod names {
    pub const DEC_X: &str = "dec.x";
    pub const PRIOR_C: &str = "prior.c";
    pub const ENC_C: &str = "enc.c";
    pub const SEG: &str = "seg";
    pub const IMG: &str = "img";

    pub fn prior(i: usize) -> String {
        format!("prior.z{i}")
    }

    pub fn enc(i: usize) -> String {
        format!("enc.z{i}")
    }
}

fn z(i: usize) -> Var {
    Var::Z(i as u8)
}

/// Builds randomly initialized models for a scenario.
pub fn build_models<R: Rng + ?Sized>(scenario: &Scenario, arch: &Architecture, rng: &mut R) -> Result<ModelSet> {
    scenario.validate()?;
    let o = &scenario.options;
    let mut m = ModelSet::new(scenario.players());
    let h = &arch.hidden;
    let data = o.data;
    m.declare(Var::X, data);
    m.declare(Var::XAlt, data);
    match scenario.variant {
        Variant::MarginalsOnly | Variant::SemiSupervisedMixed | Variant::Unsupervised => {
            let lat = o.latent[0];
            m.declare(z(0), lat);
            if scenario.variant != Variant::MarginalsOnly {
                add_prior(&mut m, &names::prior(0), z(0), lat, o.prior)?;
            }
            let b = m.add_block(names::DEC_X, Some(0), Block::Map(mlp(lat.input_dim(), h, data, rng)?));
            m.add_factor(Factor {
                name: names::DEC_X.into(),
                family: data,
                output: Var::X,
                inputs: vec![z(0)],
                kind: FactorKind::Map { block: b },
            })?;
            let b = m.add_block(&names::enc(0), Some(1), Block::Map(mlp(data.input_dim(), h, lat, rng)?));
            m.add_factor(Factor {
                name: names::enc(0),
                family: lat,
                output: z(0),
                inputs: vec![Var::X],
                kind: FactorKind::Map { block: b },
            })?;
        }
        Variant::Hierarchical => build_hierarchical(&mut m, o, h, rng)?,
        Variant::TripleGame => {
            let seg = o.segmentation.expect("validated");
            let lat = o.latent[0];
            m.declare(Var::S, seg);
            m.declare(Var::SAlt, seg);
            m.declare(z(0), lat);
            add_prior(&mut m, &names::prior(0), z(0), lat, PriorKind::Fixed)?;

            let mut p1 = mlp(data.input_dim() + lat.input_dim(), h, seg, rng)?;
            zero_input_columns(&mut p1, data.input_dim()..data.input_dim() + lat.input_dim());
            let b = m.add_block(names::SEG, Some(0), Block::Map(p1));
            m.add_factor(Factor {
                name: names::SEG.into(),
                family: seg,
                output: Var::S,
                inputs: vec![Var::X, z(0)],
                kind: FactorKind::Map { block: b },
            })?;

            let mut p2 = mlp(seg.input_dim() + lat.input_dim(), h, data, rng)?;
            zero_input_columns(&mut p2, seg.input_dim()..seg.input_dim() + lat.input_dim());
            let b = m.add_block(names::IMG, Some(1), Block::Map(p2));
            m.add_factor(Factor {
                name: names::IMG.into(),
                family: data,
                output: Var::X,
                inputs: vec![Var::S, z(0)],
                kind: FactorKind::Map { block: b },
            })?;

            let q = mlp(data.input_dim() + seg.input_dim(), h, lat, rng)?;
            let b = m.add_block(&names::enc(0), Some(2), Block::Map(q));
            m.add_factor(Factor {
                name: names::enc(0),
                family: lat,
                output: z(0),
                inputs: vec![Var::X, Var::S],
                kind: FactorKind::Map { block: b },
            })?;
        }
    }
    Ok(m)
}

fn add_prior(
    m: &mut ModelSet,
    name: &str,
    var: Var,
    fam: FamilyDescriptor,
    kind: PriorKind,
) -> Result<Option<usize>> {
    let fkind = match kind {
        PriorKind::Learned => FactorKind::Map { block: m.add_block(name, Some(0), Block::Map(prior_map(fam)?)) },
        PriorKind::Fixed => FactorKind::Fixed(fam.reference_params()),
        PriorKind::Implicit => return Ok(None),
    };
    Ok(Some(m.add_factor(Factor { name: name.into(), family: fam, output: var, inputs: vec![], kind: fkind })?))
}

fn build_hierarchical<R: Rng + ?Sized>(
    m: &mut ModelSet,
    o: &ScenarioOptions,
    h: &[usize],
    rng: &mut R,
) -> Result<()> {
    if h.is_empty() {
        return Err(Error::Configuration("ladder encoders need at least one hidden layer".into()));
    }
    let layers = o.latent.len();
    for (i, f) in o.latent.iter().enumerate() {
        m.declare(z(i), *f);
    }
    let class_fam = o.classes.map(|k| FamilyDescriptor::categorical(k, 1)).transpose()?;
    if let Some(cf) = class_fam {
        m.declare(Var::Class, cf);
    }

    let mut prior_ids = Vec::new();
    prior_ids.push(add_prior(m, &names::prior(0), z(0), o.latent[0], o.prior)?.expect("explicit prior"));
    let class_prior = match class_fam {
        Some(cf) => Some(m.add_factor(Factor {
            name: names::PRIOR_C.into(),
            family: cf,
            output: Var::Class,
            inputs: vec![],
            kind: FactorKind::Fixed(cf.reference_params()),
        })?),
        None => None,
    };
    for i in 1..layers {
        let mut inputs: Vec<Var> = (0..i).map(z).collect();
        if class_fam.is_some() {
            inputs.push(Var::Class);
        }
        let in_dim: usize = inputs.iter().map(|v| m.family(*v).unwrap().input_dim()).sum();
        let b = m.add_block(&names::prior(i), Some(0), Block::Map(mlp(in_dim, h, o.latent[i], rng)?));
        prior_ids.push(m.add_factor(Factor {
            name: names::prior(i),
            family: o.latent[i],
            output: z(i),
            inputs,
            kind: FactorKind::Map { block: b },
        })?);
    }
    let mut x_inputs = vec![z(layers - 1)];
    if layers == 1 && class_fam.is_some() {
        x_inputs.push(Var::Class);
    }
    let in_dim: usize = x_inputs.iter().map(|v| m.family(*v).unwrap().input_dim()).sum();
    let b = m.add_block(names::DEC_X, Some(0), Block::Map(mlp(in_dim, h, o.data, rng)?));
    m.add_factor(Factor {
        name: names::DEC_X.into(),
        family: o.data,
        output: Var::X,
        inputs: x_inputs,
        kind: FactorKind::Map { block: b },
    })?;

    let mut head_dims: Vec<usize> = o.latent.iter().map(|f| f.stat_dim()).collect();
    if let Some(cf) = class_fam {
        head_dims.push(cf.stat_dim());
    }
    let ladder = LadderEncoderMap::new(o.data.input_dim(), h, &head_dims, rng)?;
    let lb = m.add_block("enc.ladder", Some(1), Block::Ladder(ladder));
    for i in 0..layers {
        let prior = prior_ids[i];
        let mut inputs = vec![Var::X];
        inputs.extend(m.factors[prior].inputs.clone());
        m.add_factor(Factor {
            name: names::enc(i),
            family: o.latent[i],
            output: z(i),
            inputs,
            kind: FactorKind::Ladder { block: lb, head: i, prior },
        })?;
    }
    if let (Some(cf), Some(cp)) = (class_fam, class_prior) {
        m.add_factor(Factor {
            name: names::ENC_C.into(),
            family: cf,
            output: Var::Class,
            inputs: vec![Var::X],
            kind: FactorKind::Ladder { block: lb, head: layers, prior: cp },
        })?;
    }
    Ok(())
}
