//! Small multi-layer perceptrons emitting natural parameters, with exact
//! reverse-accumulation gradients.
//!
//! Parameters live in one flat vector, packed layer by layer: the weight
//! matrix (row-major, `out x in`) followed by the bias.

use rand::Rng;

use crate::efcore::NaturalParams;
use crate::error::{invalid, Result};

/// Transform applied to the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputAdapter {
    Identity,
    /// `tanh`, used for feature backbones.
    Tanh,
    /// Raw output `(mean_1..mean_n, log_sd_1..log_sd_n)` mapped to Gaussian
    /// natural parameters `(mean / sd^2, -1 / (2 sd^2))`.
    GaussianHead,
}

const LOG_SD_BOUND: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMap {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    adapter: OutputAdapter,
}

fn packed_len(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ParametricMap {
    pub fn zeros(layer_sizes: Vec<usize>, adapter: OutputAdapter) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return invalid("a parametric map needs at least an input and an output width");
        }
        if layer_sizes[1..].iter().any(|&w| w == 0) {
            return invalid("layer widths after the input must be positive");
        }
        if adapter == OutputAdapter::GaussianHead && layer_sizes.last().unwrap() % 2 != 0 {
            return invalid("gaussian head needs an even output width");
        }
        let params = vec![0.0; packed_len(&layer_sizes)];
        Ok(Self { layer_sizes, params, adapter })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        layer_sizes: Vec<usize>,
        adapter: OutputAdapter,
        rng: &mut R,
    ) -> Result<Self> {
        let mut map = Self::zeros(layer_sizes, adapter)?;
        let mut offset = 0;
        for w in map.layer_sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut map.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(map)
    }

    pub fn from_params(layer_sizes: Vec<usize>, adapter: OutputAdapter, params: Vec<f64>) -> Result<Self> {
        let mut map = Self::zeros(layer_sizes, adapter)?;
        if params.len() != map.params.len() {
            return invalid(format!(
                "parameter vector of length {} for layers {:?} (expected {})",
                params.len(),
                map.layer_sizes,
                map.params.len()
            ));
        }
        map.params = params;
        Ok(map)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn adapter(&self) -> OutputAdapter {
        self.adapter
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Zeroes the weights and bias of the last layer.
    pub fn zero_output_layer(&mut self) {
        let n = self.layer_sizes.len();
        let (i, o) = (self.layer_sizes[n - 2], self.layer_sizes[n - 1]);
        let len = self.params.len();
        self.params[len - (i * o + o)..].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Pre-adapter output plus the activations of every layer (input first).
    fn forward_trace(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.input_dim() {
            return invalid(format!(
                "map input of length {} (expected {})",
                input.len(),
                self.input_dim()
            ));
        }
        let last = self.layer_sizes.len() - 2;
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let a = acts.last().unwrap();
            let mut z: Vec<f64> = bias.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &weights[r * fan_in..(r + 1) * fan_in];
                *zr += row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
            }
            if l < last || self.adapter == OutputAdapter::Tanh {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(acts)
    }

    fn adapt(&self, raw: &[f64]) -> Vec<f64> {
        match self.adapter {
            OutputAdapter::Identity | OutputAdapter::Tanh => raw.to_vec(),
            OutputAdapter::GaussianHead => {
                let n = raw.len() / 2;
                let mut out = vec![0.0; raw.len()];
                for i in 0..n {
                    let prec = (-2.0 * raw[n + i].clamp(-LOG_SD_BOUND, LOG_SD_BOUND)).exp();
                    out[i] = raw[i] * prec;
                    out[n + i] = -0.5 * prec;
                }
                out
            }
        }
    }

    /// Evaluates the map on `input`.
    pub fn forward(&self, input: &[f64]) -> Result<NaturalParams> {
        let acts = self.forward_trace(input)?;
        Ok(NaturalParams(self.adapt(acts.last().unwrap())))
    }

    /// Vector-Jacobian product: gradient of `<forward(input), cotangent>` with
    /// respect to the parameters (accumulated into `param_grad`) and the
    /// returned input gradient.
    pub fn vjp_into(&self, input: &[f64], cotangent: &[f64], param_grad: &mut [f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return invalid(format!(
                "cotangent of length {} (expected {})",
                cotangent.len(),
                self.output_dim()
            ));
        }
        if param_grad.len() != self.params.len() {
            return invalid("gradient buffer has the wrong length");
        }
        let acts = self.forward_trace(input)?;
        let raw = acts.last().unwrap();
        let mut delta: Vec<f64> = match self.adapter {
            OutputAdapter::Identity => cotangent.to_vec(),
            OutputAdapter::Tanh => cotangent.iter().zip(raw).map(|(c, a)| c * (1.0 - a * a)).collect(),
            OutputAdapter::GaussianHead => {
                let n = raw.len() / 2;
                let mut d = vec![0.0; raw.len()];
                for i in 0..n {
                    let s = raw[n + i];
                    let prec = (-2.0 * s.clamp(-LOG_SD_BOUND, LOG_SD_BOUND)).exp();
                    d[i] = cotangent[i] * prec;
                    if s.abs() < LOG_SD_BOUND {
                        d[n + i] = -2.0 * raw[i] * prec * cotangent[i] + prec * cotangent[n + i];
                    }
                }
                d
            }
        };
        let mut offset = self.params.len();
        let n_layers = self.layer_sizes.len() - 1;
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            offset -= fan_in * fan_out + fan_out;
            let a = &acts[l];
            let (gw, gb) = param_grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for (r, &d) in delta.iter().enumerate() {
                gb[r] += d;
                for (g, x) in gw[r * fan_in..(r + 1) * fan_in].iter_mut().zip(a) {
                    *g += d * x;
                }
            }
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let mut back = vec![0.0; fan_in];
            for (r, &d) in delta.iter().enumerate() {
                for (b, w) in back.iter_mut().zip(&weights[r * fan_in..(r + 1) * fan_in]) {
                    *b += d * w;
                }
            }
            if l > 0 {
                back.iter_mut().zip(a).for_each(|(b, x)| *b *= 1.0 - x * x);
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Gradient of `<forward(input), cotangent>` with respect to the parameters.
    pub fn grad_params(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.vjp_into(input, cotangent, &mut g)?;
        Ok(g)
    }

    /// Largest normwise relative deviation between [`Self::grad_params`] and
    /// central differences of `<forward(input), c>` for a random cotangent `c`.
    pub fn fd_check<R: Rng + ?Sized>(&self, input: &[f64], eps: f64, rng: &mut R) -> Result<f64> {
        if !(eps > 0.0 && eps <= 1e-3) {
            return invalid(format!("finite-difference step {eps} outside (0, 1e-3]"));
        }
        let cot: Vec<f64> = (0..self.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = self.grad_params(input, &cot)?;
        let objective = |m: &ParametricMap| -> Result<f64> {
            Ok(m.forward(input)?.0.iter().zip(&cot).map(|(a, b)| a * b).sum())
        };
        let mut probe = self.clone();
        let mut max_dev: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..self.params.len() {
            let orig = probe.params[i];
            probe.params[i] = orig + eps;
            let up = objective(&probe)?;
            probe.params[i] = orig - eps;
            let dn = objective(&probe)?;
            probe.params[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            max_dev = max_dev.max((fd - analytic[i]).abs());
            scale = scale.max(fd.abs()).max(analytic[i].abs());
        }
        Ok(if scale == 0.0 { 0.0 } else { max_dev / scale })
    }
}

/// Encoder sharing the decoder's conditional priors: the logits of latent
/// variable `i` are `prior_logits_i + head_i(backbone(x))`, i.e. the encoder
/// density is the renormalized product of the decoder prior and a factorized
/// data-dependent term.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderEncoderMap {
    pub backbone: ParametricMap,
    pub heads: Vec<ParametricMap>,
}

impl LadderEncoderMap {
    /// Glorot backbone with `tanh` features and zero-initialized linear heads,
    /// so the encoder starts out equal to the decoder prior.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        head_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return invalid("ladder backbone needs at least one feature layer");
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        let backbone = ParametricMap::glorot(sizes, OutputAdapter::Tanh, rng)?;
        let feat = *hidden.last().unwrap();
        let heads = head_dims
            .iter()
            .map(|&d| ParametricMap::zeros(vec![feat, d], OutputAdapter::Identity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, heads })
    }

    pub fn param_len(&self) -> usize {
        self.backbone.param_len() + self.heads.iter().map(|h| h.param_len()).sum::<usize>()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backbone.forward(x)?.0)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.heads.len() {
            return invalid(format!("ladder layer {layer} out of range (have {})", self.heads.len()));
        }
        Ok(())
    }

    /// Encoder natural parameters for `layer`: decoder prior logits plus the
    /// head output.
    pub fn encoder_logits(&self, decoder_prior_logits: &[f64], x: &[f64], layer: usize) -> Result<NaturalParams> {
        self.check_layer(layer)?;
        let head = &self.heads[layer];
        if decoder_prior_logits.len() != head.output_dim() {
            return invalid("decoder prior logits do not match the head width");
        }
        let h = head.forward(&self.features(x)?)?;
        Ok(NaturalParams(decoder_prior_logits.iter().zip(&h.0).map(|(a, b)| a + b).collect()))
    }

    /// Accumulates the parameter gradient of `<encoder_logits(.., layer), cot>`
    /// into `grad`, laid out as backbone followed by every head in order.
    pub fn accumulate_grad(&self, x: &[f64], layer: usize, cot: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_layer(layer)?;
        if grad.len() != self.param_len() {
            return invalid("ladder gradient buffer has the wrong length");
        }
        let feats = self.features(x)?;
        let (gb, mut rest) = grad.split_at_mut(self.backbone.param_len());
        for (i, head) in self.heads.iter().enumerate() {
            let (gh, tail) = rest.split_at_mut(head.param_len());
            rest = tail;
            if i == layer {
                let feat_cot = head.vjp_into(&feats, cot, gh)?;
                self.backbone.vjp_into(x, &feat_cot, gb)?;
            }
        }
        Ok(())
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.backbone.params());
        for h in &self.heads {
            out.extend_from_slice(h.params());
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_len() {
            return invalid("ladder parameter vector has the wrong length");
        }
        let (b, mut rest) = src.split_at(self.backbone.param_len());
        self.backbone.params_mut().copy_from_slice(b);
        for h in &mut self.heads {
            let (p, tail) = rest.split_at(h.param_len());
            h.params_mut().copy_from_slice(p);
            rest = tail;
        }
        Ok(())
    }
}
