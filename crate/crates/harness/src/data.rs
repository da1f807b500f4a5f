//! Dataset ingestion: IDX image files and synthetic generators.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use symvae::efcore::{FamilyDescriptor, Value};
use symvae::equilibrium::{EmpiricalData, Scenario, Stream, Variant};

use crate::config::{GridParams, MixtureParams};
use crate::error::{io_err, validation, HarnessError, Result};

/// Data records with optional class labels and segmentations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleStore {
    pub x: Vec<Value>,
    pub labels: Option<Vec<usize>>,
    pub segments: Option<Vec<Vec<usize>>>,
}

impl SampleStore {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// The first `n` records and the rest.
    pub fn split_at(&self, n: usize) -> (SampleStore, SampleStore) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| SampleStore {
            x: self.x[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r.clone()].to_vec()),
            segments: self.segments.as_ref().map(|s| s[r].to_vec()),
        };
        (part(0..n), part(n..self.len()))
    }
}

/// A decoded IDX file: dimensions and the unsigned-byte payload.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_LABELS: u32 = 0x0000_0801;
pub const IDX_IMAGES: u32 = 0x0000_0803;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or(HarnessError::Truncated { expected: at as u64 + 4, actual: bytes.len() as u64 })
    };
    let magic = word(0)?;
    if magic != IDX_LABELS && magic != IDX_IMAGES {
        return Err(HarnessError::Format {
            offset: 0,
            message: format!("magic {magic:#010x} is neither 0x00000801 nor 0x00000803"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let at = 4 + 4 * i;
        let d = word(at)? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| HarnessError::Format { offset: at as u64, message: "dimension product overflows".into() })?;
        dims.push(d);
    }
    let header = 4 + 4 * rank;
    let expected = header as u64 + count as u64;
    if (bytes.len() as u64) < expected {
        return Err(HarnessError::Truncated { expected, actual: bytes.len() as u64 });
    }
    Ok(IdxArray { dims, data: bytes[header..header + count].to_vec() })
}

fn read_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let arr = parse_idx(&bytes)?;
    if arr.dims.len() != (magic & 0xff) as usize {
        let what = if magic == IDX_IMAGES { "image" } else { "label" };
        return Err(HarnessError::Format { offset: 0, message: format!("{} is not an IDX {what} file", path.display()) });
    }
    Ok(arr)
}

/// Images flattened row-major. Bernoulli data sets a bit when the pixel
/// exceeds `threshold * 255`; Gaussian data scales pixels to `[0, 1]`.
pub fn images_from_idx(arr: &IdxArray, family: FamilyDescriptor, threshold: f64) -> Result<Vec<Value>> {
    let [n, rows, cols] = arr.dims[..] else {
        return Err(HarnessError::Format { offset: 0, message: "image files have three dimensions".into() });
    };
    let pixels = rows * cols;
    let cut = threshold * 255.0;
    match family {
        FamilyDescriptor::BernoulliVector { n: d } | FamilyDescriptor::DiagonalGaussian { n: d } if d != pixels => {
            validation("data", format!("images have {pixels} pixels, the data family has {d}"))
        }
        FamilyDescriptor::BernoulliVector { .. } => {
            Ok((0..n).map(|i| Value::Bits(arr.data[i * pixels..(i + 1) * pixels].iter().map(|&p| p as f64 > cut).collect())).collect())
        }
        FamilyDescriptor::DiagonalGaussian { .. } => Ok((0..n)
            .map(|i| Value::Reals(arr.data[i * pixels..(i + 1) * pixels].iter().map(|&p| p as f64 / 255.0).collect()))
            .collect()),
        FamilyDescriptor::Categorical { .. } => validation("data", "images need a bernoulli or gaussian data family"),
    }
}

pub fn load_idx(path: &Path, family: FamilyDescriptor, threshold: f64) -> Result<SampleStore> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return validation("threshold", format!("must lie in (0, 1], got {threshold}"));
    }
    let arr = read_idx(path, IDX_IMAGES)?;
    Ok(SampleStore { x: images_from_idx(&arr, family, threshold)?, ..Default::default() })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(read_idx(path, IDX_LABELS)?.data.into_iter().map(usize::from).collect())
}

fn mixture_mean(c: usize, dim: usize, separation: f64) -> Vec<f64> {
    // +-e_i scaled so that means on different axes are `separation` apart.
    let mut m = vec![0.0; dim];
    let s = separation / std::f64::consts::SQRT_2;
    m[c % dim] = if c < dim { s } else { -s };
    m
}

/// `n` draws from a `k`-component isotropic mixture with uniform weights.
pub fn synth_mixture<R: Rng + ?Sized>(p: &MixtureParams, n: usize, rng: &mut R) -> Result<SampleStore> {
    if p.components == 0 || p.dim == 0 || p.components > 2 * p.dim {
        return validation("components", "need 1 <= components <= 2 * dim");
    }
    if !(p.separation >= 0.0 && p.separation.is_finite()) {
        return validation("separation", "must be finite and non-negative");
    }
    let means: Vec<Vec<f64>> = (0..p.components).map(|c| mixture_mean(c, p.dim, p.separation)).collect();
    let mut x = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..p.components);
        x.push(Value::Reals(means[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect()));
        labels.push(c);
    }
    Ok(SampleStore { x, labels: Some(labels), segments: None })
}

pub fn mixture_means(p: &MixtureParams) -> Vec<Vec<f64>> {
    (0..p.components).map(|c| mixture_mean(c, p.dim, p.separation)).collect()
}

/// Intensity of each label, evenly spread over `[-1.5, 1.5]`.
pub fn grid_prototypes(labels: usize) -> Vec<f64> {
    if labels == 1 {
        return vec![0.0];
    }
    (0..labels).map(|l| -1.5 + 3.0 * l as f64 / (labels - 1) as f64).collect()
}

/// Blocky label fields `s` with images `x = prototype(s) + noise`.
pub fn synth_grid<R: Rng + ?Sized>(p: &GridParams, n: usize, rng: &mut R) -> Result<SampleStore> {
    if p.grid == 0 || p.labels == 0 || p.block == 0 {
        return validation("synthetic_grid", "grid, labels and block must be positive");
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return validation("noise", "must be finite and non-negative");
    }
    let g = p.grid;
    let nb = g.div_ceil(p.block);
    let protos = grid_prototypes(p.labels);
    let mut x = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let blocks: Vec<usize> = (0..nb * nb).map(|_| rng.random_range(0..p.labels)).collect();
        let s: Vec<usize> = (0..g * g).map(|i| blocks[(i / g / p.block) * nb + (i % g) / p.block]).collect();
        x.push(Value::Reals(s.iter().map(|&l| protos[l] + p.noise * rng.sample::<f64, _>(StandardNormal)).collect()));
        segments.push(s);
    }
    Ok(SampleStore { x, labels: None, segments: Some(segments) })
}

/// `n` draws from a random strictly positive law over the support of `family`.
pub fn synth_tabular<R: Rng + ?Sized>(family: FamilyDescriptor, n: usize, rng: &mut R) -> Result<SampleStore> {
    let support = family.enumerate(symvae::tabular_oracle::SUPPORT_CAP).map_err(|e| HarnessError::Validation {
        field: "data".into(),
        message: e.to_string(),
    })?;
    let w: Vec<f64> = support.iter().map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = w.iter().sum();
    let x = (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < w.len() && u >= w[i] {
                u -= w[i];
                i += 1;
            }
            support[i].clone()
        })
        .collect();
    Ok(SampleStore { x, ..Default::default() })
}

fn label_value(scenario: &Scenario, label: usize) -> Result<Value> {
    let o = &scenario.options;
    let k = match (o.classes, o.latent[0]) {
        (Some(c), _) if scenario.variant == Variant::Hierarchical => c,
        (_, FamilyDescriptor::Categorical { k, sites: 1 }) => k,
        _ => return validation("latent", "labels need a single-site categorical latent or class split"),
    };
    if label >= k {
        return validation("latent", format!("label {label} exceeds the {k} latent classes"));
    }
    Ok(Value::Labels(vec![label]))
}

/// Training streams for a scenario. The first `labelled_fraction` of the
/// records expose their labels to the labelled streams.
pub fn training_streams(scenario: &Scenario, train: &SampleStore, labelled_fraction: f64) -> Result<EmpiricalData> {
    let xs: Vec<Vec<Value>> = train.x.iter().map(|x| vec![x.clone()]).collect();
    let n_lab = (train.len() as f64 * labelled_fraction).round() as usize;
    let labelled = |labels: &[usize]| -> Result<Vec<Vec<Value>>> {
        train.x.iter().zip(labels).take(n_lab).map(|(x, &l)| Ok(vec![x.clone(), label_value(scenario, l)?])).collect()
    };
    let mut data = EmpiricalData::new().with(Stream::X, xs);
    let needs_z = scenario.variant == Variant::MarginalsOnly
        || scenario.options.prior == symvae::equilibrium::PriorKind::Implicit;
    match scenario.variant {
        Variant::TripleGame => {
            let segs = train.segments.as_ref().ok_or(HarnessError::Validation {
                field: "dataset".into(),
                message: "the three-player game needs segmented records".into(),
            })?;
            let rec = train.x.iter().zip(segs).map(|(x, s)| vec![x.clone(), Value::Labels(s.clone())]).collect();
            data = data.with(Stream::XS, rec);
        }
        Variant::Hierarchical if scenario.options.labelled => {
            let labels = train.labels.as_ref().ok_or(HarnessError::Validation {
                field: "labelled".into(),
                message: "labelled training needs a labelled dataset".into(),
            })?;
            data = data.with(Stream::Labelled, labelled(labels)?);
        }
        Variant::SemiSupervisedMixed => {
            let labels = train.labels.as_ref().ok_or(HarnessError::Validation {
                field: "dataset".into(),
                message: "semi-supervised training needs a labelled dataset".into(),
            })?;
            data = data.with(Stream::XZ, labelled(labels)?);
        }
        _ => {}
    }
    if needs_z || scenario.variant == Variant::SemiSupervisedMixed {
        let labels = train.labels.as_ref().ok_or(HarnessError::Validation {
            field: "dataset".into(),
            message: "latent samples need a labelled dataset".into(),
        })?;
        let zs = labels.iter().map(|&l| Ok(vec![label_value(scenario, l)?])).collect::<Result<_>>()?;
        data = data.with(Stream::Z, zs);
    }
    Ok(data)
}
