use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symvae::efcore::{FamilyDescriptor, Value};
use symvae_cli::config::{GridParams, MixtureParams};
use symvae_cli::data::{
    grid_prototypes, load_idx, load_idx_labels, mixture_means, parse_idx, synth_grid, synth_mixture, synth_tabular,
};
use symvae_cli::HarnessError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

const PIXELS: [u8; 8] = [0, 128, 255, 127, 10, 200, 129, 128];

fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
    let f = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(f.path(), bytes).unwrap();
    f
}

#[test]
fn hand_built_idx_images_binarize_exactly() {
    // Two 2x2 images; the cut is 0.5 * 255 = 127.5.
    let f = write_tmp(&idx_bytes(0x803, &[2, 2, 2], &PIXELS));
    let store = load_idx(f.path(), FamilyDescriptor::bernoulli(4).unwrap(), 0.5).unwrap();
    assert_eq!(
        store.x,
        vec![Value::Bits(vec![false, true, true, false]), Value::Bits(vec![false, true, true, true])]
    );
    let store = load_idx(f.path(), FamilyDescriptor::gaussian(4).unwrap(), 0.5).unwrap();
    let Value::Reals(r) = &store.x[1] else { panic!() };
    assert_eq!(r, &vec![10.0 / 255.0, 200.0 / 255.0, 129.0 / 255.0, 128.0 / 255.0]);
}

#[test]
fn threshold_one_gives_all_zero_bits() {
    let f = write_tmp(&idx_bytes(0x803, &[2, 2, 2], &PIXELS));
    let store = load_idx(f.path(), FamilyDescriptor::bernoulli(4).unwrap(), 1.0).unwrap();
    assert!(store.x.iter().all(|v| *v == Value::Bits(vec![false; 4])));
}

#[test]
fn truncated_payload_names_both_lengths() {
    let bytes = idx_bytes(0x803, &[2, 2, 2], &PIXELS[..5]);
    match parse_idx(&bytes).unwrap_err() {
        HarnessError::Truncated { expected, actual } => assert_eq!((expected, actual), (24, 21)),
        e => panic!("{e}"),
    }
    let e = parse_idx(&bytes).unwrap_err().to_string();
    assert!(e.contains("24") && e.contains("21"), "{e}");
    assert!(matches!(parse_idx(&bytes[..9]), Err(HarnessError::Truncated { expected: 12, actual: 9 })));
}

#[test]
fn wrong_magic_is_reported_at_offset_zero() {
    let bytes = idx_bytes(0x802, &[2, 2], &[0; 4]);
    assert!(matches!(parse_idx(&bytes), Err(HarnessError::Format { offset: 0, .. })));
}

#[test]
fn dimension_overflow_is_reported_at_its_offset() {
    // (2^32 - 1)^2 still fits in 64 bits; the third dimension overflows.
    let bytes = idx_bytes(0x803, &[u32::MAX, u32::MAX, u32::MAX], &[]);
    assert!(matches!(parse_idx(&bytes), Err(HarnessError::Format { offset: 12, .. })));
}

#[test]
fn label_files_and_kind_checks() {
    let f = write_tmp(&idx_bytes(0x801, &[3], &[7, 0, 9]));
    assert_eq!(load_idx_labels(f.path()).unwrap(), vec![7, 0, 9]);
    assert!(load_idx(f.path(), FamilyDescriptor::bernoulli(4).unwrap(), 0.5).is_err());
    let img = write_tmp(&idx_bytes(0x803, &[2, 2, 2], &PIXELS));
    assert!(load_idx_labels(img.path()).is_err());
    let e = load_idx(img.path(), FamilyDescriptor::bernoulli(5).unwrap(), 0.5).unwrap_err();
    assert!(matches!(e, HarnessError::Validation { .. }));
    let e = load_idx(std::path::Path::new("/no/such.idx"), FamilyDescriptor::bernoulli(4).unwrap(), 0.5).unwrap_err();
    assert!(e.to_string().contains("/no/such.idx"));
}

fn mixture(components: usize, dim: usize, separation: f64) -> MixtureParams {
    MixtureParams { components, dim, separation, n: 0 }
}

#[test]
fn single_component_labels_are_zero() {
    let s = synth_mixture(&mixture(1, 3, 5.0), 200, &mut rng(1)).unwrap();
    assert!(s.labels.unwrap().iter().all(|&l| l == 0));
}

#[test]
fn means_are_separation_apart() {
    let p = mixture(6, 3, 4.0);
    let m = mixture_means(&p);
    for a in 0..6 {
        for b in 0..6 {
            if a != b {
                let d: f64 = m[a].iter().zip(&m[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 4.0 - 1e-12, "{a} {b}: {d}");
            }
        }
    }
}

#[test]
fn far_apart_components_are_perfectly_classified() {
    // Means 20 sigma apart: a nearest-mean error needs a 10 sigma excursion.
    let p = mixture(4, 5, 20.0);
    let means = mixture_means(&p);
    let s = synth_mixture(&p, 10_000, &mut rng(2)).unwrap();
    let labels = s.labels.unwrap();
    for (x, &l) in s.x.iter().zip(&labels) {
        let Value::Reals(x) = x else { panic!() };
        let nearest = (0..4)
            .min_by(|&a, &b| {
                let d = |c: usize| x.iter().zip(&means[c]).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(nearest, l);
    }
}

#[test]
fn generators_are_deterministic_per_seed() {
    let p = mixture(3, 4, 3.0);
    assert_eq!(synth_mixture(&p, 50, &mut rng(9)).unwrap(), synth_mixture(&p, 50, &mut rng(9)).unwrap());
    assert_ne!(synth_mixture(&p, 50, &mut rng(9)).unwrap(), synth_mixture(&p, 50, &mut rng(10)).unwrap());
    let g = GridParams { grid: 5, labels: 3, block: 2, noise: 0.3, n: 0 };
    assert_eq!(synth_grid(&g, 20, &mut rng(4)).unwrap(), synth_grid(&g, 20, &mut rng(4)).unwrap());
    let f = FamilyDescriptor::categorical(5, 1).unwrap();
    assert_eq!(synth_tabular(f, 30, &mut rng(4)).unwrap(), synth_tabular(f, 30, &mut rng(4)).unwrap());
}

#[test]
fn noiseless_grid_images_determine_the_labels() {
    let g = GridParams { grid: 6, labels: 4, block: 2, noise: 0.0, n: 0 };
    let protos = grid_prototypes(4);
    let s = synth_grid(&g, 100, &mut rng(5)).unwrap();
    for (x, seg) in s.x.iter().zip(s.segments.as_ref().unwrap()) {
        let Value::Reals(x) = x else { panic!() };
        for (v, &l) in x.iter().zip(seg) {
            let decoded = protos.iter().position(|p| p == v).unwrap();
            assert_eq!(decoded, l);
        }
        // Labels are constant on 2x2 patches.
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(seg[i * 6 + j], seg[(i / 2 * 2) * 6 + j / 2 * 2]);
            }
        }
    }
}

#[test]
fn single_label_grid_is_constant() {
    let g = GridParams { grid: 4, labels: 1, block: 2, noise: 0.5, n: 0 };
    let s = synth_grid(&g, 20, &mut rng(6)).unwrap();
    assert!(s.segments.unwrap().iter().flatten().all(|&l| l == 0));
}

#[test]
fn grid_label_marginals_are_uniform_at_every_position() {
    let (k, n) = (3usize, 10_000usize);
    let g = GridParams { grid: 5, labels: k, block: 2, noise: 1.0, n: 0 };
    let s = synth_grid(&g, n, &mut rng(7)).unwrap();
    let segs = s.segments.unwrap();
    let p = 1.0 / k as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for pos in 0..25 {
        for l in 0..k {
            let c = segs.iter().filter(|s| s[pos] == l).count() as f64;
            assert!((c - n as f64 * p).abs() < 4.0 * sd, "position {pos} label {l}: {c}");
        }
    }
}

#[test]
fn tabular_draws_cover_the_support() {
    let f = FamilyDescriptor::categorical(4, 1).unwrap();
    let s = synth_tabular(f, 2000, &mut rng(8)).unwrap();
    for k in 0..4 {
        assert!(s.x.contains(&Value::Labels(vec![k])));
    }
    assert!(synth_tabular(FamilyDescriptor::gaussian(2).unwrap(), 5, &mut rng(8)).is_err());
}

#[test]
fn invalid_generator_parameters_are_rejected() {
    assert!(synth_mixture(&mixture(7, 3, 1.0), 5, &mut rng(0)).is_err());
    assert!(synth_mixture(&mixture(2, 3, f64::NAN), 5, &mut rng(0)).is_err());
    assert!(synth_grid(&GridParams { grid: 0, labels: 2, block: 1, noise: 0.1, n: 0 }, 5, &mut rng(0)).is_err());
    assert!(synth_grid(&GridParams { grid: 3, labels: 2, block: 1, noise: -1.0, n: 0 }, 5, &mut rng(0)).is_err());
}
