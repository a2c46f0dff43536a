use std::collections::BTreeSet;

use hymunet::data::{
    generate_synthetic, ingest_isic, read_dataset, resize_bilinear, save_mask, save_rgb, split_indices,
    synthetic_sample, write_dataset, ArtifactLevel, Sample, Split, SplitSpec, Transform,
};
use hymunet::mask::Mask;
use hymunet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp_sample(n: usize) -> Sample {
    let img: Vec<f64> = (0..3 * n * n).map(|i| (i % 97) as f64 / 96.0).collect();
    let mask = Mask::from_fn(n, n, |r, c| (r * 7 + c * 3) % 5 < 2);
    Sample::new("ramp", Tensor::new(vec![3, n, n], img).unwrap(), mask).unwrap()
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic(11, 3, 32, ArtifactLevel::Normal).unwrap();
    let b = generate_synthetic(11, 3, 32, ArtifactLevel::Normal).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(12, 3, 32, ArtifactLevel::Normal).unwrap();
    assert_ne!(a[0].mask, c[0].mask);
}

#[test]
fn foreground_fraction_in_range() {
    for s in generate_synthetic(3, 20, 64, ArtifactLevel::Heavy).unwrap() {
        let f = s.mask.count() as f64 / (64.0 * 64.0);
        assert!((0.05..=0.6).contains(&f), "{}: {f}", s.id);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn artifacts_leave_mask_alone() {
    for i in 0..5 {
        let clean = synthetic_sample(7, i, 32, ArtifactLevel::None).unwrap();
        let heavy = synthetic_sample(7, i, 32, ArtifactLevel::Heavy).unwrap();
        assert_eq!(clean.mask, heavy.mask);
        assert_ne!(clean.image, heavy.image);
    }
}

#[test]
fn bad_size_rejected() {
    assert!(synthetic_sample(0, 0, 48, ArtifactLevel::None).is_err());
    assert!(synthetic_sample(0, 0, 0, ArtifactLevel::None).is_err());
}

#[test]
fn identity_transform() {
    let s = ramp_sample(8);
    assert_eq!(Transform::default().apply(&s).unwrap(), s);
    let zero_flipped_twice = Transform { flip_h: false, flip_v: false, angle_deg: 0.0 };
    assert_eq!(zero_flipped_twice.apply(&s).unwrap(), s);
}

#[test]
fn double_flip_is_identity() {
    let s = ramp_sample(6);
    let t = Transform { flip_h: true, flip_v: true, angle_deg: 0.0 };
    assert_eq!(t.apply(&t.apply(&s).unwrap()).unwrap(), s);
    let h = Transform { flip_h: true, ..Default::default() };
    let once = h.apply(&s).unwrap();
    assert_eq!(once.mask.get(1, 0), s.mask.get(1, 5));
}

#[test]
fn right_angle_rotation_is_a_permutation() {
    let n = 5;
    let s = ramp_sample(n);
    let t = Transform { angle_deg: 90.0, ..Default::default() };
    let out = t.apply(&s).unwrap();
    // Source of output (r, c) under inverse rotation about the centre.
    let c0 = (n as f64 - 1.0) / 2.0;
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = (r as f64 - c0, c as f64 - c0);
            let (sy, sx) = ((c0 - dx) as usize, (c0 + dy) as usize);
            assert_eq!(out.mask.get(r, c), s.mask.get(sy, sx));
            for ch in 0..3 {
                assert_eq!(out.image.data()[ch * n * n + r * n + c], s.image.data()[ch * n * n + sy * n + sx]);
            }
        }
    }
    let four = (0..4).try_fold(s.clone(), |acc, _| t.apply(&acc)).unwrap();
    assert_eq!(four, s);
}

#[test]
fn rotation_fills_corners() {
    let s = Sample::new("w", Tensor::full(&[3, 8, 8], 0.4), Mask::from_fn(8, 8, |_, _| true)).unwrap();
    let out = Transform { angle_deg: 45.0, ..Default::default() }.apply(&s).unwrap();
    assert!(!out.mask.get(0, 0));
    assert!(out.mask.get(4, 4));
    // Mean fill of a constant image is the constant itself.
    assert!(out.image.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
}

#[test]
fn bilinear_upsample_by_hand() {
    // 4x4 -> 8x8, half-pixel centres: output o samples input (o + 0.5) / 2 - 0.5.
    let src: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let out = resize_bilinear(&src, 1, (4, 4), (8, 8));
    let coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(3);
        (i0, (i0 + 1).min(3), s - i0 as f64)
    };
    for r in 0..8 {
        let (y0, y1, fy) = coord(r);
        for c in 0..8 {
            let (x0, x1, fx) = coord(c);
            let v = |y: usize, x: usize| src[y * 4 + x];
            let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
            assert!((out[r * 8 + c] - want).abs() < 1e-12);
        }
    }
    assert_eq!(out[0], 0.0);
    assert_eq!(out[1], 0.25);
    assert_eq!(out[63], 15.0);
}

#[test]
fn split_sizes() {
    let [a, b, c] = split_indices(2594, &SplitSpec::default()).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (2075, 259, 260));
    let [a, b, c] = split_indices(10, &SplitSpec::default()).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
}

proptest! {
    #[test]
    fn split_partitions(n in 0usize..300, seed in 0u64..100) {
        let spec = SplitSpec { seed, ..Default::default() };
        let parts = split_indices(n, &spec).unwrap();
        let all: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), n);
        prop_assert_eq!(split_indices(n, &spec).unwrap(), parts);
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(5, 4, 32, ArtifactLevel::Normal).unwrap();
    write_dataset(dir.path(), &[(Split::Train, &samples[..3]), (Split::Test, &samples[3..])]).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back[&Split::Train].len(), 3);
    assert!(!back.contains_key(&Split::Val));
    for (a, b) in samples.iter().zip(back.values().flatten()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        // 8-bit quantisation.
        let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn ingest_pairs_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, masks) = (dir.path().join("img"), dir.path().join("msk"));
    std::fs::create_dir_all(&imgs).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    let s = synthetic_sample(1, 0, 64, ArtifactLevel::None).unwrap();
    save_rgb(&imgs.join("ISIC_001.png"), &s.image).unwrap();
    save_mask(&masks.join("ISIC_001_segmentation.png"), &s.mask).unwrap();
    let got = ingest_isic(&imgs, &masks, 32).unwrap();
    assert_eq!(got.samples.len(), 1);
    assert_eq!(got.samples[0].id, "ISIC_001");
    assert_eq!(got.samples[0].image.shape(), &[3, 32, 32]);
    let want = s.mask.count() as f64 / 4.0;
    assert!((got.samples[0].mask.count() as f64 - want).abs() < 0.15 * want);

    save_rgb(&imgs.join("ISIC_002.png"), &s.image).unwrap();
    let err = ingest_isic(&imgs, &masks, 32).unwrap_err().to_string();
    assert!(err.contains("ISIC_002"), "{err}");
}

#[test]
fn ingest_rejects_gray_masks() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = ramp_sample(32);
    save_rgb(&a.path().join("a.png"), &s.image).unwrap();
    let gray = vec![0.5; 32 * 32];
    hymunet::data::save_gray(&b.path().join("a_segmentation.png"), &gray, 32, 32).unwrap();
    let err = ingest_isic(a.path(), b.path(), 32).unwrap_err().to_string();
    assert!(err.contains("not binary"), "{err}");
}

#[test]
fn empty_dirs_warn() {
    let dir = tempfile::tempdir().unwrap();
    let got = ingest_isic(dir.path(), dir.path(), 32).unwrap();
    assert!(got.samples.is_empty());
    assert_eq!(got.warnings.len(), 1);
}

#[test]
fn augment_keeps_shapes() {
    let s = synthetic_sample(2, 0, 32, ArtifactLevel::Normal).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = hymunet::data::augment(&s, &mut rng).unwrap();
        assert_eq!(a.image.shape(), s.image.shape());
    }
}
