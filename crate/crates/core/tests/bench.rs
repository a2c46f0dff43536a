use hymunet::bench::{ablate, bench_scan, naive_attention, Variant};
use hymunet::data::{generate_synthetic, ArtifactLevel};
use hymunet::model::{ModelConfig, ModelState};
use hymunet::train::{evaluate, train, TrainConfig};
use hymunet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Softmax attention by the textbook formula, no max shift.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for i in 0..len {
        let w: Vec<f64> = (0..len)
            .map(|j| ((0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt()).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for j in 0..len {
            for c in 0..d {
                out[i * d + c] += w[j] / z * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (len, d) in [(1, 1), (5, 3), (33, 8)] {
        let t = |rng: &mut ChaCha8Rng| Tensor::rand_uniform(&[len, d], -2.0, 2.0, rng).into_data();
        let (q, k, v) = (t(&mut rng), t(&mut rng), t(&mut rng));
        let got = naive_attention(&q, &k, &v, len, d);
        let want = attention_oracle(&q, &k, &v, len, d);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn bench_report_shape() {
    let rep = bench_scan(&[16, 32, 64, 128, 256], 5, 2, 2, 0).unwrap();
    assert_eq!(rep.records.len(), 10);
    assert!(rep.records.iter().all(|r| r.reps >= 5 && r.min_secs > 0.0 && r.min_secs <= r.mean_secs));
    let text = rep.to_text();
    assert!(text.contains("# slope scan"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 11);
}

fn tiny() -> ModelConfig {
    ModelConfig {
        stage_widths: [4, 4, 8, 8],
        blocks_per_stage: [1, 1, 1, 1],
        state_dim: 2,
        input_size: 32,
        ..Default::default()
    }
}

#[test]
fn ablation_cardinality_and_degenerate_case() {
    let data = generate_synthetic(1, 6, 32, ArtifactLevel::Heavy).unwrap();
    let (tr, va, te) = (&data[..2], &data[2..4], &data[4..]);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..Default::default()
    };
    let mut runs = 0;
    let rep = ablate(&tiny(), &cfg, &Variant::ALL, &[0, 1, 2], [tr, va, te], |_, _, _| runs += 1).unwrap();
    assert_eq!(runs, 12);
    assert_eq!(rep.rows.len(), 4);
    assert!(rep.rows.iter().all(|r| r.runs.len() == 3));
    assert_eq!(rep.to_table().lines().filter(|l| Variant::ALL.iter().any(|v| l.starts_with(v.name()))).count(), 4);

    // One variant, one seed: a plain train + evaluate.
    let one = ablate(&tiny(), &cfg, &[Variant::Full], &[7], [tr, va, te], |_, _, _| {}).unwrap();
    let init = ModelState::init(tiny(), 7).unwrap();
    let out = train(&init, tr, va, &TrainConfig { seed: 7, ..cfg }, |_| {}).unwrap();
    let direct = evaluate(&out.best, te, 0.5).unwrap();
    assert_eq!(one.rows[0].runs[0], direct);
    assert!(ablate(&tiny(), &cfg, &[], &[0], [tr, va, te], |_, _, _| {}).is_err());
}
