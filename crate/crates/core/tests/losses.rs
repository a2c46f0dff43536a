use hymunet::losses::{bce_loss, dice_loss, edge_band, edge_loss, total_loss, LossWeights};
use hymunet::mask::Mask;
use hymunet::tensor::grad_check;
use hymunet::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(y_hat: &Tensor, y: &Tensor, f: impl Fn(&mut Graph, hymunet::Var, &Tensor) -> hymunet::Result<hymunet::Var>) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(y_hat.clone());
    let v = f(&mut g, p, y).unwrap();
    g.value(v).item()
}

fn random_pair(b: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Tensor::rand_uniform(&[b, 1, h, w], 0.01, 0.99, &mut rng);
    let y: Vec<f64> = (0..b * h * w).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (p, Tensor::new(vec![b, 1, h, w], y).unwrap())
}

/// Morphology by explicit neighbourhood scan.
fn band_oracle(m: &Mask, r: usize) -> Mask {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let r = r as i64;
    Mask::from_fn(m.height(), m.width(), |y, x| {
        let mut any = false;
        let mut all = true;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy < 0 || xx < 0 || yy >= h || xx >= w {
                    all = false;
                } else {
                    let v = m.get(yy as usize, xx as usize);
                    any |= v;
                    all &= v;
                }
            }
        }
        any && !all
    })
}

#[test]
fn band_examples() {
    assert!(edge_band(&Mask::new(6, 6), 2).is_empty());
    let full = Mask::from_fn(7, 8, |_, _| true);
    let band = edge_band(&full, 2);
    let frame = Mask::from_fn(7, 8, |r, c| r < 2 || c < 2 || r >= 5 || c >= 6);
    assert_eq!(band, frame);
    let dot = Mask::from_fn(5, 5, |r, c| (r, c) == (2, 2));
    assert_eq!(edge_band(&dot, 1), Mask::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c)));
}

proptest! {
    #[test]
    fn band_matches_oracle(h in 1usize..14, w in 1usize..14, r in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = rng.gen_range(0.2..0.9);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let m = Mask::from_bits(h, w, bits).unwrap();
        prop_assert_eq!(edge_band(&m, r), band_oracle(&m, r));
    }

    #[test]
    fn dice_is_permutation_invariant(seed in 0u64..500) {
        let (p, y) = random_pair(1, 4, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffle = |t: &Tensor| Tensor::new(t.shape().to_vec(), perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        let d = |a: &Tensor, b: &Tensor| scalar(a, b, |g, p, t| dice_loss(g, p, t, 1e-6));
        prop_assert!((d(&p, &y) - d(&shuffle(&p), &shuffle(&y))).abs() < 1e-14);
    }

    #[test]
    fn dice_never_increases_when_foreground_rises(seed in 0u64..500) {
        let (p, y) = random_pair(1, 4, 4, seed);
        let Some(k) = (0..16).find(|&i| y.data()[i] == 1.0) else { return Ok(()); };
        let d = |a: &Tensor| scalar(a, &y, |g, p, t| dice_loss(g, p, t, 1e-6));
        let mut up = p.clone();
        up.data_mut()[k] = (up.data()[k] + 1e-4).min(1.0);
        prop_assert!(d(&up) <= d(&p) + 1e-15);
    }
}

#[test]
fn edge_loss_depends_on_placement() {
    // Same multiset of values, different arrangement relative to the band.
    let mut y = vec![0.0; 36];
    y[14] = 1.0;
    let y = Tensor::new(vec![1, 1, 6, 6], y).unwrap();
    let mut p: Vec<f64> = (0..36).map(|i| 0.05 + i as f64 / 40.0).collect();
    let e1 = scalar(&Tensor::new(vec![1, 1, 6, 6], p.clone()).unwrap(), &y, |g, p, t| edge_loss(g, p, t, 1, 1.0));
    p.reverse();
    let e2 = scalar(&Tensor::new(vec![1, 1, 6, 6], p).unwrap(), &y, |g, p, t| edge_loss(g, p, t, 1, 1.0));
    assert!((e1 - e2).abs() > 1e-3);
}

#[test]
fn bce_matches_direct_sum() {
    let p = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.2, 0.6, 0.35]).unwrap();
    let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.35f64.ln()) / 4.0;
    assert!((scalar(&p, &y, bce_loss) - want).abs() < 1e-15);
}

#[test]
fn worked_total() {
    // Four pixels, y = [1,1,0,0], prediction 0.5 everywhere.
    let p = Tensor::full(&[1, 1, 2, 2], 0.5);
    let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let w = LossWeights::default();
    let mut g = Graph::new();
    let pv = g.constant(p);
    let parts = total_loss(&mut g, pv, &y, &w).unwrap();
    let (d, b, e) = (g.value(parts.dice).item(), g.value(parts.bce).item(), g.value(parts.edge).item());
    assert!((d - (1.0 - (2.0 + 1e-6) / (3.0 + 1e-6))).abs() < 1e-15);
    assert!((b - std::f64::consts::LN_2).abs() < 1e-15);
    // Radius 2 covers the whole 2x2 image: every pixel is in the band.
    assert!((e - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g.value(parts.total).item(), 1.0 * d + 0.5 * b + 0.5 * e);

    let dice_only = LossWeights { bce: 0.0, edge: 0.0, ..w };
    let mut g2 = Graph::new();
    let pv = g2.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    let parts = total_loss(&mut g2, pv, &y, &dice_only).unwrap();
    assert_eq!(g2.value(parts.total).item(), d);
}

#[test]
fn perfect_prediction_is_nearly_zero() {
    let y = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let mut g = Graph::new();
    let pv = g.constant(y.clone());
    let parts = total_loss(&mut g, pv, &y, &LossWeights::default()).unwrap();
    let t = g.value(parts.total).item();
    assert!(t > 0.0 && t < 2e-7, "{t}");
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(dice_loss(&mut g, p, &Tensor::zeros(&[1, 1, 2, 3]), 1e-6).is_err());
    assert!(bce_loss(&mut g, p, &Tensor::zeros(&[1, 1, 3, 2])).is_err());
}

#[test]
fn loss_gradients() {
    for seed in 0..5 {
        let (p, y) = random_pair(2, 5, 5, seed);
        let w = LossWeights { edge_radius: 1, ..Default::default() };
        let err = grad_check(
            |g, v| Ok(total_loss(g, v[0], &y, &w)?.total),
            &[p],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn dice_gradient_through_sigmoid() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let err = grad_check(
        |g, v| {
            let wx = g.mul(v[0], v[1])?;
            let s = g.sigmoid(wx)?;
            dice_loss(g, s, &y, 1e-6)
        },
        &[Tensor::full(&[1], 0.7), x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
