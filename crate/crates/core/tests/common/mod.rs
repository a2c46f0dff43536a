//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::rc::Rc;

use hymunet::mask::Mask;
use hymunet::nn::{bind, Registry, Scope};
use hymunet::ss2d::{ScanMode, Ss2d};
use hymunet::tensor::{grad_check_with, GradCheckOptions, NormKind, NormMode};
use hymunet::{Graph, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uni(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, r)
}

fn dims(r: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| r.gen_range(1..=max)).collect()
}

/// Relative gradient error of `sum(f(inputs) * R)` for a random fixed `R`.
pub fn projected_error(r: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs).expect("op forward");
        g.shape(y).to_vec()
    };
    let proj = uni(&shape, -1.0, 1.0, r);
    let opts = GradCheckOptions {
        seed: r.gen(),
        ..Default::default()
    };
    grad_check_with(
        |g: &mut Graph, vs: &[Var]| {
            let y = f(g, vs)?;
            let p = g.constant(proj.clone());
            let yp = g.mul(y, p)?;
            g.sum(yp)
        },
        &inputs,
        &opts,
    )
    .expect("grad check")
    .max_rel_error
}

/// Second operand shape: `s` with some axes squeezed to 1 for broadcasting.
fn broadcast_of(r: &mut ChaCha8Rng, s: &[usize]) -> Vec<usize> {
    s.iter().map(|&d| if r.gen_bool(0.3) { 1 } else { d }).collect()
}

type Case = fn(&mut ChaCha8Rng) -> f64;

fn unary(r: &mut ChaCha8Rng, lo: f64, hi: f64, f: fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let rank = r.gen_range(1..=4);
    let s = dims(r, rank, 4);
    let x = uni(&s, lo, hi, r);
    projected_error(r, vec![x], move |g, v| f(g, v[0]))
}

fn binary(r: &mut ChaCha8Rng, lo: f64, hi: f64, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> f64 {
    let rank = r.gen_range(1..=4);
    let s = dims(r, rank, 4);
    let s2 = broadcast_of(r, &s);
    let (a, b) = (uni(&s, -2.0, 2.0, r), uni(&s2, lo, hi, r));
    let swap = r.gen_bool(0.5) && lo < 0.0;
    let inputs = if swap { vec![b, a] } else { vec![a, b] };
    projected_error(r, inputs, move |g, v| f(g, v[0], v[1]))
}

/// Every differentiable op kind with a random-shape generator.
pub fn op_catalog() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| binary(r, -2.0, 2.0, |g, a, b| g.add(a, b))),
        ("sub", |r| binary(r, -2.0, 2.0, |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(r, -2.0, 2.0, |g, a, b| g.mul(a, b))),
        ("div", |r| binary(r, 0.5, 2.0, |g, a, b| g.div(a, b))),
        ("add_scalar", |r| unary(r, -2.0, 2.0, |g, x| g.add_scalar(x, 0.7))),
        ("mul_scalar", |r| unary(r, -2.0, 2.0, |g, x| g.mul_scalar(x, -1.3))),
        ("neg", |r| unary(r, -2.0, 2.0, |g, x| g.neg(x))),
        ("exp", |r| unary(r, -2.0, 2.0, |g, x| g.exp(x))),
        ("log", |r| unary(r, 0.3, 3.0, |g, x| g.log(x))),
        ("sigmoid", |r| unary(r, -4.0, 4.0, |g, x| g.sigmoid(x))),
        ("relu", |r| unary(r, -2.0, 2.0, |g, x| g.relu(x))),
        ("silu", |r| unary(r, -4.0, 4.0, |g, x| g.silu(x))),
        ("softplus", |r| unary(r, -4.0, 4.0, |g, x| g.softplus(x))),
        ("square", |r| unary(r, -2.0, 2.0, |g, x| g.square(x))),
        ("clamp", |r| unary(r, -1.0, 1.0, |g, x| g.clamp(x, -0.5, 0.5))),
        ("sum", |r| unary(r, -2.0, 2.0, |g, x| g.sum(x))),
        ("mean", |r| unary(r, -2.0, 2.0, |g, x| g.mean(x))),
        ("row_sum", |r| {
            let rank = r.gen_range(2..=4);
            let s = dims(r, rank, 4);
            let x = uni(&s, -2.0, 2.0, r);
            projected_error(r, vec![x], |g, v| g.row_sum(v[0]))
        }),
        ("reshape", |r| {
            let (a, b, c) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
            let x = uni(&[a, b, c], -2.0, 2.0, r);
            projected_error(r, vec![x], move |g, v| g.reshape(v[0], &[a * b, c]))
        }),
        ("permute", |r| {
            let rank = r.gen_range(2..=4);
            let s = dims(r, rank, 4);
            let mut perm: Vec<usize> = (0..rank).collect();
            perm.shuffle(r);
            let x = uni(&s, -2.0, 2.0, r);
            projected_error(r, vec![x], move |g, v| g.permute(v[0], &perm))
        }),
        ("concat", |r| {
            let rank = r.gen_range(1..=4);
            let s = dims(r, rank, 3);
            let axis = r.gen_range(0..rank);
            let parts: Vec<Tensor> = (0..r.gen_range(2..=3))
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = r.gen_range(1..=3);
                    uni(&si, -2.0, 2.0, r)
                })
                .collect();
            projected_error(r, parts, move |g, v| g.concat(v, axis))
        }),
        ("gather_last", |r| {
            let rank = r.gen_range(1..=3);
            let s = dims(r, rank, 5);
            let last = s[rank - 1];
            let idx: Rc<[usize]> = (0..r.gen_range(1..=8)).map(|_| r.gen_range(0..last)).collect();
            let x = uni(&s, -2.0, 2.0, r);
            projected_error(r, vec![x], move |g, v| g.gather_last(v[0], idx.clone()))
        }),
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6));
            let (a, b) = (uni(&[m, k], -1.0, 1.0, r), uni(&[k, n], -1.0, 1.0, r));
            projected_error(r, vec![a, b], |g, v| g.matmul(v[0], v[1]))
        }),
        ("conv2d", |r| {
            let k = [1, 3][r.gen_range(0..2)];
            let (b, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let (h, w) = (r.gen_range(k..=6), r.gen_range(k..=6));
            let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
            let x = uni(&[b, ci, h, w], -1.0, 1.0, r);
            let wt = uni(&[co, ci, k, k], -1.0, 1.0, r);
            let bias = uni(&[co], -1.0, 1.0, r);
            projected_error(r, vec![x, wt, bias], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
        }),
        ("depthwise_conv1d", |r| {
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (b, c, l) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=9));
            let x = uni(&[b, c, l], -1.0, 1.0, r);
            let wt = uni(&[c, k], -1.0, 1.0, r);
            let bias = uni(&[c], -1.0, 1.0, r);
            projected_error(r, vec![x, wt, bias], |g, v| g.depthwise_conv1d(v[0], v[1], Some(v[2])))
        }),
        ("batch_norm", |r| norm_case(r, NormKind::Batch, false)),
        ("instance_norm", |r| norm_case(r, NormKind::Instance, false)),
        ("eval_norm", |r| norm_case(r, NormKind::Batch, true)),
        ("resize_bilinear", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=5), r.gen_range(1..=5)];
            let (oh, ow) = (r.gen_range(1..=9), r.gen_range(1..=9));
            let x = uni(&s, -1.0, 1.0, r);
            projected_error(r, vec![x], move |g, v| g.resize_bilinear(v[0], oh, ow))
        }),
        ("upsample_bilinear", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4)];
            let x = uni(&s, -1.0, 1.0, r);
            projected_error(r, vec![x], |g, v| g.upsample_bilinear(v[0], 2))
        }),
        ("selective_scan", |r| {
            let (b, d, l, n) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=8), r.gen_range(1..=3));
            let inputs = vec![
                uni(&[b, d, l], -1.0, 1.0, r),
                uni(&[b, d, l], 0.05, 0.8, r),
                uni(&[d, n], -2.0, -0.2, r),
                uni(&[b, n, l], -1.0, 1.0, r),
                uni(&[b, n, l], -1.0, 1.0, r),
            ];
            projected_error(r, inputs, |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4]))
        }),
    ]
}

fn norm_case(r: &mut ChaCha8Rng, kind: NormKind, eval: bool) -> f64 {
    let c = r.gen_range(1..=3);
    let (b, h, w) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=4));
    let x = uni(&[b, c, h, w], -2.0, 2.0, r);
    let gamma = uni(&[c], 0.5, 1.5, r);
    let beta = uni(&[c], -0.5, 0.5, r);
    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    projected_error(r, vec![x, gamma, beta], move |g, v| {
        let mode = if eval {
            NormMode::Eval { mean: &mean, var: &var }
        } else {
            NormMode::Train
        };
        Ok(g.norm(v[0], v[1], v[2], kind, mode, 1e-5)?.0)
    })
}

/// Unrolled ZOH recurrence over `(B, D, L)` inputs, `(D, N)` A and `(B, N, L)` B, C.
pub fn scan_oracle(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Vec<f64> {
    let (bs, d, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    let mut y = vec![0.0; bs * d * l];
    for bi in 0..bs {
        for di in 0..d {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let xt = x.data()[(bi * d + di) * l + t];
                let dt = delta.data()[(bi * d + di) * l + t];
                let mut acc = 0.0;
                for (ni, hn) in h.iter_mut().enumerate() {
                    let an = a.data()[di * n + ni];
                    let abar = (dt * an).exp();
                    let bbar = (abar - 1.0) / an * b.data()[(bi * n + ni) * l + t];
                    *hn = abar * *hn + bbar * xt;
                    acc += c.data()[(bi * n + ni) * l + t] * *hn;
                }
                y[(bi * d + di) * l + t] = acc;
            }
        }
    }
    y
}

/// Random scan instance with `L <= max_len`, `N <= max_state`; returns the
/// max absolute deviation of the graph op from [`scan_oracle`].
pub fn scan_instance_error(r: &mut ChaCha8Rng, max_len: usize, max_state: usize) -> f64 {
    let (b, d, l, n) = (
        r.gen_range(1..=2),
        r.gen_range(1..=4),
        r.gen_range(1..=max_len),
        r.gen_range(1..=max_state),
    );
    let x = uni(&[b, d, l], -1.0, 1.0, r);
    let delta = uni(&[b, d, l], 0.001, 1.0, r);
    let a = uni(&[d, n], -3.0, -0.05, r);
    let bm = uni(&[b, n, l], -1.0, 1.0, r);
    let cm = uni(&[b, n, l], -1.0, 1.0, r);
    let want = scan_oracle(&x, &delta, &a, &bm, &cm);
    let mut g = Graph::new();
    let vs = [&x, &delta, &a, &bm, &cm].map(|t| g.constant(t.clone()));
    let y = g.selective_scan(vs[0], vs[1], vs[2], vs[3], vs[4]).unwrap();
    g.value(y)
        .data()
        .iter()
        .zip(&want)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

/// Random union of discs, so masks have real interiors and boundaries.
pub fn blobs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let discs: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(1.5..8.0),
            )
        })
        .collect();
    Mask::from_fn(h, w, |r, c| {
        discs
            .iter()
            .any(|&(y, x, rad)| (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= rad * rad)
    })
}

/// Boundary by explicit neighbour test, all-pairs distances, percentile by
/// sorting and interpolating at rank q (n - 1).
pub fn hd95_oracle(p: &Mask, g: &Mask) -> f64 {
    let edge = |m: &Mask| -> Vec<(i64, i64)> {
        let (h, w) = (m.height() as i64, m.width() as i64);
        let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !at(r + dr, c + dc)) {
                    out.push((r, c));
                }
            }
        }
        out
    };
    let dir = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        let mut d: Vec<f64> = a
            .iter()
            .map(|&(r, c)| {
                b.iter()
                    .map(|&(r2, c2)| (((r - r2).pow(2) + (c - c2).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let pos = 0.95 * (d.len() - 1) as f64;
        let i = pos as usize;
        let j = (i + 1).min(d.len() - 1);
        d[i] + (pos - i as f64) * (d[j] - d[i])
    };
    let (a, b) = (edge(p), edge(g));
    dir(&a, &b).max(dir(&b, &a))
}

/// An SS2D layer with generic, non-degenerate projections.
pub fn ss2d_layer(e: usize, n: usize, mode: ScanMode, seed: u64) -> (Ss2d, BTreeMap<String, Tensor>) {
    let ss = Ss2d::new("ss", e, n, mode);
    let mut reg = Registry::default();
    ss.declare(&mut reg);
    let mut r = rng(seed);
    let mut params = reg.init_params(&mut r);
    for (k, t) in params.iter_mut() {
        if k.contains("x_proj") || k.contains("dt_proj") {
            for v in t.data_mut() {
                *v = r.gen_range(-0.8..0.8);
            }
        }
    }
    (ss, params)
}

/// Output pixels of an 8x8 SS2D layer whose gradient with respect to a single
/// nonzero source pixel vanishes. Zero means a global receptive field.
pub fn blind_pixels_8x8(seed: u64) -> usize {
    let (ss, params) = ss2d_layer(2, 4, ScanMode::RowMirror, seed);
    let (h, w) = (8, 8);
    let src = (3, 5);
    let mut x = Tensor::zeros(&[1, 2, h, w]);
    x.data_mut()[src.0 * w + src.1] = 0.7;
    x.data_mut()[h * w + src.0 * w + src.1] = -0.4;
    let mut blind = 0;
    for p in 0..h * w {
        let mut g = Graph::new();
        let vars = bind(&mut g, &params, false);
        let buffers = BTreeMap::new();
        let xv = g.param(x.clone());
        // The shared conv bias keeps B and C nonzero away from the source pixel.
        let cw = g.constant(Tensor::new(vec![2, 3], vec![0.3, 0.5, -0.2, 0.1, 0.6, 0.4]).unwrap());
        let cb = g.constant(Tensor::new(vec![2], vec![0.25, -0.35]).unwrap());
        let mut s = Scope::new(&mut g, &vars, &buffers, false, NormKind::Batch);
        let y = ss.forward(&mut s, xv, Some((cw, cb))).unwrap();
        let mut mask = Tensor::zeros(&[1, 2, h, w]);
        mask.data_mut()[p] = 1.0;
        mask.data_mut()[h * w + p] = 1.0;
        let m = g.constant(mask);
        let picked = g.mul(y, m).unwrap();
        let total = g.sum(picked).unwrap();
        g.backward(total).unwrap();
        let grad = g.grad(xv).unwrap();
        let at_src = grad.data()[src.0 * w + src.1].abs() + grad.data()[h * w + src.0 * w + src.1].abs();
        if !(at_src > 1e-12) {
            blind += 1;
        }
    }
    blind
}
