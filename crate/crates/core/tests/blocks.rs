use std::collections::BTreeMap;

use hymunet::blocks::{DecoderBlock, MgfSkip, OutputHead, PatchEmbed, Rcb, SkipKind, Vss};
use hymunet::nn::{bind, Registry, Scope};
use hymunet::ss2d::ScanMode;
use hymunet::tensor::{grad_check_with, GradCheckOptions, NormKind};
use hymunet::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Forward<'f> = &'f dyn Fn(&mut Scope<'_>, &[Var]) -> Result<Var>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params_of(declare: impl Fn(&mut Registry), seed: u64) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut reg = Registry::default();
    declare(&mut reg);
    (reg.init_params(&mut rng(seed)), reg.init_buffers())
}

fn run(
    params: &BTreeMap<String, Tensor>,
    buffers: &BTreeMap<String, Tensor>,
    training: bool,
    inputs: &[Tensor],
    f: Forward<'_>,
) -> Tensor {
    let mut g = Graph::new();
    let vars = bind(&mut g, params, false);
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let mut s = Scope::new(&mut g, &vars, buffers, training, NormKind::Batch);
    let y = f(&mut s, &xs).unwrap();
    g.value(y).clone()
}

fn zero_all(params: &mut BTreeMap<String, Tensor>, except: &[&str]) {
    for (k, t) in params.iter_mut() {
        if !except.iter().any(|e| k.ends_with(e)) {
            t.data_mut().fill(0.0);
        }
    }
}

/// Relative finite-difference error of a random projection of the block
/// output with respect to the input and every parameter.
fn block_grad_error(
    params: &BTreeMap<String, Tensor>,
    buffers: &BTreeMap<String, Tensor>,
    x: &Tensor,
    out_shape: &[usize],
    f: Forward<'_>,
) -> f64 {
    let keys: Vec<String> = params.keys().cloned().collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(params.values().cloned());
    let proj = Tensor::rand_uniform(out_shape, -1.0, 1.0, &mut rng(77));
    let report = grad_check_with(
        |g: &mut Graph, vs: &[Var]| {
            let map: BTreeMap<String, Var> = keys.iter().cloned().zip(vs[1..].iter().copied()).collect();
            let mut s = Scope::new(g, &map, buffers, true, NormKind::Batch);
            let y = f(&mut s, &vs[..1])?;
            let p = s.graph.constant(proj.clone());
            let yp = s.graph.mul(y, p)?;
            s.graph.sum(yp)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn rcb_zero_branch_is_identity() {
    let rcb = Rcb::new("rcb", 16, 16);
    let (mut p, b) = params_of(|r| rcb.declare(r), 1);
    zero_all(&mut p, &["gamma"]);
    let x = Tensor::rand_uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut rng(2));
    for training in [false, true] {
        let y = run(&p, &b, training, std::slice::from_ref(&x), &|s, xs| rcb.forward(s, xs[0]));
        assert_eq!(y, x);
    }
}

#[test]
fn rcb_shapes_and_projection() {
    let rcb = Rcb::new("rcb", 16, 16);
    let (p, b) = params_of(|r| rcb.declare(r), 1);
    assert!(!p.contains_key("rcb.proj.weight"));
    let x = Tensor::rand_uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut rng(2));
    let y = run(&p, &b, false, &[x], &|s, xs| rcb.forward(s, xs[0]));
    assert_eq!(y.shape(), &[1, 16, 8, 8]);

    let rcb = Rcb::new("rcb", 4, 8);
    let (p, b) = params_of(|r| rcb.declare(r), 1);
    assert_eq!(p["rcb.proj.weight"].shape(), &[8, 4, 1, 1]);
    let x = Tensor::rand_uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng(3));
    let y = run(&p, &b, true, &[x], &|s, xs| rcb.forward(s, xs[0]));
    assert_eq!(y.shape(), &[2, 8, 4, 4]);
}

#[test]
fn rcb_gradients() {
    let rcb = Rcb::new("rcb", 2, 3);
    let (p, b) = params_of(|r| rcb.declare(r), 4);
    let x = Tensor::rand_uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(5));
    let err = block_grad_error(&p, &b, &x, &[2, 3, 4, 4], &|s, xs| rcb.forward(s, xs[0]));
    assert!(err < 1e-5, "{err}");
}

fn vss(c: usize) -> Vss {
    Vss::new("vss", c, 4, 2, 3, ScanMode::RowMirror)
}

#[test]
fn vss_zero_weights_is_identity() {
    let v = vss(8);
    let (mut p, b) = params_of(|r| v.declare(r), 6);
    zero_all(&mut p, &["a_log", "dt_bias"]);
    let x = Tensor::rand_uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rng(7));
    let y = run(&p, &b, false, std::slice::from_ref(&x), &|s, xs| v.forward(s, xs[0]));
    assert_eq!(y, x);
}

#[test]
fn vss_shape_and_gradients() {
    let v = vss(8);
    let (p, b) = params_of(|r| v.declare(r), 8);
    let x = Tensor::rand_uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rng(9));
    let y = run(&p, &b, false, &[x], &|s, xs| v.forward(s, xs[0]));
    assert_eq!(y.shape(), &[1, 8, 4, 4]);

    let v = vss(4);
    let (p, b) = params_of(|r| v.declare(r), 10);
    let x = Tensor::rand_uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng(11));
    let err = block_grad_error(&p, &b, &x, &[1, 4, 4, 4], &|s, xs| v.forward(s, xs[0]));
    assert!(err < 1e-4, "{err}");
}

fn skip(kind: SkipKind, ce: usize, cd: usize) -> MgfSkip {
    MgfSkip::new("skip", kind, ce, cd)
}

#[test]
fn gate_saturates_and_centres() {
    let sk = skip(SkipKind::Mgf, 3, 4);
    let d = Tensor::rand_uniform(&[1, 4, 6, 6], -2.0, 2.0, &mut rng(12));
    let (mut p, b) = params_of(|r| sk.declare(r), 13);
    zero_all(&mut p, &[]);
    let g = run(&p, &b, false, std::slice::from_ref(&d), &|s, xs| sk.gate.forward(s, xs[0]));
    assert_eq!(g.shape(), &[1, 1, 6, 6]);
    assert!(g.data().iter().all(|&v| v == 0.5));

    p.get_mut("skip.gate.conv1.bias").unwrap().data_mut()[0] = -20.0;
    let g = run(&p, &b, false, std::slice::from_ref(&d), &|s, xs| sk.gate.forward(s, xs[0]));
    assert!(g.data().iter().all(|&v| v < 1e-8));

    let (p, b) = params_of(|r| sk.declare(r), 14);
    let g = run(&p, &b, false, &[d], &|s, xs| sk.gate.forward(s, xs[0]));
    assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn skip_limits_and_identity() {
    let sk = skip(SkipKind::Mgf, 3, 2);
    let e = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng(15));
    let d = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng(16));
    let (mut p, b) = params_of(|r| sk.declare(r), 17);
    let both = [e.clone(), d.clone()];
    let d_up = run(&p, &b, false, &both, &|s, xs| s.graph.upsample_bilinear(xs[1], 2));
    let plain = run(&p, &b, false, &both, &|s, xs| {
        let u = s.graph.upsample_bilinear(xs[1], 2)?;
        s.graph.concat(&[xs[0], u], 1)
    });

    // Random gate: encoder half equals E * (1 + G).
    let f = run(&p, &b, false, &both, &|s, xs| sk.forward(s, xs[0], xs[1]));
    let g = run(&p, &b, false, &both, &|s, xs| {
        let u = s.graph.upsample_bilinear(xs[1], 2)?;
        sk.gate.forward(s, u)
    });
    for c in 0..3 {
        for i in 0..64 {
            let want = e.data()[c * 64 + i] * (1.0 + g.data()[i]);
            assert!((f.data()[c * 64 + i] - want).abs() < 1e-12);
        }
    }
    assert_eq!(&f.data()[3 * 64..], d_up.data());

    zero_all(&mut p, &[]);
    p.get_mut("skip.gate.conv1.bias").unwrap().data_mut()[0] = -800.0;
    let f = run(&p, &b, false, &both, &|s, xs| sk.forward(s, xs[0], xs[1]));
    assert_eq!(f, plain);

    p.get_mut("skip.gate.conv1.bias").unwrap().data_mut()[0] = 800.0;
    let f = run(&p, &b, false, &both, &|s, xs| sk.forward(s, xs[0], xs[1]));
    for (a, v) in f.data()[..3 * 64].iter().zip(e.data()) {
        assert_eq!(*a, 2.0 * v);
    }

    let concat = skip(SkipKind::Concat, 3, 2);
    let (p, b) = params_of(|r| concat.declare(r), 18);
    assert!(p.is_empty());
    let f = run(&p, &b, false, &both, &|s, xs| concat.forward(s, xs[0], xs[1]));
    assert_eq!(f, plain);
}

#[test]
fn skip_shape_contract() {
    let sk = skip(SkipKind::Mgf, 64, 128);
    let (p, b) = params_of(|r| sk.declare(r), 19);
    let e = Tensor::rand_uniform(&[1, 64, 32, 32], -1.0, 1.0, &mut rng(20));
    let d = Tensor::rand_uniform(&[1, 128, 16, 16], -1.0, 1.0, &mut rng(21));
    let f = run(&p, &b, false, &[e.clone(), d], &|s, xs| sk.forward(s, xs[0], xs[1]));
    assert_eq!(f.shape(), &[1, 192, 32, 32]);
    assert_eq!(sk.out_channels(), 192);

    let bad = Tensor::zeros(&[1, 128, 15, 16]);
    let mut g = Graph::new();
    let vars = bind(&mut g, &p, false);
    let (ev, dv) = (g.constant(e), g.constant(bad));
    let mut s = Scope::new(&mut g, &vars, &b, false, NormKind::Batch);
    assert!(sk.forward(&mut s, ev, dv).is_err());
}

#[test]
fn skip_gradients() {
    let sk = skip(SkipKind::Mgf, 2, 3);
    let (p, b) = params_of(|r| sk.declare(r), 22);
    let e = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng(23));
    let d = Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng(24));
    let err = block_grad_error(&p, &b, &e, &[1, 5, 4, 4], &|s, xs| {
        let dv = s.graph.constant(d.clone());
        sk.forward(s, xs[0], dv)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn patch_embed_strides() {
    let pe = PatchEmbed {
        prefix: "embed".into(),
        cin: 3,
        cout: 8,
    };
    let (p, b) = params_of(|r| pe.declare(r), 25);
    for (side, want) in [(64, 16), (256, 64)] {
        let x = Tensor::rand_uniform(&[1, 3, side, side], 0.0, 1.0, &mut rng(26));
        let y = run(&p, &b, false, &[x], &|s, xs| pe.forward(s, xs[0]));
        assert_eq!(y.shape(), &[1, 8, want, want]);
    }
    let mut g = Graph::new();
    let vars = bind(&mut g, &p, false);
    let x = g.constant(Tensor::zeros(&[1, 3, 63, 63]));
    let mut s = Scope::new(&mut g, &vars, &b, false, NormKind::Batch);
    let err = pe.forward(&mut s, x).unwrap_err().to_string();
    assert!(err.contains("multiple of 32"), "{err}");
}

#[test]
fn decoder_block_contracts() {
    let db = DecoderBlock {
        prefix: "dec".into(),
        cin: 6,
        cout: 3,
    };
    let (mut p, b) = params_of(|r| db.declare(r), 27);
    let x = Tensor::rand_uniform(&[2, 6, 4, 4], -1.0, 1.0, &mut rng(28));
    let y = run(&p, &b, false, std::slice::from_ref(&x), &|s, xs| db.forward(s, xs[0]));
    assert_eq!(y.shape(), &[2, 3, 4, 4]);
    assert!(y.data().iter().all(|&v| v >= 0.0));
    let err = block_grad_error(&p, &b, &x, &[2, 3, 4, 4], &|s, xs| db.forward(s, xs[0]));
    assert!(err < 1e-5, "{err}");
    zero_all(&mut p, &["gamma"]);
    let y = run(&p, &b, true, &[x], &|s, xs| db.forward(s, xs[0]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_head_contracts() {
    let head = OutputHead {
        prefix: "head".into(),
        cin: 4,
    };
    let (mut p, b) = params_of(|r| head.declare(r), 29);
    let x = Tensor::rand_uniform(&[1, 4, 64, 64], -3.0, 3.0, &mut rng(30));
    let y = run(&p, &b, false, std::slice::from_ref(&x), &|s, xs| head.forward(s, xs[0]));
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    zero_all(&mut p, &[]);
    let y = run(&p, &b, false, &[x], &|s, xs| head.forward(s, xs[0]));
    assert!(y.data().iter().all(|&v| v == 0.5));
}
