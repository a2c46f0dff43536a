//! Diagonal selective state-space model: zero-order-hold discretization and
//! the linear-time scan with its hand-derived adjoint.
//!
//! For every channel `d` and state index `n` the scan runs
//!
//! ```text
//! a_t   = exp(delta_t * A_n)
//! bb_t  = (exp(delta_t * A_n) - 1) / A_n * B_{t,n}
//! h_t   = a_t * h_{t-1} + bb_t * x_t          (h_0 = 0)
//! y_t   = sum_n C_{t,n} * h_{t,n}
//! ```
//!
//! Buffers use the `(batch, channels, len)` layout for `x`, `delta`, `y`,
//! `(channels, state)` for `A` and `(batch, state, len)` for `B` and `C`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude `A` is treated as zero and `B̄ = Δ·B`.
pub const A_SINGULAR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub state: usize,
}

impl ScanDims {
    pub(crate) fn from_shapes(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize]) -> Result<Self> {
        if x.len() != 3 {
            return Err(Error::shape("selective_scan", x, delta));
        }
        if delta != x {
            return Err(Error::shape("selective_scan", x, delta));
        }
        if a.len() != 2 || a[0] != x[1] {
            return Err(Error::shape("selective_scan", x, a));
        }
        let want = [x[0], a[1], x[2]];
        if b != want {
            return Err(Error::shape("selective_scan", &want, b));
        }
        if c != want {
            return Err(Error::shape("selective_scan", &want, c));
        }
        Ok(ScanDims {
            batch: x[0],
            channels: x[1],
            len: x[2],
            state: a[1],
        })
    }
}

/// Hidden states saved by the forward scan, `(batch, channels, len, state)`.
pub struct ScanCache {
    h: Vec<f64>,
}

/// `(exp(delta*a) - 1) / a`, the factor multiplying `B` in the ZOH input matrix.
#[inline]
fn zoh_input_gain(a: f64, delta: f64) -> f64 {
    if a.abs() < A_SINGULAR_EPS {
        delta
    } else {
        (delta * a).exp_m1() / a
    }
}

/// Derivative of [`zoh_input_gain`] with respect to `a`.
#[inline]
fn zoh_input_gain_da(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    let psi = if z.abs() < 1e-4 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        let e = z.exp();
        (z * e - e + 1.0) / (z * z)
    };
    delta * delta * psi
}

/// Elementwise ZOH discretization of a diagonal system.
///
/// Returns `(exp(delta*A), (exp(delta*A) - 1)/A * B)`; entries with
/// `|A| < 1e-12` take the limit `delta * B`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::invalid("zoh_discretize", format!("delta must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape("zoh_discretize", &[a.len()], &[b.len()]));
    }
    let a_bar = a.iter().map(|&an| (delta * an).exp()).collect();
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(&an, &bn)| zoh_input_gain(an, delta) * bn)
        .collect();
    Ok((a_bar, b_bar))
}

pub(crate) fn scan_forward(
    dims: &ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, ScanCache)> {
    if [x, delta, a, b, c].iter().any(|s| s.iter().any(|v| v.is_nan())) {
        return Err(Error::NanInput("selective_scan"));
    }
    let ScanDims {
        batch,
        channels,
        len,
        state,
    } = *dims;
    let mut y = vec![0.0; batch * channels * len];
    let mut hs = vec![0.0; batch * channels * len * state];
    let mut h = vec![0.0; state];
    for bi in 0..batch {
        let bm = &b[bi * state * len..(bi + 1) * state * len];
        let cm = &c[bi * state * len..(bi + 1) * state * len];
        for d in 0..channels {
            let row = (bi * channels + d) * len;
            let ad = &a[d * state..(d + 1) * state];
            h.fill(0.0);
            for t in 0..len {
                let (dt, xt) = (delta[row + t], x[row + t]);
                let mut acc = 0.0;
                for n in 0..state {
                    let an = ad[n];
                    let a_bar = (dt * an).exp();
                    let b_bar = zoh_input_gain(an, dt) * bm[n * len + t];
                    h[n] = a_bar * h[n] + b_bar * xt;
                    acc += cm[n * len + t] * h[n];
                }
                y[row + t] = acc;
                hs[(row + t) * state..(row + t + 1) * state].copy_from_slice(&h);
            }
        }
    }
    Ok((y, ScanCache { h: hs }))
}

/// Gradients `[dx, ddelta, dA, dB, dC]` of the scan for upstream `dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dims: &ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    cache: &ScanCache,
    dy: &[f64],
) -> [Vec<f64>; 5] {
    let ScanDims {
        batch,
        channels,
        len,
        state,
    } = *dims;
    let mut dx = vec![0.0; x.len()];
    let mut ddelta = vec![0.0; delta.len()];
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut dc = vec![0.0; c.len()];
    let mut carry = vec![0.0; state];
    for bi in 0..batch {
        let soff = bi * state * len;
        for d in 0..channels {
            let row = (bi * channels + d) * len;
            carry.fill(0.0);
            for t in (0..len).rev() {
                let (dt, xt, gy) = (delta[row + t], x[row + t], dy[row + t]);
                let h_t = &cache.h[(row + t) * state..(row + t + 1) * state];
                let mut gx = 0.0;
                let mut gdt = 0.0;
                for n in 0..state {
                    let an = a[d * state + n];
                    let bn = b[soff + n * len + t];
                    let cn = c[soff + n * len + t];
                    let h_prev = if t > 0 { cache.h[(row + t - 1) * state + n] } else { 0.0 };
                    let a_bar = (dt * an).exp();
                    let gain = zoh_input_gain(an, dt);

                    dc[soff + n * len + t] += gy * h_t[n];
                    let g = gy * cn + carry[n];
                    let g_abar = g * h_prev;
                    gx += g * gain * bn;
                    let g_bbar = g * xt;
                    db[soff + n * len + t] += g_bbar * gain;
                    let g_gain = g_bbar * bn;
                    gdt += g_abar * a_bar * an + g_gain * a_bar;
                    da[d * state + n] += g_abar * a_bar * dt + g_gain * zoh_input_gain_da(an, dt);
                    carry[n] = a_bar * g;
                }
                dx[row + t] += gx;
                ddelta[row + t] += gdt;
            }
        }
    }
    [dx, ddelta, da, db, dc]
}

/// Per-sequence SSM parameters for the standalone `(L, D)` scan.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `(D, N)` diagonal state matrices, all entries negative.
    pub a: Tensor,
    /// `(L, D)` positive step sizes.
    pub delta: Tensor,
    /// `(L, N)` input projections.
    pub b: Tensor,
    /// `(L, N)` output projections.
    pub c: Tensor,
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    /// Time-invariant parameters repeated over `len` tokens.
    pub fn fixed(a: Tensor, delta: &[f64], b: &[f64], c: &[f64], len: usize) -> Result<Self> {
        let rep = |v: &[f64]| {
            let data = (0..len).flat_map(|_| v.iter().copied()).collect();
            Tensor::new(vec![len, v.len()], data)
        };
        Ok(SsmParams {
            a,
            delta: rep(delta)?,
            b: rep(b)?,
            c: rep(c)?,
        })
    }

    /// Checks `A < 0` and `delta > 0`.
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.a.data().iter().find(|&&v| !(v < 0.0)) {
            return Err(Error::invalid("ssm_params", format!("A entries must be negative, found {v}")));
        }
        if let Some(v) = self.delta.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::invalid("ssm_params", format!("delta must be positive, found {v}")));
        }
        Ok(())
    }
}

/// Gradients returned by [`selective_scan_backward`].
#[derive(Clone, Debug)]
pub struct SsmGrads {
    pub x: Tensor,
    pub a: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn standalone_dims(x: &Tensor, p: &SsmParams) -> Result<ScanDims> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::shape("selective_scan", xs, p.delta.shape()));
    }
    let (l, d) = (xs[0], xs[1]);
    if p.a.rank() != 2 || p.a.shape()[0] != d {
        return Err(Error::shape("selective_scan", xs, p.a.shape()));
    }
    let n = p.a.shape()[1];
    if p.delta.shape() != [l, d] {
        return Err(Error::shape("selective_scan", xs, p.delta.shape()));
    }
    for m in [&p.b, &p.c] {
        if m.shape() != [l, n] {
            return Err(Error::shape("selective_scan", &[l, n], m.shape()));
        }
    }
    Ok(ScanDims {
        batch: 1,
        channels: d,
        len: l,
        state: n,
    })
}

/// Runs the scan over an `(L, D)` sequence; `L = 0` is not representable and
/// callers with empty sequences should skip the call.
pub fn selective_scan(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    let dims = standalone_dims(x, params)?;
    let (l, d, n) = (dims.len, dims.channels, dims.state);
    let (y, _) = scan_forward(
        &dims,
        &transpose(x.data(), l, d),
        &transpose(params.delta.data(), l, d),
        params.a.data(),
        &transpose(params.b.data(), l, n),
        &transpose(params.c.data(), l, n),
    )?;
    Tensor::new(vec![l, d], transpose(&y, d, l))
}

pub fn selective_scan_backward(x: &Tensor, params: &SsmParams, dy: &Tensor) -> Result<SsmGrads> {
    let dims = standalone_dims(x, params)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("selective_scan_backward", x.shape(), dy.shape()));
    }
    let (l, d, n) = (dims.len, dims.channels, dims.state);
    let xt = transpose(x.data(), l, d);
    let dt = transpose(params.delta.data(), l, d);
    let bt = transpose(params.b.data(), l, n);
    let ct = transpose(params.c.data(), l, n);
    let (_, cache) = scan_forward(&dims, &xt, &dt, params.a.data(), &bt, &ct)?;
    let [gx, gdt, ga, gb, gc] = scan_backward(
        &dims,
        &xt,
        &dt,
        params.a.data(),
        &bt,
        &ct,
        &cache,
        &transpose(dy.data(), l, d),
    );
    Ok(SsmGrads {
        x: Tensor::new(vec![l, d], transpose(&gx, d, l))?,
        a: Tensor::new(vec![d, n], ga)?,
        delta: Tensor::new(vec![l, d], transpose(&gdt, d, l))?,
        b: Tensor::new(vec![l, n], transpose(&gb, n, l))?,
        c: Tensor::new(vec![l, n], transpose(&gc, n, l))?,
    })
}

/// `log(-A)` initialization giving `A_n = -(n + 1)` for every channel.
pub fn a_log_init(channels: usize, state: usize) -> Tensor {
    let data = (0..channels)
        .flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln()))
        .collect();
    Tensor::from_parts(vec![channels, state], data)
}

/// Inverse of softplus, so that `softplus(inv_softplus(v)) == v`.
pub fn inv_softplus(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}
