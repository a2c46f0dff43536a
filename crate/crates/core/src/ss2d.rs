//! Four-direction 2-D selective scan.
//!
//! A feature map is flattened along four corner-to-corner traversal orders,
//! each order is scanned by its own selective SSM, and the four outputs are
//! scattered back to their pixels and summed.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Init, Registry, Scope};
use crate::tensor::{Tensor, Var};

/// Traversal family for directions 3 and 4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    /// Row-major raster of the horizontally mirrored map (top-right start).
    #[default]
    RowMirror,
    /// Column-major raster (top-left start, moving down first).
    RowCol,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rowmirror" => Ok(ScanMode::RowMirror),
            "rowcol" => Ok(ScanMode::RowCol),
            other => Err(Error::Config(format!("unknown scan_mode `{other}` (rowmirror | rowcol)"))),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::RowMirror => "rowmirror",
            ScanMode::RowCol => "rowcol",
        })
    }
}

/// The four traversal orders of an `height x width` grid.
///
/// `order(k)[i]` is the row-major pixel index visited at step `i` of direction `k`.
#[derive(Clone, Debug)]
pub struct DirectionalSequences {
    height: usize,
    width: usize,
    orders: [Rc<[usize]>; 4],
    inverses: [Rc<[usize]>; 4],
}

impl DirectionalSequences {
    pub fn new(height: usize, width: usize, mode: ScanMode) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("unfold_directions", format!("empty grid {height}x{width}")));
        }
        let first: Vec<usize> = (0..height * width).collect();
        let third: Vec<usize> = match mode {
            ScanMode::RowMirror => (0..height)
                .flat_map(|r| (0..width).rev().map(move |c| r * width + c))
                .collect(),
            ScanMode::RowCol => (0..width)
                .flat_map(|c| (0..height).map(move |r| r * width + c))
                .collect(),
        };
        let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
        let orders = [first.clone(), rev(&first), third.clone(), rev(&third)];
        let inverses = orders.clone().map(|o| {
            let mut inv = vec![0; o.len()];
            for (i, &p) in o.iter().enumerate() {
                inv[p] = i;
            }
            Rc::from(inv)
        });
        Ok(DirectionalSequences {
            height,
            width,
            orders: orders.map(Rc::from),
            inverses,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn order(&self, k: usize) -> &[usize] {
        &self.orders[k]
    }

    /// `inverse(k)[p]` is the step at which direction `k` visits pixel `p`.
    pub fn inverse(&self, k: usize) -> &[usize] {
        &self.inverses[k]
    }

    /// `(row, col)` visited at step `i` of direction `k`.
    pub fn position(&self, k: usize, i: usize) -> (usize, usize) {
        let p = self.orders[k][i];
        (p / self.width, p % self.width)
    }

    /// Unfolds a `(B, C, H, W)` feature map into four `(B, C, H*W)` sequences.
    pub fn unfold_tensor(&self, f: &Tensor) -> Result<[Tensor; 4]> {
        let (b, c) = self.check_map(f.shape())?;
        let l = self.height * self.width;
        Ok(std::array::from_fn(|k| {
            let mut data = Vec::with_capacity(f.len());
            for row in f.data().chunks_exact(l) {
                data.extend(self.orders[k].iter().map(|&p| row[p]));
            }
            Tensor::new(vec![b, c, l], data).expect("unfold shape")
        }))
    }

    /// Scatters four `(B, C, H*W)` sequences back to pixels and sums them.
    pub fn merge_tensors(&self, ys: &[Tensor; 4]) -> Result<Tensor> {
        let l = self.height * self.width;
        let s = ys[0].shape();
        if s.len() != 3 || s[2] != l {
            return Err(Error::shape("merge_directions", s, &[l]));
        }
        let mut out = vec![0.0; ys[0].len()];
        for (k, y) in ys.iter().enumerate() {
            if y.shape() != s {
                return Err(Error::shape("merge_directions", s, y.shape()));
            }
            for (dst, src) in out.chunks_exact_mut(l).zip(y.data().chunks_exact(l)) {
                for (i, &p) in self.orders[k].iter().enumerate() {
                    dst[p] += src[i];
                }
            }
        }
        Tensor::new(vec![s[0], s[1], self.height, self.width], out)
    }

    /// Graph version of [`Self::unfold_tensor`].
    pub fn unfold(&self, s: &mut Scope<'_>, f: Var) -> Result<[Var; 4]> {
        let (b, c) = self.check_map(s.graph.shape(f))?;
        let flat = s.graph.reshape(f, &[b, c, self.height * self.width])?;
        let mut out = [flat; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = s.graph.gather_last(flat, self.orders[k].clone())?;
        }
        Ok(out)
    }

    /// Graph version of [`Self::merge_tensors`].
    pub fn merge(&self, s: &mut Scope<'_>, ys: [Var; 4]) -> Result<Var> {
        let l = self.height * self.width;
        let shape = s.graph.shape(ys[0]).to_vec();
        if shape.len() != 3 || shape[2] != l {
            return Err(Error::shape("merge_directions", &shape, &[l]));
        }
        let mut acc: Option<Var> = None;
        for (k, &y) in ys.iter().enumerate() {
            let back = s.graph.gather_last(y, self.inverses[k].clone())?;
            acc = Some(match acc {
                None => back,
                Some(a) => s.graph.add(a, back)?,
            });
        }
        s.graph
            .reshape(acc.unwrap(), &[shape[0], shape[1], self.height, self.width])
    }

    fn check_map(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::shape("unfold_directions", shape, &[self.height, self.width]));
        }
        Ok((shape[0], shape[1]))
    }
}

/// How the per-token step size and projections are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsmMode {
    /// `delta`, `B`, `C` are linear functions of each token.
    #[default]
    Selective,
    /// `delta`, `B`, `C` are learned constants shared by all tokens.
    Fixed,
}

/// Parameters and shape of one SS2D layer over `channels` inner channels.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub prefix: String,
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub scan_mode: ScanMode,
    pub ssm_mode: SsmMode,
}

impl Ss2d {
    pub fn new(prefix: impl Into<String>, channels: usize, state_dim: usize, scan_mode: ScanMode) -> Self {
        Ss2d {
            prefix: prefix.into(),
            channels,
            state_dim,
            dt_rank: channels.div_ceil(16),
            scan_mode,
            ssm_mode: SsmMode::Selective,
        }
    }

    fn key(&self, dir: usize, name: &str) -> String {
        format!("{}.dir{}.{}", self.prefix, dir + 1, name)
    }

    pub fn declare(&self, reg: &mut Registry) {
        let (e, n, r) = (self.channels, self.state_dim, self.dt_rank);
        for k in 0..4 {
            reg.param(self.key(k, "a_log"), &[e, n], Init::SsmALog);
            reg.param(
                self.key(k, "dt_bias"),
                &[e],
                Init::SoftplusLogUniform { lo: 0.01, hi: 0.1 },
            );
            match self.ssm_mode {
                SsmMode::Selective => {
                    let proj = Init::XavierUniform { fan_in: e, fan_out: r + 2 * n };
                    reg.param(self.key(k, "x_proj_dt"), &[r, e, 1, 1], proj);
                    reg.param(self.key(k, "x_proj_b"), &[n, e, 1, 1], proj);
                    reg.param(self.key(k, "x_proj_c"), &[n, e, 1, 1], proj);
                    reg.param(
                        self.key(k, "dt_proj"),
                        &[e, r, 1, 1],
                        Init::XavierUniform { fan_in: r, fan_out: e },
                    );
                }
                SsmMode::Fixed => {
                    let init = Init::XavierUniform { fan_in: n, fan_out: n };
                    reg.param(self.key(k, "b"), &[n], init);
                    reg.param(self.key(k, "c"), &[n], init);
                }
            }
        }
    }

    /// Runs SS2D on `(B, E, H, W)`; `conv` is an optional depthwise 1-D
    /// convolution `(weight (E, k), bias (E))` applied to each directional
    /// sequence before its scan.
    pub fn forward(&self, s: &mut Scope<'_>, x: Var, conv: Option<(Var, Var)>) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("ss2d", &shape, &[self.channels]));
        }
        let dirs = DirectionalSequences::new(shape[2], shape[3], self.scan_mode)?;
        let seqs = dirs.unfold(s, x)?;
        let mut ys = seqs;
        for (k, &seq) in seqs.iter().enumerate() {
            let u = match conv {
                Some((w, b)) => s.graph.depthwise_conv1d(seq, w, Some(b))?,
                None => seq,
            };
            ys[k] = self.scan_direction(s, k, u)?;
        }
        dirs.merge(s, ys)
    }

    fn scan_direction(&self, s: &mut Scope<'_>, k: usize, u: Var) -> Result<Var> {
        let (b, e, l) = {
            let sh = s.graph.shape(u);
            (sh[0], sh[1], sh[2])
        };
        let n = self.state_dim;
        let a_log = s.p(&self.key(k, "a_log"))?;
        let a = s.graph.exp(a_log)?;
        let a = s.graph.neg(a)?;
        let dt_bias = s.p(&self.key(k, "dt_bias"))?;
        let (delta, bm, cm) = match self.ssm_mode {
            SsmMode::Selective => {
                let u4 = s.graph.reshape(u, &[b, e, l, 1])?;
                let w_dt = s.p(&self.key(k, "x_proj_dt"))?;
                let w_b = s.p(&self.key(k, "x_proj_b"))?;
                let w_c = s.p(&self.key(k, "x_proj_c"))?;
                let w_up = s.p(&self.key(k, "dt_proj"))?;
                let low = s.graph.conv2d(u4, w_dt, None, 1, 0)?;
                let pre = s.graph.conv2d(low, w_up, Some(dt_bias), 1, 0)?;
                let delta = s.graph.softplus(pre)?;
                let delta = s.graph.reshape(delta, &[b, e, l])?;
                let bm = s.graph.conv2d(u4, w_b, None, 1, 0)?;
                let bm = s.graph.reshape(bm, &[b, n, l])?;
                let cm = s.graph.conv2d(u4, w_c, None, 1, 0)?;
                let cm = s.graph.reshape(cm, &[b, n, l])?;
                (delta, bm, cm)
            }
            SsmMode::Fixed => {
                let zeros_e = s.graph.constant(Tensor::zeros(&[b, e, l]));
                let zeros_n = s.graph.constant(Tensor::zeros(&[b, n, l]));
                let dt = s.graph.reshape(dt_bias, &[1, e, 1])?;
                let dt = s.graph.softplus(dt)?;
                let delta = s.graph.add(zeros_e, dt)?;
                let bv = s.p(&self.key(k, "b"))?;
                let bv = s.graph.reshape(bv, &[1, n, 1])?;
                let bm = s.graph.add(zeros_n, bv)?;
                let cv = s.p(&self.key(k, "c"))?;
                let cv = s.graph.reshape(cv, &[1, n, 1])?;
                let cm = s.graph.add(zeros_n, cv)?;
                (delta, bm, cm)
            }
        };
        s.graph.selective_scan(u, delta, a, bm, cm)
    }
}
