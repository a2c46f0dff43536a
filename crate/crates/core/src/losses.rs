//! Training objective: soft Dice, binary cross-entropy and a boundary-band BCE.
//!
//! Predictions are `(B, 1, H, W)` probabilities in a [`Graph`]; targets are
//! plain `(B, 1, H, W)` 0/1 tensors.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Graph, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
    pub edge: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
    pub edge_radius: usize,
    pub edge_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 1.0,
            bce: 0.5,
            edge: 0.5,
            epsilon: 1e-6,
            edge_radius: 2,
            edge_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dice, self.bce, self.edge].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.edge_radius < 1 {
            return Err(Error::Config("edge_radius must be at least 1".into()));
        }
        if !(self.edge_weight > 0.0) {
            return Err(Error::Config(format!("edge_weight must be positive, got {}", self.edge_weight)));
        }
        Ok(())
    }
}

fn check(g: &Graph, y_hat: Var, y: &Tensor, op: &'static str) -> Result<usize> {
    let s = g.shape(y_hat);
    if s != y.shape() {
        return Err(Error::shape(op, s, y.shape()));
    }
    Ok(s[0])
}

/// `1 - mean_b (2 sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)`, one ratio per sample.
pub fn dice_loss(g: &mut Graph, y_hat: Var, y: &Tensor, epsilon: f64) -> Result<Var> {
    let b = check(g, y_hat, y, "dice_loss")?;
    let n = y.len() / b;
    let y_sq: Vec<f64> = y.data().chunks_exact(n).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let yv = g.constant(y.clone());
    let inter = g.mul(y_hat, yv)?;
    let inter = g.row_sum(inter)?;
    let num = g.mul_scalar(inter, 2.0)?;
    let num = g.add_scalar(num, epsilon)?;
    let p_sq = g.square(y_hat)?;
    let p_sq = g.row_sum(p_sq)?;
    let y_sq = g.constant(Tensor::from_vec(y_sq));
    let den = g.add(p_sq, y_sq)?;
    let den = g.add_scalar(den, epsilon)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio)?;
    let neg = g.neg(mean)?;
    g.add_scalar(neg, 1.0)
}

/// Per-pixel `-(y ln p + (1-y) ln(1-p))` with `p` clamped away from 0 and 1.
fn bce_map(g: &mut Graph, y_hat: Var, y: &Tensor) -> Result<Var> {
    let p = g.clamp(y_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.log(q)?;
    let yv = g.constant(y.clone());
    let ny = g.constant(Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(yv, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    g.neg(s)
}

pub fn bce_loss(g: &mut Graph, y_hat: Var, y: &Tensor) -> Result<Var> {
    check(g, y_hat, y, "bce_loss")?;
    let m = bce_map(g, y_hat, y)?;
    g.mean(m)
}

/// `dilate(y, r) AND NOT erode(y, r)`.
pub fn edge_band(y: &Mask, radius: usize) -> Mask {
    y.dilate(radius).and_not(&y.erode(radius))
}

/// Band masks of every sample of a `(B, 1, H, W)` target, concatenated as 0/1 values.
fn batch_band(y: &Tensor, radius: usize) -> Result<Vec<f64>> {
    let s = y.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("edge_loss", s, &[1]));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(y.len());
    for plane in y.data().chunks_exact(h * w) {
        let m = Mask::binarize(plane, h, w, 0.5)?;
        out.extend(edge_band(&m, radius).to_f64());
    }
    Ok(out)
}

/// BCE averaged over band pixels of the whole batch, times `edge_weight`;
/// zero when no sample has a band.
pub fn edge_loss(g: &mut Graph, y_hat: Var, y: &Tensor, radius: usize, edge_weight: f64) -> Result<Var> {
    check(g, y_hat, y, "edge_loss")?;
    let band = batch_band(y, radius)?;
    let count = band.iter().filter(|&&v| v > 0.0).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let m = bce_map(g, y_hat, y)?;
    let bv = g.constant(Tensor::new(y.shape().to_vec(), band)?);
    let masked = g.mul(m, bv)?;
    let total = g.sum(masked)?;
    g.mul_scalar(total, edge_weight / count as f64)
}

/// The three weighted components and their sum.
pub struct LossParts {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub edge: Var,
}

pub fn total_loss(g: &mut Graph, y_hat: Var, y: &Tensor, w: &LossWeights) -> Result<LossParts> {
    let dice = dice_loss(g, y_hat, y, w.epsilon)?;
    let bce = bce_loss(g, y_hat, y)?;
    let edge = edge_loss(g, y_hat, y, w.edge_radius, w.edge_weight)?;
    let a = g.mul_scalar(dice, w.dice)?;
    let b = g.mul_scalar(bce, w.bce)?;
    let c = g.mul_scalar(edge, w.edge)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossParts { total, dice, bce, edge })
}
