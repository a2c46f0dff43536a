//! Overlap and boundary-distance metrics over binary masks.
//!
//! Empty-mask conventions: `dsc` and `iou` are 1 when both masks are empty;
//! `precision` with an empty prediction is 1 if the truth is empty, else 0;
//! `hd95` is undefined (`None`) when either mask is empty and such images are
//! left out of its mean.

use std::fmt::Write as _;

use crate::error::Result;
use crate::mask::Mask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `(|P ∩ G|, |P|, |G|)`.
fn counts(p: &Mask, g: &Mask) -> Result<(usize, usize, usize)> {
    p.same_shape(g)?;
    let mut inter = 0;
    for (&a, &b) in p.bits().iter().zip(g.bits()) {
        inter += (a && b) as usize;
    }
    Ok((inter, p.count(), g.count()))
}

pub fn dsc(p: &Mask, g: &Mask) -> Result<f64> {
    let (i, np, ng) = counts(p, g)?;
    Ok(if np + ng == 0 { 1.0 } else { 2.0 * i as f64 / (np + ng) as f64 })
}

pub fn iou(p: &Mask, g: &Mask) -> Result<f64> {
    let (i, np, ng) = counts(p, g)?;
    let union = np + ng - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

pub fn precision(p: &Mask, g: &Mask) -> Result<f64> {
    let (i, np, ng) = counts(p, g)?;
    Ok(match (np, ng) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => i as f64 / np as f64,
    })
}

/// Inclusive linear-interpolation percentile: position `q (n - 1)` in the sorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn nearest_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r as i64 - r2 as i64;
                    let dc = c as i64 - c2 as i64;
                    dr * dr + dc * dc
                })
                .min()
                .unwrap() as f64
        })
        .collect()
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], q: f64) -> f64 {
    let mut d: Vec<f64> = nearest_sq(from, to).into_iter().map(f64::sqrt).collect();
    percentile(&mut d, q)
}

/// 95th-percentile symmetric boundary distance in pixels, by direct search.
pub fn hd95(p: &Mask, g: &Mask) -> Result<Option<f64>> {
    p.same_shape(g)?;
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    let (bp, bg) = (p.boundary(), g.boundary());
    Ok(Some(directed(&bp, &bg, 0.95).max(directed(&bg, &bp, 0.95))))
}

/// Largest boundary-to-boundary nearest distance (the exact Hausdorff distance of the boundaries).
pub fn hausdorff(p: &Mask, g: &Mask) -> Result<Option<f64>> {
    p.same_shape(g)?;
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    let (bp, bg) = (p.boundary(), g.boundary());
    Ok(Some(directed(&bp, &bg, 1.0).max(directed(&bg, &bp, 1.0))))
}

/// Exact squared Euclidean distance transform to the nearest `sites` pixel,
/// by the two-pass lower-envelope method.
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    const INF: f64 = 1e30;
    let mut grid = vec![INF; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let pass = |f: &[f64]| -> Vec<f64> {
        let n = f.len();
        let mut d = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        let mut k = 0;
        let Some(first) = f.iter().position(|&x| x < INF) else {
            return vec![INF; n];
        };
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if f[q] >= INF {
                continue;
            }
            // z[0] is -inf, so the envelope never pops its first parabola.
            let s = loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] {
                    k -= 1;
                } else {
                    break s;
                }
            };
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0;
        for (q, out) in d.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            *out = dq * dq + f[p];
        }
        d
    };
    let mut tmp = vec![0.0; h * w];
    for c in 0..w {
        let col: Vec<f64> = (0..h).map(|r| grid[r * w + c]).collect();
        for (r, v) in pass(&col).into_iter().enumerate() {
            tmp[r * w + c] = v;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        out[r * w..(r + 1) * w].copy_from_slice(&pass(&tmp[r * w..(r + 1) * w]));
    }
    out
}

/// [`hd95`] through distance transforms of each boundary.
pub fn hd95_edt(p: &Mask, g: &Mask) -> Result<Option<f64>> {
    p.same_shape(g)?;
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    let (h, w) = (p.height(), p.width());
    let (bp, bg) = (p.boundary(), g.boundary());
    let (dp, dg) = (squared_edt(h, w, &bp), squared_edt(h, w, &bg));
    let mut a: Vec<f64> = bp.iter().map(|&(r, c)| dg[r * w + c].sqrt()).collect();
    let mut b: Vec<f64> = bg.iter().map(|&(r, c)| dp[r * w + c].sqrt()).collect();
    Ok(Some(percentile(&mut a, 0.95).max(percentile(&mut b, 0.95))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub precision: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, p: &Mask, g: &Mask) -> Result<Self> {
        Ok(ImageMetrics {
            id: id.into(),
            iou: iou(p, g)?,
            dsc: dsc(p, g)?,
            hd95: hd95(p, g)?,
            precision: precision(p, g)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Population mean and standard deviation; NaN for an empty set.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        MeanStd { mean, std: var.sqrt(), count: n }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    pub fn iou(&self) -> MeanStd {
        MeanStd::of(self.images.iter().map(|m| m.iou))
    }

    pub fn dsc(&self) -> MeanStd {
        MeanStd::of(self.images.iter().map(|m| m.dsc))
    }

    /// Over images where the distance is defined.
    pub fn hd95(&self) -> MeanStd {
        MeanStd::of(self.images.iter().filter_map(|m| m.hd95))
    }

    pub fn precision(&self) -> MeanStd {
        MeanStd::of(self.images.iter().map(|m| m.precision))
    }

    pub fn undefined_hd95(&self) -> usize {
        self.images.iter().filter(|m| m.hd95.is_none()).count()
    }

    /// Per-image rows and a mean ± std footer, columns IoU, DSC, HD95, PRE.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>10} {:>8}", "id", "IoU", "DSC", "HD95(px)", "PRE");
        for m in &self.images {
            let hd = m.hd95.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>8.4} {:>10} {:>8.4}",
                m.id, m.iou, m.dsc, hd, m.precision
            );
        }
        let ms = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>10} {:>8}",
            "mean±std",
            ms(self.iou()),
            ms(self.dsc()),
            ms(self.hd95()),
            ms(self.precision())
        );
        let undefined = self.undefined_hd95();
        if undefined > 0 {
            let _ = writeln!(s, "hd95 undefined (empty mask) for {undefined} image(s), excluded from its mean");
        }
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.images.len());
        for (name, m) in [
            ("iou", self.iou()),
            ("dsc", self.dsc()),
            ("hd95", self.hd95()),
            ("precision", self.precision()),
        ] {
            let _ = writeln!(s, "{name}_mean = {}", m.mean);
            let _ = writeln!(s, "{name}_std = {}", m.std);
        }
        let _ = writeln!(s, "hd95_undefined = {}", self.undefined_hd95());
        let _ = writeln!(s, "hd95_units = pixels");
        s
    }
}
