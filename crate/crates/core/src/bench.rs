//! Scan-versus-attention timing and the variant ablation harness.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::SkipKind;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricReport};
use crate::model::{EncoderKind, ModelConfig, ModelState};
use crate::ssm::{selective_scan, SsmParams};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, TrainConfig};

pub const WARMUPS: usize = 2;
pub const MIN_REPS: usize = 5;
/// Measurements shorter than this are repeated in an inner loop.
pub const MIN_SECS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: &'static str,
    pub len: usize,
    /// Seconds per call.
    pub mean_secs: f64,
    pub min_secs: f64,
    pub reps: usize,
    /// Calls per timed repetition.
    pub inner: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub scan_slope: f64,
    pub attention_slope: f64,
    pub warnings: Vec<String>,
}

impl BenchReport {
    /// `method len mean_s min_s reps inner bytes`, tab-separated, then the slopes.
    pub fn to_text(&self) -> String {
        let mut s = String::from("method\tlen\tmean_s\tmin_s\treps\tinner\tbytes\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6e}\t{:.6e}\t{}\t{}\t{}",
                r.method, r.len, r.mean_secs, r.min_secs, r.reps, r.inner, r.bytes
            );
        }
        let _ = writeln!(s, "# slope scan = {:.4}", self.scan_slope);
        let _ = writeln!(s, "# slope attention = {:.4}", self.attention_slope);
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("loglog_slope", "need at least two points"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("loglog_slope", "all lengths are equal"));
    }
    Ok(sxy / sxx)
}

/// Single-head `softmax(Q K^T / sqrt(d)) V` over `(L, d)` row-major inputs.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; len * d];
    let mut scores = vec![0.0; len];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vj;
            }
        }
    }
    out
}

fn time_it(mut f: impl FnMut(), reps: usize) -> (f64, f64, usize, bool) {
    for _ in 0..WARMUPS {
        f();
    }
    let mut inner = 1;
    let mut raised = false;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        if t.elapsed().as_secs_f64() >= MIN_SECS || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
        raised = true;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        times.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, min, inner, raised)
}

/// Times the selective scan and the attention baseline at `channels` width
/// over each length. Lengths must be strictly increasing, at least four, and
/// span a factor of 16 or more.
pub fn bench_scan(lengths: &[usize], reps: usize, channels: usize, state: usize, seed: u64) -> Result<BenchReport> {
    if lengths.len() < 4 {
        return Err(Error::invalid(
            "bench_scan",
            format!("need at least four lengths to fit a slope, got {}", lengths.len()),
        ));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::invalid("bench_scan", "lengths must be positive and strictly increasing"));
    }
    if lengths[lengths.len() - 1] < 16 * lengths[0] {
        return Err(Error::invalid("bench_scan", "lengths must span at least a factor of 16"));
    }
    if reps < MIN_REPS {
        return Err(Error::invalid("bench_scan", format!("reps must be at least {MIN_REPS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let (d, n) = (channels, state);
    for &l in lengths {
        let x = Tensor::rand_uniform(&[l, d], -1.0, 1.0, &mut rng);
        let params = SsmParams {
            a: Tensor::rand_uniform(&[d, n], -2.0, -0.1, &mut rng),
            delta: Tensor::rand_uniform(&[l, d], 0.01, 0.1, &mut rng),
            b: Tensor::rand_uniform(&[l, n], -1.0, 1.0, &mut rng),
            c: Tensor::rand_uniform(&[l, n], -1.0, 1.0, &mut rng),
        };
        let (mean, min, inner, raised) = time_it(|| {
            black_box(selective_scan(black_box(&x), black_box(&params)).expect("scan shapes"));
        }, reps);
        if raised {
            warnings.push(format!("scan L={l}: single call under 1 ms, timed {inner} calls per repetition"));
        }
        records.push(BenchRecord {
            method: "scan",
            len: l,
            mean_secs: mean,
            min_secs: min,
            reps,
            inner,
            // x, delta, y and the cached states, plus B and C.
            bytes: 8 * (3 * l * d + l * d * n + 2 * l * n),
        });

        let qkv: Vec<Vec<f64>> = (0..3).map(|_| (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (mean, min, inner, raised) = time_it(|| {
            black_box(naive_attention(black_box(&qkv[0]), &qkv[1], &qkv[2], l, d));
        }, reps);
        if raised {
            warnings.push(format!("attention L={l}: single call under 1 ms, timed {inner} calls per repetition"));
        }
        records.push(BenchRecord {
            method: "attention",
            len: l,
            mean_secs: mean,
            min_secs: min,
            reps,
            inner,
            // Q, K, V, output, plus every score row re-read once.
            bytes: 8 * (4 * l * d + l * l),
        });
    }
    let slope = |m: &str| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.len as f64, r.min_secs))
            .unzip();
        loglog_slope(&xs, &ys)
    };
    Ok(BenchReport {
        scan_slope: slope("scan")?,
        attention_slope: slope("attention")?,
        records,
        warnings,
    })
}

/// Model variants compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Concat,
    Cnn,
    Mamba,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Concat, Variant::Cnn, Variant::Mamba];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Concat => "concat",
            Variant::Cnn => "cnn",
            Variant::Mamba => "mamba",
        }
    }

    /// `base` with this variant's skip fusion and encoder.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {
                cfg.skip = SkipKind::Mgf;
                cfg.encoder = EncoderKind::Hybrid;
            }
            Variant::Concat => {
                cfg.skip = SkipKind::Concat;
                cfg.encoder = EncoderKind::Hybrid;
            }
            Variant::Cnn => {
                cfg.skip = SkipKind::Mgf;
                cfg.encoder = EncoderKind::Cnn;
            }
            Variant::Mamba => {
                cfg.skip = SkipKind::Mgf;
                cfg.encoder = EncoderKind::Mamba;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (full | concat | cnn | mamba)")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test-set report of each seed's best checkpoint, in seed order.
    pub runs: Vec<MetricReport>,
}

impl AblationRow {
    fn over_seeds(&self, f: impl Fn(&MetricReport) -> f64) -> MeanStd {
        MeanStd::of(self.runs.iter().map(f))
    }

    pub fn dsc(&self) -> MeanStd {
        self.over_seeds(|r| r.dsc().mean)
    }

    pub fn iou(&self) -> MeanStd {
        self.over_seeds(|r| r.iou().mean)
    }

    pub fn hd95(&self) -> MeanStd {
        self.over_seeds(|r| r.hd95().mean)
    }

    pub fn precision(&self) -> MeanStd {
        self.over_seeds(|r| r.precision().mean)
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>16} {:>16} {:>16} {:>16}", "variant", "DSC", "IoU", "HD95(px)", "PRE");
        let ms = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>16} {:>16} {:>16} {:>16}",
                r.variant.name(),
                ms(r.dsc()),
                ms(r.iou()),
                ms(r.hd95()),
                ms(r.precision())
            );
        }
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        s
    }
}

/// Trains every variant once per seed under the same budget and evaluates the
/// best checkpoint on `test`. The seed drives both initialization and the
/// training shuffle; the data is shared.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: [&[Sample]; 3],
    mut on_run: impl FnMut(Variant, u64, &MetricReport),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let [train_set, val_set, test_set] = data;
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let mut runs = Vec::new();
        for &seed in seeds {
            let init = ModelState::init(cfg.clone(), seed)?;
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            let out = train(&init, train_set, val_set, &tc, |_| {})?;
            if let Some(why) = out.halted {
                return Err(Error::Training(format!("{} seed {seed}: {why}", v.name())));
            }
            let report = evaluate(&out.best, test_set, tc.threshold)?;
            on_run(v, seed, &report);
            runs.push(report);
        }
        rows.push(AblationRow { variant: v, runs });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&[2.0], &[1.0]).is_err());
    }

    #[test]
    fn bench_rejects_bad_lengths() {
        assert!(bench_scan(&[64], 5, 4, 2, 0).is_err());
        assert!(bench_scan(&[8, 16, 32, 64], 5, 4, 2, 0).is_err());
        assert!(bench_scan(&[8, 16, 16, 128], 5, 4, 2, 0).is_err());
        assert!(bench_scan(&[8, 16, 32, 128], 3, 4, 2, 0).is_err());
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("unet".parse::<Variant>().is_err());
    }
}
