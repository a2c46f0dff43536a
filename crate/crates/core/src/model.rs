//! Full network: hybrid four-stage encoder, gated-skip decoder, output head,
//! plus the parameter state and its checkpoint format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ConvBn, DecoderBlock, MgfSkip, OutputHead, PatchEmbed, Rcb, SkipKind, Vss};
use crate::error::{Error, Result};
use crate::nn::{bind, NormUpdate, Registry, Scope, NORM_MOMENTUM};
use crate::ss2d::{ScanMode, SsmMode};
use crate::tensor::{grad_check_with, read_u32, GradCheckOptions, GradCheckReport, Graph, NormKind, Tensor, Var};

/// Which block family each encoder stage uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    /// Residual convolution blocks in stages 1-2, state-space blocks in 3-4.
    #[default]
    Hybrid,
    /// Residual convolution blocks everywhere.
    Cnn,
    /// State-space blocks everywhere.
    Mamba,
}

impl EncoderKind {
    pub fn uses_vss(self, stage: usize) -> bool {
        match self {
            EncoderKind::Hybrid => stage >= 2,
            EncoderKind::Cnn => false,
            EncoderKind::Mamba => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub state_dim: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub scan_mode: ScanMode,
    pub ssm_mode: SsmMode,
    pub input_size: usize,
    pub in_channels: usize,
    pub skip: SkipKind,
    pub encoder: EncoderKind,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_widths: [32, 64, 128, 256],
            blocks_per_stage: [2, 2, 2, 2],
            state_dim: 8,
            expansion: 2,
            conv_kernel: 3,
            scan_mode: ScanMode::RowMirror,
            ssm_mode: SsmMode::Selective,
            input_size: 64,
            in_channels: 3,
            skip: SkipKind::Mgf,
            encoder: EncoderKind::Hybrid,
            norm: NormKind::Batch,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected four comma-separated integers, got `{v}`")))?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four comma-separated integers, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

fn join(v: &[usize; 4]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "widths",
        "blocks",
        "state_dim",
        "expansion",
        "conv_kernel",
        "scan_mode",
        "ssm_mode",
        "input_size",
        "in_channels",
        "skip",
        "encoder",
        "norm",
    ];

    pub fn validate(&self) -> Result<()> {
        let w = &self.stage_widths;
        if w.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {w:?}")));
        }
        if w.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config(format!("widths must be nondecreasing, got {w:?}")));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(PatchEmbed::MULTIPLE) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                PatchEmbed::MULTIPLE
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("expansion", self.expansion),
            ("in_channels", self.in_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "widths" => self.stage_widths = parse_list(key, v)?,
            "blocks" => self.blocks_per_stage = parse_list(key, v)?,
            "width1" | "width2" | "width3" | "width4" => {
                let i = key.as_bytes()[5] - b'1';
                self.stage_widths[i as usize] = parse_usize(key, v)?;
            }
            "blocks1" | "blocks2" | "blocks3" | "blocks4" => {
                let i = key.as_bytes()[6] - b'1';
                self.blocks_per_stage[i as usize] = parse_usize(key, v)?;
            }
            "state_dim" => self.state_dim = parse_usize(key, v)?,
            "expansion" => self.expansion = parse_usize(key, v)?,
            "conv_kernel" => self.conv_kernel = parse_usize(key, v)?,
            "scan_mode" => self.scan_mode = v.parse()?,
            "ssm_mode" => {
                self.ssm_mode = match v {
                    "selective" => SsmMode::Selective,
                    "fixed" => SsmMode::Fixed,
                    _ => return Err(Error::Config(format!("ssm_mode: expected selective | fixed, got `{v}`"))),
                }
            }
            "input_size" => self.input_size = parse_usize(key, v)?,
            "in_channels" => self.in_channels = parse_usize(key, v)?,
            "skip" => self.skip = v.parse()?,
            "encoder" => {
                self.encoder = match v {
                    "hybrid" => EncoderKind::Hybrid,
                    "cnn" => EncoderKind::Cnn,
                    "mamba" => EncoderKind::Mamba,
                    _ => return Err(Error::Config(format!("encoder: expected hybrid | cnn | mamba, got `{v}`"))),
                }
            }
            "norm" => {
                self.norm = match v {
                    "batch" => NormKind::Batch,
                    "instance" => NormKind::Instance,
                    _ => return Err(Error::Config(format!("norm: expected batch | instance, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("widths", join(&self.stage_widths)),
            ("blocks", join(&self.blocks_per_stage)),
            ("state_dim", self.state_dim.to_string()),
            ("expansion", self.expansion.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("scan_mode", self.scan_mode.to_string()),
            (
                "ssm_mode",
                match self.ssm_mode {
                    SsmMode::Selective => "selective",
                    SsmMode::Fixed => "fixed",
                }
                .into(),
            ),
            ("input_size", self.input_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("skip", self.skip.to_string()),
            (
                "encoder",
                match self.encoder {
                    EncoderKind::Hybrid => "hybrid",
                    EncoderKind::Cnn => "cnn",
                    EncoderKind::Mamba => "mamba",
                }
                .into(),
            ),
            (
                "norm",
                match self.norm {
                    NormKind::Batch => "batch",
                    NormKind::Instance => "instance",
                }
                .into(),
            ),
        ]
    }

    /// First field that differs from `other`, as `(key, self value, other value)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(&'static str, String, String)> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, b)| (a.0, a.1, b.1))
    }
}

enum EncoderBlock {
    Rcb(Rcb),
    Vss(Vss),
}

impl EncoderBlock {
    fn declare(&self, reg: &mut Registry) {
        match self {
            EncoderBlock::Rcb(b) => b.declare(reg),
            EncoderBlock::Vss(b) => b.declare(reg),
        }
    }

    fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        match self {
            EncoderBlock::Rcb(b) => b.forward(s, x),
            EncoderBlock::Vss(b) => b.forward(s, x),
        }
    }
}

/// The layer graph described by a [`ModelConfig`]; holds no tensors.
pub struct Network {
    embed: PatchEmbed,
    downs: Vec<ConvBn>,
    stages: Vec<Vec<EncoderBlock>>,
    skips: Vec<MgfSkip>,
    decoders: Vec<DecoderBlock>,
    head: OutputHead,
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    pub probs: Var,
    /// Encoder features at `H/4 .. H/32`.
    pub encoder: [Var; 4],
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.stage_widths;
        let embed = PatchEmbed {
            prefix: "embed".into(),
            cin: cfg.in_channels,
            cout: w[0],
        };
        let downs = (1..4)
            .map(|i| ConvBn::new(format!("enc{}.down", i + 1), w[i - 1], w[i], 3, 2))
            .collect();
        let stages = (0..4)
            .map(|i| {
                (0..cfg.blocks_per_stage[i])
                    .map(|j| {
                        let prefix = format!("enc{}.block{}", i + 1, j + 1);
                        if cfg.encoder.uses_vss(i) {
                            EncoderBlock::Vss(
                                Vss::new(prefix, w[i], cfg.state_dim, cfg.expansion, cfg.conv_kernel, cfg.scan_mode)
                                    .with_ssm_mode(cfg.ssm_mode),
                            )
                        } else {
                            EncoderBlock::Rcb(Rcb::new(prefix, w[i], w[i]))
                        }
                    })
                    .collect()
            })
            .collect();
        // Decoder stages run 3, 2, 1; index 0 here is stage 3.
        let skips = (0..3)
            .rev()
            .map(|i| MgfSkip::new(format!("dec{}.skip", i + 1), cfg.skip, w[i], w[i + 1]))
            .collect();
        let decoders = (0..3)
            .rev()
            .map(|i| DecoderBlock {
                prefix: format!("dec{}.block", i + 1),
                cin: w[i] + w[i + 1],
                cout: w[i],
            })
            .collect();
        Ok(Network {
            embed,
            downs,
            stages,
            skips,
            decoders,
            head: OutputHead {
                prefix: "head".into(),
                cin: w[0],
            },
        })
    }

    pub fn declare(&self, reg: &mut Registry) {
        self.embed.declare(reg);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                self.downs[i - 1].declare(reg);
            }
            for b in stage {
                b.declare(reg);
            }
        }
        for (skip, dec) in self.skips.iter().zip(&self.decoders) {
            skip.declare(reg);
            dec.declare(reg);
        }
        self.head.declare(reg);
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<ForwardOutput> {
        if !s.graph.value(x).is_finite() {
            return Err(Error::invalid("forward", "input contains non-finite values"));
        }
        let (h, w) = {
            let sh = s.graph.shape(x);
            (sh[2], sh[3])
        };
        let mut f = self.embed.forward(s, x)?;
        let mut enc = [f; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                f = self.downs[i - 1].forward(s, f)?;
            }
            for b in stage {
                f = b.forward(s, f)?;
            }
            enc[i] = f;
        }
        let mut d = enc[3];
        for (k, (skip, dec)) in self.skips.iter().zip(&self.decoders).enumerate() {
            let fused = skip.forward(s, enc[2 - k], d)?;
            d = dec.forward(s, fused)?;
        }
        // The 1x1 head and bilinear upsampling are both linear per pixel and
        // commute exactly; projecting first upsamples one channel instead of w1.
        let logits = self.head.logits(s, d)?;
        let logits = s.graph.resize_bilinear(logits, h, w)?;
        let probs = s.graph.sigmoid(logits)?;
        Ok(ForwardOutput { probs, encoder: enc })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HYMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learnable tensors, normalization running statistics and the config they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub training: bool,
}

/// A forward pass bound into a caller-owned graph.
pub struct Bound {
    pub probs: Var,
    pub encoder: [Var; 4],
    pub params: BTreeMap<String, Var>,
    pub norm_updates: Vec<NormUpdate>,
}

fn registry(cfg: &ModelConfig) -> Result<(Network, Registry)> {
    let net = Network::new(cfg)?;
    let mut reg = Registry::default();
    net.declare(&mut reg);
    Ok((net, reg))
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (_, reg) = registry(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelState {
            params: reg.init_params(&mut rng),
            buffers: reg.init_buffers(),
            config,
            training: false,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Forward pass inside `graph`; parameters become leaves that require grad
    /// when `requires_grad` is set.
    pub fn bind(&self, graph: &mut Graph, x: Var, requires_grad: bool) -> Result<Bound> {
        let net = Network::new(&self.config)?;
        let params = bind(graph, &self.params, requires_grad);
        let mut s = Scope::new(graph, &params, &self.buffers, self.training, self.config.norm);
        let out = net.forward(&mut s, x)?;
        let norm_updates = s.into_updates();
        Ok(Bound {
            probs: out.probs,
            encoder: out.encoder,
            params,
            norm_updates,
        })
    }

    /// Eval-mode probabilities for a `(B, C, H, W)` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let eval = self.as_eval();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let b = eval.bind(&mut g, xv, false)?;
        Ok(g.value(b.probs).clone())
    }

    fn as_eval(&self) -> std::borrow::Cow<'_, ModelState> {
        if self.training {
            let mut s = self.clone();
            s.training = false;
            std::borrow::Cow::Owned(s)
        } else {
            std::borrow::Cow::Borrowed(self)
        }
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.prefix);
                let buf = self.buffers.get_mut(&key).ok_or_else(|| Error::UnknownParam(key.clone()))?;
                if buf.len() != batch.len() {
                    return Err(Error::shape("apply_norm_updates", buf.shape(), &[batch.len()]));
                }
                for (r, b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }

    /// Runs a training-mode forward on each batch and folds the batch
    /// statistics into the running averages; parameters are untouched.
    pub fn calibrate_norms(&mut self, batches: &[Tensor]) -> Result<()> {
        let mut train = self.clone();
        train.training = true;
        for x in batches {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let b = train.bind(&mut g, xv, false)?;
            train.apply_norm_updates(&b.norm_updates)?;
        }
        self.buffers = train.buffers;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        for (k, v) in self.config.to_pairs() {
            manifest.push_str(&format!("config {k} {v}\n"));
        }
        for k in self.params.keys() {
            manifest.push_str(&format!("param {k}\n"));
        }
        for k in self.buffers.keys() {
            manifest.push_str(&format!("buffer {k}\n"));
        }
        let io = |e| Error::io(path, e);
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(manifest.len() as u32).to_le_bytes())?;
            w.write_all(manifest.as_bytes())?;
            for t in self.params.values().chain(self.buffers.values()) {
                t.write_to(&mut w)?;
            }
            w.flush()
        };
        write().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless its config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let state = Self::load(path)?;
        if let Some((key, got, want)) = state.config.first_difference(expected) {
            return Err(Error::Checkpoint(format!(
                "config mismatch on `{key}`: checkpoint has {got}, expected {want}"
            )));
        }
        Ok(state)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u32(r)? as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let (text, rest) = r.split_at(len);
        *r = rest;
        let text = std::str::from_utf8(text).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;

        let mut config = ModelConfig::default();
        let mut param_keys = Vec::new();
        let mut buffer_keys = Vec::new();
        for line in text.lines() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("config"), Some(k), Some(v)) => config.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))?,
                (Some("param"), Some(k), None) => param_keys.push(k.to_string()),
                (Some("buffer"), Some(k), None) => buffer_keys.push(k.to_string()),
                _ => return Err(Error::Checkpoint(format!("bad manifest line `{line}`"))),
            }
        }

        let (_, reg) = registry(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected_p: BTreeMap<&str, &[usize]> =
            reg.params.iter().map(|p| (p.key.as_str(), p.shape.as_slice())).collect();
        let expected_b: BTreeMap<&str, &[usize]> =
            reg.buffers.iter().map(|(k, t)| (k.as_str(), t.shape())).collect();
        key_diff("parameter", expected_p.keys().copied(), &param_keys)?;
        key_diff("buffer", expected_b.keys().copied(), &buffer_keys)?;

        let mut read_all = |keys: &[String], shapes: &BTreeMap<&str, &[usize]>| -> Result<BTreeMap<String, Tensor>> {
            let mut out = BTreeMap::new();
            for k in keys {
                let t = Tensor::read_from(r)?;
                if t.shape() != shapes[k.as_str()] {
                    return Err(Error::Checkpoint(format!(
                        "`{k}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shapes[k.as_str()]
                    )));
                }
                out.insert(k.clone(), t);
            }
            Ok(out)
        };
        let params = read_all(&param_keys, &expected_p)?;
        let buffers = read_all(&buffer_keys, &expected_b)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(ModelState {
            config,
            params,
            buffers,
            training: false,
        })
    }
}

fn key_diff<'a>(what: &str, expected: impl Iterator<Item = &'a str>, found: &[String]) -> Result<()> {
    let expected: BTreeSet<&str> = expected.collect();
    let found_set: BTreeSet<&str> = found.iter().map(String::as_str).collect();
    let missing: Vec<&str> = expected.difference(&found_set).copied().collect();
    let unknown: Vec<&str> = found_set.difference(&expected).copied().collect();
    if missing.is_empty() && unknown.is_empty() && found.len() == found_set.len() {
        return Ok(());
    }
    Err(Error::Checkpoint(format!(
        "{what} keys differ: missing {missing:?}, unknown {unknown:?}"
    )))
}

/// Finite-difference check of a random projection of the network output with
/// respect to the input and every parameter tensor, in the state's mode.
pub fn model_grad_check(state: &ModelState, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let net = Network::new(&state.config)?;
    let keys: Vec<String> = state.params.keys().cloned().collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(state.params.values().cloned());
    let s = x.shape();
    let proj = Tensor::rand_uniform(&[s[0], 1, s[2], s[3]], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37));
    grad_check_with(
        |g: &mut Graph, vs: &[Var]| {
            let map: BTreeMap<String, Var> = keys.iter().cloned().zip(vs[1..].iter().copied()).collect();
            let mut sc = Scope::new(g, &map, &state.buffers, state.training, state.config.norm);
            let y = net.forward(&mut sc, vs[0])?.probs;
            let p = sc.graph.constant(proj.clone());
            let yp = sc.graph.mul(y, p)?;
            sc.graph.sum(yp)
        },
        &inputs,
        opts,
    )
}
