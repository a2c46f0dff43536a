//! Network building blocks: convolution units, residual convolution block,
//! visual state-space block, gated fusion skip, patch embedding, decoder
//! block and output head.
//!
//! Each block is a plain description (prefix and widths). `declare` lists its
//! parameters into a [`Registry`]; `forward` looks them up in a [`Scope`].

use crate::error::{Error, Result};
use crate::nn::{Init, Registry, Scope};
use crate::ss2d::{ScanMode, Ss2d, SsmMode};
use crate::tensor::Var;

fn conv_weight(reg: &mut Registry, key: String, cout: usize, cin: usize, k: usize) {
    reg.param(key, &[cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k });
}

/// Pointwise linear layer stored as a 1x1 convolution with bias.
fn linear(reg: &mut Registry, prefix: &str, cout: usize, cin: usize) {
    reg.param(
        format!("{prefix}.weight"),
        &[cout, cin, 1, 1],
        Init::XavierUniform { fan_in: cin, fan_out: cout },
    );
    reg.param(format!("{prefix}.bias"), &[cout], Init::Zeros);
}

fn apply_linear(s: &mut Scope<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.p(&format!("{prefix}.weight"))?;
    let b = s.p(&format!("{prefix}.bias"))?;
    s.graph.conv2d(x, w, Some(b), 1, 0)
}

/// `k x k` convolution (no bias), normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBn {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvBn {
            prefix: prefix.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn declare(&self, reg: &mut Registry) {
        conv_weight(reg, format!("{}.conv.weight", self.prefix), self.cout, self.cin, self.kernel);
        reg.norm(&format!("{}.bn", self.prefix), self.cout);
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let w = s.p(&format!("{}.conv.weight", self.prefix))?;
        let y = s.graph.conv2d(x, w, None, self.stride, self.kernel / 2)?;
        let y = s.norm(&format!("{}.bn", self.prefix), y)?;
        s.graph.relu(y)
    }
}

/// Residual convolution block: two 3x3 conv+BN+ReLU units plus the input,
/// projected by a 1x1 convolution when the width changes.
#[derive(Clone, Debug)]
pub struct Rcb {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
}

impl Rcb {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize) -> Self {
        Rcb {
            prefix: prefix.into(),
            cin,
            cout,
        }
    }

    fn units(&self) -> [ConvBn; 2] {
        [
            ConvBn::new(format!("{}.conv1", self.prefix), self.cin, self.cout, 3, 1),
            ConvBn::new(format!("{}.conv2", self.prefix), self.cout, self.cout, 3, 1),
        ]
    }

    pub fn declare(&self, reg: &mut Registry) {
        for u in self.units() {
            u.declare(reg);
        }
        if self.cin != self.cout {
            conv_weight(reg, format!("{}.proj.weight", self.prefix), self.cout, self.cin, 1);
        }
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let [u1, u2] = self.units();
        let y = u1.forward(s, x)?;
        let y = u2.forward(s, y)?;
        let skip = if self.cin != self.cout {
            let w = s.p(&format!("{}.proj.weight", self.prefix))?;
            s.graph.conv2d(x, w, None, 1, 0)?
        } else {
            x
        };
        s.graph.add(y, skip)
    }
}

/// Visual state-space block:
/// `out = Linear(SS2D(Conv1d(SiLU(Linear(x)))) * SiLU(Linear'(x))) + x`.
#[derive(Clone, Debug)]
pub struct Vss {
    pub prefix: String,
    pub channels: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub ss2d: Ss2d,
}

impl Vss {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        state_dim: usize,
        expansion: usize,
        conv_kernel: usize,
        scan_mode: ScanMode,
    ) -> Self {
        let prefix = prefix.into();
        let inner = channels * expansion;
        Vss {
            ss2d: Ss2d::new(format!("{prefix}.ss2d"), inner, state_dim, scan_mode),
            prefix,
            channels,
            expansion,
            conv_kernel,
        }
    }

    pub fn with_ssm_mode(mut self, mode: SsmMode) -> Self {
        self.ss2d.ssm_mode = mode;
        self
    }

    fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn declare(&self, reg: &mut Registry) {
        let (c, e, p) = (self.channels, self.inner(), &self.prefix);
        linear(reg, &format!("{p}.in_proj"), e, c);
        linear(reg, &format!("{p}.gate_proj"), e, c);
        reg.param(
            format!("{p}.conv1d.weight"),
            &[e, self.conv_kernel],
            Init::HeUniform { fan_in: self.conv_kernel },
        );
        reg.param(format!("{p}.conv1d.bias"), &[e], Init::Zeros);
        self.ss2d.declare(reg);
        linear(reg, &format!("{p}.out_proj"), c, e);
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let xs = apply_linear(s, &format!("{p}.in_proj"), x)?;
        let xs = s.graph.silu(xs)?;
        let z = apply_linear(s, &format!("{p}.gate_proj"), x)?;
        let z = s.graph.silu(z)?;
        let cw = s.p(&format!("{p}.conv1d.weight"))?;
        let cb = s.p(&format!("{p}.conv1d.bias"))?;
        let scanned = self.ss2d.forward(s, xs, Some((cw, cb)))?;
        let gated = s.graph.mul(scanned, z)?;
        let y = apply_linear(s, &format!("{p}.out_proj"), gated)?;
        s.graph.add(y, x)
    }
}

/// Single-channel spatial gate `sigmoid(conv1x1(relu(conv3x3(d_up))))`.
#[derive(Clone, Debug)]
pub struct MgfGate {
    pub prefix: String,
    pub cin: usize,
    pub hidden: usize,
}

impl MgfGate {
    pub fn declare(&self, reg: &mut Registry) {
        let p = &self.prefix;
        conv_weight(reg, format!("{p}.conv3.weight"), self.hidden, self.cin, 3);
        reg.param(format!("{p}.conv3.bias"), &[self.hidden], Init::Zeros);
        conv_weight(reg, format!("{p}.conv1.weight"), 1, self.hidden, 1);
        reg.param(format!("{p}.conv1.bias"), &[1], Init::Zeros);
    }

    pub fn forward(&self, s: &mut Scope<'_>, d_up: Var) -> Result<Var> {
        let p = &self.prefix;
        let w3 = s.p(&format!("{p}.conv3.weight"))?;
        let b3 = s.p(&format!("{p}.conv3.bias"))?;
        let w1 = s.p(&format!("{p}.conv1.weight"))?;
        let b1 = s.p(&format!("{p}.conv1.bias"))?;
        let h = s.graph.conv2d(d_up, w3, Some(b3), 1, 1)?;
        let h = s.graph.relu(h)?;
        let g = s.graph.conv2d(h, w1, Some(b1), 1, 0)?;
        s.graph.sigmoid(g)
    }
}

/// How encoder features join the decoder path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SkipKind {
    /// Gated fusion: `concat(E + E * G, up(D))`.
    #[default]
    Mgf,
    /// Plain U-Net skip: `concat(E, up(D))`.
    Concat,
}

impl std::str::FromStr for SkipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mgf" => Ok(SkipKind::Mgf),
            "concat" => Ok(SkipKind::Concat),
            other => Err(Error::Config(format!("unknown skip `{other}` (mgf | concat)"))),
        }
    }
}

impl std::fmt::Display for SkipKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipKind::Mgf => "mgf",
            SkipKind::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug)]
pub struct MgfSkip {
    pub kind: SkipKind,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub gate: MgfGate,
}

impl MgfSkip {
    pub fn new(prefix: impl Into<String>, kind: SkipKind, enc_channels: usize, dec_channels: usize) -> Self {
        MgfSkip {
            kind,
            enc_channels,
            dec_channels,
            gate: MgfGate {
                prefix: format!("{}.gate", prefix.into()),
                cin: dec_channels,
                hidden: enc_channels,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.enc_channels + self.dec_channels
    }

    pub fn declare(&self, reg: &mut Registry) {
        if self.kind == SkipKind::Mgf {
            self.gate.declare(reg);
        }
    }

    /// `e` is `(B, Ce, H, W)`, `d` is `(B, Cd, H/2, W/2)`.
    pub fn forward(&self, s: &mut Scope<'_>, e: Var, d: Var) -> Result<Var> {
        let (se, sd) = (s.graph.shape(e).to_vec(), s.graph.shape(d).to_vec());
        if se.len() != 4 || sd.len() != 4 || se[2] != 2 * sd[2] || se[3] != 2 * sd[3] || se[0] != sd[0] {
            return Err(Error::shape("mgf_skip", &se, &sd));
        }
        let d_up = s.graph.upsample_bilinear(d, 2)?;
        let enc = match self.kind {
            SkipKind::Mgf => {
                let g = self.gate.forward(s, d_up)?;
                let filtered = s.graph.mul(e, g)?;
                s.graph.add(e, filtered)?
            }
            SkipKind::Concat => e,
        };
        s.graph.concat(&[enc, d_up], 1)
    }
}

/// Two stride-2 3x3 conv+BN+ReLU units taking an RGB image to `H/4`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
}

impl PatchEmbed {
    pub const MULTIPLE: usize = 32;

    fn units(&self) -> [ConvBn; 2] {
        let mid = (self.cout / 2).max(1);
        [
            ConvBn::new(format!("{}.conv1", self.prefix), self.cin, mid, 3, 2),
            ConvBn::new(format!("{}.conv2", self.prefix), mid, self.cout, 3, 2),
        ]
    }

    pub fn declare(&self, reg: &mut Registry) {
        for u in self.units() {
            u.declare(reg);
        }
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cin {
            return Err(Error::shape("patch_embed", &shape, &[self.cin]));
        }
        if !shape[2].is_multiple_of(Self::MULTIPLE) || !shape[3].is_multiple_of(Self::MULTIPLE) {
            return Err(Error::invalid(
                "patch_embed",
                format!(
                    "input {}x{} must be a multiple of {} on both sides",
                    shape[2],
                    shape[3],
                    Self::MULTIPLE
                ),
            ));
        }
        let [u1, u2] = self.units();
        let y = u1.forward(s, x)?;
        u2.forward(s, y)
    }
}

/// Two 3x3 conv+BN+ReLU units reducing a fused skip to the stage width.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
}

impl DecoderBlock {
    fn units(&self) -> [ConvBn; 2] {
        [
            ConvBn::new(format!("{}.conv1", self.prefix), self.cin, self.cout, 3, 1),
            ConvBn::new(format!("{}.conv2", self.prefix), self.cout, self.cout, 3, 1),
        ]
    }

    pub fn declare(&self, reg: &mut Registry) {
        for u in self.units() {
            u.declare(reg);
        }
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let [u1, u2] = self.units();
        let y = u1.forward(s, x)?;
        u2.forward(s, y)
    }
}

/// 1x1 convolution to one channel followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub prefix: String,
    pub cin: usize,
}

impl OutputHead {
    pub fn declare(&self, reg: &mut Registry) {
        let p = &self.prefix;
        conv_weight(reg, format!("{p}.weight"), 1, self.cin, 1);
        reg.param(format!("{p}.bias"), &[1], Init::Zeros);
    }

    /// Pre-sigmoid logits.
    pub fn logits(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        apply_linear(s, &self.prefix, x)
    }

    pub fn forward(&self, s: &mut Scope<'_>, x: Var) -> Result<Var> {
        let z = self.logits(s, x)?;
        s.graph.sigmoid(z)
    }
}
