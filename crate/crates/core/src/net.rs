//! The frequency-spatial thermal prediction network.
//!
//! Data flow for one sample with standardized inputs `[8, 4, R, C]`
//! (channels first, then the four physical layers):
//!
//! ```text
//! geometry channels ─ PPNet ─┐
//! power channels ────────────┴─ concat ─ embed ─ stage 1 ─ down ─ stage 2 ─ down ─ stage 3 ─ down ─ stage 4
//!                                                  │                 │                 │                 │
//!                                                  └──────────── cross-scale attention (or identity) ───┘
//!                                                                          │
//! head ─ level 1 ─ up ─ level 2 ─ up ─ level 3 ─ up ─ level 4 ─ (stage 4 bottleneck)
//! ```
//!
//! The depth axis is never resampled. Every module declares its parameters
//! through [`ParamSpec`]s and binds them by dotted name at forward time, so
//! the parameter set is a pure function of [`NetConfig`].

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv3dSpec, Graph, ParamMap, Padding, ResampleMode, Var};
use crate::dataset::{GEOMETRY_CHANNELS, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::spectral::{apply_freq_weight, dct3, dct_along, idct3, FreqBandParams};
use crate::tensor::Tensor;
use crate::thermal::NUM_LAYERS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channels of the first encoder stage; stage `s` has `C₀·2^s`.
    pub base_channels: usize,
    /// Encoder blocks per stage.
    pub stage_depths: [usize; 4],
    /// Stacked cross-scale attention layers.
    pub fci_depth: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Lateral token grid `(H_t, W_t)`; depth stays 4.
    pub token_grid: [usize; 2],
    pub ffn_ratio: usize,
    pub ppnet_channels: usize,
    /// Residual blocks in the PPNet trunk.
    pub ppnet_depth: usize,
    pub freq_branch: bool,
    pub spatial_branch: bool,
    pub fciformer: bool,
    /// Whether training uses the frequency loss term.
    pub freq_loss: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 16,
            stage_depths: [1, 1, 2, 1],
            fci_depth: 2,
            heads: 4,
            token_dim: 128,
            token_grid: [8, 8],
            ffn_ratio: 4,
            ppnet_channels: 8,
            ppnet_depth: 2,
            freq_branch: true,
            spatial_branch: true,
            fciformer: true,
            freq_loss: true,
        }
    }
}

impl NetConfig {
    /// Smallest useful configuration, for tests and desk-scale runs.
    pub fn micro() -> Self {
        NetConfig {
            base_channels: 4,
            stage_depths: [1, 1, 1, 1],
            fci_depth: 1,
            heads: 2,
            token_dim: 8,
            token_grid: [2, 2],
            ffn_ratio: 2,
            ppnet_channels: 4,
            ppnet_depth: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("fci_depth", self.fci_depth),
            ("heads", self.heads),
            ("token_dim", self.token_dim),
            ("token_grid rows", self.token_grid[0]),
            ("token_grid cols", self.token_grid[1]),
            ("ffn_ratio", self.ffn_ratio),
            ("ppnet_channels", self.ppnet_channels),
            ("ppnet_depth", self.ppnet_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::InvalidConfig("every stage needs at least one block".into()));
        }
        if !self.freq_branch && !self.spatial_branch {
            return Err(Error::InvalidConfig("at least one encoder branch must be enabled".into()));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Checks that an `R × C` grid fits the pyramid and token grid.
    pub fn check_grid(&self, rows: usize, cols: usize) -> Result<()> {
        if rows % 8 != 0 || cols % 8 != 0 {
            return Err(Error::InvalidConfig(format!("grid {rows}x{cols} must be divisible by 8")));
        }
        if self.fciformer {
            let [th, tw] = self.token_grid;
            for s in 0..4 {
                let (h, w) = (rows >> s, cols >> s);
                if h % th != 0 || w % tw != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "token grid {th}x{tw} does not divide stage {} resolution {h}x{w}",
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−b, b)`.
    Uniform(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Initial values for `specs`. Each tensor draws from its own stream keyed
/// by `(seed, name)`.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamMap {
    specs
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::Const(v) => Tensor::full(&s.dims, v),
                Init::Uniform(b) => Tensor::uniform(&s.dims, -b, b, &mut param_rng(seed, &s.name)),
            };
            (s.name.clone(), t)
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    groups: usize,
    bias: Option<f64>,
}

impl Conv {
    fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: [1, 1, 1],
            groups: 1,
            bias: Some(0.0),
        }
    }

    fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, [1, 1, 1])
    }

    fn full(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, [3, 3, 3])
    }

    /// Instance norm removes per-channel constants, so a bias in front of
    /// one would never receive a gradient.
    fn before_instance_norm(mut self) -> Self {
        self.bias = None;
        self
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.cin / self.groups * self.kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut dims = vec![self.cout, self.cin / self.groups];
        dims.extend(self.kernel);
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            dims,
            init: Init::Uniform(bound),
        });
        if let Some(b) = self.bias {
            out.push(ParamSpec {
                name: format!("{}.bias", self.name),
                dims: vec![self.cout],
                init: Init::Const(b),
            });
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.weight", self.name))?;
        let b = match self.bias {
            Some(_) => Some(g.param(p, &format!("{}.bias", self.name))?),
            None => None,
        };
        let spec = Conv3dSpec {
            stride: self.stride,
            padding: Padding::Reflect,
            groups: self.groups,
        };
        g.conv3d(x, w, b, spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    /// Over the channel axis at every position.
    Layer,
    /// Per channel over depth, rows and columns.
    Instance,
}

#[derive(Clone, Debug)]
struct Norm {
    name: String,
    channels: usize,
    kind: NormKind,
}

impl Norm {
    fn layer(name: impl Into<String>, channels: usize) -> Self {
        Norm { name: name.into(), channels, kind: NormKind::Layer }
    }

    fn instance(name: impl Into<String>, channels: usize) -> Self {
        Norm { name: name.into(), channels, kind: NormKind::Instance }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        for (suffix, v) in [("gamma", 1.0), ("beta", 0.0)] {
            out.push(ParamSpec {
                name: format!("{}.{suffix}", self.name),
                dims: vec![self.channels, 1, 1, 1],
                init: Init::Const(v),
            });
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let gamma = g.param(p, &format!("{}.gamma", self.name))?;
        let beta = g.param(p, &format!("{}.beta", self.name))?;
        match self.kind {
            NormKind::Layer => g.layer_norm(x, 0, gamma, beta),
            NormKind::Instance => g.instance_norm(x, gamma, beta),
        }
    }
}

/// Two pointwise layers with a GELU between them.
#[derive(Clone, Debug)]
struct Ffn {
    up: Conv,
    down: Conv,
}

impl Ffn {
    fn new(name: &str, c: usize, ratio: usize) -> Self {
        Ffn {
            up: Conv::pointwise(format!("{name}.up"), c, c * ratio),
            down: Conv::pointwise(format!("{name}.down"), c * ratio, c),
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.up.specs(out);
        self.down.specs(out);
    }

    fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
struct FreqBranch {
    proj: Conv,
    bands: String,
    gate: Conv,
    channels: usize,
}

#[derive(Clone, Debug)]
struct SpatialBranch {
    conv_a: Conv,
    norm_a: Norm,
    conv_b: Conv,
    norm_b: Norm,
}

/// One encoder block: normalized dual-branch mixing followed by an FFN,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm_in: Norm,
    depthwise: Conv,
    freq: Option<FreqBranch>,
    spatial: Option<SpatialBranch>,
    fuse: Conv,
    norm_ffn: Norm,
    ffn: Ffn,
}

impl EncoderBlock {
    /// A block on `c` channels whose parameters are prefixed by `name`.
    pub fn new(name: &str, c: usize, cfg: &NetConfig) -> Self {
        let freq = cfg.freq_branch.then(|| {
            let mut gate = Conv::pointwise(format!("{name}.freq.gate"), c, c);
            gate.bias = Some(2.0);
            FreqBranch {
                proj: Conv::pointwise(format!("{name}.freq.proj"), c, c),
                bands: format!("{name}.freq.bands"),
                gate,
                channels: c,
            }
        });
        let spatial = cfg.spatial_branch.then(|| SpatialBranch {
            conv_a: Conv::full(format!("{name}.spatial.conv_a"), c, c).before_instance_norm(),
            norm_a: Norm::instance(format!("{name}.spatial.norm_a"), c),
            conv_b: Conv::full(format!("{name}.spatial.conv_b"), c, c).before_instance_norm(),
            norm_b: Norm::instance(format!("{name}.spatial.norm_b"), c),
        });
        let mut depthwise = Conv::full(format!("{name}.depthwise"), c, c);
        depthwise.groups = c;
        EncoderBlock {
            norm_in: Norm::layer(format!("{name}.norm_in"), c),
            depthwise,
            freq,
            spatial,
            fuse: Conv::pointwise(format!("{name}.fuse"), c, c),
            norm_ffn: Norm::layer(format!("{name}.norm_ffn"), c),
            ffn: Ffn::new(&format!("{name}.ffn"), c, cfg.ffn_ratio),
        }
    }

    /// Parameters this module binds, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.specs(&mut out);
        out
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm_in.specs(out);
        self.depthwise.specs(out);
        if let Some(f) = &self.freq {
            f.proj.specs(out);
            out.push(ParamSpec {
                name: f.bands.clone(),
                dims: vec![f.channels, 3],
                init: Init::Const(0.0),
            });
            f.gate.specs(out);
        }
        if let Some(s) = &self.spatial {
            s.conv_a.specs(out);
            s.norm_a.specs(out);
            s.conv_b.specs(out);
            s.norm_b.specs(out);
        }
        self.fuse.specs(out);
        self.norm_ffn.specs(out);
        self.ffn.specs(out);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let h = self.norm_in.forward(g, p, x)?;
        let h = self.depthwise.forward(g, p, h)?;
        let mut branches = Vec::with_capacity(2);
        if let Some(f) = &self.freq {
            let a = f.proj.forward(g, p, h)?;
            let spectrum = dct3(g, a)?;
            let exponents = g.param(p, &f.bands)?;
            let weighted = apply_freq_weight(g, &spectrum, &FreqBandParams { exponents })?;
            let filtered = idct3(g, &weighted)?;
            let gate = f.gate.forward(g, p, h)?;
            let gate = g.sigmoid(gate);
            branches.push(g.mul(filtered, gate)?);
        }
        if let Some(s) = &self.spatial {
            let a = s.conv_a.forward(g, p, h)?;
            let a = s.norm_a.forward(g, p, a)?;
            let a = g.silu(a);
            let a = s.conv_b.forward(g, p, a)?;
            let a = s.norm_b.forward(g, p, a)?;
            let a = g.add(a, h)?;
            branches.push(g.silu(a));
        }
        let mixed = match branches[..] {
            [one] => one,
            [a, b] => g.add(a, b)?,
            _ => unreachable!("configuration validation keeps one branch"),
        };
        let mixed = self.fuse.forward(g, p, mixed)?;
        let x = g.add(x, mixed)?;
        let h = self.norm_ffn.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Per-layer preprocessing of geometry and heat-exchange channels. Every
/// kernel has depth 1, so the four layers never exchange information.
#[derive(Clone, Debug)]
pub struct PpNet {
    stem: Conv,
    trunk: Vec<(Conv, Conv)>,
}

impl PpNet {
    pub fn new(cfg: &NetConfig) -> Self {
        let c = cfg.ppnet_channels;
        let mut stem = Conv::new("ppnet.stem", GEOMETRY_CHANNELS, c, [1, 3, 3]);
        stem.stride = [1, 2, 2];
        let trunk = (0..cfg.ppnet_depth)
            .map(|i| {
                (
                    Conv::new(format!("ppnet.trunk{i}.conv_a"), c, c, [1, 3, 3]),
                    Conv::new(format!("ppnet.trunk{i}.conv_b"), c, c, [1, 3, 3]),
                )
            })
            .collect();
        PpNet { stem, trunk }
    }

    /// Parameters this module binds, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.specs(&mut out);
        out
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem.specs(out);
        for (a, b) in &self.trunk {
            a.specs(out);
            b.specs(out);
        }
    }

    /// `[6, 4, R, C]` → `[C_p, 4, R, C]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[0] != GEOMETRY_CHANNELS || d[1] != NUM_LAYERS {
            return Err(Error::shape("ppnet", &d, &[GEOMETRY_CHANNELS, NUM_LAYERS, 0, 0]));
        }
        if d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(Error::arg(format!("ppnet needs an even grid, got {}x{}", d[2], d[3])));
        }
        let mut h = self.stem.forward(g, p, x)?;
        h = g.gelu(h);
        for (a, b) in &self.trunk {
            let r = a.forward(g, p, h)?;
            let r = g.gelu(r);
            let r = b.forward(g, p, r)?;
            let s = g.add(h, r)?;
            h = g.gelu(s);
        }
        g.resample(h, (d[2], d[3]), ResampleMode::TrilinearUp)
    }
}

#[derive(Clone, Debug)]
struct FciLayer {
    q_norms: Vec<Norm>,
    q: Vec<Conv>,
    kv_norm: Norm,
    k: Conv,
    v: Conv,
    out: Conv,
    ffn_norm: Norm,
    ffn: Ffn,
}

/// Cross-scale attention between the four encoder stages, computed on a
/// shared token grid with DCT-domain scores.
#[derive(Clone, Debug)]
pub struct FciFormer {
    embed: Vec<Conv>,
    pos: Vec<String>,
    layers: Vec<FciLayer>,
    unembed: Vec<Conv>,
    token_dim: usize,
    heads: usize,
    grid: [usize; 2],
}

impl FciFormer {
    pub fn new(cfg: &NetConfig) -> Self {
        let d = cfg.token_dim;
        let layers = (0..cfg.fci_depth)
            .map(|l| {
                let n = format!("fci.layer{l}");
                FciLayer {
                    q_norms: (0..4).map(|s| Norm::layer(format!("{n}.q{s}_norm"), d)).collect(),
                    q: (0..4).map(|s| Conv::pointwise(format!("{n}.q{s}"), d, d)).collect(),
                    kv_norm: Norm::layer(format!("{n}.kv_norm"), 4 * d),
                    k: Conv::pointwise(format!("{n}.k"), 4 * d, d),
                    v: Conv::pointwise(format!("{n}.v"), 4 * d, d),
                    out: Conv::pointwise(format!("{n}.out"), d, d),
                    ffn_norm: Norm::layer(format!("{n}.ffn_norm"), d),
                    ffn: Ffn::new(&format!("{n}.ffn"), d, cfg.ffn_ratio),
                }
            })
            .collect();
        FciFormer {
            embed: (0..4)
                .map(|s| Conv::pointwise(format!("fci.embed{s}"), cfg.stage_channels(s), d))
                .collect(),
            pos: (0..4).map(|s| format!("fci.pos{s}")).collect(),
            layers,
            unembed: (0..4)
                .map(|s| Conv::pointwise(format!("fci.unembed{s}"), d, cfg.stage_channels(s)))
                .collect(),
            token_dim: d,
            heads: cfg.heads,
            grid: cfg.token_grid,
        }
    }

    /// Parameters this module binds, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.specs(&mut out);
        out
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        for (e, pos) in self.embed.iter().zip(&self.pos) {
            e.specs(out);
            out.push(ParamSpec {
                name: pos.clone(),
                dims: vec![self.token_dim, NUM_LAYERS, self.grid[0], self.grid[1]],
                init: Init::Uniform(0.02),
            });
        }
        for l in &self.layers {
            for (n, q) in l.q_norms.iter().zip(&l.q) {
                n.specs(out);
                q.specs(out);
            }
            l.kv_norm.specs(out);
            l.k.specs(out);
            l.v.specs(out);
            l.out.specs(out);
            l.ffn_norm.specs(out);
            l.ffn.specs(out);
        }
        for u in &self.unembed {
            u.specs(out);
        }
    }

    fn tokens(&self) -> usize {
        NUM_LAYERS * self.grid[0] * self.grid[1]
    }

    /// Attention weights `softmax(DCT(q)ᵀ·DCT(k)/√d_k)` for one head, where
    /// `q`, `k` are `[d_k, 4, H_t, W_t]`. Rows index query frequencies.
    pub fn scores(&self, g: &mut Graph, q: Var, k: Var) -> Result<Var> {
        let dk = g.dims(q)[0];
        let t = self.tokens();
        let qf = dct_along(g, q, &[1, 2, 3], false)?;
        let qf = g.reshape(qf, &[dk, t])?;
        let qf = g.transpose(qf)?;
        let kf = dct_along(g, k, &[1, 2, 3], false)?;
        let kf = g.reshape(kf, &[dk, t])?;
        let logits = g.matmul(qf, kf)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        Ok(g.softmax(logits))
    }

    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let dk = g.dims(q)[0];
        let t = self.tokens();
        let [th, tw] = self.grid;
        let s = self.scores(g, q, k)?;
        // back from frequency-frequency to token-token coordinates
        let s = g.reshape(s, &[NUM_LAYERS, th, tw, NUM_LAYERS, th, tw])?;
        let s = dct_along(g, s, &[0, 1, 2, 3, 4, 5], true)?;
        let s = g.reshape(s, &[t, t])?;
        let v = g.reshape(v, &[dk, t])?;
        let vt = g.transpose(v)?;
        let o = g.matmul(s, vt)?;
        let o = g.transpose(o)?;
        g.reshape(o, &[dk, NUM_LAYERS, th, tw])
    }

    /// Maps the four stage outputs to features aligned with each stage: the
    /// stage itself plus the upsampled attended tokens.
    pub fn forward(&self, g: &mut Graph, p: &ParamMap, stages: &[Var]) -> Result<Vec<Var>> {
        let [th, tw] = self.grid;
        let d = self.token_dim;
        let dk = d / self.heads;
        let mut tokens = Vec::with_capacity(4);
        for (s, &x) in stages.iter().enumerate() {
            let pooled = g.resample(x, (th, tw), ResampleMode::AdaptivePool)?;
            let e = self.embed[s].forward(g, p, pooled)?;
            let pos = g.param(p, &self.pos[s])?;
            tokens.push(g.add(e, pos)?);
        }
        for layer in &self.layers {
            let qs = (0..4)
                .map(|s| {
                    let n = layer.q_norms[s].forward(g, p, tokens[s])?;
                    layer.q[s].forward(g, p, n)
                })
                .collect::<Result<Vec<_>>>()?;
            let cat = g.concat(&tokens, 0)?;
            let cat = layer.kv_norm.forward(g, p, cat)?;
            let k = layer.k.forward(g, p, cat)?;
            let v = layer.v.forward(g, p, cat)?;
            let mut heads: Vec<Vec<Var>> = vec![Vec::with_capacity(self.heads); 4];
            for h in 0..self.heads {
                let kh = g.slice(k, 0, h * dk, dk)?;
                let vh = g.slice(v, 0, h * dk, dk)?;
                for s in 0..4 {
                    let qh = g.slice(qs[s], 0, h * dk, dk)?;
                    heads[s].push(self.attend(g, qh, kh, vh)?);
                }
            }
            for s in 0..4 {
                let attended = g.concat(&heads[s], 0)?;
                let attended = layer.out.forward(g, p, attended)?;
                let x = g.add(tokens[s], attended)?;
                let h = layer.ffn_norm.forward(g, p, x)?;
                let h = layer.ffn.forward(g, p, h)?;
                tokens[s] = g.add(x, h)?;
            }
        }
        stages
            .iter()
            .zip(tokens)
            .enumerate()
            .map(|(s, (&stage, tok))| {
                let y = self.unembed[s].forward(g, p, tok)?;
                let dims = g.dims(stage).to_vec();
                let y = g.resample(y, (dims[2], dims[3]), ResampleMode::TrilinearUp)?;
                g.add(stage, y)
            })
            .collect()
    }
}

/// One decoder level: upsample, project, concatenate the lateral input,
/// then a residual pair of convolutions.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    proj: Conv,
    norm: Norm,
    conv_a: Conv,
    norm_a: Norm,
    conv_b: Conv,
    norm_b: Norm,
    skip: Conv,
}

impl DecoderLevel {
    /// Level `s` (0-based), producing stage `s` channels.
    pub fn new(s: usize, cfg: &NetConfig) -> Self {
        let c = cfg.stage_channels(s);
        let cin = cfg.stage_channels((s + 1).min(3));
        let n = format!("decoder.level{s}");
        DecoderLevel {
            proj: Conv::pointwise(format!("{n}.proj"), cin, c).before_instance_norm(),
            norm: Norm::instance(format!("{n}.norm"), c),
            conv_a: Conv::full(format!("{n}.conv_a"), 2 * c, c).before_instance_norm(),
            norm_a: Norm::instance(format!("{n}.norm_a"), c),
            conv_b: Conv::full(format!("{n}.conv_b"), c, c).before_instance_norm(),
            norm_b: Norm::instance(format!("{n}.norm_b"), c),
            skip: Conv::pointwise(format!("{n}.skip"), 2 * c, c),
        }
    }

    /// Parameters this module binds, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.specs(&mut out);
        out
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.specs(out);
        self.norm.specs(out);
        self.conv_a.specs(out);
        self.norm_a.specs(out);
        self.conv_b.specs(out);
        self.norm_b.specs(out);
        self.skip.specs(out);
    }

    /// `x` comes from the coarser level, `lateral` from the encoder side.
    pub fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var, lateral: Var) -> Result<Var> {
        let ld = g.dims(lateral).to_vec();
        let xd = g.dims(x).to_vec();
        let x = if xd[2] != ld[2] || xd[3] != ld[3] {
            g.resample(x, (ld[2], ld[3]), ResampleMode::TrilinearUp)?
        } else {
            x
        };
        let x = self.proj.forward(g, p, x)?;
        let x = self.norm.forward(g, p, x)?;
        let x = g.gelu(x);
        let cat = g.concat(&[x, lateral], 0)?;
        let r = self.conv_a.forward(g, p, cat)?;
        let r = self.norm_a.forward(g, p, r)?;
        let r = g.leaky_relu(r);
        let r = self.conv_b.forward(g, p, r)?;
        let r = self.norm_b.forward(g, p, r)?;
        let s = self.skip.forward(g, p, cat)?;
        let y = g.add(r, s)?;
        Ok(g.leaky_relu(y))
    }
}

/// The complete network.
#[derive(Clone, Debug)]
pub struct FsaHeatNet {
    pub config: NetConfig,
    pub ppnet: PpNet,
    embed: Conv,
    pub stages: Vec<Vec<EncoderBlock>>,
    downs: Vec<Conv>,
    pub fci: Option<FciFormer>,
    pub decoder: Vec<DecoderLevel>,
    head: Conv,
}

/// Encoder outputs, finest stage first.
pub type StageFeatures = Vec<Var>;

impl FsaHeatNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let c0 = config.base_channels;
        let stages = (0..4)
            .map(|s| {
                (0..config.stage_depths[s])
                    .map(|b| EncoderBlock::new(&format!("encoder.stage{s}.block{b}"), config.stage_channels(s), &config))
                    .collect()
            })
            .collect();
        let downs = (0..3)
            .map(|s| {
                let mut c = Conv::full(
                    format!("encoder.down{s}"),
                    config.stage_channels(s),
                    config.stage_channels(s + 1),
                );
                c.stride = [1, 2, 2];
                c
            })
            .collect();
        Ok(FsaHeatNet {
            ppnet: PpNet::new(&config),
            embed: Conv::pointwise("encoder.embed", config.ppnet_channels + NUM_CHANNELS - GEOMETRY_CHANNELS, c0),
            stages,
            downs,
            fci: config.fciformer.then(|| FciFormer::new(&config)),
            decoder: (0..4).map(|s| DecoderLevel::new(s, &config)).collect(),
            head: Conv::pointwise("head", c0, 1),
            config,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.ppnet.specs(&mut out);
        self.embed.specs(&mut out);
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                b.specs(&mut out);
            }
            if let Some(d) = self.downs.get(s) {
                d.specs(&mut out);
            }
        }
        if let Some(f) = &self.fci {
            f.specs(&mut out);
        }
        for l in &self.decoder {
            l.specs(&mut out);
        }
        self.head.specs(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Fresh parameters. Adding a module never reshuffles the others.
    pub fn init_params(&self, seed: u64) -> ParamMap {
        init_params(&self.param_specs(), seed)
    }

    /// Checks that `params` holds exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamMap) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in specs {
            match params.get(&s.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", s.name))),
                Some(t) if t.dims() != s.dims.as_slice() => {
                    return Err(Error::shape("parameter", t.dims(), &s.dims))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn split_inputs(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[0] != NUM_CHANNELS || d[1] != NUM_LAYERS {
            return Err(Error::shape("network input", &d, &[NUM_CHANNELS, NUM_LAYERS, 0, 0]));
        }
        self.config.check_grid(d[2], d[3])?;
        let geometry = g.slice(x, 0, 0, GEOMETRY_CHANNELS)?;
        let power = g.slice(x, 0, GEOMETRY_CHANNELS, NUM_CHANNELS - GEOMETRY_CHANNELS)?;
        Ok((geometry, power))
    }

    /// Encoder stage outputs for inputs `[8, 4, R, C]`.
    pub fn encode(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<StageFeatures> {
        let (geometry, power) = self.split_inputs(g, x)?;
        let pre = self.ppnet.forward(g, p, geometry)?;
        let cat = g.concat(&[pre, power], 0)?;
        let mut h = self.embed.forward(g, p, cat)?;
        let mut outs = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = self.downs[s - 1].forward(g, p, h)?;
            }
            for b in blocks {
                h = b.forward(g, p, h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Normalized temperature rise `[1, 4, R, C]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamMap, x: Var) -> Result<Var> {
        let stages = self.encode(g, p, x)?;
        let laterals = match &self.fci {
            Some(f) => f.forward(g, p, &stages)?,
            None => stages.clone(),
        };
        let mut h = stages[3];
        for s in (0..4).rev() {
            h = self.decoder[s].forward(g, p, h, laterals[s])?;
        }
        self.head.forward(g, p, h)
    }

    /// Predictions for several samples, computed on independent graphs.
    pub fn predict_batch(&self, p: &ParamMap, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        inputs.par_iter().map(|x| self.predict(p, x)).collect()
    }

    /// Prediction for standardized inputs `[4, R, C, 8]`, as `[4, R, C]`.
    pub fn predict(&self, p: &ParamMap, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(to_channels_first(inputs)?);
        let y = self.forward(&mut g, p, x)?;
        let d = g.dims(y).to_vec();
        g.value(y).clone().reshape(&d[1..])
    }
}

/// `[4, R, C, K]` → `[K, 4, R, C]`.
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    x.permute(&[3, 0, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_rejected() {
        let cfg = NetConfig { freq_branch: false, spatial_branch: false, ..NetConfig::micro() };
        assert!(FsaHeatNet::new(cfg).is_err());
        let cfg = NetConfig { token_dim: 10, heads: 4, ..NetConfig::micro() };
        assert!(FsaHeatNet::new(cfg).is_err());
        assert!(NetConfig::micro().check_grid(12, 16).is_err());
        assert!(NetConfig { token_grid: [3, 3], ..NetConfig::micro() }.check_grid(16, 16).is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let net = FsaHeatNet::new(NetConfig::micro()).unwrap();
        let a = net.init_params(5);
        let b = net.init_params(5);
        assert_eq!(a, b);
        let c = net.init_params(6);
        assert_ne!(a["head.weight"], c["head.weight"]);
        assert!(a["encoder.stage0.block0.freq.bands"].data().iter().all(|&v| v == 0.0));
        assert!(a["encoder.stage0.block0.freq.gate.bias"].data().iter().all(|&v| v == 2.0));
        net.check_params(&a).unwrap();
    }

    #[test]
    fn open_gate_with_flat_bands_is_linear() {
        let cfg = NetConfig { spatial_branch: false, ..NetConfig::micro() };
        let block = EncoderBlock::new("b", 4, &cfg);
        let mut p = init_params(&block.param_specs(), 9);
        p.insert("b.freq.gate.weight".into(), Tensor::zeros(&[4, 4, 1, 1, 1]));
        p.insert("b.freq.gate.bias".into(), Tensor::full(&[4], 60.0));
        let x = Tensor::uniform(&[4, 4, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let full = block.forward(&mut g, &p, xv).unwrap();

        let mut h = Graph::new();
        let xv = h.constant(x);
        let a = block.norm_in.forward(&mut h, &p, xv).unwrap();
        let a = block.depthwise.forward(&mut h, &p, a).unwrap();
        let a = block.freq.as_ref().unwrap().proj.forward(&mut h, &p, a).unwrap();
        let a = block.fuse.forward(&mut h, &p, a).unwrap();
        let y = h.add(xv, a).unwrap();
        let f = block.norm_ffn.forward(&mut h, &p, y).unwrap();
        let f = block.ffn.forward(&mut h, &p, f).unwrap();
        let linear = h.add(y, f).unwrap();

        assert!(g.value(full).max_abs_diff(h.value(linear)) <= 1e-10);
    }
}
