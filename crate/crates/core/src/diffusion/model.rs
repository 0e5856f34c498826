//! The block-chain ε-prediction denoiser.
//!
//! The model is a pre-norm residual chain over a small token grid:
//!
//! ```text
//! x_t ─► tokens ─► input proj ─► block 0 ─► … ─► block B−1 ─► output proj ─► ε̂
//!                                   ▲               ▲
//!         t ─► sinusoid ─► time proj (added to every block's normalised input)
//! ```
//!
//! Block `b` computes `x_b = x_{b−1} + branch_b(LN(x_{b−1}) + e_t)`, where the
//! branch is either an MLP over channels or a learned token-mixing matrix
//! followed by a channel projection (the attention-like granularity). Two-dimensional
//! point data uses a single token; images are split into square patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Channel MLP: width → hidden → width with SiLU.
    Mlp,
    /// Attention-like token mixing: a learned `[tokens, tokens]` matrix, SiLU,
    /// then a width → width projection.
    TokenMix,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Mlp => "mlp",
            BlockKind::TokenMix => "token_mix",
        }
    }
}

/// How a flat data vector maps onto the model's token grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataLayout {
    /// A point in `dim` dimensions, treated as one token.
    Points { dim: usize },
    /// A `side × side` grayscale image cut into `patch × patch` tokens.
    Image { side: usize, patch: usize },
}

impl DataLayout {
    pub fn data_dim(&self) -> usize {
        match *self {
            DataLayout::Points { dim } => dim,
            DataLayout::Image { side, .. } => side * side,
        }
    }

    pub fn tokens(&self) -> usize {
        match *self {
            DataLayout::Points { .. } => 1,
            DataLayout::Image { side, patch } => (side / patch) * (side / patch),
        }
    }

    pub fn token_dim(&self) -> usize {
        match *self {
            DataLayout::Points { dim } => dim,
            DataLayout::Image { patch, .. } => patch * patch,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DataLayout::Points { dim } if dim > 0 => Ok(()),
            DataLayout::Image { side, patch } if patch > 0 && side > 0 && side % patch == 0 => Ok(()),
            _ => Err(Error::invalid(format!("invalid data layout {self:?}"))),
        }
    }

    /// For images, the position of pixel `(token, k)` in the flat image.
    fn pixel(&self, token: usize, k: usize) -> usize {
        match *self {
            DataLayout::Points { .. } => k,
            DataLayout::Image { side, patch } => {
                let per_row = side / patch;
                let (pr, pc) = (token / per_row, token % per_row);
                let (dr, dc) = (k / patch, k % patch);
                (pr * patch + dr) * side + pc * patch + dc
            }
        }
    }

    /// `[n, data_dim]` → `[n · tokens, token_dim]`.
    pub fn to_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2("to_tokens")?;
        if d != self.data_dim() {
            return Err(Error::ShapeMismatch {
                op: "to_tokens",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.data_dim()],
            });
        }
        let (l, p) = (self.tokens(), self.token_dim());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let src = x.row(i);
            for tok in 0..l {
                for k in 0..p {
                    out[(i * l + tok) * p + k] = src[self.pixel(tok, k)];
                }
            }
        }
        Tensor::matrix(n * l, p, out)
    }

    /// Inverse of [`DataLayout::to_tokens`].
    pub fn from_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, p) = x.dims2("from_tokens")?;
        let l = self.tokens();
        if p != self.token_dim() || rows % l != 0 {
            return Err(Error::ShapeMismatch {
                op: "from_tokens",
                lhs: x.shape().to_vec(),
                rhs: vec![l, self.token_dim()],
            });
        }
        let n = rows / l;
        let d = self.data_dim();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for tok in 0..l {
                let src = x.row(i * l + tok);
                for k in 0..p {
                    out[i * d + self.pixel(tok, k)] = src[k];
                }
            }
        }
        Tensor::matrix(n, d, out)
    }
}

/// Architecture of a [`BlockChainModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layout: DataLayout,
    pub width: usize,
    /// Hidden width of the MLP blocks.
    pub hidden: usize,
    pub blocks: Vec<BlockKind>,
}

impl ModelSpec {
    /// Pure MLP residual chain for low-dimensional point data.
    pub fn points(dim: usize, width: usize, blocks: usize) -> Self {
        ModelSpec {
            layout: DataLayout::Points { dim },
            width,
            hidden: 2 * width,
            blocks: vec![BlockKind::Mlp; blocks],
        }
    }

    /// Alternating token-mixing and MLP blocks over image patches.
    pub fn image(side: usize, patch: usize, width: usize, blocks: usize) -> Self {
        ModelSpec {
            layout: DataLayout::Image { side, patch },
            width,
            hidden: 2 * width,
            blocks: (0..blocks)
                .map(|b| if b % 2 == 0 { BlockKind::TokenMix } else { BlockKind::Mlp })
                .collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.width == 0 || self.hidden == 0 || self.blocks.is_empty() {
            return Err(Error::invalid("model needs positive widths and at least one block"));
        }
        Ok(())
    }
}

/// Dense layer `y = x·W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f32) -> Self {
        let std = gain / (fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized by construction"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Mlp { up: Linear, down: Linear },
    TokenMix { mix: Tensor, proj: Linear },
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Mlp { .. } => BlockKind::Mlp,
            Block::TokenMix { .. } => BlockKind::TokenMix,
        }
    }
}

/// A residual-chain denoiser with frozen-weight bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockChainModel {
    spec: ModelSpec,
    input: Linear,
    time: Linear,
    blocks: Vec<Block>,
    output: Linear,
    frozen: bool,
}

/// Sinusoidal timestep features of the given width.
pub fn timestep_features(t: usize, width: usize) -> Vec<f32> {
    let half = width / 2;
    let mut out = vec![0.0f32; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin() as f32;
        out[half + i] = angle.cos() as f32;
    }
    out
}

impl BlockChainModel {
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (w, h, l) = (spec.width, spec.hidden, spec.layout.tokens());
        let input = Linear::init(rng, spec.layout.token_dim(), w, 1.0);
        let time = Linear::init(rng, w, w, 1.0);
        let blocks = spec
            .blocks
            .iter()
            .map(|kind| match kind {
                BlockKind::Mlp => Block::Mlp {
                    up: Linear::init(rng, w, h, 1.0),
                    down: Linear::init(rng, h, w, 0.5),
                },
                BlockKind::TokenMix => {
                    let normal = Normal::new(0.0f32, 0.1 / (l as f32).sqrt()).expect("positive std");
                    let mix = (0..l * l)
                        .map(|i| normal.sample(rng) + if i / l == i % l { 1.0 } else { 0.0 })
                        .collect();
                    Block::TokenMix {
                        mix: Tensor::matrix(l, l, mix).expect("sized by construction"),
                        proj: Linear::init(rng, w, w, 0.5),
                    }
                }
            })
            .collect();
        let output = Linear::init(rng, w, spec.layout.token_dim(), 0.1);
        Ok(BlockChainModel {
            spec,
            input,
            time,
            blocks,
            output,
            frozen: false,
        })
    }

    /// All parameters zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (w, h, l) = (spec.width, spec.hidden, spec.layout.tokens());
        let blocks = spec
            .blocks
            .iter()
            .map(|kind| match kind {
                BlockKind::Mlp => Block::Mlp {
                    up: Linear::zeros(w, h),
                    down: Linear::zeros(h, w),
                },
                BlockKind::TokenMix => Block::TokenMix {
                    mix: Tensor::zeros(&[l, l]),
                    proj: Linear::zeros(w, w),
                },
            })
            .collect();
        Ok(BlockChainModel {
            input: Linear::zeros(spec.layout.token_dim(), w),
            time: Linear::zeros(w, w),
            output: Linear::zeros(w, spec.layout.token_dim()),
            blocks,
            spec,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Parameters in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
            ("time.weight".to_string(), &self.time.weight),
            ("time.bias".to_string(), &self.time.bias),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Mlp { up, down } => {
                    out.push((format!("block{b}.up.weight"), &up.weight));
                    out.push((format!("block{b}.up.bias"), &up.bias));
                    out.push((format!("block{b}.down.weight"), &down.weight));
                    out.push((format!("block{b}.down.bias"), &down.bias));
                }
                Block::TokenMix { mix, proj } => {
                    out.push((format!("block{b}.mix"), mix));
                    out.push((format!("block{b}.proj.weight"), &proj.weight));
                    out.push((format!("block{b}.proj.bias"), &proj.bias));
                }
            }
        }
        out.push(("output.weight".to_string(), &self.output.weight));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    /// Mutable parameters, same order as [`BlockChainModel::named_params`].
    /// Fails on a frozen model.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::invalid("model is frozen"));
        }
        let mut out = vec![
            &mut self.input.weight,
            &mut self.input.bias,
            &mut self.time.weight,
            &mut self.time.bias,
        ];
        for block in &mut self.blocks {
            match block {
                Block::Mlp { up, down } => {
                    out.extend([&mut up.weight, &mut up.bias, &mut down.weight, &mut down.bias]);
                }
                Block::TokenMix { mix, proj } => {
                    out.extend([mix, &mut proj.weight, &mut proj.bias]);
                }
            }
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        Ok(out)
    }

    /// Replaces every parameter, checking names and shapes.
    pub fn load_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Container(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Container(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        let frozen = std::mem::replace(&mut self.frozen, false);
        for (dst, (_, src)) in self.params_mut()?.into_iter().zip(params) {
            *dst = src;
        }
        self.frozen = frozen;
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Registers the parameters on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let lin = |g: &mut Graph, l: &Linear| BoundLinear {
            weight: leaf(g, &l.weight),
            bias: leaf(g, &l.bias),
        };
        let input = lin(g, &self.input);
        let time = lin(g, &self.time);
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Mlp { up, down } => BoundBlock::Mlp {
                    up: lin(g, up),
                    down: lin(g, down),
                },
                Block::TokenMix { mix, proj } => BoundBlock::TokenMix {
                    mix: leaf(g, mix),
                    proj: lin(g, proj),
                },
            })
            .collect();
        let output = lin(g, &self.output);
        BoundModel {
            layout: self.spec.layout.clone(),
            width: self.spec.width,
            input,
            time,
            blocks,
            output,
        }
    }

    /// Full unmasked forward pass: ε̂ in data layout and every block output
    /// (token layout). The last feature is the end-block feature.
    pub fn forward(&self, x_t: &Tensor, t: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let n = x_t.dims2("model_forward")?.0;
        let (mut h, temb) = m.stem(&mut g, x_t, &vec![t; n])?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            h = m.block(&mut g, b, h, temb)?;
            features.push(g.value(h).clone());
        }
        let eps = m.head(&mut g, h)?;
        Ok((self.spec.layout.from_tokens(g.value(eps))?, features))
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl BoundLinear {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_bias(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
enum BoundBlock {
    Mlp { up: BoundLinear, down: BoundLinear },
    TokenMix { mix: Var, proj: BoundLinear },
}

/// A model whose parameters live on a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    layout: DataLayout,
    width: usize,
    input: BoundLinear,
    time: BoundLinear,
    blocks: Vec<BoundBlock>,
    output: BoundLinear,
}

impl BoundModel {
    /// Parameter handles in canonical order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.input.weight, self.input.bias, self.time.weight, self.time.bias];
        for b in &self.blocks {
            match *b {
                BoundBlock::Mlp { up, down } => out.extend([up.weight, up.bias, down.weight, down.bias]),
                BoundBlock::TokenMix { mix, proj } => out.extend([mix, proj.weight, proj.bias]),
            }
        }
        out.extend([self.output.weight, self.output.bias]);
        out
    }

    /// Input projection and timestep embedding; always executed.
    ///
    /// `x_t` is `[n, data_dim]`; `timesteps` has one entry per sample. Returns
    /// the chain input `x_{t,−1}` and the per-row embedding, both token layout.
    pub fn stem(&self, g: &mut Graph, x_t: &Tensor, timesteps: &[usize]) -> Result<(Var, Var)> {
        let (n, _) = x_t.dims2("stem")?;
        if timesteps.len() != n {
            return Err(Error::invalid(format!("{} timesteps for {n} samples", timesteps.len())));
        }
        let tokens = self.layout.to_tokens(x_t)?;
        let l = self.layout.tokens();
        let mut feats = Vec::with_capacity(n * l * self.width);
        for &t in timesteps {
            let row = timestep_features(t, self.width);
            for _ in 0..l {
                feats.extend_from_slice(&row);
            }
        }
        let x = g.constant(tokens);
        let h = self.input.apply(g, x)?;
        let f = g.constant(Tensor::matrix(n * l, self.width, feats)?);
        let e = self.time.apply(g, f)?;
        let e = g.silu(e);
        Ok((h, e))
    }

    /// Block `b` applied to its input `x` under embedding `temb`: f_b(x, t).
    pub fn block(&self, g: &mut Graph, b: usize, x: Var, temb: Var) -> Result<Var> {
        let block = self
            .blocks
            .get(b)
            .ok_or_else(|| Error::invalid(format!("block {b} out of range")))?;
        let h = g.layer_norm(x, LN_EPS)?;
        let h = g.add(h, temb)?;
        let branch = match *block {
            BoundBlock::Mlp { up, down } => {
                let u = up.apply(g, h)?;
                let u = g.silu(u);
                down.apply(g, u)?
            }
            BoundBlock::TokenMix { mix, proj } => {
                let u = g.token_mix(h, mix, self.layout.tokens())?;
                let u = g.silu(u);
                proj.apply(g, u)?
            }
        };
        g.add(x, branch)
    }

    /// Output projection to ε̂ in token layout; always executed.
    pub fn head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.output.apply(g, h)
    }

    pub fn layout(&self) -> &DataLayout {
        &self.layout
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
