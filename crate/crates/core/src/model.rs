//! Convolutional image encoder feeding two independent causal transformer
//! decoders (left-to-right and right-to-left) that share one token embedding
//! matrix, which doubles as the output projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{Graph, NodeId, NumericsError, Real, SeedTree, Tensor};
use crate::textpipe::{TokenSequence, Vocabulary};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image has {got} values, expected {side}x{side}")]
    ImageShape { got: usize, side: usize },
    #[error("token sequence not prepared for this model: {0}")]
    Sequence(String),
    #[error("unknown decoder direction {0:?}")]
    Direction(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    pub image_side: usize,
    pub grid_side: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 64px images, 4x4 feature grid, d=128, two layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 64,
            embed_dim: 128,
            layers: 2,
            heads: 4,
            ff_dim: 512,
            dropout: 0.1,
            encoder_channels: vec![8, 16, 32, 64],
            image_side: 64,
            grid_side: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocabulary of {} cannot hold the special tokens", self.vocab_size));
        }
        if self.context_len < 3 {
            return fail(format!("context length {} < 3", self.context_len));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return fail("need at least one layer and a non-empty feedforward".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return fail("encoder needs at least one stage with channels".into());
        }
        let factor = 1usize << self.encoder_channels.len();
        if self.grid_side == 0 || self.image_side != self.grid_side * factor {
            return fail(format!(
                "{} stride-2 stages map {}px to {}px, not a {} grid",
                self.encoder_channels.len(),
                self.image_side,
                self.image_side / factor,
                self.grid_side
            ));
        }
        Ok(())
    }

    pub fn visual_len(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(ModelError::Direction(other.into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Linear,
    res_a: Linear,
    res_b: Linear,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Layer {
    self_attn: Attention,
    self_norm: Norm,
    cross_attn: Attention,
    cross_norm: Norm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: Norm,
}

#[derive(Clone, Debug)]
struct Decoder {
    embed_norm: Norm,
    memory_norm: Norm,
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Stage>,
    projection: Linear,
    tokens: usize,
    text_pos: usize,
    visual_pos: usize,
    forward: Decoder,
    backward: Decoder,
}

enum Init {
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in)),
            b: self.add(format!("{prefix}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), vec![cout, cin, 3, 3], Init::FanIn(cin * 9)),
            b: self.add(format!("{prefix}.b"), vec![cout], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig) -> Decoder {
        let d = cfg.embed_dim;
        Decoder {
            embed_norm: self.norm(&format!("{prefix}.embed_norm"), d),
            memory_norm: self.norm(&format!("{prefix}.memory_norm"), d),
            layers: (0..cfg.layers)
                .map(|l| {
                    let p = format!("{prefix}.layer{l}");
                    Layer {
                        self_attn: self.attention(&format!("{p}.self_attn"), d),
                        self_norm: self.norm(&format!("{p}.self_norm"), d),
                        cross_attn: self.attention(&format!("{p}.cross_attn"), d),
                        cross_norm: self.norm(&format!("{p}.cross_norm"), d),
                        ff_in: self.linear(&format!("{p}.ff_in"), d, cfg.ff_dim),
                        ff_out: self.linear(&format!("{p}.ff_out"), cfg.ff_dim, d),
                        ff_norm: self.norm(&format!("{p}.ff_norm"), d),
                    }
                })
                .collect(),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let mut cin = 1;
    let stages = cfg
        .encoder_channels
        .iter()
        .enumerate()
        .map(|(i, &cout)| {
            let s = Stage {
                down: b.conv(&format!("encoder.stage{i}.down"), cin, cout),
                res_a: b.conv(&format!("encoder.stage{i}.res_a"), cout, cout),
                res_b: b.conv(&format!("encoder.stage{i}.res_b"), cout, cout),
            };
            cin = cout;
            s
        })
        .collect();
    let projection = b.linear("encoder.projection", cin, cfg.embed_dim);
    let d = cfg.embed_dim;
    let tokens = b.add("embedding.tokens".into(), vec![cfg.vocab_size, d], Init::Normal(EMBED_STD));
    let text_pos = b.add("embedding.text_pos".into(), vec![cfg.context_len, d], Init::Normal(EMBED_STD));
    let visual_pos = b.add("embedding.visual_pos".into(), vec![cfg.visual_len(), d], Init::Normal(EMBED_STD));
    let forward = b.decoder("decoder.forward", cfg);
    let backward = b.decoder("decoder.backward", cfg);
    (
        Layout {
            stages,
            projection,
            tokens,
            text_pos,
            visual_pos,
            forward,
            backward,
        },
        b,
    )
}

/// All learnable weights. The token embedding table is the only output projection.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Real> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

/// Graph nodes bound to each parameter tensor, in parameter order.
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps nodes that were bound by the caller in parameter order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Bound(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    fn at(&self, i: usize) -> NodeId {
        self.0[i]
    }
}

/// Training vs. inference behaviour (dropout on or off).
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled Gaussian weights (variance 1/fan_in), zero biases, unit norms,
    /// and small Gaussian embeddings; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        let root = SeedTree::new(seed).named("init");
        let tensors = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .enumerate()
            .map(|(i, (shape, init))| {
                let n: usize = shape.iter().product();
                let mut rng = root.child(i as u64).rng();
                let mut sample = |std: f64| -> Vec<T> {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                };
                let data = match init {
                    Init::FanIn(f) => sample((1.0 / *f as f64).sqrt()),
                    Init::Normal(std) => sample(*std),
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                Tensor::new(shape.clone(), data).map(|t| t.with_grad(true))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams {
            config: config.clone(),
            names: builder.names,
            tensors,
            layout,
        })
    }

    /// Reassembles parameters from named tensors (checkpoint loading).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        if named.len() != builder.names.len() {
            return Err(ModelError::Config(format!("{} tensors for {} parameters", named.len(), builder.names.len())));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(builder.names.iter().zip(&builder.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("tensor {name} {:?} where {want} {shape:?} expected", t.shape())));
            }
            tensors.push(t.with_grad(true));
        }
        Ok(ModelParams {
            config: config.clone(),
            names: builder.names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn group(&self, index: usize) -> ParamGroup {
        if self.names[index].starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Decoder
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Token embedding table `[V, d]`.
    pub fn embedding(&self) -> &Tensor<T> {
        &self.tensors[self.layout.tokens]
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensors[self.layout.tokens]
    }

    /// Output projection; the same storage as [`Self::embedding`].
    pub fn output_projection(&self) -> &Tensor<T> {
        &self.tensors[self.layout.tokens]
    }

    pub fn output_projection_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensors[self.layout.tokens]
    }

    /// SHA-256 over names and values of one parameter group (or all when `None`).
    pub fn fingerprint(&self, group: Option<ParamGroup>) -> String {
        let mut h = Sha256::new();
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            if group.is_some_and(|g| g != self.group(i)) {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every tensor as a graph leaf (borrowed, no copy).
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    fn decoder_layout(&self, direction: Direction) -> &Decoder {
        match direction {
            Direction::Forward => &self.layout.forward,
            Direction::Backward => &self.layout.backward,
        }
    }

    /// Euclidean distance between the forward and backward decoder weights.
    pub fn decoder_distance(&self) -> f64 {
        let fwd = self.names.iter().enumerate().filter(|(_, n)| n.starts_with("decoder.forward."));
        let mut total = 0.0;
        for (i, n) in fwd {
            let twin = n.replacen("decoder.forward.", "decoder.backward.", 1);
            let j = self.names.iter().position(|m| *m == twin).expect("decoders share a layout");
            for (a, b) in self.tensors[i].data().iter().zip(self.tensors[j].data()) {
                let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
                total += d * d;
            }
        }
        total.sqrt()
    }
}

/// `[G², d]` visual feature sequence produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> VisualFeatures<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

struct Dropout<'m, 'r> {
    mode: &'m mut Mode<'r>,
    rate: f64,
}

impl Dropout<'_, '_> {
    fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId, ModelError> {
        match self.mode {
            Mode::Train(rng) if self.rate > 0.0 => {
                let keep: Vec<bool> = (0..g.value(x).len()).map(|_| rng.random::<f64>() >= self.rate).collect();
                Ok(g.dropout(x, &keep, T::lit(self.rate))?)
            }
            _ => Ok(x),
        }
    }
}

fn linear<T: Real>(g: &mut Graph<'_, T>, b: &Bound, l: &Linear, x: NodeId) -> Result<NodeId, ModelError> {
    let y = g.matmul(x, b.at(l.w))?;
    Ok(g.add_row(y, b.at(l.b))?)
}

fn norm<T: Real>(g: &mut Graph<'_, T>, b: &Bound, n: &Norm, x: NodeId) -> Result<NodeId, ModelError> {
    Ok(g.layer_norm(x, b.at(n.g), b.at(n.b), T::lit(LN_EPS))?)
}

fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    a: &Attention,
    query: NodeId,
    memory: NodeId,
    heads: usize,
    causal: bool,
) -> Result<NodeId, ModelError> {
    let q = linear(g, b, &a.q, query)?;
    let k = linear(g, b, &a.k, memory)?;
    let v = linear(g, b, &a.v, memory)?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, scale);
        let w = if causal { g.causal_softmax(s)? } else { g.softmax(s, 1)? };
        outs.push(g.matmul(w, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, b, &a.o, joined)
}

impl<T: Real> ModelParams<T> {
    fn check_image(&self, image: &[T]) -> Result<(), ModelError> {
        let side = self.config.image_side;
        if image.len() != side * side {
            return Err(ModelError::ImageShape { got: image.len(), side });
        }
        Ok(())
    }

    /// Strided conv stages with residual pairs, then a linear projection of each grid cell.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, b: &Bound, image: &[T]) -> Result<NodeId, ModelError> {
        self.check_image(image)?;
        let side = self.config.image_side;
        let mut x = g.constant(&[1, side, side], image.to_vec())?;
        for stage in &self.layout.stages {
            let y = g.conv2d(x, b.at(stage.down.w), b.at(stage.down.b), 2, 1)?;
            let y = g.gelu(y);
            let r = g.conv2d(y, b.at(stage.res_a.w), b.at(stage.res_a.b), 1, 1)?;
            let r = g.gelu(r);
            let r = g.conv2d(r, b.at(stage.res_b.w), b.at(stage.res_b.b), 1, 1)?;
            let s = g.add(y, r)?;
            x = g.gelu(s);
        }
        let channels = g.shape(x)[0];
        let cells = self.config.visual_len();
        let flat = g.reshape(x, &[channels, cells])?;
        let grid = g.transpose(flat)?;
        linear(g, b, &self.layout.projection, grid)
    }

    /// Decoder logits `[ids.len(), V]` for ids given in processing order.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        visual: NodeId,
        ids: &[usize],
        direction: Direction,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.config;
        if ids.is_empty() || ids.len() > cfg.context_len {
            return Err(ModelError::Sequence(format!("{} tokens for context {}", ids.len(), cfg.context_len)));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::Sequence(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let dec = self.decoder_layout(direction);
        let mut drop = Dropout {
            mode,
            rate: cfg.dropout,
        };
        let memory = g.add(visual, b.at(self.layout.visual_pos))?;
        let memory = norm(g, b, &dec.memory_norm, memory)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.gather_rows(b.at(self.layout.tokens), ids)?;
        let pos = g.gather_rows(b.at(self.layout.text_pos), &positions)?;
        let x = g.add(tok, pos)?;
        let x = norm(g, b, &dec.embed_norm, x)?;
        let mut x = drop.apply(g, x)?;
        for layer in &dec.layers {
            let a = attention(g, b, &layer.self_attn, x, x, cfg.heads, true)?;
            let s = g.add(x, a)?;
            let s = norm(g, b, &layer.self_norm, s)?;
            x = drop.apply(g, s)?;

            let c = attention(g, b, &layer.cross_attn, x, memory, cfg.heads, false)?;
            let s = g.add(x, c)?;
            let s = norm(g, b, &layer.cross_norm, s)?;
            x = drop.apply(g, s)?;

            let h = linear(g, b, &layer.ff_in, x)?;
            let h = g.gelu(h);
            let h = linear(g, b, &layer.ff_out, h)?;
            let s = g.add(x, h)?;
            let s = norm(g, b, &layer.ff_norm, s)?;
            x = drop.apply(g, s)?;
        }
        Ok(g.matmul_t(x, false, b.at(self.layout.tokens), true)?)
    }

    /// Sum of the mean forward and mean backward token NLL (forward only when
    /// `forward_only`). Only the `valid_len` prefix is decoded; padding never
    /// enters the loss.
    pub fn bicaption_loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        visual: NodeId,
        seq: &TokenSequence,
        vocab: &Vocabulary,
        forward_only: bool,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId, ModelError> {
        let valid = check_framed(seq, vocab)?;
        let n = valid.len();
        let fwd_logits = self.decode_graph(g, b, visual, &valid[..n - 1], Direction::Forward, mode)?;
        let loss = g.cross_entropy_masked(fwd_logits, &valid[1..], &vec![false; n - 1])?;
        if forward_only {
            return Ok(loss);
        }
        let reversed: Vec<usize> = valid.iter().rev().copied().collect();
        let bwd_logits = self.decode_graph(g, b, visual, &reversed[..n - 1], Direction::Backward, mode)?;
        let bwd = g.cross_entropy_masked(bwd_logits, &reversed[1..], &vec![false; n - 1])?;
        Ok(g.add(loss, bwd)?)
    }

    pub fn encode_image(&self, image: &[T]) -> Result<VisualFeatures<T>, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let v = self.encode_graph(&mut g, &b, image)?;
        g.check_finite()?;
        Ok(VisualFeatures {
            rows: g.shape(v)[0],
            dim: g.shape(v)[1],
            data: g.value(v).to_vec(),
        })
    }

    fn visual_node<'a>(&self, g: &mut Graph<'a, T>, visual: &VisualFeatures<T>) -> Result<NodeId, ModelError> {
        if visual.rows != self.config.visual_len() || visual.dim != self.config.embed_dim {
            return Err(ModelError::Config(format!("visual features {}x{}", visual.rows, visual.dim)));
        }
        Ok(g.constant(&[visual.rows, visual.dim], visual.data.clone())?)
    }

    /// Eval-mode logits `[C, V]` for a prepared sequence. Backward logits at
    /// position `t` depend only on tokens at positions `≥ t`: the valid prefix is
    /// reversed, decoded causally and the rows un-reversed. Padding rows follow.
    pub fn decoder_forward(&self, visual: &VisualFeatures<T>, tokens: &TokenSequence, direction: Direction) -> Result<Tensor<T>, ModelError> {
        let c = self.config.context_len;
        if tokens.ids.len() != c || tokens.valid_len == 0 || tokens.valid_len > c {
            return Err(ModelError::Sequence(format!(
                "{} ids with {} valid, expected {c} ids",
                tokens.ids.len(),
                tokens.valid_len
            )));
        }
        let n = tokens.valid_len;
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..c).collect(),
            Direction::Backward => (0..n).rev().chain(n..c).collect(),
        };
        let ids: Vec<usize> = order.iter().map(|&i| tokens.ids[i]).collect();
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let vis = self.visual_node(&mut g, visual)?;
        let logits = self.decode_graph(&mut g, &b, vis, &ids, direction, &mut Mode::Eval)?;
        // order is an involution, so gathering by it restores original positions
        let restored = g.gather_rows(logits, &order)?;
        g.check_finite()?;
        Ok(g.tensor(restored))
    }

    /// Eval-mode next-token logits after `ids` (processing order).
    pub fn next_token_logits(&self, visual: &VisualFeatures<T>, ids: &[usize], direction: Direction) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let vis = self.visual_node(&mut g, visual)?;
        let logits = self.decode_graph(&mut g, &b, vis, ids, direction, &mut Mode::Eval)?;
        g.check_finite()?;
        let v = self.config.vocab_size;
        let all = g.value(logits);
        Ok(all[all.len() - v..].to_vec())
    }

    /// Eval-mode loss for one image and prepared sequence.
    pub fn bicaption_loss(&self, image: &[T], seq: &TokenSequence, vocab: &Vocabulary, forward_only: bool) -> Result<T, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let vis = self.encode_graph(&mut g, &b, image)?;
        let loss = self.bicaption_loss_graph(&mut g, &b, vis, seq, vocab, forward_only, &mut Mode::Eval)?;
        g.check_finite()?;
        Ok(g.value(loss)[0])
    }

    /// Eval-mode loss and its gradient for every parameter tensor.
    pub fn loss_and_grads(&self, image: &[T], seq: &TokenSequence, vocab: &Vocabulary, forward_only: bool) -> Result<(T, Vec<Vec<T>>), ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let vis = self.encode_graph(&mut g, &b, image)?;
        let loss = self.bicaption_loss_graph(&mut g, &b, vis, seq, vocab, forward_only, &mut Mode::Eval)?;
        g.backward(loss)?;
        Ok((g.value(loss)[0], b.nodes().iter().map(|n| g.grad_or_zeros(*n)).collect()))
    }
}

fn check_framed<'s>(seq: &'s TokenSequence, vocab: &Vocabulary) -> Result<&'s [usize], ModelError> {
    if seq.valid_len > seq.ids.len() || seq.valid_len < 2 {
        return Err(ModelError::Sequence(format!("valid length {} of {}", seq.valid_len, seq.ids.len())));
    }
    let valid = seq.valid();
    if valid[0] != vocab.sos() || valid[valid.len() - 1] != vocab.sep() {
        return Err(ModelError::Sequence("sequence must start with [SOS] and end with [SEP]".into()));
    }
    Ok(valid)
}
