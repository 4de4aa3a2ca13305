//! Miniature pre-LayerNorm Vision Transformer.
//!
//! Activations are row-major `[tokens × d]` matrices; a batch of `B` images is
//! stacked into `B·N` rows so every token-wise op runs once per batch, and
//! attention mixes rows only within each group of `N`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{block_param, ModuleTag, ParamTree};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub ln_eps: f64,
}

impl ViTConfig {
    /// Default CPU configuration: 32px images, 8px patches, width 64, 6 blocks.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            d_model: 64,
            n_heads: 4,
            n_blocks: 6,
            mlp_hidden: 256,
            ln_eps: 1e-5,
        }
    }

    /// ViT-B/32 dimensions. Only used for parameter counting.
    pub fn vitb32_dims() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 32,
            channels: 3,
            d_model: 768,
            n_heads: 12,
            n_blocks: 12,
            mlp_hidden: 3072,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 2 || self.mlp_hidden == 0 || self.channels == 0 {
            return fail("d_model >= 2, mlp_hidden >= 1 and channels >= 1 required".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `H×W×ch` image with `f32` pixels, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(Error::shape(
                "image",
                &[size, size, channels],
                &[pixels.len()],
            ));
        }
        Ok(Image {
            size,
            channels,
            pixels,
        })
    }

    pub fn zeros(size: usize, channels: usize) -> Self {
        Image {
            size,
            channels,
            pixels: vec![0.0; size * size * channels],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.size + x) * self.channels + c] = v;
    }
}

/// Flattens each image into `n_patches` rows of `patch_dim` values
/// (patch-row-major, then pixel row, pixel column, channel).
pub fn patchify<T: Real>(cfg: &ViTConfig, images: &[&Image]) -> Result<Tensor<T>> {
    let (p, g, ch) = (cfg.patch_size, cfg.grid(), cfg.channels);
    let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
    for img in images {
        if img.size != cfg.image_size || img.channels != ch {
            return Err(Error::shape(
                "patch_embed",
                &[img.size, img.size, img.channels],
                &[cfg.image_size, cfg.image_size, ch],
            ));
        }
        for gy in 0..g {
            for gx in 0..g {
                for y in gy * p..(gy + 1) * p {
                    let start = (y * img.size + gx * p) * ch;
                    data.extend(img.pixels[start..start + p * ch].iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("patchify needs at least one image".into()));
    }
    Tensor::new(vec![images.len() * cfg.n_patches(), cfg.patch_dim()], data)
}

/// Fresh encoder parameters with a fixed draw order.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> Result<ParamTree<T>> {
    cfg.validate()?;
    let (d, m, pd) = (cfg.d_model, cfg.mlp_hidden, cfg.patch_dim());
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let mut tree = ParamTree::new();
    tree.insert("embed.patch_w", Tensor::randn(&[pd, d], inv(pd), rng))?;
    tree.insert("embed.patch_b", Tensor::zeros(&[d]))?;
    tree.insert("embed.cls", Tensor::randn(&[d], 0.1, rng))?;
    tree.insert("embed.pos", Tensor::randn(&[cfg.n_tokens(), d], 0.1, rng))?;
    for l in 0..cfg.n_blocks {
        for ln in ["ln1", "ln2"] {
            tree.insert(block_param(l, &format!("{ln}.gamma")), Tensor::ones(&[d]))?;
            tree.insert(block_param(l, &format!("{ln}.beta")), Tensor::zeros(&[d]))?;
        }
        for w in ["q", "k", "v", "o"] {
            tree.insert(block_param(l, &format!("att.w{w}")), Tensor::randn(&[d, d], inv(d), rng))?;
            tree.insert(block_param(l, &format!("att.b{w}")), Tensor::zeros(&[d]))?;
        }
        tree.insert(block_param(l, "mlp.w0"), Tensor::randn(&[d, m], inv(d), rng))?;
        tree.insert(block_param(l, "mlp.b0"), Tensor::zeros(&[m]))?;
        tree.insert(block_param(l, "mlp.w1"), Tensor::randn(&[m, d], inv(m), rng))?;
        tree.insert(block_param(l, "mlp.b1"), Tensor::zeros(&[d]))?;
    }
    tree.insert("final_ln.gamma", Tensor::ones(&[d]))?;
    tree.insert("final_ln.beta", Tensor::zeros(&[d]))?;
    Ok(tree)
}

/// Names of every encoder tensor in a block, in a fixed order.
pub const BLOCK_LOCALS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "att.wq", "att.bq", "att.wk", "att.bk", "att.wv", "att.bv",
    "att.wo", "att.bo", "ln2.gamma", "ln2.beta", "mlp.w0", "mlp.b0", "mlp.w1", "mlp.b1",
];

pub const MLP_LOCALS: [&str; 4] = ["mlp.w0", "mlp.b0", "mlp.w1", "mlp.b1"];

pub struct LnVars<'g, T: Real> {
    pub gamma: Var<'g, T>,
    pub beta: Var<'g, T>,
}

pub struct AttVars<'g, T: Real> {
    pub wq: Var<'g, T>,
    pub bq: Var<'g, T>,
    pub wk: Var<'g, T>,
    pub bk: Var<'g, T>,
    pub wv: Var<'g, T>,
    pub bv: Var<'g, T>,
    pub wo: Var<'g, T>,
    pub bo: Var<'g, T>,
}

pub struct MlpVars<'g, T: Real> {
    pub w0: Var<'g, T>,
    pub b0: Var<'g, T>,
    pub w1: Var<'g, T>,
    pub b1: Var<'g, T>,
}

pub struct BlockVars<'g, T: Real> {
    pub ln1: LnVars<'g, T>,
    pub att: AttVars<'g, T>,
    pub ln2: LnVars<'g, T>,
    pub mlp: MlpVars<'g, T>,
}

pub struct EmbedVars<'g, T: Real> {
    pub patch_w: Var<'g, T>,
    pub patch_b: Var<'g, T>,
    pub cls: Var<'g, T>,
    pub pos: Var<'g, T>,
}

/// An encoder's parameters recorded as leaves of one graph.
pub struct EncoderVars<'g, T: Real> {
    pub embed: EmbedVars<'g, T>,
    pub blocks: Vec<BlockVars<'g, T>>,
    pub final_ln: LnVars<'g, T>,
}

/// Records `tree[name]` as a leaf; trainable iff `trainable(name)`.
pub fn leaf<'g, T: Real>(
    g: &'g Graph<T>,
    tree: &ParamTree<T>,
    name: &str,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Var<'g, T>> {
    let t = tree.get(name)?.clone();
    Ok(if trainable(name) { g.param(t) } else { g.constant(t) })
}

impl<'g, T: Real> LnVars<'g, T> {
    pub fn bind(g: &'g Graph<T>, tree: &ParamTree<T>, prefix: &str, tr: &dyn Fn(&str) -> bool) -> Result<Self> {
        Ok(LnVars {
            gamma: leaf(g, tree, &format!("{prefix}.gamma"), tr)?,
            beta: leaf(g, tree, &format!("{prefix}.beta"), tr)?,
        })
    }
}

impl<'g, T: Real> AttVars<'g, T> {
    pub fn bind(g: &'g Graph<T>, tree: &ParamTree<T>, layer: usize, tr: &dyn Fn(&str) -> bool) -> Result<Self> {
        let v = |n: &str| leaf(g, tree, &block_param(layer, n), tr);
        Ok(AttVars {
            wq: v("att.wq")?,
            bq: v("att.bq")?,
            wk: v("att.wk")?,
            bk: v("att.bk")?,
            wv: v("att.wv")?,
            bv: v("att.bv")?,
            wo: v("att.wo")?,
            bo: v("att.bo")?,
        })
    }
}

impl<'g, T: Real> MlpVars<'g, T> {
    pub fn bind(g: &'g Graph<T>, tree: &ParamTree<T>, layer: usize, tr: &dyn Fn(&str) -> bool) -> Result<Self> {
        let v = |n: &str| leaf(g, tree, &block_param(layer, n), tr);
        Ok(MlpVars {
            w0: v("mlp.w0")?,
            b0: v("mlp.b0")?,
            w1: v("mlp.w1")?,
            b1: v("mlp.b1")?,
        })
    }
}

impl<'g, T: Real> BlockVars<'g, T> {
    pub fn bind(g: &'g Graph<T>, tree: &ParamTree<T>, layer: usize, tr: &dyn Fn(&str) -> bool) -> Result<Self> {
        let prefix = crate::params::block_prefix(layer);
        Ok(BlockVars {
            ln1: LnVars::bind(g, tree, &format!("{prefix}.ln1"), tr)?,
            att: AttVars::bind(g, tree, layer, tr)?,
            ln2: LnVars::bind(g, tree, &format!("{prefix}.ln2"), tr)?,
            mlp: MlpVars::bind(g, tree, layer, tr)?,
        })
    }
}

impl<'g, T: Real> EmbedVars<'g, T> {
    pub fn bind(g: &'g Graph<T>, tree: &ParamTree<T>, tr: &dyn Fn(&str) -> bool) -> Result<Self> {
        Ok(EmbedVars {
            patch_w: leaf(g, tree, "embed.patch_w", tr)?,
            patch_b: leaf(g, tree, "embed.patch_b", tr)?,
            cls: leaf(g, tree, "embed.cls", tr)?,
            pos: leaf(g, tree, "embed.pos", tr)?,
        })
    }
}

impl<'g, T: Real> EncoderVars<'g, T> {
    pub fn bind(
        g: &'g Graph<T>,
        cfg: &ViTConfig,
        tree: &ParamTree<T>,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self> {
        Ok(EncoderVars {
            embed: EmbedVars::bind(g, tree, trainable)?,
            blocks: (0..cfg.n_blocks)
                .map(|l| BlockVars::bind(g, tree, l, trainable))
                .collect::<Result<_>>()?,
            final_ln: LnVars::bind(g, tree, "final_ln", trainable)?,
        })
    }
}

impl<'g, T: Real> BlockVars<'g, T> {
    /// `(local name, var)` pairs in the order of [`BLOCK_LOCALS`].
    pub fn named(&self) -> [(&'static str, Var<'g, T>); 16] {
        let (a, m) = (&self.att, &self.mlp);
        [
            ("ln1.gamma", self.ln1.gamma),
            ("ln1.beta", self.ln1.beta),
            ("att.wq", a.wq),
            ("att.bq", a.bq),
            ("att.wk", a.wk),
            ("att.bk", a.bk),
            ("att.wv", a.wv),
            ("att.bv", a.bv),
            ("att.wo", a.wo),
            ("att.bo", a.bo),
            ("ln2.gamma", self.ln2.gamma),
            ("ln2.beta", self.ln2.beta),
            ("mlp.w0", m.w0),
            ("mlp.b0", m.b0),
            ("mlp.w1", m.w1),
            ("mlp.b1", m.b1),
        ]
    }
}

impl<'g, T: Real> EncoderVars<'g, T> {
    /// Every leaf with its full parameter name.
    pub fn named(&self) -> Vec<(String, Var<'g, T>)> {
        let e = &self.embed;
        let mut out = vec![
            ("embed.patch_w".to_string(), e.patch_w),
            ("embed.patch_b".to_string(), e.patch_b),
            ("embed.cls".to_string(), e.cls),
            ("embed.pos".to_string(), e.pos),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, v)| (block_param(l, n), v)));
        }
        out.push(("final_ln.gamma".into(), self.final_ln.gamma));
        out.push(("final_ln.beta".into(), self.final_ln.beta));
        out
    }
}

/// Patch projection, class token and positional embedding: `[B·N × d]`.
pub fn embed<'g, T: Real>(patches: Var<'g, T>, e: &EmbedVars<'g, T>, batch: usize) -> Result<Var<'g, T>> {
    let tokens = patches.linear(e.patch_w, e.patch_b)?;
    let g = patches.graph();
    g.prepend_token(tokens, e.cls, batch)?.add_broadcast(e.pos)
}

/// Multi-head self-attention `Att(x)` without the residual.
pub fn self_attention<'g, T: Real>(x: Var<'g, T>, a: &AttVars<'g, T>, seq: usize, heads: usize) -> Result<Var<'g, T>> {
    let q = x.linear(a.wq, a.bq)?;
    let k = x.linear(a.wk, a.bk)?;
    let v = x.linear(a.wv, a.bv)?;
    let mixed = x.graph().attention(q, k, v, seq, heads)?;
    mixed.linear(a.wo, a.bo)
}

/// `h + Att(LN1(h))`.
pub fn attention_block_forward<'g, T: Real>(
    h: Var<'g, T>,
    ln1: &LnVars<'g, T>,
    att: &AttVars<'g, T>,
    cfg: &ViTConfig,
) -> Result<Var<'g, T>> {
    let x = h.layer_norm(ln1.gamma, ln1.beta, T::lit(cfg.ln_eps))?;
    h.add(self_attention(x, att, cfg.n_tokens(), cfg.n_heads)?)
}

/// `gelu(x·W0 + b0)·W1 + b1` without the residual.
pub fn mlp<'g, T: Real>(x: Var<'g, T>, m: &MlpVars<'g, T>) -> Result<Var<'g, T>> {
    x.linear(m.w0, m.b0)?.gelu()?.linear(m.w1, m.b1)
}

/// `h + MLP(LN2(h))`.
pub fn mlp_forward<'g, T: Real>(h: Var<'g, T>, ln2: &LnVars<'g, T>, m: &MlpVars<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    let x = h.layer_norm(ln2.gamma, ln2.beta, T::lit(eps))?;
    h.add(mlp(x, m)?)
}

pub fn block_forward<'g, T: Real>(h: Var<'g, T>, b: &BlockVars<'g, T>, cfg: &ViTConfig) -> Result<Var<'g, T>> {
    let h = attention_block_forward(h, &b.ln1, &b.att, cfg)?;
    mlp_forward(h, &b.ln2, &b.mlp, cfg.ln_eps)
}

/// Row 0 of every group of `seq` rows, stacked: `[B × d]`.
pub fn class_tokens<'g, T: Real>(h: Var<'g, T>, seq: usize) -> Result<Var<'g, T>> {
    let rows = h.value().rows();
    if seq == 0 || !rows.is_multiple_of(seq) {
        return Err(Error::contract(format!("{rows} rows are not groups of {seq}")));
    }
    let parts = (0..rows / seq)
        .map(|b| h.slice_rows(b * seq, 1))
        .collect::<Result<Vec<_>>>()?;
    h.graph().concat_rows(&parts)
}

/// Final LayerNorm applied to the class tokens.
pub fn final_features<'g, T: Real>(h: Var<'g, T>, ln: &LnVars<'g, T>, cfg: &ViTConfig) -> Result<Var<'g, T>> {
    class_tokens(h, cfg.n_tokens())?.layer_norm(ln.gamma, ln.beta, T::lit(cfg.ln_eps))
}

/// Class-token features `[B × d]` for a batch of patchified images.
pub fn encode_vars<'g, T: Real>(
    patches: Var<'g, T>,
    enc: &EncoderVars<'g, T>,
    cfg: &ViTConfig,
    batch: usize,
) -> Result<Var<'g, T>> {
    let mut h = embed(patches, &enc.embed, batch)?;
    for b in &enc.blocks {
        h = block_forward(h, b, cfg)?;
    }
    final_features(h, &enc.final_ln, cfg)
}

/// Something that maps a batch of images to `[B × d]` features.
pub trait FeatureModel<T: Real> {
    fn config(&self) -> &ViTConfig;

    fn features(&self, images: &[&Image]) -> Result<Tensor<T>>;
}

/// A plain encoder: configuration plus one parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit<T: Real> {
    pub config: ViTConfig,
    pub params: ParamTree<T>,
}

impl<T: Real> Vit<T> {
    pub fn new(config: ViTConfig, params: ParamTree<T>) -> Result<Self> {
        config.validate()?;
        Ok(Vit { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Vit { config, params })
    }
}

impl<T: Real> FeatureModel<T> for Vit<T> {
    fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn features(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let enc = EncoderVars::bind(&g, &self.config, &self.params, &|_| false)?;
        let x = g.constant(patchify(&self.config, images)?);
        let out = encode_vars(x, &enc, &self.config, images.len())?;
        Ok((*out.value()).clone())
    }
}

/// Class-token representation of one image.
pub fn vit_encode<T: Real>(image: &Image, model: &Vit<T>) -> Result<Tensor<T>> {
    model.features(&[image])?.reshape(&[model.config.d_model])
}

/// Per-task linear classifier on top of the encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead<T> {
    pub task_id: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub frozen: bool,
}

impl<T: Real> TaskHead<T> {
    pub fn new(task_id: usize, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.cols() {
            return Err(Error::shape("task head", weight.shape(), bias.shape()));
        }
        Ok(TaskHead {
            task_id,
            weight,
            bias,
            frozen: true,
        })
    }

    pub fn random<R: Rng + ?Sized>(task_id: usize, d: usize, classes: usize, rng: &mut R) -> Self {
        TaskHead {
            task_id,
            weight: Tensor::randn(&[d, classes], 1.0 / (d as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
            frozen: true,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    /// `[B × C]` logits for `[B × d]` features.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        features.matmul(&self.weight)?.add_broadcast(&self.bias)
    }

    /// Records the head on `g` (trainable iff not frozen) and applies it.
    pub fn logits_var<'g>(&self, g: &'g Graph<T>, features: Var<'g, T>) -> Result<Var<'g, T>> {
        let (w, b) = if self.frozen {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        } else {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        };
        features.linear(w, b)
    }

    pub fn weight_name(&self) -> String {
        format!("head.{}.w", self.task_id)
    }

    pub fn bias_name(&self) -> String {
        format!("head.{}.b", self.task_id)
    }

    pub fn insert_into(&self, tree: &mut ParamTree<T>) -> Result<()> {
        tree.insert(self.weight_name(), self.weight.clone())?;
        tree.insert(self.bias_name(), self.bias.clone())
    }

    /// Reads `head.{task_id}.w` / `.b` back out of a tree.
    pub fn from_tree(tree: &ParamTree<T>, task_id: usize) -> Result<Self> {
        TaskHead::new(
            task_id,
            tree.get(&format!("head.{task_id}.w"))?.clone(),
            tree.get(&format!("head.{task_id}.b"))?.clone(),
        )
    }
}

/// Logits for a single feature vector.
pub fn classify<T: Real>(feature: &Tensor<T>, head: &TaskHead<T>) -> Result<Tensor<T>> {
    let d = head.weight.rows();
    if feature.len() != d {
        return Err(Error::shape("classify", feature.shape(), head.weight.shape()));
    }
    head.logits(&feature.reshape(&[1, d])?)?.reshape(&[head.classes()])
}

/// Keeps only the encoder tensors (drops heads and routers).
pub fn encoder_only<T: Real>(tree: &ParamTree<T>) -> ParamTree<T> {
    let mut out = ParamTree::new();
    for (name, t) in tree.iter() {
        if ModuleTag::ENCODER.contains(&ParamTree::<T>::tag(name)) {
            out.insert(name, t.clone()).expect("name already validated");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::layer_of;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            mlp_hidden: 16,
            ln_eps: 1e-5,
        }
    }

    fn rand_image(cfg: &ViTConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size * cfg.image_size * cfg.channels;
        Image::new(cfg.image_size, cfg.channels, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn token_counts() {
        assert_eq!(ViTConfig::desk().n_tokens(), 17);
        assert_eq!(ViTConfig::vitb32_dims().n_tokens(), 50);
        let mut bad = ViTConfig::desk();
        bad.patch_size = 7;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        bad = ViTConfig::desk();
        bad.n_heads = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_layout_and_size_check() {
        let cfg = tiny();
        let mut img = Image::zeros(8, 1);
        img.set(1, 5, 0, 3.0); // patch (0,1), local row 1 col 1
        let p = patchify::<f64>(&cfg, &[&img]).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        assert_eq!(p.row(1)[5], 3.0);
        assert!(patchify::<f64>(&cfg, &[&Image::zeros(16, 1)]).is_err());
    }

    #[test]
    fn zero_image_and_weights_give_positions() {
        let cfg = tiny();
        let mut tree = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *tree.get_mut("embed.patch_w").unwrap() = Tensor::zeros(&[16, 8]);
        *tree.get_mut("embed.cls").unwrap() = Tensor::zeros(&[8]);
        let g = Graph::new();
        let e = EmbedVars::bind(&g, &tree, &|_| false).unwrap();
        let x = g.constant(patchify(&cfg, &[&Image::zeros(8, 1)]).unwrap());
        let h = embed(x, &e, 1).unwrap();
        assert_eq!(*h.value(), *tree.get("embed.pos").unwrap());
    }

    #[test]
    fn tags_partition_encoder() {
        let cfg = tiny();
        let tree = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut total = 0;
        for tag in ModuleTag::ENCODER {
            total += tree.select(tag, None).count();
        }
        assert_eq!(total, tree.len());
        assert_eq!(tree.len(), 4 + 16 * cfg.n_blocks + 2);
        for (name, _) in tree.select(ModuleTag::Mlp, None) {
            assert!(layer_of(name).is_some());
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, -2.0, 0.5, 3.0]]));
        let k = g.constant(Tensor::from_rows(&[&[0.2, 0.1, -1.0, 4.0]]));
        let v = g.constant(Tensor::from_rows(&[&[7.0, 8.0, 9.0, 10.0]]));
        let out = g.attention(q, k, v, 1, 2).unwrap();
        assert_eq!(*out.value(), *v.value());
    }

    #[test]
    fn zero_out_projection_is_residual_identity() {
        let cfg = tiny();
        let mut tree = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        *tree.get_mut("blocks.00.att.wo").unwrap() = Tensor::zeros(&[8, 8]);
        let g = Graph::new();
        let b = BlockVars::bind(&g, &tree, 0, &|_| false).unwrap();
        let h = g.constant(Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let mut c = cfg.clone();
        c.image_size = 8;
        c.patch_size = 4; // 5 tokens
        let out = attention_block_forward(h, &b.ln1, &b.att, &c).unwrap();
        assert_eq!(*out.value(), *h.value());
    }

    /// Dense re-evaluation of pre-LN attention for a short sequence.
    fn attention_oracle(h: &[Vec<f64>], tree: &ParamTree<f64>, heads: usize) -> Vec<Vec<f64>> {
        let get = |n: &str| tree.get(&block_param(0, n)).unwrap().clone();
        let d = h[0].len();
        let ln = |x: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let (gm, bt) = (get("ln1.gamma"), get("ln1.beta"));
            (0..d).map(|i| (x[i] - mu) / (var + 1e-5).sqrt() * gm.data()[i] + bt.data()[i]).collect()
        };
        let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| x[i] * w.data()[i * d + j]).sum::<f64>() + b.data()[j])
                .collect()
        };
        let xs: Vec<Vec<f64>> = h.iter().map(|r| ln(r)).collect();
        let q: Vec<_> = xs.iter().map(|x| affine(x, &get("att.wq"), &get("att.bq"))).collect();
        let k: Vec<_> = xs.iter().map(|x| affine(x, &get("att.wk"), &get("att.bk"))).collect();
        let v: Vec<_> = xs.iter().map(|x| affine(x, &get("att.wv"), &get("att.bv"))).collect();
        let dh = d / heads;
        let n = h.len();
        let mut mixed = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            for s in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|t| (0..dh).map(|i| q[s][hd * dh + i] * k[t][hd * dh + i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for t in 0..n {
                    let p = scores[t].exp() / z;
                    for i in 0..dh {
                        mixed[s][hd * dh + i] += p * v[t][hd * dh + i];
                    }
                }
            }
        }
        (0..n)
            .map(|s| {
                let o = affine(&mixed[s], &get("att.wo"), &get("att.bo"));
                (0..d).map(|i| h[s][i] + o[i]).collect()
            })
            .collect()
    }

    #[test]
    fn two_token_attention_matches_oracle() {
        let mut cfg = tiny();
        cfg.image_size = 4; // one patch + class token
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tree = init_params::<f64, _>(&cfg, &mut rng).unwrap();
        for n in ["ln1.gamma", "ln1.beta", "att.bq", "att.bo"] {
            *tree.get_mut(&block_param(0, n)).unwrap() = Tensor::randn(&[8], 0.5, &mut rng);
        }
        let h = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let g = Graph::new();
        let b = BlockVars::bind(&g, &tree, 0, &|_| false).unwrap();
        let out = attention_block_forward(g.constant(h.clone()), &b.ln1, &b.att, &cfg).unwrap();
        let rows: Vec<Vec<f64>> = (0..2).map(|r| h.row(r).to_vec()).collect();
        let want = attention_oracle(&rows, &tree, 2);
        for r in 0..2 {
            for c in 0..8 {
                assert!((out.value().row(r)[c] - want[r][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mlp_identities_and_oracle() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tree = init_params::<f64, _>(&cfg, &mut rng).unwrap();
        let h = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);

        let g = Graph::new();
        let b = BlockVars::bind(&g, &tree, 0, &|_| false).unwrap();
        let out = mlp_forward(g.constant(Tensor::zeros(&[3, 8])), &b.ln2, &b.mlp, cfg.ln_eps).unwrap();
        assert_eq!(out.value().sq_norm(), 0.0);

        // step-by-step oracle
        let out = mlp_forward(g.constant(h.clone()), &b.ln2, &b.mlp, cfg.ln_eps).unwrap();
        let x = h.layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-5).unwrap();
        let get = |n: &str| tree.get(&block_param(0, n)).unwrap().clone();
        let hidden = x.matmul(&get("mlp.w0")).unwrap().add_broadcast(&get("mlp.b0")).unwrap();
        let act = hidden.map(|v| 0.5 * v * (1.0 + (0.7978845608 * (v + 0.044715 * v * v * v)).tanh()));
        let want = h
            .add(&act.matmul(&get("mlp.w1")).unwrap().add_broadcast(&get("mlp.b1")).unwrap())
            .unwrap();
        assert!(out.value().max_abs_diff(&want).unwrap() < 1e-6);

        *tree.get_mut("blocks.00.mlp.w1").unwrap() = Tensor::zeros(&[16, 8]);
        let g = Graph::new();
        let b = BlockVars::bind(&g, &tree, 0, &|_| false).unwrap();
        let out = mlp_forward(g.constant(h.clone()), &b.ln2, &b.mlp, cfg.ln_eps).unwrap();
        assert_eq!(*out.value(), h);
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let cfg = tiny();
        let a = Vit::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = Vit::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let img = rand_image(&cfg, 7);
        let fa = vit_encode(&img, &a).unwrap();
        assert_eq!(fa.shape(), &[8]);
        assert_eq!(fa, vit_encode(&img, &b).unwrap());
    }

    #[test]
    fn zero_depth_is_normalized_class_token() {
        let mut cfg = tiny();
        cfg.n_blocks = 0;
        let m = Vit::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let f = vit_encode(&rand_image(&cfg, 9), &m).unwrap();
        let cls = m.params.get("embed.cls").unwrap().add(&m.params.get("embed.pos").unwrap().slice_rows(0, 1).unwrap().reshape(&[8]).unwrap()).unwrap();
        let want = cls.reshape(&[1, 8]).unwrap().layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-5).unwrap();
        assert!(f.max_abs_diff(&want.reshape(&[8]).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn batched_matches_single() {
        let cfg = tiny();
        let m = Vit::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let imgs: Vec<Image> = (0..3).map(|s| rand_image(&cfg, 20 + s)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = m.features(&refs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let one = vit_encode(img, &m).unwrap();
            assert_eq!(batch.row(i), one.data());
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = tiny();
        let mut m = Vit::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        *m.params.get_mut("embed.pos").unwrap() = Tensor::zeros(&[5, 8]);
        let g = Graph::new();
        let enc = EncoderVars::bind(&g, &cfg, &m.params, &|_| false).unwrap();
        let p = patchify::<f64>(&cfg, &[&rand_image(&cfg, 12)]).unwrap();
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| p.row(i)).collect();
        let q = Tensor::from_rows(&rows);
        let run = |x: Tensor<f64>| {
            let mut h = embed(g.constant(x), &enc.embed, 1).unwrap();
            for b in &enc.blocks {
                h = block_forward(h, b, &cfg).unwrap();
            }
            (*h.value()).clone()
        };
        let (hp, hq) = (run(p), run(q));
        for c in 0..8 {
            assert!((hp.row(0)[c] - hq.row(0)[c]).abs() < 1e-10);
        }
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((hp.row(i + 1)[c] - hq.row(j + 1)[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn classify_cases() {
        let feat = Tensor::vector(vec![0.5f64, -1.0, 2.0]);
        let zero = TaskHead::new(0, Tensor::zeros(&[3, 4]), Tensor::zeros(&[4])).unwrap();
        let p = classify(&feat, &zero).unwrap().softmax_lastdim();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let eye = TaskHead::new(0, Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        assert_eq!(classify(&feat, &eye).unwrap().argmax(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = TaskHead::<f64>::random(1, 3, 5, &mut rng);
        let got = classify(&feat, &h).unwrap();
        for c in 0..5 {
            let want = (0..3).map(|i| feat.data()[i] * h.weight.data()[i * 5 + c]).sum::<f64>() + h.bias.data()[c];
            assert_eq!(got.data()[c], want);
        }
        assert!(classify(&Tensor::vector(vec![1.0f64]), &h).is_err());
    }
}
