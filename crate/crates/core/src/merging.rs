//! Static merges (weight averaging, task arithmetic) and the weight-ensembling
//! mixture-of-experts up-scaling with input-conditioned routers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Manifest, Record};
use crate::error::{Error, Result};
use crate::params::{block_param, layer_of, local_name, ModuleTag, ParamTree};
use crate::scalar::Real;
use crate::sparse::SparseTensor;
use crate::taskvec::{prune_tensors, PruneGrouping, TaskVector};
use crate::tensor::Tensor;
use crate::vit::{
    class_tokens, embed, mlp, patchify, self_attention, AttVars, BlockVars, EmbedVars, FeatureModel,
    Image, LnVars, MlpVars, TaskHead, ViTConfig, BLOCK_LOCALS, MLP_LOCALS,
};

/// Elementwise mean of structurally identical trees.
pub fn merge_weight_average<T: Real>(models: &[&ParamTree<T>]) -> Result<ParamTree<T>> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Empty("weight averaging needs at least one model".into()))?;
    let mut acc = (*first).clone();
    for m in rest {
        acc.axpy_filtered(T::one(), m, |_| true)?;
    }
    let inv = T::lit(models.len() as f64);
    Ok(acc.map(|a| a / inv))
}

/// Which tensors a static merge touches.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ModuleFilter {
    #[default]
    All,
    Tags(Vec<ModuleTag>),
    Names(Vec<String>),
}

impl ModuleFilter {
    pub fn accepts(&self, name: &str) -> bool {
        match self {
            ModuleFilter::All => true,
            ModuleFilter::Tags(tags) => ModuleTag::of_name(name).is_ok_and(|t| tags.contains(&t)),
            ModuleFilter::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

/// `θ_0 + λ Σ τ_i` on accepted tensors; the rest are copied from `θ_0`.
pub fn merge_task_arithmetic<T: Real>(
    theta_0: &ParamTree<T>,
    task_vectors: &[&TaskVector<T>],
    lambda: T,
    filter: &ModuleFilter,
) -> Result<ParamTree<T>> {
    if lambda < T::zero() {
        return Err(Error::Config(format!("task arithmetic needs lambda >= 0, got {lambda}")));
    }
    let mut sum = theta_0.scale(T::zero());
    for tv in task_vectors {
        sum.axpy_filtered(T::one(), &tv.tree, |_| true)?;
    }
    let mut out = theta_0.clone();
    out.axpy_filtered(lambda, &sum, |n| filter.accepts(n))?;
    Ok(out)
}

/// How router weights are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RouterInit {
    /// Gaussian weights with variance 0.01.
    #[default]
    Paper,
    /// Gaussian weights with standard deviation 0.01.
    SmallStd,
    /// All weights zero; the output is the bias `λ` for every input.
    ZeroWeights,
}

impl RouterInit {
    fn std(self) -> f64 {
        match self {
            RouterInit::Paper => 0.1,
            RouterInit::SmallStd => 0.01,
            RouterInit::ZeroWeights => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RouterInit::Paper => "paper",
            RouterInit::SmallStd => "std0.01",
            RouterInit::ZeroWeights => "zero",
        }
    }
}

impl FromStr for RouterInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RouterInit::Paper),
            "std0.01" | "small" => Ok(RouterInit::SmallStd),
            "zero" => Ok(RouterInit::ZeroWeights),
            _ => Err(Error::Config(format!("unknown router init `{s}`"))),
        }
    }
}

/// Router `R(h)` of depth `l_fc`: `b0`, `W0 h + b0`, or `W1 ReLU(W0 h + b0) + b1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T: Real> {
    pub depth: usize,
    pub w0: Option<Tensor<T>>,
    pub b0: Tensor<T>,
    pub w1: Option<Tensor<T>>,
    pub b1: Option<Tensor<T>>,
}

pub const ROUTER_TENSORS: [&str; 4] = ["w0", "b0", "w1", "b1"];

pub fn init_router<T: Real, R: Rng + ?Sized>(
    n: usize,
    d: usize,
    hidden: usize,
    depth: usize,
    lambda: f64,
    init: RouterInit,
    rng: &mut R,
) -> Result<RouterParams<T>> {
    if n == 0 {
        return Err(Error::Config("a router needs at least one task".into()));
    }
    let std = init.std();
    let weights = |r: usize, c: usize, rng: &mut R| {
        if std == 0.0 {
            Tensor::zeros(&[r, c])
        } else {
            Tensor::randn(&[r, c], std, rng)
        }
    };
    let lam = Tensor::full(&[n], T::lit(lambda));
    match depth {
        0 => Ok(RouterParams {
            depth,
            w0: None,
            b0: lam,
            w1: None,
            b1: None,
        }),
        1 => Ok(RouterParams {
            depth,
            w0: Some(weights(d, n, rng)),
            b0: lam,
            w1: None,
            b1: None,
        }),
        2 => {
            let w0 = weights(d, hidden, rng);
            let w1 = weights(hidden, n, rng);
            Ok(RouterParams {
                depth,
                w0: Some(w0),
                b0: Tensor::zeros(&[hidden]),
                w1: Some(w1),
                b1: Some(lam),
            })
        }
        _ => Err(Error::Config(format!("router depth must be 0, 1 or 2, got {depth}"))),
    }
}

impl<T: Real> RouterParams<T> {
    pub fn n_tasks(&self) -> usize {
        match &self.b1 {
            Some(b1) => b1.len(),
            None => self.b0.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Stored tensors in `w0, b0, w1, b1` order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(w) = &self.w0 {
            out.push(("w0", w));
        }
        out.push(("b0", &self.b0));
        if let Some(w) = &self.w1 {
            out.push(("w1", w));
        }
        if let Some(b) = &self.b1 {
            out.push(("b1", b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w0 {
            out.push(w);
        }
        out.push(&mut self.b0);
        if let Some(w) = &mut self.w1 {
            out.push(w);
        }
        if let Some(b) = &mut self.b1 {
            out.push(b);
        }
        out
    }

    /// Per-token routing weights `[N × n]` (no normalization).
    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = h.rows();
        match self.depth {
            0 => Tensor::zeros(&[rows, self.b0.len()]).add_broadcast(&self.b0),
            1 => h.matmul(self.w0.as_ref().unwrap())?.add_broadcast(&self.b0),
            _ => h
                .matmul(self.w0.as_ref().unwrap())?
                .add_broadcast(&self.b0)?
                .relu()
                .matmul(self.w1.as_ref().unwrap())?
                .add_broadcast(self.b1.as_ref().unwrap()),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> RouterVars<'g, T> {
        let leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        RouterVars {
            depth: self.depth,
            w0: self.w0.as_ref().map(leaf),
            b0: leaf(&self.b0),
            w1: self.w1.as_ref().map(leaf),
            b1: self.b1.as_ref().map(leaf),
        }
    }

    fn insert_into(&self, ck: &mut Checkpoint<T>, prefix: &str) {
        for (name, t) in self.tensors() {
            ck.insert_dense(format!("{prefix}/{name}"), t.clone());
        }
    }

    fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str, depth: usize) -> Result<Self> {
        let get = |n: &str| ck.dense(&format!("{prefix}/{n}")).cloned();
        let opt = |n: &str| -> Result<Option<Tensor<T>>> {
            Ok(ck.tensors.get(&format!("{prefix}/{n}")).map(|r| r.to_dense()))
        };
        let r = RouterParams {
            depth,
            w0: opt("w0")?,
            b0: get("b0")?,
            w1: opt("w1")?,
            b1: opt("b1")?,
        };
        let expect = (depth >= 1, depth == 2, depth == 2);
        if (r.w0.is_some(), r.w1.is_some(), r.b1.is_some()) != expect {
            return Err(CheckpointError::Invalid {
                tensor: prefix.to_string(),
                reason: format!("tensor set does not match router depth {depth}"),
            }
            .into());
        }
        Ok(r)
    }
}

/// Router parameters recorded on a graph.
pub struct RouterVars<'g, T: Real> {
    pub depth: usize,
    pub w0: Option<Var<'g, T>>,
    pub b0: Var<'g, T>,
    pub w1: Option<Var<'g, T>>,
    pub b1: Option<Var<'g, T>>,
}

impl<'g, T: Real> RouterVars<'g, T> {
    /// Per-sample merging weights: the router output averaged over each
    /// group of `seq` rows. Returns one `[n]` vector per group.
    pub fn lambdas(&self, x: Var<'g, T>, seq: usize) -> Result<Vec<Var<'g, T>>> {
        let rows = x.value().rows();
        if seq == 0 || rows == 0 || !rows.is_multiple_of(seq) {
            return Err(Error::Empty(format!("router input of {rows} rows in groups of {seq}")));
        }
        let groups = rows / seq;
        if self.depth == 0 {
            // constant output: the mean over tokens is the bias itself
            return Ok(vec![self.b0; groups]);
        }
        let w0 = self.w0.expect("depth >= 1 has w0");
        let mut r = x.linear(w0, self.b0)?;
        if self.depth == 2 {
            r = r.relu()?.linear(self.w1.expect("w1"), self.b1.expect("b1"))?;
        }
        (0..groups).map(|s| r.slice_rows(s * seq, seq)?.mean_rows()).collect()
    }

    /// Gradients in the layout of [`RouterParams`].
    pub fn grads(&self, grads: &Gradients<T>) -> RouterParams<T> {
        RouterParams {
            depth: self.depth,
            w0: self.w0.map(|v| grads.wrt(v)),
            b0: grads.wrt(self.b0),
            w1: self.w1.map(|v| grads.wrt(v)),
            b1: self.b1.map(|v| grads.wrt(v)),
        }
    }
}

/// Which sub-modules of each block become mixture-of-experts modules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpscaleStrategy {
    #[default]
    MlpOnly,
    AttAndMlpSeparately,
    EntireBlock,
}

impl UpscaleStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            UpscaleStrategy::MlpOnly => "mlp-only",
            UpscaleStrategy::AttAndMlpSeparately => "att-and-mlp",
            UpscaleStrategy::EntireBlock => "entire-block",
        }
    }
}

impl fmt::Display for UpscaleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpscaleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-only" | "mlp" => Ok(UpscaleStrategy::MlpOnly),
            "att-and-mlp" | "att-mlp" => Ok(UpscaleStrategy::AttAndMlpSeparately),
            "entire-block" | "block" => Ok(UpscaleStrategy::EntireBlock),
            _ => Err(Error::Config(format!("unknown up-scaling strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpscaleConfig {
    pub strategy: UpscaleStrategy,
    /// Static coefficient for non-critical modules and router bias init.
    pub lambda: f64,
    pub l_fc: usize,
    pub shared_router: bool,
    pub rho: f64,
    pub router_init: RouterInit,
    /// Router hidden width for `l_fc = 2`; `None` means `d_model`.
    pub hidden: Option<usize>,
    pub grouping: PruneGrouping,
}

impl Default for UpscaleConfig {
    fn default() -> Self {
        UpscaleConfig {
            strategy: UpscaleStrategy::MlpOnly,
            lambda: 0.3,
            l_fc: 2,
            shared_router: false,
            rho: 0.0,
            router_init: RouterInit::Paper,
            hidden: None,
            grouping: PruneGrouping::Module,
        }
    }
}

impl UpscaleConfig {
    pub fn wemoe() -> Self {
        Self::default()
    }

    /// Sparse dictionaries at ratio `rho` with one router shared by every block.
    pub fn ewemoe(rho: f64) -> Self {
        UpscaleConfig {
            rho,
            shared_router: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.l_fc > 2 {
            return Err(Error::Config(format!("l_fc must be 0, 1 or 2, got {}", self.l_fc)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeKind {
    Mlp,
    Attention,
    Block,
}

impl MoeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MoeKind::Mlp => "mlp",
            MoeKind::Attention => "attention",
            MoeKind::Block => "block",
        }
    }

    /// Block-local tensor names covered by a module of this kind.
    pub fn locals(self) -> Vec<&'static str> {
        match self {
            MoeKind::Mlp => MLP_LOCALS.to_vec(),
            MoeKind::Attention => BLOCK_LOCALS.iter().copied().filter(|n| n.starts_with("att.")).collect(),
            MoeKind::Block => BLOCK_LOCALS.to_vec(),
        }
    }
}

impl FromStr for MoeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(MoeKind::Mlp),
            "attention" => Ok(MoeKind::Attention),
            "block" => Ok(MoeKind::Block),
            _ => Err(Error::Config(format!("unknown module kind `{s}`"))),
        }
    }
}

/// Per-task deltas of one module, indexed `[task][tensor]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Dictionary<T: Real> {
    Dense(Vec<Vec<Tensor<T>>>),
    Sparse(Vec<Vec<Arc<SparseTensor<T>>>>),
}

impl<T: Real> Dictionary<T> {
    pub fn n_tasks(&self) -> usize {
        match self {
            Dictionary::Dense(d) => d.len(),
            Dictionary::Sparse(d) => d.len(),
        }
    }

    /// Stored values (non-zero count for sparse entries).
    pub fn stored_values(&self) -> usize {
        match self {
            Dictionary::Dense(d) => d.iter().flatten().map(Tensor::len).sum(),
            Dictionary::Sparse(d) => d.iter().flatten().map(|s| s.nnz()).sum(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Dictionary::Sparse(_))
    }

    /// Dense copy of task `t`, tensor `k`.
    pub fn dense_term(&self, t: usize, k: usize) -> Tensor<T> {
        match self {
            Dictionary::Dense(d) => d[t][k].clone(),
            Dictionary::Sparse(d) => d[t][k].to_dense(),
        }
    }
}

/// One up-scaled module: pre-trained weights, a task-vector dictionary and
/// the index of the router that weighs it.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeModule<T: Real> {
    pub layer: usize,
    pub kind: MoeKind,
    /// Full parameter names, in the kind's fixed order.
    pub names: Vec<String>,
    pub base: Vec<Tensor<T>>,
    pub dictionary: Dictionary<T>,
    pub router: usize,
}

impl<T: Real> MoeModule<T> {
    /// Weights `θ_0 + Σ_i λ_i D_i` materialized as plain tensors.
    pub fn merged_weights(&self, lambda: &[T]) -> Result<Vec<Tensor<T>>> {
        if lambda.len() != self.dictionary.n_tasks() {
            return Err(Error::contract(format!(
                "{} merging weights for {} experts",
                lambda.len(),
                self.dictionary.n_tasks()
            )));
        }
        let mut out = self.base.clone();
        for (k, w) in out.iter_mut().enumerate() {
            for (t, &l) in lambda.iter().enumerate() {
                match &self.dictionary {
                    Dictionary::Dense(d) => w.axpy(l, &d[t][k])?,
                    Dictionary::Sparse(d) => d[t][k].axpy_into(l, w.data_mut()),
                }
            }
        }
        Ok(out)
    }
}

/// Forward evaluation strategy for MLP modules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecPath {
    /// Build `θ_0 + D λ` per sample, then run the MLP once.
    #[default]
    Materialize,
    /// Run the base MLP and per-task delta products, combining activations.
    Decomposed,
}

/// Statically merged encoder plus up-scaled modules, routers and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedModel<T: Real> {
    pub config: ViTConfig,
    pub upscale: UpscaleConfig,
    /// Every encoder tensor not owned by an up-scaled module.
    pub statics: ParamTree<T>,
    pub modules: Vec<MoeModule<T>>,
    pub routers: Vec<RouterParams<T>>,
    pub heads: Vec<TaskHead<T>>,
}

/// Graph outputs of one merged forward pass.
pub struct MergedForward<'g, T: Real> {
    /// `[B × d]` features after the final LayerNorm.
    pub features: Var<'g, T>,
    /// `lambdas[module][sample]`, each of length `n`.
    pub lambdas: Vec<Vec<Var<'g, T>>>,
    pub routers: Vec<RouterVars<'g, T>>,
    /// Hidden state entering each evaluated block.
    pub block_inputs: Vec<Var<'g, T>>,
    /// Router input of each module, `None` before `start`.
    pub router_inputs: Vec<Option<Var<'g, T>>>,
}

pub fn upscale_to_wemoe<T: Real, R: Rng + ?Sized>(
    config: &ViTConfig,
    theta_0: &ParamTree<T>,
    task_vectors: &[&TaskVector<T>],
    heads: Vec<TaskHead<T>>,
    up: &UpscaleConfig,
    rng: &mut R,
) -> Result<MergedModel<T>> {
    config.validate()?;
    up.validate()?;
    if task_vectors.is_empty() {
        return Err(Error::Empty("up-scaling needs at least one task vector".into()));
    }
    let n = task_vectors.len();
    let merged = merge_task_arithmetic(theta_0, task_vectors, T::lit(up.lambda), &ModuleFilter::All)?;
    let kinds: &[MoeKind] = match up.strategy {
        UpscaleStrategy::MlpOnly => &[MoeKind::Mlp],
        UpscaleStrategy::AttAndMlpSeparately => &[MoeKind::Attention, MoeKind::Mlp],
        UpscaleStrategy::EntireBlock => &[MoeKind::Block],
    };
    let mut statics = merged;
    let mut modules = Vec::new();
    for layer in 0..config.n_blocks {
        for &kind in kinds {
            let names: Vec<String> = kind.locals().iter().map(|n| block_param(layer, n)).collect();
            let base = names.iter().map(|n| theta_0.get(n).cloned()).collect::<Result<Vec<_>>>()?;
            for name in &names {
                statics.remove(name);
            }
            let dictionary = if up.rho > 0.0 {
                let mut d = Vec::with_capacity(n);
                for tv in task_vectors {
                    let s = prune_tensors(tv, layer, &names, up.rho, up.grouping)?;
                    d.push(names.iter().map(|nm| Arc::new(s.tensors[nm].clone())).collect());
                }
                Dictionary::Sparse(d)
            } else {
                Dictionary::Dense(
                    task_vectors
                        .iter()
                        .map(|tv| names.iter().map(|nm| tv.tree.get(nm).cloned()).collect::<Result<Vec<_>>>())
                        .collect::<Result<_>>()?,
                )
            };
            let router = if up.shared_router { 0 } else { modules.len() };
            modules.push(MoeModule {
                layer,
                kind,
                names,
                base,
                dictionary,
                router,
            });
        }
    }
    let n_routers = if up.shared_router { 1.min(modules.len()) } else { modules.len() };
    let hidden = up.hidden.unwrap_or(config.d_model);
    let routers = (0..n_routers)
        .map(|_| init_router(n, config.d_model, hidden, up.l_fc, up.lambda, up.router_init, rng))
        .collect::<Result<_>>()?;
    Ok(MergedModel {
        config: config.clone(),
        upscale: up.clone(),
        statics,
        modules,
        routers,
        heads,
    })
}

/// Graph leaves of one module: base and dictionary terms.
struct ModuleVars<'g, T: Real> {
    base: Vec<Var<'g, T>>,
    dense: Vec<Vec<Var<'g, T>>>,
}

/// Per-sample weights of a module, looked up by block-local name.
struct SampleWeights<'g, T: Real> {
    map: HashMap<&'static str, Var<'g, T>>,
}

impl<'g, T: Real> SampleWeights<'g, T> {
    fn get(&self, local: &str) -> Var<'g, T> {
        self.map[local]
    }

    fn ln(&self, which: &str) -> LnVars<'g, T> {
        LnVars {
            gamma: self.get(&format!("{which}.gamma")),
            beta: self.get(&format!("{which}.beta")),
        }
    }

    fn att(&self) -> AttVars<'g, T> {
        AttVars {
            wq: self.get("att.wq"),
            bq: self.get("att.bq"),
            wk: self.get("att.wk"),
            bk: self.get("att.bk"),
            wv: self.get("att.wv"),
            bv: self.get("att.bv"),
            wo: self.get("att.wo"),
            bo: self.get("att.bo"),
        }
    }

    fn mlp(&self) -> MlpVars<'g, T> {
        MlpVars {
            w0: self.get("mlp.w0"),
            b0: self.get("mlp.b0"),
            w1: self.get("mlp.w1"),
            b1: self.get("mlp.b1"),
        }
    }
}

impl<T: Real> MergedModel<T> {
    pub fn n_tasks(&self) -> usize {
        self.routers.first().map_or(0, RouterParams::n_tasks)
    }

    pub fn router_param_count(&self) -> usize {
        self.routers.iter().map(RouterParams::num_params).sum()
    }

    /// Modules belonging to block `layer`.
    pub fn modules_in_layer(&self, layer: usize) -> impl Iterator<Item = (usize, &MoeModule<T>)> {
        self.modules.iter().enumerate().filter(move |(_, m)| m.layer == layer)
    }

    fn module_for(&self, layer: usize, kind: MoeKind) -> Option<usize> {
        self.modules.iter().position(|m| m.layer == layer && m.kind == kind)
    }

    /// Stored values: statics, module bases, dictionaries, routers (heads excluded).
    pub fn stored_values(&self) -> usize {
        self.statics.num_elements()
            + self
                .modules
                .iter()
                .map(|m| m.base.iter().map(Tensor::len).sum::<usize>() + m.dictionary.stored_values())
                .sum::<usize>()
            + self.router_param_count()
    }

    /// Records the model on `g` and runs it on a batch. Only router
    /// parameters become trainable leaves, and only if `train_routers`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        images: &[&Image],
        train_routers: bool,
        path: ExecPath,
    ) -> Result<MergedForward<'g, T>> {
        let patches = g.constant(patchify(&self.config, images)?);
        self.forward_patches(g, patches, images.len(), train_routers, path)
    }

    pub fn forward_patches<'g>(
        &self,
        g: &'g Graph<T>,
        patches: Var<'g, T>,
        batch: usize,
        train_routers: bool,
        path: ExecPath,
    ) -> Result<MergedForward<'g, T>> {
        let c = |name: &str| -> Result<Var<'g, T>> { Ok(g.constant(self.statics.get(name)?.clone())) };
        let e = EmbedVars {
            patch_w: c("embed.patch_w")?,
            patch_b: c("embed.patch_b")?,
            cls: c("embed.cls")?,
            pos: c("embed.pos")?,
        };
        let h = embed(patches, &e, batch)?;
        self.forward_from(g, h, 0, train_routers, path)
    }

    /// Runs blocks `start..L` and the final LayerNorm on a `[B·N × d]`
    /// hidden state. `lambdas` is filled only for modules at or after `start`.
    pub fn forward_from<'g>(
        &self,
        g: &'g Graph<T>,
        h: Var<'g, T>,
        start: usize,
        train_routers: bool,
        path: ExecPath,
    ) -> Result<MergedForward<'g, T>> {
        let cfg = &self.config;
        let seq = cfg.n_tokens();
        let eps = T::lit(cfg.ln_eps);
        let mut statics: HashMap<&str, Var<'g, T>> = HashMap::new();
        for (name, t) in self.statics.iter() {
            if layer_of(name).is_none_or(|l| l >= start) {
                statics.insert(name, g.constant(t.clone()));
            }
        }
        let s = |name: &str| -> Result<Var<'g, T>> {
            statics.get(name).copied().ok_or_else(|| Error::Structure {
                name: name.to_string(),
                reason: "missing from merged model".into(),
            })
        };
        let routers: Vec<RouterVars<'g, T>> = self.routers.iter().map(|r| r.bind(g, train_routers)).collect();
        let module_vars: Vec<ModuleVars<'g, T>> = self
            .modules
            .iter()
            .map(|m| {
                if m.layer < start {
                    return ModuleVars {
                        base: Vec::new(),
                        dense: Vec::new(),
                    };
                }
                ModuleVars {
                    base: m.base.iter().map(|t| g.constant(t.clone())).collect(),
                    dense: match &m.dictionary {
                        Dictionary::Dense(d) => d
                            .iter()
                            .map(|task| task.iter().map(|t| g.constant(t.clone())).collect())
                            .collect(),
                        Dictionary::Sparse(_) => Vec::new(),
                    },
                }
            })
            .collect();
        let mut lambdas: Vec<Vec<Var<'g, T>>> = vec![Vec::new(); self.modules.len()];
        let mut block_inputs = Vec::with_capacity(cfg.n_blocks.saturating_sub(start));
        let mut router_inputs = vec![None; self.modules.len()];
        let mut h = h;
        let static_ln = |l: usize, which: &str| -> Result<LnVars<'g, T>> {
            Ok(LnVars {
                gamma: s(&block_param(l, &format!("{which}.gamma")))?,
                beta: s(&block_param(l, &format!("{which}.beta")))?,
            })
        };

        for l in start..cfg.n_blocks {
            block_inputs.push(h);
            if let Some(mi) = self.module_for(l, MoeKind::Block) {
                let (out, lam) = self.apply_module(g, mi, &module_vars[mi], &routers, h, h, seq, |hs, w| {
                    let b = BlockVars {
                        ln1: w.ln("ln1"),
                        att: w.att(),
                        ln2: w.ln("ln2"),
                        mlp: w.mlp(),
                    };
                    crate::vit::block_forward(hs, &b, cfg)
                })?;
                lambdas[mi] = lam;
                router_inputs[mi] = Some(h);
                h = out;
                continue;
            }

            let ln1 = static_ln(l, "ln1")?;
            let x = h.layer_norm(ln1.gamma, ln1.beta, eps)?;
            let att_out = match self.module_for(l, MoeKind::Attention) {
                Some(mi) => {
                    let (out, lam) = self.apply_module(g, mi, &module_vars[mi], &routers, x, x, seq, |xs, w| {
                        self_attention(xs, &w.att(), seq, cfg.n_heads)
                    })?;
                    lambdas[mi] = lam;
                    router_inputs[mi] = Some(x);
                    out
                }
                None => {
                    let a = AttVars {
                        wq: s(&block_param(l, "att.wq"))?,
                        bq: s(&block_param(l, "att.bq"))?,
                        wk: s(&block_param(l, "att.wk"))?,
                        bk: s(&block_param(l, "att.bk"))?,
                        wv: s(&block_param(l, "att.wv"))?,
                        bv: s(&block_param(l, "att.bv"))?,
                        wo: s(&block_param(l, "att.wo"))?,
                        bo: s(&block_param(l, "att.bo"))?,
                    };
                    self_attention(x, &a, seq, cfg.n_heads)?
                }
            };
            h = h.add(att_out)?;

            let ln2 = static_ln(l, "ln2")?;
            let x = h.layer_norm(ln2.gamma, ln2.beta, eps)?;
            let mlp_out = match self.module_for(l, MoeKind::Mlp) {
                Some(mi) if path == ExecPath::Decomposed => {
                    let (out, lam) = self.decomposed_mlp(g, mi, &module_vars[mi], &routers, x, seq)?;
                    lambdas[mi] = lam;
                    router_inputs[mi] = Some(x);
                    out
                }
                Some(mi) => {
                    let (out, lam) =
                        self.apply_module(g, mi, &module_vars[mi], &routers, x, x, seq, |xs, w| mlp(xs, &w.mlp()))?;
                    lambdas[mi] = lam;
                    router_inputs[mi] = Some(x);
                    out
                }
                None => {
                    let m = MlpVars {
                        w0: s(&block_param(l, "mlp.w0"))?,
                        b0: s(&block_param(l, "mlp.b0"))?,
                        w1: s(&block_param(l, "mlp.w1"))?,
                        b1: s(&block_param(l, "mlp.b1"))?,
                    };
                    mlp(x, &m)?
                }
            };
            h = h.add(mlp_out)?;
        }
        let fl = LnVars {
            gamma: s("final_ln.gamma")?,
            beta: s("final_ln.beta")?,
        };
        let features = class_tokens(h, seq)?.layer_norm(fl.gamma, fl.beta, eps)?;
        Ok(MergedForward {
            features,
            lambdas,
            routers,
            block_inputs,
            router_inputs,
        })
    }

    /// Runs `f` once per sample with that sample's merged weights and stacks
    /// the outputs. `route_in` feeds the router, `x` feeds `f`.
    #[allow(clippy::too_many_arguments)]
    fn apply_module<'g>(
        &self,
        g: &'g Graph<T>,
        mi: usize,
        vars: &ModuleVars<'g, T>,
        routers: &[RouterVars<'g, T>],
        route_in: Var<'g, T>,
        x: Var<'g, T>,
        seq: usize,
        f: impl Fn(Var<'g, T>, &SampleWeights<'g, T>) -> Result<Var<'g, T>>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let module = &self.modules[mi];
        let lam = routers[module.router].lambdas(route_in, seq)?;
        let locals = module.kind.locals();
        let mut outs = Vec::with_capacity(lam.len());
        for (sample, &l) in lam.iter().enumerate() {
            let mut map = HashMap::new();
            for (k, &local) in locals.iter().enumerate() {
                let w = match &module.dictionary {
                    Dictionary::Dense(_) => {
                        let terms: Vec<Var<'g, T>> = vars.dense.iter().map(|task| task[k]).collect();
                        g.combine(vars.base[k], &terms, l)?
                    }
                    Dictionary::Sparse(d) => {
                        let terms: Vec<Arc<SparseTensor<T>>> = d.iter().map(|task| Arc::clone(&task[k])).collect();
                        g.sparse_combine(vars.base[k], &terms, l)?
                    }
                };
                map.insert(local, w);
            }
            let xs = x.slice_rows(sample * seq, seq)?;
            outs.push(f(xs, &SampleWeights { map })?);
        }
        Ok((g.concat_rows(&outs)?, lam))
    }

    /// MLP module evaluated as base activations plus `λ`-weighted per-task
    /// delta products, without forming merged weights.
    fn decomposed_mlp<'g>(
        &self,
        g: &'g Graph<T>,
        mi: usize,
        vars: &ModuleVars<'g, T>,
        routers: &[RouterVars<'g, T>],
        x: Var<'g, T>,
        seq: usize,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let module = &self.modules[mi];
        let lam = routers[module.router].lambdas(x, seq)?;
        let n = module.dictionary.n_tasks();
        // per-task bias deltas as dense constants
        let bias = |t: usize, k: usize| g.constant(module.dictionary.dense_term(t, k));
        let b0: Vec<_> = (0..n).map(|t| bias(t, 1)).collect();
        let b1: Vec<_> = (0..n).map(|t| bias(t, 3)).collect();
        let product = |a: Var<'g, T>, t: usize, k: usize| -> Result<Var<'g, T>> {
            match &module.dictionary {
                Dictionary::Dense(_) => a.matmul(vars.dense[t][k]),
                Dictionary::Sparse(d) => a.matmul_sparse(&d[t][k]),
            }
        };
        let mut outs = Vec::with_capacity(lam.len());
        for (sample, &l) in lam.iter().enumerate() {
            let xs = x.slice_rows(sample * seq, seq)?;
            let pre_base = xs.linear(vars.base[0], vars.base[1])?;
            let pre_terms = (0..n)
                .map(|t| product(xs, t, 0)?.add_broadcast(b0[t]))
                .collect::<Result<Vec<_>>>()?;
            let hidden = g.combine(pre_base, &pre_terms, l)?.gelu()?;
            let out_base = hidden.linear(vars.base[2], vars.base[3])?;
            let out_terms = (0..n)
                .map(|t| product(hidden, t, 2)?.add_broadcast(b1[t]))
                .collect::<Result<Vec<_>>>()?;
            outs.push(g.combine(out_base, &out_terms, l)?);
        }
        Ok((g.concat_rows(&outs)?, lam))
    }

    /// Per-sample merging weights of every module for a batch: `[module][sample][task]`.
    pub fn routing_weights(&self, images: &[&Image]) -> Result<Vec<Vec<Vec<T>>>> {
        let g = Graph::new();
        let out = self.forward(&g, images, false, ExecPath::Materialize)?;
        Ok(out
            .lambdas
            .iter()
            .map(|per| per.iter().map(|v| v.value().data().to_vec()).collect())
            .collect())
    }

    pub fn features_with(&self, images: &[&Image], path: ExecPath) -> Result<Tensor<T>> {
        let g = Graph::new();
        let out = self.forward(&g, images, false, path)?;
        Ok((*out.features.value()).clone())
    }

    /// Serializes into a checkpoint with a descriptive manifest.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.statics.iter() {
            ck.insert_dense(format!("static/{name}"), t.clone());
        }
        for (mi, m) in self.modules.iter().enumerate() {
            for (name, t) in m.names.iter().zip(&m.base) {
                ck.insert_dense(format!("moe/{mi:02}/base/{name}"), t.clone());
            }
            for t in 0..m.dictionary.n_tasks() {
                for (k, name) in m.names.iter().enumerate() {
                    let key = format!("moe/{mi:02}/task{t:02}/{name}");
                    match &m.dictionary {
                        Dictionary::Dense(d) => ck.insert_dense(key, d[t][k].clone()),
                        Dictionary::Sparse(d) => ck.insert_sparse(key, (*d[t][k]).clone()),
                    }
                }
            }
        }
        for (ri, r) in self.routers.iter().enumerate() {
            r.insert_into(&mut ck, &format!("router/{ri:02}"));
        }
        for h in &self.heads {
            ck.insert_dense(format!("head/{}/w", h.task_id), h.weight.clone());
            ck.insert_dense(format!("head/{}/b", h.task_id), h.bias.clone());
        }
        let mut mf = Manifest::new();
        write_vit_config(&mut mf, &self.config);
        let up = &self.upscale;
        mf.set("kind", "merged")
            .set("strategy", up.strategy)
            .set("rho", up.rho)
            .set("l_fc", up.l_fc)
            .set("shared_router", up.shared_router)
            .set("lambda_init", up.lambda)
            .set("router_init", up.router_init.as_str())
            .set(
                "grouping",
                match up.grouping {
                    PruneGrouping::Module => "module",
                    PruneGrouping::PerTensor => "tensor",
                },
            )
            .set("n_tasks", self.n_tasks())
            .set("n_modules", self.modules.len())
            .set("n_routers", self.routers.len())
            .set(
                "heads",
                self.heads.iter().map(|h| h.task_id.to_string()).collect::<Vec<_>>().join(","),
            );
        if let Some(h) = up.hidden {
            mf.set("router_hidden", h);
        }
        for (mi, m) in self.modules.iter().enumerate() {
            mf.set(format!("moe.{mi:02}"), format!("{}:{}:{}", m.layer, m.kind.as_str(), m.router));
        }
        ck.manifest = mf;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let mf = &ck.manifest;
        if mf.get("kind") != Some("merged") {
            return Err(CheckpointError::Manifest("not a merged-model checkpoint".into()).into());
        }
        let config = read_vit_config(mf)?;
        let parse = |k: &str| -> Result<String> { Ok(mf.require(k)?.to_string()) };
        let upscale = UpscaleConfig {
            strategy: parse("strategy")?.parse()?,
            lambda: mf.parse_value("lambda_init")?,
            l_fc: mf.parse_value("l_fc")?,
            shared_router: mf.parse_value("shared_router")?,
            rho: mf.parse_value("rho")?,
            router_init: parse("router_init")?.parse()?,
            hidden: match mf.get("router_hidden") {
                Some(_) => Some(mf.parse_value("router_hidden")?),
                None => None,
            },
            grouping: match mf.require("grouping")? {
                "tensor" => PruneGrouping::PerTensor,
                _ => PruneGrouping::Module,
            },
        };
        let n_tasks: usize = mf.parse_value("n_tasks")?;
        let n_modules: usize = mf.parse_value("n_modules")?;
        let n_routers: usize = mf.parse_value("n_routers")?;
        let mut statics = ParamTree::new();
        for (name, rec) in &ck.tensors {
            if let Some(local) = name.strip_prefix("static/") {
                statics.insert(local, rec.to_dense())?;
            }
        }
        let mut modules = Vec::with_capacity(n_modules);
        for mi in 0..n_modules {
            let desc = mf.require(&format!("moe.{mi:02}"))?;
            let parts: Vec<&str> = desc.split(':').collect();
            let bad = || CheckpointError::Manifest(format!("bad module descriptor `{desc}`"));
            if parts.len() != 3 {
                return Err(bad().into());
            }
            let layer: usize = parts[0].parse().map_err(|_| bad())?;
            let kind: MoeKind = parts[1].parse()?;
            let router: usize = parts[2].parse().map_err(|_| bad())?;
            let names: Vec<String> = kind.locals().iter().map(|n| block_param(layer, n)).collect();
            let base = names
                .iter()
                .map(|n| Ok(ck.dense(&format!("moe/{mi:02}/base/{n}"))?.clone()))
                .collect::<Result<Vec<_>>>()?;
            let first = format!("moe/{mi:02}/task00/{}", names[0]);
            let sparse = matches!(ck.tensors.get(&first), Some(Record::Sparse(_)));
            let record = |t: usize, n: &str| -> Result<&Record<T>> {
                let key = format!("moe/{mi:02}/task{t:02}/{n}");
                ck.tensors
                    .get(&key)
                    .ok_or_else(|| CheckpointError::Invalid {
                        tensor: key,
                        reason: "missing dictionary entry".into(),
                    }
                    .into())
            };
            let dictionary = if sparse {
                let mut d = Vec::new();
                for t in 0..n_tasks {
                    let mut row = Vec::new();
                    for n in &names {
                        match record(t, n)? {
                            Record::Sparse(s) => row.push(Arc::new(s.clone())),
                            Record::Dense(t) => row.push(Arc::new(SparseTensor::from_dense(t))),
                        }
                    }
                    d.push(row);
                }
                Dictionary::Sparse(d)
            } else {
                let mut d = Vec::new();
                for t in 0..n_tasks {
                    d.push(names.iter().map(|n| Ok(record(t, n)?.to_dense())).collect::<Result<Vec<_>>>()?);
                }
                Dictionary::Dense(d)
            };
            modules.push(MoeModule {
                layer,
                kind,
                names,
                base,
                dictionary,
                router,
            });
        }
        let routers = (0..n_routers)
            .map(|ri| RouterParams::from_checkpoint(ck, &format!("router/{ri:02}"), upscale.l_fc))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::new();
        let head_ids = mf.require("heads")?;
        for id in head_ids.split(',').filter(|s| !s.is_empty()) {
            let t: usize = id
                .parse()
                .map_err(|_| CheckpointError::Manifest(format!("bad head id `{id}`")))?;
            heads.push(TaskHead::new(
                t,
                ck.dense(&format!("head/{t}/w"))?.clone(),
                ck.dense(&format!("head/{t}/b"))?.clone(),
            )?);
        }
        Ok(MergedModel {
            config,
            upscale,
            statics,
            modules,
            routers,
            heads,
        })
    }
}

impl<T: Real> FeatureModel<T> for MergedModel<T> {
    fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn features(&self, images: &[&Image]) -> Result<Tensor<T>> {
        self.features_with(images, ExecPath::Materialize)
    }
}

pub fn write_vit_config(mf: &mut Manifest, cfg: &ViTConfig) {
    mf.set("vit.image_size", cfg.image_size)
        .set("vit.patch_size", cfg.patch_size)
        .set("vit.channels", cfg.channels)
        .set("vit.d_model", cfg.d_model)
        .set("vit.n_heads", cfg.n_heads)
        .set("vit.n_blocks", cfg.n_blocks)
        .set("vit.mlp_hidden", cfg.mlp_hidden)
        .set("vit.ln_eps", cfg.ln_eps);
}

pub fn read_vit_config(mf: &Manifest) -> Result<ViTConfig> {
    let cfg = ViTConfig {
        image_size: mf.parse_value("vit.image_size")?,
        patch_size: mf.parse_value("vit.patch_size")?,
        channels: mf.parse_value("vit.channels")?,
        d_model: mf.parse_value("vit.d_model")?,
        n_heads: mf.parse_value("vit.n_heads")?,
        n_blocks: mf.parse_value("vit.n_blocks")?,
        mlp_hidden: mf.parse_value("vit.mlp_hidden")?,
        ln_eps: mf.parse_value("vit.ln_eps")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Architecture description used by the parameter-count oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchPreset {
    pub name: &'static str,
    pub config: ViTConfig,
    pub patch_bias: bool,
    /// LayerNorm applied to the embeddings before the first block.
    pub pre_ln: bool,
    /// Output projection width after the final LayerNorm.
    pub projection: Option<usize>,
    /// Parameters outside the image encoder that the model still carries.
    pub auxiliary: usize,
}

impl ArchPreset {
    /// The CLIP ViT-B/32 image tower plus the text-side embedding tables
    /// (token and positional embeddings, final LayerNorm, projection).
    pub fn vitb32() -> Self {
        let text = 49_408 * 512 + 77 * 512 + 2 * 512 + 512 * 512;
        ArchPreset {
            name: "vitb32-dims",
            config: ViTConfig::vitb32_dims(),
            patch_bias: false,
            pre_ln: true,
            projection: Some(512),
            auxiliary: text,
        }
    }

    /// The CLIP ViT-B/16 variant (196 patches).
    pub fn vitb16() -> Self {
        let mut p = Self::vitb32();
        p.name = "vitb16-dims";
        p.config.patch_size = 16;
        p
    }

    /// The workspace's own encoder layout for a given config.
    pub fn desk(config: ViTConfig) -> Self {
        ArchPreset {
            name: "desk",
            config,
            patch_bias: true,
            pre_ln: false,
            projection: None,
            auxiliary: 0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vitb32-dims" | "vitb32" => Ok(Self::vitb32()),
            "vitb16-dims" | "vitb16" => Ok(Self::vitb16()),
            "desk" => Ok(Self::desk(ViTConfig::desk())),
            _ => Err(Error::Config(format!("unknown architecture preset `{name}`"))),
        }
    }

    pub fn mlp_params(&self) -> usize {
        let (d, m) = (self.config.d_model, self.config.mlp_hidden);
        2 * d * m + m + d
    }

    pub fn attention_params(&self) -> usize {
        let d = self.config.d_model;
        4 * (d * d + d)
    }

    pub fn block_params(&self) -> usize {
        self.attention_params() + self.mlp_params() + 4 * self.config.d_model
    }

    pub fn base_params(&self) -> usize {
        let c = &self.config;
        let d = c.d_model;
        let mut n = c.patch_dim() * d + d + c.n_tokens() * d;
        if self.patch_bias {
            n += d;
        }
        if self.pre_ln {
            n += 2 * d;
        }
        n += c.n_blocks * self.block_params() + 2 * d;
        if let Some(p) = self.projection {
            n += d * p;
        }
        n + self.auxiliary
    }

    fn module_params(&self, kind: MoeKind) -> usize {
        match kind {
            MoeKind::Mlp => self.mlp_params(),
            MoeKind::Attention => self.attention_params(),
            MoeKind::Block => self.block_params(),
        }
    }
}

/// Input to [`count_parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDescription {
    pub preset: ArchPreset,
    pub n_tasks: usize,
    pub l_fc: usize,
    pub rho: f64,
    pub shared_router: bool,
    pub strategy: UpscaleStrategy,
    pub router_hidden: Option<usize>,
    /// Count one slot per stored sparse index as well.
    pub include_indices: bool,
}

impl ModelDescription {
    pub fn wemoe(preset: ArchPreset, n_tasks: usize, l_fc: usize) -> Self {
        ModelDescription {
            preset,
            n_tasks,
            l_fc,
            rho: 0.0,
            shared_router: false,
            strategy: UpscaleStrategy::MlpOnly,
            router_hidden: None,
            include_indices: false,
        }
    }

    pub fn ewemoe(preset: ArchPreset, n_tasks: usize, l_fc: usize, rho: f64) -> Self {
        ModelDescription {
            rho,
            shared_router: true,
            ..Self::wemoe(preset, n_tasks, l_fc)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn router_params(d: usize, hidden: usize, n: usize, l_fc: usize) -> usize {
    match l_fc {
        0 => n,
        1 => d * n + n,
        _ => d * hidden + hidden + hidden * n + n,
    }
}

/// Trainable (router) and total stored values of an up-scaled model.
pub fn count_parameters(desc: &ModelDescription) -> Result<ParamCount> {
    if desc.l_fc > 2 {
        return Err(Error::Config(format!("l_fc must be 0, 1 or 2, got {}", desc.l_fc)));
    }
    if !(0.0..1.0).contains(&desc.rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1), got {}", desc.rho)));
    }
    let p = &desc.preset;
    let c = &p.config;
    let kinds: &[MoeKind] = match desc.strategy {
        UpscaleStrategy::MlpOnly => &[MoeKind::Mlp],
        UpscaleStrategy::AttAndMlpSeparately => &[MoeKind::Attention, MoeKind::Mlp],
        UpscaleStrategy::EntireBlock => &[MoeKind::Block],
    };
    let mut dictionary = 0;
    for &kind in kinds {
        let size = p.module_params(kind);
        let kept = if desc.rho > 0.0 {
            crate::taskvec::kept_count(size, desc.rho)
        } else {
            size
        };
        let per_task = if desc.include_indices && desc.rho > 0.0 { 2 * kept } else { kept };
        dictionary += desc.n_tasks * c.n_blocks * per_task;
    }
    let n_modules = kinds.len() * c.n_blocks;
    let routers = if desc.shared_router { 1 } else { n_modules };
    let hidden = desc.router_hidden.unwrap_or(c.d_model);
    let trainable = routers * router_params(c.d_model, hidden, desc.n_tasks, desc.l_fc);
    let total = p.base_params() + dictionary + trainable;
    Ok(ParamCount {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    })
}

/// Names of every encoder tensor a module of `kind` in block `layer` covers.
pub fn covered_names(kind: MoeKind, layer: usize) -> Vec<String> {
    kind.locals().iter().map(|n| block_param(layer, n)).collect()
}

/// Whether `name` belongs to the block-local set of `kind`.
pub fn is_covered(kind: MoeKind, name: &str) -> bool {
    layer_of(name).is_some() && kind.locals().contains(&local_name(name))
}

/// Routers as a name → tensor map (used for hashing and inspection).
pub fn router_tree<T: Real>(routers: &[RouterParams<T>]) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    for (ri, r) in routers.iter().enumerate() {
        for (name, t) in r.tensors() {
            out.insert(format!("router.{ri:02}.{name}"), t.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskvec::compute_task_vector;
    use crate::vit::{init_params, Vit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(vals: &[f64]) -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("embed.cls", Tensor::vector(vals.to_vec())).unwrap();
        t
    }

    #[test]
    fn weight_average_cases() {
        let a = tree(&[1.0, -2.0]);
        assert_eq!(merge_weight_average(&[&a]).unwrap(), a);
        let neg = a.scale(-1.0);
        assert_eq!(merge_weight_average(&[&a, &neg]).unwrap().sq_norm(), 0.0);
        assert!(merge_weight_average::<f64>(&[]).is_err());
    }

    #[test]
    fn task_arithmetic_cases() {
        let zero = tree(&[0.0]);
        let t1 = TaskVector { task_id: 0, tree: tree(&[1.0]) };
        let t2 = TaskVector { task_id: 1, tree: tree(&[3.0]) };
        let m = merge_task_arithmetic(&zero, &[&t1, &t2], 0.3, &ModuleFilter::All).unwrap();
        assert!((m.get("embed.cls").unwrap().data()[0] - 1.2).abs() < 1e-15);
        let m = merge_task_arithmetic(&zero, &[&t1], 0.0, &ModuleFilter::All).unwrap();
        assert_eq!(m, zero);
        let only_mlp = ModuleFilter::Tags(vec![ModuleTag::Mlp]);
        assert_eq!(merge_task_arithmetic(&zero, &[&t1], 1.0, &only_mlp).unwrap(), zero);
        assert!(merge_task_arithmetic(&zero, &[&t1], -0.1, &ModuleFilter::All).is_err());
    }

    #[test]
    fn router_inits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor::<f64>::randn(&[5, 6], 3.0, &mut rng);
        let r0 = init_router::<f64, _>(4, 6, 6, 0, 0.3, RouterInit::Paper, &mut rng).unwrap();
        for row in 0..5 {
            assert_eq!(r0.forward(&h).unwrap().row(row), &[0.3; 4]);
        }
        let r2 = init_router::<f64, _>(4, 6, 6, 2, 0.3, RouterInit::ZeroWeights, &mut rng).unwrap();
        assert!(r2.forward(&h).unwrap().data().iter().all(|&v| v == 0.3));
        let a = init_router::<f32, _>(3, 6, 6, 2, 0.3, RouterInit::Paper, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_router::<f32, _>(3, 6, 6, 2, 0.3, RouterInit::Paper, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.b0, Tensor::zeros(&[6]));
        let r1 = init_router::<f64, _>(3, 6, 6, 1, 0.3, RouterInit::Paper, &mut rng).unwrap();
        assert_eq!(r1.b0.data(), &[0.3; 3]);
        assert!(init_router::<f64, _>(3, 6, 6, 3, 0.3, RouterInit::Paper, &mut rng).is_err());
    }

    #[test]
    fn router_forward_matches_two_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = init_router::<f64, _>(3, 4, 5, 2, 0.3, RouterInit::Paper, &mut rng).unwrap();
        let h = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let got = r.forward(&h).unwrap();
        let (w0, w1) = (r.w0.as_ref().unwrap(), r.w1.as_ref().unwrap());
        for s in 0..2 {
            let hid: Vec<f64> = (0..5)
                .map(|j| ((0..4).map(|i| h.row(s)[i] * w0.data()[i * 5 + j]).sum::<f64>() + r.b0.data()[j]).max(0.0))
                .collect();
            for t in 0..3 {
                let want = (0..5).map(|j| hid[j] * w1.data()[j * 3 + t]).sum::<f64>() + 0.3;
                assert!((got.row(s)[t] - want).abs() < 1e-6);
            }
        }
        let mut zeroed = r.clone();
        zeroed.w1 = Some(Tensor::zeros(&[5, 3]));
        assert!(zeroed.forward(&h).unwrap().data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn l_fc0_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = init_router::<f64, _>(3, 4, 4, 0, 0.3, RouterInit::Paper, &mut rng).unwrap();
        let h = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        assert_eq!(r.forward(&h).unwrap(), r.forward(&h.scale(7.5)).unwrap());
    }

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

    #[test]
    fn desk_preset_counts_the_real_tree() {
        let cfg = tiny();
        let t = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ArchPreset::desk(cfg).base_params(), t.num_elements());
    }

    #[test]
    fn single_expert_reconstructs_fine_tuned_model() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t0 = init_params::<f64, _>(&cfg, &mut rng).unwrap();
        let t1 = init_params::<f64, _>(&cfg, &mut rng).unwrap();
        let tv = compute_task_vector(&t1, &t0, 0).unwrap();
        for strategy in [UpscaleStrategy::MlpOnly, UpscaleStrategy::AttAndMlpSeparately, UpscaleStrategy::EntireBlock] {
            let up = UpscaleConfig {
                strategy,
                lambda: 1.0,
                router_init: RouterInit::ZeroWeights,
                ..UpscaleConfig::default()
            };
            let m = upscale_to_wemoe(&cfg, &t0, &[&tv], vec![], &up, &mut rng).unwrap();
            let img = Image::new(8, 1, (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
            let want = Vit::new(cfg.clone(), t1.clone()).unwrap().features(&[&img]).unwrap();
            let got = m.features(&[&img]).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-9, "{strategy}");
            let expected_modules = match strategy {
                UpscaleStrategy::AttAndMlpSeparately => 4,
                _ => 2,
            };
            assert_eq!(m.modules.len(), expected_modules);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = init_params::<f32, _>(&cfg, &mut rng).unwrap();
        let tvs: Vec<TaskVector<f32>> = (0..2)
            .map(|i| compute_task_vector(&init_params(&cfg, &mut rng).unwrap(), &t0, i).unwrap())
            .collect();
        let refs: Vec<&TaskVector<f32>> = tvs.iter().collect();
        let heads = vec![TaskHead::random(0, 8, 3, &mut rng), TaskHead::random(1, 8, 2, &mut rng)];
        for up in [UpscaleConfig::wemoe(), UpscaleConfig::ewemoe(0.9)] {
            let m = upscale_to_wemoe(&cfg, &t0, &refs, heads.clone(), &up, &mut rng).unwrap();
            let ck = m.to_checkpoint();
            let bytes = ck.encode().unwrap();
            let back = MergedModel::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }
}
