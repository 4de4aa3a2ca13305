//! Supervised training of encoders and heads, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wemoe_core::autodiff::Graph;
use wemoe_core::tta::{adam_step, AdamConfig, AdamState};
use wemoe_core::vit::{encode_vars, init_params, patchify, EncoderVars, FeatureModel, Image, TaskHead, ViTConfig};
use wemoe_core::{ParamTree, Real, Tensor};

use crate::data::{Sample, TaskDataset};
use crate::error::{BenchError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Head-only epochs on frozen features before joint training.
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Whether fine-tuning also updates the head; if not, the head stays
    /// where the probe left it.
    pub tune_head: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            lr,
            batch,
            seed,
            probe_epochs: 0,
            probe_lr: 1e-2,
            tune_head: true,
        }
    }

    pub fn with_probe(self, probe_epochs: usize, probe_lr: f64) -> Self {
        TrainConfig {
            probe_epochs,
            probe_lr,
            ..self
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.probe_lr > 0.0) {
            return Err(BenchError::Spec(format!(
                "batch {} / lr {} / probe lr {} invalid",
                self.batch, self.lr, self.probe_lr
            )));
        }
        Ok(())
    }
}

/// A fine-tuned encoder with the head it was trained with (now frozen).
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T: Real> {
    pub params: ParamTree<T>,
    pub head: TaskHead<T>,
    /// Accuracy on the training split after the last epoch.
    pub train_accuracy: f64,
}

/// Trains `params`, and `head` unless it is frozen, with Adam on cross-entropy. Returns the
/// mean loss of every step.
pub fn train_supervised<T: Real>(
    cfg: &ViTConfig,
    params: &mut ParamTree<T>,
    head: &mut TaskHead<T>,
    samples: &[Sample],
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    if tc.epochs == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(BenchError::Spec("training set is empty".into()));
    }
    tc.check()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut shapes: Vec<Vec<usize>> = names.iter().map(|n| params.get(n).map(|t| t.shape().to_vec())).collect::<std::result::Result<_, _>>()?;
    let tune_head = !head.frozen;
    if tune_head {
        shapes.push(head.weight.shape().to_vec());
        shapes.push(head.bias.shape().to_vec());
    }
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut state = AdamState::new(&refs);
    let adam = tc.adam(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &samples[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let g = Graph::new();
            let enc = EncoderVars::bind(&g, cfg, params, &|_| true)?;
            let x = g.constant(patchify(cfg, &images)?);
            let feats = encode_vars(x, &enc, cfg, images.len())?;
            let leaf = |t: &Tensor<T>| if tune_head { g.param(t.clone()) } else { g.constant(t.clone()) };
            let (hw, hb) = (leaf(&head.weight), leaf(&head.bias));
            let loss = g.cross_entropy(feats.linear(hw, hb)?, &labels)?;
            losses.push(loss.value().item()?.as_f64());
            let grads = g.backward(loss)?;
            let named = enc.named();
            let mut grad_list: Vec<Tensor<T>> = Vec::with_capacity(names.len() + 2);
            for n in &names {
                let (_, v) = named
                    .iter()
                    .find(|(m, _)| m == n)
                    .ok_or_else(|| BenchError::Spec(format!("tensor {n} is not part of the encoder")))?;
                grad_list.push(grads.wrt(*v));
            }
            let mut targets: Vec<&mut Tensor<T>> = params.iter_mut().map(|(_, t)| t).collect();
            if tune_head {
                grad_list.push(grads.wrt(hw));
                grad_list.push(grads.wrt(hb));
                targets.push(&mut head.weight);
                targets.push(&mut head.bias);
            }
            adam_step(&mut targets, &grad_list, &mut state, &adam)?;
        }
    }
    Ok(losses)
}

/// Trains `head` alone on features of the frozen encoder `params`.
pub fn linear_probe<T: Real>(
    cfg: &ViTConfig,
    params: &ParamTree<T>,
    head: &mut TaskHead<T>,
    samples: &[Sample],
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    if tc.probe_epochs == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(BenchError::Spec("training set is empty".into()));
    }
    tc.check()?;
    let model = wemoe_core::Vit::new(cfg.clone(), params.clone())?;
    let mut feats = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let f = model.features(&images)?;
        feats.extend((0..chunk.len()).map(|r| f.row(r).to_vec()));
    }
    let mut state = AdamState::new(&[head.weight.shape(), head.bias.shape()]);
    let adam = tc.adam(tc.probe_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0070_726f_6265);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..tc.probe_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            let rows: Vec<&[T]> = chunk.iter().map(|&i| feats[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let g = Graph::new();
            let x = g.constant(Tensor::from_rows(&rows));
            let (hw, hb) = (g.param(head.weight.clone()), g.param(head.bias.clone()));
            let loss = g.cross_entropy(x.linear(hw, hb)?, &labels)?;
            losses.push(loss.value().item()?.as_f64());
            let grads = g.backward(loss)?;
            let gl = [grads.wrt(hw), grads.wrt(hb)];
            adam_step(&mut [&mut head.weight, &mut head.bias], &gl, &mut state, &adam)?;
        }
    }
    Ok(losses)
}

/// Jointly trains a fresh encoder and a throw-away head on `data`.
pub fn pretrain<T: Real>(cfg: &ViTConfig, data: &TaskDataset, tc: &TrainConfig) -> Result<ParamTree<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = init_params::<T, _>(cfg, &mut rng)?;
    let mut head = TaskHead::random(0, cfg.d_model, data.classes(), &mut rng);
    head.frozen = false;
    train_supervised(cfg, &mut params, &mut head, data.train(), tc)?;
    Ok(params)
}

/// Fine-tunes a copy of `theta_0` with a new head for `task_id`: an optional
/// linear probe on `theta_0` features, then joint training. With zero epochs
/// this returns `theta_0` and the untrained head.
pub fn finetune<T: Real>(
    cfg: &ViTConfig,
    theta_0: &ParamTree<T>,
    data: &TaskDataset,
    task_id: usize,
    tc: &TrainConfig,
) -> Result<Expert<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0000_0000_0000);
    let mut params = theta_0.clone();
    let mut head = TaskHead::random(task_id, cfg.d_model, data.classes(), &mut rng);
    head.frozen = false;
    if tc.epochs > 0 {
        linear_probe(cfg, &params, &mut head, data.train(), tc)?;
    }
    head.frozen = !tc.tune_head;
    train_supervised(cfg, &mut params, &mut head, data.train(), tc)?;
    head.frozen = true;
    let model = wemoe_core::Vit::new(cfg.clone(), params)?;
    let train_accuracy = evaluate_accuracy(&model, data.train(), &head)?;
    Ok(Expert {
        params: model.params,
        head,
        train_accuracy,
    })
}

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy<T: Real>(model: &dyn FeatureModel<T>, samples: &[Sample], head: &TaskHead<T>) -> Result<f64> {
    Ok(count_correct(model, samples, head, EVAL_BATCH)? as f64 / samples.len().max(1) as f64)
}

pub fn count_correct<T: Real>(
    model: &dyn FeatureModel<T>,
    samples: &[Sample],
    head: &TaskHead<T>,
    batch: usize,
) -> Result<usize> {
    let mut correct = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let logits = logits_of(model, chunk, head)?;
        for (row, s) in (0..chunk.len()).zip(chunk) {
            if argmax(logits.row(row)) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Mean cross-entropy of `head` on top of `model` over `samples`.
pub fn dataset_loss<T: Real>(model: &dyn FeatureModel<T>, samples: &[Sample], head: &TaskHead<T>) -> Result<f64> {
    if samples.is_empty() {
        return Err(BenchError::Spec("loss of an empty sample set".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = logits_of(model, chunk, head)?;
        for (row, s) in (0..chunk.len()).zip(chunk) {
            let r: Vec<f64> = logits.row(row).iter().map(|v| v.as_f64()).collect();
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - r[s.label];
        }
    }
    Ok(total / samples.len() as f64)
}

fn logits_of<T: Real>(model: &dyn FeatureModel<T>, chunk: &[Sample], head: &TaskHead<T>) -> Result<Tensor<T>> {
    let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
    Ok(head.logits(&model.features(&images)?)?)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
