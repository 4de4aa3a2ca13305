//! Test-time adaptation: Adam on router parameters, minimizing the summed
//! prediction entropy of every task head on unlabeled batches.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{entropy_value, Graph};
use crate::error::{Error, Result};
use crate::merging::{ExecPath, MergedModel, RouterParams};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::vit::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig {
    pub steps: usize,
    pub lr: f64,
    /// Images drawn per task per step.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            steps: 200,
            lr: 1e-3,
            batch: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam moments need beta in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Mean over rows of `−Σ_c p log p`, with `log` clamped at `1e-12`.
pub fn entropy_loss<T: Real>(probs: &Tensor<T>) -> Result<T> {
    entropy_value(probs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TtaConfig::default().adam()
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(state.t as i32));
    let c2 = T::one() - T::lit(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Entropy of each task on one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub per_task: Vec<f64>,
    pub total: f64,
}

pub struct TtaOutcome<T: Real> {
    pub model: MergedModel<T>,
    pub trace: Vec<TraceRow>,
}

/// Summed per-task entropy of the merged model on `batches[t]` (scored with
/// head `t`), and router gradients if `with_grad`.
pub fn multitask_entropy<T: Real>(
    model: &MergedModel<T>,
    batches: &[Vec<&Image>],
    with_grad: bool,
) -> Result<(Vec<T>, Option<Vec<RouterParams<T>>>)> {
    if batches.len() > model.heads.len() {
        return Err(Error::contract(format!(
            "{} task batches but only {} heads",
            batches.len(),
            model.heads.len()
        )));
    }
    let all: Vec<&Image> = batches.iter().flatten().copied().collect();
    if all.is_empty() || batches.iter().any(Vec::is_empty) {
        return Err(Error::Empty("every task needs at least one test image".into()));
    }
    let g = Graph::new();
    let out = model.forward(&g, &all, with_grad, ExecPath::Materialize)?;
    let mut offset = 0;
    let mut losses = Vec::with_capacity(batches.len());
    let mut total = None;
    for (t, b) in batches.iter().enumerate() {
        let feats = out.features.slice_rows(offset, b.len())?;
        offset += b.len();
        let probs = model.heads[t].logits_var(&g, feats)?.softmax()?;
        let loss = g.entropy(probs)?;
        losses.push(loss.value().item()?);
        total = Some(match total {
            None => loss,
            Some(acc) => loss.add(acc)?,
        });
    }
    let grads = if with_grad {
        let grads = g.backward(total.expect("at least one task"))?;
        Some(out.routers.iter().map(|r| r.grads(&grads)).collect())
    } else {
        None
    };
    Ok((losses, grads))
}

/// Adapts the routers of `model` on unlabeled `data[t]` for each task `t`.
pub fn tta_train<T: Real>(model: &MergedModel<T>, data: &[Vec<Image>], cfg: &TtaConfig) -> Result<TtaOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("test-time adaptation needs at least one task".into()));
    }
    if let Some(t) = data.iter().position(Vec::is_empty) {
        return Err(Error::Empty(format!("unlabeled test set of task {t} is empty")));
    }
    let mut model = model.clone();
    let shapes: Vec<Vec<usize>> = model
        .routers
        .iter()
        .flat_map(|r| r.tensors().into_iter().map(|(_, t)| t.shape().to_vec()))
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut state = AdamState::new(&shape_refs);
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batches: Vec<Vec<&Image>> = data
            .iter()
            .map(|set| {
                let k = cfg.batch.min(set.len());
                sample(&mut rng, set.len(), k).into_iter().map(|i| &set[i]).collect()
            })
            .collect();
        let (losses, grads) = multitask_entropy(&model, &batches, true)?;
        let grads: Vec<Tensor<T>> = grads
            .expect("gradients requested")
            .into_iter()
            .flat_map(|r| r.tensors().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
            .collect();
        let mut params: Vec<&mut Tensor<T>> = model.routers.iter_mut().flat_map(|r| r.tensors_mut()).collect();
        adam_step(&mut params, &grads, &mut state, &adam)?;
        for p in &params {
            p.check_finite("adam_step")?;
        }
        let per_task: Vec<f64> = losses.iter().map(|l| l.as_f64()).collect();
        let total = per_task.iter().sum();
        trace.push(TraceRow { step, per_task, total });
    }
    Ok(TtaOutcome { model, trace })
}

/// `step,entropy_task0,...,total` CSV.
pub fn write_trace_csv(trace: &[TraceRow], mut w: impl Write) -> std::io::Result<()> {
    let n = trace.first().map_or(0, |r| r.per_task.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|t| format!("entropy_task{t}")));
    header.push("total".into());
    writeln!(w, "{}", header.join(","))?;
    for row in trace {
        let mut cells = vec![row.step.to_string()];
        cells.extend(row.per_task.iter().map(|v| format!("{v:.8}")));
        cells.push(format!("{:.8}", row.total));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let onehot = Tensor::from_rows(&[&[1.0f64, 0.0], &[0.0, 1.0]]);
        assert_eq!(entropy_loss(&onehot).unwrap(), 0.0);
        let uniform = Tensor::from_rows(&[&[0.5f64, 0.5]]);
        assert!((entropy_loss(&uniform).unwrap() - 0.69315).abs() < 1e-5);
        let skewed = Tensor::from_rows(&[&[0.9f64, 0.1]]);
        let want = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy_loss(&skewed).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.32508).abs() < 1e-5);
        assert!(entropy_loss(&Tensor::from_rows(&[&[0.7f64, 0.7]])).is_err());
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0]);
        let mut st = AdamState::new(&[&[2]]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        // existing moments decay under a zero gradient
        st.m[0] = Tensor::vector(vec![1.0, 1.0]);
        st.v[0] = Tensor::vector(vec![1.0, 1.0]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(st.m[0].data(), &[0.9, 0.9]);
        assert_eq!(st.v[0].data(), &[0.999, 0.999]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::vector(vec![0.0f64, 0.0, 0.0]);
        let mut st = AdamState::new(&[&[3]]);
        let g = Tensor::vector(vec![2.0, -0.5, 1e-3]);
        adam_step(&mut [&mut p], &[g], &mut st, &AdamConfig::default()).unwrap();
        for (v, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn three_steps_match_scalar_recurrence() {
        let gs = [0.3f64, -1.2, 0.05];
        let cfg = AdamConfig::default();
        let mut p = Tensor::vector(vec![0.7f64]);
        let mut st = AdamState::new(&[&[1]]);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam_step(&mut [&mut p], &[Tensor::vector(vec![g])], &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            x -= 1e-3 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p.data()[0] - x).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0f64; 2]);
        let mut st = AdamState::new(&[&[2]]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).is_err());
    }
}
