//! Diagnostics emitted as tables: parameter drift, task-vector magnitudes,
//! routing weights, first-choice shares and two-task loss landscapes.

use std::io::Write;

use wemoe_core::merging::MergedModel;
use wemoe_core::params::layer_of;
use wemoe_core::taskvec::{l2_module_distance, module_magnitudes, quantile_sorted, TaskVector};
use wemoe_core::vit::{Image, TaskHead, ViTConfig, Vit};
use wemoe_core::{ModuleTag, ParamTree, Real};

use crate::data::Sample;
use crate::error::{BenchError, Result};
use crate::train::dataset_loss;

/// Block modules reported by [`drift_report`].
pub const DRIFT_MODULES: [ModuleTag; 3] = [ModuleTag::Attention, ModuleTag::Mlp, ModuleTag::LayerNorm];

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub layer: usize,
    pub module: ModuleTag,
    pub mean_sq_l2: f64,
}

/// Number of transformer blocks present in `tree`.
pub fn n_blocks<T: Real>(tree: &ParamTree<T>) -> usize {
    tree.names().filter_map(layer_of).max().map_or(0, |l| l + 1)
}

/// Mean over experts of the squared L2 distance to `theta_0`, per block and module.
pub fn drift_report<T: Real>(theta_0: &ParamTree<T>, experts: &[&ParamTree<T>]) -> Result<Vec<DriftRow>> {
    if experts.is_empty() {
        return Err(BenchError::Protocol("drift needs at least one expert".into()));
    }
    let mut rows = Vec::new();
    for layer in 0..n_blocks(theta_0) {
        for module in DRIFT_MODULES {
            let mut sum = 0.0;
            for e in experts {
                sum += l2_module_distance(e, theta_0, module, layer)?.as_f64();
            }
            rows.push(DriftRow {
                layer,
                module,
                mean_sq_l2: sum / experts.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// `(layers where MLP drift > attention drift, layers)`.
pub fn mlp_dominance(rows: &[DriftRow]) -> (usize, usize) {
    let layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let get = |l: usize, m: ModuleTag| rows.iter().find(|r| r.layer == l && r.module == m).map(|r| r.mean_sq_l2);
    let wins = (0..layers)
        .filter(|&l| matches!((get(l, ModuleTag::Mlp), get(l, ModuleTag::Attention)), (Some(m), Some(a)) if m > a))
        .count();
    (wins, layers)
}

pub fn write_drift_csv(rows: &[DriftRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "module", "mean_sq_l2"])?;
    for r in rows {
        out.write_record([r.layer.to_string(), r.module.as_str().to_string(), fmt_f64(r.mean_sq_l2)])?;
    }
    out.flush()?;
    Ok(())
}

/// Five-number summary plus the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary::of_sorted(&sorted)
    }

    pub fn of_sorted(sorted: &[f64]) -> Result<Summary> {
        let q = |p: f64| -> Result<f64> { Ok(quantile_sorted(sorted, p)?) };
        Ok(Summary {
            mean: sorted.iter().sum::<f64>() / sorted.len().max(1) as f64,
            min: q(0.0)?,
            q25: q(0.25)?,
            median: q(0.5)?,
            q75: q(0.75)?,
            max: q(1.0)?,
        })
    }

    fn cells(&self) -> [String; 6] {
        [self.mean, self.min, self.q25, self.median, self.q75, self.max].map(fmt_f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeRow {
    pub task: usize,
    pub layer: usize,
    pub summary: Summary,
}

/// Quantiles of `|τ|` over each block's MLP tensors, per task vector.
pub fn magnitude_table<T: Real>(task_vectors: &[&TaskVector<T>]) -> Result<Vec<MagnitudeRow>> {
    let mut rows = Vec::new();
    for tv in task_vectors {
        for layer in 0..n_blocks(&tv.tree) {
            let mags = module_magnitudes(tv, ModuleTag::Mlp, layer);
            rows.push(MagnitudeRow {
                task: tv.task_id,
                layer,
                summary: Summary::of_sorted(&mags)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_magnitude_csv(rows: &[MagnitudeRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "layer", "mean", "min", "q25", "median", "q75", "max"])?;
    for r in rows {
        let mut rec = vec![r.task.to_string(), r.layer.to_string()];
        rec.extend(r.summary.cells());
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Images per routing pass.
const ROUTE_BATCH: usize = 64;

/// Merging weights of every module for each source set: `[source][module][sample][task]`.
pub fn collect_lambdas<T: Real>(model: &MergedModel<T>, sources: &[Vec<Image>]) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    if model.routers.is_empty() {
        return Err(BenchError::Protocol("model has no routers".into()));
    }
    let mut out = Vec::with_capacity(sources.len());
    for images in sources {
        let mut per_module = vec![Vec::with_capacity(images.len()); model.modules.len()];
        let refs: Vec<&Image> = images.iter().collect();
        for chunk in refs.chunks(ROUTE_BATCH) {
            for (m, per_sample) in model.routing_weights(chunk)?.into_iter().enumerate() {
                per_module[m].extend(per_sample.into_iter().map(|l| l.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
            }
        }
        out.push(per_module);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingSummary {
    pub layer: usize,
    pub module: &'static str,
    pub source: usize,
    /// Index of the λ component (the candidate task vector).
    pub component: usize,
    pub summary: Summary,
}

/// Distribution of each λ component over the samples of each source set,
/// for the modules in the requested blocks.
pub fn routing_distribution<T: Real>(model: &MergedModel<T>, sources: &[Vec<Image>], layers: &[usize]) -> Result<Vec<RoutingSummary>> {
    let n_blocks = model.config.n_blocks;
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_blocks) {
        return Err(BenchError::Protocol(format!("layer {bad} out of range for {n_blocks} blocks")));
    }
    let lambdas = collect_lambdas(model, sources)?;
    let mut rows = Vec::new();
    for &layer in layers {
        for (m, module) in model.modules_in_layer(layer) {
            for (source, per_module) in lambdas.iter().enumerate() {
                let samples = &per_module[m];
                for component in 0..model.n_tasks() {
                    let values: Vec<f64> = samples.iter().map(|l| l[component]).collect();
                    rows.push(RoutingSummary {
                        layer,
                        module: module.kind.as_str(),
                        source,
                        component,
                        summary: Summary::of(&values)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_routing_csv(rows: &[RoutingSummary], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "module", "task", "component", "mean", "min", "q25", "median", "q75", "max"])?;
    for r in rows {
        let mut rec = vec![r.layer.to_string(), r.module.to_string(), r.source.to_string(), r.component.to_string()];
        rec.extend(r.summary.cells());
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Shares of samples whose largest merging weight picks each candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstChoiceMatrix {
    /// `shares[source][module][candidate]`.
    pub shares: Vec<Vec<Vec<f64>>>,
    /// Samples whose maximum was attained by more than one candidate.
    pub ties: Vec<Vec<usize>>,
    pub samples: Vec<usize>,
    /// Block index of each module.
    pub layers: Vec<usize>,
}

/// Argmax of raw weights, lowest index on ties, and whether a tie occurred.
pub fn first_choice(lambda: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &v) in lambda.iter().enumerate().skip(1) {
        if v > lambda[best] {
            best = i;
            tie = false;
        } else if v == lambda[best] {
            tie = true;
        }
    }
    (best, tie)
}

pub fn first_choice_matrix<T: Real>(model: &MergedModel<T>, sources: &[Vec<Image>]) -> Result<FirstChoiceMatrix> {
    Ok(first_choice_from_lambdas(
        &collect_lambdas(model, sources)?,
        model.n_tasks(),
        model.modules.iter().map(|m| m.layer).collect(),
    ))
}

/// Aggregates `[source][module][sample][task]` weights.
pub fn first_choice_from_lambdas(lambdas: &[Vec<Vec<Vec<f64>>>], n: usize, layers: Vec<usize>) -> FirstChoiceMatrix {
    let mut shares = Vec::with_capacity(lambdas.len());
    let mut ties = Vec::with_capacity(lambdas.len());
    let mut samples = Vec::with_capacity(lambdas.len());
    for per_module in lambdas {
        let count = per_module.first().map_or(0, Vec::len);
        let mut s = Vec::with_capacity(per_module.len());
        let mut t = Vec::with_capacity(per_module.len());
        for per_sample in per_module {
            let mut counts = vec![0usize; n];
            let mut tied = 0;
            for l in per_sample {
                let (k, tie) = first_choice(l);
                counts[k] += 1;
                tied += tie as usize;
            }
            s.push(counts.iter().map(|&c| c as f64 / count.max(1) as f64).collect());
            t.push(tied);
        }
        shares.push(s);
        ties.push(t);
        samples.push(count);
    }
    FirstChoiceMatrix {
        shares,
        ties,
        samples,
        layers,
    }
}

impl FirstChoiceMatrix {
    /// `[source][module]` share of samples routed to their own task.
    pub fn diagonal(&self) -> Vec<Vec<f64>> {
        self.shares
            .iter()
            .enumerate()
            .map(|(s, per_module)| per_module.iter().map(|c| c.get(s).copied().unwrap_or(0.0)).collect())
            .collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["task", "layer", "choice", "share"])?;
        for (task, per_module) in self.shares.iter().enumerate() {
            for (m, cands) in per_module.iter().enumerate() {
                for (choice, share) in cands.iter().enumerate() {
                    out.write_record([task.to_string(), self.layers[m].to_string(), choice.to_string(), fmt_f64(*share)])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `n` evenly spaced values from `min` to `max` inclusive, both ends exact.
pub fn grid_values(min: f64, max: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(BenchError::Protocol(format!("grid needs n ≥ 2 and min < max, got {n} over [{min}, {max}]")));
    }
    let d = (n - 1) as f64;
    Ok((0..n).map(|i| (min * (d - i as f64) + max * i as f64) / d).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeCell {
    pub l1: f64,
    pub l2: f64,
    pub loss1: f64,
    pub loss2: f64,
}

impl LandscapeCell {
    pub fn loss_sum(&self) -> f64 {
        self.loss1 + self.loss2
    }
}

/// Cells in row-major order over `(lambda1[i], lambda2[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub cells: Vec<LandscapeCell>,
}

/// One task of a landscape: its task vector, test samples and head.
pub struct LandscapeTask<'a, T: Real> {
    pub tau: &'a TaskVector<T>,
    pub samples: &'a [Sample],
    pub head: &'a TaskHead<T>,
}

/// Losses of `θ_0 + λ1 τ1 + λ2 τ2` on both tasks at every grid point.
pub fn loss_landscape_grid<T: Real>(
    cfg: &ViTConfig,
    theta_0: &ParamTree<T>,
    task1: &LandscapeTask<'_, T>,
    task2: &LandscapeTask<'_, T>,
    lambda1: &[f64],
    lambda2: &[f64],
) -> Result<LandscapeGrid> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(BenchError::Protocol("empty landscape grid".into()));
    }
    let mut cells = Vec::with_capacity(lambda1.len() * lambda2.len());
    for &l1 in lambda1 {
        for &l2 in lambda2 {
            let mut params = theta_0.clone();
            if l1 != 0.0 {
                params.axpy_filtered(T::lit(l1), &task1.tau.tree, |_| true)?;
            }
            if l2 != 0.0 {
                params.axpy_filtered(T::lit(l2), &task2.tau.tree, |_| true)?;
            }
            let model = Vit::new(cfg.clone(), params)?;
            cells.push(LandscapeCell {
                l1,
                l2,
                loss1: dataset_loss(&model, task1.samples, task1.head)?,
                loss2: dataset_loss(&model, task2.samples, task2.head)?,
            });
        }
    }
    Ok(LandscapeGrid {
        lambda1: lambda1.to_vec(),
        lambda2: lambda2.to_vec(),
        cells,
    })
}

impl LandscapeGrid {
    pub fn cell(&self, i: usize, j: usize) -> &LandscapeCell {
        &self.cells[i * self.lambda2.len() + j]
    }

    /// The cell at exact coordinates, if present on the grid.
    pub fn at(&self, l1: f64, l2: f64) -> Option<&LandscapeCell> {
        self.cells.iter().find(|c| c.l1 == l1 && c.l2 == l2)
    }

    pub fn argmin_sum(&self) -> &LandscapeCell {
        self.cells
            .iter()
            .min_by(|a, b| a.loss_sum().total_cmp(&b.loss_sum()))
            .expect("grid is non-empty")
    }

    /// Cells strictly better than the joint optimum on both tasks.
    pub fn dominating_cells(&self) -> Vec<&LandscapeCell> {
        let best = self.argmin_sum();
        self.cells
            .iter()
            .filter(|c| c.loss1 < best.loss1 && c.loss2 < best.loss2)
            .collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["l1", "l2", "loss1", "loss2", "losssum"])?;
        for c in &self.cells {
            out.write_record([c.l1, c.l2, c.loss1, c.loss2, c.loss_sum()].map(fmt_f64))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
