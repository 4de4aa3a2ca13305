//! Task vectors `θ_i − θ_0`, per-module drift, magnitude statistics and
//! magnitude pruning.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{block_param, ModuleTag, ParamTree};
use crate::scalar::Real;
use crate::sparse::SparseTensor;
use crate::tensor::Tensor;
use crate::vit::MLP_LOCALS;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector<T: Real> {
    pub task_id: usize,
    pub tree: ParamTree<T>,
}

pub fn compute_task_vector<T: Real>(theta_i: &ParamTree<T>, theta_0: &ParamTree<T>, task_id: usize) -> Result<TaskVector<T>> {
    Ok(TaskVector {
        task_id,
        tree: theta_i.zip_map(theta_0, |a, b| a - b)?,
    })
}

impl<T: Real> TaskVector<T> {
    /// `θ_0 + scale · τ`.
    pub fn apply(&self, theta_0: &ParamTree<T>, scale: T) -> Result<ParamTree<T>> {
        let mut out = theta_0.clone();
        out.axpy_filtered(scale, &self.tree, |_| true)?;
        Ok(out)
    }

    pub fn sq_norm(&self) -> T {
        self.tree.sq_norm()
    }

    /// Names of the tensors carrying `tag` in block `layer`.
    pub fn module_names(&self, tag: ModuleTag, layer: usize) -> Vec<String> {
        self.tree.select(tag, Some(layer)).map(|(n, _)| n.to_string()).collect()
    }
}

/// Squared L2 norm of the concatenated deltas of every `tag` tensor in block `layer`.
pub fn l2_module_distance<T: Real>(theta_i: &ParamTree<T>, theta_0: &ParamTree<T>, tag: ModuleTag, layer: usize) -> Result<T> {
    let mut acc = T::zero();
    let mut found = false;
    for (name, a) in theta_i.select(tag, Some(layer)) {
        let b = theta_0.get(name)?;
        if a.shape() != b.shape() {
            return Err(Error::Structure {
                name: name.to_string(),
                reason: format!("shape {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        found = true;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            acc += (x - y) * (x - y);
        }
    }
    if !found {
        return Err(Error::Structure {
            name: format!("blocks.{layer:02}.{tag}"),
            reason: "no tensors with this tag in the block".into(),
        });
    }
    Ok(acc)
}

/// Sorted absolute values of the `tag` tensors of block `layer`.
pub fn module_magnitudes<T: Real>(tv: &TaskVector<T>, tag: ModuleTag, layer: usize) -> Vec<f64> {
    let mut mags: Vec<f64> = tv
        .tree
        .select(tag, Some(layer))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64().abs()))
        .collect();
    mags.sort_by(f64::total_cmp);
    mags
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("quantile of an empty selection".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Quantiles of `|τ|` over the MLP tensors of block `layer`.
pub fn magnitude_quantiles<T: Real>(tv: &TaskVector<T>, layer: usize, quantiles: &[f64]) -> Result<Vec<f64>> {
    let mags = module_magnitudes(tv, ModuleTag::Mlp, layer);
    if mags.is_empty() {
        return Err(Error::Empty(format!("no MLP tensors in block {layer}")));
    }
    quantiles.iter().map(|&q| quantile_sorted(&mags, q)).collect()
}

/// `round((1 − rho) · total)` with halves rounded up.
pub fn kept_count(total: usize, rho: f64) -> usize {
    let k = ((1.0 - rho) * total as f64 + 0.5).floor() as usize;
    k.min(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PruneGrouping {
    /// All tensors of the module compete for one budget.
    #[default]
    Module,
    /// Each tensor keeps its own fraction.
    PerTensor,
}

/// Magnitude-pruned slice of a task vector for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTaskVector<T: Real> {
    pub task_id: usize,
    pub layer: usize,
    pub rho: f64,
    pub tensors: BTreeMap<String, SparseTensor<T>>,
}

impl<T: Real> SparseTaskVector<T> {
    pub fn nnz(&self) -> usize {
        self.tensors.values().map(SparseTensor::nnz).sum()
    }

    pub fn get(&self, name: &str) -> Result<&SparseTensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Structure {
            name: name.to_string(),
            reason: "not part of this sparse task vector".into(),
        })
    }

    pub fn to_dense(&self) -> ParamTree<T> {
        let mut tree = ParamTree::new();
        for (name, s) in &self.tensors {
            tree.insert(name.clone(), s.to_dense()).expect("names come from a parameter tree");
        }
        tree
    }
}

fn validate_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("sparsity ratio {rho} outside [0, 1)")));
    }
    Ok(())
}

/// Indices (into the concatenation of `parts`) of the `keep` largest
/// magnitudes, ties going to the lower index; returned ascending.
fn top_k_indices<T: Real>(parts: &[&Tensor<T>], keep: usize) -> Vec<usize> {
    let mut order: Vec<(T, usize)> = parts
        .iter()
        .flat_map(|t| t.data().iter())
        .enumerate()
        .map(|(i, v)| (v.abs(), i))
        .collect();
    order.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

fn split_kept<T: Real>(names: &[String], parts: &[&Tensor<T>], kept: &[usize]) -> Result<BTreeMap<String, SparseTensor<T>>> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    let mut cursor = 0;
    for (name, t) in names.iter().zip(parts) {
        let end = offset + t.len();
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        while cursor < kept.len() && kept[cursor] < end {
            let local = kept[cursor] - offset;
            idx.push(local as u32);
            vals.push(t.data()[local]);
            cursor += 1;
        }
        out.insert(name.clone(), SparseTensor::new(t.shape().to_vec(), idx, vals)?);
        offset = end;
    }
    Ok(out)
}

/// Prunes the named tensors of one block, keeping the largest magnitudes.
pub fn prune_tensors<T: Real>(
    tv: &TaskVector<T>,
    layer: usize,
    names: &[String],
    rho: f64,
    grouping: PruneGrouping,
) -> Result<SparseTaskVector<T>> {
    validate_rho(rho)?;
    let parts: Vec<&Tensor<T>> = names.iter().map(|n| tv.tree.get(n)).collect::<Result<_>>()?;
    let tensors = match grouping {
        PruneGrouping::Module => {
            let total = parts.iter().map(|t| t.len()).sum();
            let kept = top_k_indices(&parts, kept_count(total, rho));
            split_kept(names, &parts, &kept)?
        }
        PruneGrouping::PerTensor => {
            let mut out = BTreeMap::new();
            for (name, t) in names.iter().zip(&parts) {
                let kept = top_k_indices(&[*t], kept_count(t.len(), rho));
                out.append(&mut split_kept(std::slice::from_ref(name), &[*t], &kept)?);
            }
            out
        }
    };
    Ok(SparseTaskVector {
        task_id: tv.task_id,
        layer,
        rho,
        tensors,
    })
}

/// Joint magnitude pruning of the four MLP tensors of block `layer`.
pub fn prune_task_vector<T: Real>(tv: &TaskVector<T>, layer: usize, rho: f64) -> Result<SparseTaskVector<T>> {
    let names: Vec<String> = MLP_LOCALS.iter().map(|n| block_param(layer, n)).collect();
    prune_tensors(tv, layer, &names, rho, PruneGrouping::Module)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mlp_tree(layer: usize, w0: Vec<f64>, b0: Vec<f64>, w1: Vec<f64>, b1: Vec<f64>) -> ParamTree<f64> {
        let mut t = ParamTree::new();
        let (d, m) = (b1.len(), b0.len());
        t.insert(block_param(layer, "mlp.w0"), Tensor::new(vec![d, m], w0).unwrap()).unwrap();
        t.insert(block_param(layer, "mlp.b0"), Tensor::vector(b0)).unwrap();
        t.insert(block_param(layer, "mlp.w1"), Tensor::new(vec![m, d], w1).unwrap()).unwrap();
        t.insert(block_param(layer, "mlp.b1"), Tensor::vector(b1)).unwrap();
        t
    }

    fn single(values: Vec<f64>) -> TaskVector<f64> {
        let mut t = ParamTree::new();
        t.insert("blocks.00.mlp.w0", Tensor::vector(values)).unwrap();
        TaskVector { task_id: 0, tree: t }
    }

    fn kept_values(s: &SparseTaskVector<f64>) -> Vec<f64> {
        s.tensors.values().flat_map(|t| t.values().to_vec()).collect()
    }

    #[test]
    fn distance_examples() {
        let mut a = ParamTree::<f64>::new();
        a.insert("blocks.00.att.wq", Tensor::vector(vec![3.0, 4.0])).unwrap();
        a.insert("blocks.00.mlp.b1", Tensor::vector(vec![1.0])).unwrap();
        let z = a.scale(0.0);
        assert_eq!(l2_module_distance(&a, &a, ModuleTag::Attention, 0).unwrap(), 0.0);
        assert_eq!(l2_module_distance(&a, &z, ModuleTag::Attention, 0).unwrap(), 25.0);
        assert!(l2_module_distance(&a, &z, ModuleTag::Attention, 1).is_err());
        assert!("conv".parse::<ModuleTag>().is_err());
    }

    #[test]
    fn quantile_examples() {
        let tv = single(vec![1.0, -2.0, 3.0, -4.0]);
        assert_eq!(magnitude_quantiles(&tv, 0, &[0.5]).unwrap(), vec![2.5]);
        let tv = single(vec![-0.7; 5]);
        for q in magnitude_quantiles(&tv, 0, &[0.1, 0.5, 0.9]).unwrap() {
            assert_eq!(q, 0.7);
        }
        assert!(magnitude_quantiles(&tv, 3, &[0.5]).is_err());
    }

    #[test]
    fn prune_examples() {
        let tv = single(vec![0.1, -0.2, 0.05, 0.3]);
        let s = prune_task_vector_names(&tv, 0.5);
        assert_eq!(s.tensors["blocks.00.mlp.w0"].indices(), &[1, 3]);
        assert_eq!(kept_values(&s), vec![-0.2, 0.3]);
        let s = prune_task_vector_names(&tv, 0.75);
        assert_eq!(kept_values(&s), vec![0.3]);
        let s = prune_task_vector_names(&tv, 0.0);
        assert_eq!(s.to_dense(), tv.tree);
        assert!(prune_task_vector(&tv, 0, 1.0).is_err());
    }

    fn prune_task_vector_names(tv: &TaskVector<f64>, rho: f64) -> SparseTaskVector<f64> {
        prune_tensors(tv, 0, &["blocks.00.mlp.w0".to_string()], rho, PruneGrouping::Module).unwrap()
    }

    #[test]
    fn ties_keep_lower_index_and_counts_round_half_up() {
        let tv = single(vec![0.5, -0.5, 0.5, 0.5]);
        assert_eq!(prune_task_vector_names(&tv, 0.5).tensors["blocks.00.mlp.w0"].indices(), &[0, 1]);
        assert_eq!(kept_count(5, 0.5), 3);
        assert_eq!(kept_count(10, 0.9), 1);
        assert_eq!(kept_count(4_722_432, 0.9), 472_243);
    }

    #[test]
    fn joint_pruning_spans_all_four_tensors() {
        let tree = mlp_tree(2, vec![0.0, 9.0], vec![0.1], vec![0.2, 0.0], vec![-5.0, 0.3]);
        let tv = TaskVector { task_id: 1, tree };
        let s = prune_task_vector(&tv, 2, 0.5).unwrap();
        assert_eq!(s.nnz(), 4);
        assert_eq!(s.tensors["blocks.02.mlp.b1"].values(), &[-5.0, 0.3]);
        assert_eq!(s.tensors["blocks.02.mlp.w0"].values(), &[9.0]);
        assert_eq!(s.tensors["blocks.02.mlp.w1"].values(), &[0.2]);
        assert_eq!(s.tensors["blocks.02.mlp.b0"].nnz(), 0);
    }

    proptest! {
        #[test]
        fn round_trip_and_nesting(
            vals in prop::collection::vec(prop_oneof![-1.0f64..-1e-3, 1e-3f64..1.0], 20),
            r1 in 0.0f64..0.99,
            r2 in 0.0f64..0.99,
        ) {
            let tree = mlp_tree(0, vals[..6].to_vec(), vals[6..8].to_vec(), vals[8..14].to_vec(), vals[14..17].to_vec());
            let tv = TaskVector { task_id: 0, tree };
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = prune_task_vector(&tv, 0, lo).unwrap();
            let b = prune_task_vector(&tv, 0, hi).unwrap();
            prop_assert_eq!(a.nnz(), kept_count(17, lo));
            for (name, sb) in &b.tensors {
                let sa = &a.tensors[name];
                for i in sb.indices() {
                    prop_assert!(sa.indices().contains(i));
                }
                let dense = sb.to_dense();
                let src = tv.tree.get(name).unwrap();
                for (j, &v) in dense.data().iter().enumerate() {
                    let kept = sb.indices().contains(&(j as u32));
                    prop_assert_eq!(v != 0.0, kept);
                    if kept {
                        prop_assert_eq!(v, src.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn add_back_reconstructs(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
            let mut ti = ParamTree::new();
            ti.insert("embed.pos", Tensor::new(vec![2, 3], a).unwrap()).unwrap();
            let mut t0 = ParamTree::new();
            t0.insert("embed.pos", Tensor::new(vec![2, 3], b.clone()).unwrap()).unwrap();
            let tv = compute_task_vector(&ti, &t0, 0).unwrap();
            for (k, (&x, &y)) in tv.tree.get("embed.pos").unwrap().data().iter().zip(&b).enumerate() {
                prop_assert_eq!(x, ti.get("embed.pos").unwrap().data()[k] - y);
            }
            let back = tv.apply(&t0, 1.0).unwrap();
            // x - y + y can differ from x by one rounding; the tolerance is one ulp-scale
            prop_assert!(back.get("embed.pos").unwrap().max_abs_diff(ti.get("embed.pos").unwrap()).unwrap() <= 1e-15 * 8.0);
        }
    }
}
