//! Merge benchmark: suite preparation and the standard, generalization and
//! robustness protocols.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wemoe_core::merging::{merge_task_arithmetic, merge_weight_average, upscale_to_wemoe, MergedModel, ModuleFilter, RouterInit, UpscaleConfig};
use wemoe_core::taskvec::{compute_task_vector, TaskVector};
use wemoe_core::tta::{tta_train, TraceRow, TtaConfig};
use wemoe_core::vit::{FeatureModel, Image, TaskHead, ViTConfig, Vit};
use wemoe_core::{ParamTree, Real};

use crate::corrupt::{apply_corruption, Corruption, SeverityTable};
use crate::data::{generate_task_dataset, SyntheticTaskSpec, TaskDataset, TaskFamily};
use crate::error::{BenchError, Result};
use crate::train::{evaluate_accuracy, finetune, pretrain, Expert, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Pretrained,
    Individual,
    WeightAveraging,
    TaskArithmetic,
    Wemoe,
    /// Sparse dictionaries at ratio `rho` with a shared router.
    EWemoe(f64),
}

impl Method {
    /// The five rows of the main ordering plus E-WEMoE-90%.
    pub const STANDARD: [Method; 6] = [
        Method::Pretrained,
        Method::Individual,
        Method::WeightAveraging,
        Method::TaskArithmetic,
        Method::Wemoe,
        Method::EWemoe(0.9),
    ];

    pub fn label(&self) -> String {
        match self {
            Method::Pretrained => "pretrained".into(),
            Method::Individual => "individual".into(),
            Method::WeightAveraging => "weight-averaging".into(),
            Method::TaskArithmetic => "task-arithmetic".into(),
            Method::Wemoe => "wemoe".into(),
            Method::EWemoe(rho) => format!("e-wemoe-{}%", (rho * 100.0).round()),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, Method::Wemoe | Method::EWemoe(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || BenchError::Unknown {
            what: "method",
            value: s.to_string(),
        };
        Ok(match s {
            "pretrained" => Method::Pretrained,
            "individual" => Method::Individual,
            "weight-averaging" => Method::WeightAveraging,
            "task-arithmetic" => Method::TaskArithmetic,
            "wemoe" => Method::Wemoe,
            _ => {
                let pct = s
                    .strip_prefix("e-wemoe-")
                    .map(|r| r.trim_end_matches('%'))
                    .ok_or_else(unknown)?;
                let pct: f64 = pct.parse().map_err(|_| unknown())?;
                if !(0.0..100.0).contains(&pct) {
                    return Err(unknown());
                }
                Method::EWemoe(pct / 100.0)
            }
        })
    }
}

/// Mixed into the master seed to draw router weights.
pub const ROUTER_SEED_SALT: u64 = 0x0070_7465;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub vit: ViTConfig,
    pub tasks: Vec<SyntheticTaskSpec>,
    /// Data for the shared pre-trained base.
    pub generic: SyntheticTaskSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Task-arithmetic coefficient and router bias init.
    pub lambda: f64,
    pub l_fc: usize,
    pub router_init: RouterInit,
    pub tta: TtaConfig,
    pub seed: u64,
}

impl BenchConfig {
    /// Desk configuration over `families`, with every seed derived from `seed`.
    pub fn desk(families: &[TaskFamily], seed: u64) -> Self {
        let tasks = families
            .iter()
            .map(|&f| SyntheticTaskSpec::new(f, f.max_classes().min(4), 512, 256, seed))
            .collect();
        BenchConfig {
            vit: ViTConfig::desk(),
            tasks,
            generic: SyntheticTaskSpec::new(TaskFamily::GenericShapes, 4, 2048, 256, seed),
            pretrain: TrainConfig::new(4, 1e-3, 64, seed),
            finetune: TrainConfig::new(4, 5e-4, 32, seed.wrapping_add(1)).with_probe(10, 1e-2),
            lambda: 0.3,
            l_fc: 2,
            router_init: RouterInit::Paper,
            tta: TtaConfig {
                seed,
                ..TtaConfig::default()
            },
            seed,
        }
    }

    /// Fine-tuning settings for expert `task`; each expert gets its own seed.
    pub fn expert_training(&self, task: usize) -> TrainConfig {
        TrainConfig {
            seed: self.finetune.seed.wrapping_add(task as u64 * 7919),
            ..self.finetune.clone()
        }
    }

    pub fn upscale(&self, method: Method) -> Option<UpscaleConfig> {
        let base = match method {
            Method::Wemoe => UpscaleConfig::wemoe(),
            Method::EWemoe(rho) => UpscaleConfig::ewemoe(rho),
            _ => return None,
        };
        Some(UpscaleConfig {
            lambda: self.lambda,
            l_fc: self.l_fc,
            router_init: self.router_init,
            ..base
        })
    }
}

/// A pre-trained base, the task datasets and one fine-tuned expert per task.
#[derive(Clone, Debug)]
pub struct Suite<T: Real> {
    pub config: BenchConfig,
    pub theta_0: ParamTree<T>,
    pub datasets: Vec<TaskDataset>,
    pub experts: Vec<Expert<T>>,
}

pub fn prepare_suite<T: Real>(config: &BenchConfig) -> Result<Suite<T>> {
    if config.tasks.is_empty() {
        return Err(BenchError::Protocol("a suite needs at least one task".into()));
    }
    let generic = generate_task_dataset(&config.generic)?;
    let theta_0 = pretrain::<T>(&config.vit, &generic, &config.pretrain)?;
    let datasets = config
        .tasks
        .iter()
        .map(generate_task_dataset)
        .collect::<Result<Vec<_>>>()?;
    let experts = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| finetune(&config.vit, &theta_0, d, i, &config.expert_training(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Suite::from_parts(config.clone(), theta_0, datasets, experts))
}

impl<T: Real> Suite<T> {
    pub fn from_parts(config: BenchConfig, theta_0: ParamTree<T>, datasets: Vec<TaskDataset>, experts: Vec<Expert<T>>) -> Self {
        Suite {
            config,
            theta_0,
            datasets,
            experts,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.experts.len()
    }

    pub fn heads(&self, ids: &[usize]) -> Vec<TaskHead<T>> {
        ids.iter().map(|&i| self.experts[i].head.clone()).collect()
    }

    pub fn task_vectors(&self, ids: &[usize]) -> Result<Vec<TaskVector<T>>> {
        ids.iter()
            .map(|&i| Ok(compute_task_vector(&self.experts[i].params, &self.theta_0, i)?))
            .collect()
    }

    pub fn vit(&self, params: ParamTree<T>) -> Result<Vit<T>> {
        Ok(Vit::new(self.config.vit.clone(), params)?)
    }

    /// Static merge of the experts in `ids`.
    pub fn static_merge(&self, method: Method, ids: &[usize]) -> Result<ParamTree<T>> {
        match method {
            Method::Pretrained => Ok(self.theta_0.clone()),
            Method::WeightAveraging => {
                let trees: Vec<&ParamTree<T>> = ids.iter().map(|&i| &self.experts[i].params).collect();
                Ok(merge_weight_average(&trees)?)
            }
            Method::TaskArithmetic => {
                let tvs = self.task_vectors(ids)?;
                let refs: Vec<&TaskVector<T>> = tvs.iter().collect();
                Ok(merge_task_arithmetic(
                    &self.theta_0,
                    &refs,
                    T::lit(self.config.lambda),
                    &ModuleFilter::All,
                )?)
            }
            _ => Err(BenchError::Protocol(format!("{method} is not a static merge"))),
        }
    }

    /// Up-scaled model over the experts in `ids`, before adaptation.
    pub fn upscale(&self, method: Method, ids: &[usize]) -> Result<MergedModel<T>> {
        let up = self
            .config
            .upscale(method)
            .ok_or_else(|| BenchError::Protocol(format!("{method} is not a dynamic merge")))?;
        self.upscale_with(&up, ids)
    }

    /// Up-scaled model under an explicit configuration.
    pub fn upscale_with(&self, up: &UpscaleConfig, ids: &[usize]) -> Result<MergedModel<T>> {
        let tvs = self.task_vectors(ids)?;
        let refs: Vec<&TaskVector<T>> = tvs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ROUTER_SEED_SALT);
        Ok(upscale_to_wemoe(&self.config.vit, &self.theta_0, &refs, self.heads(ids), up, &mut rng)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    Standard,
    /// Merge `seen` only and evaluate every task in `seen ∪ unseen`.
    Generalization { seen: Vec<usize>, unseen: Vec<usize> },
    /// Evaluate on corrupted test sets. Routers adapt on the corrupted sets
    /// unless `adapt_on_clean`.
    Robustness {
        corruptions: Vec<Corruption>,
        adapt_on_clean: bool,
        table: SeverityTable,
    },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::Generalization { .. } => "generalization",
            Protocol::Robustness { .. } => "robustness",
        }
    }
}

/// One accuracy table: rows are methods, columns tasks plus the average.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub title: String,
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Accuracy per task, in `tasks` order.
    pub accuracy: Vec<f64>,
}

impl ReportRow {
    pub fn average(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }
}

impl ReportTable {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Tables plus what the dynamic methods learned along the way.
pub struct BenchOutcome<T: Real> {
    pub protocol: &'static str,
    pub tables: Vec<ReportTable>,
    /// `(table title, method, model)` after adaptation.
    pub adapted: Vec<(String, String, MergedModel<T>)>,
    pub traces: Vec<(String, String, Vec<TraceRow>)>,
}

impl<T: Real> BenchOutcome<T> {
    pub fn table(&self, title: &str) -> Option<&ReportTable> {
        self.tables.iter().find(|t| t.title == title)
    }

    pub fn adapted_model(&self, title: &str, method: &str) -> Option<&MergedModel<T>> {
        self.adapted
            .iter()
            .find(|(t, m, _)| t == title && m == method)
            .map(|(_, _, model)| model)
    }
}

/// Runs `methods` under `protocol`. Only test splits are read.
pub fn run_merge_benchmark<T: Real>(suite: &Suite<T>, methods: &[Method], protocol: &Protocol) -> Result<BenchOutcome<T>> {
    let n = suite.n_tasks();
    let (merged, evaluated): (Vec<usize>, Vec<usize>) = match protocol {
        Protocol::Generalization { seen, unseen } => {
            if seen.len() < 2 || unseen.is_empty() {
                return Err(BenchError::Protocol(format!(
                    "generalization needs ≥2 seen and ≥1 unseen tasks, got {} / {}",
                    seen.len(),
                    unseen.len()
                )));
            }
            if seen.iter().chain(unseen).any(|&i| i >= n) || seen.iter().any(|i| unseen.contains(i)) {
                return Err(BenchError::Protocol("seen/unseen split must be disjoint task indices".into()));
            }
            (seen.clone(), seen.iter().chain(unseen).copied().collect())
        }
        _ => {
            if n < 2 {
                return Err(BenchError::Protocol(format!("merging needs ≥2 tasks, got {n}")));
            }
            ((0..n).collect(), (0..n).collect())
        }
    };
    let mut out = BenchOutcome {
        protocol: protocol.name(),
        tables: Vec::new(),
        adapted: Vec::new(),
        traces: Vec::new(),
    };
    let clean: Vec<&TaskDataset> = suite.datasets.iter().collect();
    match protocol {
        Protocol::Robustness {
            corruptions,
            adapt_on_clean,
            table,
        } => {
            if corruptions.is_empty() {
                return Err(BenchError::Protocol("robustness needs at least one corruption".into()));
            }
            let clean_adapt = adapt_on_clean.then(|| adaptation_sets(&clean, &merged));
            for c in corruptions {
                let corrupted = suite
                    .datasets
                    .iter()
                    .map(|d| apply_corruption(d, c, table))
                    .collect::<Result<Vec<_>>>()?;
                let views: Vec<&TaskDataset> = corrupted.iter().collect();
                let adapt = match &clean_adapt {
                    Some(a) => a.clone(),
                    None => adaptation_sets(&views, &merged),
                };
                run_table(suite, methods, &merged, &evaluated, &views, &adapt, c.label(), &mut out)?;
            }
        }
        _ => {
            let adapt = adaptation_sets(&clean, &merged);
            run_table(suite, methods, &merged, &evaluated, &clean, &adapt, protocol.name().to_string(), &mut out)?;
        }
    }
    Ok(out)
}

fn adaptation_sets(datasets: &[&TaskDataset], merged: &[usize]) -> Vec<Vec<Image>> {
    merged.iter().map(|&i| datasets[i].test_images()).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_table<T: Real>(
    suite: &Suite<T>,
    methods: &[Method],
    merged: &[usize],
    evaluated: &[usize],
    datasets: &[&TaskDataset],
    adapt: &[Vec<Image>],
    title: String,
    out: &mut BenchOutcome<T>,
) -> Result<()> {
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let accuracy = match method {
            Method::Individual => evaluated
                .iter()
                .map(|&i| {
                    let model = suite.vit(suite.experts[i].params.clone())?;
                    evaluate_accuracy(&model, datasets[i].test(), &suite.experts[i].head)
                })
                .collect::<Result<Vec<_>>>()?,
            Method::Wemoe | Method::EWemoe(_) => {
                let model = suite.upscale(method, merged)?;
                let tta = TtaConfig {
                    seed: suite.config.tta.seed,
                    ..suite.config.tta.clone()
                };
                let adapted = tta_train(&model, adapt, &tta)?;
                let acc = accuracies(&adapted.model, suite, evaluated, datasets)?;
                out.traces.push((title.clone(), method.label(), adapted.trace));
                out.adapted.push((title.clone(), method.label(), adapted.model));
                acc
            }
            _ => {
                let model = suite.vit(suite.static_merge(method, merged)?)?;
                accuracies(&model, suite, evaluated, datasets)?
            }
        };
        rows.push(ReportRow {
            method: method.label(),
            accuracy,
        });
    }
    out.tables.push(ReportTable {
        title,
        tasks: evaluated.iter().map(|&i| datasets[i].name.clone()).collect(),
        rows,
    });
    Ok(())
}

fn accuracies<T: Real>(model: &dyn FeatureModel<T>, suite: &Suite<T>, evaluated: &[usize], datasets: &[&TaskDataset]) -> Result<Vec<f64>> {
    evaluated
        .iter()
        .map(|&i| evaluate_accuracy(model, datasets[i].test(), &suite.experts[i].head))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::CorruptionKind;
    use crate::data::{AccessLog, Split};

    fn tiny_config() -> BenchConfig {
        let mut c = BenchConfig::desk(&[TaskFamily::CornerQuadrant, TaskFamily::RingRadius, TaskFamily::StripeOrientation], 3);
        c.vit = ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            mlp_hidden: 32,
            ln_eps: 1e-5,
        };
        for t in c.tasks.iter_mut().chain([&mut c.generic]) {
            t.image_size = 16;
            t.n_train = 32;
            t.n_test = 16;
        }
        c.pretrain.epochs = 1;
        c.finetune.epochs = 2;
        c.finetune.lr = 3e-3;
        c.tta.steps = 3;
        c.tta.batch = 4;
        c
    }

    #[test]
    fn method_labels_round_trip() {
        for m in Method::STANDARD {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::EWemoe(0.9).label(), "e-wemoe-90%");
        assert_eq!("e-wemoe-99".parse::<Method>().unwrap(), Method::EWemoe(0.99));
        assert!("e-wemoe-100%".parse::<Method>().is_err());
        assert!("adamerging".parse::<Method>().is_err());
    }

    #[test]
    fn individual_row_is_the_diagonal() {
        let suite = prepare_suite::<f32>(&tiny_config()).unwrap();
        let out = run_merge_benchmark(&suite, &[Method::Individual], &Protocol::Standard).unwrap();
        let row = &out.tables[0].rows[0];
        for (i, e) in suite.experts.iter().enumerate() {
            let model = suite.vit(e.params.clone()).unwrap();
            let acc = evaluate_accuracy(&model, suite.datasets[i].test(), &e.head).unwrap();
            assert_eq!(row.accuracy[i], acc);
        }
    }

    #[test]
    fn full_standard_run_is_reproducible() {
        let cfg = tiny_config();
        let a = prepare_suite::<f32>(&cfg).unwrap();
        let b = prepare_suite::<f32>(&cfg).unwrap();
        let methods = Method::STANDARD;
        let ra = run_merge_benchmark(&a, &methods, &Protocol::Standard).unwrap();
        let rb = run_merge_benchmark(&b, &methods, &Protocol::Standard).unwrap();
        assert_eq!(ra.tables, rb.tables);
        assert_eq!(ra.tables[0].rows.len(), 6);
        assert_eq!(ra.traces.len(), 2);
        assert_eq!(ra.traces[0].2.len(), 3);
        for r in &ra.tables[0].rows {
            assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }

    #[test]
    fn generalization_reads_no_unseen_training_data() {
        let suite = prepare_suite::<f32>(&tiny_config()).unwrap();
        let log = AccessLog::new();
        let mut suite = suite;
        suite.datasets = suite.datasets.into_iter().map(|d| d.with_log(&log)).collect();
        let protocol = Protocol::Generalization {
            seen: vec![0, 1],
            unseen: vec![2],
        };
        let out = run_merge_benchmark(&suite, &[Method::TaskArithmetic, Method::Wemoe], &protocol).unwrap();
        let unseen = &suite.datasets[2].name;
        assert!(!log.touched(unseen, Split::Train));
        assert!(log.events().iter().all(|a| a.split == Split::Test));
        assert!(log.touched(unseen, Split::Test));
        assert_eq!(out.tables[0].tasks.len(), 3);
        let model = out.adapted_model("generalization", "wemoe").unwrap();
        assert_eq!(model.n_tasks(), 2);
    }

    #[test]
    fn bad_splits_are_rejected() {
        let suite = prepare_suite::<f32>(&tiny_config()).unwrap();
        let bad = |seen: Vec<usize>, unseen: Vec<usize>| {
            run_merge_benchmark(&suite, &[Method::Pretrained], &Protocol::Generalization { seen, unseen }).is_err()
        };
        assert!(bad(vec![0], vec![1]));
        assert!(bad(vec![0, 1], vec![]));
        assert!(bad(vec![0, 1], vec![1]));
        assert!(bad(vec![0, 1], vec![7]));
        let robust = Protocol::Robustness {
            corruptions: vec![],
            adapt_on_clean: false,
            table: SeverityTable::default(),
        };
        assert!(run_merge_benchmark(&suite, &[Method::Pretrained], &robust).is_err());
    }

    #[test]
    fn robustness_emits_a_table_per_corruption() {
        let suite = prepare_suite::<f32>(&tiny_config()).unwrap();
        let protocol = Protocol::Robustness {
            corruptions: vec![
                Corruption::new(CorruptionKind::Contrast, 2, 1),
                Corruption::new(CorruptionKind::Pixelate, 5, 1),
            ],
            adapt_on_clean: false,
            table: SeverityTable::default(),
        };
        let out = run_merge_benchmark(&suite, &[Method::Pretrained, Method::Wemoe], &protocol).unwrap();
        let titles: Vec<&str> = out.tables.iter().map(|t| t.title.as_str()).collect();
        assert_eq!(titles, ["contrast@2", "pixelate@5"]);
        assert!(out.tables[0].tasks[0].ends_with("+contrast@2"));
        assert!(out.adapted_model("pixelate@5", "wemoe").is_some());
    }
}
