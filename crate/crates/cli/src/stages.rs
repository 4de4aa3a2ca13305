//! The pipeline stages. A stage is skipped when its stamp (a hash of its
//! settings and input files) is unchanged and all of its outputs exist.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use wemoe_bench::analysis::{
    drift_report, first_choice_matrix, grid_values, loss_landscape_grid, magnitude_table, mlp_dominance, routing_distribution,
    write_drift_csv, write_magnitude_csv, write_routing_csv, LandscapeTask,
};
use wemoe_bench::{
    evaluate_accuracy, finetune, generate_task_dataset, pretrain, report, run_merge_benchmark, BenchConfig, Corruption, CorruptionKind,
    Expert, Method, Protocol, SeverityTable, Suite, TaskDataset, TaskFamily, ROUTER_SEED_SALT,
};
use wemoe_core::checkpoint::{write_atomic, Checkpoint};
use wemoe_core::merging::{merge_task_arithmetic, merge_weight_average, upscale_to_wemoe, MergedModel, ModuleFilter, UpscaleConfig, UpscaleStrategy};
use wemoe_core::taskvec::{compute_task_vector, TaskVector};
use wemoe_core::tta::{tta_train, write_trace_csv, TtaConfig};
use wemoe_core::vit::encoder_only;
use wemoe_core::{Image, ParamTree, Real, TaskHead, ViTConfig, Vit};

use crate::config::{Settings, UsageError};
use crate::Command;

type Res<T> = anyhow::Result<T>;

const DATA_KEYS: &[&str] = &[
    "precision",
    "seed",
    "tasks",
    "classes",
    "n_train",
    "n_test",
    "noise",
    "image_size",
    "patch_size",
    "d_model",
    "n_heads",
    "n_blocks",
    "mlp_hidden",
];

/// File layout under the output directory.
#[derive(Clone, Debug)]
pub struct StagePaths {
    pub root: PathBuf,
}

impl StagePaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StagePaths { root: root.into() }
    }

    pub fn theta0(&self) -> PathBuf {
        self.root.join("pretrain/theta0.wemc")
    }

    pub fn expert(&self, i: usize) -> PathBuf {
        self.root.join(format!("finetune/expert-{i}.wemc"))
    }

    pub fn task_vector(&self, i: usize) -> PathBuf {
        self.root.join(format!("taskvec/tau-{i}.wemc"))
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merge/merged.wemc")
    }

    pub fn adapted(&self) -> PathBuf {
        self.root.join("tta/adapted.wemc")
    }

    /// `eval/standard` stamps as `eval/.stamp-standard`.
    pub fn stamp(&self, stage: &str) -> PathBuf {
        match stage.split_once('/') {
            Some((dir, sub)) => self.root.join(dir).join(format!(".stamp-{sub}")),
            None => self.root.join(stage).join(".stamp"),
        }
    }
}

/// SHA-256 over the stage name, its settings and the bytes of every input.
pub fn fingerprint(stage: &str, settings: &str, inputs: &[PathBuf]) -> Res<String> {
    let mut h = Sha256::new();
    h.update(format!("stage={stage}\n{settings}"));
    for p in inputs {
        let bytes = fs::read(p).with_context(|| format!("missing input {} (run the earlier stage first)", p.display()))?;
        h.update(format!("input={}\n", p.file_name().and_then(|n| n.to_str()).unwrap_or("")));
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

struct Ctx<'a> {
    s: &'a Settings,
    paths: StagePaths,
    config: BenchConfig,
}

/// Runs `body` unless the stamp matches and every output exists.
fn stage(ctx: &Ctx, name: &str, keys: &[&str], extra: &str, inputs: &[PathBuf], outputs: &[PathBuf], body: impl FnOnce() -> Res<()>) -> Res<()> {
    let desc = format!("{}{}", ctx.s.describe(keys), extra);
    let print = fingerprint(name, &desc, inputs)?;
    let stamp = ctx.paths.stamp(name);
    let current = fs::read_to_string(&stamp).ok();
    if current.as_deref() == Some(print.as_str()) && outputs.iter().all(|p| p.exists()) {
        println!("{name}: up to date");
        return Ok(());
    }
    body()?;
    write_atomic(&stamp, print.as_bytes())?;
    println!("{name}: done");
    Ok(())
}

pub fn dispatch<T: Real>(command: &Command, s: &Settings) -> Res<()> {
    let ctx = Ctx {
        s,
        paths: StagePaths::new(s.raw("out")),
        config: bench_config(s)?,
    };
    match command {
        Command::Pretrain { .. } => run_pretrain::<T>(&ctx),
        Command::Finetune { .. } => run_finetune::<T>(&ctx),
        Command::Taskvec => run_taskvec::<T>(&ctx),
        Command::Merge { .. } => run_merge::<T>(&ctx),
        Command::Tta { .. } => run_tta::<T>(&ctx),
        Command::Eval { .. } => run_eval::<T>(&ctx),
        Command::Analyze {
            drift,
            magnitudes,
            routing,
            firstchoice,
            ..
        } => {
            let any = *drift || *magnitudes || *routing || *firstchoice;
            run_analyze::<T>(&ctx, [*drift, *magnitudes, *routing, *firstchoice].map(|f| f || !any))
        }
        Command::Landscape { .. } => run_landscape::<T>(&ctx),
    }
}

/// The benchmark configuration described by `s`.
pub fn bench_config(s: &Settings) -> Res<BenchConfig> {
    let families: Vec<TaskFamily> = s.list("tasks")?;
    if families.is_empty() {
        return Err(UsageError("at least one task family is required".into()).into());
    }
    let seed: u64 = s.get("seed")?;
    let mut c = BenchConfig::desk(&families, seed);
    c.vit = ViTConfig {
        image_size: s.get("image_size")?,
        patch_size: s.get("patch_size")?,
        d_model: s.get("d_model")?,
        n_heads: s.get("n_heads")?,
        n_blocks: s.get("n_blocks")?,
        mlp_hidden: s.get("mlp_hidden")?,
        ..ViTConfig::desk()
    };
    c.vit.validate().map_err(|e| UsageError(e.to_string()))?;
    let classes: usize = s.get("classes")?;
    for t in &mut c.tasks {
        t.classes = classes.min(t.family.max_classes());
        t.n_train = s.get("n_train")?;
        t.n_test = s.get("n_test")?;
        t.noise = s.get("noise")?;
        t.image_size = c.vit.image_size;
    }
    c.generic.classes = s.get("generic_classes")?;
    c.generic.n_train = s.get("generic_train")?;
    c.generic.n_test = s.get("n_test")?;
    c.generic.noise = s.get("noise")?;
    c.generic.image_size = c.vit.image_size;
    c.pretrain.epochs = s.get("pretrain_epochs")?;
    c.pretrain.lr = s.get("pretrain_lr")?;
    c.pretrain.batch = s.get("pretrain_batch")?;
    c.finetune.epochs = s.get("finetune_epochs")?;
    c.finetune.lr = s.get("finetune_lr")?;
    c.finetune.batch = s.get("finetune_batch")?;
    c.finetune = c.finetune.clone().with_probe(s.get("probe_epochs")?, s.get("probe_lr")?);
    c.lambda = s.get("lambda")?;
    c.l_fc = s.get("lfc")?;
    c.tta = TtaConfig {
        steps: s.get("steps")?,
        lr: s.get("lr")?,
        batch: s.get("batch")?,
        seed,
        ..TtaConfig::default()
    };
    Ok(c)
}

fn datasets(ctx: &Ctx) -> Res<Vec<TaskDataset>> {
    Ok(ctx.config.tasks.iter().map(generate_task_dataset).collect::<Result<Vec<_>, _>>()?)
}

fn n_tasks(ctx: &Ctx) -> usize {
    ctx.config.tasks.len()
}

fn read_tree<T: Real>(path: &Path) -> Res<(ParamTree<T>, wemoe_core::checkpoint::Manifest)> {
    let ck = Checkpoint::<T>::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((ParamTree::from_checkpoint(&ck, "")?, ck.manifest))
}

fn expect_kind(mf: &wemoe_core::checkpoint::Manifest, kind: &str, path: &Path) -> Res<()> {
    match mf.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(anyhow!("{} holds {:?}, expected a {kind} checkpoint", path.display(), other.unwrap_or("nothing"))),
    }
}

fn load_theta0<T: Real>(ctx: &Ctx) -> Res<ParamTree<T>> {
    let path = ctx.paths.theta0();
    let (tree, mf) = read_tree::<T>(&path)?;
    expect_kind(&mf, "theta0", &path)?;
    Ok(tree)
}

fn load_expert<T: Real>(ctx: &Ctx, i: usize) -> Res<Expert<T>> {
    let path = ctx.paths.expert(i);
    let (tree, mf) = read_tree::<T>(&path)?;
    expect_kind(&mf, "expert", &path)?;
    Ok(Expert {
        head: TaskHead::from_tree(&tree, i)?,
        params: encoder_only(&tree),
        train_accuracy: mf.parse_value("train_accuracy")?,
    })
}

fn load_suite<T: Real>(ctx: &Ctx) -> Res<Suite<T>> {
    let theta_0 = load_theta0::<T>(ctx)?;
    let experts = (0..n_tasks(ctx)).map(|i| load_expert::<T>(ctx, i)).collect::<Res<Vec<_>>>()?;
    Ok(Suite::from_parts(ctx.config.clone(), theta_0, datasets(ctx)?, experts))
}

fn expert_paths(ctx: &Ctx) -> Vec<PathBuf> {
    (0..n_tasks(ctx)).map(|i| ctx.paths.expert(i)).collect()
}

fn write_text(path: &Path, text: &[u8]) -> Res<()> {
    write_atomic(path, text)?;
    Ok(())
}

fn run_pretrain<T: Real>(ctx: &Ctx) -> Res<()> {
    let keys = [DATA_KEYS, &["generic_classes", "generic_train", "pretrain_epochs", "pretrain_lr", "pretrain_batch"]].concat();
    let out = ctx.paths.theta0();
    stage(ctx, "pretrain", &keys, "", &[], std::slice::from_ref(&out), || {
        let generic = generate_task_dataset(&ctx.config.generic)?;
        let theta0 = pretrain::<T>(&ctx.config.vit, &generic, &ctx.config.pretrain)?;
        let mut ck = encoder_only(&theta0).to_checkpoint();
        ck.manifest.set("kind", "theta0").set("seed", ctx.config.seed);
        ck.write(&out)?;
        Ok(())
    })
}

fn run_finetune<T: Real>(ctx: &Ctx) -> Res<()> {
    let keys = [DATA_KEYS, &["finetune_epochs", "finetune_lr", "finetune_batch", "probe_epochs", "probe_lr"]].concat();
    let summary = ctx.paths.root.join("finetune/summary.csv");
    let mut outputs = expert_paths(ctx);
    outputs.push(summary.clone());
    stage(ctx, "finetune", &keys, "", &[ctx.paths.theta0()], &outputs, || {
        let theta0 = load_theta0::<T>(ctx)?;
        let mut csv = String::from("task,family,train_accuracy,test_accuracy\n");
        for (i, d) in datasets(ctx)?.iter().enumerate() {
            let e = finetune(&ctx.config.vit, &theta0, d, i, &ctx.config.expert_training(i))?;
            let test = evaluate_accuracy(&Vit::new(ctx.config.vit.clone(), e.params.clone())?, d.test(), &e.head)?;
            let mut tree = e.params.clone();
            e.head.insert_into(&mut tree)?;
            let mut ck = tree.to_checkpoint();
            ck.manifest
                .set("kind", "expert")
                .set("task", i)
                .set("family", d.spec.family)
                .set("train_accuracy", e.train_accuracy);
            ck.write(&ctx.paths.expert(i))?;
            csv.push_str(&format!("{i},{},{},{}\n", d.spec.family, e.train_accuracy, test));
            println!("expert {i} ({}): test accuracy {test:.4}", d.spec.family);
        }
        write_text(&summary, csv.as_bytes())
    })
}

fn run_taskvec<T: Real>(ctx: &Ctx) -> Res<()> {
    let mut inputs = vec![ctx.paths.theta0()];
    inputs.extend(expert_paths(ctx));
    let outputs: Vec<PathBuf> = (0..n_tasks(ctx)).map(|i| ctx.paths.task_vector(i)).collect();
    stage(ctx, "taskvec", &["precision"], "", &inputs, &outputs, || {
        let theta0 = load_theta0::<T>(ctx)?;
        for (i, out) in outputs.iter().enumerate() {
            let e = load_expert::<T>(ctx, i)?;
            let tau = compute_task_vector(&e.params, &theta0, i)?;
            let mut ck = tau.tree.to_checkpoint();
            ck.manifest.set("kind", "taskvec").set("task", i);
            ck.write(out)?;
        }
        Ok(())
    })
}

fn load_task_vectors<T: Real>(ctx: &Ctx, ids: &[usize]) -> Res<Vec<TaskVector<T>>> {
    ids.iter()
        .map(|&i| {
            let path = ctx.paths.task_vector(i);
            let (tree, mf) = read_tree::<T>(&path)?;
            expect_kind(&mf, "taskvec", &path)?;
            Ok(TaskVector { task_id: i, tree })
        })
        .collect()
}

fn run_merge<T: Real>(ctx: &Ctx) -> Res<()> {
    let s = ctx.s;
    let keys = ["precision", "seed", "strategy", "lambda", "lfc", "rho", "shared_router"];
    let mut inputs = vec![ctx.paths.theta0()];
    inputs.extend(expert_paths(ctx));
    inputs.extend((0..n_tasks(ctx)).map(|i| ctx.paths.task_vector(i)));
    let out = ctx.paths.merged();
    stage(ctx, "merge", &keys, "", &inputs, std::slice::from_ref(&out), || {
        let strategy = s.raw("strategy");
        let lambda: f64 = s.get("lambda")?;
        let ids: Vec<usize> = (0..n_tasks(ctx)).collect();
        let theta0 = load_theta0::<T>(ctx)?;
        let heads: Vec<TaskHead<T>> = ids.iter().map(|&i| load_expert::<T>(ctx, i).map(|e| e.head)).collect::<Res<_>>()?;
        let tvs = load_task_vectors::<T>(ctx, &ids)?;
        let refs: Vec<&TaskVector<T>> = tvs.iter().collect();
        let mut ck = match strategy {
            "weight-averaging" | "task-arithmetic" => {
                let mut tree = if strategy == "weight-averaging" {
                    let experts: Vec<ParamTree<T>> = ids.iter().map(|&i| load_expert::<T>(ctx, i).map(|e| e.params)).collect::<Res<_>>()?;
                    let experts: Vec<&ParamTree<T>> = experts.iter().collect();
                    merge_weight_average(&experts)?
                } else {
                    merge_task_arithmetic(&theta0, &refs, T::lit(lambda), &ModuleFilter::All)?
                };
                for h in &heads {
                    h.insert_into(&mut tree)?;
                }
                let mut ck = tree.to_checkpoint();
                ck.manifest
                    .set("kind", "static")
                    .set("strategy", strategy)
                    .set("lambda", lambda)
                    .set("n_tasks", ids.len());
                ck
            }
            other => {
                let up = UpscaleConfig {
                    strategy: other.parse::<UpscaleStrategy>().map_err(|_| {
                        UsageError(format!(
                            "unknown strategy `{other}` (weight-averaging, task-arithmetic, mlp-only, att-and-mlp, entire-block)"
                        ))
                    })?,
                    lambda,
                    l_fc: s.get("lfc")?,
                    shared_router: s.get("shared_router")?,
                    rho: s.get("rho")?,
                    ..UpscaleConfig::wemoe()
                };
                up.validate().map_err(|e| UsageError(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed ^ ROUTER_SEED_SALT);
                let model = upscale_to_wemoe(&ctx.config.vit, &theta0, &refs, heads, &up, &mut rng)?;
                let mut ck = model.to_checkpoint();
                if up.shared_router && up.rho > 0.0 {
                    ck.manifest.set("method", Method::EWemoe(up.rho).label());
                } else if !up.shared_router && up.rho == 0.0 {
                    ck.manifest.set("method", Method::Wemoe.label());
                }
                ck
            }
        };
        ck.manifest.set("seed", ctx.config.seed);
        ck.write(&out)?;
        Ok(())
    })
}

fn load_merged<T: Real>(path: &Path) -> Res<MergedModel<T>> {
    let ck = Checkpoint::<T>::read(path).with_context(|| format!("reading {}", path.display()))?;
    if ck.manifest.get("kind") != Some("merged") {
        return Err(UsageError(format!("{} is a static merge; routers exist only for mlp-only, att-and-mlp or entire-block", path.display())).into());
    }
    Ok(MergedModel::from_checkpoint(&ck)?)
}

fn test_images(ds: &[TaskDataset], n: usize) -> Vec<Vec<Image>> {
    ds.iter().take(n).map(|d| d.test_images()).collect()
}

fn run_tta<T: Real>(ctx: &Ctx) -> Res<()> {
    let keys = [DATA_KEYS, &["steps", "lr", "batch"]].concat();
    let (out, trace) = (ctx.paths.adapted(), ctx.paths.root.join("tta/trace.csv"));
    stage(ctx, "tta", &keys, "", &[ctx.paths.merged()], &[out.clone(), trace.clone()], || {
        let model = load_merged::<T>(&ctx.paths.merged())?;
        let data = test_images(&datasets(ctx)?, model.n_tasks());
        let adapted = tta_train(&model, &data, &ctx.config.tta)?;
        let mut ck = adapted.model.to_checkpoint();
        ck.manifest
            .set("tta_steps", ctx.config.tta.steps)
            .set("tta_lr", ctx.config.tta.lr)
            .set("tta_batch", ctx.config.tta.batch);
        ck.write(&out)?;
        let mut buf = Vec::new();
        write_trace_csv(&adapted.trace, &mut buf)?;
        write_text(&trace, &buf)?;
        if let (Some(first), Some(last)) = (adapted.trace.first(), adapted.trace.last()) {
            println!("entropy {:.4} -> {:.4}", first.total, last.total);
        }
        Ok(())
    })
}

/// `kind@severity` items.
fn corruptions(s: &Settings, seed: u64) -> Res<Vec<Corruption>> {
    s.list::<String>("corruptions")?
        .iter()
        .map(|item| {
            let (kind, sev) = item.split_once('@').unwrap_or((item, "3"));
            let kind: CorruptionKind = kind.parse().map_err(|e: wemoe_bench::BenchError| UsageError(e.to_string()))?;
            let sev: u8 = sev.parse().map_err(|_| UsageError(format!("bad severity in `{item}`")))?;
            if !(1..=5).contains(&sev) {
                return Err(UsageError(format!("severity in `{item}` must be 1..=5")).into());
            }
            Ok(Corruption::new(kind, sev, seed))
        })
        .collect()
}

fn protocol(s: &Settings, n: usize) -> Res<Protocol> {
    Ok(match s.raw("protocol") {
        "standard" => Protocol::Standard,
        "generalization" => {
            let mut seen: Vec<usize> = s.list("seen")?;
            let mut unseen: Vec<usize> = s.list("unseen")?;
            if seen.is_empty() && unseen.is_empty() {
                seen = (0..n.saturating_sub(1)).collect();
                unseen = vec![n.saturating_sub(1)];
            } else if unseen.is_empty() {
                unseen = (0..n).filter(|i| !seen.contains(i)).collect();
            } else if seen.is_empty() {
                seen = (0..n).filter(|i| !unseen.contains(i)).collect();
            }
            Protocol::Generalization { seen, unseen }
        }
        "robustness" => Protocol::Robustness {
            corruptions: corruptions(s, s.get("seed")?)?,
            adapt_on_clean: s.get("adapt_on_clean")?,
            table: SeverityTable::default(),
        },
        other => return Err(UsageError(format!("unknown protocol `{other}` (standard, generalization, robustness)")).into()),
    })
}

fn run_eval<T: Real>(ctx: &Ctx) -> Res<()> {
    let s = ctx.s;
    let keys = [
        DATA_KEYS,
        &["lambda", "lfc", "steps", "lr", "batch", "protocol", "methods", "seen", "unseen", "corruptions", "adapt_on_clean"],
    ]
    .concat();
    let methods: Vec<Method> = s.list("methods")?;
    if methods.is_empty() {
        return Err(UsageError("no methods to evaluate".into()).into());
    }
    let protocol = protocol(s, n_tasks(ctx))?;
    let name = protocol.name();
    let md = ctx.paths.root.join(format!("eval/{name}.md"));
    let csv = ctx.paths.root.join(format!("eval/{name}.csv"));
    let mut inputs = vec![ctx.paths.theta0()];
    inputs.extend(expert_paths(ctx));
    stage(ctx, &format!("eval/{name}"), &keys, "", &inputs, &[md.clone(), csv.clone()], || {
        let suite = load_suite::<T>(ctx)?;
        let outcome = run_merge_benchmark(&suite, &methods, &protocol)?;
        let text = report::to_markdown(&outcome.tables);
        print!("{text}");
        write_text(&md, text.as_bytes())?;
        let mut buf = Vec::new();
        report::write_csv(&outcome.tables, &mut buf)?;
        write_text(&csv, &buf)
    })
}

fn run_analyze<T: Real>(ctx: &Ctx, [drift, magnitudes, routing, firstchoice]: [bool; 4]) -> Res<()> {
    let n = n_tasks(ctx);
    let dir = ctx.paths.root.join("analyze");
    let model_path = if ctx.paths.adapted().exists() { ctx.paths.adapted() } else { ctx.paths.merged() };
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    if drift {
        inputs.push(ctx.paths.theta0());
        inputs.extend(expert_paths(ctx));
        outputs.push(dir.join("drift.csv"));
    }
    if magnitudes {
        inputs.extend((0..n).map(|i| ctx.paths.task_vector(i)));
        outputs.push(dir.join("magnitudes.csv"));
    }
    if routing || firstchoice {
        inputs.push(model_path.clone());
    }
    if routing {
        outputs.push(dir.join("routing.csv"));
    }
    if firstchoice {
        outputs.push(dir.join("firstchoice.csv"));
    }
    let model_name = model_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let parts = format!("parts={drift},{magnitudes},{routing},{firstchoice}\nmodel={model_name}\n");
    let keys = [DATA_KEYS, &["layers"]].concat();
    stage(ctx, "analyze", &keys, &parts, &inputs, &outputs, || {
        if drift {
            let theta0 = load_theta0::<T>(ctx)?;
            let experts = (0..n).map(|i| load_expert::<T>(ctx, i).map(|e| e.params)).collect::<Res<Vec<_>>>()?;
            let refs: Vec<&ParamTree<T>> = experts.iter().collect();
            let rows = drift_report(&theta0, &refs)?;
            let (wins, layers) = mlp_dominance(&rows);
            println!("mlp drift is largest in {wins}/{layers} layers");
            let mut buf = Vec::new();
            write_drift_csv(&rows, &mut buf)?;
            write_text(&dir.join("drift.csv"), &buf)?;
        }
        if magnitudes {
            let tvs = load_task_vectors::<T>(ctx, &(0..n).collect::<Vec<_>>())?;
            let refs: Vec<&TaskVector<T>> = tvs.iter().collect();
            let mut buf = Vec::new();
            write_magnitude_csv(&magnitude_table(&refs)?, &mut buf)?;
            write_text(&dir.join("magnitudes.csv"), &buf)?;
        }
        if routing || firstchoice {
            let model = load_merged::<T>(&model_path)?;
            let sources = test_images(&datasets(ctx)?, model.n_tasks());
            if routing {
                let mut layers: Vec<usize> = ctx.s.list("layers")?;
                if layers.is_empty() {
                    layers = (0..ctx.config.vit.n_blocks).collect();
                }
                let mut buf = Vec::new();
                write_routing_csv(&routing_distribution(&model, &sources, &layers)?, &mut buf)?;
                write_text(&dir.join("routing.csv"), &buf)?;
            }
            if firstchoice {
                let m = first_choice_matrix(&model, &sources)?;
                if let Some(deep) = m.diagonal().last() {
                    let shares: Vec<String> = deep.iter().map(|v| format!("{v:.3}")).collect();
                    println!("own-task first choice at the deepest layer: [{}]", shares.join(", "));
                }
                let mut buf = Vec::new();
                m.write_csv(&mut buf)?;
                write_text(&dir.join("firstchoice.csv"), &buf)?;
            }
        }
        Ok(())
    })
}

fn run_landscape<T: Real>(ctx: &Ctx) -> Res<()> {
    let s = ctx.s;
    let pair: Vec<usize> = s.list("pair")?;
    let n = n_tasks(ctx);
    if pair.len() != 2 || pair[0] == pair[1] || pair.iter().any(|&i| i >= n) {
        return Err(UsageError(format!("--pair needs two distinct task indices below {n}")).into());
    }
    let grid = grid_values(s.get("grid_min")?, s.get("grid_max")?, s.get("grid")?).map_err(|e| UsageError(e.to_string()))?;
    let out = ctx.paths.root.join("landscape/landscape.csv");
    let keys = [DATA_KEYS, &["pair", "grid", "grid_min", "grid_max", "landscape_samples"]].concat();
    let inputs = vec![
        ctx.paths.theta0(),
        ctx.paths.expert(pair[0]),
        ctx.paths.expert(pair[1]),
        ctx.paths.task_vector(pair[0]),
        ctx.paths.task_vector(pair[1]),
    ];
    stage(ctx, "landscape", &keys, "", &inputs, std::slice::from_ref(&out), || {
        let theta0 = load_theta0::<T>(ctx)?;
        let ds = datasets(ctx)?;
        let limit: usize = s.get("landscape_samples")?;
        let tvs = load_task_vectors::<T>(ctx, &pair)?;
        let heads = [load_expert::<T>(ctx, pair[0])?.head, load_expert::<T>(ctx, pair[1])?.head];
        let task = |k: usize| {
            let test = ds[pair[k]].test();
            LandscapeTask {
                tau: &tvs[k],
                samples: &test[..limit.min(test.len())],
                head: &heads[k],
            }
        };
        let g = loss_landscape_grid(&ctx.config.vit, &theta0, &task(0), &task(1), &grid, &grid)?;
        let best = g.argmin_sum();
        println!("lowest summed loss at λ = ({}, {})", best.l1, best.l2);
        let mut buf = Vec::new();
        g.write_csv(&mut buf)?;
        write_text(&out, &buf)
    })
}
