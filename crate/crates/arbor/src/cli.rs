//! Command-line interface.

use std::path::{Path, PathBuf};
use std::time::Instant;

use arbor_core::models::{
    evaluate_accuracy, init_top_mps, train_curtain, train_top, CurtainModel, Dataset, Metrics, Scorer, TrainConfig,
};
use arbor_core::mps::Mps;
use arbor_core::tree::{Convergence, LayerCount};
use arbor_core::{BuildConfig, LocalMap, ScaleMode, TreeNetwork};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::artifact::{self, Model};
use crate::container::{self, Container};
use crate::data::{read_idx, synth_dataset, ImageSet, SynthKind};
use crate::error::{Error, Result};
use crate::parallel::{build_tree_parallel, coarse_features_parallel, map_inputs, RayonReducer};

#[derive(Debug, Parser)]
#[command(name = "arbor", version, about = "Tree tensor network classifiers")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Omit wall-clock times so repeated runs produce identical metrics.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Write the metrics document here instead of stdout.
    #[arg(long, global = true)]
    pub metrics_out: Option<PathBuf>,
    /// JSON file of default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Samples per parallel work unit.
    #[arg(long, global = true, default_value_t = 256)]
    pub chunk: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tree of isometries from training images.
    BuildTree(BuildTreeArgs),
    /// Fit a ridge least-squares linear classifier and write it as an MPS.
    LiftLinear(LiftLinearArgs),
    /// Train a top tensor on a full tree.
    TrainTop(TrainArgs),
    /// Train an MPS head on a partial tree.
    TrainCurtain(TrainArgs),
    /// Accuracy and cost of a trained model on a dataset.
    Evaluate(EvaluateArgs),
    /// Describe a model file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading files.
    #[arg(long, value_enum)]
    pub synth: Option<SynthKind>,
    #[arg(long, default_value_t = 256)]
    pub synth_count: usize,
    #[arg(long, default_value_t = 64)]
    pub synth_test_count: usize,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Label count (default: largest training label + 1).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildTreeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub max_dim: Option<usize>,
    /// Layer count, or "full".
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Prior MPS file (from lift-linear) for mixed builds.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub map: Option<LocalMap>,
    /// unit-local, raw or normalized.
    #[arg(long)]
    pub scale_mode: Option<ScaleMode>,
    /// Stop accumulating once covariances move less than this between checks.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub check_every: usize,
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LiftLinearArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Tree file from build-tree.
    #[arg(long)]
    pub tree: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Top tensor: CG iteration cap. Curtain: CG cap per local solve.
    #[arg(long)]
    pub cg_max: Option<usize>,
    /// Gradient (residual) norm tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub bond_dim: Option<usize>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Name reported for the evaluated split.
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Print the raw header without reading the payload.
    #[arg(long)]
    pub header_only: bool,
}

/// Values read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub cutoff: Option<f64>,
    pub max_dim: Option<usize>,
    pub layers: Option<String>,
    pub mu: Option<f64>,
    pub map: Option<String>,
    pub scale_mode: Option<String>,
    pub tol: Option<f64>,
    pub ridge: Option<f64>,
    pub cg_max: Option<usize>,
    pub bond_dim: Option<usize>,
    pub sweeps: Option<usize>,
    pub seed: Option<u64>,
}

pub const DEFAULT_CUTOFF: f64 = 6e-4;
pub const DEFAULT_MIXED_MU: f64 = 0.5;
pub const DEFAULT_SCALE_MODE: ScaleMode = ScaleMode::Normalized;
pub const DEFAULT_TOP_ITERATIONS: usize = 300;
pub const DEFAULT_LOCAL_CG: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_BOND_DIM: usize = 300;
pub const DEFAULT_SWEEPS: usize = 30;

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    let Some(p) = path else { return Ok(Settings::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.to_path_buf(),
        offset: 0,
        message: format!("bad settings: {e}"),
    })
}

fn parse_setting<T: std::str::FromStr<Err = arbor_core::Error>>(v: Option<String>) -> Result<Option<T>> {
    v.map(|s| s.parse::<T>().map_err(Error::from)).transpose()
}

fn parse_layers(s: &str) -> Result<LayerCount> {
    if s == "full" {
        return Ok(LayerCount::Full);
    }
    match s.parse::<usize>() {
        Ok(r) if r >= 1 => Ok(LayerCount::Count(r)),
        _ => Err(usage(format!("--layers must be a positive count or 'full', got '{s}'"))),
    }
}

fn layers_name(l: LayerCount) -> Value {
    match l {
        LayerCount::Full => json!("full"),
        LayerCount::Count(r) => json!(r),
    }
}

/// Train and optional test splits.
struct Splits {
    train: ImageSet,
    test: Option<ImageSet>,
    classes: usize,
}

fn load_splits(d: &DataArgs, seed: u64) -> Result<Splits> {
    let (mut train, mut test) = match (&d.synth, &d.images, &d.labels) {
        (Some(kind), None, None) => {
            let train = synth_dataset(*kind, d.synth_count, seed)?;
            let test = if d.synth_test_count > 0 {
                Some(synth_dataset(*kind, d.synth_test_count, seed.wrapping_add(1))?)
            } else {
                None
            };
            (train, test)
        }
        (None, Some(i), Some(l)) => {
            let train = read_idx(i, l)?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(ti), Some(tl)) => Some(read_idx(ti, tl)?),
                (None, None) => None,
                _ => return Err(usage("--test-images and --test-labels go together")),
            };
            (train, test)
        }
        (Some(_), _, _) => return Err(usage("--synth cannot be combined with --images/--labels")),
        _ => return Err(usage("give --images and --labels, or --synth")),
    };
    if let Some(n) = d.limit {
        train.truncate(n);
    }
    if let (Some(n), Some(t)) = (d.test_limit, test.as_mut()) {
        t.truncate(n);
    }
    if train.is_empty() {
        return Err(usage("training set is empty"));
    }
    if let Some(t) = &test {
        if t.pixel_count() != train.pixel_count() {
            return Err(arbor_core::Error::Shape(format!(
                "test images have {} pixels, training images {}",
                t.pixel_count(),
                train.pixel_count()
            ))
            .into());
        }
    }
    let classes = d.classes.unwrap_or_else(|| train.class_count());
    for (name, set) in [("training", Some(&train)), ("test", test.as_ref())] {
        if let Some(s) = set {
            if s.class_count() > classes {
                return Err(arbor_core::Error::Shape(format!(
                    "{name} labels reach {}, but the label count is {classes}",
                    s.class_count() - 1
                ))
                .into());
            }
        }
    }
    Ok(Splits { train, test, classes })
}

fn dataset_summary(s: &Splits) -> Value {
    json!({
        "train": s.train.len(),
        "test": s.test.as_ref().map(ImageSet::len),
        "image": [s.train.rows, s.train.cols],
        "classes": s.classes,
    })
}

fn metrics_json(m: &Metrics) -> Value {
    json!({ "accuracy": m.accuracy, "cost": m.cost, "samples": m.samples, "confusion": m.confusion })
}

/// Context shared by every command.
pub struct Session {
    pub deterministic: bool,
    pub chunk: usize,
    pub settings: Settings,
    started: Instant,
}

impl Session {
    fn reducer(&self) -> RayonReducer {
        RayonReducer { chunk: self.chunk.max(1) }
    }

    fn finish(&self, command: &str, config: Value, mut body: serde_json::Map<String, Value>) -> Value {
        body.insert("command".into(), json!(command));
        body.insert("config".into(), config);
        if !self.deterministic {
            body.insert("wall_time_seconds".into(), json!(self.started.elapsed().as_secs_f64()));
        }
        Value::Object(body)
    }
}

fn features_for(tree: &TreeNetwork, set: &ImageSet) -> Result<Vec<arbor_core::ProductFeature>> {
    let m = tree.meta();
    let fs = map_inputs(&set.inputs(), m.map, m.scale_mode)?;
    Ok(coarse_features_parallel(tree, &fs)?)
}

fn check_tree_input(tree: &TreeNetwork, set: &ImageSet) -> Result<()> {
    if tree.input_dims().len() != set.pixel_count() {
        return Err(arbor_core::Error::Shape(format!(
            "tree expects {} inputs, images have {} pixels",
            tree.input_dims().len(),
            set.pixel_count()
        ))
        .into());
    }
    Ok(())
}

fn load_tree(path: &Path) -> Result<TreeNetwork> {
    let c = Container::load(path)?;
    if c.kind() != artifact::KIND_TREE {
        return Err(usage(format!("{} holds a '{}', expected a tree", path.display(), c.kind())));
    }
    artifact::get_tree(&c)
}

fn load_prior(path: &Path) -> Result<Mps> {
    match artifact::load_model(&Container::load(path)?)? {
        Model::Mps { mps, .. } => Ok(mps),
        _ => Err(usage(format!("{} is not an MPS file", path.display()))),
    }
}

pub fn cmd_build_tree(s: &Session, a: &BuildTreeArgs) -> Result<Value> {
    let set = &s.settings;
    let seed = a.data.seed.or(set.seed).unwrap_or(0);
    let prior = a.prior.as_deref().map(load_prior).transpose()?;
    let mu = a.mu.or(set.mu).unwrap_or(if prior.is_some() { DEFAULT_MIXED_MU } else { 0.0 });
    let layers = match a.layers.clone().or(set.layers.clone()) {
        Some(l) => parse_layers(&l)?,
        None => LayerCount::Full,
    };
    let map = a.map.or(parse_setting(set.map.clone())?).unwrap_or_default();
    let mode = a.scale_mode.or(parse_setting(set.scale_mode.clone())?).unwrap_or(DEFAULT_SCALE_MODE);
    let tol = a.tol.or(set.tol);
    let cfg = BuildConfig {
        cutoff: a.cutoff.or(set.cutoff).unwrap_or(DEFAULT_CUTOFF),
        max_dim: a.max_dim.or(set.max_dim),
        layers,
        convergence: tol.map(|tol| Convergence { tol, check_every: a.check_every.max(1) }),
        mu,
        ..BuildConfig::default()
    };
    cfg.validate()?;
    let splits = load_splits(&a.data, seed)?;
    let inputs = splits.train.inputs();
    let mut fs = map_inputs(&inputs, map, mode)?;
    let tree = build_tree_parallel(&mut fs, map, &cfg, prior, s.chunk)?;

    let layers_out: Vec<Value> = tree
        .layers()
        .iter()
        .zip(&tree.meta().stats)
        .map(|(l, st)| {
            let errors: Vec<f64> = l.isometries().iter().map(|u| u.truncation_error()).collect();
            json!({
                "out_dims": l.out_dims(),
                "max_dim": l.out_dims().into_iter().max(),
                "max_truncation_error": errors.iter().copied().fold(0.0, f64::max),
                "truncation_errors": errors,
                "fidelity_ratio": (st.log_fidelity_out - st.log_fidelity_in).exp(),
                "samples_per_pair": st.pair_samples.first(),
            })
        })
        .collect();
    let mut c = artifact::tree_container(&tree);
    let config = json!({
        "cutoff": cfg.cutoff, "max_dim": cfg.max_dim, "layers": layers_name(cfg.layers), "mu": mu,
        "map": map.name(), "scale_mode": mode.name(), "tol": tol, "seed": seed,
        "prior": a.prior.as_ref().map(|p| p.display().to_string()),
    });
    c.set_meta("build", config.clone());
    c.save(&a.model_out)?;
    let mut body = serde_json::Map::new();
    body.insert("dataset".into(), dataset_summary(&splits));
    body.insert("top_dims".into(), json!(tree.output_dims()));
    body.insert("layers".into(), json!(layers_out));
    body.insert("max_orthonormality_defect".into(), json!(tree.max_orthonormality_defect()));
    Ok(s.finish("build-tree", config, body))
}

pub fn cmd_lift_linear(s: &Session, a: &LiftLinearArgs) -> Result<Value> {
    let seed = a.data.seed.or(s.settings.seed).unwrap_or(0);
    let ridge = a.ridge.or(s.settings.ridge).unwrap_or(0.0);
    let splits = load_splits(&a.data, seed)?;
    let inputs = splits.train.inputs();
    let labels = splits.train.label_indices();
    let clf = arbor_core::models::train_linear_with(&inputs, &labels, splits.classes, ridge, &s.reducer())?;
    let w = clf.to_mps()?;

    let acc = |set: &ImageSet| -> Result<Value> {
        let xs = set.inputs();
        let scores: Vec<f64> = xs.iter().map(|x| clf.scores(x)).collect::<arbor_core::Result<Vec<_>>>()?.concat();
        let m = arbor_core::models::metrics_from_scores(&scores, &set.label_indices(), splits.classes);
        Ok(metrics_json(&m))
    };
    let train = acc(&splits.train)?;
    let test = splits.test.as_ref().map(acc).transpose()?;

    let mut c = artifact::mps_container(&w, LocalMap::Affine);
    artifact::put_linear(&mut c, &clf);
    let config = json!({ "ridge": ridge, "classes": splits.classes, "seed": seed });
    c.set_meta("training", json!({ "config": config, "train": train, "test": test }));
    c.save(&a.model_out)?;
    let mut body = serde_json::Map::new();
    body.insert("dataset".into(), dataset_summary(&splits));
    body.insert("mps_bond_dims".into(), json!(w.bond_dims()));
    body.insert("train".into(), train);
    body.insert("test".into(), test.unwrap_or(Value::Null));
    Ok(s.finish("lift-linear", config, body))
}

fn datasets(tree: &TreeNetwork, splits: &Splits) -> Result<(Dataset, Option<Dataset>)> {
    check_tree_input(tree, &splits.train)?;
    let train = Dataset::new(features_for(tree, &splits.train)?, splits.train.label_indices(), splits.classes)?;
    let test = match &splits.test {
        Some(t) => Some(Dataset::new(features_for(tree, t)?, t.label_indices(), splits.classes)?),
        None => None,
    };
    Ok((train, test))
}

fn report(s: &Session, head: &dyn Scorer, train: &Dataset, test: Option<&Dataset>) -> Result<(Value, Value)> {
    let r = s.reducer();
    let tr = metrics_json(&evaluate_accuracy(head, train, &r)?);
    let te = match test {
        Some(t) => metrics_json(&evaluate_accuracy(head, t, &r)?),
        None => Value::Null,
    };
    Ok((tr, te))
}

pub fn cmd_train_top(s: &Session, a: &TrainArgs) -> Result<Value> {
    let set = &s.settings;
    let seed = a.data.seed.or(set.seed).unwrap_or(0);
    let tree = load_tree(&a.tree)?;
    if tree.output_dims().len() != 2 {
        return Err(usage(format!("train-top needs a full tree with 2 top sites, this one has {}", tree.output_dims().len())));
    }
    let cfg = TrainConfig {
        max_iterations: a.cg_max.or(set.cg_max).unwrap_or(DEFAULT_TOP_ITERATIONS),
        grad_tol: a.tol.or(set.tol).unwrap_or(DEFAULT_TOL),
        ridge: a.ridge.or(set.ridge).unwrap_or(0.0),
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let splits = load_splits(&a.data, seed)?;
    let (train, test) = datasets(&tree, &splits)?;
    let (fit, dropped) = train.clone().without_truncated()?;
    let top = train_top(&fit, &cfg, &s.reducer())?;
    let (tr, te) = report(s, &top, &train, test.as_ref())?;

    let config = json!({
        "tree": a.tree.display().to_string(), "ridge": cfg.ridge, "max_iterations": cfg.max_iterations,
        "tol": cfg.grad_tol, "classes": splits.classes, "seed": seed,
    });
    let mut c = artifact::top_container(&tree, &top);
    c.set_meta("training", json!({ "config": config, "train": tr, "test": te }));
    c.save(&a.model_out)?;
    let mut body = serde_json::Map::new();
    body.insert("dataset".into(), dataset_summary(&splits));
    body.insert("dropped_truncated".into(), json!(dropped));
    body.insert("top_dims".into(), json!(tree.output_dims()));
    body.insert("bond_profile".into(), json!(tree.bond_profile()));
    body.insert("iterations".into(), json!(top.trace().len() - 1));
    body.insert("final_cost".into(), json!(top.trace().last()));
    body.insert("train".into(), tr);
    body.insert("test".into(), te);
    Ok(s.finish("train-top", config, body))
}

pub fn cmd_train_curtain(s: &Session, a: &TrainArgs) -> Result<Value> {
    let set = &s.settings;
    let seed = a.data.seed.or(set.seed).unwrap_or(0);
    let tree = load_tree(&a.tree)?;
    let cfg = TrainConfig {
        cg_max: a.cg_max.or(set.cg_max).unwrap_or(DEFAULT_LOCAL_CG),
        grad_tol: a.tol.or(set.tol).unwrap_or(DEFAULT_TOL),
        ridge: a.ridge.or(set.ridge).unwrap_or(0.0),
        bond_dim: a.bond_dim.or(set.bond_dim).unwrap_or(DEFAULT_BOND_DIM),
        sweeps: a.sweeps.or(set.sweeps).unwrap_or(DEFAULT_SWEEPS),
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let splits = load_splits(&a.data, seed)?;
    let (train, test) = datasets(&tree, &splits)?;
    let (fit, dropped) = train.clone().without_truncated()?;
    let head = init_top_mps(&tree.output_dims(), cfg.bond_dim, splits.classes, seed)?;
    let model = CurtainModel::new(tree, head)?;
    let (model, rep) = train_curtain(model, &fit, &cfg, &s.reducer())?;
    let (tr, te) = report(s, &model, &train, test.as_ref())?;

    let config = json!({
        "tree": a.tree.display().to_string(), "ridge": cfg.ridge, "cg_max": cfg.cg_max, "tol": cfg.grad_tol,
        "bond_dim": cfg.bond_dim, "sweeps": cfg.sweeps, "classes": splits.classes, "seed": seed,
    });
    let mut c = artifact::curtain_container(&model);
    c.set_meta("training", json!({ "config": config, "train": tr, "test": te }));
    c.save(&a.model_out)?;
    let mut body = serde_json::Map::new();
    body.insert("dataset".into(), dataset_summary(&splits));
    body.insert("dropped_truncated".into(), json!(dropped));
    body.insert("top_site_dims".into(), json!(model.top().site_dims()));
    body.insert("top_bond_dims".into(), json!(model.top().bond_dims()));
    body.insert("sweep_costs".into(), json!(rep.sweep_costs));
    body.insert("train".into(), tr);
    body.insert("test".into(), te);
    Ok(s.finish("train-curtain", config, body))
}

pub fn cmd_evaluate(s: &Session, a: &EvaluateArgs) -> Result<Value> {
    let seed = a.data.seed.or(s.settings.seed).unwrap_or(0);
    let c = Container::load(&a.model)?;
    let model = artifact::load_model(&c)?;
    let mut data = a.data.clone();
    data.synth_test_count = 0;
    let splits = load_splits(&data, seed)?;
    let set = &splits.train;
    let r = s.reducer();
    let m = match &model {
        Model::Top { tree, top } => {
            check_tree_input(tree, set)?;
            let d = Dataset::new(features_for(tree, set)?, set.label_indices(), splits.classes)?;
            evaluate_accuracy(top, &d, &r)?
        }
        Model::Curtain(cm) => {
            check_tree_input(cm.tree(), set)?;
            let d = Dataset::new(features_for(cm.tree(), set)?, set.label_indices(), splits.classes)?;
            evaluate_accuracy(cm, &d, &r)?
        }
        Model::Mps { mps, map } => {
            let fs = map_inputs(&set.inputs(), *map, ScaleMode::UnitLocal)?;
            let d = Dataset::new(fs, set.label_indices(), splits.classes)?;
            evaluate_accuracy(mps, &d, &r)?
        }
    };
    let config = json!({ "model": a.model.display().to_string(), "split": a.split, "classes": splits.classes });
    let mut body = serde_json::Map::new();
    body.insert("kind".into(), json!(c.kind()));
    body.insert("dataset".into(), dataset_summary(&splits));
    body.insert(a.split.clone(), metrics_json(&m));
    Ok(s.finish("evaluate", config, body))
}

/// Human-readable description of a model file.
pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    use std::fmt::Write;
    if a.header_only {
        let h = container::inspect(&a.model)?;
        return Ok(serde_json::to_string_pretty(&h).expect("header serializes"));
    }
    let c = Container::load(&a.model)?;
    let mut out = String::new();
    let _ = writeln!(out, "kind: {}", c.kind());
    let _ = writeln!(out, "created by: {}", c.header.created_by);
    let _ = writeln!(out, "arrays: {}", c.header.arrays.len());
    if matches!(c.kind(), artifact::KIND_TREE | artifact::KIND_TOP | artifact::KIND_CURTAIN) {
        let tree = artifact::get_tree(&c)?;
        let m = tree.meta();
        let _ = writeln!(
            out,
            "tree: {} inputs, {} layers, cutoff {:e}, max dim {}, mu {}, map {}, scale mode {}",
            tree.input_dims().len(),
            tree.layers().len(),
            m.cutoff,
            m.max_dim.map_or("unlimited".to_string(), |d| d.to_string()),
            m.mu,
            m.map.name(),
            m.scale_mode.name()
        );
        for (l, layer) in tree.layers().iter().enumerate() {
            let errs: Vec<f64> = layer.isometries().iter().map(|u| u.truncation_error()).collect();
            let worst = errs.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(
                out,
                "  layer {}: {} -> {} sites, max dim {}, max truncation error {:.3e}{}",
                l + 1,
                layer.in_site_count(),
                layer.out_site_count(),
                layer.out_dims().into_iter().max().unwrap_or(0),
                worst,
                if layer.passthrough() { ", last site passed through" } else { "" }
            );
            if let Some(u) = layer.isometries().iter().max_by_key(|u| u.out_dim()) {
                let head: Vec<String> = u.spectrum().iter().take(6).map(|p| format!("{p:.3e}")).collect();
                let _ = writeln!(out, "    widest spectrum: [{}{}]", head.join(", "), if u.spectrum().len() > 6 { ", ..." } else { "" });
            }
        }
        let _ = writeln!(out, "top dims: {:?}", tree.output_dims());
    }
    match artifact::load_model(&c) {
        Ok(Model::Top { top, .. }) => {
            let _ = writeln!(out, "top tensor: {:?}, {} optimizer steps", top.weights().shape(), top.trace().len().saturating_sub(1));
        }
        Ok(Model::Curtain(cm)) => {
            let _ = writeln!(out, "mps head: sites {:?}, bonds {:?}, labels {}", cm.top().site_dims(), cm.top().bond_dims(), cm.top().output_dim());
        }
        Ok(Model::Mps { mps, map }) => {
            let _ = writeln!(out, "mps: {} sites, bonds up to {}, labels {}, map {}", mps.site_count(), mps.bond_dims().into_iter().max().unwrap_or(1), mps.output_dim(), map.name());
        }
        Err(_) => {}
    }
    if let Some(t) = c.meta().get("training").or_else(|| c.meta().get("build")) {
        let _ = writeln!(out, "settings: {}", t.get("config").unwrap_or(t));
    }
    Ok(out)
}

fn write_metrics(doc: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).expect("metrics serialize") + "\n";
    match path {
        Some(p) => {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
            std::io::Write::write_all(&mut tmp, text.as_bytes()).map_err(|e| Error::io(p, e))?;
            tmp.persist(p).map_err(|e| Error::io(p, e.error))?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be positive"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    if cli.chunk == 0 {
        return Err(usage("--chunk must be positive"));
    }
    let session = Session {
        deterministic: cli.deterministic,
        chunk: cli.chunk,
        settings: load_settings(cli.config.as_deref())?,
        started: Instant::now(),
    };
    let doc = match &cli.command {
        Command::BuildTree(a) => cmd_build_tree(&session, a)?,
        Command::LiftLinear(a) => cmd_lift_linear(&session, a)?,
        Command::TrainTop(a) => cmd_train_top(&session, a)?,
        Command::TrainCurtain(a) => cmd_train_curtain(&session, a)?,
        Command::Evaluate(a) => cmd_evaluate(&session, a)?,
        Command::Inspect(a) => {
            print!("{}", cmd_inspect(a)?);
            return Ok(());
        }
    };
    write_metrics(&doc, cli.metrics_out.as_deref())
}
