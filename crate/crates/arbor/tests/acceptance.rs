//! Acceptance suite: one line per criterion.
//!
//! Runs without the libtest harness so every line is printed. Criteria that
//! need datasets absent from the data directory report `NOT RUN`. The
//! multi-hour MNIST runs also need `ARBOR_DESK=1`, and the Fashion-MNIST
//! curtain run needs `ARBOR_STRETCH=1`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use arbor::data::{read_idx, synth_dataset, ImageSet, SynthKind};
use arbor::parallel::{build_tree_parallel, coarse_features_parallel, map_inputs, RayonReducer};
use arbor_core::linalg::symmetric_eigen;
use arbor_core::models::{
    evaluate_accuracy, init_top_mps, quadratic_cost, train_curtain, train_linear_with, train_top, CurtainModel,
    Dataset, TopTensor, TrainConfig,
};
use arbor_core::mps::{coarsen, evaluate, lift_linear, lift_linear_classes};
use arbor_core::tree::{LayerCount, PairCovariance};
use arbor_core::{map_input, BuildConfig, DenseTensor, LocalMap, Mps, ProductFeature, ScaleMode, TreeNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ISOMETRY_TOL: f64 = 1e-10;
const KERNEL_TOL: f64 = 1e-8;
const KERNEL_BUDGET: Duration = Duration::from_secs(1);
const LIFT_TOL: f64 = 1e-12;
const LIFT_BUDGET: Duration = Duration::from_secs(5);
const GRADIENT_TOL: f64 = 1e-6;
const FIDELITY_TOL: f64 = 1e-10;
const ALS_TOL: f64 = 1e-10;
const REPRODUCTION_TOL: f64 = 1e-8;
const PARITY_LINEAR_MAX: f64 = 0.75;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

use Outcome::{Fail, NotRun, Pass};

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_inputs(r: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..n).map(|_| r.random_range(0.0..1.0)).collect()).collect()
}

fn features(xs: &[Vec<f64>], mode: ScaleMode) -> Vec<ProductFeature> {
    map_inputs(xs, LocalMap::Affine, mode).unwrap()
}

fn build(fs: &mut [ProductFeature], cfg: &BuildConfig, prior: Option<Mps>) -> TreeNetwork {
    build_tree_parallel(fs, LocalMap::Affine, cfg, prior, 64).unwrap()
}

fn cfg(cutoff: f64) -> BuildConfig {
    BuildConfig { cutoff, ..BuildConfig::default() }
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn isometry_constraint() -> Outcome {
    let mut worst = 0.0f64;
    let mut trees = 0;
    let mut r = rng(1);
    for cutoff in [0.0, 1e-6, 1e-3, 1e-1] {
        for (count, n) in [(30, 16), (12, 9), (50, 32)] {
            let mut fs = features(&random_inputs(&mut r, count, n), ScaleMode::Normalized);
            worst = worst.max(build(&mut fs, &cfg(cutoff), None).max_orthonormality_defect());
            trees += 1;
        }
    }
    for kind in [SynthKind::TwoGaussianStripes, SynthKind::ParityPatterns] {
        let set = synth_dataset(kind, 128, 3).unwrap();
        let mut fs = features(&set.inputs(), ScaleMode::Normalized);
        worst = worst.max(build(&mut fs, &cfg(0.0), None).max_orthonormality_defect());
        trees += 1;
    }
    let prior = lift_linear_classes(&[vec![0.3; 16], vec![-0.2; 16]], &[0.1, 0.4], LocalMap::Affine).unwrap();
    for mu in [0.5, 0.9, 1.0] {
        let mut fs = features(&random_inputs(&mut r, 40, 16), ScaleMode::Normalized);
        let c = BuildConfig { mu, ..cfg(1e-4) };
        worst = worst.max(build(&mut fs, &c, Some(prior.clone())).max_orthonormality_defect());
        trees += 1;
    }
    check(worst <= ISOMETRY_TOL, format!("{trees} trees, max |UᵀU − I| = {worst:.2e} (tol {ISOMETRY_TOL:e})"))
}

fn kernel_spectrum_oracle() -> Outcome {
    let start = Instant::now();
    let xs = random_inputs(&mut rng(2), 5, 4);
    let original = features(&xs, ScaleMode::Raw);
    let mut fs = original.clone();
    let tree = build(&mut fs, &cfg(0.0), None);
    let mut top = PairCovariance::new(fs[0].site_dim(0), fs[0].site_dim(1));
    for f in &fs {
        top.accumulate(f, 0).unwrap();
    }
    let (rho, _) = symmetric_eigen(&top.absolute_matrix_2d()).unwrap();

    let dense: Vec<DenseTensor> =
        original.iter().map(|f| arbor_core::feature_map::dense_feature(f, 1 << 10).unwrap()).collect();
    let mut k = DenseTensor::zeros(vec![5, 5]);
    for i in 0..5 {
        for j in 0..5 {
            k.set(&[i, j], dense[i].dot(&dense[j]).unwrap()).unwrap();
        }
    }
    let (gram, _) = symmetric_eigen(&k).unwrap();
    let elapsed = start.elapsed();
    let (rho, gram) = (sorted_desc(rho), sorted_desc(gram));
    let mut err = rho[5..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..5 {
        err = err.max((rho[i] - gram[i]).abs());
    }
    check(
        err <= KERNEL_TOL && elapsed < KERNEL_BUDGET && tree.layers().len() == 1,
        format!("max eigenvalue error {err:.2e} (tol {KERNEL_TOL:e}), {:.1} ms (budget 1 s)", elapsed.as_secs_f64() * 1e3),
    )
}

fn lift_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut err = 0.0f64;
    for n in [1, 2, 8, 784] {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = r.random_range(-1.0..1.0);
        let w = lift_linear(&v, b, LocalMap::Affine).unwrap();
        for x in random_inputs(&mut r, 100, n) {
            let want: f64 = v.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
            for mode in [ScaleMode::Raw, ScaleMode::UnitLocal] {
                let got = evaluate(&w, &map_input(&x, LocalMap::Affine, mode).unwrap()).unwrap()[0];
                err = err.max((got - want).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        err <= LIFT_TOL && elapsed < LIFT_BUDGET,
        format!("N ∈ {{1, 2, 8, 784}}, max |W·Φ − (V·x + b)| = {err:.2e} (tol {LIFT_TOL:e}), {:.2} s (budget 5 s)", elapsed.as_secs_f64()),
    )
}

fn gradient_check() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (l, t1, t2) = (1 + case % 3, 1 + case % 4, 2 + case % 3);
        let n = 3 + case % 5;
        let feats = (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..t1).map(|_| r.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..t2).map(|_| r.random_range(-1.0..1.0)).collect();
                ProductFeature::from_sites(&[a, b], 0.0, ScaleMode::Raw).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| r.random_range(0..l)).collect();
        let data = Dataset::new(feats, labels, l).unwrap();
        let lambda = if case % 2 == 0 { 0.0 } else { 0.3 };
        let w0: Vec<f64> = (0..l * t1 * t2).map(|_| r.random_range(-1.0..1.0)).collect();
        let top = |w: Vec<f64>| TopTensor::new(DenseTensor::new(vec![l, t1, t2], w).unwrap()).unwrap();
        let (_, g) = quadratic_cost(&top(w0.clone()), &data, lambda).unwrap();
        let h = 1e-5;
        let mut diff = 0.0;
        for i in 0..w0.len() {
            let mut plus = w0.clone();
            plus[i] += h;
            let mut minus = w0.clone();
            minus[i] -= h;
            let fd = (quadratic_cost(&top(plus), &data, lambda).unwrap().0
                - quadratic_cost(&top(minus), &data, lambda).unwrap().0)
                / (2.0 * h);
            diff += (g.data()[i] - fd).powi(2);
        }
        worst = worst.max(diff.sqrt() / g.frobenius_norm().max(1e-12));
    }
    check(worst < GRADIENT_TOL, format!("20 instances, max relative error {worst:.2e} (tol {GRADIENT_TOL:e})"))
}

fn fidelity_monotonicity() -> Outcome {
    let mut r = rng(5);
    let mut worst_gain = f64::NEG_INFINITY;
    let mut exact_err = 0.0f64;
    let mut layers = 0;
    for cutoff in [0.0, 1e-4, 1e-2, 1e-1] {
        for mode in [ScaleMode::Raw, ScaleMode::UnitLocal, ScaleMode::Normalized] {
            let mut fs = features(&random_inputs(&mut r, 40, 16), mode);
            let tree = build(&mut fs, &cfg(cutoff), None);
            for s in &tree.meta().stats {
                // ratio of out to in fidelity
                let ratio = (s.log_fidelity_out - s.log_fidelity_in).exp();
                worst_gain = worst_gain.max(ratio - 1.0);
                if cutoff == 0.0 {
                    exact_err = exact_err.max((ratio - 1.0).abs());
                }
                layers += 1;
            }
        }
    }
    check(
        worst_gain <= FIDELITY_TOL && exact_err <= FIDELITY_TOL,
        format!("{layers} layers, max F_out/F_in − 1 = {worst_gain:.2e}, ε=0 deviation {exact_err:.2e} (tol {FIDELITY_TOL:e})"),
    )
}

fn als_monotonicity() -> Outcome {
    let set = synth_dataset(SynthKind::TwoGaussianStripes, 120, 6).unwrap();
    let mut fs = features(&set.inputs(), ScaleMode::Normalized);
    let tree = build(&mut fs, &BuildConfig { layers: LayerCount::Count(1), ..cfg(1e-3) }, None);
    let data = Dataset::new(fs, set.label_indices(), 2).unwrap();
    let mut worst = f64::NEG_INFINITY;
    let mut solves = 0;
    for (bond, ridge) in [(2, 0.0), (4, 1e-3), (8, 0.0)] {
        let head = init_top_mps(&tree.output_dims(), bond, 2, 7).unwrap();
        let model = CurtainModel::new(tree.clone(), head).unwrap();
        let c = TrainConfig { sweeps: 3, cg_max: 20, bond_dim: bond, ridge, ..TrainConfig::default() };
        let (_, rep) = train_curtain(model, &data, &c, &RayonReducer { chunk: 32 }).unwrap();
        for w in rep.local_costs.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
        solves += rep.local_costs.len() - 1;
    }
    check(worst <= ALS_TOL, format!("{solves} local solves, max cost increase {worst:.2e} (tol {ALS_TOL:e})"))
}

fn full_mixing_reproduction() -> Outcome {
    let mut r = rng(8);
    let n = 8;
    let weights: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let biases: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    let prior = lift_linear_classes(&weights, &biases, LocalMap::Affine).unwrap();
    let mut fs = features(&random_inputs(&mut r, 20, n), ScaleMode::UnitLocal);
    let c = BuildConfig { mu: 1.0, ..cfg(1e-12) };
    let tree = build(&mut fs, &c, Some(prior.clone()));
    let mut coarse = prior.clone();
    for layer in tree.layers() {
        coarse = coarsen(&coarse, layer).unwrap();
    }
    let mut err = 0.0f64;
    for x in random_inputs(&mut r, 20, n) {
        let f = map_input(&x, LocalMap::Affine, ScaleMode::UnitLocal).unwrap();
        let want = evaluate(&prior, &f).unwrap();
        let got = evaluate(&coarse, &tree.apply(&f).unwrap()).unwrap();
        for (a, b) in got.iter().zip(&want) {
            err = err.max((a - b).abs());
        }
    }
    check(
        err <= REPRODUCTION_TOL,
        format!("{} layers, top dims {:?}, max output error {err:.2e} (tol {REPRODUCTION_TOL:e})", tree.layers().len(), tree.output_dims()),
    )
}

fn parity_separation() -> Outcome {
    let set = synth_dataset(SynthKind::ParityPatterns, 256, 9).unwrap();
    let reducer = RayonReducer { chunk: 64 };
    let inputs = set.inputs();
    let labels = set.label_indices();
    let clf = train_linear_with(&inputs, &labels, 2, 0.0, &reducer).unwrap();
    let correct = inputs
        .iter()
        .zip(&labels)
        .filter(|(x, &y)| {
            let s = clf.scores(x).unwrap();
            usize::from(s[1] > s[0]) == y
        })
        .count();
    let linear = correct as f64 / inputs.len() as f64;

    let mut fs = features(&inputs, ScaleMode::Normalized);
    build(&mut fs, &cfg(0.0), None);
    let data = Dataset::new(fs, labels, 2).unwrap();
    let top = train_top(&data, &TrainConfig { grad_tol: 1e-10, ..TrainConfig::default() }, &reducer).unwrap();
    let tree_acc = evaluate_accuracy(&top, &data, &reducer).unwrap().accuracy;
    check(
        linear <= PARITY_LINEAR_MAX && tree_acc == 1.0,
        format!("linear {:.1}% (max 75%), ε=0 tree + top tensor {:.1}% (need 100%)", linear * 100.0, tree_acc * 100.0),
    )
}

fn data_dir() -> PathBuf {
    std::env::var_os("ARBOR_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// Train and test splits of an IDX dataset under the data directory.
fn idx_splits(name: &str) -> Result<(ImageSet, ImageSet), String> {
    let dir = data_dir().join(name);
    let path = |f: &str| dir.join(f);
    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    if let Some(missing) = files.iter().find(|f| !path(f).is_file()) {
        return Err(format!("{} not found", path(missing).display()));
    }
    let train = read_idx(&path(files[0]), &path(files[1])).map_err(|e| e.to_string())?;
    let test = read_idx(&path(files[2]), &path(files[3])).map_err(|e| e.to_string())?;
    Ok((train, test))
}

fn opted_in(var: &str) -> bool {
    std::env::var(var).is_ok_and(|v| v == "1")
}

struct FullTreeRun {
    top_dims: Vec<usize>,
    train_acc: f64,
    test_acc: f64,
    seconds: f64,
}

fn full_tree_run(train: &ImageSet, test: &ImageSet, cutoff: f64, prior: Option<(Mps, f64)>) -> FullTreeRun {
    let start = Instant::now();
    let reducer = RayonReducer::default();
    let (prior, mu) = prior.map_or((None, 0.0), |(p, mu)| (Some(p), mu));
    let mut fs = features(&train.inputs(), ScaleMode::Normalized);
    let c = BuildConfig { mu, ..cfg(cutoff) };
    let tree = build_tree_parallel(&mut fs, LocalMap::Affine, &c, prior, 256).unwrap();
    let classes = train.class_count();
    let (fit, _) = Dataset::new(fs, train.label_indices(), classes).unwrap().without_truncated().unwrap();
    let t = TrainConfig { max_iterations: 5000, grad_tol: 1e-8, ..TrainConfig::default() };
    let top = train_top(&fit, &t, &reducer).unwrap();
    let test_fs = coarse_features_parallel(&tree, &features(&test.inputs(), ScaleMode::Normalized)).unwrap();
    let test_data = Dataset::new(test_fs, test.label_indices(), classes).unwrap();
    FullTreeRun {
        top_dims: tree.output_dims(),
        train_acc: evaluate_accuracy(&top, &fit, &reducer).unwrap().accuracy,
        test_acc: evaluate_accuracy(&top, &test_data, &reducer).unwrap().accuracy,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn linear_prior(train: &ImageSet) -> Mps {
    let reducer = RayonReducer::default();
    let clf = train_linear_with(&train.inputs(), &train.label_indices(), train.class_count(), 0.0, &reducer).unwrap();
    clf.to_mps().unwrap()
}

fn mnist() -> Result<(ImageSet, ImageSet), String> {
    let splits = idx_splits("mnist")?;
    if !opted_in("ARBOR_DESK") {
        return Err("multi-hour run; set ARBOR_DESK=1".into());
    }
    Ok(splits)
}

fn mnist_1e3() -> Outcome {
    let (train, test) = match mnist() {
        Ok(s) => s,
        Err(why) => return NotRun(why),
    };
    let run = full_tree_run(&train, &test, 1e-3, None);
    let near = |got: usize, want: f64| (got as f64 - want).abs() <= 0.5 * want;
    let dims_ok = run.top_dims.len() == 2 && near(run.top_dims[0], 107.0) && near(run.top_dims[1], 151.0);
    check(
        run.test_acc >= 0.965 && dims_ok && run.seconds < 7200.0,
        format!("test {:.2}% (min 96.5%), top dims {:?} (107, 151 ± 50%), {:.0} s (budget 7200 s)", run.test_acc * 100.0, run.top_dims, run.seconds),
    )
}

fn mnist_6e4(cache: &mut Option<FullTreeRun>) -> Outcome {
    let (train, test) = match mnist() {
        Ok(s) => s,
        Err(why) => return NotRun(why),
    };
    let run = cache.insert(full_tree_run(&train, &test, 6e-4, None));
    check(
        run.test_acc >= 0.973 && run.train_acc >= 0.99,
        format!("test {:.2}% (min 97.3%), train {:.2}% (min 99.0%), top dims {:?}", run.test_acc * 100.0, run.train_acc * 100.0, run.top_dims),
    )
}

fn mnist_mixed(cache: &mut Option<FullTreeRun>) -> Outcome {
    let (train, test) = match mnist() {
        Ok(s) => s,
        Err(why) => return NotRun(why),
    };
    let base = cache.get_or_insert_with(|| full_tree_run(&train, &test, 6e-4, None));
    let prior = linear_prior(&train);
    let mixed = full_tree_run(&train, &test, 4e-4, Some((prior, 0.5)));
    let smaller = mixed.top_dims.iter().zip(&base.top_dims).all(|(m, b)| m < b);
    check(
        smaller && mixed.test_acc >= base.test_acc - 0.003,
        format!(
            "mixed dims {:?} vs {:?}, test {:.2}% vs {:.2}% (max drop 0.3 points)",
            mixed.top_dims,
            base.top_dims,
            mixed.test_acc * 100.0,
            base.test_acc * 100.0
        ),
    )
}

fn fashion_linear() -> Outcome {
    let (train, test) = match idx_splits("fashion-mnist") {
        Ok(s) => s,
        Err(why) => return NotRun(why),
    };
    let reducer = RayonReducer::default();
    let clf = train_linear_with(&train.inputs(), &train.label_indices(), 10, 0.0, &reducer).unwrap();
    let w = clf.to_mps().unwrap();
    let fs = map_inputs(&test.inputs(), LocalMap::Affine, ScaleMode::UnitLocal).unwrap();
    let data = Dataset::new(fs, test.label_indices(), 10).unwrap();
    let acc = evaluate_accuracy(&w, &data, &reducer).unwrap().accuracy;
    check((acc - 0.83).abs() <= 0.015, format!("lifted linear classifier test {:.2}% (83% ± 1.5)", acc * 100.0))
}

fn fashion_curtain() -> Outcome {
    let (train, test) = match idx_splits("fashion-mnist") {
        Ok(s) => s,
        Err(why) => return NotRun(why),
    };
    if !opted_in("ARBOR_STRETCH") {
        return NotRun("beyond desk budget; set ARBOR_STRETCH=1".into());
    }
    let start = Instant::now();
    let reducer = RayonReducer::default();
    let prior = linear_prior(&train);
    let mut fs = features(&train.inputs(), ScaleMode::Normalized);
    let c = BuildConfig { mu: 0.9, layers: LayerCount::Count(4), ..cfg(2e-9) };
    let tree = build_tree_parallel(&mut fs, LocalMap::Affine, &c, Some(prior), 256).unwrap();
    let (fit, _) = Dataset::new(fs, train.label_indices(), 10).unwrap().without_truncated().unwrap();
    let head = init_top_mps(&tree.output_dims(), 300, 10, 0).unwrap();
    let model = CurtainModel::new(tree.clone(), head).unwrap();
    let t = TrainConfig { bond_dim: 300, sweeps: 30, ..TrainConfig::default() };
    let (model, _) = train_curtain(model, &fit, &t, &reducer).unwrap();
    let test_fs = coarse_features_parallel(&tree, &features(&test.inputs(), ScaleMode::Normalized)).unwrap();
    let acc = evaluate_accuracy(&model, &Dataset::new(test_fs, test.label_indices(), 10).unwrap(), &reducer).unwrap().accuracy;
    check(acc >= 0.875, format!("test {:.2}% (min 87.5%), {:.0} s", acc * 100.0, start.elapsed().as_secs_f64()))
}

fn main() -> ExitCode {
    // libtest-style flags from `cargo test` are ignored
    let mut mnist_cache = None;
    let mut lines: Vec<(&str, bool, Outcome)> = Vec::new();
    let mut run = |name: &'static str, gating: bool, f: &mut dyn FnMut() -> Outcome| {
        let outcome = f();
        let (tag, detail) = match &outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            NotRun(d) => ("NOT RUN", d),
        };
        let suffix = if gating { "" } else { " [not gating]" };
        println!("{tag:<8} {name}{suffix}: {detail}");
        lines.push((name, gating, outcome));
    };
    run("isometry constraint", true, &mut isometry_constraint);
    run("kernel-spectrum oracle", true, &mut kernel_spectrum_oracle);
    run("linear lift exactness", true, &mut lift_exactness);
    run("gradient check", true, &mut gradient_check);
    run("fidelity monotonicity", true, &mut fidelity_monotonicity);
    run("ALS monotonicity", true, &mut als_monotonicity);
    run("full-mixing reproduction", true, &mut full_mixing_reproduction);
    run("parity separation", true, &mut parity_separation);
    run("MNIST full tree, cutoff 1e-3", true, &mut mnist_1e3);
    run("MNIST full tree, cutoff 6e-4", true, &mut || mnist_6e4(&mut mnist_cache));
    run("MNIST mixed build, mu 0.5, cutoff 4e-4", true, &mut || mnist_mixed(&mut mnist_cache));
    run("Fashion-MNIST linear baseline", true, &mut fashion_linear);
    run("Fashion-MNIST tree curtain", false, &mut fashion_curtain);

    let failed = lines.iter().filter(|(_, gating, o)| *gating && matches!(o, Fail(_))).count();
    let passed = lines.iter().filter(|(_, _, o)| matches!(o, Pass(_))).count();
    let not_run = lines.iter().filter(|(_, _, o)| matches!(o, NotRun(_))).count();
    println!("acceptance: {passed} passed, {failed} failed, {not_run} not run");
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
