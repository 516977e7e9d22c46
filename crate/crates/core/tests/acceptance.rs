//! Acceptance criteria, one PASS/FAIL line each. Pass criterion numbers or
//! name fragments as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ddslab::config::preset;
use ddslab::editor::{edit, edit_dds, EditMethod, EditTask, Monitor};
use ddslab::eval::experiments::run_experiment;
use ddslab::image::{Batch, Image};
use ddslab::pipeline::{gen_data, train_denoiser_stage};
use ddslab::rng;
use ddslab::scores::{dds_grad_batch, sds_grad_batch};
use ddslab::synthdata::{support_of, Background, Caption, Shape, ShapeColor};
use ddslab::translator::{cfg_warmup, dds_generator_grad, id_weight, Generator, LinearGenerator};
use rand::Rng;

use common::{denoiser, fixture, heldout, root};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

type Criterion = fn() -> Outcome;

const CRITERIA: [(&str, Criterion); 12] = [
    ("dds-identity", dds_identity),
    ("self-annihilation", self_annihilation),
    ("matched-pair-bias", matched_pair_bias),
    ("bias-correlation", bias_correlation),
    ("editing-superiority", editing_superiority),
    ("cfg-tradeoff", cfg_tradeoff),
    ("regularized-sds-sweep", regularized_sds_sweep),
    ("optimizer-ablation", optimizer_ablation),
    ("scheduler-exactness", scheduler_exactness),
    ("i2i-ablations", i2i_ablations),
    ("generator-gradient", generator_gradient),
    ("determinism", determinism),
];

fn random_caption(r: &mut rng::Rng) -> Caption {
    let mut pick = |n: usize| if r.gen_bool(0.8) { Some(r.gen_range(0..n)) } else { None };
    Caption {
        shape: pick(Shape::COUNT).and_then(Shape::from_index),
        shape_color: pick(ShapeColor::COUNT).and_then(ShapeColor::from_index),
        background: pick(Background::COUNT).and_then(Background::from_index),
    }
}

/// Random held-out image, perturbed so tuples also leave the data manifold.
fn random_image(r: &mut rng::Rng) -> Image {
    let held = heldout();
    let base = &held.items[r.gen_range(0..held.len())].0;
    let scale = r.gen_range(0.0..0.5f32);
    let noise = rng::normal_vec(r, base.data().len());
    Image::from_vec(base.dims(), base.data().iter().zip(noise).map(|(&v, n)| v + scale * n).collect()).unwrap()
}

struct Tuples {
    z: Batch,
    y: Vec<Caption>,
    zhat: Batch,
    yhat: Vec<Caption>,
    eps: Batch,
    t: Vec<f32>,
    omega: f64,
}

fn tuples(r: &mut rng::Rng, n: usize) -> Tuples {
    let dims = denoiser().config().canvas;
    let z: Vec<Image> = (0..n).map(|_| random_image(r)).collect();
    let zhat: Vec<Image> = (0..n).map(|_| random_image(r)).collect();
    Tuples {
        z: Batch::from_images(&z).unwrap(),
        y: (0..n).map(|_| random_caption(r)).collect(),
        zhat: Batch::from_images(&zhat).unwrap(),
        yhat: (0..n).map(|_| random_caption(r)).collect(),
        eps: Batch::from_vec(dims, n, rng::normal_vec(r, n * dims.len())).unwrap(),
        t: (0..n).map(|_| r.gen_range(0.02..0.98f32)).collect(),
        omega: r.gen_range(0.0..20.0),
    }
}

const TUPLES: usize = 1000;
const GROUP: usize = 20;

fn dds_identity() -> Outcome {
    let den = denoiser();
    let start = Instant::now();
    let mut r = rng::rng(101);
    let mut worst = 0.0f64;
    for _ in 0..TUPLES / GROUP {
        let q = tuples(&mut r, GROUP);
        let dds = dds_grad_batch(den, &q.z, &q.y, &q.zhat, &q.yhat, &q.eps, &q.t, q.omega).unwrap().0;
        let a = sds_grad_batch(den, &q.z, &q.y, &q.eps, &q.t, q.omega).unwrap().0;
        let b = sds_grad_batch(den, &q.zhat, &q.yhat, &q.eps, &q.t, q.omega).unwrap().0;
        for ((&d, &x), &y) in dds.data().iter().zip(a.data()).zip(b.data()) {
            worst = worst.max((f64::from(d) - (f64::from(x) - f64::from(y))).abs());
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-5 && elapsed < Duration::from_secs(120),
        format!("max |dds - (sds - sds)| = {worst:.3e} over {TUPLES} tuples in {elapsed:.1?}"),
    )
}

fn self_annihilation() -> Outcome {
    let den = denoiser();
    let mut r = rng::rng(202);
    let mut nonzero = 0usize;
    for _ in 0..TUPLES / GROUP {
        let q = tuples(&mut r, GROUP);
        let g = dds_grad_batch(den, &q.z, &q.y, &q.z, &q.y, &q.eps, &q.t, q.omega).unwrap().0;
        nonzero += g.data().iter().filter(|&&v| v != 0.0).count();
    }
    let (img, spec) = &heldout().items[0];
    let task = EditTask::new(img.clone(), Some(spec.caption()), spec.caption(), 7).with_settings(fixture().edit);
    let res = edit_dds(den, &task, Monitor::default()).unwrap();
    let bitwise = res.z_final == *img;
    Outcome::new(
        nonzero == 0 && bitwise && task.settings.iters == 200,
        format!("{nonzero} nonzero entries over {TUPLES} tuples; {}-iteration no-op edit bitwise identical: {bitwise}", task.settings.iters),
    )
}

fn experiment(name: &str, budget: Option<Duration>) -> Outcome {
    let cfg = fixture();
    let dir = root().join("runs").join(name);
    let report = match run_experiment(name, cfg, &dir) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("{name} errored: {e}")),
    };
    let mut detail: Vec<String> = report.checks.iter().map(|c| format!("[{}] {}: {}", if c.passed { "ok" } else { "x" }, c.name, c.detail)).collect();
    let mut passed = report.passed();
    if let Some(b) = budget {
        let within = report.wall_clock_secs <= b.as_secs_f64();
        passed &= within;
        detail.push(format!("runtime {:.0}s (budget {}s)", report.wall_clock_secs, b.as_secs()));
    }
    Outcome::new(passed, detail.join("; "))
}

fn matched_pair_bias() -> Outcome {
    experiment("sds-norm-curve", Some(Duration::from_secs(30 * 60)))
}

fn bias_correlation() -> Outcome {
    experiment("grad-cosine", None)
}

fn editing_superiority() -> Outcome {
    experiment("edit-compare", None)
}

fn cfg_tradeoff() -> Outcome {
    experiment("cfg-sweep", None)
}

fn regularized_sds_sweep() -> Outcome {
    experiment("sds-reg-sweep", None)
}

fn optimizer_ablation() -> Outcome {
    experiment("optimizer-ablation", None)
}

fn scheduler_exactness() -> Outcome {
    let cfg = &fixture().i2i.train;
    let (w, c) = (cfg.omega_warmup_iters, cfg.lambda_cool_iters);
    let checks = [
        ("cfg_warmup(0)", cfg_warmup(0, cfg), 1.0),
        ("cfg_warmup(end)", cfg_warmup(w, cfg), 25.0),
        ("cfg_warmup(mid)", cfg_warmup(w / 2, cfg), 13.0),
        ("id_weight(0)", id_weight(0, cfg), 3.0),
        ("id_weight(end)", id_weight(c, cfg), 0.1),
        ("id_weight(mid)", id_weight(c / 2, cfg), 1.55),
    ];
    let bad: Vec<String> =
        checks.iter().filter(|(_, got, want)| (got - want).abs() >= 1e-9).map(|(n, got, want)| format!("{n} = {got} (want {want})")).collect();
    let even = w % 2 == 0 && c % 2 == 0;
    Outcome::new(bad.is_empty() && even, if bad.is_empty() { format!("6 values exact to 1e-9 (warmup {w}, cool-down {c})") } else { bad.join(", ") })
}

fn i2i_ablations() -> Outcome {
    let a = experiment("i2i-ablation", None);
    let b = experiment("i2i-compare", None);
    Outcome::new(a.passed && b.passed, format!("(a) {}; (b) {}", a.detail, b.detail))
}

fn generator_gradient() -> Outcome {
    let den = denoiser();
    let dims = den.config().canvas;
    let mut r = rng::rng(303);
    let (img, spec) = &heldout().items[1];
    let theta = Image::from_vec(dims, rng::normal_vec(&mut r, dims.len()).into_iter().map(|v| 1.0 + 0.1 * v).collect()).unwrap();
    let eps = Image::from_vec(dims, rng::normal_vec(&mut r, dims.len())).unwrap();
    let target = spec.with_color(ShapeColor::ALL[(spec.shape_color.index() + 1) % ShapeColor::COUNT]).caption();
    let gen = LinearGenerator { theta: theta.clone() };
    let (grad, pixel) = dds_generator_grad(den, &gen, img, &target, &spec.caption(), &eps, 0.5, 7.5).unwrap();
    // surrogate ⟨sg(score), g_θ(ẑ)⟩ evaluated through the generator's own forward pass
    let surrogate = |th: &[f32]| -> f64 {
        let g = LinearGenerator { theta: Image::from_vec(dims, th.to_vec()).unwrap() }.forward(img);
        g.data().iter().zip(pixel.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    };
    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let v = rng::normal_vec(&mut r, dims.len());
        let plus: Vec<f32> = theta.data().iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f32> = theta.data().iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let dplus: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| f64::from(p - m)).collect();
        let fd = surrogate(&plus) - surrogate(&minus);
        let an: f64 = grad.iter().zip(&dplus).map(|(g, d)| g * d).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
    }
    Outcome::new(worst < 1e-3, format!("max relative error {worst:.3e} over 100 probes"))
}

fn micro_pipeline(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut cfg = preset("tiny").unwrap().rooted(dir).with_seed(11);
    cfg.data.train_size = 64;
    cfg.data.heldout_size = 24;
    cfg.denoiser.train.steps = 30;
    cfg.denoiser.train.batch_size = 8;
    cfg.denoiser.validation_pairs = 8;
    cfg.experiments.norm_pairs = 6;
    cfg.experiments.norm_draws = 3;
    cfg.experiments.sweep_tasks = 3;
    cfg.experiments.cosine_quads = 4;
    cfg.experiments.cosine_draws = 2;
    cfg.edit.iters = 20;
    let (_, held) = gen_data(&cfg).unwrap();
    let (den, _) = train_denoiser_stage(&cfg).unwrap();
    let (img, spec) = &held.items[0];
    let target = spec.with_color(ShapeColor::ALL[(spec.shape_color.index() + 1) % ShapeColor::COUNT]);
    let mask = support_of(spec, held.canvas).unwrap();
    let task = EditTask::new(img.clone(), Some(spec.caption()), target.caption(), cfg.stream("edit")).with_settings(cfg.edit);
    let res = edit(&den, &task, EditMethod::Dds, Monitor { classifier: None, mask: Some(&mask) }).unwrap();
    res.export(img, &dir.join("edit")).unwrap();
    for name in ["sds-norm-curve", "grad-cosine", "optimizer-ablation"] {
        run_experiment(name, &cfg, &dir.join("runs").join(name)).unwrap();
    }
    let mut csvs = Vec::new();
    collect_csvs(dir, dir, &mut csvs);
    csvs.sort();
    csvs
}

fn collect_csvs(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_csvs(base, &path, out);
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push((path.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let base = root().join("determinism");
    let _ = std::fs::remove_dir_all(&base);
    let a = micro_pipeline(&base.join("a"));
    let b = micro_pipeline(&base.join("b"));
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    let differing: Vec<String> =
        a.iter().zip(&b).filter(|((pa, da), (pb, db))| pa != pb || da != db).map(|((p, _), _)| p.display().to_string()).collect();
    Outcome::new(
        a.len() == b.len() && a.len() >= 5 && differing.is_empty(),
        format!("{} CSVs compared ({}); differing: {:?}", a.len(), names.join(", "), differing),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<(usize, &str, Criterion)> = CRITERIA
        .iter()
        .enumerate()
        .map(|(i, &(name, f))| (i + 1, name, f))
        .filter(|(n, name, _)| filters.is_empty() || filters.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())))
        .collect();
    let total = selected.len();
    let mut failed = 0;
    for (n, name, f) in selected {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!outcome.passed);
        println!(
            "criterion {n:>2} {name:<22} {} ({:.1?}) {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            start.elapsed(),
            outcome.detail
        );
    }
    println!("{} of {total} criteria passed", total - failed);
    // Failures are reported above; only strict mode turns them into a failing exit status.
    if failed > 0 && std::env::var_os("DDSLAB_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
