//! Registered experiments. Each runner reads the pipeline's artifacts,
//! writes CSVs and PNGs into its report directory and returns a verdict.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use super::stats::{mean_stderr, non_increasing, spearman};
use super::{mode_collapse_index, source_fidelity, target_fidelity, AttrClassifier, CLIP_PROXY, LPIPS_PROXY};
use crate::config::RunConfig;
use crate::diffusion::Denoiser;
use crate::editor::{compare_optimizers, edit, step_sweep, EditMethod, EditTask, Monitor};
use crate::error::{Error, Result};
use crate::image::{save_grid, Image};
use crate::pipeline::{load_classifier_for, load_denoiser_for, load_split, load_translator_for, Split};
use crate::rng;
use crate::scores::{estimate_bias, grad_cosine_curve, saliency_of, sds_norm_curve, write_curves_csv, Quad};
use crate::synthdata::{gen_image, permute_captions, support_of, Dataset, EditMask, SceneSpec, ShapeColor};
use crate::translator::{translate, I2IVariant, TranslationNetwork};

pub const REGISTRY: [&str; 9] = [
    "sds-norm-curve",
    "grad-cosine",
    "edit-compare",
    "cfg-sweep",
    "optimizer-ablation",
    "sds-reg-sweep",
    "i2i-ablation",
    "i2i-compare",
    "step-sweep",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub tables: Vec<String>,
    pub images: Vec<String>,
    pub metrics: Value,
    pub checks: Vec<Check>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut v = serde_json::to_value(self)?;
        v["passed"] = json!(self.passed());
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }
}

/// `runs/<name>/<timestamp>/` under the configured runs directory.
pub fn report_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    cfg.paths.runs_dir.join(name).join(stamp.to_string())
}

/// Runs experiment `name`, writing its outputs and `report.json` into `dir`.
pub fn run_experiment(name: &str, cfg: &RunConfig, dir: &Path) -> Result<ExperimentReport> {
    if !REGISTRY.contains(&name) {
        return Err(Error::UnknownExperiment { name: name.to_string(), registry: REGISTRY.join(", ") });
    }
    let start = Instant::now();
    let mut out = Outputs::new(dir)?;
    let checks = match name {
        "sds-norm-curve" => sds_norm(cfg, &mut out)?,
        "grad-cosine" => grad_cos(cfg, &mut out)?,
        "edit-compare" => edit_compare(cfg, &mut out)?,
        "cfg-sweep" => cfg_sweep(cfg, &mut out)?,
        "optimizer-ablation" => optimizer_ablation(cfg, &mut out)?,
        "sds-reg-sweep" => sds_reg_sweep(cfg, &mut out)?,
        "i2i-ablation" => i2i_ablation(cfg, &mut out)?,
        "i2i-compare" => i2i_compare(cfg, &mut out)?,
        "step-sweep" => steps(cfg, &mut out)?,
        _ => unreachable!("registry checked above"),
    };
    let report = ExperimentReport {
        name: name.to_string(),
        config: cfg.clone(),
        seeds: out.seeds,
        tables: out.tables,
        images: out.images,
        metrics: Value::Object(out.metrics),
        checks,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report.write(dir)?;
    for c in &report.checks {
        info!("{name}: {} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report)
}

struct Outputs {
    dir: PathBuf,
    seeds: BTreeMap<String, u64>,
    tables: Vec<String>,
    images: Vec<String>,
    metrics: serde_json::Map<String, Value>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), seeds: BTreeMap::new(), tables: Vec::new(), images: Vec::new(), metrics: Default::default() })
    }

    fn seed(&mut self, cfg: &RunConfig, label: &str) -> u64 {
        let s = cfg.stream(label);
        self.seeds.insert(label.to_string(), s);
        s
    }

    fn table(&mut self, file: &str) -> PathBuf {
        self.tables.push(file.to_string());
        self.dir.join(file)
    }

    fn image(&mut self, file: &str) -> PathBuf {
        self.images.push(file.to_string());
        self.dir.join(file)
    }

    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn subset(d: &Dataset, n: usize) -> Result<Dataset> {
    if d.len() < n {
        return Err(Error::Config(format!("experiment needs {n} held-out items, dataset has {}", d.len())));
    }
    Ok(Dataset { items: d.items[..n].to_vec(), canvas: d.canvas, generator_seed: d.generator_seed })
}

fn median_index(grid: &[f64]) -> usize {
    (grid.len() - 1) / 2
}

fn sds_norm(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let held = subset(&load_split(cfg, Split::Heldout)?, e.norm_pairs)?;
    let draw_seed = out.seed(cfg, "sds-norm-draws");
    let perm_seed = out.seed(cfg, "sds-norm-permutation");
    let matched: Vec<_> = held.items.iter().map(|(i, s)| (i.clone(), s.caption())).collect();
    let permuted: Vec<_> = permute_captions(&held, perm_seed)?.into_iter().map(|(i, s)| (i, s.caption())).collect();
    let m = sds_norm_curve(&den, &matched, &e.t_grid, e.norm_draws, e.omega, draw_seed, "matched")?;
    let p = sds_norm_curve(&den, &permuted, &e.t_grid, e.norm_draws, e.omega, draw_seed, "permuted")?;
    write_curves_csv(&out.table("sds_norm_curve.csv"), &[&m, &p])?;

    let mid = e.t_grid[median_index(&e.t_grid)];
    let bias = estimate_bias(&den, &matched[0].0, &matched[0].1, e.norm_draws, &[mid], e.omega, draw_seed)?;
    saliency_of(&bias[0].mean).save_heatmap(out.image("matched_bias_saliency.png"))?;
    out.metric("matched", m.means());
    out.metric("permuted", p.means());
    Ok(vec![
        Check::new("matched norm positive at every t", m.points.iter().all(|q| q.mean > 0.0), format!("{:?}", m.means())),
        Check::new("permuted dominates matched at interior t", p.dominates_interior(&m), format!("{:?} vs {:?}", p.means(), m.means())),
    ])
}

/// Quads of a source with its matched caption against the same scene in
/// another colour (similar) or an unrelated held-out scene (unrelated).
pub fn cosine_quads(held: &Dataset, n: usize) -> Result<(Vec<Quad>, Vec<Quad>)> {
    let mut similar = Vec::with_capacity(n);
    let mut unrelated = Vec::with_capacity(n);
    let len = held.len();
    if len < 2 {
        return Err(Error::Config("need at least two held-out items".into()));
    }
    for i in 0..n {
        let (img, spec) = &held.items[i % len];
        let twin = spec.with_color(recolor_target(spec.shape_color, i));
        let twin_img = gen_image(&twin, held.canvas)?;
        similar.push(Quad { z: twin_img.clone(), y: twin.caption(), zhat: img.clone(), yhat: spec.caption() });
        let (other, other_spec) = &held.items[(i + 1 + i / len) % len];
        unrelated.push(Quad { z: twin_img, y: twin.caption(), zhat: other.clone(), yhat: other_spec.caption() });
    }
    Ok((similar, unrelated))
}

fn grad_cos(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    let seed = out.seed(cfg, "grad-cosine-draws");
    let (similar, unrelated) = cosine_quads(&held, e.cosine_quads)?;
    let s = grad_cosine_curve(&den, &similar, &e.t_grid, e.cosine_draws, e.omega, seed, "similar")?;
    let u = grad_cosine_curve(&den, &unrelated, &e.t_grid, e.cosine_draws, e.omega, seed, "unrelated")?;
    write_curves_csv(&out.table("grad_cosine.csv"), &[&s, &u])?;
    let k = median_index(&e.t_grid);
    let gap = s.points[k].mean - u.points[k].mean;
    let pooled = (s.points[k].stderr.powi(2) + u.points[k].stderr.powi(2)).sqrt();
    out.metric("similar", s.means());
    out.metric("unrelated", u.means());
    out.metric("median_t_gap_in_stderr", gap / pooled);
    Ok(vec![
        Check::new("similar exceeds unrelated at interior t", s.dominates_interior(&u), format!("{:?} vs {:?}", s.means(), u.means())),
        Check::new(
            "gap at median t at least 3 pooled stderr",
            gap >= 3.0 * pooled,
            format!("t={} gap {gap:.4}, pooled stderr {pooled:.4}", e.t_grid[k]),
        ),
    ])
}

/// Deterministic alternative colour for task `i`.
pub fn recolor_target(current: ShapeColor, i: usize) -> ShapeColor {
    ShapeColor::ALL[(current.index() + 1 + i % (ShapeColor::COUNT - 1)) % ShapeColor::COUNT]
}

/// A single-attribute (shape colour) edit of a held-out scene.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub source: SceneSpec,
    pub target: SceneSpec,
    pub task: EditTask,
    pub mask: EditMask,
}

/// The first `n` held-out scenes, each recoloured.
pub fn edit_suite(cfg: &RunConfig, held: &Dataset, n: usize) -> Result<Vec<EditCase>> {
    if held.len() < n {
        return Err(Error::Config(format!("edit suite needs {n} held-out items, dataset has {}", held.len())));
    }
    let seed = cfg.stream("edit-tasks");
    held.items[..n]
        .iter()
        .enumerate()
        .map(|(i, (img, spec))| {
            let target = spec.with_color(recolor_target(spec.shape_color, i));
            let task = EditTask::new(img.clone(), Some(spec.caption()), target.caption(), rng::derive_index(seed, i as u64))
                .with_settings(cfg.edit);
            Ok(EditCase { source: *spec, target, task, mask: support_of(spec, held.canvas)? })
        })
        .collect()
}

struct Scored {
    fidelity: f64,
    off_target: f64,
    z: Image,
}

fn run_scored(den: &Denoiser, clf: &AttrClassifier, case: &EditCase, task: &EditTask, method: EditMethod) -> Result<Scored> {
    let res = edit(den, task, method, Monitor { classifier: None, mask: None })?;
    let z = res.z_final.clamped();
    Ok(Scored { fidelity: target_fidelity(clf, &z, &task.y)?, off_target: source_fidelity(&z, &case.task.zhat, &case.mask)?, z })
}

fn edit_compare(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let clf = load_classifier_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    out.seed(cfg, "edit-tasks");
    let suite = edit_suite(cfg, &held, e.edit_tasks)?;
    let mut w = csv::Writer::from_path(out.table("edit_compare.csv"))?;
    w.write_record(["task", "source", "target", "method", "omega", CLIP_PROXY, LPIPS_PROXY])?;
    let mut wins = 0;
    let mut grid = Vec::new();
    let (mut dds_fid, mut sds_fid, mut dds_off, mut sds_off) = (vec![], vec![], vec![], vec![]);
    for (i, case) in suite.iter().enumerate() {
        let d = run_scored(&den, &clf, case, &case.task, EditMethod::Dds)?;
        let s = run_scored(&den, &clf, case, &case.task, EditMethod::Sds)?;
        for (m, r) in [("dds", &d), ("sds", &s)] {
            w.write_record([
                i.to_string(),
                case.source.caption().to_string(),
                case.target.caption().to_string(),
                m.to_string(),
                fmt(cfg.edit.omega),
                fmt(r.fidelity),
                fmt(r.off_target),
            ])?;
        }
        if d.off_target < s.off_target && d.fidelity >= s.fidelity - e.fidelity_margin {
            wins += 1;
        }
        dds_fid.push(d.fidelity);
        sds_fid.push(s.fidelity);
        dds_off.push(d.off_target);
        sds_off.push(s.off_target);
        if i < 8 {
            grid.extend([case.task.zhat.clone(), d.z, s.z]);
        }
    }
    w.flush()?;
    save_grid(&grid, 3, out.image("edit_compare_grid.png"))?;
    let frac = wins as f64 / suite.len() as f64;
    out.metric("dds_mean_fidelity", mean_stderr(&dds_fid).0);
    out.metric("sds_mean_fidelity", mean_stderr(&sds_fid).0);
    out.metric("dds_mean_off_target", mean_stderr(&dds_off).0);
    out.metric("sds_mean_off_target", mean_stderr(&sds_off).0);
    out.metric("win_fraction", frac);
    Ok(vec![Check::new(
        "DDS lower off-target at comparable fidelity on at least 90% of tasks",
        frac >= 0.9,
        format!("{wins}/{} paired wins", suite.len()),
    )])
}

fn cfg_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let clf = load_classifier_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    out.seed(cfg, "edit-tasks");
    let suite = edit_suite(cfg, &held, e.sweep_tasks)?;
    let mut w = csv::Writer::from_path(out.table("cfg_sweep.csv"))?;
    w.write_record(["task", "omega", CLIP_PROXY, LPIPS_PROXY, "iters_to_fidelity"])?;
    let (mut om, mut off, mut iters) = (vec![], vec![], vec![]);
    for &omega in &e.cfg_omegas {
        for (i, case) in suite.iter().enumerate() {
            let task = case.task.clone().with_omega(omega);
            let res = edit(&den, &task, EditMethod::Dds, Monitor { classifier: Some(&clf), mask: Some(&case.mask) })?;
            let reached = res.iters_to_fidelity(e.fidelity_threshold);
            let fid = res.final_fidelity().unwrap_or(0.0);
            let o = res.final_off_target().unwrap_or(0.0);
            w.write_record([i.to_string(), fmt(omega), fmt(fid), fmt(o), reached.map_or(String::new(), |k| k.to_string())])?;
            om.push(omega);
            off.push(o);
            // never reaching the threshold ranks after every success
            iters.push(reached.map_or((task.settings.iters + 1) as f64, |k| k as f64));
        }
    }
    w.flush()?;
    let rho_off = spearman(&om, &off);
    let rho_iters = spearman(&om, &iters);
    out.metric("spearman_omega_off_target", rho_off);
    out.metric("spearman_omega_iters_to_fidelity", rho_iters);
    Ok(vec![
        Check::new("off-target MSE rises with omega", rho_off > 0.0, format!("spearman {rho_off:.4} over {} runs", om.len())),
        Check::new("iterations to fidelity fall with omega", rho_iters < 0.0, format!("spearman {rho_iters:.4} over {} runs", om.len())),
    ])
}

fn optimizer_ablation(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    out.seed(cfg, "edit-tasks");
    let suite = edit_suite(cfg, &held, e.sweep_tasks)?;
    let mut w = csv::Writer::from_path(out.table("optimizer_ablation.csv"))?;
    w.write_record(["task", "sgd_in_mask_energy", "adam_in_mask_energy"])?;
    let mut wins = 0;
    for (i, case) in suite.iter().enumerate() {
        let c = compare_optimizers(&den, &case.task, Monitor { classifier: None, mask: Some(&case.mask) })?;
        let (s, a) = (c.sgd_in_mask(), c.adam_in_mask());
        w.write_record([i.to_string(), fmt(s), fmt(a)])?;
        if s > a {
            wins += 1;
        }
        if i == 0 {
            c.sgd.accumulated_diff.save_heatmap(out.image("sgd_accumulated_diff.png"))?;
            c.adam.accumulated_diff.save_heatmap(out.image("adam_accumulated_diff.png"))?;
        }
    }
    w.flush()?;
    let frac = wins as f64 / suite.len() as f64;
    out.metric("sgd_win_fraction", frac);
    Ok(vec![Check::new(
        "SGD in-mask energy exceeds Adam's on at least 75% of tasks",
        frac >= 0.75,
        format!("{wins}/{}", suite.len()),
    )])
}

fn sds_reg_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let clf = load_classifier_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    out.seed(cfg, "edit-tasks");
    let suite = edit_suite(cfg, &held, e.sweep_tasks)?;
    let mut w = csv::Writer::from_path(out.table("sds_reg_sweep.csv"))?;
    w.write_record(["task", "lambda", CLIP_PROXY, LPIPS_PROXY])?;
    let mut means = Vec::new();
    let mut grid = Vec::new();
    for &lambda in &e.reg_lambdas {
        let mut fids = Vec::new();
        for (i, case) in suite.iter().enumerate() {
            let r = run_scored(&den, &clf, case, &case.task, EditMethod::SdsReg { lambda })?;
            w.write_record([i.to_string(), fmt(lambda), fmt(r.fidelity), fmt(r.off_target)])?;
            fids.push(r.fidelity);
            if i == 0 {
                grid.push(r.z);
            }
        }
        means.push(mean_stderr(&fids).0);
    }
    w.flush()?;
    save_grid(&grid, grid.len(), out.image("sds_reg_task0.png"))?;
    out.metric("mean_fidelity_by_lambda", &means);
    Ok(vec![Check::new(
        "mean target fidelity non-increasing in lambda",
        non_increasing(&means, 0.0),
        format!("lambdas {:?} fidelity {means:?}", e.reg_lambdas),
    )])
}

/// Held-out scenes whose shape colour differs from the task's target.
fn i2i_inputs(net: &TranslationNetwork, held: &Dataset, n: usize) -> Result<Vec<(Image, SceneSpec)>> {
    let task = &net.tasks()[0];
    let picked: Vec<_> = held
        .items
        .iter()
        .filter(|(_, s)| task.target_caption_attrs.shape_color.is_none_or(|c| c != s.shape_color))
        .take(n)
        .cloned()
        .collect();
    if picked.len() < n {
        return Err(Error::Config(format!("only {} held-out images suit task `{}`, need {n}", picked.len(), task.name)));
    }
    Ok(picked)
}

fn translate_all(net: &TranslationNetwork, inputs: &[(Image, SceneSpec)]) -> Result<Vec<Image>> {
    inputs.iter().map(|(img, _)| translate(net, img, 0)).collect()
}

fn i2i_ablation(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (full, _) = load_translator_for(cfg, I2IVariant::Full)?;
    let (flat, _) = load_translator_for(cfg, I2IVariant::NoWarmup)?;
    let held = load_split(cfg, Split::Heldout)?;
    let inputs = i2i_inputs(&full, &held, e.i2i_heldout)?;
    let images: Vec<Image> = inputs.iter().map(|(i, _)| i.clone()).collect();
    let a = translate_all(&full, &inputs)?;
    let b = translate_all(&flat, &inputs)?;
    let ia = mode_collapse_index(&images, &a)?;
    let ib = mode_collapse_index(&images, &b)?;
    let mut w = csv::Writer::from_path(out.table("i2i_ablation.csv"))?;
    w.write_record(["variant", "mode_collapse_index"])?;
    w.write_record(["full", &fmt(ia)])?;
    w.write_record(["no-warmup", &fmt(ib)])?;
    w.flush()?;
    let k = inputs.len().min(8);
    let mut grid = images[..k].to_vec();
    grid.extend_from_slice(&a[..k]);
    grid.extend_from_slice(&b[..k]);
    save_grid(&grid, k, out.image("i2i_ablation_grid.png"))?;
    out.metric("full_index", ia);
    out.metric("no_warmup_index", ib);
    Ok(vec![Check::new(
        "no-warmup mode-collapse index at least twice the full method's",
        ib >= 2.0 * ia,
        format!("no-warmup {ib:.4}, full {ia:.4}"),
    )])
}

fn i2i_compare(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (dds, _) = load_translator_for(cfg, I2IVariant::Full)?;
    let (sds, _) = load_translator_for(cfg, I2IVariant::Sds)?;
    let clf = load_classifier_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    let inputs = i2i_inputs(&dds, &held, e.i2i_heldout)?;
    let task = dds.tasks()[0].clone();
    let mut w = csv::Writer::from_path(out.table("i2i_compare.csv"))?;
    w.write_record(["image", "variant", CLIP_PROXY, LPIPS_PROXY])?;
    let mut stats = BTreeMap::new();
    let mut grid = Vec::new();
    for (name, net) in [("dds", &dds), ("sds", &sds)] {
        let (mut fids, mut offs) = (vec![], vec![]);
        for (i, (img, spec)) in inputs.iter().enumerate() {
            let y = translate(net, img, 0)?;
            let fid = target_fidelity(&clf, &y, &task.target_for(&spec.caption()))?;
            let off = source_fidelity(&y, img, &support_of(spec, held.canvas)?)?;
            w.write_record([i.to_string(), name.to_string(), fmt(fid), fmt(off)])?;
            fids.push(fid);
            offs.push(off);
            if i < 8 {
                grid.push(y);
            }
        }
        stats.insert(name, (mean_stderr(&fids).0, mean_stderr(&offs).0));
    }
    w.flush()?;
    save_grid(&grid, grid.len() / 2, out.image("i2i_compare_grid.png"))?;
    let ((df, doff), (sf, soff)) = (stats["dds"], stats["sds"]);
    out.metric("dds", json!({ CLIP_PROXY: df, LPIPS_PROXY: doff }));
    out.metric("sds", json!({ CLIP_PROXY: sf, LPIPS_PROXY: soff }));
    Ok(vec![Check::new(
        "SDS-trained net has higher off-target MSE at comparable fidelity",
        soff > doff && df >= sf - e.fidelity_margin,
        format!("dds fidelity {df:.4} off-target {doff:.5}; sds fidelity {sf:.4} off-target {soff:.5}"),
    )])
}

fn steps(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let e = &cfg.experiments;
    let (den, _) = load_denoiser_for(cfg)?;
    let clf = load_classifier_for(cfg)?;
    let held = load_split(cfg, Split::Heldout)?;
    out.seed(cfg, "edit-tasks");
    let suite = edit_suite(cfg, &held, e.sweep_tasks)?;
    let pairs: Vec<(EditTask, EditMask)> = suite.iter().map(|c| (c.task.clone(), c.mask.clone())).collect();
    let rows = step_sweep(&den, &pairs, &e.step_counts, &clf)?;
    let mut w = csv::Writer::from_path(out.table("step_sweep.csv"))?;
    w.write_record(["task", "steps", CLIP_PROXY, LPIPS_PROXY])?;
    for r in &rows {
        w.write_record([r.task.to_string(), r.steps.to_string(), fmt(r.target_fidelity), fmt(r.off_target_mse)])?;
    }
    w.flush()?;
    let mean_at = |s: usize| mean_stderr(&rows.iter().filter(|r| r.steps == s).map(|r| r.target_fidelity).collect::<Vec<_>>()).0;
    let (lo, hi) = (e.step_counts[0], *e.step_counts.last().unwrap());
    let curve: Vec<f64> = e.step_counts.iter().map(|&s| mean_at(s)).collect();
    out.metric("mean_fidelity_by_steps", &curve);
    Ok(vec![Check::new(
        "more iterations reach at least the fidelity of fewer",
        mean_at(hi) >= mean_at(lo),
        format!("steps {:?} fidelity {curve:?}", e.step_counts),
    )])
}
