//! Dataset caching, training, evaluation and run artifacts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{s, Array2};
use serde_json::{json, Value};

use super::config::{ExperimentConfig, Mode};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ProposalLabel};
use crate::metrics::{
    compute_ap, foreground_scores, scene_detections, score_gap_stats, spearman, APResult,
    Detection, EvalScene, MetricsLog, MetricsRow, ScoreGapStats, SCORE_HIST_BINS,
};
use crate::net::{backbone_forward, head_forward, softmax_rows, Dims, ParamBank};
use crate::prm::{
    head_seed, prm_predict, prm_train_step, write_gradnorm_csv, GradNormRecord, PrmModel,
    ProposalPool,
};
use crate::sampler::SamplingPolicy;
use crate::seed::{derive_seed, rng_from, stream};
use crate::synthdata::io::{read_dataset, write_dataset, SceneRecord};
use crate::synthdata::{generate_proposals, generate_scenes, quality_at, Scene};

pub const METRICS_CSV: &str = "metrics.csv";
pub const GRADNORM_CSV: &str = "gradnorm.csv";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const EVAL_SUMMARY: &str = "eval_summary.json";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const SCENE_POSITIVES_CSV: &str = "scene_positives.csv";
pub const SCORE_HIST_CSV: &str = "score_hist.csv";

/// Training scenes (objects only; proposals are drawn per step) and
/// evaluation scenes with proposals at final quality.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<SceneRecord>,
}

pub fn build_dataset(c: &ExperimentConfig) -> Result<Dataset> {
    let d = &c.data;
    let train = generate_scenes(&d.scene, 0, d.train_scenes, c.seed)?;
    let eval_base = derive_seed(c.seed, &[stream::EVAL_SCENE]);
    let eval_scenes = generate_scenes(&d.scene, d.train_scenes as u64, d.eval_scenes, eval_base)?;
    let eval = eval_scenes
        .into_iter()
        .map(|scene| {
            let seed = derive_seed(c.seed, &[stream::EVAL_PROPOSALS, scene.id]);
            let proposals = generate_proposals(&scene, &d.scene, 1.0, &d.rpn, &d.features, seed);
            SceneRecord { scene, proposals }
        })
        .collect();
    Ok(Dataset { train, eval })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<SceneRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f))
}

/// Directory holding the cached dataset of `c` under `root`.
pub fn dataset_dir(c: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join(format!("data-{}", &c.data_hash()[..16]))
}

/// Writes the dataset files of `c` under `root`, returning their directory.
pub fn write_dataset_files(c: &ExperimentConfig, data: &Dataset, root: &Path) -> Result<PathBuf> {
    let dir = dataset_dir(c, root);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let train: Vec<SceneRecord> = data
        .train
        .iter()
        .map(|s| SceneRecord {
            scene: s.clone(),
            proposals: Vec::new(),
        })
        .collect();
    write_with(&dir.join("train.txt"), |w| write_dataset(w, &train))?;
    write_with(&dir.join("eval.txt"), |w| write_dataset(w, &data.eval))?;
    Ok(dir)
}

/// Reads the cached dataset of `c` under `root`, generating and writing it
/// first when absent.
pub fn load_or_build_dataset(c: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let dir = dataset_dir(c, root);
    let (train_path, eval_path) = (dir.join("train.txt"), dir.join("eval.txt"));
    if train_path.exists() && eval_path.exists() {
        let train = read_records(&train_path)?.into_iter().map(|r| r.scene).collect();
        let eval = read_records(&eval_path)?;
        return Ok(Dataset { train, eval });
    }
    let data = build_dataset(c)?;
    write_dataset_files(c, &data, root)?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: PrmModel<f64>,
    pub metrics: MetricsLog,
    pub gradnorms: Vec<GradNormRecord>,
}

struct StepPool {
    features: Array2<f64>,
    labels: Vec<ProposalLabel<f64>>,
}

/// Proposals of step `t`: at least `scenes_per_step` consecutive training
/// scenes, extended until the pool fills the largest batch.
fn step_pool(c: &ExperimentConfig, scenes: &[Scene], t: usize, min_size: usize) -> StepPool {
    let d = &c.data;
    let q = quality_at(t, c.train.total_steps);
    let dim = d.features.dim(d.scene.num_classes);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut j = 0;
    while j < d.scenes_per_step || labels.len() < min_size {
        let scene = &scenes[(t * d.scenes_per_step + j) % scenes.len()];
        let seed = derive_seed(c.seed, &[stream::PROPOSALS, t as u64, j as u64]);
        for p in generate_proposals(scene, &d.scene, q, &d.rpn, &d.features, seed) {
            feats.extend(p.feature);
            labels.push(p.label);
        }
        j += 1;
    }
    StepPool {
        features: Array2::from_shape_vec((labels.len(), dim), feats).expect("rows have equal width"),
        labels,
    }
}

fn mean_fg_scores(model: &PrmModel<f64>, x: &Array2<f64>) -> Result<Vec<f64>> {
    let h = backbone_forward(&model.backbone, x.view())?;
    model
        .heads
        .iter()
        .map(|head| {
            let (logits, _, _) = head_forward(&head.params, h.view())?;
            let fg = foreground_scores(softmax_rows(logits.view()).view());
            Ok(fg.iter().sum::<f64>() / fg.len().max(1) as f64)
        })
        .collect()
}

pub fn init_model(c: &ExperimentConfig) -> Result<PrmModel<f64>> {
    let d = &c.data;
    let dims = Dims {
        input: d.features.dim(d.scene.num_classes),
        hidden: c.train.hidden,
        classes: d.scene.num_classes,
    };
    let mut rng = rng_from(derive_seed(c.seed, &[stream::INIT]));
    PrmModel::init(dims, &c.head_policies()?, &mut rng, c.train.init_scale)
}

/// Trains a fresh model on `scenes` for the configured number of steps.
pub fn train_model(c: &ExperimentConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut model = init_model(c)?;
    let schedule = c.schedule()?;
    let sampler_base = derive_seed(c.seed, &[stream::SAMPLER]);
    let batch = model.heads.iter().map(|h| h.policy.batch_size).max().unwrap_or(0);
    let mut metrics = MetricsLog::default();
    let mut gradnorms = Vec::with_capacity(c.train.total_steps);
    for t in 0..c.train.total_steps {
        let pool = step_pool(c, scenes, t, batch);
        let logged = t % c.log_every == 0 || t + 1 == c.train.total_steps;
        let fg_scores = if logged {
            mean_fg_scores(&model, &pool.features)?
        } else {
            Vec::new()
        };
        let seeds: Vec<u64> = (0..model.heads.len())
            .map(|i| head_seed(sampler_base, i, t))
            .collect();
        let view = ProposalPool {
            features: pool.features.view(),
            labels: &pool.labels,
        };
        let report = prm_train_step(&mut model, view, t, &c.train, &schedule, &seeds)?;
        let first = &report.heads[0];
        if logged {
            metrics.push(MetricsRow {
                step: t,
                pos_count_unique: first.pos_count_unique,
                pos_count_effective: first.pos_count_effective,
                pos_acc: first.pos_acc,
                neg_acc: first.neg_acc,
                lambda: report.lambda,
                fg_scores,
            })?;
        }
        gradnorms.push(report.grad_norms);
        if !(model.backbone.is_finite() && model.heads.iter().all(|h| h.params.is_finite())) {
            return Err(Error::Diverged { step: t });
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        gradnorms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// AP of the averaged-score prediction (the only head for one head).
    pub ensemble: APResult,
    /// AP of each head used alone.
    pub heads: Vec<APResult>,
    /// Present with two or more heads.
    pub score_gap: Option<ScoreGapStats>,
    /// `(scene id, gt count, positive proposals)` over evaluation scenes.
    pub scene_positives: Vec<(u64, usize, usize)>,
    /// Rank correlation of the two counts above.
    pub gt_pos_spearman: f64,
}

fn detections(
    records: &[SceneRecord],
    ranges: &[Range<usize>],
    scores: &Array2<f64>,
    boxes: &[BBox<f64>],
    c: &ExperimentConfig,
) -> Vec<Detection<f64>> {
    let mut out = Vec::new();
    for (rec, r) in records.iter().zip(ranges) {
        out.extend(scene_detections(
            rec.scene.id,
            scores.slice(s![r.clone(), ..]),
            &boxes[r.clone()],
            &c.eval,
        ));
    }
    out
}

/// Scores every evaluation proposal and computes ensemble, per-head and
/// bucketed AP along with head score gaps.
pub fn evaluate(c: &ExperimentConfig, model: &PrmModel<f64>, records: &[SceneRecord]) -> Result<EvalOutcome> {
    let dim = model.dims().input;
    let mut feats = Vec::new();
    let mut boxes = Vec::new();
    let mut ranges = Vec::with_capacity(records.len());
    for rec in records {
        let start = boxes.len();
        for p in &rec.proposals {
            if p.feature.len() != dim {
                return Err(Error::Shape(format!(
                    "scene {} has {}-dim features, model expects {dim}",
                    rec.scene.id,
                    p.feature.len()
                )));
            }
            feats.extend_from_slice(&p.feature);
            boxes.push(p.bbox);
        }
        ranges.push(start..boxes.len());
    }
    let x = Array2::from_shape_vec((boxes.len(), dim), feats).expect("rows have equal width");
    let pred = prm_predict(model, x.view(), &boxes)?;

    let scenes: Vec<EvalScene<f64>> = records
        .iter()
        .map(|r| EvalScene {
            id: r.scene.id,
            gts: &r.scene.instances,
        })
        .collect();
    let ap = |dets: &[Detection<f64>]| compute_ap(dets, &scenes, &c.eval.iou_thresholds, &c.eval.buckets);

    let ensemble = ap(&detections(records, &ranges, &pred.scores, &pred.boxes, c));
    let heads = if model.heads.len() == 1 {
        vec![ensemble.clone()]
    } else {
        (0..model.heads.len())
            .map(|i| {
                let (scores, b) = pred.single_head(i, &boxes);
                ap(&detections(records, &ranges, &scores, &b, c))
            })
            .collect()
    };
    let score_gap = if model.heads.len() >= 2 {
        Some(score_gap_stats(&pred.head_logits)?)
    } else {
        None
    };
    let scene_positives: Vec<(u64, usize, usize)> = records
        .iter()
        .map(|r| {
            let pos = r.proposals.iter().filter(|p| p.label.is_positive()).count();
            (r.scene.id, r.scene.gt_count(), pos)
        })
        .collect();
    let gt: Vec<f64> = scene_positives.iter().map(|v| v.1 as f64).collect();
    let pos: Vec<f64> = scene_positives.iter().map(|v| v.2 as f64).collect();
    Ok(EvalOutcome {
        ensemble,
        heads,
        score_gap,
        gt_pos_spearman: spearman(&gt, &pos),
        scene_positives,
    })
}

fn policy_label(p: &SamplingPolicy) -> String {
    format!("{} {}", p.mode, p.ratio)
}

/// Machine-readable evaluation summary.
pub fn eval_summary_json(mode: Mode, policies: &[SamplingPolicy], e: &EvalOutcome) -> Value {
    let heads: Vec<Value> = policies
        .iter()
        .zip(&e.heads)
        .map(|(p, r)| {
            let mut m = r.summary();
            m.insert("policy".into(), policy_label(p).into());
            Value::Object(m)
        })
        .collect();
    json!({
        "mode": mode.to_string(),
        "ensemble": Value::Object(e.ensemble.summary()),
        "heads": heads,
        "score_gap": e.score_gap,
        "gt_pos_spearman": e.gt_pos_spearman,
    })
}

pub fn eval_report_text(policies: &[SamplingPolicy], e: &EvalOutcome) -> String {
    let mut s = e.ensemble.report(if policies.len() > 1 { "ensemble" } else { "model" });
    if policies.len() > 1 {
        for (i, (p, r)) in policies.iter().zip(&e.heads).enumerate() {
            s.push('\n');
            s.push_str(&r.report(&format!("head {} ({})", i + 1, policy_label(p))));
        }
    }
    if let Some(g) = &e.score_gap {
        s.push_str("\nscore gap between heads 1 and 2\n");
        for (i, m) in g.per_head_mean.iter().enumerate() {
            s.push_str(&format!("  mean fg score h{}  {m:.4}\n", i + 1));
        }
        s.push_str(&format!("  mean gap          {:.4}\n", g.gap_mean));
        s.push_str(&format!("  median gap        {:.4}\n", g.gap_median));
        s.push_str(&format!("  fraction > 0.1    {:.4}\n", g.frac_gap_above_0_1));
    }
    s.push_str(&format!(
        "\ngt count vs positive proposals, spearman {:.4}\n",
        e.gt_pos_spearman
    ));
    s
}

/// Writes evaluation artifacts into `out`.
pub fn write_eval_files(out: &Path, mode: Mode, policies: &[SamplingPolicy], e: &EvalOutcome) -> Result<()> {
    write_with(&out.join(EVAL_REPORT), |w| w.write_all(eval_report_text(policies, e).as_bytes()))?;
    let summary = serde_json::to_string_pretty(&eval_summary_json(mode, policies, e)).expect("json");
    write_with(&out.join(EVAL_SUMMARY), |w| writeln!(w, "{summary}"))?;
    write_with(&out.join(SCENE_POSITIVES_CSV), |w| {
        writeln!(w, "scene_id,gt_count,pos_count")?;
        for (id, g, p) in &e.scene_positives {
            writeln!(w, "{id},{g},{p}")?;
        }
        Ok(())
    })?;
    if let Some(g) = &e.score_gap {
        write_with(&out.join(SCORE_HIST_CSV), |w| {
            let heads: Vec<String> = (1..=g.per_head_hist.len()).map(|i| format!(",h{i}")).collect();
            writeln!(w, "bin_lo,bin_hi{},gap", heads.concat())?;
            for b in 0..SCORE_HIST_BINS {
                let lo = b as f64 / SCORE_HIST_BINS as f64;
                write!(w, "{lo:.2},{:.2}", lo + 1.0 / SCORE_HIST_BINS as f64)?;
                for h in &g.per_head_hist {
                    write!(w, ",{}", h[b])?;
                }
                writeln!(w, ",{}", g.gap_hist[b])?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub policies: Vec<SamplingPolicy>,
    pub train: TrainOutcome,
    pub eval: EvalOutcome,
}

/// Trains and evaluates without touching the filesystem.
pub fn run_in_memory(c: &ExperimentConfig, data: &Dataset) -> Result<RunSummary> {
    c.validate()?;
    let train = train_model(c, &data.train)?;
    let eval = evaluate(c, &train.model, &data.eval)?;
    Ok(RunSummary {
        config_hash: c.hash(),
        mode: c.mode(),
        policies: c.head_policies()?,
        train,
        eval,
    })
}

pub fn manifest_json(c: &ExperimentConfig, timestamp: u64) -> Value {
    json!({
        "tool": "rcnnlab",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": c.hash(),
        "data_hash": c.data_hash(),
        "seed": c.seed,
        "mode": c.mode().to_string(),
        "heads": c.head_policies().unwrap_or_default().iter().map(policy_label).collect::<Vec<_>>(),
        "created_unix": timestamp,
    })
}

/// Full run: dataset (cached under `data_root`), training, evaluation and
/// all artifacts written into `out`.
pub fn run_experiment_with_cache(c: &ExperimentConfig, out: &Path, data_root: &Path) -> Result<RunSummary> {
    c.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = load_or_build_dataset(c, data_root)?;
    let summary = run_in_memory(c, &data)?;
    let heads = summary.policies.len();
    write_with(&out.join(CONFIG_COPY), |w| w.write_all(c.to_toml().as_bytes()))?;
    write_with(&out.join(METRICS_CSV), |w| summary.train.metrics.write_csv(w, heads))?;
    write_with(&out.join(GRADNORM_CSV), |w| write_gradnorm_csv(w, heads, &summary.train.gradnorms))?;
    write_with(&out.join(CHECKPOINT), |w| checkpoint::save(w, &summary.train.model))?;
    write_eval_files(out, summary.mode, &summary.policies, &summary.eval)?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let manifest = serde_json::to_string_pretty(&manifest_json(c, now)).expect("json");
    write_with(&out.join(MANIFEST), |w| writeln!(w, "{manifest}"))?;
    Ok(summary)
}

/// [`run_experiment_with_cache`] with the dataset cached inside `out`.
pub fn run_experiment(c: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    run_experiment_with_cache(c, out, out)
}

/// Loads a checkpoint written by a run.
pub fn load_checkpoint(path: &Path) -> Result<PrmModel<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    checkpoint::load(BufReader::new(f))
}
