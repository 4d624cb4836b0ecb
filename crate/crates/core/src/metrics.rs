//! Evaluation and training instrumentation.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GroundTruthInstance};
use crate::net::softmax_rows;
use crate::scalar::Scalar;

/// Index of the largest entry; ties resolve to the lowest index.
fn argmax<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `(pos_acc, neg_acc)` over unique batch entries. A group with no members
/// reports `None`.
pub fn proposal_accuracy<T: Scalar>(logits: ArrayView2<T>, targets: &[usize]) -> (Option<f64>, Option<f64>) {
    let (mut pos, mut pos_ok, mut neg, mut neg_ok) = (0usize, 0usize, 0usize, 0usize);
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let hit = argmax(row) == t;
        if t == 0 {
            neg += 1;
            neg_ok += usize::from(hit);
        } else {
            pos += 1;
            pos_ok += usize::from(hit);
        }
    }
    let frac = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    (frac(pos_ok, pos), frac(neg_ok, neg))
}

/// Max probability over the non-background classes of each row.
pub fn foreground_scores<T: Scalar>(probs: ArrayView2<T>) -> Vec<T> {
    probs
        .rows()
        .into_iter()
        .map(|r| r.iter().skip(1).fold(T::zero(), |a, &b| a.max(b)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub scene_id: u64,
    pub bbox: BBox<T>,
    pub class_id: usize,
    pub score: T,
}

/// Stable order by descending score.
fn by_score_desc<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Greedy non-maximum suppression within each (scene, class). A detection is
/// dropped when its IoU with an already kept one reaches `iou_threshold`.
/// Output is in descending score order, ties in input order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut kept: Vec<Detection<T>> = Vec::new();
    for i in by_score_desc(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.scene_id == d.scene_id && k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Evaluation post-processing and AP settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub iou_thresholds: Vec<f64>,
    pub score_floor: f64,
    pub max_dets: usize,
    pub nms_iou: f64,
    pub buckets: Vec<GtBucket>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            score_floor: 0.05,
            max_dets: 100,
            nms_iou: 0.5,
            buckets: vec![GtBucket::new(1, Some(3)), GtBucket::new(8, None)],
        }
    }
}

/// Per-class detections for one scene: score floor, per-class NMS, then the
/// top `max_dets` by score.
pub fn scene_detections<T: Scalar>(
    scene_id: u64,
    scores: ArrayView2<T>,
    boxes: &[BBox<T>],
    settings: &EvalSettings,
) -> Vec<Detection<T>> {
    let floor = T::lit(settings.score_floor);
    let mut raw = Vec::new();
    for (row, b) in scores.rows().into_iter().zip(boxes) {
        for (c, &s) in row.iter().enumerate().skip(1) {
            if s >= floor {
                raw.push(Detection {
                    scene_id,
                    bbox: *b,
                    class_id: c,
                    score: s,
                });
            }
        }
    }
    let mut kept = nms(&raw, T::lit(settings.nms_iou));
    kept.truncate(settings.max_dets);
    kept
}

/// Scenes restricted by ground-truth count, `[lo, hi]` or `[lo, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtBucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl GtBucket {
    pub fn new(lo: usize, hi: Option<usize>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, n: usize) -> bool {
        n >= self.lo && self.hi.is_none_or(|h| n <= h)
    }

    /// Summary key, e.g. `ap_bucket_1_3` or `ap_bucket_8_inf`.
    pub fn key(&self) -> String {
        match self.hi {
            Some(h) => format!("ap_bucket_{}_{}", self.lo, h),
            None => format!("ap_bucket_{}_inf", self.lo),
        }
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{}]", self.lo, h),
            None => format!("[{},inf)", self.lo),
        }
    }
}

/// Ground truth of one evaluation scene.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a, T> {
    pub id: u64,
    pub gts: &'a [GroundTruthInstance<T>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct APResult {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub mean: f64,
    pub buckets: Vec<(GtBucket, f64)>,
}

impl APResult {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.per_threshold[i])
    }

    pub fn ap50(&self) -> Option<f64> {
        self.at(0.5)
    }

    pub fn ap75(&self) -> Option<f64> {
        self.at(0.75)
    }

    pub fn bucket(&self, lo: usize, hi: Option<usize>) -> Option<f64> {
        self.buckets
            .iter()
            .find(|(b, _)| *b == GtBucket::new(lo, hi))
            .map(|(_, v)| *v)
    }

    /// Machine-readable summary with fixed key names.
    pub fn summary(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("ap_mean".into(), self.mean.into());
        m.insert("ap50".into(), self.ap50().map_or(serde_json::Value::Null, Into::into));
        m.insert("ap75".into(), self.ap75().map_or(serde_json::Value::Null, Into::into));
        for (b, v) in &self.buckets {
            m.insert(b.key(), (*v).into());
        }
        m
    }

    /// Human-readable per-threshold and per-bucket table.
    pub fn report(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "  {:<14} {:>8}", "iou", "AP");
        for (t, v) in self.thresholds.iter().zip(&self.per_threshold) {
            let _ = writeln!(s, "  {t:<14.2} {v:>8.4}");
        }
        let _ = writeln!(s, "  {:<14} {:>8.4}", "mean", self.mean);
        for (b, v) in &self.buckets {
            let _ = writeln!(s, "  gt {:<11} {v:>8.4}", b.label());
        }
        s
    }
}

/// 101-point interpolated AP from per-detection TP flags in score order.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / 101.0
}

/// AP at one IoU threshold, averaged over classes that have ground truth.
fn ap_at<T: Scalar>(dets: &[Detection<T>], scenes: &[EvalScene<T>], threshold: T) -> f64 {
    use std::collections::HashMap;
    let index: HashMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let max_class = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.class_id()))
        .max()
        .unwrap_or(0);
    let mut per_class = Vec::new();
    for c in 1..=max_class {
        let num_gt: usize = scenes
            .iter()
            .map(|s| s.gts.iter().filter(|g| g.class_id() == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let class_dets: Vec<Detection<T>> = dets
            .iter()
            .filter(|d| d.class_id == c && index.contains_key(&d.scene_id))
            .copied()
            .collect();
        let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
        let flags: Vec<bool> = by_score_desc(&class_dets)
            .into_iter()
            .map(|i| {
                let d = &class_dets[i];
                let si = index[&d.scene_id];
                let mut best: Option<(usize, T)> = None;
                for (j, g) in scenes[si].gts.iter().enumerate() {
                    if g.class_id() != c || matched[si][j] {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox);
                    if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                match best {
                    Some((j, _)) => {
                        matched[si][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(interpolated_ap(&flags, num_gt));
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

fn mean_ap<T: Scalar>(dets: &[Detection<T>], scenes: &[EvalScene<T>], thresholds: &[f64]) -> Vec<f64> {
    thresholds.iter().map(|&t| ap_at(dets, scenes, T::lit(t))).collect()
}

/// COCO-style AP: greedy per-class matching in descending score order,
/// 101-point interpolation, averaged over classes and then thresholds.
/// Bucketed values restrict scenes (and their detections) by object count.
pub fn compute_ap<T: Scalar>(
    dets: &[Detection<T>],
    scenes: &[EvalScene<T>],
    thresholds: &[f64],
    buckets: &[GtBucket],
) -> APResult {
    let per_threshold = mean_ap(dets, scenes, thresholds);
    let avg = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let buckets = buckets
        .iter()
        .map(|b| {
            let subset: Vec<EvalScene<T>> = scenes
                .iter()
                .filter(|s| b.contains(s.gts.len()))
                .copied()
                .collect();
            (*b, avg(&mean_ap(dets, &subset, thresholds)))
        })
        .collect();
    APResult {
        thresholds: thresholds.to_vec(),
        mean: avg(&per_threshold),
        per_threshold,
        buckets,
    }
}

/// Summary of how two heads' foreground scores differ on the same proposals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreGapStats {
    pub per_head_mean: Vec<f64>,
    /// 20-bin histograms of each head's foreground score over [0, 1].
    pub per_head_hist: Vec<Vec<usize>>,
    pub gap_hist: Vec<usize>,
    pub gap_mean: f64,
    pub gap_median: f64,
    /// Fraction of proposals whose two scores differ by more than 0.1.
    pub frac_gap_above_0_1: f64,
}

pub const SCORE_HIST_BINS: usize = 20;

fn histogram(xs: &[f64]) -> Vec<usize> {
    let mut h = vec![0; SCORE_HIST_BINS];
    for &x in xs {
        let b = ((x * SCORE_HIST_BINS as f64) as usize).min(SCORE_HIST_BINS - 1);
        h[b] += 1;
    }
    h
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gap statistics between the first two heads, from raw per-head logits.
pub fn score_gap_stats<T: Scalar>(per_head_logits: &[ndarray::Array2<T>]) -> Result<ScoreGapStats> {
    if per_head_logits.len() < 2 {
        return Err(Error::Shape("score gaps need at least two heads".into()));
    }
    if per_head_logits.iter().any(|l| l.dim() != per_head_logits[0].dim()) {
        return Err(Error::Shape("head outputs differ in shape".into()));
    }
    let fg: Vec<Vec<f64>> = per_head_logits
        .iter()
        .map(|l| {
            foreground_scores(softmax_rows(l.view()).view())
                .into_iter()
                .map(Scalar::as_f64)
                .collect()
        })
        .collect();
    let gaps: Vec<f64> = fg[0].iter().zip(&fg[1]).map(|(a, b)| (a - b).abs()).collect();
    let n = gaps.len().max(1) as f64;
    Ok(ScoreGapStats {
        per_head_mean: fg.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect(),
        per_head_hist: fg.iter().map(|v| histogram(v)).collect(),
        gap_hist: histogram(&gaps),
        gap_mean: gaps.iter().sum::<f64>() / n,
        gap_median: median(&gaps),
        frac_gap_above_0_1: gaps.iter().filter(|&&g| g > 0.1).count() as f64 / n,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub pos_count_unique: usize,
    pub pos_count_effective: usize,
    pub pos_acc: Option<f64>,
    pub neg_acc: Option<f64>,
    pub lambda: f64,
    pub fg_scores: Vec<f64>,
}

/// Per-step training series; steps are strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Config(format!(
                    "metrics step {} does not follow {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn header(num_heads: usize) -> String {
        let mut cols: Vec<String> = [
            "step",
            "pos_count_unique",
            "pos_count_effective",
            "pos_acc",
            "neg_acc",
            "lambda",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((1..=num_heads).map(|i| format!("fg_score_h{i}")));
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W, num_heads: usize) -> std::io::Result<()> {
        writeln!(w, "{}", Self::header(num_heads))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{:.6}",
                r.step,
                r.pos_count_unique,
                r.pos_count_effective,
                opt(r.pos_acc),
                opt(r.neg_acc),
                r.lambda
            )?;
            for s in &r.fg_scores {
                write!(w, ",{s:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Centered moving average with the window truncated at the ends.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
