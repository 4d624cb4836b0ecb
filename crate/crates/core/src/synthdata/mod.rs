//! Synthetic scenes and a simulated region-proposal stage whose quality
//! improves linearly over training.
//!
//! Positive proposals are scarce early (jitter `jitter_start`) and abundant
//! late (jitter `jitter_end`), and scenes with more objects yield more
//! positives. Features are a surrogate for pooled backbone activations: the
//! first `C` dimensions carry `max_iou` on the matched class for positives,
//! and every dimension carries Gaussian noise.

pub mod io;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::geometry::{label_proposals, BBox, GroundTruthInstance, ProposalLabel};
use crate::seed::{derive_seed, rng_from, stream};

/// Shortest proposal side after jitter and clipping.
const MIN_SIDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub extent: (f64, f64),
    pub instances: Vec<GroundTruthInstance<f64>>,
}

impl Scene {
    pub fn gt_count(&self) -> usize {
        self.instances.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub extent: (f64, f64),
    pub num_classes: usize,
    /// `(count, weight)` pairs; weights sum to 1.
    pub gt_counts: Vec<(usize, f64)>,
    pub box_size: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: (100.0, 100.0),
            num_classes: 3,
            gt_counts: (1..=12).map(|k| (k, 1.0 / 12.0)).collect(),
            box_size: (8.0, 30.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SceneConfig(m.to_string()));
        if self.num_classes == 0 {
            return bad("class count must be at least 1");
        }
        if self.gt_counts.is_empty() {
            return bad("gt-count mixture is empty");
        }
        if self.gt_counts.iter().any(|&(_, w)| !(w >= 0.0) || !w.is_finite()) {
            return bad("gt-count weights must be finite and non-negative");
        }
        let total: f64 = self.gt_counts.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::SceneConfig(format!(
                "gt-count weights sum to {total}, expected 1"
            )));
        }
        let (lo, hi) = self.box_size;
        if !(lo > 0.0) || hi < lo {
            return bad("box size range must satisfy 0 < min <= max");
        }
        let (w, h) = self.extent;
        if !(w > 0.0 && h > 0.0) {
            return bad("extent must be positive");
        }
        if lo > w || lo > h {
            return Err(Error::SceneConfig(format!(
                "minimum box size {lo} exceeds extent {w}x{h}"
            )));
        }
        Ok(())
    }
}

/// Simulated RPN: jittered copies of each object plus uniform clutter.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnQualityModel {
    pub jitter_start: f64,
    pub jitter_end: f64,
    pub fg_per_gt: usize,
    pub bg_per_scene: usize,
    pub pos_threshold: f64,
}

impl Default for RpnQualityModel {
    fn default() -> Self {
        Self {
            jitter_start: 0.6,
            jitter_end: 0.03,
            fg_per_gt: 8,
            bg_per_scene: 56,
            pos_threshold: 0.5,
        }
    }
}

impl RpnQualityModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.jitter_start >= self.jitter_end
            && self.jitter_end >= 0.0
            && self.fg_per_gt >= 1
            && self.bg_per_scene >= 1
            && self.pos_threshold > 0.0
            && self.pos_threshold < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::SceneConfig(format!("invalid proposal model {self:?}")))
        }
    }

    /// Relative coordinate jitter at quality `q`.
    pub fn jitter(&self, q: f64) -> f64 {
        self.jitter_start + q * (self.jitter_end - self.jitter_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModel {
    /// Pure-noise dimensions appended after the class dimensions.
    pub noise_dims: usize,
    pub noise_std: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        Self {
            noise_dims: 8,
            noise_std: 0.25,
        }
    }
}

impl FeatureModel {
    pub fn dim(&self, num_classes: usize) -> usize {
        num_classes + self.noise_dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox<f64>,
    pub feature: Vec<f64>,
    pub label: ProposalLabel<f64>,
}

/// Proposal quality at step `t` of `total`: linear from 0 to 1.
pub fn quality_at(t: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    t.min(total) as f64 / total as f64
}

/// Seed of scene `id` under base seed `base`.
pub fn scene_seed(base: u64, id: u64) -> u64 {
    derive_seed(base ^ id, &[stream::SCENE])
}

pub fn generate_scene(config: &SceneConfig, id: u64, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_from(seed);
    let weights = WeightedIndex::new(config.gt_counts.iter().map(|&(_, w)| w))
        .map_err(|e| Error::SceneConfig(e.to_string()))?;
    let count = config.gt_counts[weights.sample(&mut rng)].0;
    let instances = (0..count)
        .map(|_| {
            let bbox = random_box(&mut rng, config.extent, config.box_size);
            let class = rng.gen_range(1..=config.num_classes);
            GroundTruthInstance::new(bbox, class)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        id,
        extent: config.extent,
        instances,
    })
}

/// Generates scenes `first_id..first_id + n` from per-scene derived seeds.
pub fn generate_scenes(
    config: &SceneConfig,
    first_id: u64,
    n: usize,
    base: u64,
) -> Result<Vec<Scene>> {
    (first_id..first_id + n as u64)
        .map(|id| generate_scene(config, id, scene_seed(base, id)))
        .collect()
}

fn random_box(rng: &mut impl Rng, extent: (f64, f64), size: (f64, f64)) -> BBox<f64> {
    let (w_max, h_max) = (size.1.min(extent.0), size.1.min(extent.1));
    let bw = rng.gen_range(size.0..=w_max.max(size.0));
    let bh = rng.gen_range(size.0..=h_max.max(size.0));
    let x1 = rng.gen_range(0.0..=(extent.0 - bw).max(0.0));
    let y1 = rng.gen_range(0.0..=(extent.1 - bh).max(0.0));
    BBox::new(x1, y1, x1 + bw, y1 + bh).expect("sampled box is valid")
}

fn jitter_interval(rng: &mut impl Rng, lo: f64, hi: f64, std: f64, limit: f64) -> (f64, f64) {
    if std == 0.0 {
        return (lo, hi);
    }
    let noise = Normal::new(0.0, std).expect("finite jitter");
    let a = lo + noise.sample(rng);
    let b = hi + noise.sample(rng);
    let (mut a, mut b) = (a.min(b).clamp(0.0, limit), a.max(b).clamp(0.0, limit));
    if b - a < MIN_SIDE {
        let c = (0.5 * (a + b)).clamp(0.5 * MIN_SIDE, limit - 0.5 * MIN_SIDE);
        a = c - 0.5 * MIN_SIDE;
        b = c + 0.5 * MIN_SIDE;
    }
    (a, b)
}

/// Proposals for `scene` at quality `q`: `fg_per_gt` jittered copies of each
/// object (object-major order) followed by `bg_per_scene` uniform boxes with
/// object-sized extents, all labeled against the scene's objects and
/// featurized.
pub fn generate_proposals(
    scene: &Scene,
    config: &SceneConfig,
    q: f64,
    model: &RpnQualityModel,
    features: &FeatureModel,
    seed: u64,
) -> Vec<Proposal> {
    let mut rng = rng_from(seed);
    let sigma = model.jitter(q.clamp(0.0, 1.0));
    let (ew, eh) = scene.extent;
    let mut boxes = Vec::with_capacity(scene.gt_count() * model.fg_per_gt + model.bg_per_scene);
    for gt in &scene.instances {
        let g = gt.bbox;
        for _ in 0..model.fg_per_gt {
            let (x1, x2) = jitter_interval(&mut rng, g.x1(), g.x2(), sigma * g.width(), ew);
            let (y1, y2) = jitter_interval(&mut rng, g.y1(), g.y2(), sigma * g.height(), eh);
            boxes.push(BBox::new(x1, y1, x2, y2).expect("jittered box is valid"));
        }
    }
    for _ in 0..model.bg_per_scene {
        boxes.push(random_box(&mut rng, scene.extent, config.box_size));
    }
    let labels = label_proposals(&boxes, &scene.instances, model.pos_threshold);
    boxes
        .into_iter()
        .zip(labels)
        .map(|(bbox, label)| Proposal {
            feature: proposal_features(&label, config.num_classes, features, &mut rng),
            bbox,
            label,
        })
        .collect()
}

/// Feature vector of dimension `C + noise_dims` for a labeled proposal.
pub fn proposal_features(
    label: &ProposalLabel<f64>,
    num_classes: usize,
    model: &FeatureModel,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut f = vec![0.0; model.dim(num_classes)];
    if model.noise_std > 0.0 {
        let noise = Normal::new(0.0, model.noise_std).expect("finite noise");
        for v in f.iter_mut() {
            *v = noise.sample(rng);
        }
    }
    if label.is_positive() {
        f[label.class_id - 1] += label.max_iou;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::metrics::spearman;

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        generate_scenes(&SceneConfig::default(), 0, n, seed).unwrap()
    }

    fn proposals(s: &Scene, q: f64, m: &RpnQualityModel) -> Vec<Proposal> {
        generate_proposals(s, &SceneConfig::default(), q, m, &FeatureModel::default(), s.id)
    }

    #[test]
    fn fixed_count_scene_is_inside_extent() {
        let cfg = SceneConfig {
            gt_counts: vec![(3, 1.0)],
            ..Default::default()
        };
        let s = generate_scene(&cfg, 0, 11).unwrap();
        assert_eq!(s.gt_count(), 3);
        for g in &s.instances {
            let [x1, y1, x2, y2] = g.bbox.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 100.0 && y2 <= 100.0);
            assert!((1..=3).contains(&g.class_id()));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(
            generate_scene(&cfg, 4, 99).unwrap(),
            generate_scene(&cfg, 4, 99).unwrap()
        );
        let s = generate_scene(&cfg, 4, 99).unwrap();
        let m = RpnQualityModel::default();
        let f = FeatureModel::default();
        let a = generate_proposals(&s, &cfg, 0.4, &m, &f, 5);
        let b = generate_proposals(&s, &cfg, 0.4, &m, &f, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let too_big = SceneConfig {
            extent: (5.0, 5.0),
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(&too_big, 0, 0),
            Err(Error::SceneConfig(_))
        ));
        let bad_weights = SceneConfig {
            gt_counts: vec![(1, 0.3), (2, 0.3)],
            ..Default::default()
        };
        assert!(bad_weights.validate().is_err());
        let no_classes = SceneConfig {
            num_classes: 0,
            ..Default::default()
        };
        assert!(no_classes.validate().is_err());
    }

    #[test]
    fn mixture_frequencies_match_weights() {
        let cfg = SceneConfig {
            gt_counts: vec![(1, 0.5), (8, 0.5)],
            ..Default::default()
        };
        let ss = generate_scenes(&cfg, 0, 10_000, 3).unwrap();
        let ones = ss.iter().filter(|s| s.gt_count() == 1).count() as f64 / 1e4;
        let eights = ss.iter().filter(|s| s.gt_count() == 8).count() as f64 / 1e4;
        assert!((ones - 0.5).abs() < 0.02, "{ones}");
        assert!((eights - 0.5).abs() < 0.02, "{eights}");
    }

    #[test]
    fn quality_is_linear() {
        assert_eq!(quality_at(0, 100), 0.0);
        assert_eq!(quality_at(100, 100), 1.0);
        assert_eq!(quality_at(50, 100), 0.5);
    }

    #[test]
    fn zero_jitter_reproduces_every_object() {
        let model = RpnQualityModel {
            jitter_end: 0.0,
            ..Default::default()
        };
        for s in scenes(50, 1) {
            let props = proposals(&s, 1.0, &model);
            for gt in &s.instances {
                assert!(props.iter().any(|p| iou(&p.bbox, &gt.bbox) == 1.0));
            }
        }
    }

    #[test]
    fn empty_scene_gives_only_background() {
        let s = Scene {
            id: 0,
            extent: (100.0, 100.0),
            instances: vec![],
        };
        let m = RpnQualityModel::default();
        let props = proposals(&s, 0.5, &m);
        assert_eq!(props.len(), m.bg_per_scene);
        assert!(props.iter().all(|p| p.label.class_id == 0));
    }

    #[test]
    fn early_proposals_are_poor() {
        // Mean over objects of the best IoU among the object's jittered copies.
        let m = RpnQualityModel::default();
        let (mut sum, mut n) = (0.0, 0usize);
        for s in scenes(1000, 5) {
            let props = proposals(&s, 0.0, &m);
            for (j, gt) in s.instances.iter().enumerate() {
                let copies = &props[j * m.fg_per_gt..(j + 1) * m.fg_per_gt];
                let best = copies
                    .iter()
                    .map(|p| iou(&p.bbox, &gt.bbox))
                    .fold(0.0, f64::max);
                sum += best;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.5, "mean per-object best IoU {mean}");
    }

    #[test]
    fn positives_grow_with_quality() {
        let m = RpnQualityModel::default();
        let ss = scenes(400, 8);
        let means: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&q| {
                let total: usize = ss
                    .iter()
                    .map(|s| proposals(s, q, &m).iter().filter(|p| p.label.is_positive()).count())
                    .sum();
                total as f64 / ss.len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    }

    #[test]
    fn object_count_correlates_with_positives() {
        let m = RpnQualityModel::default();
        let (gts, pos): (Vec<f64>, Vec<f64>) = scenes(2000, 21)
            .iter()
            .map(|s| {
                let p = proposals(s, 1.0, &m);
                (
                    s.gt_count() as f64,
                    p.iter().filter(|p| p.label.is_positive()).count() as f64,
                )
            })
            .unzip();
        let rho = spearman(&gts, &pos);
        assert!(rho > 0.5, "rho {rho}");
    }

    #[test]
    fn feature_layout() {
        let model = FeatureModel {
            noise_dims: 4,
            noise_std: 0.0,
        };
        let mut rng = rng_from(0);
        let bg = proposal_features(&ProposalLabel::background(), 3, &model, &mut rng);
        assert_eq!(bg, vec![0.0; 7]);
        let pos = ProposalLabel {
            class_id: 2,
            max_iou: 1.0,
            matched_gt: Some(0),
            nearest_class: Some(2),
            regression_target: Some([0.0; 4]),
        };
        let f = proposal_features(&pos, 3, &model, &mut rng);
        assert_eq!(&f[..3], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn feature_noise_has_configured_spread() {
        let model = FeatureModel {
            noise_dims: 1,
            noise_std: 0.3,
        };
        let mut rng = rng_from(17);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| proposal_features(&ProposalLabel::background(), 1, &model, &mut rng)[1])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var.sqrt() / 0.3 - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }
}
