//! Experiment configuration: flat TOML sections of `key = value` pairs.
//!
//! Omitted keys take the desk-scale defaults; unknown keys are rejected.
//! Only `experiment.seed` is required.
//!
//! ```toml
//! [experiment]
//! seed = 7
//! out_dir = "runs/rga"      # optional
//!
//! [data]                    # extent, num_classes, gt_counts, box_size,
//!                           # train_scenes, eval_scenes, scenes_per_step
//! [rpn]                     # jitter_start, jitter_end, fg_per_gt, bg_per_scene, pos_threshold
//! [features]                # noise_dims, noise_std
//! [sampling]                # batch_size, mode = "soft" | "hard", ratio = "1:3"
//! [prm]                     # enabled, ratios = ["1:1", "1:9"]
//! [rga]                     # enabled, lambda0, anneal
//! [train]                   # lr, total_steps, hidden, init_scale, cls_weight, reg_weight,
//!                           # decay_points, decay_factor, log_every
//! [eval]                    # iou_thresholds, score_floor, max_dets, nms_iou
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::metrics::EvalSettings;
use crate::net::TrainConfig;
use crate::rga::AnnealSchedule;
use crate::sampler::{Ratio, SamplingMode, SamplingPolicy};
use crate::synthdata::{FeatureModel, RpnQualityModel, SceneConfig};

/// Which of the two mechanisms a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Rga,
    Prm,
    RgaPrm,
}

impl Mode {
    pub fn rga(self) -> bool {
        matches!(self, Mode::Rga | Mode::RgaPrm)
    }

    pub fn prm(self) -> bool {
        matches!(self, Mode::Prm | Mode::RgaPrm)
    }

    fn from_flags(rga: bool, prm: bool) -> Self {
        match (rga, prm) {
            (false, false) => Mode::Baseline,
            (true, false) => Mode::Rga,
            (false, true) => Mode::Prm,
            (true, true) => Mode::RgaPrm,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "rga" => Ok(Mode::Rga),
            "prm" => Ok(Mode::Prm),
            "rga+prm" => Ok(Mode::RgaPrm),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}, expected baseline, rga, prm or rga+prm"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Rga => "rga",
            Mode::Prm => "prm",
            Mode::RgaPrm => "rga+prm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgaSettings {
    pub lambda0: f64,
    pub anneal: bool,
}

/// How the training and evaluation sets are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub rpn: RpnQualityModel,
    pub features: FeatureModel,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Minimum scenes pooled per step; more are added until the pool
    /// holds a full batch.
    pub scenes_per_step: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            rpn: RpnQualityModel::default(),
            features: FeatureModel::default(),
            train_scenes: 2000,
            eval_scenes: 500,
            scenes_per_step: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Policy of the single head, and mode/batch size of every PRM head.
    pub sampling: SamplingPolicy,
    /// Per-head ratios when parallel heads are enabled.
    pub prm: Option<Vec<Ratio>>,
    pub rga: Option<RgaSettings>,
    pub train: TrainConfig,
    pub log_every: usize,
    pub eval: EvalSettings,
    /// Ratios and λ0 kept while a mechanism is disabled, so a mode switch
    /// can turn it back on with the configured values.
    prm_ratios: Vec<Ratio>,
    rga_settings: RgaSettings,
}

pub const DEFAULT_LAMBDA0: f64 = 7.0;

fn default_prm_ratios() -> Vec<Ratio> {
    vec![Ratio { pos: 1, neg: 1 }, Ratio { pos: 1, neg: 9 }]
}

impl ExperimentConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        let rga_settings = RgaSettings {
            lambda0: DEFAULT_LAMBDA0,
            anneal: true,
        };
        Self {
            seed,
            out_dir: None,
            data: DataConfig::default(),
            sampling: SamplingPolicy::new(SamplingMode::Soft, Ratio { pos: 1, neg: 3 }, 512)
                .expect("default policy is valid"),
            prm: None,
            rga: None,
            train: TrainConfig::default(),
            log_every: 1,
            eval: EvalSettings::default(),
            prm_ratios: default_prm_ratios(),
            rga_settings,
        }
    }

    pub fn mode(&self) -> Mode {
        Mode::from_flags(self.rga.is_some(), self.prm.is_some())
    }

    /// Switches mechanisms on or off, keeping their configured settings.
    pub fn set_mode(&mut self, mode: Mode) {
        self.rga = mode.rga().then_some(self.rga_settings);
        self.prm = mode.prm().then(|| self.prm_ratios.clone());
    }

    pub fn set_lambda0(&mut self, lambda0: f64) {
        self.rga_settings.lambda0 = lambda0;
        if let Some(r) = &mut self.rga {
            r.lambda0 = lambda0;
        }
    }

    pub fn set_prm_ratios(&mut self, ratios: Vec<Ratio>) {
        self.prm_ratios = ratios.clone();
        if self.prm.is_some() {
            self.prm = Some(ratios);
        }
    }

    pub fn set_sampling_mode(&mut self, mode: SamplingMode) {
        self.sampling.mode = mode;
    }

    /// One policy per head.
    pub fn head_policies(&self) -> Result<Vec<SamplingPolicy>> {
        match &self.prm {
            None => Ok(vec![self.sampling]),
            Some(ratios) => ratios
                .iter()
                .map(|&r| SamplingPolicy::new(self.sampling.mode, r, self.sampling.batch_size))
                .collect(),
        }
    }

    pub fn schedule(&self) -> Result<AnnealSchedule> {
        let t = self.train.total_steps;
        match self.rga {
            None => Ok(AnnealSchedule::off(t)),
            Some(r) if r.anneal => AnnealSchedule::new(r.lambda0, t),
            Some(r) => AnnealSchedule::constant(r.lambda0, t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.data.rpn.validate()?;
        if self.data.features.noise_std < 0.0 || !self.data.features.noise_std.is_finite() {
            return Err(Error::Config("features.noise_std must be a finite value >= 0".into()));
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 || self.data.scenes_per_step == 0 {
            return Err(Error::Config("scene counts must be at least 1".into()));
        }
        self.train.validate()?;
        if self.log_every == 0 {
            return Err(Error::Config("train.log_every must be at least 1".into()));
        }
        self.head_policies()?;
        if let Some(r) = &self.prm {
            if r.is_empty() {
                return Err(Error::Config("prm.ratios must not be empty".into()));
            }
        }
        self.schedule()?;
        let e = &self.eval;
        if e.iou_thresholds.is_empty() || e.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("eval.iou_thresholds must lie in (0, 1)".into()));
        }
        if !(e.nms_iou > 0.0 && e.nms_iou < 1.0) || e.max_dets == 0 || !(0.0..1.0).contains(&e.score_floor) {
            return Err(Error::Config("invalid eval settings".into()));
        }
        Ok(())
    }

    /// Canonical TOML of every field that influences results, with disabled
    /// mechanisms' settings omitted. The output directory is not included.
    pub fn canonical(&self) -> String {
        toml::to_string(&RawConfig::from_config(self, false)).expect("config serializes")
    }

    /// Full config as TOML, including settings of disabled mechanisms.
    pub fn to_toml(&self) -> String {
        toml::to_string(&RawConfig::from_config(self, true)).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Hash of the fields that determine the generated datasets.
    pub fn data_hash(&self) -> String {
        let full = RawConfig::from_config(self, false);
        let raw = RawConfig {
            experiment: full.experiment,
            data: full.data,
            rpn: full.rpn,
            features: full.features,
            ..RawConfig::default()
        };
        let text = toml::to_string(&raw).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: RawExperiment,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    rpn: RawRpn,
    #[serde(default)]
    features: RawFeatures,
    #[serde(default)]
    sampling: RawSampling,
    #[serde(default)]
    prm: RawPrm,
    #[serde(default)]
    rga: RawRga,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    eval: RawEval,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    extent: Option<[f64; 2]>,
    num_classes: Option<usize>,
    gt_counts: Option<Vec<(usize, f64)>>,
    box_size: Option<[f64; 2]>,
    train_scenes: Option<usize>,
    eval_scenes: Option<usize>,
    scenes_per_step: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRpn {
    jitter_start: Option<f64>,
    jitter_end: Option<f64>,
    fg_per_gt: Option<usize>,
    bg_per_scene: Option<usize>,
    pos_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawFeatures {
    noise_dims: Option<usize>,
    noise_std: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawSampling {
    batch_size: Option<usize>,
    mode: Option<Spanned<String>>,
    ratio: Option<Spanned<String>>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawPrm {
    enabled: Option<bool>,
    ratios: Option<Vec<Spanned<String>>>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRga {
    enabled: Option<bool>,
    lambda0: Option<f64>,
    anneal: Option<bool>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    total_steps: Option<usize>,
    hidden: Option<usize>,
    init_scale: Option<f64>,
    cls_weight: Option<f64>,
    reg_weight: Option<f64>,
    decay_points: Option<Vec<f64>>,
    decay_factor: Option<f64>,
    log_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    iou_thresholds: Option<Vec<f64>>,
    score_floor: Option<f64>,
    max_dets: Option<usize>,
    nms_iou: Option<f64>,
}

fn spanned(s: impl Into<String>) -> Spanned<String> {
    Spanned::new(0..0, s.into())
}

impl RawConfig {
    fn from_config(c: &ExperimentConfig, full: bool) -> Self {
        let d = &c.data;
        let rga = if full { Some(c.rga_settings) } else { c.rga };
        let ratios = if full { Some(c.prm_ratios.clone()) } else { c.prm.clone() };
        RawConfig {
            experiment: RawExperiment {
                seed: Some(c.seed),
                out_dir: if full { c.out_dir.clone() } else { None },
            },
            data: RawData {
                extent: Some([d.scene.extent.0, d.scene.extent.1]),
                num_classes: Some(d.scene.num_classes),
                gt_counts: Some(d.scene.gt_counts.clone()),
                box_size: Some([d.scene.box_size.0, d.scene.box_size.1]),
                train_scenes: Some(d.train_scenes),
                eval_scenes: Some(d.eval_scenes),
                scenes_per_step: Some(d.scenes_per_step),
            },
            rpn: RawRpn {
                jitter_start: Some(d.rpn.jitter_start),
                jitter_end: Some(d.rpn.jitter_end),
                fg_per_gt: Some(d.rpn.fg_per_gt),
                bg_per_scene: Some(d.rpn.bg_per_scene),
                pos_threshold: Some(d.rpn.pos_threshold),
            },
            features: RawFeatures {
                noise_dims: Some(d.features.noise_dims),
                noise_std: Some(d.features.noise_std),
            },
            sampling: RawSampling {
                batch_size: Some(c.sampling.batch_size),
                mode: Some(spanned(c.sampling.mode.to_string())),
                ratio: Some(spanned(c.sampling.ratio.to_string())),
            },
            prm: RawPrm {
                enabled: Some(c.prm.is_some()),
                ratios: ratios.map(|r| r.iter().map(|x| spanned(x.to_string())).collect()),
            },
            rga: RawRga {
                enabled: Some(c.rga.is_some()),
                lambda0: rga.map(|r| r.lambda0),
                anneal: rga.map(|r| r.anneal),
            },
            train: RawTrain {
                lr: Some(c.train.lr),
                total_steps: Some(c.train.total_steps),
                hidden: Some(c.train.hidden),
                init_scale: Some(c.train.init_scale),
                cls_weight: Some(c.train.cls_weight),
                reg_weight: Some(c.train.reg_weight),
                decay_points: Some(c.train.decay_points.clone()),
                decay_factor: Some(c.train.decay_factor),
                log_every: Some(c.log_every),
            },
            eval: RawEval {
                iou_thresholds: Some(c.eval.iou_thresholds.clone()),
                score_floor: Some(c.eval.score_floor),
                max_dets: Some(c.eval.max_dets),
                nms_iou: Some(c.eval.nms_iou),
            },
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "config",
        line,
        msg: msg.into(),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with_seed(text, None)
}

/// [`parse_config`] where `seed`, when given, replaces `experiment.seed`
/// and makes it optional in the document.
pub fn parse_config_with_seed(text: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        config_err(line, e.message().trim().to_string())
    })?;
    let at = |s: &Spanned<String>| line_of(text, s.span().start);
    let ratio = |s: &Spanned<String>| {
        s.get_ref()
            .parse::<Ratio>()
            .map_err(|e| config_err(at(s), e.to_string()))
    };

    let seed = seed
        .or(raw.experiment.seed)
        .ok_or_else(|| config_err(0, "missing required key experiment.seed"))?;
    let mut c = ExperimentConfig::with_seed(seed);
    c.out_dir = raw.experiment.out_dir;

    let d = raw.data;
    let s = &mut c.data.scene;
    if let Some([w, h]) = d.extent {
        s.extent = (w, h);
    }
    s.num_classes = d.num_classes.unwrap_or(s.num_classes);
    if let Some(g) = d.gt_counts {
        s.gt_counts = g;
    }
    if let Some([lo, hi]) = d.box_size {
        s.box_size = (lo, hi);
    }
    c.data.train_scenes = d.train_scenes.unwrap_or(c.data.train_scenes);
    c.data.eval_scenes = d.eval_scenes.unwrap_or(c.data.eval_scenes);
    c.data.scenes_per_step = d.scenes_per_step.unwrap_or(c.data.scenes_per_step);

    let r = raw.rpn;
    let m = &mut c.data.rpn;
    m.jitter_start = r.jitter_start.unwrap_or(m.jitter_start);
    m.jitter_end = r.jitter_end.unwrap_or(m.jitter_end);
    m.fg_per_gt = r.fg_per_gt.unwrap_or(m.fg_per_gt);
    m.bg_per_scene = r.bg_per_scene.unwrap_or(m.bg_per_scene);
    m.pos_threshold = r.pos_threshold.unwrap_or(m.pos_threshold);

    let f = &mut c.data.features;
    f.noise_dims = raw.features.noise_dims.unwrap_or(f.noise_dims);
    f.noise_std = raw.features.noise_std.unwrap_or(f.noise_std);

    let sm = raw.sampling;
    let mode = match &sm.mode {
        Some(m) => m
            .get_ref()
            .parse::<SamplingMode>()
            .map_err(|e| config_err(at(m), e.to_string()))?,
        None => c.sampling.mode,
    };
    let ratio_v = match &sm.ratio {
        Some(r) => ratio(r)?,
        None => c.sampling.ratio,
    };
    let batch = sm.batch_size.unwrap_or(c.sampling.batch_size);
    c.sampling = SamplingPolicy::new(mode, ratio_v, batch).map_err(|e| {
        let line = sm.batch_size.map_or(0, |_| {
            text.lines().position(|l| l.trim_start().starts_with("batch_size")).map_or(0, |i| i + 1)
        });
        config_err(line, e.to_string())
    })?;

    if let Some(rs) = &raw.prm.ratios {
        c.prm_ratios = rs.iter().map(ratio).collect::<Result<_>>()?;
    }
    if raw.prm.enabled.unwrap_or(false) {
        c.prm = Some(c.prm_ratios.clone());
    }

    c.rga_settings = RgaSettings {
        lambda0: raw.rga.lambda0.unwrap_or(DEFAULT_LAMBDA0),
        anneal: raw.rga.anneal.unwrap_or(true),
    };
    if raw.rga.enabled.unwrap_or(false) {
        c.rga = Some(c.rga_settings);
    }

    let t = raw.train;
    let tc = &mut c.train;
    tc.lr = t.lr.unwrap_or(tc.lr);
    tc.total_steps = t.total_steps.unwrap_or(tc.total_steps);
    tc.hidden = t.hidden.unwrap_or(tc.hidden);
    tc.init_scale = t.init_scale.unwrap_or(tc.init_scale);
    tc.cls_weight = t.cls_weight.unwrap_or(tc.cls_weight);
    tc.reg_weight = t.reg_weight.unwrap_or(tc.reg_weight);
    if let Some(p) = t.decay_points {
        tc.decay_points = p;
    }
    tc.decay_factor = t.decay_factor.unwrap_or(tc.decay_factor);
    c.log_every = t.log_every.unwrap_or(c.log_every);

    let e = raw.eval;
    if let Some(th) = e.iou_thresholds {
        c.eval.iou_thresholds = th;
    }
    c.eval.score_floor = e.score_floor.unwrap_or(c.eval.score_floor);
    c.eval.max_dets = e.max_dets.unwrap_or(c.eval.max_dets);
    c.eval.nms_iou = e.nms_iou.unwrap_or(c.eval.nms_iou);

    c.validate()?;
    Ok(c)
}
