//! Run configuration: every knob of the pipeline with its default, plus the
//! flat `key=value` text format (one key per line, `#` comments).

use std::path::Path;

use crate::error::{Error, Result};
use crate::gam::GamConfig;
use crate::graphs::{SemanticKind, SemanticMetric};
use crate::synth::SceneSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // Dataset.
    pub image_h: usize,
    pub image_w: usize,
    pub scenes_train: usize,
    pub scenes_val: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub noise_amp: f64,
    pub class_probs: [f64; 3],
    pub n_per_gt: usize,
    pub n_bg: usize,
    pub jitter: f64,

    // Model dimensions.
    pub levels: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub roi_size: usize,
    pub temperature: f64,
    pub groups: usize,
    pub metric: SemanticKind,
    pub mlp_hidden: usize,
    pub canonical_size: f64,

    // Optimization and inference.
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub fg_iou: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,

    // Ablation toggles.
    pub enable_pixel: bool,
    pub enable_scale: bool,
    pub enable_roi: bool,
    pub enable_stage2: bool,
    pub share_head: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_h: 64,
            image_w: 64,
            scenes_train: 20,
            scenes_val: 8,
            objects_min: 1,
            objects_max: 5,
            size_min: 12.0,
            size_max: 28.0,
            noise_amp: 0.05,
            class_probs: [0.6, 0.3, 0.1],
            n_per_gt: 3,
            n_bg: 4,
            jitter: 0.1,
            levels: 3,
            channels: 32,
            feature_dim: 128,
            roi_size: 7,
            temperature: 2.0,
            groups: 2,
            metric: SemanticKind::GroupedDot,
            mlp_hidden: 16,
            canonical_size: 56.0,
            lr: 0.0005,
            momentum: 0.9,
            steps: 2000,
            eval_interval: 500,
            fg_iou: 0.5,
            score_thresh: 0.05,
            nms_iou: 0.5,
            enable_pixel: true,
            enable_scale: true,
            enable_roi: true,
            enable_stage2: true,
            share_head: true,
        }
    }
}

impl RunConfig {
    /// Parse the flat text format; `seed` is the one required key.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut saw_seed = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "seed" {
                saw_seed = true;
            }
            cfg.set(key, value)?;
        }
        if !saw_seed {
            return Err(Error::Config("missing required key: seed".to_string()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str) -> Error {
            Error::Config(format!("invalid value for key {key}: {value:?}"))
        }
        macro_rules! parse {
            ($field:expr, $key:expr, $value:expr) => {
                $field = $value.parse().map_err(|_| bad($key, $value))?
            };
        }
        match key {
            "seed" => parse!(self.seed, key, value),
            "image_h" => parse!(self.image_h, key, value),
            "image_w" => parse!(self.image_w, key, value),
            "scenes_train" => parse!(self.scenes_train, key, value),
            "scenes_val" => parse!(self.scenes_val, key, value),
            "objects_min" => parse!(self.objects_min, key, value),
            "objects_max" => parse!(self.objects_max, key, value),
            "size_min" => parse!(self.size_min, key, value),
            "size_max" => parse!(self.size_max, key, value),
            "noise_amp" => parse!(self.noise_amp, key, value),
            "class_probs" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad(key, value));
                }
                for (slot, part) in self.class_probs.iter_mut().zip(&parts) {
                    *slot = part.parse().map_err(|_| bad(key, value))?;
                }
            }
            "n_per_gt" => parse!(self.n_per_gt, key, value),
            "n_bg" => parse!(self.n_bg, key, value),
            "jitter" => parse!(self.jitter, key, value),
            "levels" => parse!(self.levels, key, value),
            "channels" => parse!(self.channels, key, value),
            "feature_dim" => parse!(self.feature_dim, key, value),
            "roi_size" => parse!(self.roi_size, key, value),
            "temperature" => parse!(self.temperature, key, value),
            "groups" => parse!(self.groups, key, value),
            "metric" => {
                self.metric = match value {
                    "dot" => SemanticKind::GroupedDot,
                    "cosine" => SemanticKind::GroupedCosine,
                    "euclid" => SemanticKind::GroupedEuclidean,
                    _ => return Err(bad(key, value)),
                }
            }
            "mlp_hidden" => parse!(self.mlp_hidden, key, value),
            "canonical_size" => parse!(self.canonical_size, key, value),
            "lr" => parse!(self.lr, key, value),
            "momentum" => parse!(self.momentum, key, value),
            "steps" => parse!(self.steps, key, value),
            "eval_interval" => parse!(self.eval_interval, key, value),
            "fg_iou" => parse!(self.fg_iou, key, value),
            "score_thresh" => parse!(self.score_thresh, key, value),
            "nms_iou" => parse!(self.nms_iou, key, value),
            "enable_pixel" => self.enable_pixel = parse_bool(key, value)?,
            "enable_scale" => self.enable_scale = parse_bool(key, value)?,
            "enable_roi" => self.enable_roi = parse_bool(key, value)?,
            "enable_stage2" => self.enable_stage2 = parse_bool(key, value)?,
            "share_head" => self.share_head = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("levels must be at least 2".to_string()));
        }
        let div = 1usize << (self.levels + 1);
        if self.image_h % div != 0 || self.image_w % div != 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by 2^(levels+1) = {div}",
                self.image_h, self.image_w
            )));
        }
        if self.image_h < 2 * div || self.image_w < 2 * div {
            return Err(Error::Config(format!(
                "image {}x{} too small for a {}-level pyramid",
                self.image_h, self.image_w, self.levels
            )));
        }
        if self.groups == 0
            || self.channels % self.groups != 0
            || self.feature_dim % self.groups != 0
        {
            return Err(Error::Config(format!(
                "groups {} must divide channels {} and feature_dim {}",
                self.groups, self.channels, self.feature_dim
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".to_string()));
        }
        if self.roi_size == 0 {
            return Err(Error::Config("roi_size must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".to_string()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be nonnegative".to_string()));
        }
        if self.scenes_train == 0 {
            return Err(Error::Config("scenes_train must be at least 1".to_string()));
        }
        if !(0.0 < self.fg_iou && self.fg_iou <= 1.0) {
            return Err(Error::Config("fg_iou must be in (0, 1]".to_string()));
        }
        self.scene_spec().validate()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.image_h,
            width: self.image_w,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            size_min: self.size_min,
            size_max: self.size_max,
            noise_amp: self.noise_amp,
            class_probs: self.class_probs,
            seed: self.seed,
        }
    }

    pub fn metric(&self) -> SemanticMetric {
        SemanticMetric::new(self.metric, self.groups)
    }

    /// GAM configuration for a graph whose nodes have width `feature_dim`.
    pub fn gam_config(&self, feature_dim: usize) -> GamConfig {
        GamConfig {
            temperature: self.temperature,
            metric: self.metric(),
            mlp_hidden: self.mlp_hidden,
            feature_dim,
        }
    }

    /// Canonical level for pyramid assignment (index of the second-coarsest).
    pub fn canonical_level(&self) -> usize {
        self.levels - 2
    }

    /// Per-level strides: 4, 8, ..., 2^(levels+1).
    pub fn strides(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|p| (1usize << (p + 2)) as f64)
            .collect()
    }

    /// Resolved configuration in the same text format we parse.
    pub fn to_text(&self) -> String {
        let metric = match self.metric {
            SemanticKind::GroupedDot => "dot",
            SemanticKind::GroupedCosine => "cosine",
            SemanticKind::GroupedEuclidean => "euclid",
        };
        format!(
            "seed={}\nimage_h={}\nimage_w={}\nscenes_train={}\nscenes_val={}\n\
             objects_min={}\nobjects_max={}\nsize_min={}\nsize_max={}\nnoise_amp={}\n\
             class_probs={},{},{}\nn_per_gt={}\nn_bg={}\njitter={}\n\
             levels={}\nchannels={}\nfeature_dim={}\nroi_size={}\ntemperature={}\n\
             groups={}\nmetric={}\nmlp_hidden={}\ncanonical_size={}\n\
             lr={}\nmomentum={}\nsteps={}\neval_interval={}\nfg_iou={}\n\
             score_thresh={}\nnms_iou={}\n\
             enable_pixel={}\nenable_scale={}\nenable_roi={}\nenable_stage2={}\nshare_head={}\n",
            self.seed,
            self.image_h,
            self.image_w,
            self.scenes_train,
            self.scenes_val,
            self.objects_min,
            self.objects_max,
            self.size_min,
            self.size_max,
            self.noise_amp,
            self.class_probs[0],
            self.class_probs[1],
            self.class_probs[2],
            self.n_per_gt,
            self.n_bg,
            self.jitter,
            self.levels,
            self.channels,
            self.feature_dim,
            self.roi_size,
            self.temperature,
            self.groups,
            metric,
            self.mlp_hidden,
            self.canonical_size,
            self.lr,
            self.momentum,
            self.steps,
            self.eval_interval,
            self.fg_iou,
            self.score_thresh,
            self.nms_iou,
            self.enable_pixel,
            self.enable_scale,
            self.enable_roi,
            self.enable_stage2,
            self.share_head,
        )
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value for key {key}: {value:?}"
        ))),
    }
}
