//! Run configuration: one flat `key = value` namespace shared by the config
//! file, the CLI flags (every key doubles as `--key value`), and the echoed
//! `config.echo` written into each run directory. Precedence is
//! CLI > file > profile defaults; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::fusion::{BranchSelect, FusionMode, FusionWeights};
use crate::gsma::ShuffleOrder;
use crate::metrics::EvalConfig;
use crate::network::{GsmaSettings, NetworkConfig, ShuffleGroups};
use crate::supervision::LossWeights;

/// One config key: name, default shown in help, description.
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "seed", help: "master RNG seed" },
    KeySpec { name: "image_size", help: "square image side in pixels, multiple of 32" },
    KeySpec { name: "n_train", help: "training pairs to generate" },
    KeySpec { name: "n_test", help: "test pairs to generate" },
    KeySpec { name: "objects_min", help: "minimum objects per image" },
    KeySpec { name: "objects_max", help: "maximum objects per image" },
    KeySpec { name: "p_both", help: "probability an object shows in both modalities" },
    KeySpec { name: "p_visible_only", help: "probability an object is visible-only" },
    KeySpec { name: "p_thermal_only", help: "probability an object is thermal-only" },
    KeySpec { name: "misalignment_max_px", help: "max per-object thermal shift in pixels" },
    KeySpec { name: "night_fraction", help: "fraction of night-mode images" },
    KeySpec { name: "num_classes", help: "object classes" },
    KeySpec { name: "base_width", help: "backbone channels at P1" },
    KeySpec { name: "shuffle_groups", help: "group shuffle K, or C for one group per channel" },
    KeySpec { name: "spc_kernels", help: "SPC kernel sizes, comma list" },
    KeySpec { name: "spc_groups", help: "SPC requested group counts, comma list" },
    KeySpec { name: "se_reduction", help: "SE bottleneck reduction ratio" },
    KeySpec { name: "cross_scale_softmax", help: "normalize SE weights across SPC branches" },
    KeySpec { name: "gs_before_ma", help: "run group shuffle before the attention paths" },
    KeySpec { name: "gsma_enabled", help: "GSMA at P3/P4 (false = plain concatenation)" },
    KeySpec { name: "ms_enabled", help: "multi-modal supervision branches and seg heads" },
    KeySpec { name: "lambda_cls", help: "classification loss weight" },
    KeySpec { name: "lambda_obj", help: "objectness loss weight" },
    KeySpec { name: "lambda_bbox", help: "box regression loss weight" },
    KeySpec { name: "lambda_seg", help: "segmentation loss weight" },
    KeySpec { name: "fusion_weights", help: "decision fusion weights: fusion,visible,thermal" },
    KeySpec { name: "score_thresh", help: "detection score threshold at evaluation" },
    KeySpec { name: "nms_iou", help: "NMS IoU threshold" },
    KeySpec { name: "fusion_mode", help: "slotwise or list decision fusion" },
    KeySpec { name: "branch", help: "evaluation branch: fused, fusion, visible, thermal" },
    KeySpec { name: "iou_match", help: "IoU threshold for metric matching" },
    KeySpec { name: "lr", help: "SGD learning rate" },
    KeySpec { name: "momentum", help: "SGD momentum" },
    KeySpec { name: "weight_decay", help: "SGD weight decay" },
    KeySpec { name: "batch_size", help: "training batch size" },
    KeySpec { name: "steps", help: "optimizer steps" },
    KeySpec { name: "ckpt_every", help: "steps between periodic checkpoints" },
    KeySpec { name: "flip_prob", help: "horizontal flip probability at train time" },
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub p_both: f64,
    pub p_visible_only: f64,
    pub p_thermal_only: f64,
    pub misalignment_max_px: f64,
    pub night_fraction: f64,
    pub num_classes: usize,
    pub base_width: usize,
    pub shuffle_groups: String,
    pub spc_kernels: Vec<usize>,
    pub spc_groups: Vec<usize>,
    pub se_reduction: usize,
    pub cross_scale_softmax: bool,
    pub gs_before_ma: bool,
    pub gsma_enabled: bool,
    pub ms_enabled: bool,
    pub lambda_cls: f64,
    pub lambda_obj: f64,
    pub lambda_bbox: f64,
    pub lambda_seg: f64,
    pub fusion_weights: (f64, f64, f64),
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub fusion_mode: String,
    pub branch: String,
    pub iou_match: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ckpt_every: usize,
    pub flip_prob: f64,
}

impl Default for RunConfig {
    /// The toy profile: trains on a commodity CPU in minutes.
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_size: 256,
            n_train: 500,
            n_test: 100,
            objects_min: 1,
            objects_max: 6,
            p_both: 0.7,
            p_visible_only: 0.15,
            p_thermal_only: 0.15,
            misalignment_max_px: 4.0,
            night_fraction: 0.4,
            num_classes: 3,
            base_width: 16,
            shuffle_groups: "16".into(),
            spc_kernels: vec![3, 5, 7, 9],
            spc_groups: vec![1, 4, 8, 16],
            se_reduction: 4,
            cross_scale_softmax: true,
            gs_before_ma: false,
            gsma_enabled: true,
            ms_enabled: true,
            lambda_cls: 0.5,
            lambda_obj: 1.0,
            lambda_bbox: 0.05,
            lambda_seg: 0.25,
            fusion_weights: (0.5, 0.25, 0.25),
            score_thresh: 0.001,
            nms_iou: 0.5,
            fusion_mode: "slotwise".into(),
            branch: "fused".into(),
            iou_match: 0.5,
            lr: 0.04,
            momentum: 0.937,
            weight_decay: 0.0001,
            batch_size: 8,
            steps: 300,
            ckpt_every: 100,
            flip_prob: 0.5,
        }
    }
}

impl RunConfig {
    /// Documentation preset with the reference hyperparameters (640px input,
    /// batch 6, lr 0.001, 150-epoch step budget); not a CPU-scale target.
    pub fn paper_profile() -> Self {
        RunConfig {
            image_size: 640,
            base_width: 64,
            batch_size: 6,
            lr: 0.001,
            steps: 177_375,
            ..Default::default()
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(RunConfig::default()),
            "paper" => Ok(RunConfig::paper_profile()),
            other => Err(Error::Usage(format!(
                "unknown profile `{other}` (expected toy or paper)"
            ))),
        }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        Ok(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "objects_min" => self.objects_min.to_string(),
            "objects_max" => self.objects_max.to_string(),
            "p_both" => self.p_both.to_string(),
            "p_visible_only" => self.p_visible_only.to_string(),
            "p_thermal_only" => self.p_thermal_only.to_string(),
            "misalignment_max_px" => self.misalignment_max_px.to_string(),
            "night_fraction" => self.night_fraction.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "base_width" => self.base_width.to_string(),
            "shuffle_groups" => self.shuffle_groups.clone(),
            "spc_kernels" => list(&self.spc_kernels),
            "spc_groups" => list(&self.spc_groups),
            "se_reduction" => self.se_reduction.to_string(),
            "cross_scale_softmax" => self.cross_scale_softmax.to_string(),
            "gs_before_ma" => self.gs_before_ma.to_string(),
            "gsma_enabled" => self.gsma_enabled.to_string(),
            "ms_enabled" => self.ms_enabled.to_string(),
            "lambda_cls" => self.lambda_cls.to_string(),
            "lambda_obj" => self.lambda_obj.to_string(),
            "lambda_bbox" => self.lambda_bbox.to_string(),
            "lambda_seg" => self.lambda_seg.to_string(),
            "fusion_weights" => format!(
                "{},{},{}",
                self.fusion_weights.0, self.fusion_weights.1, self.fusion_weights.2
            ),
            "score_thresh" => self.score_thresh.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "fusion_mode" => self.fusion_mode.clone(),
            "branch" => self.branch.clone(),
            "iou_match" => self.iou_match.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
        }
        fn plist(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| p::<usize>(key, x))
                .collect::<Result<Vec<_>>>()
        }
        let v = value.trim();
        match key {
            "seed" => self.seed = p(key, v)?,
            "image_size" => self.image_size = p(key, v)?,
            "n_train" => self.n_train = p(key, v)?,
            "n_test" => self.n_test = p(key, v)?,
            "objects_min" => self.objects_min = p(key, v)?,
            "objects_max" => self.objects_max = p(key, v)?,
            "p_both" => self.p_both = p(key, v)?,
            "p_visible_only" => self.p_visible_only = p(key, v)?,
            "p_thermal_only" => self.p_thermal_only = p(key, v)?,
            "misalignment_max_px" => self.misalignment_max_px = p(key, v)?,
            "night_fraction" => self.night_fraction = p(key, v)?,
            "num_classes" => self.num_classes = p(key, v)?,
            "base_width" => self.base_width = p(key, v)?,
            "shuffle_groups" => {
                if v != "C" {
                    let _: usize = p(key, v)?;
                }
                self.shuffle_groups = v.to_string();
            }
            "spc_kernels" => self.spc_kernels = plist(key, v)?,
            "spc_groups" => self.spc_groups = plist(key, v)?,
            "se_reduction" => self.se_reduction = p(key, v)?,
            "cross_scale_softmax" => self.cross_scale_softmax = p(key, v)?,
            "gs_before_ma" => self.gs_before_ma = p(key, v)?,
            "gsma_enabled" => self.gsma_enabled = p(key, v)?,
            "ms_enabled" => self.ms_enabled = p(key, v)?,
            "lambda_cls" => self.lambda_cls = p(key, v)?,
            "lambda_obj" => self.lambda_obj = p(key, v)?,
            "lambda_bbox" => self.lambda_bbox = p(key, v)?,
            "lambda_seg" => self.lambda_seg = p(key, v)?,
            "fusion_weights" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "fusion_weights needs 3 comma-separated values, got `{v}`"
                    )));
                }
                self.fusion_weights = (
                    p(key, parts[0])?,
                    p(key, parts[1])?,
                    p(key, parts[2])?,
                );
            }
            "score_thresh" => self.score_thresh = p(key, v)?,
            "nms_iou" => self.nms_iou = p(key, v)?,
            "fusion_mode" => {
                if !["slotwise", "list"].contains(&v) {
                    return Err(Error::Config(format!("bad fusion_mode `{v}`")));
                }
                self.fusion_mode = v.to_string();
            }
            "branch" => {
                if !["fused", "fusion", "visible", "thermal"].contains(&v) {
                    return Err(Error::Config(format!("bad branch `{v}`")));
                }
                self.branch = v.to_string();
            }
            "iou_match" => self.iou_match = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "momentum" => self.momentum = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "steps" => self.steps = p(key, v)?,
            "ckpt_every" => self.ckpt_every = p(key, v)?,
            "flip_prob" => self.flip_prob = p(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key in table order, the echo format.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(&format!("{} = {}\n", k.name, self.get(k.name).unwrap()));
        }
        s
    }

    /// Applies `key = value` lines; `#` starts a comment. Unknown keys and
    /// duplicate keys are rejected.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    ln + 1
                )));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key `{k}`",
                    path.display(),
                    ln + 1
                )));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.network_config(None)?.validate()?;
        self.loss_weights().validate()?;
        self.fusion_weight_struct().validate()?;
        self.eval_config().validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: (self.image_size, self.image_size),
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            p_both: self.p_both,
            p_visible_only: self.p_visible_only,
            p_thermal_only: self.p_thermal_only,
            misalignment_max_px: self.misalignment_max_px,
            night_fraction: self.night_fraction,
            seed: self.seed,
        }
    }

    pub fn network_config(&self, anchors: Option<[[(f64, f64); 3]; 3]>) -> Result<NetworkConfig> {
        let shuffle_groups = if self.shuffle_groups == "C" {
            ShuffleGroups::ChannelCount
        } else {
            ShuffleGroups::Count(self.shuffle_groups.parse().map_err(|_| {
                Error::Config(format!("bad shuffle_groups `{}`", self.shuffle_groups))
            })?)
        };
        let mut cfg = NetworkConfig::new(
            (self.image_size, self.image_size),
            self.num_classes,
            self.base_width,
        );
        cfg.gsma = GsmaSettings {
            shuffle_groups,
            spc_kernel_sizes: self.spc_kernels.clone(),
            spc_group_counts: self.spc_groups.clone(),
            se_reduction: self.se_reduction,
            cross_scale_softmax: self.cross_scale_softmax,
            shuffle_order: if self.gs_before_ma {
                ShuffleOrder::BeforeAttention
            } else {
                ShuffleOrder::AfterAttention
            },
        };
        cfg.use_gsma = self.gsma_enabled;
        cfg.ms_branches = self.ms_enabled;
        if let Some(a) = anchors {
            cfg.anchors = a;
        }
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_obj: self.lambda_obj,
            lambda_bbox: self.lambda_bbox,
            lambda_seg: self.lambda_seg,
        }
    }

    pub fn fusion_weight_struct(&self) -> FusionWeights {
        FusionWeights {
            fusion: self.fusion_weights.0,
            visible: self.fusion_weights.1,
            thermal: self.fusion_weights.2,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_match: self.iou_match,
            ..Default::default()
        }
    }

    pub fn fusion_mode_enum(&self) -> FusionMode {
        match self.fusion_mode.as_str() {
            "list" => FusionMode::DetectionList,
            _ => FusionMode::SlotWise,
        }
    }

    /// `None` means full decision fusion; otherwise a single branch.
    pub fn branch_select(&self) -> Option<BranchSelect> {
        match self.branch.as_str() {
            "fusion" => Some(BranchSelect::Fusion),
            "visible" => Some(BranchSelect::Visible),
            "thermal" => Some(BranchSelect::Thermal),
            _ => None,
        }
    }
}
