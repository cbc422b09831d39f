//! Dual-stream detector: five-stage backbones (P1-P5), GSMA fusion at P3/P4
//! with plain concatenation at P5, three PAN neck/head branches (visible,
//! thermal, fusion) and two auxiliary stride-8 segmentation heads that exist
//! only while multi-modal supervision is enabled.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array4, Array5};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gsma::{GsmaBlock, GsmaCache, GsmaConfig, ShuffleOrder};
use crate::nn::blocks::ConvBlockCache;
use crate::nn::ops::{concat_channels, split_channels, upsample2_backward, upsample2_forward};
use crate::nn::{Bottleneck, ConvBlock, Float, ParamVisitor, Parameterized};

/// Detection scale strides, P3/P4/P5.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Anchors per scale.
pub const ANCHORS_PER_SCALE: usize = 3;

/// How many shuffle groups a GSMA insertion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleGroups {
    Count(usize),
    /// The `K = C` ablation setting: one group per channel at each site.
    ChannelCount,
}

/// Width-independent GSMA settings; widened per insertion site.
#[derive(Debug, Clone)]
pub struct GsmaSettings {
    pub shuffle_groups: ShuffleGroups,
    pub spc_kernel_sizes: Vec<usize>,
    pub spc_group_counts: Vec<usize>,
    pub se_reduction: usize,
    pub cross_scale_softmax: bool,
    pub shuffle_order: ShuffleOrder,
}

impl Default for GsmaSettings {
    fn default() -> Self {
        let base = GsmaConfig::new(64);
        GsmaSettings {
            shuffle_groups: ShuffleGroups::Count(base.shuffle_groups),
            spc_kernel_sizes: base.spc_kernel_sizes,
            spc_group_counts: base.spc_group_counts,
            se_reduction: base.se_reduction,
            cross_scale_softmax: base.cross_scale_softmax,
            shuffle_order: base.shuffle_order,
        }
    }
}

impl GsmaSettings {
    pub fn for_channels(&self, c: usize) -> GsmaConfig {
        GsmaConfig {
            channels_per_modality: c,
            shuffle_groups: match self.shuffle_groups {
                ShuffleGroups::Count(k) => k,
                ShuffleGroups::ChannelCount => c,
            },
            spc_kernel_sizes: self.spc_kernel_sizes.clone(),
            spc_group_counts: self.spc_group_counts.clone(),
            se_reduction: self.se_reduction,
            cross_scale_softmax: self.cross_scale_softmax,
            shuffle_order: self.shuffle_order,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub input_size: (usize, usize),
    pub num_classes: usize,
    /// Channels at P1; stage `s` is `base_width * width_mult[s]` wide.
    pub base_width: usize,
    pub width_mult: [usize; 5],
    /// Conv units per stage including the stride-2 downsampler.
    pub stage_depth: [usize; 5],
    /// Pixel (w, h) anchor priors, three per scale in ascending area.
    pub anchors: [[(f64, f64); 3]; 3],
    pub gsma: GsmaSettings,
    /// `false` replaces GSMA at P3/P4 with plain channel concatenation.
    pub use_gsma: bool,
    /// `false` drops the visible/thermal branches and segmentation heads,
    /// leaving a single union-supervised fusion branch.
    pub ms_branches: bool,
}

impl NetworkConfig {
    pub fn new(input_size: (usize, usize), num_classes: usize, base_width: usize) -> Self {
        NetworkConfig {
            input_size,
            num_classes,
            base_width,
            width_mult: [1, 2, 4, 8, 16],
            stage_depth: [1, 2, 2, 3, 2],
            anchors: default_anchors(),
            gsma: GsmaSettings::default(),
            use_gsma: true,
            ms_branches: true,
        }
    }

    pub fn stage_widths(&self) -> [usize; 5] {
        let mut w = [0; 5];
        for s in 0..5 {
            w[s] = self.base_width * self.width_mult[s];
        }
        w
    }

    /// Per-stream widths at the three detection scales.
    pub fn pyramid_widths(&self) -> [usize; 3] {
        let w = self.stage_widths();
        [w[2], w[3], w[4]]
    }

    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_SCALE * (5 + self.num_classes)
    }

    /// Grid heights/widths at every detection scale.
    pub fn grid_sizes(&self) -> [(usize, usize); 3] {
        let (h, w) = self.input_size;
        [
            (h / STRIDES[0], w / STRIDES[0]),
            (h / STRIDES[1], w / STRIDES[1]),
            (h / STRIDES[2], w / STRIDES[2]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.base_width == 0 || self.width_mult.iter().any(|&m| m == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.stage_depth.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage depths must be positive".into()));
        }
        for scale in &self.anchors {
            for &(aw, ah) in scale {
                if aw <= 0.0 || ah <= 0.0 {
                    return Err(Error::Config("anchor sizes must be positive".into()));
                }
            }
        }
        if self.use_gsma {
            let [w3, w4, _] = self.pyramid_widths();
            self.gsma.for_channels(w3).validate()?;
            self.gsma.for_channels(w4).validate()?;
        }
        Ok(())
    }
}

impl NetworkConfig {
    /// Flat `key = value` serialization embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let join =
            |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s.push_str(&format!(
            "input_size = {}x{}\n",
            self.input_size.0, self.input_size.1
        ));
        s.push_str(&format!("num_classes = {}\n", self.num_classes));
        s.push_str(&format!("base_width = {}\n", self.base_width));
        s.push_str(&format!("width_mult = {}\n", join(&self.width_mult)));
        s.push_str(&format!("stage_depth = {}\n", join(&self.stage_depth)));
        let anchors: Vec<String> = self
            .anchors
            .iter()
            .flatten()
            .map(|(w, h)| format!("{w}x{h}"))
            .collect();
        s.push_str(&format!("anchors = {}\n", anchors.join(",")));
        s.push_str(&format!(
            "gsma_shuffle_groups = {}\n",
            match self.gsma.shuffle_groups {
                ShuffleGroups::Count(k) => k.to_string(),
                ShuffleGroups::ChannelCount => "C".to_string(),
            }
        ));
        s.push_str(&format!(
            "gsma_spc_kernels = {}\n",
            join(&self.gsma.spc_kernel_sizes)
        ));
        s.push_str(&format!(
            "gsma_spc_groups = {}\n",
            join(&self.gsma.spc_group_counts)
        ));
        s.push_str(&format!("gsma_se_reduction = {}\n", self.gsma.se_reduction));
        s.push_str(&format!(
            "gsma_cross_scale_softmax = {}\n",
            self.gsma.cross_scale_softmax
        ));
        s.push_str(&format!(
            "gsma_shuffle_order = {}\n",
            match self.gsma.shuffle_order {
                ShuffleOrder::AfterAttention => "after",
                ShuffleOrder::BeforeAttention => "before",
            }
        ));
        s.push_str(&format!("use_gsma = {}\n", self.use_gsma));
        s.push_str(&format!("ms_branches = {}\n", self.ms_branches));
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("config missing key {k}")))
        };
        let usize_of = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let bool_of = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let list_of = |k: &str, n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad list for {k}")))?;
            if n > 0 && v.len() != n {
                return Err(Error::Checkpoint(format!(
                    "{k} needs {n} entries, got {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let (hs, ws) = get("input_size")?
            .split_once('x')
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .ok_or_else(|| Error::Checkpoint("bad input_size".into()))?;
        let anchor_text = get("anchors")?;
        let parts: Vec<&str> = anchor_text.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Checkpoint("anchors must hold 9 entries".into()));
        }
        let mut anchors = [[(0.0, 0.0); 3]; 3];
        for (i, p) in parts.iter().enumerate() {
            let (w, h) = p
                .split_once('x')
                .ok_or_else(|| Error::Checkpoint("bad anchor entry".into()))?;
            anchors[i / 3][i % 3] = (
                w.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad anchor width".into()))?,
                h.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad anchor height".into()))?,
            );
        }
        let groups_text = get("gsma_shuffle_groups")?;
        let shuffle_groups = if groups_text == "C" {
            ShuffleGroups::ChannelCount
        } else {
            ShuffleGroups::Count(
                groups_text
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad gsma_shuffle_groups".into()))?,
            )
        };
        let order = match get("gsma_shuffle_order")?.as_str() {
            "after" => ShuffleOrder::AfterAttention,
            "before" => ShuffleOrder::BeforeAttention,
            other => {
                return Err(Error::Checkpoint(format!("bad shuffle order `{other}`")));
            }
        };
        let cfg = NetworkConfig {
            input_size: (
                hs.parse()
                    .map_err(|_| Error::Checkpoint("bad input height".into()))?,
                ws.parse()
                    .map_err(|_| Error::Checkpoint("bad input width".into()))?,
            ),
            num_classes: usize_of("num_classes")?,
            base_width: usize_of("base_width")?,
            width_mult: list_of("width_mult", 5)?.try_into().unwrap(),
            stage_depth: list_of("stage_depth", 5)?.try_into().unwrap(),
            anchors,
            gsma: GsmaSettings {
                shuffle_groups,
                spc_kernel_sizes: list_of("gsma_spc_kernels", 0)?,
                spc_group_counts: list_of("gsma_spc_groups", 0)?,
                se_reduction: usize_of("gsma_se_reduction")?,
                cross_scale_softmax: bool_of("gsma_cross_scale_softmax")?,
                shuffle_order: order,
            },
            use_gsma: bool_of("use_gsma")?,
            ms_branches: bool_of("ms_branches")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Anchor priors used before a dataset-specific k-means set is available.
pub fn default_anchors() -> [[(f64, f64); 3]; 3] {
    [
        [(20.0, 20.0), (32.0, 24.0), (24.0, 36.0)],
        [(48.0, 48.0), (72.0, 52.0), (52.0, 76.0)],
        [(96.0, 96.0), (144.0, 104.0), (104.0, 148.0)],
    ]
}

/// Stage outputs of one backbone stream at the detection scales.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F> {
    pub p3: Array4<F>,
    pub p4: Array4<F>,
    pub p5: Array4<F>,
}

/// Raw per-scale head outputs, shape `(B, A, Hs, Ws, 5 + num_classes)` each.
#[derive(Debug, Clone)]
pub struct DetectionGrid<F> {
    pub scales: Vec<Array5<F>>,
}

impl<F: Float> DetectionGrid<F> {
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.scales.len() == other.scales.len()
            && self
                .scales
                .iter()
                .zip(&other.scales)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

/// Everything the three branches emit for one input batch.
#[derive(Debug)]
pub struct BranchOutputs<F> {
    pub det_f: DetectionGrid<F>,
    pub det_v: Option<DetectionGrid<F>>,
    pub det_t: Option<DetectionGrid<F>>,
    /// Stride-8 single-channel segmentation logits (training only).
    pub seg_v: Option<Array4<F>>,
    pub seg_t: Option<Array4<F>>,
}

/// Loss gradients w.r.t. every branch output, same shapes as the outputs.
#[derive(Debug)]
pub struct BranchGrads<F> {
    pub det_f: Vec<Array5<F>>,
    pub det_v: Option<Vec<Array5<F>>>,
    pub det_t: Option<Vec<Array5<F>>>,
    pub seg_v: Option<Array4<F>>,
    pub seg_t: Option<Array4<F>>,
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Stage<F> {
    down: ConvBlock<F>,
    blocks: Vec<Bottleneck<F>>,
}

pub struct StageCache<F> {
    down: ConvBlockCache<F>,
    blocks: Vec<crate::nn::blocks::BottleneckCache<F>>,
}

impl<F: Float> Stage<F> {
    fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, depth: usize) -> Result<Self> {
        let down = ConvBlock::new(rng, c_in, c_out, 3, 2, 1)?;
        let blocks = (1..depth)
            .map(|_| Bottleneck::new(rng, c_out))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stage { down, blocks })
    }

    fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let mut y = self.down.forward(x);
        for b in &self.blocks {
            y = b.forward(&y);
        }
        y
    }

    fn forward_t(&self, x: &Array4<F>) -> (Array4<F>, StageCache<F>) {
        let (mut y, down) = self.down.forward_t(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (ny, c) = b.forward_t(&y);
            y = ny;
            blocks.push(c);
        }
        (y, StageCache { down, blocks })
    }

    fn backward(&mut self, cache: &StageCache<F>, gy: &Array4<F>) -> Array4<F> {
        let mut g = gy.clone();
        for (b, c) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            g = b.backward(c, &g);
        }
        self.down.backward(&cache.down, &g)
    }
}

impl<F: Float> Parameterized<F> for Stage<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.down.visit_params(&format!("{prefix}.down"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.block{i}"), v);
        }
    }
}

/// One modality stream: stem (P1) plus four downsampling stages (P2-P5).
#[derive(Debug, Clone)]
pub struct Backbone<F> {
    stem: ConvBlock<F>,
    stem_blocks: Vec<Bottleneck<F>>,
    stages: Vec<Stage<F>>, // P2, P3, P4, P5
}

pub struct BackboneCache<F> {
    stem: ConvBlockCache<F>,
    stem_blocks: Vec<crate::nn::blocks::BottleneckCache<F>>,
    stages: Vec<StageCache<F>>,
}

impl<F: Float> Backbone<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &NetworkConfig) -> Result<Self> {
        let w = cfg.stage_widths();
        let stem = ConvBlock::new(rng, 3, w[0], 3, 2, 1)?;
        let stem_blocks = (1..cfg.stage_depth[0])
            .map(|_| Bottleneck::new(rng, w[0]))
            .collect::<Result<Vec<_>>>()?;
        let stages = (1..5)
            .map(|s| Stage::new(rng, w[s - 1], w[s], cfg.stage_depth[s]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            stem,
            stem_blocks,
            stages,
        })
    }

    pub fn forward(&self, x: &Array4<F>) -> FeaturePyramid<F> {
        let mut y = self.stem.forward(x);
        for b in &self.stem_blocks {
            y = b.forward(&y);
        }
        let p2 = self.stages[0].forward(&y);
        let p3 = self.stages[1].forward(&p2);
        let p4 = self.stages[2].forward(&p3);
        let p5 = self.stages[3].forward(&p4);
        FeaturePyramid { p3, p4, p5 }
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (FeaturePyramid<F>, BackboneCache<F>) {
        let (mut y, stem) = self.stem.forward_t(x);
        let mut stem_blocks = Vec::with_capacity(self.stem_blocks.len());
        for b in &self.stem_blocks {
            let (ny, c) = b.forward_t(&y);
            y = ny;
            stem_blocks.push(c);
        }
        let mut stages = Vec::with_capacity(4);
        let (p2, c2) = self.stages[0].forward_t(&y);
        stages.push(c2);
        let (p3, c3) = self.stages[1].forward_t(&p2);
        stages.push(c3);
        let (p4, c4) = self.stages[2].forward_t(&p3);
        stages.push(c4);
        let (p5, c5) = self.stages[3].forward_t(&p4);
        stages.push(c5);
        (
            FeaturePyramid { p3, p4, p5 },
            BackboneCache {
                stem,
                stem_blocks,
                stages,
            },
        )
    }

    /// Taps at P3/P4/P5 receive external gradients; the chain rule folds them
    /// into the sequential path on the way down. Returns the input gradient.
    pub fn backward(
        &mut self,
        cache: &BackboneCache<F>,
        g_p3: &Array4<F>,
        g_p4: &Array4<F>,
        g_p5: &Array4<F>,
    ) -> Array4<F> {
        let g4 = g_p4 + &self.stages[3].backward(&cache.stages[3], g_p5);
        let g3 = g_p3 + &self.stages[2].backward(&cache.stages[2], &g4);
        let g2 = self.stages[1].backward(&cache.stages[1], &g3);
        let mut g1 = self.stages[0].backward(&cache.stages[0], &g2);
        for (b, c) in self
            .stem_blocks
            .iter_mut()
            .rev()
            .zip(cache.stem_blocks.iter().rev())
        {
            g1 = b.backward(c, &g1);
        }
        self.stem.backward(&cache.stem, &g1)
    }
}

impl<F: Float> Parameterized<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.stem.visit_params(&format!("{prefix}.stem"), v);
        for (i, b) in self.stem_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.stem_block{i}"), v);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&format!("{prefix}.stage{}", i + 2), v);
        }
    }
}

// ---------------------------------------------------------------------------
// neck + head branch
// ---------------------------------------------------------------------------

/// Top-down + bottom-up path aggregation neck and 1x1 prediction heads for
/// one branch. Entry transitions reduce whichever width the branch ingests
/// (2x for the fusion branch) to the shared neck widths.
#[derive(Debug, Clone)]
pub struct Branch<F> {
    entry3: ConvBlock<F>,
    entry4: ConvBlock<F>,
    entry5: ConvBlock<F>,
    red5: ConvBlock<F>,
    td4: ConvBlock<F>,
    red4: ConvBlock<F>,
    td3: ConvBlock<F>,
    down3: ConvBlock<F>,
    bu4: ConvBlock<F>,
    down4: ConvBlock<F>,
    bu5: ConvBlock<F>,
    head3: ConvBlock<F>,
    head4: ConvBlock<F>,
    head5: ConvBlock<F>,
    num_classes: usize,
}

pub struct BranchCache<F> {
    e3: ConvBlockCache<F>,
    e4: ConvBlockCache<F>,
    e5: ConvBlockCache<F>,
    red5: ConvBlockCache<F>,
    td4: ConvBlockCache<F>,
    red4: ConvBlockCache<F>,
    td3: ConvBlockCache<F>,
    down3: ConvBlockCache<F>,
    bu4: ConvBlockCache<F>,
    down4: ConvBlockCache<F>,
    bu5: ConvBlockCache<F>,
    h3: ConvBlockCache<F>,
    h4: ConvBlockCache<F>,
    h5: ConvBlockCache<F>,
    widths: (usize, usize, usize),
}

impl<F: Float> Branch<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &NetworkConfig, input_widths: [usize; 3]) -> Result<Self> {
        let [n3, n4, n5] = cfg.pyramid_widths();
        let hc = cfg.head_channels();
        let mk_head = |rng: &mut R, c_in: usize| -> Result<ConvBlock<F>> {
            let mut head = ConvBlock::plain(rng, c_in, hc, 1, 1, 1)?;
            // damp initial predictions and bias objectness towards background
            head.conv.w.v.mapv_inplace(|w| w * crate::nn::fl(0.1));
            let e = 5 + cfg.num_classes;
            for a in 0..ANCHORS_PER_SCALE {
                head.conv.b.v[a * e + 4] = crate::nn::fl(-4.0);
            }
            Ok(head)
        };
        Ok(Branch {
            entry3: ConvBlock::new(rng, input_widths[0], n3, 1, 1, 1)?,
            entry4: ConvBlock::new(rng, input_widths[1], n4, 1, 1, 1)?,
            entry5: ConvBlock::new(rng, input_widths[2], n5, 1, 1, 1)?,
            red5: ConvBlock::new(rng, n5, n4, 1, 1, 1)?,
            td4: ConvBlock::new(rng, 2 * n4, n4, 1, 1, 1)?,
            red4: ConvBlock::new(rng, n4, n3, 1, 1, 1)?,
            td3: ConvBlock::new(rng, 2 * n3, n3, 1, 1, 1)?,
            down3: ConvBlock::new(rng, n3, n3, 3, 2, 1)?,
            bu4: ConvBlock::new(rng, n3 + n4, n4, 1, 1, 1)?,
            down4: ConvBlock::new(rng, n4, n4, 3, 2, 1)?,
            bu5: ConvBlock::new(rng, 2 * n4, n5, 1, 1, 1)?,
            head3: mk_head(rng, n3)?,
            head4: mk_head(rng, n4)?,
            head5: mk_head(rng, n5)?,
            num_classes: cfg.num_classes,
        })
    }

    pub fn forward(&self, p3: &Array4<F>, p4: &Array4<F>, p5: &Array4<F>) -> DetectionGrid<F> {
        self.forward_t(p3, p4, p5).0
    }

    pub fn forward_t(
        &self,
        p3: &Array4<F>,
        p4: &Array4<F>,
        p5: &Array4<F>,
    ) -> (DetectionGrid<F>, BranchCache<F>) {
        let (e3, c_e3) = self.entry3.forward_t(p3);
        let (e4, c_e4) = self.entry4.forward_t(p4);
        let (e5, c_e5) = self.entry5.forward_t(p5);

        let (r5, c_r5) = self.red5.forward_t(&e5);
        let u5 = upsample2_forward(&r5);
        let (t4, c_t4) = self.td4.forward_t(&concat_channels(&u5, &e4));
        let (r4, c_r4) = self.red4.forward_t(&t4);
        let u4 = upsample2_forward(&r4);
        let (t3, c_t3) = self.td3.forward_t(&concat_channels(&u4, &e3));

        let (d3, c_d3) = self.down3.forward_t(&t3);
        let (b4, c_b4) = self.bu4.forward_t(&concat_channels(&d3, &t4));
        let (d4, c_d4) = self.down4.forward_t(&b4);
        let (b5, c_b5) = self.bu5.forward_t(&concat_channels(&d4, &r5));

        let (g3, c_h3) = self.head3.forward_t(&t3);
        let (g4, c_h4) = self.head4.forward_t(&b4);
        let (g5, c_h5) = self.head5.forward_t(&b5);

        let widths = (e3.dim().1, e4.dim().1, e5.dim().1);
        let grid = DetectionGrid {
            scales: vec![
                channels_to_grid(&g3, self.num_classes),
                channels_to_grid(&g4, self.num_classes),
                channels_to_grid(&g5, self.num_classes),
            ],
        };
        (
            grid,
            BranchCache {
                e3: c_e3,
                e4: c_e4,
                e5: c_e5,
                red5: c_r5,
                td4: c_t4,
                red4: c_r4,
                td3: c_t3,
                down3: c_d3,
                bu4: c_b4,
                down4: c_d4,
                bu5: c_b5,
                h3: c_h3,
                h4: c_h4,
                h5: c_h5,
                widths,
            },
        )
    }

    /// Returns gradients w.r.t. the three ingested pyramid stages.
    pub fn backward(
        &mut self,
        cache: &BranchCache<F>,
        g_grids: &[Array5<F>],
    ) -> (Array4<F>, Array4<F>, Array4<F>) {
        let (n3, n4, _n5) = cache.widths;
        let gg3 = grid_to_channels(&g_grids[0], self.num_classes);
        let gg4 = grid_to_channels(&g_grids[1], self.num_classes);
        let gg5 = grid_to_channels(&g_grids[2], self.num_classes);

        let mut g_t3 = self.head3.backward(&cache.h3, &gg3);
        let mut g_b4 = self.head4.backward(&cache.h4, &gg4);
        let g_b5 = self.head5.backward(&cache.h5, &gg5);

        let g_c5b = self.bu5.backward(&cache.bu5, &g_b5);
        let (g_d4, mut g_r5) = split_channels(&g_c5b, n4);
        g_b4 = &g_b4 + &self.down4.backward(&cache.down4, &g_d4);

        let g_c4b = self.bu4.backward(&cache.bu4, &g_b4);
        let (g_d3, mut g_t4) = split_channels(&g_c4b, n3);
        g_t3 = &g_t3 + &self.down3.backward(&cache.down3, &g_d3);

        let g_c3in = self.td3.backward(&cache.td3, &g_t3);
        let (g_u4, g_e3) = split_channels(&g_c3in, n3);
        g_t4 = &g_t4 + &self.red4.backward(&cache.red4, &upsample2_backward(&g_u4));

        let g_c4in = self.td4.backward(&cache.td4, &g_t4);
        let (g_u5, g_e4) = split_channels(&g_c4in, n4);
        g_r5 = &g_r5 + &upsample2_backward(&g_u5);
        let g_e5 = self.red5.backward(&cache.red5, &g_r5);

        (
            self.entry3.backward(&cache.e3, &g_e3),
            self.entry4.backward(&cache.e4, &g_e4),
            self.entry5.backward(&cache.e5, &g_e5),
        )
    }
}

impl<F: Float> Parameterized<F> for Branch<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        let parts: [(&str, &mut ConvBlock<F>); 14] = [
            ("entry3", &mut self.entry3),
            ("entry4", &mut self.entry4),
            ("entry5", &mut self.entry5),
            ("red5", &mut self.red5),
            ("td4", &mut self.td4),
            ("red4", &mut self.red4),
            ("td3", &mut self.td3),
            ("down3", &mut self.down3),
            ("bu4", &mut self.bu4),
            ("down4", &mut self.down4),
            ("bu5", &mut self.bu5),
            ("head3", &mut self.head3),
            ("head4", &mut self.head4),
            ("head5", &mut self.head5),
        ];
        for (name, block) in parts {
            block.visit_params(&format!("{prefix}.{name}"), v);
        }
    }
}

/// `(B, A*(5+nc), H, W)` head output to `(B, A, H, W, 5+nc)` grid layout.
fn channels_to_grid<F: Float>(x: &Array4<F>, num_classes: usize) -> Array5<F> {
    let (b, c, h, w) = x.dim();
    let e = 5 + num_classes;
    let a = c / e;
    let x5 = x
        .view()
        .into_shape_with_order((b, a, e, h, w))
        .unwrap()
        .permuted_axes([0, 1, 3, 4, 2]);
    x5.as_standard_layout().to_owned()
}

/// Inverse of [`channels_to_grid`] for routing gradients.
fn grid_to_channels<F: Float>(g: &Array5<F>, num_classes: usize) -> Array4<F> {
    let (b, a, h, w, e) = g.dim();
    debug_assert_eq!(e, 5 + num_classes);
    let back = g.view().permuted_axes([0, 1, 4, 2, 3]);
    let std = back.as_standard_layout().to_owned();
    std.into_shape_with_order((b, a * e, h, w)).unwrap()
}

// ---------------------------------------------------------------------------
// segmentation head
// ---------------------------------------------------------------------------

/// Stride-8 single-channel logit head over one stream's P3 features.
/// Training-only; the invocation counter lets tests prove inference never
/// touches it.
#[derive(Debug)]
pub struct SegHead<F> {
    pub conv: ConvBlock<F>,
    pub calls: AtomicUsize,
}

impl<F: Float> SegHead<F> {
    pub fn new<R: Rng>(rng: &mut R, c_in: usize) -> Result<Self> {
        Ok(SegHead {
            conv: ConvBlock::plain(rng, c_in, 1, 1, 1, 1)?,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn forward_t(&self, x: &Array4<F>) -> (Array4<F>, ConvBlockCache<F>) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.conv.forward_t(x)
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: Float> Parameterized<F> for SegHead<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.conv.visit_params(&format!("{prefix}.conv"), v);
    }
}

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

enum FuseCache<F> {
    Gsma(GsmaCache<F>),
    Concat,
}

pub struct ModelCache<F> {
    bb_v: BackboneCache<F>,
    bb_t: BackboneCache<F>,
    fuse3: FuseCache<F>,
    fuse4: FuseCache<F>,
    branch_f: BranchCache<F>,
    branch_v: Option<BranchCache<F>>,
    branch_t: Option<BranchCache<F>>,
    seg_v: Option<ConvBlockCache<F>>,
    seg_t: Option<ConvBlockCache<F>>,
    p3_widths: usize,
    p4_widths: usize,
}

#[derive(Debug)]
pub struct Model<F> {
    pub cfg: NetworkConfig,
    pub backbone_v: Backbone<F>,
    pub backbone_t: Backbone<F>,
    pub gsma_p3: Option<GsmaBlock<F>>,
    pub gsma_p4: Option<GsmaBlock<F>>,
    pub branch_f: Branch<F>,
    pub branch_v: Option<Branch<F>>,
    pub branch_t: Option<Branch<F>>,
    pub seg_v: Option<SegHead<F>>,
    pub seg_t: Option<SegHead<F>>,
}

impl<F: Float> Model<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let [w3, w4, _w5] = cfg.pyramid_widths();
        let backbone_v = Backbone::new(rng, &cfg)?;
        let backbone_t = Backbone::new(rng, &cfg)?;
        let (gsma_p3, gsma_p4) = if cfg.use_gsma {
            (
                Some(GsmaBlock::new(rng, &cfg.gsma.for_channels(w3))?),
                Some(GsmaBlock::new(rng, &cfg.gsma.for_channels(w4))?),
            )
        } else {
            (None, None)
        };
        let stream_widths = cfg.pyramid_widths();
        let fused_widths = [
            2 * stream_widths[0],
            2 * stream_widths[1],
            2 * stream_widths[2],
        ];
        let branch_f = Branch::new(rng, &cfg, fused_widths)?;
        let (branch_v, branch_t, seg_v, seg_t) = if cfg.ms_branches {
            (
                Some(Branch::new(rng, &cfg, stream_widths)?),
                Some(Branch::new(rng, &cfg, stream_widths)?),
                Some(SegHead::new(rng, w3)?),
                Some(SegHead::new(rng, w3)?),
            )
        } else {
            (None, None, None, None)
        };
        Ok(Model {
            cfg,
            backbone_v,
            backbone_t,
            gsma_p3,
            gsma_p4,
            branch_f,
            branch_v,
            branch_t,
            seg_v,
            seg_t,
        })
    }

    fn check_inputs(&self, x_v: &Array4<F>, x_t: &Array4<F>) -> Result<()> {
        if x_v.dim() != x_t.dim() {
            return Err(Error::Shape(format!(
                "modality batches differ: {:?} vs {:?}",
                x_v.dim(),
                x_t.dim()
            )));
        }
        let (_, c, h, w) = x_v.dim();
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "expected (B,3,{},{}) inputs, got {:?}",
                self.cfg.input_size.0,
                self.cfg.input_size.1,
                x_v.dim()
            )));
        }
        Ok(())
    }

    /// Dual-stream backbone pass.
    pub fn backbone_forward(
        &self,
        x_v: &Array4<F>,
        x_t: &Array4<F>,
    ) -> Result<(FeaturePyramid<F>, FeaturePyramid<F>)> {
        self.check_inputs(x_v, x_t)?;
        Ok((self.backbone_v.forward(x_v), self.backbone_t.forward(x_t)))
    }

    /// GSMA fusion at P3/P4 (or concat when disabled), concat at P5.
    pub fn build_fusion_features(
        &self,
        pyr_v: &FeaturePyramid<F>,
        pyr_t: &FeaturePyramid<F>,
    ) -> Result<FeaturePyramid<F>> {
        let p3 = match &self.gsma_p3 {
            Some(g) => g.forward(&pyr_v.p3, &pyr_t.p3)?,
            None => concat_channels(&pyr_v.p3, &pyr_t.p3),
        };
        let p4 = match &self.gsma_p4 {
            Some(g) => g.forward(&pyr_v.p4, &pyr_t.p4)?,
            None => concat_channels(&pyr_v.p4, &pyr_t.p4),
        };
        let p5 = concat_channels(&pyr_v.p5, &pyr_t.p5);
        Ok(FeaturePyramid { p3, p4, p5 })
    }

    /// Inference pass: detection grids only, segmentation heads untouched.
    pub fn forward_infer(&self, x_v: &Array4<F>, x_t: &Array4<F>) -> Result<BranchOutputs<F>> {
        let (pyr_v, pyr_t) = self.backbone_forward(x_v, x_t)?;
        let fused = self.build_fusion_features(&pyr_v, &pyr_t)?;
        let det_f = self.branch_f.forward(&fused.p3, &fused.p4, &fused.p5);
        let det_v = self
            .branch_v
            .as_ref()
            .map(|b| b.forward(&pyr_v.p3, &pyr_v.p4, &pyr_v.p5));
        let det_t = self
            .branch_t
            .as_ref()
            .map(|b| b.forward(&pyr_t.p3, &pyr_t.p4, &pyr_t.p5));
        Ok(BranchOutputs {
            det_f,
            det_v,
            det_t,
            seg_v: None,
            seg_t: None,
        })
    }

    /// Training pass with caches for [`Model::backward`].
    pub fn forward_train(
        &self,
        x_v: &Array4<F>,
        x_t: &Array4<F>,
    ) -> Result<(BranchOutputs<F>, ModelCache<F>)> {
        self.check_inputs(x_v, x_t)?;
        let (pyr_v, bb_v) = self.backbone_v.forward_t(x_v);
        let (pyr_t, bb_t) = self.backbone_t.forward_t(x_t);

        let (f3, fuse3) = match &self.gsma_p3 {
            Some(g) => {
                let (y, c) = g.forward_t(&pyr_v.p3, &pyr_t.p3)?;
                (y, FuseCache::Gsma(c))
            }
            None => (
                concat_channels(&pyr_v.p3, &pyr_t.p3),
                FuseCache::Concat,
            ),
        };
        let (f4, fuse4) = match &self.gsma_p4 {
            Some(g) => {
                let (y, c) = g.forward_t(&pyr_v.p4, &pyr_t.p4)?;
                (y, FuseCache::Gsma(c))
            }
            None => (
                concat_channels(&pyr_v.p4, &pyr_t.p4),
                FuseCache::Concat,
            ),
        };
        let f5 = concat_channels(&pyr_v.p5, &pyr_t.p5);

        let (det_f, branch_f) = self.branch_f.forward_t(&f3, &f4, &f5);
        let mut det_v = None;
        let mut branch_v_cache = None;
        if let Some(b) = &self.branch_v {
            let (g, c) = b.forward_t(&pyr_v.p3, &pyr_v.p4, &pyr_v.p5);
            det_v = Some(g);
            branch_v_cache = Some(c);
        }
        let mut det_t = None;
        let mut branch_t_cache = None;
        if let Some(b) = &self.branch_t {
            let (g, c) = b.forward_t(&pyr_t.p3, &pyr_t.p4, &pyr_t.p5);
            det_t = Some(g);
            branch_t_cache = Some(c);
        }
        let mut seg_v = None;
        let mut seg_v_cache = None;
        if let Some(h) = &self.seg_v {
            let (s, c) = h.forward_t(&pyr_v.p3);
            seg_v = Some(s);
            seg_v_cache = Some(c);
        }
        let mut seg_t = None;
        let mut seg_t_cache = None;
        if let Some(h) = &self.seg_t {
            let (s, c) = h.forward_t(&pyr_t.p3);
            seg_t = Some(s);
            seg_t_cache = Some(c);
        }

        let p3_widths = pyr_v.p3.dim().1;
        let p4_widths = pyr_v.p4.dim().1;
        Ok((
            BranchOutputs {
                det_f,
                det_v,
                det_t,
                seg_v,
                seg_t,
            },
            ModelCache {
                bb_v,
                bb_t,
                fuse3,
                fuse4,
                branch_f,
                branch_v: branch_v_cache,
                branch_t: branch_t_cache,
                seg_v: seg_v_cache,
                seg_t: seg_t_cache,
                p3_widths,
                p4_widths,
            },
        ))
    }

    /// Accumulates parameter gradients from per-output loss gradients.
    pub fn backward(&mut self, cache: &ModelCache<F>, grads: &BranchGrads<F>) {
        let (g_f3, g_f4, g_f5) = self.branch_f.backward(&cache.branch_f, &grads.det_f);

        // fused P3/P4 gradients split back to the two streams
        let (mut gv3, mut gt3) = match (&mut self.gsma_p3, &cache.fuse3) {
            (Some(g), FuseCache::Gsma(c)) => g.backward(c, &g_f3),
            _ => split_channels(&g_f3, cache.p3_widths),
        };
        let (mut gv4, mut gt4) = match (&mut self.gsma_p4, &cache.fuse4) {
            (Some(g), FuseCache::Gsma(c)) => g.backward(c, &g_f4),
            _ => split_channels(&g_f4, cache.p4_widths),
        };
        let (mut gv5, mut gt5) = split_channels(&g_f5, g_f5.dim().1 / 2);

        if let (Some(b), Some(c), Some(g)) = (
            &mut self.branch_v,
            &cache.branch_v,
            grads.det_v.as_ref(),
        ) {
            let (a3, a4, a5) = b.backward(c, g);
            gv3 = &gv3 + &a3;
            gv4 = &gv4 + &a4;
            gv5 = &gv5 + &a5;
        }
        if let (Some(b), Some(c), Some(g)) = (
            &mut self.branch_t,
            &cache.branch_t,
            grads.det_t.as_ref(),
        ) {
            let (a3, a4, a5) = b.backward(c, g);
            gt3 = &gt3 + &a3;
            gt4 = &gt4 + &a4;
            gt5 = &gt5 + &a5;
        }
        if let (Some(h), Some(c), Some(g)) =
            (&mut self.seg_v, &cache.seg_v, grads.seg_v.as_ref())
        {
            gv3 = &gv3 + &h.conv.backward(c, g);
        }
        if let (Some(h), Some(c), Some(g)) =
            (&mut self.seg_t, &cache.seg_t, grads.seg_t.as_ref())
        {
            gt3 = &gt3 + &h.conv.backward(c, g);
        }

        self.backbone_v.backward(&cache.bb_v, &gv3, &gv4, &gv5);
        self.backbone_t.backward(&cache.bb_t, &gt3, &gt4, &gt5);
    }
}

impl<F: Float> Parameterized<F> for Model<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.backbone_v.visit_params(&p("backbone_v"), v);
        self.backbone_t.visit_params(&p("backbone_t"), v);
        if let Some(g) = &mut self.gsma_p3 {
            g.visit_params(&p("gsma_p3"), v);
        }
        if let Some(g) = &mut self.gsma_p4 {
            g.visit_params(&p("gsma_p4"), v);
        }
        self.branch_f.visit_params(&p("branch_f"), v);
        if let Some(b) = &mut self.branch_v {
            b.visit_params(&p("branch_v"), v);
        }
        if let Some(b) = &mut self.branch_t {
            b.visit_params(&p("branch_t"), v);
        }
        if let Some(h) = &mut self.seg_v {
            h.visit_params(&p("seg_v"), v);
        }
        if let Some(h) = &mut self.seg_t {
            h.visit_params(&p("seg_t"), v);
        }
    }
}
