//! Deterministic synthetic paired-modality scenes and dataset I/O.
//!
//! Each image pair renders the same object layout twice: colored anti-aliased
//! shapes over a light background for the visible frame (night frames get
//! their contrast scaled down and noise added) and bright intensity blobs on
//! a dark background for the thermal frame. Objects can be visible in both
//! modalities or in exactly one, the thermal render is shifted per object by
//! a bounded misalignment, and the union annotation set is built with the
//! same merge rule used for training supervision.
//!
//! Layout on disk:
//!
//! ```text
//! root/images/visible/<stem>.png      8-bit RGB
//! root/images/thermal/<stem>.png      8-bit grayscale
//! root/annotations/{visible,thermal,union}/<stem>.txt
//! root/metadata/<stem>.txt            scene provenance (optional on load)
//! root/{train,test}.txt               stem lists
//! root/dataset.meta                   generator spec, anchors, class names
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{fl, Float};
use crate::supervision::{build_union, Annotation, AnnotationTriplet};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: (usize, usize),
    pub objects_min: usize,
    pub objects_max: usize,
    pub p_both: f64,
    pub p_visible_only: f64,
    pub p_thermal_only: f64,
    pub misalignment_max_px: f64,
    pub night_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: (256, 256),
            objects_min: 1,
            objects_max: 6,
            p_both: 0.7,
            p_visible_only: 0.15,
            p_thermal_only: 0.15,
            misalignment_max_px: 4.0,
            night_fraction: 0.4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::Config("image size must be at least 32x32".into()));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "invalid objects range [{}, {}]",
                self.objects_min, self.objects_max
            )));
        }
        let psum = self.p_both + self.p_visible_only + self.p_thermal_only;
        if (psum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "visibility probabilities sum to {psum}, expected 1"
            )));
        }
        if !(0.0..=8.0).contains(&self.misalignment_max_px) {
            return Err(Error::Config(
                "misalignment must lie in [0, 8] pixels".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.night_fraction) {
            return Err(Error::Config("night fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibilityKind {
    Both,
    VisibleOnly,
    ThermalOnly,
}

impl VisibilityKind {
    fn as_str(&self) -> &'static str {
        match self {
            VisibilityKind::Both => "both",
            VisibilityKind::VisibleOnly => "visible_only",
            VisibilityKind::ThermalOnly => "thermal_only",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(VisibilityKind::Both),
            "visible_only" => Some(VisibilityKind::VisibleOnly),
            "thermal_only" => Some(VisibilityKind::ThermalOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f64; 3],
    pub heat: f64,
    pub kind: VisibilityKind,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub night: bool,
    pub background: [f64; 3],
    pub thermal_background: f64,
    pub noise_seed: u64,
}

/// Per-image provenance recorded next to the annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub night: bool,
    pub kinds: Vec<VisibilityKind>,
    pub offsets: Vec<(f64, f64)>,
}

/// One loaded sample: co-registered 8-bit images plus all annotation sets.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub stem: String,
    pub visible: Array3<u8>,
    pub thermal: Array2<u8>,
    pub annotations: AnnotationTriplet,
    pub meta: Option<SceneMeta>,
}

impl ImagePair {
    pub fn size(&self) -> (usize, usize) {
        (self.visible.dim().0, self.visible.dim().1)
    }

    /// Model input tensors `(3, H, W)` in [0, 1]; thermal replicated to three
    /// channels so both streams share the stem shape.
    pub fn input_tensors<F: Float>(&self) -> (Array3<F>, Array3<F>) {
        let (h, w) = self.size();
        let vis = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            fl::<F>(self.visible[[y, x, c]] as f64 / 255.0)
        });
        let th = Array3::from_shape_fn((3, h, w), |(_, y, x)| {
            fl::<F>(self.thermal[[y, x]] as f64 / 255.0)
        });
        (vis, th)
    }

    /// Horizontal flip of images and every annotation set.
    pub fn hflip(&self) -> ImagePair {
        let (h, w) = self.size();
        let visible = Array3::from_shape_fn((h, w, 3), |(y, x, c)| self.visible[[y, w - 1 - x, c]]);
        let thermal = Array2::from_shape_fn((h, w), |(y, x)| self.thermal[[y, w - 1 - x]]);
        let flip = |list: &[Annotation]| -> Vec<Annotation> {
            list.iter()
                .map(|a| Annotation {
                    cx: 1.0 - a.cx,
                    ..*a
                })
                .collect()
        };
        ImagePair {
            stem: self.stem.clone(),
            visible,
            thermal,
            annotations: AnnotationTriplet {
                visible: flip(&self.annotations.visible),
                thermal: flip(&self.annotations.thermal),
                union: flip(&self.annotations.union),
            },
            meta: self.meta.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// scene sampling and rendering
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Draws the object layout, visibility kinds, misalignment shifts, and the
/// day/night flag for one image.
pub fn sample_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (ih, iw) = spec.image_size;
    let short = ih.min(iw) as f64;
    let n = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let (w, h) = match class_id {
            0 => {
                let d = rng.gen_range(0.08 * short..0.28 * short);
                (d, d)
            }
            1 => {
                let s = rng.gen_range(0.08 * short..0.28 * short);
                (s, s)
            }
            _ => (
                rng.gen_range(0.09 * short..0.30 * short),
                rng.gen_range(0.08 * short..0.26 * short),
            ),
        };
        let margin_x = w / 2.0 + spec.misalignment_max_px + 2.0;
        let margin_y = h / 2.0 + spec.misalignment_max_px + 2.0;
        let cx = rng.gen_range(margin_x..(iw as f64 - margin_x));
        let cy = rng.gen_range(margin_y..(ih as f64 - margin_y));
        let color = hsv_to_rgb(
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.55..1.0),
            rng.gen_range(0.55..0.95),
        );
        let heat = rng.gen_range(0.65..1.0);
        let u: f64 = rng.gen();
        let kind = if u < spec.p_both {
            VisibilityKind::Both
        } else if u < spec.p_both + spec.p_visible_only {
            VisibilityKind::VisibleOnly
        } else {
            VisibilityKind::ThermalOnly
        };
        let m = spec.misalignment_max_px;
        let (dx, dy) = if m > 0.0 {
            (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
        } else {
            (0.0, 0.0)
        };
        objects.push(SceneObject {
            class_id,
            cx,
            cy,
            w,
            h,
            color,
            heat,
            kind,
            dx,
            dy,
        });
    }
    let night = rng.gen::<f64>() < spec.night_fraction;
    let g = rng.gen_range(0.55..0.8);
    let background = [
        (g + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
        (g + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
        (g + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
    ];
    let thermal_background = rng.gen_range(0.05..0.18);
    Scene {
        objects,
        night,
        background,
        thermal_background,
        noise_seed: rng.gen(),
    }
}

/// Subpixel coverage of one shape at image point (x, y), 4x4 supersampled.
fn coverage(obj: &SceneObject, cx: f64, cy: f64, px: usize, py: usize) -> f64 {
    let mut hits = 0u32;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0 - cx;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0 - cy;
            let inside = match obj.class_id {
                0 => {
                    let rx = obj.w / 2.0;
                    let ry = obj.h / 2.0;
                    (x / rx) * (x / rx) + (y / ry) * (y / ry) <= 1.0
                }
                1 => x.abs() <= obj.w / 2.0 && y.abs() <= obj.h / 2.0,
                _ => {
                    // isoceles triangle, apex up
                    y >= -obj.h / 2.0
                        && y <= obj.h / 2.0
                        && x.abs() <= (y + obj.h / 2.0) / obj.h * (obj.w / 2.0)
                }
            };
            if inside {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn draw_object(img: &mut Array3<f64>, obj: &SceneObject, cx: f64, cy: f64, color: &[f64]) {
    let (ih, iw, nc) = img.dim();
    let x0 = ((cx - obj.w / 2.0).floor().max(0.0)) as usize;
    let x1 = ((cx + obj.w / 2.0).ceil().min(iw as f64 - 1.0)) as usize;
    let y0 = ((cy - obj.h / 2.0).floor().max(0.0)) as usize;
    let y1 = ((cy + obj.h / 2.0).ceil().min(ih as f64 - 1.0)) as usize;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let c = coverage(obj, cx, cy, px, py);
            if c > 0.0 {
                for ch in 0..nc {
                    img[[py, px, ch]] = (1.0 - c) * img[[py, px, ch]] + c * color[ch];
                }
            }
        }
    }
}

/// Renders one scene to 8-bit visible and thermal frames. Pure function of
/// the scene, so tests can re-render the same layout with the flag flipped.
pub fn render_pair(scene: &Scene, spec: &SceneSpec) -> (Array3<u8>, Array2<u8>) {
    let (ih, iw) = spec.image_size;
    let mut noise = ChaCha8Rng::seed_from_u64(scene.noise_seed);

    let mut vis = Array3::from_shape_fn((ih, iw, 3), |(_, _, c)| scene.background[c]);
    for obj in &scene.objects {
        if obj.kind != VisibilityKind::ThermalOnly {
            draw_object(&mut vis, obj, obj.cx, obj.cy, &obj.color);
        }
    }
    if scene.night {
        // contrast scaled towards mid-gray, then sensor noise
        vis.mapv_inplace(|v| 0.5 + (v - 0.5) * 0.3);
        vis.mapv_inplace(|v| (v + noise.gen_range(-0.04..0.04)).clamp(0.0, 1.0));
    } else {
        vis.mapv_inplace(|v| (v + noise.gen_range(-0.01..0.01)).clamp(0.0, 1.0));
    }

    let mut th = Array3::from_shape_fn((ih, iw, 1), |_| scene.thermal_background);
    for obj in &scene.objects {
        if obj.kind != VisibilityKind::VisibleOnly {
            draw_object(&mut th, obj, obj.cx + obj.dx, obj.cy + obj.dy, &[obj.heat]);
        }
    }
    th.mapv_inplace(|v| (v + noise.gen_range(-0.015..0.015)).clamp(0.0, 1.0));

    let to8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let vis8 = vis.mapv(to8);
    let th8 = Array2::from_shape_fn((ih, iw), |(y, x)| to8(th[[y, x, 0]]));
    (vis8, th8)
}

/// Per-modality annotation lists of a scene, normalized coordinates.
pub fn scene_annotations(scene: &Scene, spec: &SceneSpec) -> (Vec<Annotation>, Vec<Annotation>) {
    let (ih, iw) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let mut visible = Vec::new();
    let mut thermal = Vec::new();
    for obj in &scene.objects {
        if obj.kind != VisibilityKind::ThermalOnly {
            visible.push(Annotation {
                class_id: obj.class_id,
                cx: obj.cx / iw,
                cy: obj.cy / ih,
                w: obj.w / iw,
                h: obj.h / ih,
            });
        }
        if obj.kind != VisibilityKind::VisibleOnly {
            thermal.push(Annotation {
                class_id: obj.class_id,
                cx: (obj.cx + obj.dx) / iw,
                cy: (obj.cy + obj.dy) / ih,
                w: obj.w / iw,
                h: obj.h / ih,
            });
        }
    }
    (visible, thermal)
}

// ---------------------------------------------------------------------------
// anchors
// ---------------------------------------------------------------------------

/// Deterministic Lloyd k-means over box (w, h) pixels; centers seeded from
/// area quantiles, returned in ascending area.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, iters: usize) -> Vec<(f64, f64)> {
    assert!(k >= 1);
    if boxes.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<(f64, f64)> = boxes.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let mut centers: Vec<(f64, f64)> = (0..k)
        .map(|i| sorted[(i * (sorted.len() - 1)) / (k - 1).max(1)])
        .collect();
    for _ in 0..iters {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for &(w, h) in boxes {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, &(cw, ch)) in centers.iter().enumerate() {
                let d = (w - cw).powi(2) + (h - ch).powi(2);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            sums[best].0 += w;
            sums[best].1 += h;
            sums[best].2 += 1;
        }
        for (ci, &(sw, sh, n)) in sums.iter().enumerate() {
            if n > 0 {
                centers[ci] = (sw / n as f64, sh / n as f64);
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    centers
}

/// Nine k-means anchors grouped three per scale in ascending area.
pub fn anchors_from_boxes(boxes: &[(f64, f64)]) -> Option<[[(f64, f64); 3]; 3]> {
    if boxes.len() < 9 {
        return None;
    }
    let c = kmeans_anchors(boxes, 9, 30);
    let mut out = [[(0.0, 0.0); 3]; 3];
    for s in 0..3 {
        for a in 0..3 {
            out[s][a] = c[s * 3 + a];
        }
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// dataset writing
// ---------------------------------------------------------------------------

fn write_png_rgb(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (h, w, _) = img.dim();
    let raw: Vec<u8> = img.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Config("image buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::integrity(path, format!("png write failed: {e}")))
}

fn write_png_gray(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img.iter().copied().collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Config("image buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::integrity(path, format!("png write failed: {e}")))
}

pub fn stem_for(index: usize) -> String {
    format!("img_{index:06}")
}

/// Dataset-level metadata stored in `dataset.meta`.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub anchors: Option<[[(f64, f64); 3]; 3]>,
}

impl DatasetMeta {
    fn to_kv(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.spec.image_size;
        s.push_str(&format!("image_size = {h}x{w}\n"));
        s.push_str(&format!("objects_min = {}\n", self.spec.objects_min));
        s.push_str(&format!("objects_max = {}\n", self.spec.objects_max));
        s.push_str(&format!("p_both = {}\n", self.spec.p_both));
        s.push_str(&format!("p_visible_only = {}\n", self.spec.p_visible_only));
        s.push_str(&format!("p_thermal_only = {}\n", self.spec.p_thermal_only));
        s.push_str(&format!(
            "misalignment_max_px = {}\n",
            self.spec.misalignment_max_px
        ));
        s.push_str(&format!("night_fraction = {}\n", self.spec.night_fraction));
        s.push_str(&format!("seed = {}\n", self.spec.seed));
        s.push_str(&format!("n_train = {}\n", self.n_train));
        s.push_str(&format!("n_test = {}\n", self.n_test));
        s.push_str(&format!("classes = {}\n", CLASS_NAMES.join(",")));
        if let Some(anchors) = &self.anchors {
            let flat: Vec<String> = anchors
                .iter()
                .flatten()
                .map(|(w, h)| format!("{w:.4}x{h:.4}"))
                .collect();
            s.push_str(&format!("anchors = {}\n", flat.join(",")));
        }
        s
    }

    pub fn read(root: &Path) -> Result<DatasetMeta> {
        let path = root.join("dataset.meta");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::integrity(&path, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|_| Error::integrity(&path, format!("bad number for {k}")))
        };
        let size_text = get("image_size")?;
        let (hs, ws) = size_text
            .split_once('x')
            .ok_or_else(|| Error::integrity(&path, "bad image_size"))?;
        let spec = SceneSpec {
            image_size: (
                hs.parse().map_err(|_| Error::integrity(&path, "bad height"))?,
                ws.parse().map_err(|_| Error::integrity(&path, "bad width"))?,
            ),
            objects_min: num("objects_min")? as usize,
            objects_max: num("objects_max")? as usize,
            p_both: num("p_both")?,
            p_visible_only: num("p_visible_only")?,
            p_thermal_only: num("p_thermal_only")?,
            misalignment_max_px: num("misalignment_max_px")?,
            night_fraction: num("night_fraction")?,
            seed: num("seed")? as u64,
        };
        let anchors = match kv.get("anchors") {
            None => None,
            Some(text) => {
                let parts: Vec<&str> = text.split(',').collect();
                if parts.len() != 9 {
                    return Err(Error::integrity(&path, "anchors must hold 9 entries"));
                }
                let mut out = [[(0.0, 0.0); 3]; 3];
                for (i, p) in parts.iter().enumerate() {
                    let (w, h) = p
                        .split_once('x')
                        .ok_or_else(|| Error::integrity(&path, "bad anchor entry"))?;
                    out[i / 3][i % 3] = (
                        w.parse().map_err(|_| Error::integrity(&path, "bad anchor w"))?,
                        h.parse().map_err(|_| Error::integrity(&path, "bad anchor h"))?,
                    );
                }
                Some(out)
            }
        };
        Ok(DatasetMeta {
            spec,
            n_train: num("n_train")? as usize,
            n_test: num("n_test")? as usize,
            anchors,
        })
    }
}

fn write_meta_file(path: &Path, meta: &SceneMeta) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "night = {}", if meta.night { 1 } else { 0 }).map_err(|e| Error::io(path, e))?;
    for (i, (kind, (dx, dy))) in meta.kinds.iter().zip(&meta.offsets).enumerate() {
        writeln!(f, "object{i} = {} {dx:.6} {dy:.6}", kind.as_str())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_meta_file(path: &Path) -> Result<SceneMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = SceneMeta {
        night: false,
        kinds: Vec::new(),
        offsets: Vec::new(),
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if k == "night" {
            meta.night = v == "1";
        } else if k.starts_with("object") {
            let fields: Vec<&str> = v.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::integrity(path, format!("bad object line `{line}`")));
            }
            let kind = VisibilityKind::parse(fields[0])
                .ok_or_else(|| Error::integrity(path, format!("bad kind `{}`", fields[0])))?;
            meta.kinds.push(kind);
            meta.offsets.push((
                fields[1]
                    .parse()
                    .map_err(|_| Error::integrity(path, "bad dx"))?,
                fields[2]
                    .parse()
                    .map_err(|_| Error::integrity(path, "bad dy"))?,
            ));
        }
    }
    Ok(meta)
}

/// Generates `n_train + n_test` image pairs under `out_dir`; fully determined
/// by `spec.seed` (image `i` draws from stream `i` of the seeded generator).
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetMeta> {
    spec.validate()?;
    for sub in [
        "images/visible",
        "images/thermal",
        "annotations/visible",
        "annotations/thermal",
        "annotations/union",
        "metadata",
    ] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let total = n_train + n_test;
    let mut train_boxes: Vec<(f64, f64)> = Vec::new();
    let mut train_list = String::new();
    let mut test_list = String::new();
    let (ih, iw) = spec.image_size;

    for i in 0..total {
        let stem = stem_for(i);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let scene = sample_scene(spec, &mut rng);
        let (vis, th) = render_pair(&scene, spec);
        let (ann_v, ann_t) = scene_annotations(&scene, spec);
        let ann_u = build_union(&ann_v, &ann_t, 0.5);

        write_png_rgb(&out_dir.join(format!("images/visible/{stem}.png")), &vis)?;
        write_png_gray(&out_dir.join(format!("images/thermal/{stem}.png")), &th)?;
        crate::supervision::write_annotations(
            &out_dir.join(format!("annotations/visible/{stem}.txt")),
            &ann_v,
        )?;
        crate::supervision::write_annotations(
            &out_dir.join(format!("annotations/thermal/{stem}.txt")),
            &ann_t,
        )?;
        crate::supervision::write_annotations(
            &out_dir.join(format!("annotations/union/{stem}.txt")),
            &ann_u,
        )?;
        write_meta_file(
            &out_dir.join(format!("metadata/{stem}.txt")),
            &SceneMeta {
                night: scene.night,
                kinds: scene.objects.iter().map(|o| o.kind).collect(),
                offsets: scene.objects.iter().map(|o| (o.dx, o.dy)).collect(),
            },
        )?;

        if i < n_train {
            train_list.push_str(&stem);
            train_list.push('\n');
            for a in &ann_u {
                train_boxes.push((a.w * iw as f64, a.h * ih as f64));
            }
        } else {
            test_list.push_str(&stem);
            test_list.push('\n');
        }
    }

    std::fs::write(out_dir.join("train.txt"), train_list)
        .map_err(|e| Error::io(out_dir.join("train.txt"), e))?;
    std::fs::write(out_dir.join("test.txt"), test_list)
        .map_err(|e| Error::io(out_dir.join("test.txt"), e))?;

    let meta = DatasetMeta {
        spec: spec.clone(),
        n_train,
        n_test,
        anchors: anchors_from_boxes(&train_boxes),
    };
    std::fs::write(out_dir.join("dataset.meta"), meta.to_kv())
        .map_err(|e| Error::io(out_dir.join("dataset.meta"), e))?;
    Ok(meta)
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn list_file(&self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

pub fn load_split_stems(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = root.join(split.list_file());
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn load_pair(root: &Path, stem: &str) -> Result<ImagePair> {
    let vis_path = root.join(format!("images/visible/{stem}.png"));
    let th_path = root.join(format!("images/thermal/{stem}.png"));
    let vis_img = image::open(&vis_path)
        .map_err(|e| Error::integrity(&vis_path, format!("cannot read image: {e}")))?
        .to_rgb8();
    let th_img = image::open(&th_path)
        .map_err(|e| Error::integrity(&th_path, format!("cannot read image: {e}")))?
        .to_luma8();
    let (vw, vh) = (vis_img.width() as usize, vis_img.height() as usize);
    let (tw, th_h) = (th_img.width() as usize, th_img.height() as usize);
    if (vw, vh) != (tw, th_h) {
        return Err(Error::integrity(
            &th_path,
            format!("thermal size {tw}x{th_h} differs from visible {vw}x{vh}"),
        ));
    }
    let visible = Array3::from_shape_fn((vh, vw, 3), |(y, x, c)| {
        vis_img.get_pixel(x as u32, y as u32)[c]
    });
    let thermal =
        Array2::from_shape_fn((vh, vw), |(y, x)| th_img.get_pixel(x as u32, y as u32)[0]);

    let mut lists = Vec::with_capacity(3);
    for set in ["visible", "thermal", "union"] {
        let path = root.join(format!("annotations/{set}/{stem}.txt"));
        if !path.exists() {
            return Err(Error::integrity(&path, "missing annotation file"));
        }
        let anns = crate::supervision::read_annotations(&path)?;
        for a in &anns {
            a.validate(NUM_CLASSES)
                .map_err(|e| Error::integrity(&path, e.to_string()))?;
        }
        lists.push(anns);
    }
    let union = lists.pop().unwrap();
    let thermal_anns = lists.pop().unwrap();
    let visible_anns = lists.pop().unwrap();

    let meta_path = root.join(format!("metadata/{stem}.txt"));
    let meta = if meta_path.exists() {
        Some(read_meta_file(&meta_path)?)
    } else {
        None
    };

    Ok(ImagePair {
        stem: stem.to_string(),
        visible,
        thermal,
        annotations: AnnotationTriplet {
            visible: visible_anns,
            thermal: thermal_anns,
            union,
        },
        meta,
    })
}

/// Loads a whole split in its list-file order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<ImagePair>> {
    let stems = load_split_stems(root, split)?;
    stems.iter().map(|s| load_pair(root, s)).collect()
}

/// Paths of one stem's files, exposed for integrity tooling.
pub fn pair_paths(root: &Path, stem: &str) -> [PathBuf; 5] {
    [
        root.join(format!("images/visible/{stem}.png")),
        root.join(format!("images/thermal/{stem}.png")),
        root.join(format!("annotations/visible/{stem}.txt")),
        root.join(format!("annotations/thermal/{stem}.txt")),
        root.join(format!("annotations/union/{stem}.txt")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk_files(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let spec = SceneSpec {
            seed: 7,
            image_size: (96, 96),
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 3, 2, d1.path()).unwrap();
        generate_dataset(&spec, 3, 2, d2.path()).unwrap();
        let f1 = walk_files(d1.path());
        let f2 = walk_files(d2.path());
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(
                a.strip_prefix(d1.path()).unwrap(),
                b.strip_prefix(d2.path()).unwrap()
            );
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "differs: {a:?}"
            );
        }
    }

    #[test]
    fn degenerate_spec_aligns_all_annotation_sets() {
        let spec = SceneSpec {
            p_both: 1.0,
            p_visible_only: 0.0,
            p_thermal_only: 0.0,
            misalignment_max_px: 0.0,
            image_size: (96, 96),
            seed: 5,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 4, 0, dir.path()).unwrap();
        for i in 0..4 {
            let stem = stem_for(i);
            let v = std::fs::read_to_string(
                dir.path().join(format!("annotations/visible/{stem}.txt")),
            )
            .unwrap();
            let t = std::fs::read_to_string(
                dir.path().join(format!("annotations/thermal/{stem}.txt")),
            )
            .unwrap();
            let u =
                std::fs::read_to_string(dir.path().join(format!("annotations/union/{stem}.txt")))
                    .unwrap();
            assert_eq!(v, t);
            assert_eq!(v, u);
        }
    }

    #[test]
    fn visibility_fractions_concentrate() {
        let spec = SceneSpec::default();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for i in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(i + 1);
            let scene = sample_scene(&spec, &mut rng);
            for o in &scene.objects {
                total += 1;
                match o.kind {
                    VisibilityKind::Both => counts[0] += 1,
                    VisibilityKind::VisibleOnly => counts[1] += 1,
                    VisibilityKind::ThermalOnly => counts[2] += 1,
                }
            }
        }
        let f = |c: usize| c as f64 / total as f64;
        assert!((f(counts[0]) - 0.70).abs() < 0.03);
        assert!((f(counts[1]) - 0.15).abs() < 0.03);
        assert!((f(counts[2]) - 0.15).abs() < 0.03);
    }

    #[test]
    fn generated_dataset_round_trips_and_validates() {
        let spec = SceneSpec {
            image_size: (96, 96),
            seed: 3,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let meta = generate_dataset(&spec, 5, 2, dir.path()).unwrap();
        assert!(meta.anchors.is_some());

        let train = load_dataset(dir.path(), Split::Train).unwrap();
        let test = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 2);
        for pair in train.iter().chain(&test) {
            assert_eq!(pair.size(), (96, 96));
            let m = pair.meta.as_ref().unwrap();
            // every "both" object appears in both lists within the
            // misalignment bound
            let mut vi = 0usize;
            let mut ti = 0usize;
            for (k, kind) in m.kinds.iter().enumerate() {
                match kind {
                    VisibilityKind::Both => {
                        let a = pair.annotations.visible[vi];
                        let b = pair.annotations.thermal[ti];
                        let d = (((a.cx - b.cx) * 96.0).powi(2)
                            + ((a.cy - b.cy) * 96.0).powi(2))
                        .sqrt();
                        let bound = spec.misalignment_max_px * 2f64.sqrt() + 1e-6;
                        assert!(d <= bound, "object {k}: distance {d} > {bound}");
                        vi += 1;
                        ti += 1;
                    }
                    VisibilityKind::VisibleOnly => vi += 1,
                    VisibilityKind::ThermalOnly => ti += 1,
                }
            }
        }

        // dataset.meta round-trips
        let back = DatasetMeta::read(dir.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.n_train, 5);

        // missing file integrity error names the file
        std::fs::remove_file(dir.path().join("annotations/union/img_000001.txt")).unwrap();
        match load_pair(dir.path(), "img_000001") {
            Err(Error::DataIntegrity { path, .. }) => {
                assert!(path.to_string_lossy().contains("union/img_000001.txt"));
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn union_counts_match_at_zero_misalignment() {
        let spec = SceneSpec {
            misalignment_max_px: 0.0,
            image_size: (96, 96),
            seed: 21,
            ..Default::default()
        };
        for i in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i + 1);
            let scene = sample_scene(&spec, &mut rng);
            let (v, t) = scene_annotations(&scene, &spec);
            let u = build_union(&v, &t, 0.5);
            // expected: both + visible_only + thermal_only, unless two
            // distinct same-class objects overlap enough to cross-merge,
            // which the margin-based placement makes rare; assert the exact
            // count whenever no same-class pair overlaps above threshold
            let mut cross = false;
            'outer: for (ai, a) in v.iter().enumerate() {
                for (bi, b) in t.iter().enumerate() {
                    // same physical object shares identical coordinates here
                    if a.class_id == b.class_id && a.iou(b) >= 0.5 && *a != *b {
                        let _ = (ai, bi);
                        cross = true;
                        break 'outer;
                    }
                }
            }
            if !cross {
                let n_both = scene
                    .objects
                    .iter()
                    .filter(|o| o.kind == VisibilityKind::Both)
                    .count();
                let n_v = scene
                    .objects
                    .iter()
                    .filter(|o| o.kind == VisibilityKind::VisibleOnly)
                    .count();
                let n_t = scene
                    .objects
                    .iter()
                    .filter(|o| o.kind == VisibilityKind::ThermalOnly)
                    .count();
                assert_eq!(u.len(), n_both + n_v + n_t);
            }
        }
    }

    #[test]
    fn night_render_has_lower_contrast_than_day() {
        let spec = SceneSpec {
            image_size: (96, 96),
            seed: 13,
            ..Default::default()
        };
        for i in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i + 1);
            let mut scene = sample_scene(&spec, &mut rng);
            scene.night = false;
            let (day, _) = render_pair(&scene, &spec);
            scene.night = true;
            let (night, _) = render_pair(&scene, &spec);
            let std_of = |img: &Array3<u8>| {
                let n = img.len() as f64;
                let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
                (img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
            };
            assert!(
                std_of(&night) < std_of(&day),
                "night contrast not lower at stream {i}"
            );
        }
    }

    #[test]
    fn external_layout_fixture_loads() {
        // hand-written three-file fixture in the documented layout
        let dir = tempfile::tempdir().unwrap();
        for sub in [
            "images/visible",
            "images/thermal",
            "annotations/visible",
            "annotations/thermal",
            "annotations/union",
        ] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        let vis = Array3::<u8>::from_elem((64, 64, 3), 128);
        let th = Array2::<u8>::from_elem((64, 64), 30);
        write_png_rgb(&dir.path().join("images/visible/ext_000.png"), &vis).unwrap();
        write_png_gray(&dir.path().join("images/thermal/ext_000.png"), &th).unwrap();
        for set in ["visible", "thermal", "union"] {
            std::fs::write(
                dir.path().join(format!("annotations/{set}/ext_000.txt")),
                "1 0.500000 0.500000 0.250000 0.250000\n",
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("train.txt"), "ext_000\n").unwrap();
        std::fs::write(dir.path().join("test.txt"), "").unwrap();

        let pairs = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].meta.is_none());
        assert_eq!(pairs[0].annotations.union.len(), 1);
        assert!(load_dataset(dir.path(), Split::Test).unwrap().is_empty());
    }

    #[test]
    fn kmeans_anchors_are_sorted_and_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let boxes: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.gen_range(8.0..80.0), rng.gen_range(8.0..80.0)))
            .collect();
        let anchors = anchors_from_boxes(&boxes).unwrap();
        let areas: Vec<f64> = anchors.iter().flatten().map(|(w, h)| w * h).collect();
        assert!(areas.windows(2).all(|p| p[0] <= p[1]));
        for (w, h) in anchors.iter().flatten() {
            assert!(*w > 0.0 && *h > 0.0);
        }
        // deterministic
        let again = anchors_from_boxes(&boxes).unwrap();
        assert_eq!(anchors, again);
    }

    #[test]
    fn hflip_mirrors_images_and_annotations() {
        let spec = SceneSpec {
            image_size: (64, 64),
            seed: 31,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 1, 0, dir.path()).unwrap();
        let pair = &load_dataset(dir.path(), Split::Train).unwrap()[0];
        let flipped = pair.hflip();
        assert_eq!(pair.visible[[10, 3, 1]], flipped.visible[[10, 60, 1]]);
        for (a, b) in pair
            .annotations
            .visible
            .iter()
            .zip(&flipped.annotations.visible)
        {
            assert!((a.cx + b.cx - 1.0).abs() < 1e-12);
            assert_eq!(a.cy, b.cy);
            assert_eq!(a.w, b.w);
        }
        let double = flipped.hflip();
        assert_eq!(pair.visible, double.visible);
    }
}
