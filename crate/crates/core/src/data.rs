//! Synthetic multi-scale shapes dataset, augmentation and batching.
//!
//! Each sample is a textured background with filled shapes painted in
//! descending size order, so smaller shapes occlude larger ones. Class 0 is
//! background, classes `1..=K` are shapes. Every class is forced to appear
//! both near the smallest and near the largest end of a 16x log-uniform
//! size range somewhere in each split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{kernels, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{read_ten, write_ten, Tensor};

/// Seeded stream for `(seed, domain, a, b)`; distinct tuples give independent
/// streams.
pub fn derive_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, domain, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const DOMAIN_SCENE: u64 = 0x5343_454e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether local coordinates `(u, v)` (rotated frame, origin at the
    /// centre) fall inside a shape of extent `size`.
    pub fn contains(self, u: f64, v: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Square => {
                let h = r / std::f64::consts::SQRT_2;
                u.abs() <= h && v.abs() <= h
            }
            ShapeKind::Triangle => {
                let s3 = 3f64.sqrt();
                v >= -r / 2.0 && s3 * u + v <= r && -s3 * u + v <= r
            }
            ShapeKind::Ring => {
                let d = u * u + v * v;
                d <= r * r && d >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Bar => u.abs() <= r && v.abs() <= r / 4.0,
            ShapeKind::Cross => {
                let w = r / 5.0;
                (u.abs() <= r && v.abs() <= w) || (v.abs() <= r && u.abs() <= w)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ShapeKind>,
    /// Smallest object extent in pixels.
    pub min_size: f64,
    /// Largest / smallest extent.
    pub size_ratio: f64,
    /// Inclusive range of free (non-forced) objects per sample.
    pub objects: [usize; 2],
    pub textures: bool,
    /// Fraction of a forced object's area that must stay visible.
    pub min_visible: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            classes: ShapeKind::ALL.to_vec(),
            min_size: 6.0,
            size_ratio: 16.0,
            objects: [2, 5],
            textures: true,
            min_visible: 0.25,
            max_attempts: 64,
        }
    }
}

impl SceneSpec {
    /// Background plus one class per shape.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn max_size(&self) -> f64 {
        self.min_size * self.size_ratio
    }

    /// Size band of forced small objects: the bottom eighth of the log range.
    pub fn small_band(&self) -> (f64, f64) {
        (self.min_size, self.min_size * self.size_ratio.powf(0.125))
    }

    /// Size band of forced large objects: the top eighth of the log range.
    pub fn large_band(&self) -> (f64, f64) {
        (self.min_size * self.size_ratio.powf(0.875), self.max_size())
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.height == 0 || self.width == 0 {
            p.push("canvas extents must be positive".to_string());
        }
        if self.classes.is_empty() {
            p.push("at least one shape class is required".into());
        }
        if self.classes.len() + 1 > IGNORE_INDEX as usize {
            p.push("too many classes".into());
        }
        if !(self.min_size >= 1.0) {
            p.push(format!("min_size must be at least 1, got {}", self.min_size));
        }
        if !(self.size_ratio >= 1.0) {
            p.push(format!("size_ratio must be at least 1, got {}", self.size_ratio));
        }
        if self.objects[0] > self.objects[1] {
            p.push(format!("objects range {:?} is empty", self.objects));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            p.push(format!("min_visible must lie in [0, 1], got {}", self.min_visible));
        }
        if self.max_attempts == 0 {
            p.push("max_attempts must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }
}

/// One painted shape. `class` is the label id (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u16,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub angle: f64,
    #[serde(skip)]
    pub forced: bool,
    #[serde(skip)]
    pub color: [f64; 3],
    #[serde(skip)]
    pub texture: [f64; 3],
}

impl SceneObject {
    pub fn kind(&self, spec: &SceneSpec) -> ShapeKind {
        spec.classes[self.class as usize - 1]
    }

    /// Inclusive pixel bounding box clipped to the canvas, if non-empty.
    fn bbox(&self, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.size * 0.75;
        let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            let a = (lo.floor().max(0.0)) as usize;
            let b = hi.ceil().min(n as f64 - 1.0);
            (b >= 0.0 && a as f64 <= b).then_some((a, b as usize))
        };
        let (y0, y1) = clip(self.cy - r, self.cy + r, h)?;
        let (x0, x1) = clip(self.cx - r, self.cx + r, w)?;
        Some((y0, y1, x0, x1))
    }

    /// Whether the centre of pixel `(y, x)` lies inside the shape.
    pub fn covers(&self, spec: &SceneSpec, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.kind(spec).contains(u, v, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(H, W)` class ids, [`IGNORE_INDEX`] for padding.
    pub label: Tensor<u16>,
}

impl Sample {
    pub fn extents(&self) -> (usize, usize) {
        let s = self.label.shape();
        (s[0], s[1])
    }
}

/// A rendered sample before image quantization is undone.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Tensor<u8>,
    pub label: Tensor<u16>,
    pub objects: Vec<SceneObject>,
}

impl Rendered {
    pub fn sample(&self) -> Sample {
        Sample {
            image: self.image.map(|v| v as f32 / 255.0),
            label: self.label.clone(),
        }
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Forced `(class, large)` pairs that sample `index` of an `n`-sample split
/// carries, assigned round-robin.
pub fn forced_objects(spec: &SceneSpec, n: usize, index: usize) -> Vec<(u16, bool)> {
    let total = 2 * spec.classes.len();
    (0..total)
        .filter(|j| j % n == index)
        .map(|j| ((j / 2 + 1) as u16, j % 2 == 1))
        .collect()
}

fn draw_objects(spec: &SceneSpec, forced: &[(u16, bool)], rng: &mut impl Rng) -> Vec<SceneObject> {
    let k = spec.classes.len() as u16;
    let free = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let mut plan: Vec<(u16, f64, bool)> = forced
        .iter()
        .map(|&(class, large)| {
            let (lo, hi) = if large { spec.large_band() } else { spec.small_band() };
            (class, log_uniform(rng, lo, hi), true)
        })
        .collect();
    for _ in 0..free {
        let class = rng.gen_range(1..=k);
        plan.push((class, log_uniform(rng, spec.min_size, spec.max_size()), false));
    }
    // Largest first, so later (smaller) shapes are painted on top.
    plan.sort_by(|a, b| b.1.total_cmp(&a.1));
    plan.into_iter()
        .map(|(class, size, forced)| {
            let mut color = [0.0; 3];
            for c in &mut color {
                *c = rng.gen_range(0.1..0.9);
            }
            SceneObject {
                class,
                cx: rng.gen_range(0.0..spec.width as f64),
                cy: rng.gen_range(0.0..spec.height as f64),
                size,
                angle: rng.gen_range(0.0..std::f64::consts::TAU),
                forced,
                color,
                texture: [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.0..6.3)],
            }
        })
        .collect()
}

/// Paints `objects` in order. Returns the image, the label map and, per
/// object, `(painted, visible)` pixel counts.
fn paint(
    spec: &SceneSpec,
    objects: &[SceneObject],
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<u16>, Vec<(usize, usize)>) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut img = vec![0.0f64; 3 * plane];
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let (fx, fy, phase) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.0..6.3));
    let amp = if spec.textures { 0.06 } else { 0.0 };
    let diag = ((h * h + w * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 * dir.cos() + y as f64 * dir.sin()) / diag).abs().min(1.0);
            let tex = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                img[c * plane + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t + tex;
            }
        }
    }
    let mut label = vec![0u16; plane];
    let mut owner = vec![usize::MAX; plane];
    let mut painted = vec![0usize; objects.len()];
    for (i, o) in objects.iter().enumerate() {
        let Some((y0, y1, x0, x1)) = o.bbox(h, w) else {
            continue;
        };
        let [tf, tg, tp] = o.texture;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !o.covers(spec, y, x) {
                    continue;
                }
                let p = y * w + x;
                label[p] = o.class;
                owner[p] = i;
                painted[i] += 1;
                let tex = amp * (tf * x as f64 - tg * y as f64 + tp).sin();
                for c in 0..3 {
                    img[c * plane + p] = o.color[c] + tex;
                }
            }
        }
    }
    let mut visible = vec![0usize; objects.len()];
    for &o in &owner {
        if o != usize::MAX {
            visible[o] += 1;
        }
    }
    (img, label, painted.into_iter().zip(visible).collect())
}

/// Renders sample `index` of an `n`-sample split. Deterministic in
/// `(spec, seed, n, index)`.
pub fn render_sample(spec: &SceneSpec, seed: u64, n: usize, index: usize) -> Result<Rendered> {
    spec.validate()?;
    let forced = forced_objects(spec, n, index);
    let mut failed = None;
    for attempt in 0..spec.max_attempts {
        let mut rng = derive_rng(seed, DOMAIN_SCENE, index as u64, attempt as u64);
        let objects = draw_objects(spec, &forced, &mut rng);
        let (img, label, counts) = paint(spec, &objects, &mut rng);
        let bad = objects.iter().zip(&counts).find(|(o, &(painted, visible))| {
            o.forced && (painted == 0 || (visible as f64) < spec.min_visible * painted as f64)
        });
        if let Some((o, _)) = bad {
            failed = Some(o.class);
            continue;
        }
        let (h, w) = (spec.height, spec.width);
        let image = Tensor::new(
            vec![3, h, w],
            img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        )?;
        let label = Tensor::new(vec![h, w], label)?;
        return Ok(Rendered { image, label, objects });
    }
    let class = failed.expect("at least one attempt ran") as usize;
    Err(Error::Generation {
        class,
        name: spec.classes[class - 1].name().to_string(),
        attempts: spec.max_attempts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: u16,
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub label: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub format: u32,
    pub spec: SceneSpec,
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub ignore_index: u16,
    pub samples: Vec<SampleRecord>,
}

impl SplitIndex {
    /// Smallest and largest object extent per shape class across the split.
    pub fn size_ranges(&self) -> Vec<Option<(f64, f64)>> {
        let mut out = vec![None; self.num_classes - 1];
        for o in self.samples.iter().flat_map(|s| &s.objects) {
            let slot: &mut Option<(f64, f64)> = &mut out[o.class as usize - 1];
            *slot = Some(match *slot {
                None => (o.size, o.size),
                Some((lo, hi)) => (lo.min(o.size), hi.max(o.size)),
            });
        }
        out
    }
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `n` samples to `out` (`index.json`, `imgs/NNNN.ten`,
/// `labels/NNNN.ten`).
pub fn generate_split(spec: &SceneSpec, n: usize, seed: u64, out: &Path) -> Result<SplitIndex> {
    if n == 0 {
        return Err(Error::config("a split needs at least one sample"));
    }
    spec.validate()?;
    let rendered: Vec<Rendered> = (0..n)
        .into_par_iter()
        .map(|i| render_sample(spec, seed, n, i))
        .collect::<Result<_>>()?;
    for sub in ["imgs", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::path(&d, e))?;
    }
    let width = (n - 1).to_string().len().max(4);
    let mut samples = Vec::with_capacity(n);
    for (i, r) in rendered.iter().enumerate() {
        let image = format!("imgs/{i:0width$}.ten");
        let label = format!("labels/{i:0width$}.ten");
        write_ten(out.join(&image), &r.image)?;
        write_ten(out.join(&label), &r.label)?;
        samples.push(SampleRecord {
            image,
            label,
            objects: r
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class: o.class,
                    size: o.size,
                })
                .collect(),
        });
    }
    let index = SplitIndex {
        format: 1,
        spec: spec.clone(),
        seed,
        num_classes: spec.num_classes(),
        class_names: std::iter::once("background".to_string())
            .chain(spec.classes.iter().map(|c| c.name().to_string()))
            .collect(),
        ignore_index: IGNORE_INDEX,
        samples,
    };
    let path = out.join(INDEX_FILE);
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::path(&path, e))?;
    Ok(index)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: SplitIndex,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        let index: SplitIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let samples = index
            .samples
            .par_iter()
            .map(|r| {
                let raw = read_ten(root.join(&r.image))?;
                let scale = match raw {
                    crate::tensor::AnyTensor::U8(_) => 1.0 / 255.0,
                    _ => 1.0,
                };
                let image = raw.to_f32().map(|v| v * scale);
                if !matches!(image.shape(), [3, _, _]) {
                    return Err(Error::Data(format!("{}: image shape {:?}", r.image, image.shape())));
                }
                let label = read_ten(root.join(&r.label))?.into_u16()?;
                if label.shape() != &image.shape()[1..] {
                    return Err(Error::Data(format!(
                        "{}: label shape {:?} does not match image {:?}",
                        r.label,
                        label.shape(),
                        image.shape()
                    )));
                }
                let k = index.num_classes as u16;
                if let Some(bad) = label.data().iter().find(|&&v| v >= k && v != IGNORE_INDEX) {
                    return Err(Error::Data(format!("{}: label id {bad} out of range", r.label)));
                }
                Ok(Sample { image, label })
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Data(format!("{}: dataset is empty", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.index.num_classes
    }
}

/// Nearest-neighbour resize of a label map with half-pixel centres.
pub fn resize_labels(label: &Tensor<u16>, out_h: usize, out_w: usize) -> Tensor<u16> {
    let (h, w) = (label.shape()[0], label.shape()[1]);
    let src = |o: usize, n_out: usize, n_in: usize| -> usize {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let ys: Vec<usize> = (0..out_h).map(|y| src(y, out_h, h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|x| src(x, out_w, w)).collect();
    let d = label.data();
    Tensor::from_fn(vec![out_h, out_w], |i| d[ys[i / out_w] * w + xs[i % out_w]])
}

/// Bilinear image / nearest label rescale to `(out_h, out_w)`.
pub fn scale_sample(s: &Sample, out_h: usize, out_w: usize) -> Result<Sample> {
    let (h, w) = s.extents();
    if (out_h, out_w) == (h, w) {
        return Ok(s.clone());
    }
    let x = s.image.clone().reshape(vec![1, 3, h, w])?;
    let image = kernels::resize_bilinear(&x, out_h, out_w)?.reshape(vec![3, out_h, out_w])?;
    Ok(Sample {
        image,
        label: resize_labels(&s.label, out_h, out_w),
    })
}

/// Window `(top, left, h, w)` of the sample; parts outside the source are
/// zero in the image and [`IGNORE_INDEX`] in the label.
pub fn crop_sample(s: &Sample, top: usize, left: usize, ch: usize, cw: usize) -> Result<Sample> {
    if ch == 0 || cw == 0 {
        return Err(Error::config("crop extents must be positive"));
    }
    let (h, w) = s.extents();
    let mut image = vec![0.0f32; 3 * ch * cw];
    let mut label = vec![IGNORE_INDEX; ch * cw];
    for y in 0..ch {
        let sy = top + y;
        if sy >= h {
            break;
        }
        for x in 0..cw {
            let sx = left + x;
            if sx >= w {
                break;
            }
            label[y * cw + x] = s.label.data()[sy * w + sx];
            for c in 0..3 {
                image[(c * ch + y) * cw + x] = s.image.data()[(c * h + sy) * w + sx];
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![3, ch, cw], image)?,
        label: Tensor::new(vec![ch, cw], label)?,
    })
}

pub fn flip_sample(s: &Sample) -> Sample {
    let (h, w) = s.extents();
    let image = kernels::flip_horizontal(&s.image.clone().reshape(vec![1, 3, h, w]).expect("rank 3"))
        .reshape(vec![3, h, w])
        .expect("same size");
    let label = kernels::flip_horizontal(&s.label.clone().reshape(vec![1, 1, h, w]).expect("rank 2"))
        .reshape(vec![h, w])
        .expect("same size");
    Sample { image, label }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: [usize; 2],
    pub scale_range: [f64; 2],
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: [96, 96],
            scale_range: [0.5, 2.0],
            flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.crop.contains(&0) {
            p.push(format!("crop {:?} has a zero extent", self.crop));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            p.push(format!("scale_range {:?} is invalid", self.scale_range));
        }
        p
    }
}

/// Concrete draws of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn apply(&self, s: &Sample, crop: [usize; 2]) -> Result<Sample> {
        let (h, w) = s.extents();
        let sh = ((h as f64 * self.scale).round() as usize).max(1);
        let sw = ((w as f64 * self.scale).round() as usize).max(1);
        let scaled = scale_sample(s, sh, sw)?;
        let out = crop_sample(&scaled, self.top, self.left, crop[0], crop[1])?;
        Ok(if self.flip { flip_sample(&out) } else { out })
    }
}

/// Random scale, random crop (padding when the scaled sample is smaller than
/// the crop) and a fair-coin horizontal flip.
pub fn augment(s: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<Sample> {
    let p = cfg.problems();
    if !p.is_empty() {
        return Err(Error::config(p.join("; ")));
    }
    let [lo, hi] = cfg.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (h, w) = s.extents();
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let top = rng.gen_range(0..=sh.saturating_sub(cfg.crop[0]));
    let left = rng.gen_range(0..=sw.saturating_sub(cfg.crop[1]));
    let flip = cfg.flip && rng.gen_bool(0.5);
    AugmentDraw { scale, top, left, flip }.apply(s, cfg.crop)
}

/// Epoch-seeded shuffle of `0..len` cut into batches; the last batch may be
/// short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derive_rng(seed, 0x5348_5546, epoch, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks samples of equal extents into `(N, 3, H, W)` images and `(N, H, W)`
/// labels.
pub fn collate(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<u16>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&labels)?))
}

/// Un-augmented batches for one epoch.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<(Tensor<f32>, Tensor<u16>)>> + '_> {
    let idx = batch_indices(ds.len(), batch_size, seed, epoch)?;
    Ok(idx.into_iter().map(move |b| {
        let items: Vec<Sample> = b.iter().map(|&i| ds.samples[i].clone()).collect();
        collate(&items)
    }))
}
