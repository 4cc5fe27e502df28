//! Synthetic shapes benchmark.
//!
//! Scenes are 64×64 RGB images holding 1–5 textured shapes over a textured
//! background. Every instance carries a box and a visible-region mask. Masks of
//! novel-category instances are kept (evaluation needs them) but training
//! samples gate them behind an [`AccessAudit`] so any read that the partial
//! supervision setting forbids is counted.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub type DataRng = ChaCha8Rng;

/// SplitMix64 finalizer; used to derive independent per-scene seeds.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> DataRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Crescent,
    Ellipse,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Star,
        ShapeKind::Crescent,
        ShapeKind::Ellipse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Crescent => "crescent",
            ShapeKind::Ellipse => "ellipse",
        }
    }

    /// Membership test in the shape's unit frame (the shape fits in the unit
    /// disk before scaling).
    fn contains_unit(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
            ShapeKind::Triangle => point_in_polygon(u, v, &regular_star(3, 1.0, 0.5)),
            ShapeKind::Ring => (0.36..=1.0).contains(&r2),
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            ShapeKind::Star => point_in_polygon(u, v, &regular_star(5, 1.0, 0.45)),
            ShapeKind::Crescent => {
                let du = u - 0.45;
                r2 <= 1.0 && du * du + v * v > 0.64
            }
            ShapeKind::Ellipse => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown shape '{s}'")))
    }
}

/// Alternating outer/inner vertices; `points = 3, inner = outer / 2` gives an
/// equilateral triangle (inner vertices lie on the edges).
fn regular_star(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|k| {
            let a = -PI / 2.0 + PI * k as f64 / points as f64;
            let r = if k % 2 == 0 { outer } else { inner };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: ShapeKind,
    /// (row, col) in image pixels.
    pub center: (f64, f64),
    pub scale: f64,
    pub rotation: f64,
    pub fill_texture_seed: u64,
}

impl ShapeSpec {
    /// Whether the pixel whose center is at (row + 0.5, col + 0.5) is covered.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let dy = (row as f64 + 0.5 - self.center.0) / self.scale;
        let dx = (col as f64 + 0.5 - self.center.1) / self.scale;
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.category.contains_unit(u, v)
    }
}

/// Binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Mask::from_fn(height, width, |r, c| rows[r][c] != 0)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn flipped_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }
}

/// 8-bit RGB image; values map to [0, 1] as `v / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch] as f32 / 255.0
    }
}

/// Half-open box in pixels: rows `r0..r1`, cols `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn of_mask(mask: &Mask) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for r in 0..mask.height {
            for c in 0..mask.width {
                if mask.get(r, c) {
                    let e = b.get_or_insert(BBox {
                        r0: r,
                        c0: c,
                        r1: r + 1,
                        c1: c + 1,
                    });
                    e.r0 = e.r0.min(r);
                    e.c0 = e.c0.min(c);
                    e.r1 = e.r1.max(r + 1);
                    e.c1 = e.c1.max(c + 1);
                }
            }
        }
        b
    }

    pub fn height(&self) -> usize {
        self.r1.saturating_sub(self.r0)
    }

    pub fn width(&self) -> usize {
        self.c1.saturating_sub(self.c0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub shape: ShapeSpec,
    pub bbox: BBox,
    /// Visible region (occlusion by later instances removed).
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub const MIN_INSTANCE_PIXELS: usize = 16;
const MAX_INSTANCES: usize = 5;

/// Generate the train and val splits. Fully determined by `(config, seed)`.
pub fn generate_dataset(config: &TrainConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let categories = config.categories();
    let train = (0..config.train_scenes)
        .map(|i| generate_scene(config.image_size, &categories, derive_seed(seed, 1, i as u64), i))
        .collect();
    let val = (0..config.val_scenes)
        .map(|i| generate_scene(config.image_size, &categories, derive_seed(seed, 2, i as u64), i))
        .collect();
    Ok(Dataset { train, val })
}

fn random_color(rng: &mut DataRng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// One scene from its own seed; resamples layouts until every visible mask
/// has at least [`MIN_INSTANCE_PIXELS`] pixels.
pub fn generate_scene(size: usize, categories: &[ShapeKind], seed: u64, id: usize) -> Scene {
    let mut rng = rng_from_seed(seed);
    loop {
        let n = rng.gen_range(1..=MAX_INSTANCES);
        let shapes: Vec<ShapeSpec> = (0..n)
            .map(|_| {
                let scale = rng.gen_range(7.0..14.0);
                let lo = scale * 0.4;
                let hi = size as f64 - scale * 0.4;
                ShapeSpec {
                    category: categories[rng.gen_range(0..categories.len())],
                    center: (rng.gen_range(lo..hi), rng.gen_range(lo..hi)),
                    scale,
                    rotation: rng.gen_range(0.0..2.0 * PI),
                    fill_texture_seed: rng.gen(),
                }
            })
            .collect();

        let mut owner: Vec<Option<usize>> = vec![None; size * size];
        for (k, s) in shapes.iter().enumerate() {
            for r in 0..size {
                for c in 0..size {
                    if s.covers(r, c) {
                        owner[r * size + c] = Some(k);
                    }
                }
            }
        }
        let masks: Vec<Mask> = (0..n)
            .map(|k| Mask::from_fn(size, size, |r, c| owner[r * size + c] == Some(k)))
            .collect();
        if masks.iter().any(|m| m.count() < MIN_INSTANCE_PIXELS) {
            continue;
        }

        let image = render(size, &shapes, &owner, &mut rng);
        let instances = shapes
            .into_iter()
            .zip(masks)
            .map(|(shape, mask)| Instance {
                bbox: BBox::of_mask(&mask).expect("nonempty mask"),
                shape,
                mask,
            })
            .collect();
        return Scene {
            id,
            image,
            instances,
        };
    }
}

fn render(size: usize, shapes: &[ShapeSpec], owner: &[Option<usize>], rng: &mut DataRng) -> RgbImage {
    let bg_a = random_color(rng, 0.0, 0.5);
    let bg_b = random_color(rng, 0.0, 0.5);
    let angle: f64 = rng.gen_range(0.0..2.0 * PI);
    let (gs, gc) = angle.sin_cos();
    let bg_noise: f32 = rng.gen_range(0.06..0.14);

    let fills: Vec<([f32; 3], f32, DataRng)> = shapes
        .iter()
        .map(|s| {
            let mut tr = rng_from_seed(s.fill_texture_seed);
            let color = random_color(&mut tr, 0.3, 1.0);
            let amp = tr.gen_range(0.0..0.04);
            (color, amp, tr)
        })
        .collect();
    let mut fills = fills;

    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let px = match owner[r * size + c] {
                Some(k) => {
                    let (color, amp, tr) = &mut fills[k];
                    let n: f32 = tr.gen_range(-1.0..1.0) * *amp;
                    [color[0] + n, color[1] + n, color[2] + n]
                }
                None => {
                    let t = ((gc * c as f64 + gs * r as f64) / size as f64 * 0.5 + 0.5) as f32;
                    let mut p = [0.0f32; 3];
                    for ch in 0..3 {
                        let n: f32 = rng.gen_range(-1.0..1.0) * bg_noise;
                        p[ch] = bg_a[ch] * (1.0 - t) + bg_b[ch] * t + n;
                    }
                    p
                }
            };
            for v in px {
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage {
        height: size,
        width: size,
        data,
    }
}

/// Counts reads of novel-category ground-truth masks made from the training
/// path. Any nonzero count is a partial-supervision violation.
#[derive(Debug, Clone, Default)]
pub struct AccessAudit(Arc<AtomicUsize>);

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trip(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn trips(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    pub fn tripped(&self) -> bool {
        self.trips() > 0
    }
}

#[derive(Debug, Clone)]
enum MaskGate {
    /// Evaluation samples: every mask may be read.
    Open,
    /// Training samples: novel masks are readable only with `oracle`.
    Training { audit: AccessAudit, oracle: bool },
}

/// One object proposal resampled to `resolution × resolution`.
#[derive(Debug, Clone)]
pub struct RoiSample {
    /// `resolution × resolution × 3`, row-major, channels last, in [0, 1].
    pub crop: Vec<f32>,
    pub resolution: usize,
    pub category: ShapeKind,
    pub category_id: usize,
    pub is_base: bool,
    pub scene_id: usize,
    pub instance: usize,
    gt_mask: Option<Mask>,
    gate: MaskGate,
}

impl RoiSample {
    /// Ground-truth mask, subject to the sample's access gate. A training
    /// sample of a novel category returns `None` and trips the audit unless
    /// the oracle switch was set when the sample was gated.
    pub fn gt_mask(&self) -> Option<&Mask> {
        match &self.gate {
            MaskGate::Open => self.gt_mask.as_ref(),
            MaskGate::Training { audit, oracle } => {
                if self.is_base || *oracle {
                    self.gt_mask.as_ref()
                } else {
                    audit.trip();
                    None
                }
            }
        }
    }

    pub fn has_gt_mask(&self) -> bool {
        self.gt_mask.is_some()
    }

    /// Whether the training path may read this sample's mask.
    pub fn mask_available(&self) -> bool {
        match &self.gate {
            MaskGate::Open => self.gt_mask.is_some(),
            MaskGate::Training { oracle, .. } => {
                self.gt_mask.is_some() && (self.is_base || *oracle)
            }
        }
    }

    /// Re-gate the sample for the training path.
    pub fn into_training(mut self, audit: &AccessAudit, oracle: bool) -> Self {
        self.gate = MaskGate::Training {
            audit: audit.clone(),
            oracle,
        };
        self
    }

    pub fn flipped_horizontal(&self) -> RoiSample {
        let r = self.resolution;
        let mut crop = vec![0.0; self.crop.len()];
        for y in 0..r {
            for x in 0..r {
                for ch in 0..3 {
                    crop[(y * r + x) * 3 + ch] = self.crop[(y * r + (r - 1 - x)) * 3 + ch];
                }
            }
        }
        RoiSample {
            crop,
            gt_mask: self.gt_mask.as_ref().map(Mask::flipped_horizontal),
            ..self.clone()
        }
    }
}

/// Crop instance `index` of `scene` with each box side perturbed by up to
/// `jitter × box size`, clamp to the image, and resample to `resolution²`
/// (bilinear for pixels, nearest for the mask). The returned sample has an
/// open mask gate; use [`RoiSample::into_training`] for the training path.
pub fn extract_roi(
    scene: &Scene,
    index: usize,
    jitter: f64,
    resolution: usize,
    config: &TrainConfig,
    rng: &mut DataRng,
) -> Result<RoiSample> {
    if !(0.0..=0.2).contains(&jitter) {
        return Err(Error::Config(format!("jitter {jitter} outside [0, 0.2]")));
    }
    let inst = scene.instances.get(index).ok_or(Error::Index {
        index,
        len: scene.instances.len(),
    })?;
    let (h_img, w_img) = (scene.image.height as f64, scene.image.width as f64);
    let b = inst.bbox;
    let (bh, bw) = (b.height() as f64, b.width() as f64);
    let mut side = |v: usize, extent: f64| -> f64 {
        if jitter > 0.0 {
            v as f64 + rng.gen_range(-jitter..=jitter) * extent
        } else {
            v as f64
        }
    };
    let r0 = side(b.r0, bh).clamp(0.0, h_img);
    let c0 = side(b.c0, bw).clamp(0.0, w_img);
    let r1 = side(b.r1, bh).clamp(0.0, h_img);
    let c1 = side(b.c1, bw).clamp(0.0, w_img);
    if r1 - r0 <= 0.0 || c1 - c0 <= 0.0 {
        return Err(Error::DegenerateRoi((
            r0.floor() as i64,
            c0.floor() as i64,
            r1.ceil() as i64,
            c1.ceil() as i64,
        )));
    }

    let res = resolution;
    let sy = (r1 - r0) / res as f64;
    let sx = (c1 - c0) / res as f64;
    let mut crop = Vec::with_capacity(res * res * 3);
    let mut mask = Mask::new(res, res);
    for i in 0..res {
        let y = r0 + (i as f64 + 0.5) * sy;
        for j in 0..res {
            let x = c0 + (j as f64 + 0.5) * sx;
            crop.extend_from_slice(&bilinear(&scene.image, y - 0.5, x - 0.5));
            let mr = (y.floor() as usize).min(scene.image.height - 1);
            let mc = (x.floor() as usize).min(scene.image.width - 1);
            mask.set(i, j, inst.mask.get(mr, mc));
        }
    }

    let category = inst.shape.category;
    let category_id = config
        .class_id(category)
        .ok_or_else(|| Error::Config(format!("category {category} not in split")))?;
    Ok(RoiSample {
        crop,
        resolution: res,
        category,
        category_id,
        is_base: config.is_base(category),
        scene_id: scene.id,
        instance: index,
        gt_mask: Some(mask),
        gate: MaskGate::Open,
    })
}

fn bilinear(img: &RgbImage, y: f64, x: f64) -> [f32; 3] {
    let max_r = (img.height - 1) as f64;
    let max_c = (img.width - 1) as f64;
    let y = y.clamp(0.0, max_r);
    let x = x.clamp(0.0, max_c);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
        let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// All RoIs of a split. Evaluation samples use `jitter = 0` and no rng
/// draws; training samples are re-gated by the trainer.
pub fn extract_split(
    scenes: &[Scene],
    jitter: f64,
    config: &TrainConfig,
    rng: &mut DataRng,
) -> Result<Vec<RoiSample>> {
    let mut out = Vec::new();
    for scene in scenes {
        for i in 0..scene.instances.len() {
            match extract_roi(scene, i, jitter, config.roi_resolution, config, rng) {
                Ok(s) => out.push(s),
                Err(Error::DegenerateRoi(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk layout

const INDEX_HEADER: &str =
    "# scene r0 c0 r1 c1 category is_base mask_path center_r center_c scale rotation texture_seed";

/// Write `<out>/train` and `<out>/val`, each with `scene_XXXXX.ppm` images,
/// `masks/scene_XXXXX_K.pgm` masks and an `index.txt` sidecar.
pub fn write_dataset(dataset: &Dataset, config: &TrainConfig, out: &Path) -> Result<()> {
    for split in [Split::Train, Split::Val] {
        let dir = out.join(split.name());
        let mask_dir = dir.join("masks");
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        let index_path = dir.join("index.txt");
        let mut index = String::new();
        index.push_str(INDEX_HEADER);
        index.push('\n');
        for scene in dataset.split(split) {
            let img_path = dir.join(format!("scene_{:05}.ppm", scene.id));
            write_pnm(
                &img_path,
                scene.image.width,
                scene.image.height,
                &scene.image.data,
                image::ExtendedColorType::Rgb8,
            )?;
            for (k, inst) in scene.instances.iter().enumerate() {
                let rel = format!("masks/scene_{:05}_{k}.pgm", scene.id);
                save_mask(&inst.mask, &dir.join(&rel))?;
                let s = &inst.shape;
                index.push_str(&format!(
                    "{} {} {} {} {} {} {} {} {:?} {:?} {:?} {:?} {}\n",
                    scene.id,
                    inst.bbox.r0,
                    inst.bbox.c0,
                    inst.bbox.r1,
                    inst.bbox.c1,
                    s.category,
                    u8::from(config.is_base(s.category)),
                    rel,
                    s.center.0,
                    s.center.1,
                    s.scale,
                    s.rotation,
                    s.fill_texture_seed
                ));
            }
        }
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    }
    let cfg_path = out.join("dataset.toml");
    fs::write(&cfg_path, config.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(())
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let buf: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pnm(path, mask.width, mask.height, &buf, image::ExtendedColorType::L8)
}

/// Binary PPM (`Rgb8`) or PGM (`L8`). The encoder's default would write PAM
/// regardless of the file extension.
pub fn write_pnm(
    path: &Path,
    width: usize,
    height: usize,
    data: &[u8],
    color: image::ExtendedColorType,
) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let subtype = match color {
        image::ExtendedColorType::L8 => PnmSubtype::Graymap(SampleEncoding::Binary),
        _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)?;
    Ok(())
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        height: h as usize,
        width: w as usize,
        data: img.as_raw().iter().map(|&v| v >= 128).collect(),
    })
}

fn parse_field<T: FromStr>(tok: Option<&str>, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse(format!("index line {line}: bad or missing field")))
}

fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut scenes: Vec<Scene> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: usize = parse_field(t.next(), ln)?;
        let bbox = BBox {
            r0: parse_field(t.next(), ln)?,
            c0: parse_field(t.next(), ln)?,
            r1: parse_field(t.next(), ln)?,
            c1: parse_field(t.next(), ln)?,
        };
        let category: ShapeKind = parse_field(t.next(), ln)?;
        let _is_base: u8 = parse_field(t.next(), ln)?;
        let rel: String = parse_field(t.next(), ln)?;
        let shape = ShapeSpec {
            category,
            center: (parse_field(t.next(), ln)?, parse_field(t.next(), ln)?),
            scale: parse_field(t.next(), ln)?,
            rotation: parse_field(t.next(), ln)?,
            fill_texture_seed: parse_field(t.next(), ln)?,
        };
        let mask_path = dir.join(&rel);
        let mask = load_mask(&mask_path)
            .map_err(|_| Error::MissingMask(mask_path.display().to_string()))?;
        if scenes.last().map(|s| s.id) != Some(id) {
            let img_path = dir.join(format!("scene_{id:05}.ppm"));
            let img = image::open(&img_path)?.to_rgb8();
            let (w, h) = img.dimensions();
            scenes.push(Scene {
                id,
                image: RgbImage {
                    height: h as usize,
                    width: w as usize,
                    data: img.into_raw(),
                },
                instances: Vec::new(),
            });
        }
        scenes
            .last_mut()
            .expect("scene pushed")
            .instances
            .push(Instance { shape, bbox, mask });
    }
    Ok(scenes)
}

/// Load a dataset written by [`write_dataset`], with the configuration echo.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, TrainConfig)> {
    let config = TrainConfig::load(&dir.join("dataset.toml"))?;
    let train = load_split(&dir.join(Split::Train.name()))?;
    let val = load_split(&dir.join(Split::Val.name()))?;
    Ok((Dataset { train, val }, config))
}

/// Write a plain-text summary line per split; used by the CLI.
pub fn summarize(dataset: &Dataset, config: &TrainConfig, mut w: impl Write) -> std::io::Result<()> {
    for split in [Split::Train, Split::Val] {
        let scenes = dataset.split(split);
        let (mut base, mut novel) = (0, 0);
        for s in scenes {
            for i in &s.instances {
                if config.is_base(i.shape.category) {
                    base += 1;
                } else {
                    novel += 1;
                }
            }
        }
        writeln!(
            w,
            "{}: {} scenes, {} base instances, {} novel instances",
            split.name(),
            scenes.len(),
            base,
            novel
        )?;
    }
    Ok(())
}
