//! ShiftShapes: a procedural two-domain segmentation benchmark.
//!
//! Both domains share one geometry process, so label statistics are identical
//! and only appearance shifts. The target domain rotates hue, compresses
//! contrast and adds per-pixel noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::photometric::{hsv_to_rgb, rotate_hue};
use crate::imaging::pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::imaging::{Image, LabelMap};
use crate::io::write_atomic;
use crate::rng::RngStream;

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "circle", "square", "triangle", "stripe", "blob"];

pub const BACKGROUND: u8 = 0;
pub const CIRCLE: u8 = 1;
pub const SQUARE: u8 = 2;
pub const TRIANGLE: u8 = 3;
pub const STRIPE: u8 = 4;
pub const BLOB: u8 = 5;

/// Probability that an image contains at least one instance of each class.
pub const PRESENCE: [f64; NUM_CLASSES] = [1.0, 0.7, 0.7, 0.7, 0.8, 0.08];

const HUES: [f64; NUM_CLASSES] = [0.0, 0.0, 0.6, 0.2, 0.4, 0.8];
const HUE_JITTER: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    /// Global hue rotation in turns.
    pub hue_shift: f64,
    /// Contrast scale around mid-grey.
    pub contrast: f64,
    /// Half-width of uniform per-pixel noise.
    pub noise_amplitude: f64,
}

impl Appearance {
    pub const SOURCE: Self = Self {
        hue_shift: 0.0,
        contrast: 1.0,
        noise_amplitude: 0.0,
    };
    pub const TARGET: Self = Self {
        hue_shift: 0.08,
        contrast: 0.8,
        noise_amplitude: 0.05,
    };

    pub fn of(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::SOURCE,
            Domain::Target => Self::TARGET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub domain: Domain,
    pub seed: u64,
    pub appearance: Appearance,
}

impl SceneSpec {
    pub fn new(domain: Domain, seed: u64) -> Self {
        Self {
            domain,
            seed,
            appearance: Appearance::of(domain),
        }
    }
}

enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, half: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Stripe { nx: f64, ny: f64, offset: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Stripe { nx, ny, offset, half_width } => {
                (nx * x + ny * y - offset).abs() <= half_width
            }
        }
    }
}

struct Layer {
    class: u8,
    shape: Shape,
    rgb: [f64; 3],
    /// Brightness offset of the alternate texture cells.
    texture: f64,
}

fn class_colour(class: u8, s: &mut RngStream) -> [f64; 3] {
    let hue = HUES[class as usize] + s.uniform(-HUE_JITTER, HUE_JITTER);
    let sat = s.uniform(0.6, 0.9);
    let val = s.uniform(0.6, 0.9);
    let (r, g, b) = hsv_to_rgb(hue, sat, val);
    [r, g, b]
}

fn texture_cell(class: u8, x: usize, y: usize) -> bool {
    match class {
        CIRCLE => (x + y) % 2 == 0,
        SQUARE => (y / 2) % 2 == 0,
        _ => false,
    }
}

fn sample_layers(h: usize, w: usize, s: &mut RngStream) -> Vec<Layer> {
    let scale = h.min(w) as f64 / 64.0;
    let (hf, wf) = (h as f64, w as f64);
    let mut layers = Vec::new();

    // painter's order: later layers overwrite earlier ones
    let present: Vec<bool> = PRESENCE.iter().map(|&p| s.bernoulli(p)).collect();
    if present[SQUARE as usize] {
        for _ in 0..s.int_inclusive(1, 2) {
            let half = s.uniform(5.0, 10.0) * scale;
            let shape = Shape::Square {
                cx: s.uniform(0.0, wf),
                cy: s.uniform(0.0, hf),
                half,
            };
            layers.push(Layer { class: SQUARE, shape, rgb: class_colour(SQUARE, s), texture: 0.15 });
        }
    }
    if present[TRIANGLE as usize] {
        for _ in 0..s.int_inclusive(1, 2) {
            let (cx, cy) = (s.uniform(0.0, wf), s.uniform(0.0, hf));
            let size = s.uniform(8.0, 14.0) * scale;
            let rot = s.uniform(0.0, std::f64::consts::TAU);
            let pts = std::array::from_fn(|i| {
                let a = rot + i as f64 * std::f64::consts::TAU / 3.0;
                (cx + size * a.cos(), cy + size * a.sin())
            });
            layers.push(Layer {
                class: TRIANGLE,
                shape: Shape::Triangle { pts },
                rgb: class_colour(TRIANGLE, s),
                texture: 0.0,
            });
        }
    }
    if present[CIRCLE as usize] {
        for _ in 0..s.int_inclusive(1, 2) {
            let shape = Shape::Circle {
                cx: s.uniform(0.0, wf),
                cy: s.uniform(0.0, hf),
                r: s.uniform(5.0, 10.0) * scale,
            };
            layers.push(Layer { class: CIRCLE, shape, rgb: class_colour(CIRCLE, s), texture: 0.15 });
        }
    }
    if present[STRIPE as usize] {
        let angle = s.uniform(0.0, std::f64::consts::PI);
        let (nx, ny) = (angle.cos(), angle.sin());
        let offset = nx * s.uniform(0.25, 0.75) * wf + ny * s.uniform(0.25, 0.75) * hf;
        let half_width = s.uniform(0.5, 1.0) * scale.max(1.0);
        layers.push(Layer {
            class: STRIPE,
            shape: Shape::Stripe { nx, ny, offset, half_width },
            rgb: class_colour(STRIPE, s),
            texture: 0.0,
        });
    }
    if present[BLOB as usize] {
        let r = (s.uniform(2.0, 3.0) * scale).max(1.0);
        let shape = Shape::Circle {
            cx: s.uniform(r, wf - r),
            cy: s.uniform(r, hf - r),
            r,
        };
        layers.push(Layer { class: BLOB, shape, rgb: class_colour(BLOB, s), texture: 0.0 });
    }
    layers
}

/// Renders one scene. Geometry and base colours depend only on the seed; the
/// domain affects appearance alone.
pub fn generate_scene(spec: &SceneSpec, h: usize, w: usize) -> Result<(Image, LabelMap)> {
    if h < 32 || w < 32 {
        return Err(Error::InvalidArgument(format!(
            "scene size {h}x{w} is below the 32x32 minimum"
        )));
    }
    let root = RngStream::root(spec.seed);
    let mut geo = root.derive("geometry");
    let n = h * w;

    // smooth, weakly saturated background
    let bg_hue = geo.uniform(0.0, 1.0);
    let bg_sat = geo.uniform(0.05, 0.2);
    let bg_val = geo.uniform(0.35, 0.6);
    let (fx, fy) = (geo.uniform(0.02, 0.08), geo.uniform(0.02, 0.08));
    let phase = geo.uniform(0.0, std::f64::consts::TAU);
    let layers = sample_layers(h, w, &mut geo);

    let mut data = vec![0.0; 3 * n];
    let mut labels = vec![BACKGROUND; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade = 0.1 * (fx * px + fy * py + phase).sin();
            let (r, g, b) = hsv_to_rgb(bg_hue, bg_sat, bg_val + shade);
            let mut rgb = [r, g, b];
            for layer in &layers {
                if layer.shape.contains(px, py) {
                    labels[i] = layer.class;
                    let t = if texture_cell(layer.class, x, y) { layer.texture } else { 0.0 };
                    rgb = layer.rgb.map(|v| v - t);
                }
            }
            for c in 0..3 {
                data[c * n + i] = rgb[c];
            }
        }
    }

    let a = spec.appearance;
    if a.hue_shift != 0.0 {
        rotate_hue(&mut data, n, a.hue_shift);
    }
    if a.contrast != 1.0 {
        for v in data.iter_mut() {
            *v = 0.5 + a.contrast * (*v - 0.5);
        }
    }
    if a.noise_amplitude > 0.0 {
        let mut noise = root.derive("noise");
        for v in data.iter_mut() {
            *v += noise.uniform(-a.noise_amplitude, a.noise_amplitude);
        }
    }
    Ok((
        Image::from_clamped(h, w, data),
        LabelMap::from_raw(h, w, labels),
    ))
}

/// Named partitions of a generated benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Source,
    Target,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::Target, Split::TargetVal];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::TargetVal => "target_val",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            _ => Domain::Target,
        }
    }

    /// Offset keeping the per-image seeds of different splits disjoint.
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Source => 0,
            Split::Target => 1_000_000,
            Split::TargetVal => 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub source_count: usize,
    pub target_count: usize,
    pub val_count: usize,
}

impl DatasetPlan {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Source => self.source_count,
            Split::Target => self.target_count,
            Split::TargetVal => self.val_count,
        }
    }

    pub fn scene(&self, split: Split, index: usize) -> SceneSpec {
        let seed = self
            .base_seed
            .wrapping_add(split.seed_offset())
            .wrapping_add(index as u64);
        SceneSpec::new(split.domain(), seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the dataset root.
    pub image: String,
    pub domain: Domain,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<&str> {
        self.image.split('/').next()
    }

    pub fn label_path(&self) -> String {
        self.image
            .replacen("/images/", "/labels/", 1)
            .trim_end_matches(".ppm")
            .to_string()
            + ".pgm"
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn generate(plan: &DatasetPlan, split: Split) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..plan.count(split) {
            let (img, lab) = generate_scene(&plan.scene(split, i), plan.height, plan.width)?;
            images.push(img);
            labels.push(lab);
        }
        Ok(Self { images, labels })
    }
}

fn image_rel(split: Split, index: usize) -> String {
    format!("{}/images/{index:05}.ppm", split.dir_name())
}

/// Writes all three splits and `manifest.txt` under `root`.
pub fn write_dataset(root: &Path, plan: &DatasetPlan) -> Result<Vec<ManifestEntry>> {
    let mut manifest = Vec::new();
    for split in Split::ALL {
        for i in 0..plan.count(split) {
            let scene = plan.scene(split, i);
            let (img, lab) = generate_scene(&scene, plan.height, plan.width)?;
            let entry = ManifestEntry {
                image: image_rel(split, i),
                domain: scene.domain,
                seed: scene.seed,
            };
            write_ppm(&root.join(&entry.image), &img)?;
            write_pgm(&root.join(entry.label_path()), &lab)?;
            manifest.push(entry);
        }
    }
    let mut text = String::new();
    for e in &manifest {
        let _ = writeln!(text, "{} {} {}", e.image, e.domain.as_str(), e.seed);
    }
    write_atomic(&root.join("manifest.txt"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(&path, format!("line {}: {m}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image, domain, seed] = fields[..] else {
            return Err(bad("expected `path domain seed`"));
        };
        entries.push(ManifestEntry {
            image: image.to_string(),
            domain: Domain::parse(domain).ok_or_else(|| bad("unknown domain"))?,
            seed: seed.parse().map_err(|_| bad("seed is not an integer"))?,
        });
    }
    Ok(entries)
}

/// Loads one split in manifest order.
pub fn read_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for entry in read_manifest(root)? {
        if entry.split() != Some(split.dir_name()) {
            continue;
        }
        let img_path: PathBuf = root.join(&entry.image);
        let lab_path = root.join(entry.label_path());
        let img = read_ppm(&img_path)?;
        let lab = read_pgm(&lab_path, NUM_CLASSES)?;
        if (lab.height(), lab.width()) != (img.height(), img.width()) {
            return Err(Error::format(&lab_path, "label size differs from its image"));
        }
        images.push(img);
        labels.push(lab);
    }
    Ok(Dataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_pixels(labels: &LabelMap, class: u8) -> usize {
        labels.data().iter().filter(|&&v| v == class).count()
    }

    #[test]
    fn deterministic() {
        for domain in [Domain::Source, Domain::Target] {
            let spec = SceneSpec::new(domain, 42);
            let (a, la) = generate_scene(&spec, 64, 64).unwrap();
            let (b, lb) = generate_scene(&spec, 64, 64).unwrap();
            assert_eq!(a, b);
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn domains_share_labels_but_not_pixels() {
        for seed in 0..20 {
            let (si, sl) = generate_scene(&SceneSpec::new(Domain::Source, seed), 64, 64).unwrap();
            let (ti, tl) = generate_scene(&SceneSpec::new(Domain::Target, seed), 64, 64).unwrap();
            assert_eq!(sl, tl);
            assert!(si.max_abs_diff_image(&ti) > 0.05);
        }
    }

    #[test]
    fn background_always_present_and_blob_is_rare() {
        let mut blob_pixels = 0;
        let mut blob_images = 0;
        let total = 1000 * 64 * 64;
        for seed in 0..1000 {
            let (_, lab) = generate_scene(&SceneSpec::new(Domain::Source, seed), 64, 64).unwrap();
            assert!(class_pixels(&lab, BACKGROUND) > 0);
            let b = class_pixels(&lab, BLOB);
            assert!(b * 100 <= 64 * 64, "blob covers {b} pixels");
            blob_pixels += b;
            blob_images += (b > 0) as usize;
        }
        assert!((blob_pixels as f64) / (total as f64) < 0.01);
        assert!(blob_images <= 100, "{blob_images} images contain a blob");
        assert!(blob_images > 0);
    }

    #[test]
    fn stripe_is_thin_but_frequent() {
        let mut images = 0;
        let mut pixels = 0;
        for seed in 0..500 {
            let (_, lab) = generate_scene(&SceneSpec::new(Domain::Source, seed), 64, 64).unwrap();
            let s = class_pixels(&lab, STRIPE);
            images += (s > 0) as usize;
            pixels += s;
        }
        let image_rate = images as f64 / 500.0;
        assert!((0.7..0.9).contains(&image_rate), "{image_rate}");
        assert!((pixels as f64) / (500.0 * 4096.0) < 0.05);
    }

    #[test]
    fn long_tail_is_stable_across_samples() {
        let freq = |start: u64| {
            let mut counts = [0usize; NUM_CLASSES];
            for seed in start..start + 1000 {
                let (_, lab) =
                    generate_scene(&SceneSpec::new(Domain::Source, seed), 64, 64).unwrap();
                for &v in lab.data() {
                    counts[v as usize] += 1;
                }
            }
            counts
        };
        let (a, b) = (freq(0), freq(50_000));
        for c in 0..NUM_CLASSES {
            let rel = (a[c] as f64 - b[c] as f64).abs() / a[c] as f64;
            assert!(rel < 0.2, "class {c}: {} vs {}", a[c], b[c]);
        }
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(generate_scene(&SceneSpec::new(Domain::Source, 0), 31, 64).is_err());
        assert!(generate_scene(&SceneSpec::new(Domain::Source, 0), 32, 32).is_ok());
    }

    #[test]
    fn label_path_mirrors_image_path() {
        let e = ManifestEntry {
            image: "target_val/images/00012.ppm".into(),
            domain: Domain::Target,
            seed: 7,
        };
        assert_eq!(e.label_path(), "target_val/labels/00012.pgm");
        assert_eq!(e.split(), Some("target_val"));
    }
}
