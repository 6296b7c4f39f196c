//! Procedural domains. Each class is one content item of a family (a polygon,
//! a stroke glyph, a cell pattern or a texture tiling); the domain's style
//! (palette, noise, stroke, inversion, jitter) is shared by all classes.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resize::Image;
use super::{DataError, Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentFamily {
    Polygons,
    Glyphs,
    DigitGrid,
    Textures,
    /// Classes cycle through the four families above, taking items from the
    /// end of each catalogue.
    Mixed,
}

impl ContentFamily {
    pub const SINGLE: [ContentFamily; 4] =
        [ContentFamily::Polygons, ContentFamily::Glyphs, ContentFamily::DigitGrid, ContentFamily::Textures];

    /// Largest class count the family can render as distinct items.
    pub fn capacity(self) -> usize {
        match self {
            ContentFamily::Polygons => POLYGON_SIDES * POLYGON_VARIANTS,
            ContentFamily::Glyphs => GLYPHS,
            ContentFamily::DigitGrid => CELL_PATTERNS,
            ContentFamily::Textures => TEXTURE_KINDS * TEXTURE_ANGLES.len() * TEXTURE_FREQS.len(),
            ContentFamily::Mixed => Self::SINGLE.iter().map(|f| f.capacity()).min().unwrap_or(0) * Self::SINGLE.len(),
        }
    }

    /// The single family and item index drawn for `class`.
    fn item(self, class: usize) -> (ContentFamily, usize) {
        match self {
            ContentFamily::Mixed => {
                let family = Self::SINGLE[class % Self::SINGLE.len()];
                (family, family.capacity() - 1 - class / Self::SINGLE.len())
            }
            f => (f, class),
        }
    }
}

const GLYPHS: usize = 64;
const CELL_PATTERNS: usize = 64;

const POLYGON_SIDES: usize = 8;
const POLYGON_VARIANTS: usize = 5;
const TEXTURE_KINDS: usize = 4;
const TEXTURE_ANGLES: [f64; 4] = [0.0, PI / 8.0, PI / 4.0, 3.0 * PI / 8.0];
const TEXTURE_FREQS: [f64; 3] = [2.0, 3.5, 5.0];

/// Per-sample geometric jitter magnitudes, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// Up to 15% of the image extent.
    pub translate: f64,
    /// Up to 30 degrees.
    pub rotate: f64,
    /// Up to ±20% size.
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { translate: 0.5, rotate: 0.5, scale: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleParams {
    pub foreground: [u8; 3],
    pub background: [u8; 3],
    /// Uniform pixel noise amplitude, 1 meaning ±128 levels.
    pub noise: f64,
    /// Stroke thickness for outlines, glyphs and textures.
    pub stroke: f64,
    pub invert: bool,
    pub jitter: Jitter,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            foreground: [230, 230, 230],
            background: [20, 20, 20],
            noise: 0.1,
            stroke: 0.5,
            invert: false,
            jitter: Jitter::default(),
        }
    }
}

impl StyleParams {
    fn check(&self) -> Result<(), DataError> {
        let amps = [
            ("noise", self.noise),
            ("stroke", self.stroke),
            ("jitter.translate", self.jitter.translate),
            ("jitter.rotate", self.jitter.rotate),
            ("jitter.scale", self.jitter.scale),
        ];
        for (name, v) in amps {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invalid(format!("style {name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub classes: usize,
    pub content: ContentFamily,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Weight decay to use when training on this domain.
    #[serde(default)]
    pub decay: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub style: StyleParams,
}

fn default_image_size() -> usize {
    32
}

fn default_channels() -> usize {
    3
}

impl DomainSpec {
    pub fn check(&self) -> Result<(), DataError> {
        let max = self.content.capacity();
        if self.classes > max {
            return Err(DataError::CapacityExceeded { family: self.content, max, requested: self.classes });
        }
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::Invalid(format!("domain {}: classes and train/test counts must be positive", self.name)));
        }
        if self.image_size < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(DataError::Invalid(format!(
                "domain {}: unsupported image geometry {}x{}x{}",
                self.name, self.channels, self.image_size, self.image_size
            )));
        }
        if self.decay.is_some_and(|d| !(d >= 0.0)) {
            return Err(DataError::Invalid(format!("domain {}: negative decay", self.name)));
        }
        self.style.check()
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Renders the train, validation and test splits of a synthetic domain.
/// Samples are interleaved by class; every sample has its own generator
/// seeded from `(spec.seed, split, index)`.
pub fn generate_domain(spec: &DomainSpec) -> Result<[Dataset; 3], DataError> {
    spec.check()?;
    let content = Content::new(spec.content);
    let make = |split: Split| {
        let n = spec.per_class(split) * spec.classes;
        let mut pixels = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let mut rng = sample_rng(spec.seed, split_stream(Some(split)), i as u64);
            pixels.extend(render(&content, class, spec, &mut rng));
            labels.push(class as u16);
        }
        Dataset {
            channels: spec.channels,
            height: spec.image_size,
            width: spec.image_size,
            pixels,
            labels,
            split: Some(split),
            provenance: format!("synthetic:{}:{:?}:seed={}", spec.name, spec.content, spec.seed),
        }
    };
    Ok([make(Split::Train), make(Split::Val), make(Split::Test)])
}

/// A grid with one row per class and `per_class` held-out samples per row,
/// drawn from a stream disjoint from all splits. Gray images are expanded to RGB.
pub fn contact_sheet(spec: &DomainSpec, per_class: usize) -> Result<Image, DataError> {
    spec.check()?;
    let content = Content::new(spec.content);
    let s = spec.image_size;
    let gap = 1;
    let (w, h) = (per_class * (s + gap) + gap, spec.classes * (s + gap) + gap);
    let mut pixels = vec![128u8; 3 * w * h];
    for class in 0..spec.classes {
        for j in 0..per_class {
            let mut rng = sample_rng(spec.seed, split_stream(None), (class * per_class + j) as u64);
            let img = render(&content, class, spec, &mut rng);
            let (oy, ox) = (gap + class * (s + gap), gap + j * (s + gap));
            for c in 0..3 {
                let src = c.min(spec.channels - 1);
                for y in 0..s {
                    for x in 0..s {
                        pixels[c * w * h + (oy + y) * w + ox + x] = img[src * s * s + y * s + x];
                    }
                }
            }
        }
    }
    Ok(Image { channels: 3, height: h, width: w, pixels })
}

/// Writes a 1- or 3-channel planar image as PNG.
pub fn write_png(path: &Path, image: &Image) -> Result<(), DataError> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(DataError::Invalid(format!("cannot write {c}-channel PNG"))),
    };
    let plane = image.height * image.width;
    let mut interleaved = Vec::with_capacity(image.pixels.len());
    for i in 0..plane {
        for c in 0..image.channels {
            interleaved.push(image.pixels[c * plane + i]);
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), image.width as u32, image.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| DataError::Invalid(e.to_string()))?;
    writer.write_image_data(&interleaved).map_err(|e| DataError::Invalid(e.to_string()))?;
    writer.finish().map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(())
}

fn split_stream(split: Option<Split>) -> u64 {
    match split {
        Some(Split::Train) => 0,
        Some(Split::Val) => 1,
        Some(Split::Test) => 2,
        None => 3,
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ stream) ^ index))
}

/// Item catalogues of the procedural families.
struct Content {
    family: ContentFamily,
    glyphs: Vec<Vec<([f64; 2], [f64; 2])>>,
    cells: Vec<u16>,
}

impl Content {
    fn new(family: ContentFamily) -> Self {
        Self { family, glyphs: glyph_table(GLYPHS), cells: cell_patterns(CELL_PATTERNS) }
    }
}

/// Distinct glyphs of 3 or 4 strokes between points of a 4x4 lattice.
fn glyph_table(classes: usize) -> Vec<Vec<([f64; 2], [f64; 2])>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c79_7068);
    let lattice = |i: usize| [(i % 4) as f64 / 1.5 - 1.0, (i / 4) as f64 / 1.5 - 1.0];
    let mut keys: Vec<Vec<(usize, usize)>> = Vec::new();
    while keys.len() < classes {
        let strokes = rng.random_range(3..=4);
        let mut key: Vec<(usize, usize)> = Vec::new();
        while key.len() < strokes {
            let (a, b) = (rng.random_range(0..16), rng.random_range(0..16));
            let seg = (a.min(b), a.max(b));
            if a != b && !key.contains(&seg) {
                key.push(seg);
            }
        }
        key.sort_unstable();
        let overlap = |other: &Vec<(usize, usize)>| key.iter().filter(|s| other.contains(s)).count();
        if keys.iter().all(|k| overlap(k) < 2) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|k| k.into_iter().map(|(a, b)| (lattice(a), lattice(b))).collect())
        .collect()
}

/// 4x4 binary patterns with 5 to 11 cells set and pairwise Hamming distance ≥ 4.
fn cell_patterns(classes: usize) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6964);
    let mut out: Vec<u16> = Vec::new();
    while out.len() < classes {
        let p: u16 = rng.random();
        if (5..=11).contains(&p.count_ones()) && out.iter().all(|q| (p ^ q).count_ones() >= 4) {
            out.push(p);
        }
    }
    out
}

fn render(content: &Content, class: usize, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let style = &spec.style;
    let j = style.jitter;
    let tx = (rng.random::<f64>() * 2.0 - 1.0) * 0.3 * j.translate;
    let ty = (rng.random::<f64>() * 2.0 - 1.0) * 0.3 * j.translate;
    let angle = (rng.random::<f64>() * 2.0 - 1.0) * (PI / 6.0) * j.rotate;
    let zoom = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * 0.2 * j.scale;
    let (sin, cos) = angle.sin_cos();
    let stroke = 0.06 + 0.14 * style.stroke;

    let s = spec.image_size;
    let mut ink = vec![0.0f64; s * s];
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..s {
        for x in 0..s {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let u = (x as f64 + sx) / s as f64 * 2.0 - 1.0 - tx;
                    let v = (y as f64 + sy) / s as f64 * 2.0 - 1.0 - ty;
                    let (u, v) = ((cos * u + sin * v) / zoom, (-sin * u + cos * v) / zoom);
                    if covered(content, class, u, v, stroke) {
                        cover += 0.25;
                    }
                }
            }
            ink[y * s + x] = if style.invert { 1.0 - cover } else { cover };
        }
    }

    let mut out = vec![0u8; spec.channels * s * s];
    let amp = style.noise * 128.0;
    for i in 0..s * s {
        let noise = if amp > 0.0 { (rng.random::<f64>() * 2.0 - 1.0) * amp } else { 0.0 };
        let t = ink[i];
        let color = |c: usize| {
            let v = style.background[c] as f64 * (1.0 - t) + style.foreground[c] as f64 * t + noise;
            v.round().clamp(0.0, 255.0) as u8
        };
        if spec.channels == 3 {
            for c in 0..3 {
                out[c * s * s + i] = color(c);
            }
        } else {
            let g = (0..3).map(|c| color(c) as f64).sum::<f64>() / 3.0;
            out[i] = g.round() as u8;
        }
    }
    out
}

fn covered(content: &Content, class: usize, u: f64, v: f64, stroke: f64) -> bool {
    let (family, item) = content.family.item(class);
    match family {
        ContentFamily::Polygons => polygon(item, u, v, stroke),
        ContentFamily::Glyphs => {
            let d = content.glyphs[item].iter().map(|&(a, b)| segment_distance([u * 1.25, v * 1.25], a, b)).fold(f64::INFINITY, f64::min);
            d < stroke * 1.25
        }
        ContentFamily::DigitGrid => {
            let (cx, cy) = ((u + 0.8) / 0.4, (v + 0.8) / 0.4);
            if !(0.0..4.0).contains(&cx) || !(0.0..4.0).contains(&cy) {
                return false;
            }
            let (fx, fy) = (cx.fract(), cy.fract());
            let margin = 0.12;
            if fx < margin || fx > 1.0 - margin || fy < margin || fy > 1.0 - margin {
                return false;
            }
            content.cells[item] >> (cy as usize * 4 + cx as usize) & 1 == 1
        }
        ContentFamily::Textures => texture(item, u, v, stroke),
        ContentFamily::Mixed => unreachable!("mixed classes resolve to a single family"),
    }
}

/// Signed distance-like value to a regular polygon boundary: negative inside.
fn polygon_sdf(sides: usize, radius: f64, u: f64, v: f64) -> f64 {
    let sector = 2.0 * PI / sides as f64;
    let theta = v.atan2(u) + PI / 2.0;
    let local = (theta.rem_euclid(sector)) - sector / 2.0;
    let r = (u * u + v * v).sqrt();
    r * local.cos() - radius * (sector / 2.0).cos()
}

fn polygon(class: usize, u: f64, v: f64, stroke: f64) -> bool {
    let sides = 3 + class % POLYGON_SIDES;
    let variant = class / POLYGON_SIDES;
    let d = polygon_sdf(sides, 0.7, u, v);
    match variant {
        0 => d < 0.0,
        1 => d.abs() < stroke * 0.6,
        2 => d < 0.0 && polygon_sdf(sides, 0.35, u, v) > 0.0,
        3 => d < 0.0 && v < 0.0,
        _ => {
            let r = (u * u + v * v).sqrt();
            d < 0.0 && (r < 0.15 || d > -stroke * 0.6)
        }
    }
}

fn texture(class: usize, u: f64, v: f64, stroke: f64) -> bool {
    let kind = class % TEXTURE_KINDS;
    let angle = TEXTURE_ANGLES[(class / TEXTURE_KINDS) % TEXTURE_ANGLES.len()];
    let freq = TEXTURE_FREQS[class / (TEXTURE_KINDS * TEXTURE_ANGLES.len())];
    let (sin, cos) = angle.sin_cos();
    let a = (cos * u + sin * v) * freq / 2.0;
    let b = (-sin * u + cos * v) * freq / 2.0;
    let duty = 0.3 + 0.3 * stroke;
    match kind {
        0 => a.rem_euclid(1.0) < duty,
        1 => (a.floor() as i64 + b.floor() as i64).rem_euclid(2) == 0,
        2 => {
            let (x, y) = (a.rem_euclid(1.0) - 0.5, b.rem_euclid(1.0) - 0.5);
            x * x + y * y < (duty * 0.6).powi(2)
        }
        _ => {
            let wave = 0.25 * (2.0 * PI * b).sin();
            (a + wave).rem_euclid(1.0) < duty
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(content: ContentFamily, classes: usize) -> DomainSpec {
        DomainSpec {
            name: "t".into(),
            classes,
            content,
            image_size: 16,
            channels: 3,
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 2,
            decay: None,
            seed: 9,
            style: StyleParams::default(),
        }
    }

    #[test]
    fn deterministic() {
        for family in ContentFamily::SINGLE.into_iter().chain([ContentFamily::Mixed]) {
            let s = spec(family, 10);
            assert_eq!(generate_domain(&s).unwrap(), generate_domain(&s).unwrap());
        }
    }

    #[test]
    fn bookkeeping() {
        let mut s = spec(ContentFamily::Glyphs, 10);
        s.train_per_class = 100;
        let [train, val, test] = generate_domain(&s).unwrap();
        assert_eq!(train.len(), 1000);
        assert_eq!(train.class_histogram(), vec![100; 10]);
        assert_eq!((val.len(), test.len()), (20, 20));
        assert_eq!(train.split, Some(Split::Train));
    }

    #[test]
    fn capacity_is_enforced() {
        for family in ContentFamily::SINGLE.into_iter().chain([ContentFamily::Mixed]) {
            let max = family.capacity();
            assert!(generate_domain(&spec(family, max)).is_ok());
            match generate_domain(&spec(family, max + 1)) {
                Err(DataError::CapacityExceeded { max: m, requested, .. }) => assert_eq!((m, requested), (max, max + 1)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn class_items_differ_without_jitter() {
        for family in ContentFamily::SINGLE.into_iter().chain([ContentFamily::Mixed]) {
            let mut s = spec(family, family.capacity());
            s.style.noise = 0.0;
            s.style.jitter = Jitter { translate: 0.0, rotate: 0.0, scale: 0.0 };
            s.train_per_class = 1;
            let [train, _, _] = generate_domain(&s).unwrap();
            for a in 0..s.classes {
                for b in 0..a {
                    assert_ne!(train.image(a), train.image(b), "{family:?} classes {a} and {b} render identically");
                }
            }
        }
    }

    #[test]
    fn seed_changes_pixels() {
        let a = spec(ContentFamily::Textures, 5);
        let b = DomainSpec { seed: 10, ..a.clone() };
        assert_ne!(generate_domain(&a).unwrap()[0].pixels, generate_domain(&b).unwrap()[0].pixels);
    }

    #[test]
    fn style_amplitudes_are_checked() {
        let mut s = spec(ContentFamily::Polygons, 3);
        s.style.noise = 1.5;
        assert!(matches!(generate_domain(&s), Err(DataError::Invalid(_))));
    }

    #[test]
    fn contact_sheet_png() {
        let s = spec(ContentFamily::DigitGrid, 4);
        let sheet = contact_sheet(&s, 5).unwrap();
        assert_eq!((sheet.width, sheet.height), (5 * 17 + 1, 4 * 17 + 1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sheet.png");
        write_png(&path, &sheet).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"\x89PNG"));
    }
}
