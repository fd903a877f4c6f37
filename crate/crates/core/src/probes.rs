//! Distortion probes: procedurally generated image pairs that a good
//! perceptual metric should rank as closer to each other than to a set of
//! clearly different reference images.
//!
//! Four categories are generated, each from its own seeded pattern family:
//!
//! * `invert`: black-and-white patterns against their color inversion
//! * `translate`: a plain image with one structured quadrant, shifted
//! * `rotate`: structured images rotated by 22.5, 45, 67.5, 90 and 180 degrees
//! * `color_stain`: colored blobs on a plain background; the distortion
//!   recolors the background and adds stains, and each case carries its own
//!   reference with the same background but a different structure
//!
//! A metric passes a case when the distorted image is strictly closer to the
//! original than every reference.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, BackboneId, FeatureStack};
use crate::image::{Image, Rgb, BLACK, BLUE, GRAY, GREEN, RED, WHITE};
use crate::metrics::{feature_distance, pixelwise_distance, Method, MetricConfig, MetricError};

pub const PROBE_SIZE: usize = 96;

/// Backgrounds for plain-background scenes; the same colors as the mono references.
const PLAIN_COLORS: [Rgb; 6] = [BLACK, WHITE, GRAY, RED, GREEN, BLUE];

const VIVID_COLORS: [Rgb; 10] = [
    RED,
    GREEN,
    BLUE,
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 0.25],
    [0.6, 0.3, 0.1],
];

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("offset ({dx}, {dy}) is out of range for a {width}x{height} image")]
    OffsetOutOfRange {
        dx: i64,
        dy: i64,
        width: usize,
        height: usize,
    },
    #[error("no weights supplied for backbone `{0}`")]
    MissingBackbone(BackboneId),
    #[error("case `{case}`, config `{config}`: {source}")]
    Metric {
        case: String,
        config: String,
        #[source]
        source: MetricError,
    },
    #[error("feature extraction for backbone `{backbone}`: {source}")]
    Extraction {
        backbone: BackboneId,
        #[source]
        source: BackboneError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Invert,
    Rotate,
    Translate,
    ColorStain,
}

impl Category {
    /// Column order of the aggregate table.
    pub const ALL: [Category; 4] = [
        Category::Invert,
        Category::Rotate,
        Category::Translate,
        Category::ColorStain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Invert => "invert",
            Category::Rotate => "rotate",
            Category::Translate => "translate",
            Category::ColorStain => "color_stain",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    BwPattern,
    RegionScene,
    ColoredShapes,
}

/// Parameters of the distortion applied in a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    Invert,
    Translate {
        dx: i64,
        dy: i64,
    },
    Rotate {
        degrees: f64,
    },
    ColorStain {
        background: Rgb,
        stains: usize,
        stain_color: Rgb,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCase {
    pub category: Category,
    pub original: Image,
    pub distorted: Image,
    pub references: Vec<Image>,
    pub label: String,
    pub seed: u64,
    pub distortion: Distortion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub case: String,
    pub category: Category,
    pub config: String,
    pub passed: bool,
    pub distance_to_distorted: f64,
    pub min_reference_distance: f64,
}

/// Axis-aligned pixel rectangle, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn width(&self) -> usize {
        self.x1 - self.x0
    }

    fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// A generated image with its plain background and structured region.
struct Scene {
    image: Image,
    background: Rgb,
    region: Rect,
}

fn quadrant_region(size: usize, quadrant: usize) -> Rect {
    let half = size / 2;
    let margin = (size / 24).max(1);
    let (qx, qy) = (quadrant % 2, quadrant / 2);
    Rect {
        x0: qx * half + margin,
        y0: qy * half + margin,
        x1: qx * half + half - margin,
        y1: qy * half + half - margin,
    }
}

/// Six mono-colored images (black, white, gray, red, green, blue) followed
/// by one image of independent uniform random pixels.
pub fn gen_references(seed: u64) -> Vec<Image> {
    gen_references_sized(seed, PROBE_SIZE)
}

pub(crate) fn gen_references_sized(seed: u64, size: usize) -> Vec<Image> {
    let mut refs: Vec<Image> = PLAIN_COLORS
        .iter()
        .map(|&c| Image::filled(size, size, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.push(Image::from_fn(size, size, |_, _| {
        [rng.random(), rng.random(), rng.random()]
    }));
    refs
}

pub fn gen_pattern(kind: PatternKind, seed: u64) -> Image {
    gen_pattern_sized(kind, seed, PROBE_SIZE)
}

pub(crate) fn gen_pattern_sized(kind: PatternKind, seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        PatternKind::BwPattern => bw_pattern(&mut rng, size),
        PatternKind::RegionScene => region_scene(&mut rng, size).image,
        PatternKind::ColoredShapes => colored_shapes(&mut rng, size).image,
    }
}

fn bw(on: bool) -> Rgb {
    if on {
        WHITE
    } else {
        BLACK
    }
}

fn bw_pattern(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let invert: bool = rng.random();
    let s = size as f32;
    match rng.random_range(0..4) {
        0 => {
            // stripes: horizontal, vertical or diagonal
            let period = rng.random_range(6..=24);
            let orient = rng.random_range(0..3);
            Image::from_fn(size, size, |x, y| {
                let t = match orient {
                    0 => y,
                    1 => x,
                    _ => x + y,
                };
                bw((t % period < period / 2) ^ invert)
            })
        }
        1 => {
            let cell = rng.random_range(6..=24);
            Image::from_fn(size, size, |x, y| {
                bw(((x / cell + y / cell) % 2 == 0) ^ invert)
            })
        }
        2 => {
            let (cx, cy) = (
                rng.random_range(0.3..0.7) * s,
                rng.random_range(0.3..0.7) * s,
            );
            let width = rng.random_range(4.0..10.0f32);
            Image::from_fn(size, size, |x, y| {
                let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                bw(((r / width) as usize).is_multiple_of(2) ^ invert)
            })
        }
        _ => {
            let mut img = Image::filled(size, size, bw(invert));
            let fg = bw(!invert);
            for _ in 0..rng.random_range(3..=7) {
                let cx = rng.random_range(0.1..0.9) * s;
                let cy = rng.random_range(0.1..0.9) * s;
                let r = rng.random_range(0.05..0.18) * s;
                if rng.random() {
                    fill_disc(&mut img, cx, cy, r, fg);
                } else {
                    let h = rng.random_range(0.05..0.18) * s;
                    fill_rect(&mut img, cx - r, cy - h, cx + r, cy + h, fg);
                }
            }
            img
        }
    }
}

fn region_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let background = PLAIN_COLORS[rng.random_range(0..PLAIN_COLORS.len())];
    let region = quadrant_region(size, rng.random_range(0..4));
    let mut image = Image::filled(size, size, background);
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            image.set(x, y, [rng.random(), rng.random(), rng.random()]);
        }
    }
    let (w, h) = (region.width() as f32, region.height() as f32);
    for _ in 0..rng.random_range(3..=6) {
        let color = VIVID_COLORS[rng.random_range(0..VIVID_COLORS.len())];
        let cx = region.x0 as f32 + rng.random_range(0.2..0.8) * w;
        let cy = region.y0 as f32 + rng.random_range(0.2..0.8) * h;
        let r = rng.random_range(0.08..0.25) * w;
        if rng.random() {
            fill_disc_clipped(&mut image, cx, cy, r, color, &region);
        } else {
            let (x0, y0) = (cx - r, cy - r * 0.5);
            let (x1, y1) = (cx + r, cy + r * 0.5);
            fill_rect_clipped(&mut image, x0, y0, x1, y1, color, &region);
        }
    }
    Scene {
        image,
        background,
        region,
    }
}

fn colored_shapes(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let background = PLAIN_COLORS[rng.random_range(0..PLAIN_COLORS.len())];
    let region = quadrant_region(size, rng.random_range(0..4));
    let mut image = Image::filled(size, size, background);
    let colors: Vec<Rgb> = VIVID_COLORS
        .iter()
        .copied()
        .filter(|&c| c != background)
        .collect();
    let (w, h) = (region.width() as f32, region.height() as f32);
    for _ in 0..rng.random_range(2..=4) {
        let color = colors[rng.random_range(0..colors.len())];
        let cx = region.x0 as f32 + rng.random_range(0.3..0.7) * w;
        let cy = region.y0 as f32 + rng.random_range(0.3..0.7) * h;
        let r = rng.random_range(0.15..0.3) * w;
        fill_blob(&mut image, rng, cx, cy, r, color, &region);
    }
    Scene {
        image,
        background,
        region,
    }
}

fn fill_disc(img: &mut Image, cx: f32, cy: f32, r: f32, color: Rgb) {
    let all = Rect {
        x0: 0,
        y0: 0,
        x1: img.width(),
        y1: img.height(),
    };
    fill_disc_clipped(img, cx, cy, r, color, &all);
}

fn fill_disc_clipped(img: &mut Image, cx: f32, cy: f32, r: f32, color: Rgb, clip: &Rect) {
    for y in clip.y0..clip.y1 {
        for x in clip.x0..clip.x1 {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.set(x, y, color);
            }
        }
    }
}

fn fill_rect(img: &mut Image, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb) {
    let all = Rect {
        x0: 0,
        y0: 0,
        x1: img.width(),
        y1: img.height(),
    };
    fill_rect_clipped(img, x0, y0, x1, y1, color, &all);
}

fn fill_rect_clipped(img: &mut Image, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb, clip: &Rect) {
    for y in clip.y0..clip.y1 {
        for x in clip.x0..clip.x1 {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            if px >= x0 && px < x1 && py >= y0 && py < y1 {
                img.set(x, y, color);
            }
        }
    }
}

/// Irregular disc whose radius wobbles with a few random harmonics.
fn blob_mask(rng: &mut ChaCha8Rng, cx: f32, cy: f32, r: f32) -> impl Fn(f32, f32) -> bool {
    let harmonics: Vec<(f32, f32, f32)> = (2..=4)
        .map(|k| {
            (
                k as f32,
                rng.random_range(0.0..0.18f32),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    move |px, py| {
        let (dx, dy) = (px - cx, py - cy);
        let theta = dy.atan2(dx);
        let wobble: f32 = harmonics
            .iter()
            .map(|&(k, a, p)| a * (k * theta + p).sin())
            .sum();
        dx.hypot(dy) <= r * (1.0 + wobble)
    }
}

fn fill_blob(
    img: &mut Image,
    rng: &mut ChaCha8Rng,
    cx: f32,
    cy: f32,
    r: f32,
    color: Rgb,
    clip: &Rect,
) {
    let inside = blob_mask(rng, cx, cy, r);
    for y in clip.y0..clip.y1 {
        for x in clip.x0..clip.x1 {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                img.set(x, y, color);
            }
        }
    }
}

/// `v -> 1 - v` on every component.
pub fn invert(image: &Image) -> Image {
    image.map(|p| p.map(|v| 1.0 - v))
}

/// Shifts the whole image by `(dx, dy)` pixels, filling vacated pixels.
pub fn translate_region(image: &Image, dx: i64, dy: i64, fill: Rgb) -> Result<Image, ProbeError> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    if dx.abs() >= w || dy.abs() >= h {
        return Err(ProbeError::OffsetOutOfRange {
            dx,
            dy,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(Image::from_fn(image.width(), image.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx >= 0 && sx < w && sy >= 0 && sy < h {
            image.get(sx as usize, sy as usize)
        } else {
            fill
        }
    }))
}

/// Rotates counter-clockwise (as displayed) about the image center.
///
/// Multiples of 90 degrees are exact lattice mappings when they keep the
/// frame (any size for 180, square images for 90 and 270); other angles use
/// bilinear interpolation with `fill` outside the source.
pub fn rotate(image: &Image, degrees: f64, fill: Rgb) -> Image {
    let (w, h) = (image.width(), image.height());
    let turns = degrees / 90.0;
    let quarter = turns.round();
    if (turns - quarter).abs() < 1e-9 {
        match (quarter as i64).rem_euclid(4) {
            0 => return image.clone(),
            2 => return Image::from_fn(w, h, |x, y| image.get(w - 1 - x, h - 1 - y)),
            1 if w == h => return Image::from_fn(w, h, |x, y| image.get(w - 1 - y, x)),
            3 if w == h => return Image::from_fn(w, h, |x, y| image.get(y, h - 1 - x)),
            _ => {}
        }
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Image::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + dx * cos - dy * sin;
        let sy = cy + dx * sin + dy * cos;
        sample_bilinear(image, sx, sy).unwrap_or(fill)
    })
}

fn sample_bilinear(image: &Image, sx: f64, sy: f64) -> Option<Rgb> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    const SLACK: f64 = 1e-9;
    if sx < -SLACK || sy < -SLACK || sx > w - 1.0 + SLACK || sy > h - 1.0 + SLACK {
        return None;
    }
    let sx = sx.clamp(0.0, w - 1.0);
    let sy = sy.clamp(0.0, h - 1.0);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
    let (p00, p10, p01, p11) = (
        image.get(x0, y0),
        image.get(x1, y0),
        image.get(x0, y1),
        image.get(x1, y1),
    );
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] + (p10[c] - p00[c]) * fx;
        let bottom = p01[c] + (p11[c] - p01[c]) * fx;
        out[c] = top + (bottom - top) * fy;
    }
    Some(out)
}

fn color_key(c: Rgb) -> [u32; 3] {
    c.map(f32::to_bits)
}

/// Most frequent exact color; ties go to the color seen first.
fn majority_color(image: &Image) -> Rgb {
    let mut counts: HashMap<[u32; 3], (usize, usize)> = HashMap::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let order = counts.len();
            counts
                .entry(color_key(image.get(x, y)))
                .or_insert((0, order))
                .0 += 1;
        }
    }
    let (key, _) = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("non-empty image");
    key.map(f32::from_bits)
}

/// Bounding box of all non-background pixels, if any.
fn structure_bounds(image: &Image, background: Rgb) -> Option<Rect> {
    let bg = color_key(background);
    let mut bounds: Option<Rect> = None;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if color_key(image.get(x, y)) != bg {
                let b = bounds.get_or_insert(Rect {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x + 1);
                b.y1 = b.y1.max(y + 1);
            }
        }
    }
    bounds
}

fn grow(r: Rect, by: usize, width: usize, height: usize) -> Rect {
    Rect {
        x0: r.x0.saturating_sub(by),
        y0: r.y0.saturating_sub(by),
        x1: (r.x1 + by).min(width),
        y1: (r.y1 + by).min(height),
    }
}

/// Recolors the plain background and adds `stain_count` seeded blobs of
/// `stain_color` away from the structure. Non-background pixels are never
/// touched.
pub fn apply_color_stain(
    image: &Image,
    background_recolor: Rgb,
    stain_count: usize,
    stain_color: Rgb,
    seed: u64,
) -> Image {
    let background = majority_color(image);
    let bg = color_key(background);
    let (w, h) = (image.width(), image.height());
    let keep_out = structure_bounds(image, background).map(|r| grow(r, 3, w, h));
    let mut out = image.map(|p| {
        if color_key(p) == bg {
            background_recolor
        } else {
            p
        }
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sw, sh) = (w as f32, h as f32);
    for _ in 0..stain_count {
        let r = rng.random_range(0.02..0.06) * sw.min(sh);
        // a few draws to land away from the structure; accept the last one otherwise
        let (mut cx, mut cy) = (0.0, 0.0);
        for _ in 0..16 {
            cx = rng.random_range(0.0..sw);
            cy = rng.random_range(0.0..sh);
            let near = keep_out.is_some_and(|k| {
                cx + r >= k.x0 as f32
                    && cx - r < k.x1 as f32
                    && cy + r >= k.y0 as f32
                    && cy - r < k.y1 as f32
            });
            if !near {
                break;
            }
        }
        let inside = blob_mask(&mut rng, cx, cy, r);
        for y in 0..h {
            for x in 0..w {
                if keep_out.is_some_and(|k| k.contains(x, y)) || color_key(image.get(x, y)) != bg {
                    continue;
                }
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    out.set(x, y, stain_color);
                }
            }
        }
    }
    out
}

/// Same plain background as `original`, with its structure replaced by an
/// angular structure in colors the original does not use.
pub fn gen_color_stain_reference(original: &Image, seed: u64) -> Image {
    let background = majority_color(original);
    let bg = color_key(background);
    let (w, h) = (original.width(), original.height());
    let region =
        structure_bounds(original, background).unwrap_or_else(|| quadrant_region(w.min(h), 0));
    let used: Vec<[u32; 3]> = (region.y0..region.y1)
        .flat_map(|y| (region.x0..region.x1).map(move |x| (x, y)))
        .map(|(x, y)| color_key(original.get(x, y)))
        .collect();
    let mut palette: Vec<Rgb> = VIVID_COLORS
        .iter()
        .copied()
        .filter(|&c| color_key(c) != bg && !used.contains(&color_key(c)))
        .collect();
    if palette.is_empty() {
        palette.push(invert_rgb(background));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = original.map(|p| if color_key(p) == bg { p } else { background });
    let (rw, rh) = (region.width().max(1) as f32, region.height().max(1) as f32);
    // horizontal bars and triangles instead of round blobs
    let bars = rng.random_range(2..=4);
    for i in 0..bars {
        let color = palette[rng.random_range(0..palette.len())];
        let y0 = region.y0 as f32 + rh * i as f32 / bars as f32;
        let y1 = y0 + rh / bars as f32 * rng.random_range(0.4..0.8);
        let x0 = region.x0 as f32 + rng.random_range(0.0..0.3) * rw;
        let x1 = region.x1 as f32 - rng.random_range(0.0..0.3) * rw;
        fill_rect_clipped(&mut out, x0, y0, x1, y1, color, &region);
    }
    let color = palette[rng.random_range(0..palette.len())];
    let apex = (
        region.x0 as f32 + rng.random_range(0.2..0.8) * rw,
        region.y0 as f32,
    );
    let (left, right) = (
        (region.x0 as f32, region.y1 as f32),
        (region.x1 as f32, region.y1 as f32),
    );
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            if in_triangle((x as f32 + 0.5, y as f32 + 0.5), apex, left, right)
                && rng.random_bool(0.5)
            {
                out.set(x, y, color);
            }
        }
    }
    if out == *original {
        // pathological tiny structure: mark the region center
        let (x, y) = ((region.x0 + region.x1) / 2, (region.y0 + region.y1) / 2);
        out.set(x, y, palette[0]);
    }
    out
}

fn invert_rgb(c: Rgb) -> Rgb {
    c.map(|v| 1.0 - v)
}

fn in_triangle(p: (f32, f32), a: (f32, f32), b: (f32, f32), c: (f32, f32)) -> bool {
    let cross = |o: (f32, f32), u: (f32, f32), v: (f32, f32)| {
        (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0)
    };
    let (d1, d2, d3) = (cross(p, a, b), cross(p, b, c), cross(p, c, a));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Case counts and distortion parameters for a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub invert: usize,
    pub rotate_originals: usize,
    pub angles: Vec<f64>,
    pub translate: usize,
    /// Shift magnitudes in pixels, cycled over the translate cases.
    pub shifts: Vec<i64>,
    pub color_stain: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            invert: 15,
            rotate_originals: 6,
            angles: vec![22.5, 45.0, 67.5, 90.0, 180.0],
            translate: 5,
            shifts: vec![24, 32, 40],
            color_stain: 5,
        }
    }
}

impl SuiteConfig {
    /// `n` cases per category; rotation keeps all five angles on one original.
    pub fn reduced(n: usize) -> Self {
        Self {
            invert: n,
            rotate_originals: n.div_ceil(5),
            translate: n,
            color_stain: n,
            ..Self::default()
        }
    }

    pub fn case_count(&self) -> usize {
        self.invert + self.rotate_originals * self.angles.len() + self.translate + self.color_stain
    }
}

/// Generates every case of a suite from one root seed.
pub fn build_suite(root_seed: u64, config: &SuiteConfig) -> Vec<ProbeCase> {
    let mut root = ChaCha8Rng::seed_from_u64(root_seed);
    let ref_seed: u64 = root.random();
    let references = gen_references(ref_seed);
    let mut cases = Vec::with_capacity(config.case_count());

    for i in 0..config.invert {
        let seed: u64 = root.random();
        let original = gen_pattern(PatternKind::BwPattern, seed);
        cases.push(ProbeCase {
            category: Category::Invert,
            distorted: invert(&original),
            original,
            references: references.clone(),
            label: format!("invert-{i:02}"),
            seed,
            distortion: Distortion::Invert,
        });
    }

    for i in 0..config.rotate_originals {
        let seed: u64 = root.random();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = if i % 2 == 0 {
            region_scene(&mut rng, PROBE_SIZE)
        } else {
            colored_shapes(&mut rng, PROBE_SIZE)
        };
        for &deg in &config.angles {
            cases.push(ProbeCase {
                category: Category::Rotate,
                original: scene.image.clone(),
                distorted: rotate(&scene.image, deg, scene.background),
                references: references.clone(),
                label: format!("rotate-{i:02}-{deg}"),
                seed,
                distortion: Distortion::Rotate { degrees: deg },
            });
        }
    }

    for i in 0..config.translate {
        let seed: u64 = root.random();
        let scene = region_scene(&mut ChaCha8Rng::seed_from_u64(seed), PROBE_SIZE);
        let shift = if config.shifts.is_empty() {
            PROBE_SIZE as i64 / 4
        } else {
            config.shifts[i % config.shifts.len()]
        };
        // move toward the far side so the region stays in frame
        let toward = |lo: usize, hi: usize| if lo + hi < PROBE_SIZE { shift } else { -shift };
        let (dx, dy) = match i % 3 {
            0 => (toward(scene.region.x0, scene.region.x1), 0),
            1 => (0, toward(scene.region.y0, scene.region.y1)),
            _ => (
                toward(scene.region.x0, scene.region.x1),
                toward(scene.region.y0, scene.region.y1),
            ),
        };
        let distorted = translate_region(&scene.image, dx, dy, scene.background)
            .expect("shift smaller than the image");
        cases.push(ProbeCase {
            category: Category::Translate,
            original: scene.image,
            distorted,
            references: references.clone(),
            label: format!("translate-{i:02}"),
            seed,
            distortion: Distortion::Translate { dx, dy },
        });
    }

    for i in 0..config.color_stain {
        let seed: u64 = root.random();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = colored_shapes(&mut rng, PROBE_SIZE);
        let recolor = shade(scene.background, &mut rng);
        let stains = if rng.random_bool(0.8) {
            rng.random_range(3..=8)
        } else {
            0
        };
        let stain_color = VIVID_COLORS[rng.random_range(0..VIVID_COLORS.len())];
        let distorted = apply_color_stain(&scene.image, recolor, stains, stain_color, rng.random());
        let reference = gen_color_stain_reference(&scene.image, rng.random());
        cases.push(ProbeCase {
            category: Category::ColorStain,
            original: scene.image,
            distorted,
            references: vec![reference],
            label: format!("color_stain-{i:02}"),
            seed,
            distortion: Distortion::ColorStain {
                background: recolor,
                stains,
                stain_color,
            },
        });
    }
    cases
}

/// A noticeably different but related tone of `c`.
fn shade(c: Rgb, rng: &mut ChaCha8Rng) -> Rgb {
    let amount = rng.random_range(0.25..0.45f32);
    let darker = c.iter().sum::<f32>() > 1.5;
    let hue_shift = rng.random_range(0..3);
    let mut out = c.map(|v| if darker { v - amount } else { v + amount });
    out[hue_shift] =
        (out[hue_shift] + if darker { amount * 0.5 } else { -amount * 0.5 }).clamp(0.0, 1.0);
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Pass counts per `(config, category)`, rows in config order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub config: String,
    pub method: Method,
    pub backbone: Option<BackboneId>,
    /// `(passed, total)` per category, in [`Category::ALL`] order.
    pub counts: [(usize, usize); 4],
}

impl TableRow {
    pub fn count(&self, category: Category) -> (usize, usize) {
        let idx = Category::ALL
            .iter()
            .position(|&c| c == category)
            .expect("known category");
        self.counts[idx]
    }
}

impl ProbeTable {
    pub fn row(&self, config_id: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.config == config_id)
    }

    /// Plain-text table: one row per config, one `passed/total` column per category.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<14} {:<11} {:>8} {:>8} {:>10} {:>12}  {}\n",
            "Method", "Network", "Invert", "Rotate", "Translate", "Color Stain", "Config"
        );
        for r in &self.rows {
            let cell = |c: Category| {
                let (p, t) = r.count(c);
                format!("{p}/{t}")
            };
            out.push_str(&format!(
                "{:<14} {:<11} {:>8} {:>8} {:>10} {:>12}  {}\n",
                r.method.as_str(),
                r.backbone.map_or("-", BackboneId::as_str),
                cell(Category::Invert),
                cell(Category::Rotate),
                cell(Category::Translate),
                cell(Category::ColorStain),
                r.config
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub results: Vec<ProbeResult>,
    pub table: ProbeTable,
}

fn fingerprint(image: &Image) -> u64 {
    let mut h = DefaultHasher::new();
    image.width().hash(&mut h);
    image.height().hash(&mut h);
    for v in image.pixels() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Tap activations for each distinct image, computed once per backbone.
#[derive(Default)]
struct FeatureCache {
    entries: HashMap<(BackboneId, u64), Vec<(Image, FeatureStack)>>,
}

impl FeatureCache {
    fn get(&self, backbone: BackboneId, image: &Image) -> Option<&FeatureStack> {
        self.entries
            .get(&(backbone, fingerprint(image)))?
            .iter()
            .find(|(img, _)| img == image)
            .map(|(_, f)| f)
    }

    fn fill(&mut self, backbone: &Backbone, images: &[&Image]) -> Result<(), ProbeError> {
        let id = backbone.id();
        let mut todo: Vec<&Image> = Vec::new();
        for &img in images {
            if self.get(id, img).is_none() && !todo.contains(&img) {
                todo.push(img);
            }
        }
        let stacks = todo
            .par_iter()
            .map(|img| backbone.extract(img))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| ProbeError::Extraction {
                backbone: id,
                source,
            })?;
        for (img, stack) in todo.into_iter().zip(stacks) {
            self.entries
                .entry((id, fingerprint(img)))
                .or_default()
                .push((img.clone(), stack));
        }
        Ok(())
    }
}

/// Scores every config on every case.
///
/// `backbones` must cover every backbone named by a non-pixelwise config.
pub fn run_probe_suite(
    cases: &[ProbeCase],
    configs: &[MetricConfig],
    backbones: &[Backbone],
) -> Result<ProbeReport, ProbeError> {
    let mut cache = FeatureCache::default();
    for config in configs {
        if let Some(id) = config.backbone {
            let bb = backbones
                .iter()
                .find(|b| b.id() == id)
                .ok_or(ProbeError::MissingBackbone(id))?;
            if cache.entries.keys().any(|k| k.0 == id) {
                continue;
            }
            let images: Vec<&Image> = cases
                .iter()
                .flat_map(|c| {
                    [&c.original, &c.distorted]
                        .into_iter()
                        .chain(c.references.iter())
                })
                .collect();
            cache.fill(bb, &images)?;
        }
    }

    let mut results = Vec::with_capacity(cases.len() * configs.len());
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let id = config.id();
        let mut counts = [(0usize, 0usize); 4];
        for case in cases {
            let metric_err = |source| ProbeError::Metric {
                case: case.label.clone(),
                config: id.clone(),
                source,
            };
            config.validate().map_err(metric_err)?;
            let d = |other: &Image| -> Result<f64, MetricError> {
                match config.backbone {
                    None => Ok(pixelwise_distance(&case.original, other, config.norm)?.0),
                    Some(b) => {
                        let fa = cache.get(b, &case.original).expect("cached");
                        let fb = cache.get(b, other).expect("cached");
                        Ok(feature_distance(fa, fb, config)?.0)
                    }
                }
            };
            let to_distorted = d(&case.distorted).map_err(metric_err)?;
            let mut min_ref = f64::INFINITY;
            for r in &case.references {
                min_ref = min_ref.min(d(r).map_err(metric_err)?);
            }
            let passed = to_distorted < min_ref;
            let idx = Category::ALL
                .iter()
                .position(|&c| c == case.category)
                .expect("known category");
            counts[idx].1 += 1;
            if passed {
                counts[idx].0 += 1;
            }
            results.push(ProbeResult {
                case: case.label.clone(),
                category: case.category,
                config: id.clone(),
                passed,
                distance_to_distorted: to_distorted,
                min_reference_distance: min_ref,
            });
        }
        rows.push(TableRow {
            config: id,
            method: config.method,
            backbone: config.backbone,
            counts,
        });
    }
    Ok(ProbeReport {
        results,
        table: ProbeTable { rows },
    })
}

/// The default comparison set: pixel-wise plus every deep method on every
/// backbone, all with `norm` and the given normalization flag.
pub fn default_configs(norm: crate::metrics::Norm, unit_normalize: bool) -> Vec<MetricConfig> {
    let mut configs = vec![MetricConfig::pixelwise(norm)];
    for method in Method::DEEP {
        for backbone in BackboneId::ALL {
            configs.push(MetricConfig::deep(method, backbone, norm, unit_normalize));
        }
    }
    configs
}

/// One line of case metadata for the line-delimited case log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub label: String,
    pub category: Category,
    pub seed: u64,
    pub distortion: Distortion,
    pub width: usize,
    pub height: usize,
    pub references: usize,
}

impl From<&ProbeCase> for CaseRecord {
    fn from(c: &ProbeCase) -> Self {
        Self {
            label: c.label.clone(),
            category: c.category,
            seed: c.seed,
            distortion: c.distortion.clone(),
            width: c.original.width(),
            height: c.original.height(),
            references: c.references.len(),
        }
    }
}

/// One JSON object per line.
pub fn to_json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// Outcome of one directional property over a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub claim: String,
    /// `None` when the report has no config or case the claim applies to.
    pub holds: Option<bool>,
    pub detail: String,
}

/// Checks the expected qualitative behavior of each metric family:
///
/// * (a) pixel-wise fails every invert case
/// * (b) un-normalized spatial, mean and sort pass every invert case
/// * (c) spatial fails every translate case shifted by at least `min_shift` px
/// * (d) mean and sort pass every translate case
/// * (e) mean and sort pass at least `rotate_rate` of rotate cases, per config
pub fn directional_claims(
    cases: &[ProbeCase],
    configs: &[MetricConfig],
    report: &ProbeReport,
    min_shift: i64,
    rotate_rate: f64,
) -> Vec<ClaimOutcome> {
    let case_of: HashMap<&str, &ProbeCase> = cases.iter().map(|c| (c.label.as_str(), c)).collect();
    let config_of: HashMap<String, &MetricConfig> = configs.iter().map(|c| (c.id(), c)).collect();
    let select = |method_ok: &dyn Fn(&MetricConfig) -> bool,
                  case_ok: &dyn Fn(&ProbeCase) -> bool| {
        report
            .results
            .iter()
            .filter(|r| config_of.get(&r.config).is_some_and(|c| method_ok(c)))
            .filter(|r| case_of.get(r.case.as_str()).is_some_and(|c| case_ok(c)))
            .collect::<Vec<_>>()
    };
    let all = |claim: &str, rs: Vec<&ProbeResult>, want_pass: bool| {
        if rs.is_empty() {
            return ClaimOutcome {
                claim: claim.to_string(),
                holds: None,
                detail: "no applicable results".into(),
            };
        }
        let bad: Vec<String> = rs
            .iter()
            .filter(|r| r.passed != want_pass)
            .map(|r| format!("{}@{}", r.case, r.config))
            .collect();
        ClaimOutcome {
            claim: claim.to_string(),
            holds: Some(bad.is_empty()),
            detail: if bad.is_empty() {
                format!("{} results", rs.len())
            } else {
                format!("{} of {} violate: {}", bad.len(), rs.len(), bad.join(", "))
            },
        }
    };
    let is_invert = |c: &ProbeCase| c.category == Category::Invert;
    let is_translate = |c: &ProbeCase| c.category == Category::Translate;
    let big_shift = |c: &ProbeCase| match c.distortion {
        Distortion::Translate { dx, dy } => dx.abs().max(dy.abs()) >= min_shift,
        _ => false,
    };
    let plain = |m: &[Method]| {
        let m = m.to_vec();
        move |c: &MetricConfig| m.contains(&c.method) && !c.unit_normalize
    };
    let nonspatial = |c: &MetricConfig| matches!(c.method, Method::Mean | Method::Sort);

    let mut out = vec![
        all(
            "(a) pixelwise fails every invert probe",
            select(&|c| c.method == Method::Pixelwise, &is_invert),
            false,
        ),
        all(
            "(b) spatial/mean/sort pass every invert probe",
            select(
                &plain(&[Method::Spatial, Method::Mean, Method::Sort]),
                &is_invert,
            ),
            true,
        ),
        all(
            "(c) spatial fails every large-shift translate probe",
            select(&|c| c.method == Method::Spatial, &big_shift),
            false,
        ),
        all(
            "(d) mean/sort pass every translate probe",
            select(&nonspatial, &is_translate),
            true,
        ),
    ];

    let mut per_config: Vec<(String, usize, usize)> = Vec::new();
    for r in select(&nonspatial, &|c| c.category == Category::Rotate) {
        match per_config.iter_mut().find(|e| e.0 == r.config) {
            Some(e) => {
                e.1 += usize::from(r.passed);
                e.2 += 1;
            }
            None => per_config.push((r.config.clone(), usize::from(r.passed), 1)),
        }
    }
    let claim = format!(
        "(e) mean/sort pass >= {:.0}% of rotate probes",
        rotate_rate * 100.0
    );
    out.push(if per_config.is_empty() {
        ClaimOutcome {
            claim,
            holds: None,
            detail: "no applicable results".into(),
        }
    } else {
        let holds = per_config
            .iter()
            .all(|(_, p, t)| *p as f64 >= rotate_rate * *t as f64);
        ClaimOutcome {
            claim,
            holds: Some(holds),
            detail: per_config
                .iter()
                .map(|(c, p, t)| format!("{c} {p}/{t}"))
                .collect::<Vec<_>>()
                .join(", "),
        }
    });
    out
}
