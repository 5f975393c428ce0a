//! Synthetic image corruptions and derivation of a corrupted training corpus.
//!
//! Ten corruption kinds plus the identity operate on `[0,1]` images. Each
//! kind reads its parameters from a frozen five-level severity table; the
//! corpus deriver exposes levels {1, 3, 5}. Every output is clipped to
//! `[0,1]` and is a deterministic function of `(image, spec)` including the
//! seed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{check_finite, clip01, image_dims, load_image, save_image, ImagePlane};
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Brightness,
    Contrast,
    Frost,
    Fog,
    GaussianNoise,
    ShotNoise,
    Spatter,
    DefocusBlur,
    GaussianBlur,
    Jpeg,
    Identity,
}

impl CorruptionKind {
    /// All ten corruptions, identity excluded.
    pub const CORRUPTIONS: [CorruptionKind; 10] = [
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Spatter,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Jpeg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::Spatter => "spatter",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::GaussianBlur => "gaussian-blur",
            CorruptionKind::Jpeg => "jpeg",
            CorruptionKind::Identity => "identity",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for kind in CorruptionKind::CORRUPTIONS
            .iter()
            .chain(std::iter::once(&CorruptionKind::Identity))
        {
            if kind.name() == s {
                return Ok(*kind);
            }
        }
        Err(Error::invalid(format!("unknown corruption kind: {s}")))
    }
}

/// One synthetic domain shift: corruption kind, severity level, and seed.
/// Identity ignores both level and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8, seed: u64) -> Self {
        CorruptionSpec { kind, level, seed }
    }
}

fn level_index(level: u8) -> Result<usize> {
    if (1..=5).contains(&level) {
        Ok((level - 1) as usize)
    } else {
        Err(Error::invalid(format!("severity level {level} outside 1..=5")))
    }
}

// Frozen severity table (index 0 = level 1).
const BRIGHTNESS_B: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
// Paper form x_c = b(x - mean) + x; b = factor - 1 of the usual contrast scale.
const CONTRAST_B: [f64; 5] = [-0.6, -0.7, -0.8, -0.9, -0.95];
const FROST_B: [(f64, f64); 5] = [(1.0, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)];
// (additive weight b1, diamond-square wibble decay b2)
const FOG_B: [(f64, f64); 5] = [(1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)];
const GAUSS_NOISE_SIGMA: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
const SHOT_NOISE_B: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
// (blur sigma, threshold cutoff, blend alpha, dark layer)
const SPATTER_B: [(f64, f64, f64, bool); 5] = [
    (1.0, 0.78, 0.40, false),
    (1.0, 0.72, 0.50, false),
    (1.5, 0.68, 0.60, false),
    (1.5, 0.65, 0.70, true),
    (2.0, 0.60, 0.80, true),
];
const DEFOCUS_B: [(f64, f64); 5] = [(3.0, 0.1), (4.0, 0.5), (6.0, 0.5), (8.0, 0.5), (10.0, 0.5)];
const GAUSS_BLUR_SIGMA: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 6.0];
const JPEG_QUALITY: [u8; 5] = [25, 18, 15, 10, 7];

/// Shot-noise rate parameter for a severity level; exposed for tests.
pub fn shot_noise_param(level: u8) -> Result<f64> {
    Ok(SHOT_NOISE_B[level_index(level)?])
}

/// Apply one corruption. Output values are clipped to `[0,1]`; identical
/// `(image, spec)` give bit-identical outputs.
pub fn apply_corruption<T: Scalar>(
    image: &ImagePlane<T>,
    spec: &CorruptionSpec,
) -> Result<ImagePlane<T>> {
    check_finite(image, "corruption input")?;
    if spec.kind == CorruptionKind::Identity {
        return Ok(image.clone());
    }
    let li = level_index(spec.level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = match spec.kind {
        CorruptionKind::Brightness => brightness(image, BRIGHTNESS_B[li]),
        CorruptionKind::Contrast => contrast(image, CONTRAST_B[li]),
        CorruptionKind::Frost => frost(image, FROST_B[li], &mut rng),
        CorruptionKind::Fog => fog(image, FOG_B[li], &mut rng)?,
        CorruptionKind::GaussianNoise => gaussian_noise(image, GAUSS_NOISE_SIGMA[li], &mut rng),
        CorruptionKind::ShotNoise => shot_noise(image, SHOT_NOISE_B[li], &mut rng),
        CorruptionKind::Spatter => spatter(image, SPATTER_B[li], &mut rng),
        CorruptionKind::DefocusBlur => defocus_blur(image, DEFOCUS_B[li]),
        CorruptionKind::GaussianBlur => gaussian_blur(image, GAUSS_BLUR_SIGMA[li]),
        CorruptionKind::Jpeg => jpeg(image, JPEG_QUALITY[li])?,
        CorruptionKind::Identity => unreachable!(),
    };
    clip01(&mut out);
    Ok(out)
}

fn brightness<T: Scalar>(image: &ImagePlane<T>, b: f64) -> ImagePlane<T> {
    let b = sc::<T>(b);
    image.mapv(|v| v + b)
}

fn contrast<T: Scalar>(image: &ImagePlane<T>, b: f64) -> ImagePlane<T> {
    let (h, w) = image_dims(image);
    let n = sc::<T>((h * w) as f64);
    let b = sc::<T>(b);
    let mut means = [T::zero(); 3];
    for ch in 0..3 {
        let mut s = T::zero();
        for y in 0..h {
            for x in 0..w {
                s += image[(y, x, ch)];
            }
        }
        means[ch] = s / n;
    }
    let mut out = image.clone();
    for ((_, _, ch), v) in out.indexed_iter_mut() {
        *v = b * (*v - means[ch]) + *v;
    }
    out
}

fn gaussian_noise<T: Scalar>(image: &ImagePlane<T>, sigma: f64, rng: &mut ChaCha8Rng) -> ImagePlane<T> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = image.clone();
    for v in out.iter_mut() {
        *v += sc::<T>(normal.sample(rng));
    }
    out
}

fn shot_noise<T: Scalar>(image: &ImagePlane<T>, b: f64, rng: &mut ChaCha8Rng) -> ImagePlane<T> {
    let mut out = image.clone();
    for v in out.iter_mut() {
        let lambda = v.to_f64().unwrap().max(0.0) * b;
        if lambda <= 0.0 {
            *v = T::zero();
        } else {
            let pois = Poisson::new(lambda).expect("positive lambda");
            *v = sc::<T>(pois.sample(rng) / b);
        }
    }
    out
}

fn frost<T: Scalar>(image: &ImagePlane<T>, (b1, b2): (f64, f64), rng: &mut ChaCha8Rng) -> ImagePlane<T> {
    let (h, w) = image_dims(image);
    let template_id = rng.random_range(0..FROST_TEMPLATE_SEEDS.len());
    let template = frost_template(template_id, h.max(w));
    let (th, tw) = template.dim();
    let oy = rng.random_range(0..=(th - h));
    let ox = rng.random_range(0..=(tw - w));
    let b1 = sc::<T>(b1);
    let b2 = sc::<T>(b2);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let f = sc::<T>(template[(oy + y, ox + x)]);
            for ch in 0..3 {
                out[(y, x, ch)] = b1 * image[(y, x, ch)] + b2 * f;
            }
        }
    }
    out
}

const FROST_TEMPLATE_SEEDS: [u64; 3] = [911, 912, 913];

/// Procedural frost texture: a diamond-square field thresholded into
/// crystalline streaks and modulated by a second field.
fn frost_template(id: usize, min_size: usize) -> Array2<f64> {
    let size = pow2_plus1_at_least(min_size.max(129));
    let seed = FROST_TEMPLATE_SEEDS[id];
    let base = diamond_square_f64(size, 1.0, 0.55, seed).expect("valid size");
    let texture = diamond_square_f64(size, 1.0, 0.75, seed ^ 0xA5A5).expect("valid size");
    let mut out = Array2::<f64>::zeros((size, size));
    for ((y, x), v) in out.indexed_iter_mut() {
        let streak = ((base[(y, x)] - 0.55) * 2.4).clamp(0.0, 1.0);
        *v = streak * (0.55 + 0.45 * texture[(y, x)]);
    }
    out
}

fn fog<T: Scalar>(
    image: &ImagePlane<T>,
    (b1, decay): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<ImagePlane<T>> {
    let (h, w) = image_dims(image);
    let size = pow2_plus1_at_least(h.max(w));
    let height_seed = rng.random::<u64>();
    let heightmap = diamond_square_f64(size, 1.0, 1.0 / decay, height_seed)?;
    let max_val = image
        .iter()
        .fold(0.0f64, |m, v| m.max(v.to_f64().unwrap()))
        .max(1e-12);
    let b1t = sc::<T>(b1);
    let scale = sc::<T>(max_val / (max_val + b1));
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let hm = sc::<T>(heightmap[(y, x)]);
            for ch in 0..3 {
                out[(y, x, ch)] = (image[(y, x, ch)] + b1t * hm) * scale;
            }
        }
    }
    Ok(out)
}

fn spatter<T: Scalar>(
    image: &ImagePlane<T>,
    (sigma, cutoff, alpha, dark): (f64, f64, f64, bool),
    rng: &mut ChaCha8Rng,
) -> ImagePlane<T> {
    let (h, w) = image_dims(image);
    let mut noise = Array2::<f64>::zeros((h, w));
    for v in noise.iter_mut() {
        *v = rng.random::<f64>();
    }
    let blurred = gaussian_blur_plane(&noise, sigma);
    // min-max normalization keeps the cutoff meaningful across sigmas
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in blurred.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-12);
    let layer: [f64; 3] = if dark {
        [0.25, 0.16, 0.08]
    } else {
        [0.85, 0.90, 0.95]
    };
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let level = (blurred[(y, x)] - lo) / span;
            if level > cutoff {
                for ch in 0..3 {
                    let v = out[(y, x, ch)].to_f64().unwrap();
                    out[(y, x, ch)] = sc::<T>(v * (1.0 - alpha) + layer[ch] * alpha);
                }
            }
        }
    }
    out
}

fn defocus_blur<T: Scalar>(image: &ImagePlane<T>, (radius, alias_blur): (f64, f64)) -> ImagePlane<T> {
    let kernel = disk_kernel(radius, alias_blur);
    convolve2d(image, &kernel)
}

fn gaussian_blur<T: Scalar>(image: &ImagePlane<T>, sigma: f64) -> ImagePlane<T> {
    let (h, w) = image_dims(image);
    let mut out = image.clone();
    for ch in 0..3 {
        let mut plane = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                plane[(y, x)] = image[(y, x, ch)].to_f64().unwrap();
            }
        }
        let blurred = gaussian_blur_plane(&plane, sigma);
        for y in 0..h {
            for x in 0..w {
                out[(y, x, ch)] = sc::<T>(blurred[(y, x)]);
            }
        }
    }
    out
}

fn jpeg<T: Scalar>(image: &ImagePlane<T>, quality: u8) -> Result<ImagePlane<T>> {
    let (h, w) = image_dims(image);
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image[(y, x, ch)].to_f64().unwrap().clamp(0.0, 1.0);
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut encoded = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    image::ImageEncoder::write_image(
        encoder,
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)?.to_rgb8();
    let mut out = Array3::<T>::zeros((h, w, 3));
    for (x, y, px) in decoded.enumerate_pixels() {
        for ch in 0..3 {
            out[(y as usize, x as usize, ch)] = sc::<T>(px.0[ch] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Diamond-square heightmap on a `(2^k + 1)` square grid, min-max rescaled to
/// `[0,1]`. The random displacement amplitude starts at `wibble` and is
/// multiplied by `decay` after every subdivision; `wibble = 0` degenerates to
/// bilinear interpolation of the four seeded corner values.
pub fn diamond_square<T: Scalar>(size: usize, wibble: f64, decay: f64, seed: u64) -> Result<Array2<T>> {
    Ok(diamond_square_f64(size, wibble, decay, seed)?.mapv(|v| sc::<T>(v)))
}

fn diamond_square_f64(size: usize, wibble: f64, decay: f64, seed: u64) -> Result<Array2<f64>> {
    if size < 3 || !(size - 1).is_power_of_two() {
        return Err(Error::invalid(format!(
            "diamond-square size must be 2^k + 1 with k >= 1, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = Array2::<f64>::zeros((size, size));
    let last = size - 1;
    for &(y, x) in &[(0, 0), (0, last), (last, 0), (last, last)] {
        map[(y, x)] = rng.random::<f64>();
    }
    let mut step = last;
    let mut amp = wibble;
    while step > 1 {
        let half = step / 2;
        // diamond step: square centers
        for y in (half..size).step_by(step) {
            for x in (half..size).step_by(step) {
                let mean = (map[(y - half, x - half)]
                    + map[(y - half, x + half)]
                    + map[(y + half, x - half)]
                    + map[(y + half, x + half)])
                    / 4.0;
                map[(y, x)] = mean + displacement(&mut rng, amp);
            }
        }
        // square step: edge midpoints; boundary points average their two
        // along-edge neighbours so the zero-wibble case stays bilinear
        for y in (0..size).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..size).step_by(step) {
                let mut sum = 0.0;
                let mut n = 0.0;
                let on_vertical_edge = x == 0 || x == last;
                let on_horizontal_edge = y == 0 || y == last;
                if on_vertical_edge || on_horizontal_edge {
                    if on_horizontal_edge {
                        sum += map[(y, x - half)] + map[(y, x + half)];
                    } else {
                        sum += map[(y - half, x)] + map[(y + half, x)];
                    }
                    n = 2.0;
                } else {
                    if y >= half {
                        sum += map[(y - half, x)];
                        n += 1.0;
                    }
                    if y + half < size {
                        sum += map[(y + half, x)];
                        n += 1.0;
                    }
                    if x >= half {
                        sum += map[(y, x - half)];
                        n += 1.0;
                    }
                    if x + half < size {
                        sum += map[(y, x + half)];
                        n += 1.0;
                    }
                }
                map[(y, x)] = sum / n + displacement(&mut rng, amp);
            }
        }
        step = half;
        amp *= decay;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in map.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-15 {
        return Ok(Array2::zeros((size, size)));
    }
    Ok(map.mapv(|v| (v - lo) / (hi - lo)))
}

fn displacement(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    // keep the rng stream identical whether or not the draw is used
    let u = rng.random::<f64>();
    if amp == 0.0 {
        0.0
    } else {
        (2.0 * u - 1.0) * amp
    }
}

fn pow2_plus1_at_least(n: usize) -> usize {
    let mut size = 3;
    while size < n {
        size = (size - 1) * 2 + 1;
    }
    size
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in 0..(2 * radius + 1) {
        let d = i as f64 - radius as f64;
        k.push((-d * d / denom).exp());
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable gaussian blur with edge replication.
fn gaussian_blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel_1d(sigma);
    let radius = kernel.len() / 2;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xi = (x + i).saturating_sub(radius).min(w - 1);
                acc += plane[(y, xi)] * kv;
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yi = (y + i).saturating_sub(radius).min(h - 1);
                acc += tmp[(yi, x)] * kv;
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Disk kernel softened by a small gaussian, normalized to unit sum.
fn disk_kernel(radius: f64, alias_blur: f64) -> Array2<f64> {
    let half = radius.ceil().max(8.0) as isize;
    let size = (2 * half + 1) as usize;
    let mut k = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half as f64;
            let dx = x as f64 - half as f64;
            if dy * dy + dx * dx <= radius * radius {
                k[(y, x)] = 1.0;
            }
        }
    }
    let k = gaussian_blur_plane(&k, alias_blur.max(1e-3));
    let s: f64 = k.iter().sum();
    k.mapv(|v| v / s)
}

/// Dense 2D convolution of all three channels with edge replication.
fn convolve2d<T: Scalar>(image: &ImagePlane<T>, kernel: &Array2<f64>) -> ImagePlane<T> {
    let (h, w) = image_dims(image);
    let (kh, kw) = kernel.dim();
    let (ry, rx) = (kh / 2, kw / 2);
    let mut out = Array3::<T>::zeros((h, w, 3));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let yi = (y + ky).saturating_sub(ry).min(h - 1);
                        let xi = (x + kx).saturating_sub(rx).min(w - 1);
                        acc += image[(yi, xi, ch)].to_f64().unwrap() * kernel[(ky, kx)];
                    }
                }
                out[(y, x, ch)] = sc::<T>(acc);
            }
        }
    }
    out
}

/// One derived corpus image: source id, corruption slot, seed and paths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusEntry {
    pub id: String,
    pub kind: CorruptionKind,
    pub level: u8,
    pub seed: u64,
    pub path: PathBuf,
    pub source: PathBuf,
}

impl CorpusEntry {
    pub fn spec(&self) -> CorruptionSpec {
        CorruptionSpec::new(self.kind, self.level.max(1), self.seed)
    }

    /// Ground-truth masks are shared with the source image:
    /// `<dataset>/images/<id>.png` -> `<dataset>/masks/<id>.png`.
    pub fn mask_path(&self) -> PathBuf {
        let dir = self.source.parent().and_then(|p| p.parent());
        match dir {
            Some(root) => root.join("masks").join(format!("{}.png", self.id)),
            None => PathBuf::from(format!("masks/{}.png", self.id)),
        }
    }
}

/// Index of a derived corpus; one entry per (image, kind, level) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

/// Plan a corrupted corpus: one entry per (source image, kind, level).
/// Identity occupies one slot per level like any other kind, which makes
/// 40 images x (9 + 1) kinds x 3 levels = 1200 entries.
pub fn derive_corrupted_dataset(
    dataset: &Dataset,
    kinds: &[CorruptionKind],
    levels: &[u8],
    seed: u64,
    out_root: &Path,
) -> Result<CorpusIndex> {
    if dataset.is_empty() {
        return Err(Error::Empty("source dataset".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Empty("corruption kinds".into()));
    }
    if levels.is_empty() {
        return Err(Error::Empty("severity levels".into()));
    }
    for level in levels {
        if ![1u8, 3, 5].contains(level) {
            return Err(Error::invalid(format!(
                "corpus levels must be a subset of {{1, 3, 5}}, got {level}"
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::new();
    for entry in &dataset.entries {
        for kind in kinds {
            for &level in levels {
                if !seen.insert((entry.id.clone(), *kind, level)) {
                    continue;
                }
                let entry_seed = entry_seed(seed, &entry.id, *kind, level);
                let file = format!("{}__{}__L{}.png", entry.id, kind.name(), level);
                entries.push(CorpusEntry {
                    id: entry.id.clone(),
                    kind: *kind,
                    level,
                    seed: entry_seed,
                    path: PathBuf::from("images").join(file),
                    source: dataset.image_path(entry),
                });
            }
        }
    }
    Ok(CorpusIndex {
        root: out_root.to_path_buf(),
        entries,
    })
}

/// Stable per-entry seed: FNV-1a over the global seed and the entry key, so
/// materialization order and parallelism cannot change the corpus.
fn entry_seed(global: u64, id: &str, kind: CorruptionKind, level: u8) -> u64 {
    fnv1a64(format!("{global}/{id}/{}/{level}", kind.name()).as_bytes())
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl CorpusIndex {
    /// Compute and write every corrupted image (8-bit RGB PNG) plus
    /// `index.jsonl`. Existing files are reused unless `overwrite` is set.
    pub fn materialize<T: Scalar>(&self, overwrite: bool) -> Result<()> {
        std::fs::create_dir_all(self.root.join("images"))?;
        for entry in &self.entries {
            let target = self.root.join(&entry.path);
            if target.exists() && !overwrite {
                continue;
            }
            let image = load_image::<T>(&entry.source)?;
            let corrupted = if entry.kind == CorruptionKind::Identity {
                image
            } else {
                apply_corruption(&image, &entry.spec())?
            };
            save_image(&corrupted, &target)?;
        }
        self.save_index()
    }

    pub fn save_index(&self) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(self.root.join("index.jsonl"))?;
        for entry in &self.entries {
            writeln!(file, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        use std::io::BufRead;
        let index = root.join("index.jsonl");
        let file = std::fs::File::open(&index)
            .map_err(|e| Error::invalid(format!("cannot open {}: {e}", index.display())))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<CorpusEntry>(&line)?);
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("corpus index {}", index.display())));
        }
        Ok(CorpusIndex {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn image_path(&self, entry: &CorpusEntry) -> PathBuf {
        crate::dataset::resolve(&self.root, &entry.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn constant_image(v: f64) -> ImagePlane<f64> {
        Array3::from_elem((8, 8, 3), v)
    }

    fn test_image(seed: u64) -> ImagePlane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Array3::<f64>::zeros((16, 16, 3));
        for v in img.iter_mut() {
            *v = rng.random::<f64>();
        }
        img
    }

    fn mse(a: &ImagePlane<f64>, b: &ImagePlane<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn brightness_formula_on_constant_image() {
        let img = constant_image(0.5);
        let spec = CorruptionSpec::new(CorruptionKind::Brightness, 3, 0);
        let out = apply_corruption(&img, &spec).unwrap();
        for v in out.iter() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_preserves_per_channel_mean_pre_clip() {
        let img = test_image(3);
        let out = contrast(&img, -0.8);
        for ch in 0..3 {
            let mean_in: f64 = img.slice(ndarray::s![.., .., ch]).iter().sum::<f64>() / 256.0;
            let mean_out: f64 = out.slice(ndarray::s![.., .., ch]).iter().sum::<f64>() / 256.0;
            assert!((mean_in - mean_out).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_noise_is_bit_deterministic() {
        let img = test_image(5);
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::ShotNoise,
            CorruptionKind::Frost,
            CorruptionKind::Fog,
            CorruptionKind::Spatter,
        ] {
            let spec = CorruptionSpec::new(kind, 3, 77);
            let a = apply_corruption(&img, &spec).unwrap();
            let b = apply_corruption(&img, &spec).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{kind} not deterministic"
            );
        }
    }

    #[test]
    fn all_kinds_stay_in_unit_range() {
        let img = test_image(11);
        for kind in CorruptionKind::CORRUPTIONS {
            for level in [1u8, 3, 5] {
                let out = apply_corruption(&img, &CorruptionSpec::new(kind, level, 9)).unwrap();
                for v in out.iter() {
                    assert!(
                        (0.0..=1.0).contains(v),
                        "{kind} L{level} out of range: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_is_exactly_identity() {
        let img = test_image(13);
        let out = apply_corruption(&img, &CorruptionSpec::new(CorruptionKind::Identity, 3, 1)).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut img = constant_image(0.5);
        img[(0, 0, 0)] = f64::NAN;
        let spec = CorruptionSpec::new(CorruptionKind::Brightness, 1, 0);
        assert!(apply_corruption(&img, &spec).is_err());
    }

    #[test]
    fn unknown_kind_string_is_rejected() {
        assert!("motion-blur".parse::<CorruptionKind>().is_err());
        assert_eq!(
            "gaussian-noise".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::GaussianNoise
        );
    }

    #[test]
    fn severity_is_monotone_for_noise_and_blur() {
        let img = test_image(17);
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::ShotNoise,
            CorruptionKind::DefocusBlur,
            CorruptionKind::GaussianBlur,
        ] {
            let mut last = -1.0;
            for level in [1u8, 3, 5] {
                let out = apply_corruption(&img, &CorruptionSpec::new(kind, level, 3)).unwrap();
                let e = mse(&img, &out);
                assert!(
                    e >= last,
                    "{kind}: MSE decreased from {last} to {e} at level {level}"
                );
                last = e;
            }
        }
    }

    #[test]
    fn shot_noise_variance_matches_poisson_oracle() {
        // Var(Pois(x*b)/b) = x/b; Monte-Carlo estimate over 10^4 draws.
        let x = 0.3;
        let b = shot_noise_param(3).unwrap();
        let img = Array3::from_elem((1, 1, 3), x);
        let n = 10_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let out = shot_noise(&img, b, &mut ChaCha8Rng::seed_from_u64(i as u64));
            let v = out[(0, 0, 0)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected = x / b;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn diamond_square_zero_wibble_is_bilinear() {
        let size = 17;
        let map = diamond_square::<f64>(size, 0.0, 0.5, 21).unwrap();
        let last = (size - 1) as f64;
        let (a, b) = (map[(0, 0)], map[(0, size - 1)]);
        let (c, d) = (map[(size - 1, 0)], map[(size - 1, size - 1)]);
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 / last;
                let fx = x as f64 / last;
                let bilinear = a * (1.0 - fy) * (1.0 - fx)
                    + b * (1.0 - fy) * fx
                    + c * fy * (1.0 - fx)
                    + d * fy * fx;
                assert!(
                    (map[(y, x)] - bilinear).abs() < 1e-9,
                    "({y},{x}): {} vs {bilinear}",
                    map[(y, x)]
                );
            }
        }
    }

    #[test]
    fn diamond_square_shape_range_and_determinism() {
        let map = diamond_square::<f64>(33, 1.0, 0.6, 4).unwrap();
        assert_eq!(map.dim(), (33, 33));
        for v in map.iter() {
            assert!((0.0..=1.0).contains(v));
        }
        let again = diamond_square::<f64>(33, 1.0, 0.6, 4).unwrap();
        assert_eq!(map, again);
        assert!(diamond_square::<f64>(32, 1.0, 0.6, 4).is_err());
        assert!(diamond_square::<f64>(2, 1.0, 0.6, 4).is_err());
    }

    #[test]
    fn jpeg_golden_regression_within_2_of_255() {
        // frozen output of this codec build on a fixed 8x8 gradient; the
        // tolerance absorbs codec-build drift
        let mut img = Array3::<f64>::zeros((8, 8, 3));
        for y in 0..8 {
            for x in 0..8 {
                img[(y, x, 0)] = x as f64 / 7.0;
                img[(y, x, 1)] = y as f64 / 7.0;
                img[(y, x, 2)] = 0.5;
            }
        }
        let out = jpeg(&img, 25).unwrap();
        let golden_row0_r: [f64; 8] = golden_jpeg_row();
        for x in 0..8 {
            assert!(
                (out[(0, x, 0)] - golden_row0_r[x]).abs() <= 2.0 / 255.0 + 1e-12,
                "x={x}: {} vs {}",
                out[(0, x, 0)],
                golden_row0_r[x]
            );
        }
    }

    fn golden_jpeg_row() -> [f64; 8] {
        // generated once from this implementation (quality 25)
        GOLDEN_JPEG_ROW
    }

    const GOLDEN_JPEG_ROW: [f64; 8] = [
        0.0392156862745098,
        0.12549019607843137,
        0.26666666666666666,
        0.42745098039215684,
        0.5764705882352941,
        0.7294117647058823,
        0.8705882352941177,
        0.9607843137254902,
    ];

    #[test]
    fn corpus_count_matches_40_times_10_times_3() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut entries = Vec::new();
        for i in 0..40 {
            entries.push(crate::dataset::DatasetEntry {
                id: format!("img{i:03}"),
                image: PathBuf::from(format!("images/img{i:03}.png")),
                mask: PathBuf::from(format!("masks/img{i:03}.png")),
            });
        }
        let dataset = Dataset {
            root: root.to_path_buf(),
            entries,
        };
        let mut kinds: Vec<CorruptionKind> = CorruptionKind::CORRUPTIONS[..9].to_vec();
        kinds.push(CorruptionKind::Identity);
        let index =
            derive_corrupted_dataset(&dataset, &kinds, &[1, 3, 5], 7, &root.join("out")).unwrap();
        assert_eq!(index.entries.len(), 1200);
        // unique on (id, kind, level)
        let mut keys: Vec<_> = index
            .entries
            .iter()
            .map(|e| (e.id.clone(), e.kind, e.level))
            .collect();
        keys.sort_by(|a, b| format!("{:?}", a).cmp(&format!("{:?}", b)));
        keys.dedup();
        assert_eq!(keys.len(), 1200);
    }

    #[test]
    fn corpus_single_identity_entry() {
        let dataset = Dataset {
            root: PathBuf::from("."),
            entries: vec![crate::dataset::DatasetEntry {
                id: "a".into(),
                image: PathBuf::from("images/a.png"),
                mask: PathBuf::from("masks/a.png"),
            }],
        };
        let index = derive_corrupted_dataset(
            &dataset,
            &[CorruptionKind::Identity],
            &[1],
            0,
            Path::new("out"),
        )
        .unwrap();
        assert_eq!(index.entries.len(), 1);
        assert!(derive_corrupted_dataset(&dataset, &[], &[1], 0, Path::new("out")).is_err());
        assert!(
            derive_corrupted_dataset(&dataset, &[CorruptionKind::Identity], &[], 0, Path::new("out"))
                .is_err()
        );
        assert!(derive_corrupted_dataset(
            &dataset,
            &[CorruptionKind::Identity],
            &[2],
            0,
            Path::new("out")
        )
        .is_err());
    }
}
