//! Image and mask containers plus 8-bit PNG round-tripping.
//!
//! Conventions used everywhere in this crate:
//! - [`ImagePlane`]: `(H, W, 3)` array, values in `[0, 1]`.
//! - [`LogitMask`]: `(C, H, W)` raw class scores.
//! - [`ProbMask`]: `(C, H, W)` per-pixel class distributions (channel sums 1).
//! - [`LabelMask`]: `(H, W)` class indices as `u8`; [`IGNORE_LABEL`] marks
//!   pixels excluded from losses and metrics.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// H×W×3 image in `[0, 1]`.
pub type ImagePlane<T> = Array3<T>;
/// C×H×W raw class scores.
pub type LogitMask<T> = Array3<T>;
/// C×H×W per-pixel class distributions.
pub type ProbMask<T> = Array3<T>;
/// H×W class indices; 255 = ignore.
pub type LabelMask = Array2<u8>;

/// Pixels labelled with this value are excluded from all counts and losses.
pub const IGNORE_LABEL: u8 = 255;

/// Spatial size of an image plane.
pub fn image_dims<T>(image: &ImagePlane<T>) -> (usize, usize) {
    let d = image.dim();
    (d.0, d.1)
}

/// Clamp every value into `[0, 1]`.
pub fn clip01<T: Scalar>(image: &mut ImagePlane<T>) {
    image.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
}

/// Reject images containing NaN or infinities.
pub fn check_finite<T: Scalar>(image: &ImagePlane<T>, what: &str) -> Result<()> {
    if image.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn argmax_mask<T: Scalar>(scores: &LogitMask<T>) -> LabelMask {
    let (c, h, w) = scores.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = scores[(0, y, x)];
            for k in 1..c {
                let v = scores[(k, y, x)];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[(y, x)] = best as u8;
        }
    }
    out
}

/// Channel-wise softmax at every pixel (numerically stabilised).
pub fn softmax<T: Scalar>(logits: &LogitMask<T>) -> ProbMask<T> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = logits[(0, y, x)];
            for k in 1..c {
                m = m.max(logits[(k, y, x)]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (logits[(k, y, x)] - m).exp();
                out[(k, y, x)] = e;
                z += e;
            }
            for k in 0..c {
                out[(k, y, x)] = out[(k, y, x)] / z;
            }
        }
    }
    out
}

/// Backprop through [`softmax`]: maps d(loss)/d(probs) to d(loss)/d(logits).
pub fn softmax_backward<T: Scalar>(probs: &ProbMask<T>, grad_probs: &ProbMask<T>) -> LogitMask<T> {
    let (c, h, w) = probs.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = T::zero();
            for k in 0..c {
                dot += grad_probs[(k, y, x)] * probs[(k, y, x)];
            }
            for k in 0..c {
                out[(k, y, x)] = probs[(k, y, x)] * (grad_probs[(k, y, x)] - dot);
            }
        }
    }
    out
}

/// Mean per-pixel prediction entropy (natural log).
pub fn mean_entropy<T: Scalar>(probs: &ProbMask<T>) -> f64 {
    let (c, h, w) = probs.dim();
    let floor = sc::<T>(1e-8);
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let mut hset = T::zero();
            for k in 0..c {
                let p = probs[(k, y, x)].max(floor);
                hset -= p * p.ln();
            }
            total += hset.to_f64().unwrap();
        }
    }
    total / (h * w) as f64
}

/// Load an 8-bit RGB PNG into a `[0,1]` image plane.
pub fn load_image<T: Scalar>(path: &Path) -> Result<ImagePlane<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<T>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(y as usize, x as usize, ch)] = sc::<T>(px.0[ch] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Save a `[0,1]` image plane as an 8-bit RGB PNG (values are clipped).
pub fn save_image<T: Scalar>(image: &ImagePlane<T>, path: &Path) -> Result<()> {
    let (h, w) = image_dims(image);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = image[(y, x, ch)].to_f64().unwrap().clamp(0.0, 1.0);
                px[ch] = (v * 255.0).round() as u8;
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load a single-channel 8-bit label mask.
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = px.0[0];
    }
    Ok(out)
}

/// Save a label mask as a single-channel 8-bit PNG.
pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask[(y, x)]]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Quantize to the 8-bit grid that PNG materialization uses.
pub fn quantize_u8<T: Scalar>(image: &ImagePlane<T>) -> ImagePlane<T> {
    image.mapv(|v| {
        let q = (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round();
        sc::<T>(q / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_breaks_ties_toward_lowest_class() {
        let scores = array![[[0.5]], [[0.5]], [[0.2]]];
        let m = argmax_mask::<f64>(&scores);
        assert_eq!(m[(0, 0)], 0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[[1.0, -2.0]], [[0.5, 3.0]], [[-1.0, 0.0]]];
        let p = softmax::<f64>(&logits);
        for x in 0..2 {
            let s: f64 = (0..3).map(|k| p[(k, 0, x)]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = array![[[0.3]], [[-0.7]], [[1.1]]];
        let p = softmax::<f64>(&logits);
        // loss = sum of p_k * w_k for fixed weights
        let wts = [0.2, -1.3, 0.7];
        let mut gp = p.clone();
        for k in 0..3 {
            gp[(k, 0, 0)] = wts[k];
        }
        let gl = softmax_backward(&p, &gp);
        let eps = 1e-6;
        for k in 0..3 {
            let mut lp = logits.clone();
            lp[(k, 0, 0)] += eps;
            let mut lm = logits.clone();
            lm[(k, 0, 0)] -= eps;
            let f = |l: &LogitMask<f64>| -> f64 {
                let p = softmax(l);
                (0..3).map(|j| p[(j, 0, 0)] * wts[j]).sum()
            };
            let fd = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((fd - gl[(k, 0, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn entropy_of_onehot_is_zero() {
        let probs = array![[[1.0]], [[0.0]]];
        assert!(mean_entropy::<f64>(&probs) < 1e-6);
    }

    #[test]
    fn png_roundtrip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Array3::<f32>::zeros((5, 7, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        save_image(&img, &path).unwrap();
        let back = load_image::<f32>(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
