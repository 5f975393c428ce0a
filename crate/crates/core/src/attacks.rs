//! Targeted FGSM and PGD input-space attacks. The trajectory of masks they
//! produce doubles as training data for the auxiliary networks, and a single
//! FGSM step builds the perturbed view of the adversarial-invariance method.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adapter::SegmentationModel;
use crate::error::{Error, Result};
use crate::image::{argmax_mask, check_finite, softmax, softmax_backward, ImagePlane, LogitMask, ProbMask};
use crate::losses::{ce_loss, LossTarget};
use crate::nn::Mode;
use crate::scalar::{sc, Scalar};

/// Attack schedule. `steps = 0` or `step_size = 0` yields the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    /// Per-step pixel magnitude in `[0,1]` intensity units.
    pub step_size: f64,
    /// Optional L-infinity distance cap from the clean image.
    pub linf_budget: Option<f64>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 10,
            step_size: 1.0 / 255.0,
            linf_budget: None,
            seed: 0,
        }
    }
}

/// Per-pixel inverted-mask target: zero mass on the predicted class, uniform
/// mass on the others. Argmax ties resolve to the lowest class index.
pub fn inverted_target<T: Scalar>(probs: &ProbMask<T>) -> Result<ProbMask<T>> {
    let (c, h, w) = probs.dim();
    if c < 2 {
        return Err(Error::invalid(
            "mask inversion needs at least two classes".to_string(),
        ));
    }
    let arg = argmax_mask(probs);
    let fill = sc::<T>(1.0 / (c as f64 - 1.0));
    let mut out = Array3::<T>::from_elem((c, h, w), fill);
    for ((y, x), k) in arg.indexed_iter() {
        out[(*k as usize, y, x)] = T::zero();
    }
    Ok(out)
}

/// One targeted FGSM descent step:
/// `clip(image - step * sign(d CE(f(image), target) / d image))`.
/// Pixels with zero gradient are left unchanged; model weights are not
/// touched.
pub fn fgsm_step<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    image: &ImagePlane<T>,
    target: &ProbMask<T>,
    step: f64,
) -> Result<ImagePlane<T>> {
    if model.mode() != Mode::Eval {
        return Err(Error::invalid(
            "attacks require the model in evaluation mode".to_string(),
        ));
    }
    check_finite(image, "attack input")?;
    if step == 0.0 {
        return Ok(image.clone());
    }
    let logits = model.forward_for_grad(image)?;
    let probs = softmax(&logits);
    let loss = ce_loss(&probs, LossTarget::Soft(target), None)?;
    let grad_logits = softmax_backward(&probs, &loss.grad);
    let grad_image = model.backward(&grad_logits)?;
    model.zero_grad();
    if !grad_image.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("image gradient".to_string()));
    }
    let step_t = sc::<T>(step);
    let mut out = image.clone();
    for (o, g) in out.iter_mut().zip(grad_image.iter()) {
        let sign = if *g > T::zero() {
            T::one()
        } else if *g < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        *o = (*o - step_t * sign).max(T::zero()).min(T::one());
    }
    Ok(out)
}

/// One step of a PGD trajectory: attacked image and the model's mask on it.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint<T> {
    pub image: ImagePlane<T>,
    pub logits: LogitMask<T>,
}

/// Iterated FGSM with projection by clipping after every step (plus the
/// optional L-infinity budget around the clean image). Returns the full
/// per-iteration trajectory; the model's weights are untouched.
pub fn pgd_attack<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    image: &ImagePlane<T>,
    target: &ProbMask<T>,
    cfg: &AttackConfig,
) -> Result<Vec<TrajectoryPoint<T>>> {
    check_finite(image, "attack input")?;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut current = image.clone();
    for _t in 1..=cfg.steps {
        current = fgsm_step(model, &current, target, cfg.step_size)?;
        if let Some(budget) = cfg.linf_budget {
            let b = sc::<T>(budget);
            for (c, orig) in current.iter_mut().zip(image.iter()) {
                *c = (*c).max(*orig - b).min(*orig + b).max(T::zero()).min(T::one());
            }
        }
        let logits = model.forward(&current)?;
        trajectory.push(TrajectoryPoint {
            image: current.clone(),
            logits,
        });
    }
    Ok(trajectory)
}

/// JSON sidecar stored next to each dumped mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub image_id: String,
    pub t: usize,
    pub step: f64,
    pub seed: u64,
}

/// Write a trajectory as compressed array files plus JSON sidecars:
/// `<id>__t<t>.logits.gz` / `<id>__t<t>.json`.
pub fn dump_trajectory<T: Scalar>(
    dir: &Path,
    image_id: &str,
    cfg: &AttackConfig,
    trajectory: &[TrajectoryPoint<T>],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, point) in trajectory.iter().enumerate() {
        let t = i + 1;
        let array_path = dir.join(format!("{image_id}__t{t}.logits.gz"));
        save_array_gz(&point.logits, &array_path)?;
        let sidecar = TrajectorySidecar {
            image_id: image_id.to_string(),
            t,
            step: cfg.step_size,
            seed: cfg.seed,
        };
        let json_path = dir.join(format!("{image_id}__t{t}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(array_path);
        written.push(json_path);
    }
    Ok(written)
}

/// Gzip-compressed array file: three u64 little-endian dims followed by f64
/// little-endian values; exact for both scalar lanes.
pub fn save_array_gz<T: Scalar>(array: &Array3<T>, path: &Path) -> Result<()> {
    let (c, h, w) = array.dim();
    let file = std::fs::File::create(path)?;
    let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
    for d in [c, h, w] {
        enc.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in array.iter() {
        enc.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    enc.finish()?;
    Ok(())
}

pub fn load_array_gz<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let file = std::fs::File::open(path)?;
    let mut dec = flate2::read::GzDecoder::new(file);
    let mut buf = Vec::new();
    dec.read_to_end(&mut buf)?;
    if buf.len() < 24 {
        return Err(Error::invalid(format!("truncated array file {}", path.display())));
    }
    let dim = |i: usize| u64::from_le_bytes(buf[i * 8..(i + 1) * 8].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = 24 + c * h * w * 8;
    if buf.len() != expected {
        return Err(Error::invalid(format!(
            "array file {} has {} bytes, expected {expected}",
            path.display(),
            buf.len()
        )));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for i in 0..(c * h * w) {
        let off = 24 + i * 8;
        let v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        data.push(sc::<T>(v));
    }
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::invalid(format!("bad array shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::weight_hash;
    use crate::testbed::ToySegmenter;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImagePlane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| 0.3 + 0.4 * rng.random::<f64>())
    }

    #[test]
    fn inverted_target_binary_and_ternary() {
        let probs: ProbMask<f64> = array![[[0.8]], [[0.2]]];
        let inv = inverted_target(&probs).unwrap();
        assert_eq!(inv[(0, 0, 0)], 0.0);
        assert_eq!(inv[(1, 0, 0)], 1.0);

        let probs: ProbMask<f64> = array![[[0.5]], [[0.3]], [[0.2]]];
        let inv = inverted_target(&probs).unwrap();
        assert_eq!(inv[(0, 0, 0)], 0.0);
        assert_eq!(inv[(1, 0, 0)], 0.5);
        assert_eq!(inv[(2, 0, 0)], 0.5);
    }

    #[test]
    fn inverted_target_tie_goes_to_lowest_class() {
        let probs: ProbMask<f64> = array![[[1.0 / 3.0]], [[1.0 / 3.0]], [[1.0 / 3.0]]];
        let inv = inverted_target(&probs).unwrap();
        assert_eq!(inv[(0, 0, 0)], 0.0);
        assert_eq!(inv[(1, 0, 0)], 0.5);
    }

    #[test]
    fn inverted_target_single_class_errors() {
        let probs = Array3::<f64>::ones((1, 2, 2));
        assert!(inverted_target(&probs).is_err());
    }

    #[test]
    fn fgsm_zero_step_is_identity() {
        let mut model = ToySegmenter::<f64>::new(3, 1);
        let image = random_image(2, 8, 8);
        let target = inverted_target(&softmax(&model.forward(&image).unwrap())).unwrap();
        let out = fgsm_step(&mut model, &image, &target, 0.0).unwrap();
        assert_eq!(image, out);
    }

    #[test]
    fn fgsm_moves_pixels_by_exactly_zero_or_step() {
        let mut model = ToySegmenter::<f64>::new(3, 2);
        // interior intensities keep clipping inactive
        let image = random_image(3, 8, 8);
        let step = 1.0 / 255.0;
        let target = inverted_target(&softmax(&model.forward(&image).unwrap())).unwrap();
        let out = fgsm_step(&mut model, &image, &target, step).unwrap();
        for (a, b) in image.iter().zip(out.iter()) {
            let d = (b - a).abs();
            assert!(d.abs() < 1e-12 || (d - step).abs() < 1e-12);
        }
    }

    #[test]
    fn fgsm_descends_the_targeted_objective() {
        let mut successes = 0;
        for seed in 0..20 {
            let mut model = ToySegmenter::<f64>::new(3, 40 + seed);
            let image = random_image(100 + seed, 8, 8);
            let probs = softmax(&model.forward(&image).unwrap());
            let target = inverted_target(&probs).unwrap();
            let before = ce_loss(&probs, LossTarget::Soft(&target), None).unwrap().value;
            let attacked = fgsm_step(&mut model, &image, &target, 1.0 / 255.0).unwrap();
            let after_probs = softmax(&model.forward(&attacked).unwrap());
            let after = ce_loss(&after_probs, LossTarget::Soft(&target), None)
                .unwrap()
                .value;
            if after < before {
                successes += 1;
            }
        }
        assert!(successes >= 19, "only {successes}/20 descended");
    }

    #[test]
    fn pgd_zero_steps_empty_trajectory() {
        let mut model = ToySegmenter::<f64>::new(3, 4);
        let image = random_image(5, 8, 8);
        let target = inverted_target(&softmax(&model.forward(&image).unwrap())).unwrap();
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        let traj = pgd_attack(&mut model, &image, &target, &cfg).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn pgd_respects_range_linf_and_weight_purity() {
        let mut model = ToySegmenter::<f64>::new(3, 6);
        let hash_before = weight_hash(&model);
        let image = random_image(7, 8, 8);
        let target = inverted_target(&softmax(&model.forward(&image).unwrap())).unwrap();
        let cfg = AttackConfig {
            steps: 6,
            step_size: 2.0 / 255.0,
            linf_budget: None,
            seed: 0,
        };
        let traj = pgd_attack(&mut model, &image, &target, &cfg).unwrap();
        assert_eq!(traj.len(), 6);
        for (i, point) in traj.iter().enumerate() {
            let t = (i + 1) as f64;
            for (a, b) in point.image.iter().zip(image.iter()) {
                assert!((0.0..=1.0).contains(a));
                assert!((a - b).abs() <= t * cfg.step_size + 1e-12);
            }
        }
        assert_eq!(weight_hash(&model), hash_before);

        // determinism
        let again = pgd_attack(&mut model, &image, &target, &cfg).unwrap();
        for (a, b) in traj.iter().zip(again.iter()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn trajectory_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ToySegmenter::<f32>::new(3, 8);
        let image = random_image(9, 8, 8).mapv(|v| v as f32);
        let target = inverted_target(&softmax(&model.forward(&image).unwrap())).unwrap();
        let cfg = AttackConfig {
            steps: 2,
            ..AttackConfig::default()
        };
        let traj = pgd_attack(&mut model, &image, &target, &cfg).unwrap();
        let files = dump_trajectory(dir.path(), "img0", &cfg, &traj).unwrap();
        assert_eq!(files.len(), 4);
        let back: LogitMask<f32> = load_array_gz(&files[0]).unwrap();
        assert_eq!(back, traj[0].logits);
        let sidecar: TrajectorySidecar =
            serde_json::from_str(&std::fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(sidecar.t, 1);
        assert_eq!(sidecar.image_id, "img0");
    }
}
