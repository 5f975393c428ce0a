//! The two learned auxiliaries: a mask refiner that maps corrupted logit
//! masks to clean ones, and a scalar estimator of the soft-IoU loss of a
//! mask. Both are trained on pairs synthesized from the first iterations of
//! a targeted PGD attack on source-domain images; neither ever mutates the
//! segmenter.

use std::path::Path;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::adapter::{Checkpoint, SegmentationModel, TensorRecord};
use crate::attacks::{inverted_target, pgd_attack, AttackConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{argmax_mask, load_image, load_mask, softmax, softmax_backward, LabelMask, LogitMask, ProbMask};
use crate::losses::{ce_loss, soft_iou_loss, LossTarget};
use crate::nn::{AdamW, Conv2d, Linear, Param, Relu};
use crate::scalar::{sc, Scalar};

/// Attack iterations harvested into refiner training pairs by default.
pub const DEFAULT_HARVEST: [usize; 5] = [2, 4, 6, 8, 10];

/// Clean target used when building pairs: the segmenter's own prediction on
/// the clean image, or the ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Predictions,
    GroundTruth,
}

/// One training pair: mask from attack iteration `t` and its clean target.
#[derive(Debug, Clone)]
pub struct RefinerPair<T> {
    pub corrupted: LogitMask<T>,
    pub target: LabelMask,
    pub source_id: String,
    pub iteration: usize,
    pub target_kind: TargetKind,
}

/// Generate refiner pairs from a PGD trajectory per source image. With
/// `target_kind = Predictions` the clean-image prediction is the target;
/// with `GroundTruth` the dataset mask is (and must exist).
pub fn gen_refiner_pairs<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    dataset: &Dataset,
    attack_cfg: &AttackConfig,
    harvest: &[usize],
    target_kind: TargetKind,
) -> Result<Vec<RefinerPair<T>>> {
    for &t in harvest {
        if t > attack_cfg.steps {
            return Err(Error::invalid(format!(
                "harvest iteration {t} exceeds attack steps {}",
                attack_cfg.steps
            )));
        }
    }
    let mut pairs = Vec::new();
    for entry in &dataset.entries {
        let image = load_image::<T>(&dataset.image_path(entry))?;
        let clean_logits = model.forward(&image)?;
        let target = match target_kind {
            TargetKind::Predictions => argmax_mask(&clean_logits),
            TargetKind::GroundTruth => {
                let path = dataset.mask_path(entry);
                if !path.exists() {
                    return Err(Error::invalid(format!(
                        "ground-truth mask missing for {}: {}",
                        entry.id,
                        path.display()
                    )));
                }
                load_mask(&path)?
            }
        };
        let attack_target = inverted_target(&softmax(&clean_logits))?;
        let trajectory = pgd_attack(model, &image, &attack_target, attack_cfg)?;
        for &t in harvest {
            let corrupted = if t == 0 {
                clean_logits.clone()
            } else {
                trajectory[t - 1].logits.clone()
            };
            pairs.push(RefinerPair {
                corrupted,
                target: target.clone(),
                source_id: entry.id.clone(),
                iteration: t,
                target_kind,
            });
        }
    }
    Ok(pairs)
}

/// Split pairs by source image (never by attack iteration), deterministic in
/// the seed. Returns `(train, validation)`.
pub fn split_pairs_by_source<T: Scalar>(
    pairs: Vec<RefinerPair<T>>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<RefinerPair<T>>, Vec<RefinerPair<T>>) {
    let mut sources: Vec<String> = pairs.iter().map(|p| p.source_id.clone()).collect();
    sources.sort();
    sources.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..sources.len()).rev() {
        let j = rng.random_range(0..=i);
        sources.swap(i, j);
    }
    let n_val = ((sources.len() as f64) * val_fraction).round() as usize;
    let val_set: std::collections::HashSet<&String> = sources.iter().take(n_val).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in pairs {
        if val_set.contains(&p.source_id) {
            val.push(p);
        } else {
            train.push(p);
        }
    }
    (train, val)
}

pub const REFINER_ARCH: &str = "mask-refiner";

/// Encoder-decoder mask refiner with an additive skip connection, operating
/// on per-channel standardized logits. Output spatial shape and channel
/// count equal the input's.
#[derive(Debug, Clone)]
pub struct Refiner<T> {
    num_classes: usize,
    enc1: Conv2d<T>,
    r1: Relu<T>,
    enc2: Conv2d<T>,
    r2: Relu<T>,
    bott: Conv2d<T>,
    r3: Relu<T>,
    reduce: Conv2d<T>,
    r4: Relu<T>,
    dec: Conv2d<T>,
    r5: Relu<T>,
    head: Conv2d<T>,
}

const R_EARLY: usize = 12;
const R_DEEP: usize = 24;

impl<T: Scalar> Refiner<T> {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Refiner {
            num_classes,
            enc1: Conv2d::new("enc1", num_classes, R_EARLY, 3, 1, 1, &mut rng),
            r1: Relu::new(),
            enc2: Conv2d::new("enc2", R_EARLY, R_DEEP, 3, 2, 1, &mut rng),
            r2: Relu::new(),
            bott: Conv2d::new("bott", R_DEEP, R_DEEP, 3, 1, 1, &mut rng),
            r3: Relu::new(),
            reduce: Conv2d::new("reduce", R_DEEP, R_EARLY, 1, 1, 0, &mut rng),
            r4: Relu::new(),
            dec: Conv2d::new("dec", R_EARLY, R_EARLY, 3, 1, 1, &mut rng),
            r5: Relu::new(),
            head: Conv2d::new("head", R_EARLY, num_classes, 1, 1, 0, &mut rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-channel standardization of the input logits; the refiner treats
    /// its input as a constant, so this needs no backward path.
    fn standardize(&self, logits: &LogitMask<T>) -> LogitMask<T> {
        let (c, h, w) = logits.dim();
        let n = sc::<T>((h * w) as f64);
        let mut out = logits.clone();
        for ci in 0..c {
            let mut mean = T::zero();
            for y in 0..h {
                for x in 0..w {
                    mean += logits[(ci, y, x)];
                }
            }
            mean = mean / n;
            let mut var = T::zero();
            for y in 0..h {
                for x in 0..w {
                    let d = logits[(ci, y, x)] - mean;
                    var += d * d;
                }
            }
            let std = (var / n).sqrt() + sc::<T>(1e-6);
            for y in 0..h {
                for x in 0..w {
                    out[(ci, y, x)] = (logits[(ci, y, x)] - mean) / std;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, logits: &LogitMask<T>, keep_grad: bool) -> Result<LogitMask<T>> {
        let (c, h, w) = logits.dim();
        if c != self.num_classes {
            return Err(Error::shape(
                format!("{} channels", self.num_classes),
                format!("{c} channels"),
            ));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be even, got {h}x{w}"
            )));
        }
        let x = self.standardize(logits);
        let a = self.r1.forward(&self.enc1.forward(&x, keep_grad), keep_grad);
        let b = self.r2.forward(&self.enc2.forward(&a, keep_grad), keep_grad);
        let cbot = self.r3.forward(&self.bott.forward(&b, keep_grad), keep_grad);
        let up = crate::nn::UpsampleNearest2.forward(&cbot);
        let r = self.r4.forward(&self.reduce.forward(&up, keep_grad), keep_grad);
        let d = self.r5.forward(&self.dec.forward(&(&r + &a), keep_grad), keep_grad);
        Ok(self.head.forward(&d, keep_grad))
    }

    /// Backward w.r.t. parameters only (the refiner's input is always a
    /// detached mask).
    fn backward(&mut self, grad_out: &LogitMask<T>) {
        let g = self.head.backward(grad_out);
        let g = self.dec.backward(&self.r5.backward(&g));
        // additive skip: gradient flows to both the decoder branch and enc1
        let g_r = self.reduce.backward(&self.r4.backward(&g));
        let g_b = crate::nn::UpsampleNearest2.backward(&g_r);
        let g_b = self.bott.backward(&self.r3.backward(&g_b));
        let mut g_a = self.enc2.backward(&self.r2.backward(&g_b));
        g_a += &g;
        let _ = self.enc1.backward(&self.r1.backward(&g_a));
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.bott.weight,
            &mut self.bott.bias,
            &mut self.reduce.weight,
            &mut self.reduce.bias,
            &mut self.dec.weight,
            &mut self.dec.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.bott.weight,
            &self.bott.bias,
            &self.reduce.weight,
            &self.reduce.bias,
            &self.dec.weight,
            &self.dec.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            arch: REFINER_ARCH.to_string(),
            meta: json!({ "num_classes": self.num_classes }),
            tensors: self.params().iter().map(|p| TensorRecord::from_param(p)).collect(),
            buffers: Vec::new(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.arch != REFINER_ARCH {
            return Err(Error::UnknownArchitecture(ckpt.arch));
        }
        let num_classes = ckpt
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("checkpoint missing num_classes".to_string()))?
            as usize;
        let mut net = Refiner::<T>::new(num_classes, 0);
        {
            let mut params = net.params_mut();
            if params.len() != ckpt.tensors.len() {
                return Err(Error::shape(
                    format!("{} tensors", params.len()),
                    format!("{} tensors", ckpt.tensors.len()),
                ));
            }
            for (p, rec) in params.iter_mut().zip(&ckpt.tensors) {
                rec.restore_into(p)?;
            }
        }
        Ok(net)
    }
}

/// Train the refiner with pixel-wise cross-entropy against the pair targets
/// (AdamW). Returns the net and the per-epoch mean loss.
pub fn train_refiner<T: Scalar>(
    pairs: &[RefinerPair<T>],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Refiner<T>, Vec<f64>)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Empty("no refiner pairs".into()))?;
    let dims = first.corrupted.dim();
    for p in pairs {
        if p.corrupted.dim() != dims || p.target.dim() != (dims.1, dims.2) {
            return Err(Error::shape(
                format!("{dims:?}"),
                format!("{:?} / {:?}", p.corrupted.dim(), p.target.dim()),
            ));
        }
    }
    let mut net = Refiner::<T>::new(dims.0, seed);
    let mut opt = AdamW::<T>::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5265_6669_6e65_7201);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &i in &order {
            let out = net.forward(&pairs[i].corrupted, true)?;
            let probs = softmax(&out);
            let loss = ce_loss(&probs, LossTarget::Hard(&pairs[i].target), None)?;
            total += loss.value.to_f64().unwrap();
            let grad_logits = softmax_backward(&probs, &loss.grad);
            net.backward(&grad_logits);
            let mut params = net.params_mut();
            opt.step(&mut params)?;
            drop(params);
            net.zero_grad();
        }
        curve.push(total / pairs.len() as f64);
    }
    Ok((net, curve))
}

/// Softmax-normalized refined mask for a logit input.
pub fn refine<T: Scalar>(refiner: &mut Refiner<T>, logits: &LogitMask<T>) -> Result<ProbMask<T>> {
    Ok(softmax(&refiner.forward(logits, false)?))
}

pub const DIOU_ARCH: &str = "iou-estimator";

/// Strided-convolution encoder with a global-average-pooled regression head;
/// the sigmoid keeps predictions in `[0,1]`. Differentiable with respect to
/// its input mask so the estimate itself can be minimized at test time.
#[derive(Debug, Clone)]
pub struct IoUEstimator<T> {
    num_classes: usize,
    c1: Conv2d<T>,
    r1: Relu<T>,
    c2: Conv2d<T>,
    r2: Relu<T>,
    c3: Conv2d<T>,
    r3: Relu<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    cache: Option<DiouCache<T>>,
}

#[derive(Debug, Clone)]
struct DiouCache<T> {
    pool_dims: (usize, usize, usize),
    fc1_out_mask: Array1<T>,
    sigmoid_out: T,
}

const D_C1: usize = 8;
const D_C2: usize = 16;
const D_HID: usize = 16;

impl<T: Scalar> IoUEstimator<T> {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IoUEstimator {
            num_classes,
            c1: Conv2d::new("c1", num_classes, D_C1, 3, 2, 1, &mut rng),
            r1: Relu::new(),
            c2: Conv2d::new("c2", D_C1, D_C2, 3, 2, 1, &mut rng),
            r2: Relu::new(),
            c3: Conv2d::new("c3", D_C2, D_C2, 3, 2, 1, &mut rng),
            r3: Relu::new(),
            fc1: Linear::new("fc1", D_C2, D_HID, &mut rng),
            fc2: Linear::new("fc2", D_HID, 1, &mut rng),
            cache: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&mut self, logits: &LogitMask<T>, keep_grad: bool) -> Result<T> {
        let (c, _, _) = logits.dim();
        if c != self.num_classes {
            return Err(Error::shape(
                format!("{} channels", self.num_classes),
                format!("{c} channels"),
            ));
        }
        let a = self.r1.forward(&self.c1.forward(logits, keep_grad), keep_grad);
        let b = self.r2.forward(&self.c2.forward(&a, keep_grad), keep_grad);
        let d = self.r3.forward(&self.c3.forward(&b, keep_grad), keep_grad);
        let (dc, dh, dw) = d.dim();
        let n = sc::<T>((dh * dw) as f64);
        let mut pooled = Array1::<T>::zeros(dc);
        for ci in 0..dc {
            let mut s = T::zero();
            for y in 0..dh {
                for x in 0..dw {
                    s += d[(ci, y, x)];
                }
            }
            pooled[ci] = s / n;
        }
        let h1 = self.fc1.forward(&pooled, keep_grad);
        let mask = h1.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        let h1r = h1.mapv(|v| v.max(T::zero()));
        let out = self.fc2.forward(&h1r, keep_grad)[0];
        let y = T::one() / (T::one() + (-out).exp());
        if keep_grad {
            self.cache = Some(DiouCache {
                pool_dims: (dc, dh, dw),
                fc1_out_mask: mask,
                sigmoid_out: y,
            });
        } else {
            self.cache = None;
        }
        Ok(y)
    }

    /// Backprop a gradient on the scalar output into parameter grads and the
    /// gradient w.r.t. the input mask.
    pub fn backward(&mut self, grad_scalar: T) -> Result<LogitMask<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("estimator backward without forward".to_string()))?;
        let y = cache.sigmoid_out;
        let g_pre = grad_scalar * y * (T::one() - y);
        let g_h1r = self.fc2.backward(&Array1::from_vec(vec![g_pre]));
        let g_h1 = &g_h1r * &cache.fc1_out_mask;
        let g_pooled = self.fc1.backward(&g_h1);
        let (dc, dh, dw) = cache.pool_dims;
        let n = sc::<T>((dh * dw) as f64);
        let mut g_map = Array3::<T>::zeros((dc, dh, dw));
        for ci in 0..dc {
            let g = g_pooled[ci] / n;
            for y_ in 0..dh {
                for x in 0..dw {
                    g_map[(ci, y_, x)] = g;
                }
            }
        }
        let g = self.c3.backward(&self.r3.backward(&g_map));
        let g = self.c2.backward(&self.r2.backward(&g));
        Ok(self.c1.backward(&self.r1.backward(&g)))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.c1.weight,
            &mut self.c1.bias,
            &mut self.c2.weight,
            &mut self.c2.bias,
            &mut self.c3.weight,
            &mut self.c3.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.c1.weight,
            &self.c1.bias,
            &self.c2.weight,
            &self.c2.bias,
            &self.c3.weight,
            &self.c3.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            arch: DIOU_ARCH.to_string(),
            meta: json!({ "num_classes": self.num_classes }),
            tensors: self.params().iter().map(|p| TensorRecord::from_param(p)).collect(),
            buffers: Vec::new(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.arch != DIOU_ARCH {
            return Err(Error::UnknownArchitecture(ckpt.arch));
        }
        let num_classes = ckpt
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("checkpoint missing num_classes".to_string()))?
            as usize;
        let mut net = IoUEstimator::<T>::new(num_classes, 0);
        {
            let mut params = net.params_mut();
            if params.len() != ckpt.tensors.len() {
                return Err(Error::shape(
                    format!("{} tensors", params.len()),
                    format!("{} tensors", ckpt.tensors.len()),
                ));
            }
            for (p, rec) in params.iter_mut().zip(&ckpt.tensors) {
                rec.restore_into(p)?;
            }
        }
        Ok(net)
    }
}

/// Soft-IoU-loss label of each pair, the estimator's regression target.
pub fn diou_labels<T: Scalar>(pairs: &[RefinerPair<T>]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let probs = softmax(&p.corrupted);
            Ok(soft_iou_loss(&probs, LossTarget::Hard(&p.target), None)?
                .value
                .to_f64()
                .unwrap())
        })
        .collect()
}

/// Train the estimator with squared error on `[0,1]` labels.
pub fn train_diou<T: Scalar>(
    pairs: &[RefinerPair<T>],
    labels: &[f64],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(IoUEstimator<T>, Vec<f64>)> {
    if pairs.is_empty() || pairs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} pairs vs {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    for l in labels {
        if !(0.0..=1.0).contains(l) {
            return Err(Error::invalid(format!("label {l} outside [0,1]")));
        }
    }
    let mut net = IoUEstimator::<T>::new(pairs[0].corrupted.dim().0, seed);
    let mut opt = AdamW::<T>::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6449_6f55_0000_0001);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &i in &order {
            let pred = net.forward(&pairs[i].corrupted, true)?;
            let err = pred.to_f64().unwrap() - labels[i];
            total += err * err;
            net.backward(sc::<T>(2.0 * err))?;
            let mut params = net.params_mut();
            opt.step(&mut params)?;
            drop(params);
            net.zero_grad();
        }
        curve.push(total / pairs.len() as f64);
    }
    Ok((net, curve))
}

/// Predicted soft-IoU-loss value for a mask, in `[0,1]`.
pub fn predict_iou_loss<T: Scalar>(est: &mut IoUEstimator<T>, logits: &LogitMask<T>) -> Result<T> {
    est.forward(logits, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::weight_hash;
    use crate::testbed::ToySegmenter;
    use num_traits::ToPrimitive;

    fn random_logits(seed: u64, c: usize, h: usize, w: usize) -> LogitMask<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn refiner_preserves_shape_and_is_deterministic() {
        let mut net = Refiner::<f64>::new(4, 3);
        let logits = random_logits(1, 4, 8, 8);
        let out = refine(&mut net, &logits).unwrap();
        assert_eq!(out.dim(), (4, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                let s: f64 = (0..4).map(|k| out[(k, y, x)]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        let out2 = refine(&mut net, &logits).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn refiner_rejects_channel_mismatch() {
        let mut net = Refiner::<f64>::new(4, 3);
        let logits = random_logits(1, 3, 8, 8);
        assert!(net.forward(&logits, false).is_err());
    }

    #[test]
    fn refiner_training_reduces_loss() {
        // tiny denoising task: target mask recoverable from noisy logits
        let mut pairs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..12 {
            let mut target = crate::image::LabelMask::zeros((8, 8));
            for y in 0..8 {
                for x in 0..8 {
                    target[(y, x)] = ((x > 3) as u8) + 2 * ((y > 3) as u8);
                }
            }
            let mut logits = Array3::<f64>::zeros((4, 8, 8));
            for y in 0..8 {
                for x in 0..8 {
                    logits[(target[(y, x)] as usize, y, x)] = 2.0;
                    for k in 0..4 {
                        logits[(k, y, x)] += rng.random::<f64>() - 0.5;
                    }
                }
            }
            pairs.push(RefinerPair {
                corrupted: logits,
                target,
                source_id: format!("s{i}"),
                iteration: 2,
                target_kind: TargetKind::Predictions,
            });
        }
        let (_, curve) = train_refiner(&pairs, 12, 1e-3, 7).unwrap();
        assert!(
            curve.last().unwrap() < &(curve[0] * 0.5),
            "loss did not halve: {curve:?}"
        );
    }

    #[test]
    fn pair_generation_counts_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::testbed::ShapesSpec {
            size: 16,
            ..Default::default()
        };
        let dataset = crate::testbed::make_shapes_dataset(3, &spec, dir.path()).unwrap();
        let mut model = ToySegmenter::<f64>::new(4, 2);
        let h0 = weight_hash(&model);
        let cfg = AttackConfig {
            steps: 4,
            ..Default::default()
        };
        let pairs =
            gen_refiner_pairs(&mut model, &dataset, &cfg, &[2, 4], TargetKind::Predictions).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(weight_hash(&model), h0);
        let again =
            gen_refiner_pairs(&mut model, &dataset, &cfg, &[2, 4], TargetKind::Predictions).unwrap();
        for (a, b) in pairs.iter().zip(again.iter()) {
            assert_eq!(a.corrupted, b.corrupted);
            assert_eq!(a.target, b.target);
        }
        // zero-step degenerate pair: corrupted equals the clean prediction
        let cfg0 = AttackConfig {
            steps: 0,
            ..Default::default()
        };
        let degenerate =
            gen_refiner_pairs(&mut model, &dataset, &cfg0, &[0], TargetKind::Predictions).unwrap();
        for p in &degenerate {
            assert_eq!(crate::image::argmax_mask(&p.corrupted), p.target);
        }
        // harvest beyond steps errors
        assert!(gen_refiner_pairs(&mut model, &dataset, &cfg0, &[1], TargetKind::Predictions).is_err());
    }

    #[test]
    fn split_by_source_never_splits_an_image() {
        let pairs: Vec<RefinerPair<f64>> = (0..20)
            .map(|i| RefinerPair {
                corrupted: Array3::zeros((2, 4, 4)),
                target: crate::image::LabelMask::zeros((4, 4)),
                source_id: format!("img{}", i % 5),
                iteration: 2,
                target_kind: TargetKind::Predictions,
            })
            .collect();
        let (train, val) = split_pairs_by_source(pairs, 0.2, 3);
        assert_eq!(train.len() + val.len(), 20);
        let train_ids: std::collections::HashSet<_> =
            train.iter().map(|p| p.source_id.clone()).collect();
        for p in &val {
            assert!(!train_ids.contains(&p.source_id));
        }
    }

    #[test]
    fn estimator_output_bounded_and_input_grad_matches_fd() {
        let mut net = IoUEstimator::<f64>::new(3, 4);
        let logits = random_logits(9, 3, 8, 8);
        let y = net.forward(&logits, true).unwrap();
        assert!((0.0..=1.0).contains(&y.to_f64().unwrap()));
        let gin = net.backward(1.0).unwrap();
        let eps = 1e-6;
        for idx in [(0, 0, 0), (1, 3, 5), (2, 7, 7)] {
            let mut plus = logits.clone();
            plus[idx] += eps;
            let mut minus = logits.clone();
            minus[idx] -= eps;
            let fp = net.forward(&plus, false).unwrap();
            let fm = net.forward(&minus, false).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - gin[idx]).abs() < 1e-7,
                "{idx:?}: fd {fd} vs analytic {}",
                gin[idx]
            );
        }
    }

    #[test]
    fn diou_training_reduces_mse_and_rejects_bad_labels() {
        let mut pairs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..16 {
            let scale = if i % 2 == 0 { 3.0 } else { 0.2 };
            let logits =
                Array3::<f64>::from_shape_fn((3, 8, 8), |_| (rng.random::<f64>() - 0.5) * scale);
            pairs.push(RefinerPair {
                corrupted: logits,
                target: crate::image::LabelMask::zeros((8, 8)),
                source_id: format!("s{i}"),
                iteration: 2,
                target_kind: TargetKind::Predictions,
            });
        }
        let labels: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.1 } else { 0.8 }).collect();
        let (_, curve) = train_diou(&pairs, &labels, 20, 1e-3, 3).unwrap();
        assert!(
            curve.last().unwrap() < &(curve[0] * 0.5),
            "MSE did not halve: {curve:?}"
        );
        let bad = vec![1.5; 16];
        assert!(train_diou(&pairs, &bad, 1, 1e-3, 3).is_err());
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Refiner::<f32>::new(4, 7);
        let logits = random_logits(2, 4, 8, 8).mapv(|v| v as f32);
        let before = net.forward(&logits, false).unwrap();
        let path = dir.path().join("refiner.json");
        net.save(&path).unwrap();
        let mut loaded = Refiner::<f32>::load(&path).unwrap();
        assert_eq!(loaded.forward(&logits, false).unwrap(), before);

        let mut est = IoUEstimator::<f32>::new(4, 8);
        let y = est.forward(&logits, false).unwrap();
        let path = dir.path().join("diou.json");
        est.save(&path).unwrap();
        let mut loaded = IoUEstimator::<f32>::load(&path).unwrap();
        assert_eq!(loaded.forward(&logits, false).unwrap(), y);
    }
}
