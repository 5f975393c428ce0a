//! Differentiable objectives optimized at test time: soft IoU, cross-entropy,
//! prediction entropy, and reverse KL divergence.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the probability mask, so callers can chain it through the
//! softmax and the network backward pass. Probabilities are clamped to
//! `[1e-8, 1]` inside logarithms.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::{argmax_mask, LabelMask, ProbMask, IGNORE_LABEL};
use crate::scalar::{sc, Scalar};

/// H×W weights in {0, 1}; a zero removes the pixel from the loss and its
/// gradient.
pub type PixelWeightMask<T> = Array2<T>;

/// Loss value plus gradient w.r.t. the probability mask.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: ProbMask<T>,
}

/// Target of a mask loss: hard labels or a (detached) probability mask.
#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a, T> {
    Hard(&'a LabelMask),
    Soft(&'a ProbMask<T>),
}

const PROB_FLOOR: f64 = 1e-8;
/// Smoothing constant of the soft-IoU loss.
pub const IOU_EPS: f64 = 1.0;

fn check_probs_shape<T: Scalar>(
    probs: &ProbMask<T>,
    target: &LossTarget<T>,
    weights: Option<&PixelWeightMask<T>>,
) -> Result<()> {
    let (c, h, w) = probs.dim();
    match target {
        LossTarget::Hard(m) => {
            if m.dim() != (h, w) {
                return Err(Error::shape(format!("{:?}", (h, w)), format!("{:?}", m.dim())));
            }
        }
        LossTarget::Soft(t) => {
            if t.dim() != (c, h, w) {
                return Err(Error::shape(
                    format!("{:?}", (c, h, w)),
                    format!("{:?}", t.dim()),
                ));
            }
        }
    }
    if let Some(wm) = weights {
        if wm.dim() != (h, w) {
            return Err(Error::shape(format!("{:?}", (h, w)), format!("{:?}", wm.dim())));
        }
    }
    Ok(())
}

/// Effective per-pixel weights: the supplied mask (ones when absent) with
/// ignore-labelled pixels zeroed for hard targets.
fn effective_weights<T: Scalar>(
    dims: (usize, usize),
    target: &LossTarget<T>,
    weights: Option<&PixelWeightMask<T>>,
) -> Array2<T> {
    let mut w = match weights {
        Some(m) => m.clone(),
        None => Array2::from_elem(dims, T::one()),
    };
    if let LossTarget::Hard(mask) = target {
        for ((y, x), wv) in w.indexed_iter_mut() {
            if mask[(y, x)] == IGNORE_LABEL {
                *wv = T::zero();
            }
        }
    }
    w
}

fn target_prob<T: Scalar>(target: &LossTarget<T>, k: usize, y: usize, x: usize) -> T {
    match target {
        LossTarget::Hard(m) => {
            if m[(y, x)] as usize == k {
                T::one()
            } else {
                T::zero()
            }
        }
        LossTarget::Soft(t) => t[(k, y, x)],
    }
}

/// Soft Jaccard loss with smoothing: per class `c` present in the target or
/// the prediction argmax, `IoU_c = (Σ p·t + ε) / (Σ p + Σ t − Σ p·t + ε)`
/// with `ε = 1`; the loss is `1 − mean_c IoU_c`. Sums run over pixels with
/// nonzero weight.
pub fn soft_iou_loss<T: Scalar>(
    probs: &ProbMask<T>,
    target: LossTarget<T>,
    weights: Option<&PixelWeightMask<T>>,
) -> Result<LossOutput<T>> {
    check_probs_shape(probs, &target, weights)?;
    let (c, h, w) = probs.dim();
    let wts = effective_weights((h, w), &target, weights);
    if !wts.iter().any(|v| *v > T::zero()) {
        return Err(Error::Empty("all pixel weights are zero".into()));
    }

    let pred_arg = argmax_mask(probs);
    let target_arg = match &target {
        LossTarget::Hard(m) => (*m).clone(),
        LossTarget::Soft(t) => argmax_mask(t),
    };
    let mut present = vec![false; c];
    for ((y, x), wv) in wts.indexed_iter() {
        if *wv <= T::zero() {
            continue;
        }
        present[pred_arg[(y, x)] as usize] = true;
        let t = target_arg[(y, x)];
        if (t as usize) < c {
            present[t as usize] = true;
        }
    }
    let n_present = present.iter().filter(|p| **p).count();
    if n_present == 0 {
        return Err(Error::Empty("no class present".into()));
    }

    let eps = sc::<T>(IOU_EPS);
    let mut inter = vec![T::zero(); c];
    let mut pred_sum = vec![T::zero(); c];
    let mut tgt_sum = vec![T::zero(); c];
    for k in 0..c {
        if !present[k] {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let wv = wts[(y, x)];
                if wv <= T::zero() {
                    continue;
                }
                let p = probs[(k, y, x)];
                let t = target_prob(&target, k, y, x);
                inter[k] += wv * p * t;
                pred_sum[k] += wv * p;
                tgt_sum[k] += wv * t;
            }
        }
    }

    let mut value = T::zero();
    let mut grad = Array3::<T>::zeros((c, h, w));
    let scale = sc::<T>(1.0 / n_present as f64);
    for k in 0..c {
        if !present[k] {
            continue;
        }
        let num = inter[k] + eps;
        let den = pred_sum[k] + tgt_sum[k] - inter[k] + eps;
        value += num / den;
        // d IoU / d p = (w·t·den − num·w·(1 − t)) / den²
        let den2 = den * den;
        for y in 0..h {
            for x in 0..w {
                let wv = wts[(y, x)];
                if wv <= T::zero() {
                    continue;
                }
                let t = target_prob(&target, k, y, x);
                let d_iou = (wv * t * den - num * wv * (T::one() - t)) / den2;
                grad[(k, y, x)] = -scale * d_iou;
            }
        }
    }
    let value = T::one() - value * scale;
    Ok(LossOutput { value, grad })
}

/// Weighted mean cross-entropy: `Σ w · (−Σ_c t_c · ln p_c) / Σ w`.
pub fn ce_loss<T: Scalar>(
    probs: &ProbMask<T>,
    target: LossTarget<T>,
    weights: Option<&PixelWeightMask<T>>,
) -> Result<LossOutput<T>> {
    check_probs_shape(probs, &target, weights)?;
    let (c, h, w) = probs.dim();
    let wts = effective_weights((h, w), &target, weights);
    let total_w: T = wts.iter().copied().sum();
    if total_w <= T::zero() {
        return Err(Error::Empty("all pixel weights are zero".into()));
    }
    let floor = sc::<T>(PROB_FLOOR);
    let mut value = T::zero();
    let mut grad = Array3::<T>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let wv = wts[(y, x)];
            if wv <= T::zero() {
                continue;
            }
            for k in 0..c {
                let t = target_prob(&target, k, y, x);
                if t <= T::zero() {
                    continue;
                }
                let p = probs[(k, y, x)].max(floor);
                value -= wv * t * p.ln();
                if probs[(k, y, x)] > floor {
                    grad[(k, y, x)] -= wv * t / (p * total_w);
                }
            }
        }
    }
    Ok(LossOutput {
        value: value / total_w,
        grad,
    })
}

/// Mean per-pixel prediction entropy `H = −Σ_c p_c · ln p_c`; minimizing it
/// sharpens predictions.
pub fn entropy_loss<T: Scalar>(probs: &ProbMask<T>) -> Result<LossOutput<T>> {
    let (c, h, w) = probs.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Empty("empty probability mask".into()));
    }
    let floor = sc::<T>(PROB_FLOOR);
    let n = sc::<T>((h * w) as f64);
    let mut value = T::zero();
    let mut grad = Array3::<T>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let p = probs[(k, y, x)].max(floor);
                value -= p * p.ln();
                if probs[(k, y, x)] > floor {
                    grad[(k, y, x)] = -(p.ln() + T::one()) / n;
                }
            }
        }
    }
    Ok(LossOutput {
        value: value / n,
        grad,
    })
}

/// Reverse KL divergence `(1/N) Σ_pixels Σ_c q · ln(q/p)`.
///
/// The gradient flows into `p` only; `q` is treated as a constant. Zero iff
/// `p = q` pixel-wise.
pub fn reverse_kl<T: Scalar>(p: &ProbMask<T>, q: &ProbMask<T>) -> Result<LossOutput<T>> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!("{:?}", q.dim()), format!("{:?}", p.dim())));
    }
    let (c, h, w) = p.dim();
    let floor = sc::<T>(PROB_FLOOR);
    let n = sc::<T>((h * w) as f64);
    let mut value = T::zero();
    let mut grad = Array3::<T>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let qv = q[(k, y, x)];
                if qv <= T::zero() {
                    continue;
                }
                let pv = p[(k, y, x)].max(floor);
                value += qv * (qv.ln() - pv.ln());
                if p[(k, y, x)] > floor {
                    grad[(k, y, x)] = -qv / (pv * n);
                }
            }
        }
    }
    Ok(LossOutput {
        value: value / n,
        grad,
    })
}

/// Count of classes used by the soft-IoU class mean; exposed for tests.
pub fn iou_present_classes<T: Scalar>(probs: &ProbMask<T>, target: LossTarget<T>) -> Vec<usize> {
    let (c, h, w) = probs.dim();
    let pred_arg = argmax_mask(probs);
    let target_arg = match &target {
        LossTarget::Hard(m) => (*m).clone(),
        LossTarget::Soft(t) => argmax_mask(t),
    };
    let wts = effective_weights((h, w), &target, None);
    let mut present = vec![false; c];
    for ((y, x), wv) in wts.indexed_iter() {
        if *wv <= T::zero() {
            continue;
        }
        present[pred_arg[(y, x)] as usize] = true;
        let t = target_arg[(y, x)];
        if (t as usize) < c {
            present[t as usize] = true;
        }
    }
    (0..c).filter(|&k| present[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_probs(c: usize, h: usize, w: usize) -> ProbMask<f64> {
        Array3::from_elem((c, h, w), 1.0 / c as f64)
    }

    /// Random probabilities kept away from argmax ties so finite differences
    /// stay on one smooth branch of the soft-IoU loss.
    fn random_probs(seed: u64, c: usize, h: usize, w: usize) -> ProbMask<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                loop {
                    let mut v: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|p| *p /= s);
                    let mut sorted = v.clone();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if sorted[0] - sorted[1] > 1e-3 {
                        for k in 0..c {
                            out[(k, y, x)] = v[k];
                        }
                        break;
                    }
                }
            }
        }
        out
    }

    fn random_labels(seed: u64, c: usize, h: usize, w: usize) -> LabelMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0..c as u8))
    }

    fn finite_diff<F>(probs: &ProbMask<f64>, f: F) -> Array3<f64>
    where
        F: Fn(&ProbMask<f64>) -> f64,
    {
        let step = 1e-4;
        let mut grad = Array3::<f64>::zeros(probs.dim());
        let (c, h, w) = probs.dim();
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut plus = probs.clone();
                    plus[(k, y, x)] += step;
                    let mut minus = probs.clone();
                    minus[(k, y, x)] -= step;
                    grad[(k, y, x)] = (f(&plus) - f(&minus)) / (2.0 * step);
                }
            }
        }
        grad
    }

    fn assert_grad_close(analytic: &Array3<f64>, numeric: &Array3<f64>) {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() / scale < 1e-4,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn soft_iou_zero_for_perfect_onehot() {
        let target = array![[0u8, 1], [1, 0]];
        let mut probs = Array3::<f64>::zeros((2, 2, 2));
        for ((y, x), t) in target.indexed_iter() {
            probs[(*t as usize, y, x)] = 1.0;
        }
        let out = soft_iou_loss(&probs, LossTarget::Hard(&target), None).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn soft_iou_disjoint_masks_near_one() {
        let n = 64usize;
        let target = Array2::<u8>::zeros((8, 8)); // all class 0
        let mut probs = Array3::<f64>::zeros((2, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                probs[(1, y, x)] = 1.0; // predicts class 1 everywhere
            }
        }
        let out = soft_iou_loss(&probs, LossTarget::Hard(&target), None).unwrap();
        // both present classes have IoU eps/(n+eps)
        let expected = 1.0 - IOU_EPS / (n as f64 + IOU_EPS);
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_iou_single_pixel_hand_value() {
        // p = (0.5, 0.5), t = one-hot class 0. The argmax tie resolves to
        // class 0, so only class 0 enters the mean:
        // IoU_0 = (0.5 + 1) / (0.5 + 1 - 0.5 + 1) = 0.75 -> loss 0.25.
        let target = array![[0u8]];
        let probs: ProbMask<f64> = array![[[0.5]], [[0.5]]];
        let out = soft_iou_loss(&probs, LossTarget::Hard(&target), None).unwrap();
        assert_eq!(iou_present_classes(&probs, LossTarget::Hard(&target)), vec![0]);
        assert!((out.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ce_zero_when_target_probability_is_one() {
        let target = array![[1u8]];
        let probs: ProbMask<f64> = array![[[0.0]], [[1.0]]];
        let out = ce_loss(&probs, LossTarget::Hard(&target), None).unwrap();
        assert!(out.value.abs() < 1e-9);
    }

    #[test]
    fn ce_half_probability_is_ln2() {
        let target = array![[0u8, 0]];
        let probs: ProbMask<f64> = array![[[0.5, 0.5]], [[0.5, 0.5]]];
        let out = ce_loss(&probs, LossTarget::Hard(&target), None).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_weighted_mean_hand_case() {
        // p(target) = (0.5, 0.25) with weights (1, 0) -> ln 2
        let target = array![[0u8, 0]];
        let probs: ProbMask<f64> = array![[[0.5, 0.25]], [[0.5, 0.75]]];
        let weights = array![[1.0, 0.0]];
        let out = ce_loss(&probs, LossTarget::Hard(&target), Some(&weights)).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_zero_for_onehot_and_ln_c_for_uniform() {
        let onehot: ProbMask<f64> = array![[[1.0]], [[0.0]]];
        assert!(entropy_loss(&onehot).unwrap().value < 1e-6);
        let uni = uniform_probs(19, 2, 2);
        let out = entropy_loss(&uni).unwrap();
        assert!((out.value - (19.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_single_pixel_hand_value() {
        let probs: ProbMask<f64> = array![[[0.9]], [[0.1]]];
        let out = entropy_loss(&probs).unwrap();
        assert!((out.value - 0.32508297339144845).abs() < 1e-12);
    }

    #[test]
    fn reverse_kl_zero_iff_equal_and_asymmetric() {
        let p: ProbMask<f64> = array![[[0.7]], [[0.3]]];
        let q: ProbMask<f64> = array![[[0.5]], [[0.5]]];
        assert!(reverse_kl(&p, &p).unwrap().value.abs() < 1e-12);
        let ab = reverse_kl(&p, &q).unwrap().value;
        let ba = reverse_kl(&q, &p).unwrap().value;
        assert!((ab - 0.08717669357238891).abs() < 1e-12);
        assert!((ba - 0.08228287850505178).abs() < 1e-12);
        assert!(ab > 0.0 && ba > 0.0 && (ab - ba).abs() > 1e-4);
    }

    #[test]
    fn reverse_kl_onehot_q_collapses_to_neg_log() {
        let p: ProbMask<f64> = array![[[0.25]], [[0.75]]];
        let q: ProbMask<f64> = array![[[1.0]], [[0.0]]];
        let out = reverse_kl(&p, &q).unwrap();
        assert!((out.value - (-(0.25f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 50 random 4x4, C=3 cases across all four losses
        for case in 0..50 {
            let probs = random_probs(1000 + case, 3, 4, 4);
            let labels = random_labels(2000 + case, 3, 4, 4);
            let q = random_probs(3000 + case, 3, 4, 4);

            let out = soft_iou_loss(&probs, LossTarget::Hard(&labels), None).unwrap();
            let fd = finite_diff(&probs, |p| {
                soft_iou_loss(p, LossTarget::Hard(&labels), None).unwrap().value
            });
            assert_grad_close(&out.grad, &fd);

            let out = ce_loss(&probs, LossTarget::Hard(&labels), None).unwrap();
            let fd = finite_diff(&probs, |p| {
                ce_loss(p, LossTarget::Hard(&labels), None).unwrap().value
            });
            assert_grad_close(&out.grad, &fd);

            let out = entropy_loss(&probs).unwrap();
            let fd = finite_diff(&probs, |p| entropy_loss(p).unwrap().value);
            assert_grad_close(&out.grad, &fd);

            let out = reverse_kl(&probs, &q).unwrap();
            let fd = finite_diff(&probs, |p| reverse_kl(p, &q).unwrap().value);
            assert_grad_close(&out.grad, &fd);
        }
    }

    #[test]
    fn zero_weight_zeroes_the_gradient_exactly() {
        let probs = random_probs(7, 3, 4, 4);
        let labels = random_labels(8, 3, 4, 4);
        let mut weights = Array2::<f64>::ones((4, 4));
        weights[(1, 2)] = 0.0;
        for loss in [soft_iou_loss::<f64>, ce_loss::<f64>] {
            let out = loss(&probs, LossTarget::Hard(&labels), Some(&weights)).unwrap();
            for k in 0..3 {
                assert_eq!(out.grad[(k, 1, 2)], 0.0);
            }
        }
    }

    #[test]
    fn all_zero_weights_error() {
        let probs = uniform_probs(2, 2, 2);
        let labels = Array2::<u8>::zeros((2, 2));
        let weights = Array2::<f64>::zeros((2, 2));
        assert!(soft_iou_loss(&probs, LossTarget::Hard(&labels), Some(&weights)).is_err());
        assert!(ce_loss(&probs, LossTarget::Hard(&labels), Some(&weights)).is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let probs = uniform_probs(2, 2, 2);
        let labels = Array2::<u8>::zeros((3, 2));
        assert!(ce_loss(&probs, LossTarget::Hard(&labels), None).is_err());
        let q = uniform_probs(2, 3, 2);
        assert!(reverse_kl(&probs, &q).is_err());
    }
}
