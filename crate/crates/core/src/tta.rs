//! The six single-image adaptation methods and the orchestrator that runs
//! them under the restart contract: start from the pretrained snapshot, take
//! at most ten plain SGD steps on the scoped parameters, record every
//! intermediate mask, and restore the snapshot before returning.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{select_params, snapshot_weights, restore_weights, ParamScope, SegmentationModel};
use crate::attacks::fgsm_step;
use crate::auxnets::{refine, IoUEstimator, Refiner};
use crate::error::{Error, Result};
use crate::image::{
    argmax_mask, mean_entropy, softmax, softmax_backward, ImagePlane, LabelMask, ProbMask,
    IGNORE_LABEL,
};
use crate::losses::{ce_loss, entropy_loss, reverse_kl, soft_iou_loss, LossTarget, PixelWeightMask};
use crate::metrics::{confusion_counts, miou_i_single};
use crate::nn::sgd_step;
use crate::scalar::{sc, Scalar};

/// Maximum adaptation iterations per image.
pub const MAX_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ent,
    Pl,
    AugCo,
    Adv,
    Ref,
    Diou,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ent,
        Method::Pl,
        Method::AugCo,
        Method::Adv,
        Method::Ref,
        Method::Diou,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ent => "ent",
            Method::Pl => "pl",
            Method::AugCo => "augco",
            Method::Adv => "adv",
            Method::Ref => "ref",
            Method::Diou => "diou",
        }
    }

    /// Loss kinds a method can optimize.
    pub fn valid_losses(&self) -> &'static [LossKind] {
        match self {
            Method::Ent => &[LossKind::Ent],
            Method::Adv => &[LossKind::Kl],
            Method::Diou => &[LossKind::None],
            Method::Pl | Method::AugCo | Method::Ref => &[LossKind::Ce, LossKind::Iou],
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown method: {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Iou,
    Ent,
    Kl,
    None,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Iou => "iou",
            LossKind::Ent => "ent",
            LossKind::Kl => "kl",
            LossKind::None => "-",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "iou" => Ok(LossKind::Iou),
            "ent" => Ok(LossKind::Ent),
            "kl" => Ok(LossKind::Kl),
            "-" | "none" => Ok(LossKind::None),
            other => Err(Error::invalid(format!("unknown loss kind: {other}"))),
        }
    }
}

/// Knobs of the augmentation-consistency method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugCoParams {
    /// Crop area fraction range of the original image.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Confidence threshold on the augmented view.
    pub tau_conf: f64,
    /// Brightness/contrast/saturation jitter amplitude.
    pub jitter: f64,
}

impl Default for AugCoParams {
    fn default() -> Self {
        AugCoParams {
            crop_min: 0.25,
            crop_max: 0.50,
            tau_conf: 0.8,
            jitter: 0.2,
        }
    }
}

/// One adaptation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTAConfig {
    pub method: Method,
    pub loss: LossKind,
    pub scope: ParamScope,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub augco: AugCoParams,
    /// FGSM step of the adversarial-invariance method.
    #[serde(default = "default_adv_step")]
    pub adv_step: f64,
    /// Pseudo-label confidence threshold (0 keeps every pixel).
    #[serde(default)]
    pub pl_threshold: f64,
}

fn default_adv_step() -> f64 {
    1.0 / 255.0
}

impl TTAConfig {
    pub fn new(method: Method, loss: LossKind, scope: ParamScope, lr: f64, iterations: usize) -> Self {
        TTAConfig {
            method,
            loss,
            scope,
            lr,
            iterations,
            seed: 0,
            augco: AugCoParams::default(),
            adv_step: default_adv_step(),
            pl_threshold: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations > MAX_ITERATIONS {
            return Err(Error::invalid(format!(
                "iterations {} exceed the budget of {MAX_ITERATIONS}",
                self.iterations
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("invalid learning rate {}", self.lr)));
        }
        if !self.method.valid_losses().contains(&self.loss) {
            return Err(Error::invalid(format!(
                "loss {} is not valid for method {}",
                self.loss, self.method
            )));
        }
        Ok(())
    }

    /// Stable identifier used by result stores and resume logic.
    pub fn key(&self) -> String {
        format!(
            "{}-{}-{}-lr{}-it{}",
            self.method, self.loss, self.scope, self.lr, self.iterations
        )
    }
}

/// Auxiliary networks a method may need.
#[derive(Debug, Clone, Default)]
pub struct Auxiliaries<T> {
    pub refiner: Option<Refiner<T>>,
    pub diou: Option<IoUEstimator<T>>,
}

impl<T> Auxiliaries<T> {
    pub fn none() -> Self {
        Auxiliaries {
            refiner: None,
            diou: None,
        }
    }
}

/// Reliability mask of the augmentation-consistency method: a pixel counts
/// iff the two views agree on the argmax class OR the augmented view is
/// confident (max probability at or above `tau_conf`).
pub fn augco_reliability<T: Scalar>(
    view1: &ProbMask<T>,
    view2: &ProbMask<T>,
    tau_conf: f64,
) -> Result<PixelWeightMask<T>> {
    if view1.dim() != view2.dim() {
        return Err(Error::shape(
            format!("{:?}", view1.dim()),
            format!("{:?}", view2.dim()),
        ));
    }
    let (c, h, w) = view1.dim();
    let a1 = argmax_mask(view1);
    let a2 = argmax_mask(view2);
    let tau = sc::<T>(tau_conf);
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let consistent = a1[(y, x)] == a2[(y, x)];
            let mut maxp = view2[(0, y, x)];
            for k in 1..c {
                maxp = maxp.max(view2[(k, y, x)]);
            }
            if consistent || maxp >= tau {
                out[(y, x)] = T::one();
            }
        }
    }
    Ok(out)
}

/// Crop rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct CropRect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

fn sample_crop(rng: &mut ChaCha8Rng, h: usize, w: usize, params: &AugCoParams) -> CropRect {
    let frac = rng.random_range(params.crop_min..params.crop_max);
    let scale = frac.sqrt();
    let ch = ((h as f64 * scale).round() as usize).clamp(2, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(2, w);
    let y0 = rng.random_range(0..=(h - ch));
    let x0 = rng.random_range(0..=(w - cw));
    CropRect { y0, x0, h: ch, w: cw }
}

fn crop_resize_probs<T: Scalar>(probs: &ProbMask<T>, rect: CropRect, oh: usize, ow: usize) -> ProbMask<T> {
    let (c, _, _) = probs.dim();
    ndarray::Array3::from_shape_fn((c, oh, ow), |(k, y, x)| {
        let sy = rect.y0 + y * rect.h / oh;
        let sx = rect.x0 + x * rect.w / ow;
        probs[(k, sy, sx)]
    })
}

fn crop_resize_image<T: Scalar>(image: &ImagePlane<T>, rect: CropRect, oh: usize, ow: usize) -> ImagePlane<T> {
    ndarray::Array3::from_shape_fn((oh, ow, 3), |(y, x, ch)| {
        let sy = rect.y0 + y * rect.h / oh;
        let sx = rect.x0 + x * rect.w / ow;
        image[(sy, sx, ch)]
    })
}

/// Brightness, contrast, and saturation each perturbed uniformly in
/// `[-amount, amount]`; output clipped to `[0,1]`.
fn jitter_image<T: Scalar>(image: &ImagePlane<T>, rng: &mut ChaCha8Rng, amount: f64) -> ImagePlane<T> {
    let db = sc::<T>(rng.random_range(-amount..amount));
    let dc = sc::<T>(1.0 + rng.random_range(-amount..amount));
    let ds = sc::<T>(1.0 + rng.random_range(-amount..amount));
    let n = sc::<T>(image.len() as f64);
    let mean: T = image.iter().copied().sum::<T>() / n;
    let third = sc::<T>(1.0 / 3.0);
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let gray = (image[(y, x, 0)] + image[(y, x, 1)] + image[(y, x, 2)]) * third;
            for ch in 0..3 {
                let v = image[(y, x, ch)];
                let v = gray + ds * (v - gray);
                let v = mean + dc * (v - mean);
                let v = v + db;
                out[(y, x, ch)] = v.max(T::zero()).min(T::one());
            }
        }
    }
    out
}

/// Per-iteration state the objective computation needs.
pub struct ObjectiveContext<'a, T: Scalar> {
    pub aux: &'a mut Auxiliaries<T>,
    pub rng: &'a mut ChaCha8Rng,
}

fn finite_logits<T: Scalar>(logits: crate::image::LogitMask<T>) -> Result<crate::image::LogitMask<T>> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(logits)
    } else {
        Err(Error::NonFinite("model logits".to_string()))
    }
}

/// Evaluate one method's self-supervised objective at the model's current
/// weights and leave the parameter gradients in the model. Pseudo-targets
/// (argmax masks, refined masks, perturbed predictions) carry no gradient.
pub fn compute_objective<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    image: &ImagePlane<T>,
    cfg: &TTAConfig,
    ctx: &mut ObjectiveContext<T>,
) -> Result<f64> {
    cfg.validate()?;
    model.zero_grad();
    match cfg.method {
        Method::Ent => {
            let logits = finite_logits(model.forward_for_grad(image)?)?;
            let probs = softmax(&logits);
            let loss = entropy_loss(&probs)?;
            let grad_logits = softmax_backward(&probs, &loss.grad);
            model.backward(&grad_logits)?;
            Ok(loss.value.to_f64().unwrap())
        }
        Method::Pl => {
            let logits = finite_logits(model.forward_for_grad(image)?)?;
            let probs = softmax(&logits);
            let pseudo = argmax_mask(&probs);
            let weights = pl_confidence_weights(&probs, cfg.pl_threshold);
            let loss = mask_loss(cfg.loss, &probs, LossTarget::Hard(&pseudo), weights.as_ref())?;
            match loss {
                Some(loss) => {
                    let grad_logits = softmax_backward(&probs, &loss.grad);
                    model.backward(&grad_logits)?;
                    Ok(loss.value.to_f64().unwrap())
                }
                None => Ok(0.0),
            }
        }
        Method::Ref => {
            let refiner = ctx
                .aux
                .refiner
                .as_mut()
                .ok_or(Error::MissingAuxiliary("mask refiner"))?;
            let logits = finite_logits(model.forward_for_grad(image)?)?;
            let probs = softmax(&logits);
            let refined = refine(refiner, &logits)?;
            let pseudo = argmax_mask(&refined);
            let loss = mask_loss(cfg.loss, &probs, LossTarget::Hard(&pseudo), None)?;
            match loss {
                Some(loss) => {
                    let grad_logits = softmax_backward(&probs, &loss.grad);
                    model.backward(&grad_logits)?;
                    Ok(loss.value.to_f64().unwrap())
                }
                None => Ok(0.0),
            }
        }
        Method::Diou => {
            let estimator = ctx
                .aux
                .diou
                .as_mut()
                .ok_or(Error::MissingAuxiliary("IoU estimator"))?;
            let logits = finite_logits(model.forward_for_grad(image)?)?;
            let pred = estimator.forward(&logits, true)?;
            let grad_logits = estimator.backward(T::one())?;
            estimator.zero_grad();
            model.backward(&grad_logits)?;
            Ok(pred.to_f64().unwrap())
        }
        Method::Adv => {
            let clean_logits = finite_logits(model.forward(image)?)?;
            let clean_probs = softmax(&clean_logits);
            let attack_target = crate::attacks::inverted_target(&clean_probs)?;
            let perturbed = fgsm_step(model, image, &attack_target, cfg.adv_step)?;
            let q = softmax(&model.forward(&perturbed)?);
            model.zero_grad();
            let logits = finite_logits(model.forward_for_grad(image)?)?;
            let p = softmax(&logits);
            let loss = reverse_kl(&p, &q)?;
            let grad_logits = softmax_backward(&p, &loss.grad);
            model.backward(&grad_logits)?;
            Ok(loss.value.to_f64().unwrap())
        }
        Method::AugCo => {
            let (h, w, _) = image.dim();
            let full_logits = model.forward(image)?;
            let full_probs = softmax(&full_logits);
            let rect = sample_crop(ctx.rng, h, w, &cfg.augco);
            let view1 = crop_resize_probs(&full_probs, rect, h, w);
            let jittered = jitter_image(image, ctx.rng, cfg.augco.jitter);
            let view2_image = crop_resize_image(&jittered, rect, h, w);
            let v2_logits = finite_logits(model.forward_for_grad(&view2_image)?)?;
            let v2_probs = softmax(&v2_logits);
            let reliable = augco_reliability(&view1, &v2_probs, cfg.augco.tau_conf)?;
            let pseudo = argmax_mask(&v2_probs);
            let loss = mask_loss(cfg.loss, &v2_probs, LossTarget::Hard(&pseudo), Some(&reliable))?;
            match loss {
                Some(loss) => {
                    let grad_logits = softmax_backward(&v2_probs, &loss.grad);
                    model.backward(&grad_logits)?;
                    Ok(loss.value.to_f64().unwrap())
                }
                None => Ok(0.0),
            }
        }
    }
}

/// CE/IoU dispatch; `Ok(None)` when no pixel carries weight (no update).
fn mask_loss<T: Scalar>(
    loss: LossKind,
    probs: &ProbMask<T>,
    target: LossTarget<T>,
    weights: Option<&PixelWeightMask<T>>,
) -> Result<Option<crate::losses::LossOutput<T>>> {
    let out = match loss {
        LossKind::Ce => ce_loss(probs, target, weights),
        LossKind::Iou => soft_iou_loss(probs, target, weights),
        other => return Err(Error::invalid(format!("{other} is not a mask loss"))),
    };
    match out {
        Ok(v) => Ok(Some(v)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn pl_confidence_weights<T: Scalar>(probs: &ProbMask<T>, threshold: f64) -> Option<PixelWeightMask<T>> {
    if threshold <= 0.0 {
        return None;
    }
    let (c, h, w) = probs.dim();
    let tau = sc::<T>(threshold);
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxp = probs[(0, y, x)];
            for k in 1..c {
                maxp = maxp.max(probs[(k, y, x)]);
            }
            if maxp >= tau {
                out[(y, x)] = T::one();
            }
        }
    }
    Some(out)
}

/// Full per-image adaptation trace. Index 0 of the per-iteration vectors is
/// the non-adapted state; masks holds exactly `iterations + 1` snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub image_id: String,
    pub config_key: String,
    pub config: TTAConfig,
    pub na_entropy: f64,
    pub na_miou_i: Option<f64>,
    /// Objective value at each step, evaluated before the update.
    pub objectives: Vec<f64>,
    pub entropies: Vec<f64>,
    pub miou_i: Vec<Option<f64>>,
    pub diverged: bool,
    pub wall_ms: u64,
    #[serde(skip)]
    pub masks: Vec<LabelMask>,
}

impl AdaptationRecord {
    pub fn final_miou_i(&self) -> Option<f64> {
        if self.diverged {
            self.na_miou_i
        } else {
            self.miou_i.last().copied().flatten()
        }
    }

    pub fn final_entropy(&self) -> f64 {
        if self.diverged {
            self.na_entropy
        } else {
            *self.entropies.last().unwrap_or(&self.na_entropy)
        }
    }
}

/// Adapt the model to one image: `cfg.iterations` plain SGD steps on the
/// scoped parameters, mask and metrics recorded after every step, and the
/// pretrained snapshot restored before returning (also on divergence). A
/// non-finite objective aborts the adaptation and flags the record.
pub fn adapt_single_image<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    image_id: &str,
    image: &ImagePlane<T>,
    gt: Option<&LabelMask>,
    cfg: &TTAConfig,
    aux: &mut Auxiliaries<T>,
) -> Result<AdaptationRecord> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let scope = select_params(model, cfg.scope)?;
    let snapshot = snapshot_weights(model);
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ crate::corruptions::fnv1a64(image_id.as_bytes()),
    );

    let na = observe(model, image, gt)?;
    let mut record = AdaptationRecord {
        image_id: image_id.to_string(),
        config_key: cfg.key(),
        config: cfg.clone(),
        na_entropy: na.entropy,
        na_miou_i: na.miou_i,
        objectives: Vec::new(),
        entropies: vec![na.entropy],
        miou_i: vec![na.miou_i],
        diverged: false,
        wall_ms: 0,
        masks: vec![na.mask],
    };

    for _step in 1..=cfg.iterations {
        let mut ctx = ObjectiveContext {
            aux,
            rng: &mut rng,
        };
        let objective = match compute_objective(model, image, cfg, &mut ctx) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => {
                restore_weights(model, &snapshot)?;
                return Err(e);
            }
        };
        if !objective.is_finite() {
            restore_weights(model, &snapshot)?;
            model.zero_grad();
            record.diverged = true;
            record.wall_ms = start.elapsed().as_millis() as u64;
            return Ok(record);
        }
        record.objectives.push(objective);
        {
            let mut params = model.params_mut();
            sgd_step(&mut params, &scope, cfg.lr);
        }
        model.zero_grad();
        let state = observe(model, image, gt)?;
        record.entropies.push(state.entropy);
        record.miou_i.push(state.miou_i);
        record.masks.push(state.mask);
    }

    restore_weights(model, &snapshot)?;
    record.wall_ms = start.elapsed().as_millis() as u64;
    Ok(record)
}

struct Observation {
    mask: LabelMask,
    entropy: f64,
    miou_i: Option<f64>,
}

fn observe<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    image: &ImagePlane<T>,
    gt: Option<&LabelMask>,
) -> Result<Observation> {
    let logits = model.forward(image)?;
    let probs = softmax(&logits);
    let mask = argmax_mask(&probs);
    let entropy = mean_entropy(&probs);
    let miou_i = match gt {
        Some(gt) => {
            let counts = confusion_counts(&mask, gt, model.num_classes(), IGNORE_LABEL)?;
            miou_i_single(&counts)
        }
        None => None,
    };
    Ok(Observation {
        mask,
        entropy,
        miou_i,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::weight_hash;
    use crate::nn::{Mode, Param};
    use crate::testbed::ToySegmenter;
    use ndarray::{array, Array3};

    /// Test double emitting fixed logits; one dummy trainable parameter.
    struct FixedLogitModel {
        logits: crate::image::LogitMask<f64>,
        params: Vec<Param<f64>>,
    }

    impl FixedLogitModel {
        fn new(logits: crate::image::LogitMask<f64>) -> Self {
            FixedLogitModel {
                logits,
                params: vec![Param::new("dummy", vec![1], vec![0.0], false)],
            }
        }
    }

    impl SegmentationModel<f64> for FixedLogitModel {
        fn arch_id(&self) -> &'static str {
            "fixed"
        }
        fn num_classes(&self) -> usize {
            self.logits.dim().0
        }
        fn mode(&self) -> Mode {
            Mode::Eval
        }
        fn set_mode(&mut self, _mode: Mode) {}
        fn forward(&mut self, _image: &ImagePlane<f64>) -> Result<crate::image::LogitMask<f64>> {
            Ok(self.logits.clone())
        }
        fn forward_for_grad(&mut self, image: &ImagePlane<f64>) -> Result<crate::image::LogitMask<f64>> {
            self.forward(image)
        }
        fn backward(&mut self, _grad: &crate::image::LogitMask<f64>) -> Result<ImagePlane<f64>> {
            let (_, h, w) = self.logits.dim();
            Ok(Array3::zeros((h, w, 3)))
        }
        fn zero_grad(&mut self) {}
        fn params(&self) -> Vec<&Param<f64>> {
            self.params.iter().collect()
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
            self.params.iter_mut().collect()
        }
        fn clone_model(&self) -> Box<dyn SegmentationModel<f64>> {
            Box::new(FixedLogitModel {
                logits: self.logits.clone(),
                params: self.params.clone(),
            })
        }
        fn save_checkpoint(&self, _path: &std::path::Path) -> Result<()> {
            Ok(())
        }
    }

    fn toy_image(seed: u64, s: usize) -> ImagePlane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((s, s, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn config_validation_rules() {
        assert!(TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::Full, 1e-3, 10)
            .validate()
            .is_ok());
        assert!(TTAConfig::new(Method::Ent, LossKind::Ce, ParamScope::Full, 1e-3, 10)
            .validate()
            .is_err());
        assert!(TTAConfig::new(Method::Pl, LossKind::Iou, ParamScope::Full, 1e-3, 11)
            .validate()
            .is_err());
        assert!(TTAConfig::new(Method::Adv, LossKind::Kl, ParamScope::NormAffine, 1e-3, 5)
            .validate()
            .is_ok());
        assert!(TTAConfig::new(Method::Diou, LossKind::None, ParamScope::Full, 1e-3, 5)
            .validate()
            .is_ok());
    }

    #[test]
    fn augco_reliability_rules() {
        // identical confident views: everything reliable
        let v: ProbMask<f64> = array![[[0.9, 0.9]], [[0.1, 0.1]]];
        let r = augco_reliability(&v, &v, 0.8).unwrap();
        assert!(r.iter().all(|x| *x == 1.0));

        // disagreeing and unconfident: nothing reliable
        let v1: ProbMask<f64> = array![[[0.6]], [[0.4]]];
        let v2: ProbMask<f64> = array![[[0.4]], [[0.6]]];
        let r = augco_reliability(&v1, &v2, 0.8).unwrap();
        assert!(r.iter().all(|x| *x == 0.0));

        // disagreeing but confident view2: reliable by the OR rule
        let v2c: ProbMask<f64> = array![[[0.1]], [[0.9]]];
        let r = augco_reliability(&v1, &v2c, 0.8).unwrap();
        assert!(r.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn entropy_objective_is_zero_for_onehot_model() {
        // huge-margin logits make the softmax numerically one-hot
        let mut logits = Array3::<f64>::zeros((3, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                logits[(0, y, x)] = 60.0;
            }
        }
        let mut model = FixedLogitModel::new(logits);
        let cfg = TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::Full, 1e-3, 1);
        let mut aux = Auxiliaries::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ObjectiveContext {
            aux: &mut aux,
            rng: &mut rng,
        };
        let image = toy_image(0, 2);
        let obj = compute_objective(&mut model, &image, &cfg, &mut ctx).unwrap();
        // the 1e-8 probability floor leaves a ~4e-7 residual
        assert!(obj.abs() < 1e-6);
    }

    #[test]
    fn pl_iou_single_pixel_tie_case() {
        // logits (0, 0) -> probs (0.5, 0.5); pseudo-label = class 0 by the
        // tie rule; only class 0 is present, so the objective is
        // 1 - (0.5 + 1)/(0.5 + 1 - 0.5 + 1) = 0.25
        let logits = Array3::<f64>::zeros((2, 1, 1));
        let mut model = FixedLogitModel::new(logits);
        let cfg = TTAConfig::new(Method::Pl, LossKind::Iou, ParamScope::Full, 1e-3, 1);
        let mut aux = Auxiliaries::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ObjectiveContext {
            aux: &mut aux,
            rng: &mut rng,
        };
        let image = toy_image(1, 2);
        let obj = compute_objective(&mut model, &image, &cfg, &mut ctx).unwrap();
        assert!((obj - 0.25).abs() < 1e-12);
    }

    #[test]
    fn adv_with_zero_step_gives_zero_objective() {
        let mut model = ToySegmenter::<f64>::new(3, 3);
        let mut cfg = TTAConfig::new(Method::Adv, LossKind::Kl, ParamScope::Full, 1e-3, 1);
        cfg.adv_step = 0.0;
        let mut aux = Auxiliaries::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ObjectiveContext {
            aux: &mut aux,
            rng: &mut rng,
        };
        let image = toy_image(2, 8);
        let obj = compute_objective(&mut model, &image, &cfg, &mut ctx).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn ref_objective_reduces_to_pl_on_refiner_argmax() {
        let mut model = ToySegmenter::<f64>::new(4, 5);
        let image = toy_image(3, 8);
        let mut refiner = Refiner::<f64>::new(4, 9);
        let logits = model.forward(&image).unwrap();
        let refined = refine(&mut refiner, &logits).unwrap();
        let pseudo = argmax_mask(&refined);
        let probs = softmax(&logits);
        let direct = soft_iou_loss(&probs, LossTarget::Hard(&pseudo), None)
            .unwrap()
            .value;

        let cfg = TTAConfig::new(Method::Ref, LossKind::Iou, ParamScope::Full, 1e-3, 1);
        let mut aux = Auxiliaries {
            refiner: Some(refiner),
            diou: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ObjectiveContext {
            aux: &mut aux,
            rng: &mut rng,
        };
        let obj = compute_objective(&mut model, &image, &cfg, &mut ctx).unwrap();
        assert!((obj - direct).abs() < 1e-12);
    }

    #[test]
    fn missing_auxiliary_errors() {
        let mut model = ToySegmenter::<f64>::new(3, 2);
        let image = toy_image(4, 8);
        let mut aux = Auxiliaries::none();
        for cfg in [
            TTAConfig::new(Method::Ref, LossKind::Iou, ParamScope::Full, 1e-3, 1),
            TTAConfig::new(Method::Diou, LossKind::None, ParamScope::Full, 1e-3, 1),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ObjectiveContext {
                aux: &mut aux,
                rng: &mut rng,
            };
            assert!(matches!(
                compute_objective(&mut model, &image, &cfg, &mut ctx),
                Err(Error::MissingAuxiliary(_))
            ));
        }
    }

    #[test]
    fn zero_iterations_and_zero_lr_leave_everything_unchanged() {
        let mut model = ToySegmenter::<f64>::new(3, 7);
        let image = toy_image(5, 8);
        let h0 = weight_hash(&model);
        let mut aux = Auxiliaries::none();

        let cfg = TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::Full, 1e-3, 0);
        let rec = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        assert_eq!(rec.masks.len(), 1);
        assert_eq!(weight_hash(&model), h0);

        let cfg = TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::Full, 0.0, 4);
        let rec_lr0 = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        assert_eq!(rec_lr0.masks.len(), 5);
        assert_eq!(weight_hash(&model), h0);
        for m in &rec_lr0.masks {
            assert_eq!(m, &rec.masks[0]);
        }
        assert_eq!(rec_lr0.final_entropy(), rec.na_entropy);
    }

    #[test]
    fn record_structure_and_restart_invariant() {
        let mut model = ToySegmenter::<f64>::new(3, 8);
        let image = toy_image(6, 8);
        let h0 = weight_hash(&model);
        let mut aux = Auxiliaries::none();
        let cfg = TTAConfig::new(Method::Pl, LossKind::Iou, ParamScope::Full, 1e-3, 3);
        let rec = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        assert_eq!(rec.masks.len(), 4);
        assert_eq!(rec.entropies.len(), 4);
        assert_eq!(rec.objectives.len(), 3);
        assert_eq!(rec.entropies[0], rec.na_entropy);
        assert_eq!(weight_hash(&model), h0);
        assert!(!rec.diverged);
    }

    #[test]
    fn norm_scope_freezes_all_other_params() {
        let mut model = ToySegmenter::<f64>::new(3, 9);
        let image = toy_image(7, 8);
        let snapshot: Vec<Vec<f64>> = model.params().iter().map(|p| p.data.clone()).collect();
        let scope = select_params(&model, ParamScope::NormAffine).unwrap();
        let cfg = TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::NormAffine, 1e-2, 1);
        let mut aux = Auxiliaries::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ObjectiveContext {
            aux: &mut aux,
            rng: &mut rng,
        };
        compute_objective(&mut model, &image, &cfg, &mut ctx).unwrap();
        {
            let mut params = model.params_mut();
            sgd_step(&mut params, &scope, cfg.lr);
        }
        for (i, p) in model.params().iter().enumerate() {
            if scope.contains(&i) {
                continue;
            }
            assert_eq!(p.data, snapshot[i], "non-norm param {} moved", p.name);
        }
    }

    #[test]
    fn divergence_aborts_restores_and_flags() {
        let mut model = ToySegmenter::<f32>::new(3, 10);
        let image = toy_image(8, 8).mapv(|v| v as f32);
        let h0 = weight_hash(&model);
        let mut aux = Auxiliaries::none();
        // an absurd learning rate overflows f32 logits within a few steps
        let cfg = TTAConfig::new(Method::Ent, LossKind::Ent, ParamScope::Full, 1e18, 10);
        let rec = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        assert!(rec.diverged);
        assert_eq!(rec.final_entropy(), rec.na_entropy);
        assert_eq!(weight_hash(&model), h0);
    }

    #[test]
    fn adaptation_is_deterministic_given_seed() {
        let mut model = ToySegmenter::<f64>::new(3, 11);
        let image = toy_image(9, 8);
        let mut aux = Auxiliaries::none();
        let mut cfg = TTAConfig::new(Method::AugCo, LossKind::Ce, ParamScope::NormAffine, 1e-3, 3);
        cfg.seed = 42;
        let rec1 = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        let rec2 = adapt_single_image(&mut model, "img", &image, None, &cfg, &mut aux).unwrap();
        assert_eq!(rec1.objectives, rec2.objectives);
        assert_eq!(rec1.entropies, rec2.entropies);
        assert_eq!(rec1.masks, rec2.masks);
    }
}
