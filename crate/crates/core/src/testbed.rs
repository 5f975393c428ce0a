//! Desk-scale verification assets: a seeded synthetic-shapes segmentation
//! dataset with pixel-exact masks, and a small trainable encoder-decoder
//! segmenter with batch-normalization layers so the norm-affine parameter
//! scope is non-trivial.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::adapter::{Checkpoint, SegmentationModel, TensorRecord};
use crate::dataset::{init_layout, Dataset, DatasetEntry};
use crate::error::{Error, Result};
use crate::image::{
    argmax_mask, save_image, save_mask, softmax, ImagePlane, LabelMask, LogitMask, IGNORE_LABEL,
};
use crate::losses::{ce_loss, LossTarget};
use crate::metrics::{confusion_counts, miou_i};
use crate::nn::{concat_channels, split_channels, AdamW, BatchNorm2d, Conv2d, Mode, Param, Relu, UpsampleNearest2};
use crate::scalar::{sc, Scalar};

/// Classes of the shapes dataset: background, circle, rectangle, triangle.
pub const SHAPES_NUM_CLASSES: usize = 4;

/// Generation parameters of the synthetic-shapes corpus.
#[derive(Debug, Clone)]
pub struct ShapesSpec {
    /// Square image side; must be even for the segmenter's down/up path.
    pub size: usize,
    /// Shapes drawn per image, uniform in `1..=max_shapes`.
    pub max_shapes: usize,
    /// Per-pixel color noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            size: 96,
            max_shapes: 3,
            noise: 0.03,
            seed: 0,
        }
    }
}

/// Probability that a given non-background class appears in an image, under
/// uniform shape-kind draws with 1..=3 shapes: `1 - E[(2/3)^n]`.
pub fn expected_class_presence(max_shapes: usize) -> f64 {
    let mut acc = 0.0;
    for n in 1..=max_shapes {
        acc += (2.0f64 / 3.0).powi(n as i32);
    }
    1.0 - acc / max_shapes as f64
}

/// Generate one image/mask pair; deterministic in `(spec.seed, index)`.
pub fn generate_shapes_image(spec: &ShapesSpec, index: usize) -> (ImagePlane<f64>, LabelMask) {
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ crate::corruptions::fnv1a64(format!("shapes/{index}").as_bytes()),
    );
    let mut image = Array3::<f64>::zeros((s, s, 3));
    let mut mask = Array2::<u8>::zeros((s, s));

    // textured background: base gray + vertical gradient + noise
    let base = rng.random_range(0.10..0.30);
    let grad = rng.random_range(-0.08..0.08);
    for y in 0..s {
        for x in 0..s {
            let v = base + grad * (y as f64 / s as f64);
            for ch in 0..3 {
                image[(y, x, ch)] = v + rng.random_range(-spec.noise..spec.noise);
            }
        }
    }

    let n_shapes = rng.random_range(1..=spec.max_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..=3u8);
        // dominant channel by class keeps the task learnable at desk scale
        let dominant = (class - 1) as usize;
        let hi = rng.random_range(0.55..0.95);
        let lo = [rng.random_range(0.05..0.30), rng.random_range(0.05..0.30)];
        let mut color = [0.0; 3];
        let mut li = 0;
        for (ch, c) in color.iter_mut().enumerate() {
            if ch == dominant {
                *c = hi;
            } else {
                *c = lo[li];
                li += 1;
            }
        }
        let s_i = s as i64;
        match class {
            1 => {
                let r = rng.random_range(s_i / 10..=s_i / 4);
                let cy = rng.random_range(r + 2..s as i64 - r - 2);
                let cx = rng.random_range(r + 2..s as i64 - r - 2);
                stamp(&mut image, &mut mask, class, &color, spec.noise, &mut rng, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    dy * dy + dx * dx <= r * r
                });
            }
            2 => {
                let hw = rng.random_range(s_i / 12..=s_i / 4);
                let hh = rng.random_range(s_i / 12..=s_i / 4);
                let cy = rng.random_range(hh + 2..s as i64 - hh - 2);
                let cx = rng.random_range(hw + 2..s as i64 - hw - 2);
                stamp(&mut image, &mut mask, class, &color, spec.noise, &mut rng, |y, x| {
                    (y - cy).abs() <= hh && (x - cx).abs() <= hw
                });
            }
            _ => {
                let half_base = rng.random_range(s_i / 10..=s_i / 4);
                let height = rng.random_range(s_i / 7..=s_i / 3);
                let cx = rng.random_range(half_base + 2..s as i64 - half_base - 2);
                let top = rng.random_range(2..s as i64 - height - 2);
                stamp(&mut image, &mut mask, class, &color, spec.noise, &mut rng, |y, x| {
                    if y < top || y > top + height {
                        return false;
                    }
                    // width grows linearly from apex to base
                    let w = half_base * (y - top) / height;
                    (x - cx).abs() <= w
                });
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    (image, mask)
}

fn stamp<F>(
    image: &mut ImagePlane<f64>,
    mask: &mut LabelMask,
    class: u8,
    color: &[f64; 3],
    noise: f64,
    rng: &mut ChaCha8Rng,
    inside: F,
) where
    F: Fn(i64, i64) -> bool,
{
    let (h, w) = mask.dim();
    for y in 0..h {
        for x in 0..w {
            if inside(y as i64, x as i64) {
                mask[(y, x)] = class;
                for ch in 0..3 {
                    image[(y, x, ch)] = color[ch] + rng.random_range(-noise..noise);
                }
            }
        }
    }
}

/// Materialize `n` image/mask pairs under `root` in the standard layout.
pub fn make_shapes_dataset(n: usize, spec: &ShapesSpec, root: &Path) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("requested dataset size 0".into()));
    }
    init_layout(root)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (image, mask) = generate_shapes_image(spec, i);
        let id = format!("shape_{i:04}");
        let image_rel = Path::new("images").join(format!("{id}.png"));
        let mask_rel = Path::new("masks").join(format!("{id}.png"));
        save_image(&image, &root.join(&image_rel))?;
        save_mask(&mask, &root.join(&mask_rel))?;
        entries.push(DatasetEntry {
            id,
            image: image_rel,
            mask: mask_rel,
        });
    }
    let dataset = Dataset {
        root: root.to_path_buf(),
        entries,
    };
    dataset.save_index()?;
    Ok(dataset)
}

pub const TOY_SEGMENTER_ARCH: &str = "toy-segmenter";

/// Small encoder-decoder segmenter: one stride-2 stage, a skip connection
/// around it, batch normalization after every convolution except the head.
#[derive(Debug, Clone)]
pub struct ToySegmenter<T> {
    num_classes: usize,
    mode: Mode,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    relu3: Relu<T>,
    up: UpsampleNearest2,
    reduce: Conv2d<T>,
    bn4: BatchNorm2d<T>,
    relu4: Relu<T>,
    conv4: Conv2d<T>,
    bn5: BatchNorm2d<T>,
    relu5: Relu<T>,
    head: Conv2d<T>,
}

const C_EARLY: usize = 12;
const C_DEEP: usize = 24;

impl<T: Scalar> ToySegmenter<T> {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToySegmenter {
            num_classes,
            mode: Mode::Eval,
            conv1: Conv2d::new("conv1", 3, C_EARLY, 3, 1, 1, &mut rng),
            bn1: BatchNorm2d::new("bn1", C_EARLY),
            relu1: Relu::new(),
            conv2: Conv2d::new("conv2", C_EARLY, C_DEEP, 3, 2, 1, &mut rng),
            bn2: BatchNorm2d::new("bn2", C_DEEP),
            relu2: Relu::new(),
            conv3: Conv2d::new("conv3", C_DEEP, C_DEEP, 3, 1, 1, &mut rng),
            bn3: BatchNorm2d::new("bn3", C_DEEP),
            relu3: Relu::new(),
            up: UpsampleNearest2,
            reduce: Conv2d::new("reduce", C_DEEP, C_EARLY, 1, 1, 0, &mut rng),
            bn4: BatchNorm2d::new("bn4", C_EARLY),
            relu4: Relu::new(),
            conv4: Conv2d::new("conv4", 2 * C_EARLY, C_EARLY, 3, 1, 1, &mut rng),
            bn5: BatchNorm2d::new("bn5", C_EARLY),
            relu5: Relu::new(),
            head: Conv2d::new("head", C_EARLY, num_classes, 1, 1, 0, &mut rng),
        }
    }

    pub fn norm_layer_count(&self) -> usize {
        5
    }

    fn run(&mut self, image: &ImagePlane<T>, keep: bool) -> Result<(LogitMask<T>, Option<Array3<T>>)> {
        let (h, w, ch) = image.dim();
        if ch != 3 {
            return Err(Error::shape("(H, W, 3) image", format!("{:?}", image.dim())));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be even, got {h}x{w}"
            )));
        }
        let x = image_to_chw(image);
        let mode = self.mode;
        let a = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(&x, keep), mode, keep), keep);
        let b = self.relu2.forward(&self.bn2.forward(&self.conv2.forward(&a, keep), mode, keep), keep);
        let c = self.relu3.forward(&self.bn3.forward(&self.conv3.forward(&b, keep), mode, keep), keep);
        let u = self.up.forward(&c);
        let r = self.relu4.forward(&self.bn4.forward(&self.reduce.forward(&u, keep), mode, keep), keep);
        let cat = concat_channels(&a, &r);
        let d = self.relu5.forward(&self.bn5.forward(&self.conv4.forward(&cat, keep), mode, keep), keep);
        let logits = self.head.forward(&d, keep);
        Ok((logits, if keep { Some(x) } else { None }))
    }
}

/// HWC `[0,1]` image to the CHW layout the convolution stack uses.
pub fn image_to_chw<T: Scalar>(image: &ImagePlane<T>) -> Array3<T> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| image[(y, x, c)])
}

/// CHW gradient back to the HWC image layout.
pub fn chw_to_image<T: Scalar>(chw: &Array3<T>) -> ImagePlane<T> {
    let (_, h, w) = chw.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| chw[(c, y, x)])
}

impl<T: Scalar> SegmentationModel<T> for ToySegmenter<T> {
    fn arch_id(&self) -> &'static str {
        TOY_SEGMENTER_ARCH
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn forward(&mut self, image: &ImagePlane<T>) -> Result<LogitMask<T>> {
        Ok(self.run(image, false)?.0)
    }

    fn forward_for_grad(&mut self, image: &ImagePlane<T>) -> Result<LogitMask<T>> {
        Ok(self.run(image, true)?.0)
    }

    fn backward(&mut self, grad_logits: &LogitMask<T>) -> Result<ImagePlane<T>> {
        let g = self.head.backward(grad_logits);
        let g = self.conv4.backward(&self.bn5.backward(&self.relu5.backward(&g)));
        let (g_skip, g_r) = split_channels(&g, C_EARLY);
        let g = self.reduce.backward(&self.bn4.backward(&self.relu4.backward(&g_r)));
        let g = self.up.backward(&g);
        let g = self.conv3.backward(&self.bn3.backward(&self.relu3.backward(&g)));
        let mut g = self.conv2.backward(&self.bn2.backward(&self.relu2.backward(&g)));
        g += &g_skip;
        let g = self.conv1.backward(&self.bn1.backward(&self.relu1.backward(&g)));
        Ok(chw_to_image(&g))
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.bn3.gamma,
            &self.bn3.beta,
            &self.reduce.weight,
            &self.reduce.bias,
            &self.bn4.gamma,
            &self.bn4.beta,
            &self.conv4.weight,
            &self.conv4.bias,
            &self.bn5.gamma,
            &self.bn5.beta,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.bn3.gamma,
            &mut self.bn3.beta,
            &mut self.reduce.weight,
            &mut self.reduce.bias,
            &mut self.bn4.gamma,
            &mut self.bn4.beta,
            &mut self.conv4.weight,
            &mut self.conv4.bias,
            &mut self.bn5.gamma,
            &mut self.bn5.beta,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    fn clone_model(&self) -> Box<dyn SegmentationModel<T>> {
        Box::new(self.clone())
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.params().iter().map(|p| TensorRecord::from_param(p)).collect();
        let buffers = self.bn_buffers();
        Checkpoint {
            arch: TOY_SEGMENTER_ARCH.to_string(),
            meta: json!({ "num_classes": self.num_classes }),
            tensors,
            buffers,
        }
        .save(path)
    }
}

impl<T: Scalar> ToySegmenter<T> {
    fn bn_buffers(&self) -> Vec<TensorRecord> {
        let mut out = Vec::new();
        for (name, bn) in [
            ("bn1", &self.bn1),
            ("bn2", &self.bn2),
            ("bn3", &self.bn3),
            ("bn4", &self.bn4),
            ("bn5", &self.bn5),
        ] {
            out.push(TensorRecord {
                name: format!("{name}.running_mean"),
                shape: vec![bn.running_mean.len()],
                data: bn.running_mean.iter().map(|v| v.to_f64().unwrap()).collect(),
            });
            out.push(TensorRecord {
                name: format!("{name}.running_var"),
                shape: vec![bn.running_var.len()],
                data: bn.running_var.iter().map(|v| v.to_f64().unwrap()).collect(),
            });
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.arch != TOY_SEGMENTER_ARCH {
            return Err(Error::UnknownArchitecture(ckpt.arch));
        }
        let num_classes = ckpt
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("checkpoint missing num_classes".to_string()))?
            as usize;
        let mut model = ToySegmenter::<T>::new(num_classes, 0);
        {
            let mut params = model.params_mut();
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
        for rec in &ckpt.buffers {
            let (layer, field) = rec
                .name
                .split_once('.')
                .ok_or_else(|| Error::invalid(format!("bad buffer name {}", rec.name)))?;
            let bn = match layer {
                "bn1" => &mut model.bn1,
                "bn2" => &mut model.bn2,
                "bn3" => &mut model.bn3,
                "bn4" => &mut model.bn4,
                "bn5" => &mut model.bn5,
                other => return Err(Error::invalid(format!("unknown buffer layer {other}"))),
            };
            let dst = match field {
                "running_mean" => &mut bn.running_mean,
                "running_var" => &mut bn.running_var,
                other => return Err(Error::invalid(format!("unknown buffer field {other}"))),
            };
            if dst.len() != rec.data.len() {
                return Err(Error::shape(
                    format!("{} values", dst.len()),
                    format!("{} values", rec.data.len()),
                ));
            }
            for (d, s) in dst.iter_mut().zip(&rec.data) {
                *d = sc::<T>(*s);
            }
        }
        Ok(model)
    }
}

/// Train the toy segmenter with per-image AdamW steps on cross-entropy.
/// Returns the trained model (left in evaluation mode) and the per-epoch
/// mean training loss.
pub fn train_toy_segmenter<T: Scalar>(
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ToySegmenter<T>, Vec<f64>)> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut max_label = 0u8;
    for entry in &dataset.entries {
        let image = crate::image::load_image::<T>(&dataset.image_path(entry))?;
        let mask = crate::image::load_mask(&dataset.mask_path(entry))?;
        for v in mask.iter() {
            if *v != IGNORE_LABEL {
                max_label = max_label.max(*v);
            }
        }
        images.push(image);
        masks.push(mask);
    }
    let num_classes = (max_label as usize + 1).max(2);
    let mut model = ToySegmenter::<T>::new(num_classes, seed);
    model.set_mode(Mode::Train);
    let mut opt = AdamW::<T>::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e6d_7261_696e_0001);
    let mut curve = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _epoch in 0..epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let logits = model.forward_for_grad(&images[i])?;
            let probs = softmax(&logits);
            let out = ce_loss(&probs, LossTarget::Hard(&masks[i]), None)?;
            epoch_loss += out.value.to_f64().unwrap();
            let grad_logits = crate::image::softmax_backward(&probs, &out.grad);
            model.backward(&grad_logits)?;
            let mut params = model.params_mut();
            opt.step(&mut params)?;
            model.zero_grad();
        }
        curve.push(epoch_loss / images.len() as f64);
    }
    model.set_mode(Mode::Eval);
    Ok((model, curve))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Mean mIoU_i of a model over a dataset, evaluated from PNG files.
pub fn eval_miou_i<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    dataset: &Dataset,
) -> Result<f64> {
    let mut counts = Vec::new();
    for entry in &dataset.entries {
        let image = crate::image::load_image::<T>(&dataset.image_path(entry))?;
        let mask = crate::image::load_mask(&dataset.mask_path(entry))?;
        let logits = model.forward(&image)?;
        let pred = argmax_mask(&logits);
        counts.push(confusion_counts(&pred, &mask, model.num_classes(), IGNORE_LABEL)?);
    }
    miou_i(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    #[test]
    fn shapes_generation_is_deterministic() {
        let spec = ShapesSpec::default();
        let (img_a, mask_a) = generate_shapes_image(&spec, 7);
        let (img_b, mask_b) = generate_shapes_image(&spec, 7);
        assert_eq!(mask_a, mask_b);
        assert_eq!(img_a, img_b);
    }

    #[test]
    fn masks_use_only_valid_classes() {
        let spec = ShapesSpec {
            size: 48,
            ..ShapesSpec::default()
        };
        for i in 0..20 {
            let (_, mask) = generate_shapes_image(&spec, i);
            for v in mask.iter() {
                assert!(*v < SHAPES_NUM_CLASSES as u8);
            }
        }
    }

    #[test]
    fn class_presence_matches_expectation() {
        let spec = ShapesSpec {
            size: 48,
            ..ShapesSpec::default()
        };
        let n = 500;
        let mut present = [0usize; 3];
        for i in 0..n {
            let (_, mask) = generate_shapes_image(&spec, i);
            let mut seen = [false; 3];
            for v in mask.iter() {
                if *v >= 1 {
                    seen[(*v - 1) as usize] = true;
                }
            }
            for k in 0..3 {
                if seen[k] {
                    present[k] += 1;
                }
            }
        }
        let expected = expected_class_presence(spec.max_shapes);
        assert!(expected >= 0.2);
        for k in 0..3 {
            let freq = present[k] as f64 / n as f64;
            assert!(
                (freq - expected).abs() < 0.10,
                "class {k}: frequency {freq} vs expectation {expected}"
            );
        }
    }

    #[test]
    fn segmenter_input_image_gradient_matches_finite_differences() {
        let mut model = ToySegmenter::<f64>::new(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>());
        let gsel = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>() - 0.5);
        let logits = model.forward_for_grad(&image).unwrap();
        assert_eq!(logits.dim(), (3, 8, 8));
        let gimg = model.backward(&gsel).unwrap();
        let eps = 1e-6;
        for idx in [(0usize, 0usize, 0usize), (3, 5, 1), (7, 7, 2)] {
            let mut plus = image.clone();
            plus[idx] += eps;
            let mut minus = image.clone();
            minus[idx] -= eps;
            let fp = (model.forward(&plus).unwrap() * &gsel).sum();
            let fm = (model.forward(&minus).unwrap() * &gsel).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - gimg[idx]).abs() < 1e-5,
                "{idx:?}: fd {fd} vs analytic {}",
                gimg[idx]
            );
        }
    }

    #[test]
    fn segmenter_param_gradient_matches_finite_differences() {
        let mut model = ToySegmenter::<f64>::new(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>());
        let gsel = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>() - 0.5);
        let _ = model.forward_for_grad(&image).unwrap();
        model.backward(&gsel).unwrap();
        // check one weight in an early conv and one batchnorm gamma
        for (pi, ei) in [(0usize, 10usize), (2, 3)] {
            let analytic = model.params()[pi].grad[ei].to_f64().unwrap();
            let eps = 1e-6;
            let orig = model.params()[pi].data[ei];
            model.params_mut()[pi].data[ei] = orig + eps;
            let fp = (model.forward(&image).unwrap() * &gsel).sum();
            model.params_mut()[pi].data[ei] = orig - eps;
            let fm = (model.forward(&image).unwrap() * &gsel).sum();
            model.params_mut()[pi].data[ei] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - analytic).abs() < 1e-5,
                "param {pi} elem {ei}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_and_training_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShapesSpec {
            size: 32,
            ..ShapesSpec::default()
        };
        let dataset = make_shapes_dataset(6, &spec, dir.path()).unwrap();
        assert_eq!(dataset.len(), 6);
        let reloaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(reloaded.entries, dataset.entries);

        let (mut model, curve) = train_toy_segmenter::<f32>(&dataset, 2, 1e-3, 1).unwrap();
        assert_eq!(curve.len(), 2);
        assert!(curve.iter().all(|v| v.is_finite()));
        let score = eval_miou_i(&mut model, &dataset).unwrap();
        assert!(score.is_finite());
    }
}
