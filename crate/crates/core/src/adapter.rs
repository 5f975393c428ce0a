//! Model contract and the per-image restart machinery: weight snapshots,
//! parameter-scope selection, weight hashing, and the architecture registry.
//!
//! Adaptation never runs a model in training mode, so normalization running
//! statistics are frozen throughout; only the affine scale/shift parameters
//! of normalization layers are ever optimizable.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, LogitMask};
use crate::nn::{Mode, Param};
use crate::scalar::Scalar;

/// Contract every adaptable segmenter fulfils: a deterministic evaluation
/// forward pass, a cached forward/backward pair for gradients w.r.t. both
/// parameters and the input image, and enumeration of trainable parameters
/// tagged with their normalization-affine status.
pub trait SegmentationModel<T: Scalar>: Send {
    fn arch_id(&self) -> &'static str;
    fn num_classes(&self) -> usize;
    fn mode(&self) -> Mode;
    fn set_mode(&mut self, mode: Mode);

    /// Forward pass without gradient bookkeeping.
    fn forward(&mut self, image: &ImagePlane<T>) -> Result<LogitMask<T>>;
    /// Forward pass that caches activations for a following [`Self::backward`].
    fn forward_for_grad(&mut self, image: &ImagePlane<T>) -> Result<LogitMask<T>>;
    /// Accumulate parameter gradients and return d(loss)/d(image).
    fn backward(&mut self, grad_logits: &LogitMask<T>) -> Result<ImagePlane<T>>;
    fn zero_grad(&mut self);

    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn clone_model(&self) -> Box<dyn SegmentationModel<T>>;
    fn save_checkpoint(&self, path: &Path) -> Result<()>;
}

/// Which parameters an adaptation step may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamScope {
    Full,
    NormAffine,
}

impl ParamScope {
    pub fn name(&self) -> &'static str {
        match self {
            ParamScope::Full => "full",
            ParamScope::NormAffine => "norm",
        }
    }
}

impl fmt::Display for ParamScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ParamScope::Full),
            "norm" | "norm-affine" => Ok(ParamScope::NormAffine),
            other => Err(Error::invalid(format!("unknown parameter scope: {other}"))),
        }
    }
}

/// Indices into `params()` selected by a scope. Norm-affine selects exactly
/// the scale/shift tensors of normalization layers, never running statistics
/// (those are buffers, not parameters). An empty norm-affine selection is a
/// configuration mistake and errors out.
pub fn select_params<T: Scalar>(
    model: &dyn SegmentationModel<T>,
    scope: ParamScope,
) -> Result<Vec<usize>> {
    let params = model.params();
    let selected: Vec<usize> = match scope {
        ParamScope::Full => (0..params.len()).collect(),
        ParamScope::NormAffine => params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.norm_affine)
            .map(|(i, _)| i)
            .collect(),
    };
    if selected.is_empty() {
        return Err(Error::invalid(format!(
            "scope {scope} selects no parameters on architecture {}",
            model.arch_id()
        )));
    }
    Ok(selected)
}

/// Complete by-value copy of all trainable parameters.
#[derive(Debug, Clone)]
pub struct WeightSnapshot<T> {
    tensors: Vec<(String, Vec<usize>, Vec<T>)>,
}

pub fn snapshot_weights<T: Scalar>(model: &dyn SegmentationModel<T>) -> WeightSnapshot<T> {
    WeightSnapshot {
        tensors: model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect(),
    }
}

/// Restore every parameter to its snapshot value. Errors on any structure
/// mismatch (count, name, or shape) before touching the model.
pub fn restore_weights<T: Scalar>(
    model: &mut dyn SegmentationModel<T>,
    snapshot: &WeightSnapshot<T>,
) -> Result<()> {
    {
        let params = model.params();
        if params.len() != snapshot.tensors.len() {
            return Err(Error::shape(
                format!("{} tensors", snapshot.tensors.len()),
                format!("{} tensors", params.len()),
            ));
        }
        for (p, (name, shape, _)) in params.iter().zip(&snapshot.tensors) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::shape(
                    format!("{name} {shape:?}"),
                    format!("{} {:?}", p.name, p.shape),
                ));
            }
        }
    }
    for (p, (_, _, data)) in model.params_mut().into_iter().zip(&snapshot.tensors) {
        p.data.copy_from_slice(data);
    }
    Ok(())
}

/// Order-sensitive hash over parameter names, shapes, and exact bit patterns;
/// the restart invariant is checked by comparing these between adaptations.
pub fn weight_hash<T: Scalar>(model: &dyn SegmentationModel<T>) -> u64 {
    let mut bytes = Vec::new();
    for p in model.params() {
        bytes.extend_from_slice(p.name.as_bytes());
        for d in &p.shape {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.data {
            bytes.extend_from_slice(&v.to_f64().unwrap().to_bits().to_le_bytes());
        }
    }
    crate::corruptions::fnv1a64(&bytes)
}

/// Serialized network state: named tensors plus non-trainable buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    pub buffers: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_param<T: Scalar>(p: &Param<T>) -> Self {
        TensorRecord {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    pub fn restore_into<T: Scalar>(&self, p: &mut Param<T>) -> Result<()> {
        if self.name != p.name || self.shape != p.shape {
            return Err(Error::shape(
                format!("{} {:?}", p.name, p.shape),
                format!("{} {:?}", self.name, self.shape),
            ));
        }
        for (dst, src) in p.data.iter_mut().zip(&self.data) {
            *dst = crate::scalar::sc::<T>(*src);
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::invalid(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

pub type ModelLoader<T> = fn(&Path) -> Result<Box<dyn SegmentationModel<T>>>;

/// Maps architecture identifiers to checkpoint loaders. The shapes-testbed
/// segmenter is always registered.
pub struct ArchRegistry<T: Scalar> {
    loaders: BTreeMap<String, ModelLoader<T>>,
}

impl<T: Scalar> ArchRegistry<T> {
    pub fn with_builtins() -> Self {
        let mut reg = ArchRegistry {
            loaders: BTreeMap::new(),
        };
        reg.register(crate::testbed::TOY_SEGMENTER_ARCH, |path| {
            Ok(Box::new(crate::testbed::ToySegmenter::<T>::load(path)?))
        });
        reg
    }

    pub fn register(&mut self, arch: &str, loader: ModelLoader<T>) {
        self.loaders.insert(arch.to_string(), loader);
    }

    pub fn load(&self, arch: &str, checkpoint: &Path) -> Result<Box<dyn SegmentationModel<T>>> {
        match self.loaders.get(arch) {
            Some(loader) => loader(checkpoint),
            None => Err(Error::UnknownArchitecture(arch.to_string())),
        }
    }

    pub fn known(&self) -> Vec<&str> {
        self.loaders.keys().map(|s| s.as_str()).collect()
    }
}
