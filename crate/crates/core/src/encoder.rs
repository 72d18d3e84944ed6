//! Crop encoders: image crop → unit-norm embedding.
//!
//! Two kinds exist. The stub encoder is deterministic and model-free: the
//! crop is letterboxed to the input size, flattened, mean-centred and
//! L2-normalized. Model-file encoders run an ONNX graph taking a
//! `1×1×H×W` float32 tensor and producing `1×dim` float32, normalized here.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::ImageCrop;
use crate::onnx::OnnxModel;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("cannot load encoder model {path}: {reason}")]
    ModelLoad { path: String, reason: String },
    #[error("encoder output has {got} values, spec declares dim {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("encoder inference failed: {0}")]
    Inference(String),
}

/// Pre-normalization norm below which a vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Unit-norm embedding vector.
///
/// Constant inputs have no direction; they map to the first basis vector
/// `e₀ = (1, 0, …, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f32>,
}

impl Embedding {
    /// L2-normalizes `raw`, or returns `e₀` when its norm is below
    /// [`DEGENERATE_NORM`].
    pub fn normalize(raw: &[f32]) -> Embedding {
        assert!(!raw.is_empty(), "embedding dimension must be positive");
        let norm = raw
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm < DEGENERATE_NORM {
            return Self::basis(raw.len());
        }
        Embedding {
            vector: raw.iter().map(|&v| (f64::from(v) / norm) as f32).collect(),
        }
    }

    /// `e₀` of dimension `dim`.
    pub fn basis(dim: usize) -> Embedding {
        let mut vector = vec![0.0; dim];
        vector[0] = 1.0;
        Embedding { vector }
    }

    /// Wraps an already normalized vector; `None` if the norm is off by more
    /// than `tol`.
    pub fn from_unit(vector: Vec<f32>, tol: f64) -> Option<Embedding> {
        if vector.is_empty() {
            return None;
        }
        let norm = vector
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        ((norm - 1.0).abs() <= tol).then_some(Embedding { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.vector
    }

    /// Cosine similarity, i.e. the dot product of the two unit vectors.
    pub fn cosine(&self, other: &Embedding) -> f32 {
        dot(&self.vector, &other.vector)
    }
}

/// Dot product accumulated left to right in f64 and clamped to `[-1, 1]`.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    (acc as f32).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Stub,
    ModelFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// `[height, width]` of the model input.
    pub input_size: [u32; 2],
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub dim: usize,
}

impl EncoderSpec {
    /// The built-in 16×16 stub, `dim = 256`.
    pub fn stub() -> Self {
        Self {
            kind: EncoderKind::Stub,
            input_size: [16, 16],
            normalization: Normalization::default(),
            model_path: None,
            dim: 256,
        }
    }

    pub fn model_file(path: impl Into<PathBuf>, input_size: [u32; 2], dim: usize) -> Self {
        Self {
            kind: EncoderKind::ModelFile,
            input_size,
            normalization: Normalization::default(),
            model_path: Some(path.into()),
            dim,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidSpec(m.to_string()));
        let [h, w] = self.input_size;
        if h == 0 || w == 0 {
            return bad("input_size must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        let n = &self.normalization;
        if n.mean.len() != 1 || n.std.len() != 1 {
            return bad("grayscale encoders take exactly one mean and one std value");
        }
        if !(n.std[0].is_finite() && n.std[0] != 0.0 && n.mean[0].is_finite()) {
            return bad("normalization std must be finite and non-zero");
        }
        match (self.kind, &self.model_path) {
            (EncoderKind::Stub, Some(_)) => bad("stub encoder takes no model_path"),
            (EncoderKind::ModelFile, None) => bad("model_file encoder requires model_path"),
            (EncoderKind::Stub, None) if self.dim != (h * w) as usize => {
                bad("stub encoder dim must equal input height × width")
            }
            _ => Ok(()),
        }
    }
}

/// Letterboxes the crop to the input aspect ratio with white, resizes it
/// bilinearly to `input_size` and applies `(p - mean) / std`.
///
/// Returns `H × W` values, row-major.
pub fn preprocess(crop: &ImageCrop, spec: &EncoderSpec) -> Vec<f32> {
    let [h, w] = spec.input_size;
    let padded = crop.pad_to_aspect(w, h, 1.0);
    let resized = padded.resize_bilinear(w, h);
    let mean = spec.normalization.mean[0];
    let std = spec.normalization.std[0];
    resized.pixels().iter().map(|&p| (p - mean) / std).collect()
}

enum Backend {
    Stub,
    Model(OnnxModel),
}

/// A constructed encoder. Immutable; `embed_batch` can be called from many
/// threads at once.
pub struct Encoder {
    spec: EncoderSpec,
    backend: Backend,
    fingerprint: String,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("spec", &self.spec)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        let mut hasher = Sha256::new();
        let n = &spec.normalization;
        hasher.update(format!(
            "kind={:?};input={}x{};mean={:?};std={:?};dim={}",
            spec.kind, spec.input_size[0], spec.input_size[1], n.mean, n.std, spec.dim
        ));
        let backend = match spec.kind {
            EncoderKind::Stub => Backend::Stub,
            EncoderKind::ModelFile => {
                let path = spec.model_path.as_deref().expect("validated");
                let bytes = std::fs::read(path).map_err(|e| EncoderError::ModelLoad {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                hasher.update(b";model=");
                hasher.update(Sha256::digest(&bytes));
                let [h, w] = spec.input_size;
                let model = OnnxModel::load(path, &[1, 1, h as usize, w as usize]).map_err(
                    |reason| EncoderError::ModelLoad {
                        path: path.display().to_string(),
                        reason,
                    },
                )?;
                if let Some(shape) = model.output_shape() {
                    let got: usize = shape.iter().product();
                    if got != spec.dim {
                        return Err(EncoderError::ShapeMismatch {
                            expected: spec.dim,
                            got,
                        });
                    }
                }
                Backend::Model(model)
            }
        };
        Ok(Self {
            spec,
            backend,
            fingerprint: hex::encode(hasher.finalize()),
        })
    }

    pub fn stub() -> Self {
        Self::new(EncoderSpec::stub()).expect("stub spec is valid")
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Hash of the spec (and model bytes, for model files). Indexes record it
    /// so that queries can only be made with the encoder that built them.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn embed(&self, crop: &ImageCrop) -> Result<Embedding, EncoderError> {
        let input = preprocess(crop, &self.spec);
        match &self.backend {
            Backend::Stub => {
                let mean = input.iter().map(|&v| f64::from(v)).sum::<f64>() / input.len() as f64;
                let centred: Vec<f32> = input.iter().map(|&v| (f64::from(v) - mean) as f32).collect();
                Ok(Embedding::normalize(&centred))
            }
            Backend::Model(model) => {
                let (_, out) = model.run(&input).map_err(EncoderError::Inference)?;
                if out.len() != self.spec.dim {
                    return Err(EncoderError::ShapeMismatch {
                        expected: self.spec.dim,
                        got: out.len(),
                    });
                }
                Ok(Embedding::normalize(&out))
            }
        }
    }

    /// One embedding per crop, in order. Each crop is run on its own, so the
    /// result never depends on how crops are batched.
    pub fn embed_batch(&self, crops: &[ImageCrop]) -> Result<Vec<Embedding>, EncoderError> {
        crops.iter().map(|c| self.embed(c)).collect()
    }
}
