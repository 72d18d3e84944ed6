//! Thin wrapper over tract for single-input, single-output ONNX models.

use std::path::Path;

use tract_onnx::prelude::*;

type Plan = TypedRunnableModel<TypedModel>;

pub(crate) struct OnnxModel {
    plan: Plan,
    input_shape: Vec<usize>,
    output_shape: Option<Vec<usize>>,
}

impl std::fmt::Debug for OnnxModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxModel")
            .field("input_shape", &self.input_shape)
            .field("output_shape", &self.output_shape)
            .finish()
    }
}

impl OnnxModel {
    /// Loads and optimizes a model for a fixed float32 input shape.
    pub fn load(path: &Path, input_shape: &[usize]) -> Result<Self, String> {
        let typed = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.with_input_fact(0, f32::fact(input_shape).into()))
            .and_then(|m| m.into_optimized())
            .map_err(|e| format!("{e:#}"))?;
        let output_shape = typed
            .output_fact(0)
            .ok()
            .and_then(|f| f.shape.as_concrete().map(|s| s.to_vec()));
        let plan = typed.into_runnable().map_err(|e| format!("{e:#}"))?;
        Ok(Self {
            plan,
            input_shape: input_shape.to_vec(),
            output_shape,
        })
    }

    /// Output shape when the graph fixes it statically.
    pub fn output_shape(&self) -> Option<&[usize]> {
        self.output_shape.as_deref()
    }

    /// Runs one inference. `input` must hold exactly the configured shape.
    pub fn run(&self, input: &[f32]) -> Result<(Vec<usize>, Vec<f32>), String> {
        let tensor = Tensor::from_shape(&self.input_shape, input).map_err(|e| format!("{e:#}"))?;
        let outputs = self
            .plan
            .run(tvec!(tensor.into()))
            .map_err(|e| format!("{e:#}"))?;
        let first = outputs.first().ok_or("model produced no outputs")?;
        let view = first.to_array_view::<f32>().map_err(|e| format!("{e:#}"))?;
        Ok((view.shape().to_vec(), view.iter().copied().collect()))
    }
}
