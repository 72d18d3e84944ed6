//! Helpers shared by the integration tests: font paths and small ONNX
//! graphs written with the protobuf types tract ships.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prost::Message;
use tract_onnx::pb::{
    tensor_proto::DataType, tensor_shape_proto::dimension::Value as Dim, tensor_shape_proto::Dimension,
    type_proto, AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto,
    TensorShapeProto, TypeProto, ValueInfoProto,
};

pub fn font_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

pub fn sans() -> PathBuf {
    font_dir().join("DejaVuSans-ascii.ttf")
}

pub fn serif() -> PathBuf {
    font_dir().join("DejaVuSerif-ascii.ttf")
}

pub fn serif_no_qz() -> PathBuf {
    font_dir().join("DejaVuSerif-noQZ.ttf")
}

fn value_info(name: &str, shape: &[i64]) -> ValueInfoProto {
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            denotation: String::new(),
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto {
                    dim: shape
                        .iter()
                        .map(|&d| Dimension {
                            denotation: String::new(),
                            value: Some(Dim::DimValue(d)),
                        })
                        .collect(),
                }),
            })),
        }),
        doc_string: String::new(),
    }
}

pub fn float_tensor(name: &str, dims: &[i64], data: Vec<f32>) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: DataType::Float as i32,
        float_data: data,
        ..TensorProto::default()
    }
}

pub fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        name: output.into(),
        op_type: op.into(),
        attribute,
        ..NodeProto::default()
    }
}

pub fn ints_attr(name: &str, ints: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: 7, // INTS
        ints: ints.to_vec(),
        ..AttributeProto::default()
    }
}

pub fn int_attr(name: &str, i: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: 2, // INT
        i,
        ..AttributeProto::default()
    }
}

pub fn write_model(
    path: &Path,
    nodes: Vec<NodeProto>,
    initializer: Vec<TensorProto>,
    input: (&str, &[i64]),
    output: (&str, &[i64]),
) {
    let model = ModelProto {
        ir_version: 8,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        producer_name: "tests".into(),
        graph: Some(GraphProto {
            node: nodes,
            name: "g".into(),
            initializer,
            input: vec![value_info(input.0, input.1)],
            output: vec![value_info(output.0, output.1)],
            ..GraphProto::default()
        }),
        ..ModelProto::default()
    };
    std::fs::write(path, model.encode_to_vec()).unwrap();
}

/// Linear encoder: flattens a `1×1×h×w` input and multiplies by `weights`
/// (`h·w × dim`, row-major).
pub fn linear_encoder(path: &Path, h: i64, w: i64, dim: i64, weights: Vec<f32>) {
    write_model(
        path,
        vec![
            node("Flatten", &["x"], "flat", vec![int_attr("axis", 1)]),
            node("MatMul", &["flat", "W"], "y", vec![]),
        ],
        vec![float_tensor("W", &[h * w, dim], weights)],
        ("x", &[1, 1, h, w]),
        ("y", &[1, dim]),
    );
}

/// Detector whose rows are the fixed `rows` (each `cx, cy, w, h, _, class
/// scores…`) with objectness replaced by `1 - mean(input)`, so a blank white
/// input yields no detections.
pub fn ink_detector(path: &Path, size: i64, rows: &[Vec<f32>]) {
    let n = rows.len() as i64;
    let width = rows[0].len() as i64;
    let mut base = Vec::new();
    let mut unit = Vec::new();
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            base.push(if j == 4 { 0.0 } else { v });
            unit.push(if j == 4 { 1.0 } else { 0.0 });
        }
    }
    write_model(
        path,
        vec![
            node("ReduceMean", &["x"], "m1", vec![ints_attr("axes", &[2, 3]), int_attr("keepdims", 0)]),
            node("ReduceMean", &["m1"], "m", vec![ints_attr("axes", &[1]), int_attr("keepdims", 1)]),
            node("Sub", &["one", "m"], "obj", vec![]),
            node("Mul", &["obj", "unit"], "scaled", vec![]),
            node("Add", &["base", "scaled"], "y", vec![]),
        ],
        vec![
            float_tensor("one", &[1], vec![1.0]),
            float_tensor("unit", &[1, n, width], unit),
            float_tensor("base", &[1, n, width], base),
        ],
        ("x", &[1, 3, size, size]),
        ("y", &[1, n, width]),
    );
}
