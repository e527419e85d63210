//! Model document (JSON) and weights blob (`NNWT`) serialization.
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! "NNWT" | u32 entry count | entries...
//! entry: u16 name length | name (UTF-8 "<node_id>.<slot>") | u8 rank
//!        | rank × u32 extents | row-major f32 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BatchNorm, GraphError, Layer, LayerNode, ModelGraph, OpKind, Result};
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"NNWT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    input_shape: Vec<usize>,
    nodes: Vec<NodeDocument>,
    output_id: String,
    prelogits_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDocument {
    id: String,
    op: String,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Params::is_empty")]
    params: Params,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    weights: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

impl Params {
    fn is_empty(&self) -> bool {
        self.stride.is_none()
            && self.padding.is_none()
            && self.window.is_none()
            && self.axis.is_none()
            && self.epsilon.is_none()
    }
}

/// Serializes the graph structure to its canonical JSON document.
pub fn to_document<T: Element>(model: &ModelGraph<T>) -> String {
    let nodes = model
        .nodes()
        .iter()
        .map(|n| {
            let mut params = Params::default();
            match &n.layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    params.stride = Some(*stride);
                    params.padding = Some(*padding);
                }
                Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
                    params.window = Some(*window);
                    params.stride = Some(*stride);
                }
                Layer::BatchNorm(bn) => params.epsilon = Some(bn.epsilon),
                Layer::Concat => params.axis = Some(0),
                _ => {}
            }
            NodeDocument {
                id: n.id.clone(),
                op: n.layer.kind().name().to_string(),
                inputs: n.inputs.clone(),
                params,
                weights: n
                    .layer
                    .kind()
                    .weight_slots()
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            }
        })
        .collect();
    let doc = ModelDocument {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        nodes,
        output_id: model.output_id().to_string(),
        prelogits_id: model.prelogits_id().to_string(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("model document serializes");
    text.push('\n');
    text
}

/// Serializes all weights (as f32) in node order, then slot order.
pub fn to_weights_blob<T: Element>(model: &ModelGraph<T>) -> Vec<u8> {
    let entries: Vec<(String, &Tensor<T>)> = model
        .nodes()
        .iter()
        .flat_map(|n| {
            n.layer
                .weights()
                .into_iter()
                .map(move |(slot, t)| (format!("{}.{slot}", n.id), t))
        })
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| GraphError::Blob(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_blob(blob: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = Reader { buf: blob, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(GraphError::Blob("bad magic, expected NNWT".into()));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| GraphError::Blob(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| GraphError::Blob(format!("entry `{name}` is too large")))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| GraphError::Blob(format!("entry `{name}`: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(GraphError::Blob(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != blob.len() {
        return Err(GraphError::Blob(format!(
            "{} trailing bytes after last entry",
            blob.len() - r.pos
        )));
    }
    Ok(out)
}

/// Parses and validates a model document together with its weights blob.
pub fn load_model(document: &str, blob: &[u8]) -> Result<ModelGraph<f32>> {
    let doc: ModelDocument =
        serde_json::from_str(document).map_err(|e| GraphError::Document(e.to_string()))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(GraphError::VersionMismatch {
            found: doc.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut weights = parse_blob(blob)?;
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in doc.nodes {
        let kind = OpKind::from_name(&nd.op).ok_or_else(|| GraphError::UnknownOp {
            node: nd.id.clone(),
            op: nd.op.clone(),
        })?;
        let slots = kind.weight_slots();
        for declared in &nd.weights {
            if !slots.contains(&declared.as_str()) {
                return Err(GraphError::UnexpectedWeight(format!(
                    "{}.{declared}",
                    nd.id
                )));
            }
        }
        let mut take = |slot: &str| -> Result<Tensor<f32>> {
            if !nd.weights.iter().any(|w| w == slot) {
                return Err(GraphError::MissingWeight {
                    node: nd.id.clone(),
                    slot: slot.to_string(),
                });
            }
            weights
                .remove(&format!("{}.{slot}", nd.id))
                .ok_or_else(|| GraphError::MissingWeight {
                    node: nd.id.clone(),
                    slot: slot.to_string(),
                })
        };
        let p = &nd.params;
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| GraphError::Document(format!("node `{}` lacks param `{what}`", nd.id)))
        };
        let layer = match kind {
            OpKind::Conv2d => Layer::Conv2d {
                kernel: take("kernel")?,
                bias: take("bias")?,
                stride: need(p.stride, "stride")?,
                padding: p.padding.unwrap_or(0),
            },
            OpKind::Dense => Layer::Dense {
                weight: take("weight")?,
                bias: take("bias")?,
            },
            OpKind::Relu => Layer::Relu,
            OpKind::BatchNorm => Layer::BatchNorm(BatchNorm {
                gamma: take("gamma")?,
                beta: take("beta")?,
                running_mean: take("running_mean")?,
                running_var: take("running_var")?,
                epsilon: p.epsilon.ok_or_else(|| {
                    GraphError::Document(format!("node `{}` lacks param `epsilon`", nd.id))
                })?,
            }),
            OpKind::MaxPool => Layer::MaxPool {
                window: need(p.window, "window")?,
                stride: need(p.stride, "stride")?,
            },
            OpKind::AvgPool => Layer::AvgPool {
                window: need(p.window, "window")?,
                stride: need(p.stride, "stride")?,
            },
            OpKind::GlobalAvgPool => Layer::GlobalAvgPool,
            OpKind::Concat => {
                if p.axis.unwrap_or(0) != 0 {
                    return Err(GraphError::Document(format!(
                        "node `{}`: concat supports only axis 0 (channels)",
                        nd.id
                    )));
                }
                Layer::Concat
            }
            OpKind::Softmax => Layer::Softmax,
        };
        nodes.push(LayerNode {
            id: nd.id,
            inputs: nd.inputs,
            layer,
        });
    }
    if let Some(name) = weights.into_keys().next() {
        return Err(GraphError::UnexpectedWeight(name));
    }
    ModelGraph::new(doc.input_shape, nodes, &doc.output_id, &doc.prelogits_id)
}

pub fn load_model_files(document: &Path, weights: &Path) -> Result<ModelGraph<f32>> {
    let doc = std::fs::read_to_string(document)?;
    let blob = std::fs::read(weights)?;
    load_model(&doc, &blob)
}

pub fn save_model_files<T: Element>(
    model: &ModelGraph<T>,
    document: &Path,
    weights: &Path,
) -> Result<()> {
    std::fs::write(document, to_document(model))?;
    std::fs::write(weights, to_weights_blob(model))?;
    Ok(())
}

/// SHA-256 over the canonical document followed by the weights blob.
pub fn model_digest<T: Element>(model: &ModelGraph<T>) -> String {
    let mut h = Sha256::new();
    h.update(to_document(model).as_bytes());
    h.update(to_weights_blob(model));
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::super::INPUT_ID;
    use super::*;

    fn minimal() -> ModelGraph<f32> {
        let nodes = vec![LayerNode::new(
            "fc",
            &[INPUT_ID],
            Layer::Dense {
                weight: Tensor::from_f64(vec![1, 2], &[2., -1.]).unwrap(),
                bias: Tensor::from_f64(vec![1], &[0.]).unwrap(),
            },
        )];
        ModelGraph::new(vec![2], nodes, "fc", "fc").unwrap()
    }

    #[test]
    fn minimal_round_trip() {
        let m = minimal();
        let doc = to_document(&m);
        let blob = to_weights_blob(&m);
        let back = load_model(&doc, &blob).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back, m);
        assert_eq!(to_document(&back), doc);
        assert_eq!(to_weights_blob(&back), blob);
    }

    #[test]
    fn blob_layout() {
        let blob = to_weights_blob(&minimal());
        assert_eq!(&blob[..4], b"NNWT");
        assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(blob[8..10].try_into().unwrap()), 9);
        assert_eq!(&blob[10..19], b"fc.weight");
        assert_eq!(blob[19], 2);
        assert_eq!(u32::from_le_bytes(blob[20..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(blob[24..28].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(blob[28..32].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(blob[32..36].try_into().unwrap()), -1.0);
    }

    #[test]
    fn missing_weight_names_node() {
        let m = minimal();
        let doc = to_document(&m);
        let empty = [WEIGHTS_MAGIC.as_slice(), &0u32.to_le_bytes()].concat();
        match load_model(&doc, &empty) {
            Err(GraphError::MissingWeight { node, slot }) => {
                assert_eq!(node, "fc");
                assert_eq!(slot, "weight");
            }
            other => panic!("expected missing weight, got {other:?}"),
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let m = minimal();
        let blob = to_weights_blob(&m);
        let doc = to_document(&m);

        let v2 = doc.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            load_model(&v2, &blob),
            Err(GraphError::VersionMismatch { found: 2, .. })
        ));

        let unknown = doc.replace("\"dense\"", "\"gelu\"");
        assert!(matches!(
            load_model(&unknown, &blob),
            Err(GraphError::UnknownOp { .. })
        ));

        let cyc = r#"{"format_version":1,"input_shape":[2],"nodes":[
            {"id":"a","op":"relu","inputs":["b"]},
            {"id":"b","op":"relu","inputs":["a"]}],
            "output_id":"b","prelogits_id":"b"}"#;
        let empty = [WEIGHTS_MAGIC.as_slice(), &0u32.to_le_bytes()].concat();
        assert!(matches!(load_model(cyc, &empty), Err(GraphError::Cycle(_))));

        let mut bad_shape = blob.clone();
        // fc.weight extents [1,2] -> [2,1]
        bad_shape[20..24].copy_from_slice(&2u32.to_le_bytes());
        bad_shape[24..28].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            load_model(&doc, &bad_shape),
            Err(GraphError::ShapeInconsistency { .. })
        ));

        let mut bad_magic = blob.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load_model(&doc, &bad_magic),
            Err(GraphError::Blob(_))
        ));

        let truncated = &blob[..blob.len() - 1];
        assert!(matches!(
            load_model(&doc, truncated),
            Err(GraphError::Blob(_))
        ));
    }

    #[test]
    fn extra_blob_entries_are_rejected() {
        let m = minimal();
        let mut blob = to_weights_blob(&m);
        blob[4..8].copy_from_slice(&3u32.to_le_bytes());
        blob.extend_from_slice(&5u16.to_le_bytes());
        blob.extend_from_slice(b"zz.qq");
        blob.push(1);
        blob.extend_from_slice(&1u32.to_le_bytes());
        blob.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(
            load_model(&to_document(&m), &blob),
            Err(GraphError::UnexpectedWeight(_))
        ));
    }
}
