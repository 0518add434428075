//! Model serialization (versioned JSON with base64 weight payloads) and the
//! IDX image/label file format.

use super::*;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2, Array3, Array4};

const MODEL_FORMAT: &str = "layered-model";
const MODEL_VERSION: u32 = 1;

fn f64s_to_b64(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn b64_to_f64s(s: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| NnError::Io(format!("base64: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(NnError::Io(format!(
            "expected {} weight bytes, got {}",
            expect * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    input: InputShape,
    layers: Vec<LayerDoc>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDoc {
    Dense { out: usize, input: usize, weights: String, bias: String },
    Conv2d { shape: [usize; 4], padding: Padding, kernels: String, bias: String },
    Pool { pool: PoolKind, size: usize },
    Activation { activation: Activation },
    Flatten,
    Softmax,
}

impl LayeredModel {
    pub fn to_json(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, bias } => LayerDoc::Dense {
                    out: weights.nrows(),
                    input: weights.ncols(),
                    weights: f64s_to_b64(weights.iter().copied()),
                    bias: f64s_to_b64(bias.iter().copied()),
                },
                Layer::Conv2d { kernels, bias, padding } => {
                    let (o, i, kh, kw) = kernels.dim();
                    LayerDoc::Conv2d {
                        shape: [o, i, kh, kw],
                        padding: *padding,
                        kernels: f64s_to_b64(kernels.iter().copied()),
                        bias: f64s_to_b64(bias.iter().copied()),
                    }
                }
                Layer::Pool { kind, size } => LayerDoc::Pool { pool: *kind, size: *size },
                Layer::Activation(a) => LayerDoc::Activation { activation: *a },
                Layer::Flatten => LayerDoc::Flatten,
                Layer::SoftmaxOutput => LayerDoc::Softmax,
            })
            .collect();
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            input: self.input_shape,
            layers,
        };
        serde_json::to_string(&doc).expect("model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<LayeredModel> {
        let doc: ModelDoc = serde_json::from_str(s).map_err(|e| NnError::Io(e.to_string()))?;
        if doc.format != MODEL_FORMAT {
            return Err(NnError::Io(format!("unknown format {:?}", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(NnError::Io(format!("unsupported version {}", doc.version)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            layers.push(match l {
                LayerDoc::Dense { out, input, weights, bias } => Layer::Dense {
                    weights: Array2::from_shape_vec((out, input), b64_to_f64s(&weights, out * input)?)
                        .map_err(|e| NnError::Io(e.to_string()))?,
                    bias: Array1::from_vec(b64_to_f64s(&bias, out)?),
                },
                LayerDoc::Conv2d { shape: [o, i, kh, kw], padding, kernels, bias } => Layer::Conv2d {
                    kernels: Array4::from_shape_vec(
                        (o, i, kh, kw),
                        b64_to_f64s(&kernels, o * i * kh * kw)?,
                    )
                    .map_err(|e| NnError::Io(e.to_string()))?,
                    bias: Array1::from_vec(b64_to_f64s(&bias, o)?),
                    padding,
                },
                LayerDoc::Pool { pool, size } => Layer::Pool { kind: pool, size },
                LayerDoc::Activation { activation } => Layer::Activation(activation),
                LayerDoc::Flatten => Layer::Flatten,
                LayerDoc::Softmax => Layer::SoftmaxOutput,
            });
        }
        let model = LayeredModel { input_shape: doc.input, layers };
        model.validate()?;
        Ok(model)
    }
}

const IDX_IMAGES_MAGIC: [u8; 4] = [0, 0, 0x08, 3];
const IDX_LABELS_MAGIC: [u8; 4] = [0, 0, 0x08, 1];

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| NnError::Io("truncated idx header".into()))
}

/// Parse IDX image bytes into single-channel maps with pixels in [0, 1].
pub fn read_idx_images(bytes: &[u8]) -> Result<Vec<Array3<f64>>> {
    if bytes.len() < 16 || bytes[..4] != IDX_IMAGES_MAGIC {
        return Err(NnError::Io("not an idx image file".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let expect = 16 + n * h * w;
    if bytes.len() != expect {
        return Err(NnError::Io(format!("idx image payload: expected {expect} bytes, got {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * h * w;
        let img = Array3::from_shape_vec(
            (1, h, w),
            bytes[start..start + h * w].iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .map_err(|e| NnError::Io(e.to_string()))?;
        out.push(img);
    }
    Ok(out)
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 || bytes[..4] != IDX_LABELS_MAGIC {
        return Err(NnError::Io("not an idx label file".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(NnError::Io("idx label payload length".into()));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Serialize single-channel maps (values clamped to [0, 1]) as IDX images.
pub fn write_idx_images(images: &[Array3<f64>]) -> Result<Vec<u8>> {
    let (h, w) = match images.first() {
        Some(img) => {
            let (c, h, w) = img.dim();
            if c != 1 {
                return Err(NnError::Io("idx images are single-channel".into()));
            }
            (h, w)
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    out.extend_from_slice(&IDX_IMAGES_MAGIC);
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        if img.dim() != (1, h, w) {
            return Err(NnError::Io("inconsistent image shapes".into()));
        }
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(NnError::Io(format!("label {l} does not fit one byte")));
        }
        out.push(l as u8);
    }
    Ok(out)
}
