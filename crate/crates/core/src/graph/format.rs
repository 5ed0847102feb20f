//! Model file format.
//!
//! ```text
//! "EXGR"                 4-byte magic
//! header_len: u32 LE     byte length of the JSON header
//! header: UTF-8 JSON     format version, class count, input shape, layer specs
//! blob                   little-endian f32 weights; layers reference it by byte offset/length
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, ExitGraph, ExitHead, Layer, Segment};
use crate::error::{Error, Result};
use crate::ops::{Padding, PoolKind};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"EXGR";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const KIND: &str = "model";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: KIND,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    ReorderTimeAntenna,
    Conv2d {
        shape: Vec<usize>,
        stride: [usize; 2],
        padding: Padding,
        activation: Activation,
        weights: BlobRef,
        bias: BlobRef,
    },
    DepthwiseConv2d {
        shape: Vec<usize>,
        stride: [usize; 2],
        padding: Padding,
        activation: Activation,
        weights: BlobRef,
        bias: BlobRef,
    },
    Pool {
        pool: PoolKind,
        window: [usize; 2],
        stride: [usize; 2],
    },
    Dense {
        shape: Vec<usize>,
        activation: Activation,
        weights: BlobRef,
        bias: BlobRef,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
    pub segments: Vec<Vec<LayerSpec>>,
    pub heads: Vec<Vec<LayerSpec>>,
    pub blob_len: usize,
}

struct BlobWriter(Vec<u8>);

impl BlobWriter {
    fn push(&mut self, values: &[f32]) -> BlobRef {
        let offset = self.0.len();
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            len: values.len() * 4,
        }
    }
}

fn layer_spec(layer: &Layer, blob: &mut BlobWriter) -> LayerSpec {
    match layer {
        Layer::ReorderTimeAntenna => LayerSpec::ReorderTimeAntenna,
        Layer::Conv2d { kernel, bias, stride, padding, activation } => LayerSpec::Conv2d {
            shape: kernel.shape().to_vec(),
            stride: [stride.0, stride.1],
            padding: *padding,
            activation: *activation,
            weights: blob.push(kernel.data()),
            bias: blob.push(bias),
        },
        Layer::DepthwiseConv2d { kernel, bias, stride, padding, activation } => LayerSpec::DepthwiseConv2d {
            shape: kernel.shape().to_vec(),
            stride: [stride.0, stride.1],
            padding: *padding,
            activation: *activation,
            weights: blob.push(kernel.data()),
            bias: blob.push(bias),
        },
        Layer::Pool { kind, window, stride } => LayerSpec::Pool {
            pool: *kind,
            window: [window.0, window.1],
            stride: [stride.0, stride.1],
        },
        Layer::Dense { weights, bias, activation } => LayerSpec::Dense {
            shape: weights.shape().to_vec(),
            activation: *activation,
            weights: blob.push(weights.data()),
            bias: blob.push(bias),
        },
        Layer::Softmax => LayerSpec::Softmax,
    }
}

fn read_floats(blob: &[u8], r: BlobRef, expected: usize) -> Result<Vec<f32>> {
    if r.len != expected * 4 {
        return Err(Error::Inconsistent(format!(
            "blob range at {} holds {} bytes, layer needs {}",
            r.offset,
            r.len,
            expected * 4
        )));
    }
    let bytes = r
        .offset
        .checked_add(r.len)
        .and_then(|end| blob.get(r.offset..end))
        .ok_or_else(|| malformed(format!("blob range {}+{} exceeds blob of {} bytes", r.offset, r.len, blob.len())))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn tensor_from(blob: &[u8], shape: &[usize], r: BlobRef) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = read_floats(blob, r, n)?;
    Tensor::new(shape.to_vec(), data).map_err(|e| Error::Inconsistent(e.to_string()))
}

fn layer_from(spec: &LayerSpec, blob: &[u8]) -> Result<Layer> {
    let cout = |shape: &[usize]| shape.last().copied().unwrap_or(0);
    Ok(match spec {
        LayerSpec::ReorderTimeAntenna => Layer::ReorderTimeAntenna,
        LayerSpec::Conv2d { shape, stride, padding, activation, weights, bias } => Layer::Conv2d {
            kernel: tensor_from(blob, shape, *weights)?,
            bias: read_floats(blob, *bias, cout(shape))?,
            stride: (stride[0], stride[1]),
            padding: *padding,
            activation: *activation,
        },
        LayerSpec::DepthwiseConv2d { shape, stride, padding, activation, weights, bias } => Layer::DepthwiseConv2d {
            kernel: tensor_from(blob, shape, *weights)?,
            bias: read_floats(blob, *bias, cout(shape))?,
            stride: (stride[0], stride[1]),
            padding: *padding,
            activation: *activation,
        },
        LayerSpec::Pool { pool, window, stride } => Layer::Pool {
            kind: *pool,
            window: (window[0], window[1]),
            stride: (stride[0], stride[1]),
        },
        LayerSpec::Dense { shape, activation, weights, bias } => Layer::Dense {
            weights: tensor_from(blob, shape, *weights)?,
            bias: read_floats(blob, *bias, cout(shape))?,
            activation: *activation,
        },
        LayerSpec::Softmax => Layer::Softmax,
    })
}

pub fn write_model(graph: &ExitGraph, mut out: impl Write) -> Result<()> {
    let mut blob = BlobWriter(Vec::new());
    let mut specs = |layers: &[Layer]| layers.iter().map(|l| layer_spec(l, &mut blob)).collect::<Vec<_>>();
    let segments: Vec<_> = graph.segments().iter().map(|s| specs(&s.layers)).collect();
    let heads: Vec<_> = graph.heads().iter().map(|h| specs(&h.layers)).collect();
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        class_count: graph.class_count(),
        input_shape: graph.input_shape().to_vec(),
        segments,
        heads,
        blob_len: blob.0.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| malformed(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| malformed("header exceeds 4 GiB"))?;
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&header_len.to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&blob.0)?;
    Ok(())
}

pub fn read_model(mut input: impl Read) -> Result<ExitGraph> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_model(&bytes)
}

pub fn parse_model(bytes: &[u8]) -> Result<ExitGraph> {
    if bytes.len() < 8 {
        return Err(malformed(format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(malformed("bad magic bytes"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let json = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| malformed("truncated header"))?;
    // Version is checked before the full schema so old/new headers get a version diagnostic.
    let probe: serde_json::Value = serde_json::from_slice(json).map_err(|e| malformed(format!("header JSON: {e}")))?;
    let version = probe
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| malformed("header lacks format_version"))?;
    if version != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::Version {
            kind: KIND,
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let header: ModelHeader = serde_json::from_value(probe).map_err(|e| malformed(format!("header schema: {e}")))?;
    let blob = &bytes[8 + header_len..];
    if blob.len() != header.blob_len {
        return Err(malformed(format!(
            "weight blob is {} bytes, header declares {}",
            blob.len(),
            header.blob_len
        )));
    }
    let segments = header
        .segments
        .iter()
        .map(|specs| specs.iter().map(|s| layer_from(s, blob)).collect::<Result<_>>().map(|layers| Segment { layers }))
        .collect::<Result<Vec<_>>>()?;
    let heads = header
        .heads
        .iter()
        .map(|specs| specs.iter().map(|s| layer_from(s, blob)).collect::<Result<_>>().map(|layers| ExitHead { layers }))
        .collect::<Result<Vec<_>>>()?;
    ExitGraph::new(header.input_shape, header.class_count, segments, heads)
}

pub fn save_model(graph: &ExitGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(graph, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ExitGraph> {
    parse_model(&fs::read(path)?)
}
