//! Binary model format.
//!
//! ```text
//! "WGRD"                      4 bytes magic
//! u32 version (= 1)
//! u32 layer count
//! u32 channels, u32 height, u32 width     input shape
//! per layer:
//!   u8 kind tag   1 conv2d | 2 relu | 3 maxpool | 4 dense | 5 softmax
//!   conv2d:  u32 out_ch, in_ch, kernel_h, kernel_w, stride, padding,
//!            f32 weights[out_ch*in_ch*kh*kw], f32 bias[out_ch]
//!   maxpool: u32 window, stride
//!   dense:   u32 out, in, f32 weights[out*in], f32 bias[out]
//! ```
//!
//! All integers and floats are little-endian; arrays are row-major.

use std::path::Path;

use super::layer::{Conv2d, Dense, Layer, LayerKind};
use super::Model;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WGRD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, model.layers().len() as u32);
    for d in model.input_shape() {
        put_u32(&mut out, d as u32);
    }
    for layer in model.layers() {
        out.push(layer.kind().tag());
        match layer {
            Layer::Conv2d(c) => {
                for v in [c.out_channels, c.in_channels, c.kernel_h, c.kernel_w, c.stride, c.padding] {
                    put_u32(&mut out, v as u32);
                }
                put_f32s(&mut out, &c.weights);
                put_f32s(&mut out, &c.bias);
            }
            Layer::MaxPool { window, stride } => {
                put_u32(&mut out, *window as u32);
                put_u32(&mut out, *stride as u32);
            }
            Layer::Dense(d) => {
                put_u32(&mut out, d.out_features as u32);
                put_u32(&mut out, d.in_features as u32);
                put_f32s(&mut out, &d.weights);
                put_f32s(&mut out, &d.bias);
            }
            Layer::Relu | Layer::Softmax => {}
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| load("truncated header"))?;
    if magic != MAGIC {
        return Err(load("bad magic, expected WGRD"));
    }
    let header = |r: &mut Reader| r.u32().map_err(|_| load("truncated header"));
    let version = header(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(load(format!("unsupported version {version}")));
    }
    let count = header(&mut r)? as usize;
    let input = [header(&mut r)? as usize, header(&mut r)? as usize, header(&mut r)? as usize];

    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8().map_err(|_| load(format!("layer {i}: truncated layer header")))?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| load(format!("layer {i}: unknown kind tag {tag}")))?;
        let mut dims = |n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| r.u32().map(|v| v as usize).map_err(|_| load(format!("layer {i}: truncated shape fields"))))
                .collect()
        };
        let layer = match kind {
            LayerKind::Conv2d => {
                let d = dims(6)?;
                let n = d[0]
                    .checked_mul(d[1])
                    .and_then(|v| v.checked_mul(d[2]))
                    .and_then(|v| v.checked_mul(d[3]))
                    .ok_or_else(|| load(format!("layer {i}: shape overflow")))?;
                let weights = r.f32s(n).map_err(|_| load(format!("layer {i}: truncated weights")))?;
                let bias = r.f32s(d[0]).map_err(|_| load(format!("layer {i}: truncated bias")))?;
                Layer::Conv2d(Conv2d {
                    out_channels: d[0],
                    in_channels: d[1],
                    kernel_h: d[2],
                    kernel_w: d[3],
                    stride: d[4],
                    padding: d[5],
                    weights,
                    bias,
                })
            }
            LayerKind::MaxPool => {
                let d = dims(2)?;
                Layer::MaxPool { window: d[0], stride: d[1] }
            }
            LayerKind::Dense => {
                let d = dims(2)?;
                let n = d[0].checked_mul(d[1]).ok_or_else(|| load(format!("layer {i}: shape overflow")))?;
                let weights = r.f32s(n).map_err(|_| load(format!("layer {i}: truncated weights")))?;
                let bias = r.f32s(d[0]).map_err(|_| load(format!("layer {i}: truncated bias")))?;
                Layer::Dense(Dense { out_features: d[0], in_features: d[1], weights, bias })
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(load(format!("{} trailing bytes after layer {}", bytes.len() - r.pos, count.saturating_sub(1))));
    }
    Model::new(input, layers).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Load(msg),
        other => other,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

fn load(msg: impl Into<String>) -> Error {
    Error::Load(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Truncated;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).ok_or(Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, Truncated> {
        let raw = self.take(n.checked_mul(4).ok_or(Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
