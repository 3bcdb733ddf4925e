//! Dense row-major f64 tensors with a tape-based reverse-mode autodiff engine.
//!
//! The `Tensor` struct is a plain shape + data buffer. Differentiable
//! computation goes through [`tape::GradTape`], which records every op and
//! replays the chain rule backwards on demand.

mod kernels;
mod special;
mod tape;

pub use kernels::{conv2d_forward, conv_out_dim, matmul_raw, Conv2dMeta};
pub use special::{erf, gelu_scalar, gelu_scalar_grad};
pub use tape::{GradTape, Var};

use crate::error::{Error, Result};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Dense row-major tensor of f64 values.
///
/// `grad` is populated by `GradTape::backward` for tensors that participate
/// in a backward pass with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build from an explicit data buffer. The buffer length must match the
    /// shape's element count.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Single-element tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Fill each element from a function of its flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() called on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    /// Error if any element is NaN or infinite. `context` names the producer.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {} at flat index {} in {}",
                    v, i, context
                )));
            }
        }
        Ok(())
    }

    /// Save as a binary blob: one-line JSON shape header followed by the raw
    /// little-endian f64 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_blob(path, &[("tensor".to_string(), self)])
    }

    /// Load a tensor previously written by [`Tensor::save`].
    pub fn load(path: &Path) -> Result<Tensor> {
        let mut entries = read_blob(path)?;
        if entries.len() != 1 {
            return Err(Error::Load(format!(
                "expected a single tensor in {}, found {}",
                path.display(),
                entries.len()
            )));
        }
        Ok(entries.remove(0).1)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobHeader {
    version: u32,
    tensors: Vec<BlobEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write a set of named tensors as a single blob: a one-line JSON header
/// listing names and shapes, then the concatenated little-endian f64 data in
/// header order.
pub fn write_blob(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let header = BlobHeader {
        version: 1,
        tensors: entries
            .iter()
            .map(|(name, t)| BlobEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| Error::Load(format!("blob header encode: {}", e)))?;
    out.push(b'\n');
    for (_, t) in entries {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a blob written by [`write_blob`], returning tensors in header order.
pub fn read_blob(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Load(format!("{}: missing blob header", path.display())))?;
    let header: BlobHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Load(format!("{}: bad blob header: {}", path.display(), e)))?;
    if header.version != 1 {
        return Err(Error::Load(format!(
            "{}: unsupported blob version {}",
            path.display(),
            header.version
        )));
    }
    let mut offset = newline + 1;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(Error::Load(format!(
                "{}: blob truncated reading tensor {}",
                path.display(),
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        out.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        offset = end;
    }
    Ok(out)
}

/// Iterate the lanes of `shape` along `axis`: calls `f(base, stride)` once
/// per lane, where lane element `i` lives at flat index `base + i * stride`.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let axis_len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let block = axis_len * stride;
    for o in 0..outer {
        for inner in 0..stride {
            f(o * block + inner, stride);
        }
    }
}
