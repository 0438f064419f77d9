use std::io::Read;

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"MSRP";
const FORMAT_VERSION: u32 = 1;

/// One named parameter tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors. The tensor index is its id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its id.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<usize> {
        let name = name.into();
        ensure!(data.len() == rows * cols, Shape, "tensor {name}: {rows}x{cols} but {} values", data.len());
        ensure!(data.iter().all(|x| x.is_finite()), Param, "tensor {name} has non-finite entries");
        self.tensors.push(Tensor { name, rows, cols, data });
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All values concatenated in declared order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(flat.len() == self.num_values(), Shape, "flat vector has {} values, expected {}", flat.len(), self.num_values());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Serializes to the checkpoint format: `MSRP`, u32 version, u32 count,
    /// then per tensor a u32-length name, u32 rows, u32 cols and the values as
    /// little-endian f64. All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(Error::Decode("truncated tensor name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Decode("tensor name is not utf-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Decode("tensor size overflow".into()))?;
            if n.saturating_mul(8) > r.len() {
                return Err(Error::Decode(format!("truncated data for tensor {name}")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params.push(name, rows, cols, data).map_err(|e| Error::Decode(e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::Decode(format!("{} trailing bytes", r.len())));
        }
        Ok(params)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Decode("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient buffers aligned with a [`Params`] store. A tensor's buffer is
/// allocated on first accumulation; untouched tensors report `None`.
#[derive(Debug, Clone)]
pub struct Grads {
    sizes: Vec<usize>,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn for_params(params: &Params) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self { bufs: vec![None; sizes.len()], sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.bufs[id].as_deref()
    }

    /// Mutable buffer for tensor `id`, zero-initialized on first use.
    pub fn slot(&mut self, id: usize) -> &mut [f64] {
        let n = self.sizes[id];
        self.bufs[id].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for id in 0..self.len() {
            if let Some(g) = other.get(id) {
                let dst = self.slot(id);
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += s * v;
                }
            }
        }
    }

    /// Dense flat view in declared order, zeros for untouched tensors.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.sizes.iter().sum());
        for (id, &n) in self.sizes.iter().enumerate() {
            match &self.bufs[id] {
                Some(b) => out.extend_from_slice(b),
                None => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        out
    }
}

/// Loss value with gradients for every parameter tensor it touched.
#[derive(Debug, Clone)]
pub struct GradPack {
    pub loss: f64,
    pub grads: Grads,
}
