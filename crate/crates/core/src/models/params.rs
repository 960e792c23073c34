//! Parameter storage and the flat `ParamVector` exchange format.
//!
//! On-disk / on-wire layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "FGPV"
//! version    u32      1
//! entries    u32
//!   name_len u32, name (UTF-8), ndim u32, dims (u64 each)   per entry
//! count      u64      total number of values
//! checksum   32 bytes SHA-256 over the layout records and value bytes
//! values     count x f64
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{numel, Array, Graph, Tensor};

use super::ModelError;

pub const PV_MAGIC: &[u8; 4] = b"FGPV";
pub const PV_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array,
    /// Buffers (batch-norm running statistics) are serialized and averaged
    /// with the weights but never receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for a store's trainable parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    handles: Vec<Option<Tensor>>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> Tensor {
        self.handles[id.0].expect("parameter is a buffer and has no graph handle")
    }

    pub fn handles(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.handles
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.map(|t| (ParamId(i), t)))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts trainable parameters into `g`, as differentiable leaves when
    /// `requires_grad` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Binding {
        let handles = self
            .params
            .iter()
            .map(|p| p.trainable.then(|| g.leaf(p.value.clone(), requires_grad)))
            .collect();
        Binding { handles }
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        self.params
            .iter()
            .map(|p| LayoutEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect()
    }

    pub fn flatten(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.value_count());
        for p in &self.params {
            values.extend_from_slice(p.value.data());
        }
        ParamVector::new(self.layout(), values).expect("store layout is consistent")
    }

    pub fn unflatten(&mut self, pv: &ParamVector) -> Result<(), ModelError> {
        pv.verify()?;
        let own = self.layout();
        if own.len() != pv.layout.len() {
            let first = own
                .iter()
                .zip(&pv.layout)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.name.clone())
                .or_else(|| own.get(pv.layout.len()).map(|e| e.name.clone()))
                .or_else(|| pv.layout.get(own.len()).map(|e| e.name.clone()))
                .unwrap_or_default();
            return Err(ModelError::LayoutMismatch {
                param: first,
                detail: format!("{} parameters expected, {} supplied", own.len(), pv.layout.len()),
            });
        }
        for (a, b) in own.iter().zip(&pv.layout) {
            if a != b {
                return Err(ModelError::LayoutMismatch {
                    param: a.name.clone(),
                    detail: format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape),
                });
            }
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&pv.values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Flat, ordered, checksummed copy of every parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Vec<LayoutEntry>,
    values: Vec<f64>,
    checksum: [u8; 32],
}

fn layout_bytes(layout: &[LayoutEntry], out: &mut Vec<u8>) {
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for e in layout {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
}

fn compute_checksum(layout: &[LayoutEntry], values: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut lb = Vec::new();
    layout_bytes(layout, &mut lb);
    h.update(&lb);
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    h.update(&buf);
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Format("truncated parameter vector".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl ParamVector {
    pub fn new(layout: Vec<LayoutEntry>, values: Vec<f64>) -> Result<Self, ModelError> {
        let expected: usize = layout.iter().map(|e| numel(&e.shape)).sum();
        if expected != values.len() {
            return Err(ModelError::Format(format!(
                "layout describes {expected} values but {} were given",
                values.len()
            )));
        }
        let checksum = compute_checksum(&layout, &values);
        Ok(ParamVector {
            layout,
            values,
            checksum,
        })
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn checksum(&self) -> &[u8; 32] {
        &self.checksum
    }

    pub fn checksum_hex(&self) -> String {
        hex(&self.checksum)
    }

    pub fn verify(&self) -> Result<(), ModelError> {
        if compute_checksum(&self.layout, &self.values) != self.checksum {
            return Err(ModelError::ChecksumMismatch);
        }
        Ok(())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ModelError> {
        ParamVector::new(self.layout.clone(), values)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Joins vectors, prefixing every parameter name with `prefix.`.
    pub fn concat(parts: &[(&str, &ParamVector)]) -> Self {
        let mut layout = Vec::new();
        let mut values = Vec::new();
        for (prefix, pv) in parts {
            for e in &pv.layout {
                layout.push(LayoutEntry {
                    name: format!("{prefix}.{}", e.name),
                    shape: e.shape.clone(),
                });
            }
            values.extend_from_slice(&pv.values);
        }
        ParamVector::new(layout, values).expect("concatenated layout is consistent")
    }

    /// Extracts the parameters named `prefix.*`, stripping the prefix.
    pub fn split(&self, prefix: &str) -> Result<Self, ModelError> {
        let head = format!("{prefix}.");
        let mut layout = Vec::new();
        let mut values = Vec::new();
        let mut offset = 0;
        for e in &self.layout {
            let n = numel(&e.shape);
            if let Some(rest) = e.name.strip_prefix(&head) {
                layout.push(LayoutEntry {
                    name: rest.to_string(),
                    shape: e.shape.clone(),
                });
                values.extend_from_slice(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        if layout.is_empty() {
            return Err(ModelError::LayoutMismatch {
                param: prefix.to_string(),
                detail: "no parameters with this prefix".into(),
            });
        }
        ParamVector::new(layout, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.values.len() * 8);
        out.extend_from_slice(PV_MAGIC);
        out.extend_from_slice(&PV_VERSION.to_le_bytes());
        layout_bytes(&self.layout, &mut out);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.checksum);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != PV_MAGIC {
            return Err(ModelError::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != PV_VERSION {
            return Err(ModelError::Format(format!("unsupported format version {version}")));
        }
        let entries = r.u32()? as usize;
        let mut layout = Vec::with_capacity(entries.min(r.remaining() / 8));
        let mut expected: u64 = 0;
        for _ in 0..entries {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(r.remaining() / 8));
            let mut count: u64 = 1;
            for _ in 0..ndim {
                let d = r.u64()?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| ModelError::Format("shape overflows".into()))?;
                shape.push(d as usize);
            }
            expected = expected
                .checked_add(count)
                .ok_or_else(|| ModelError::Format("shape overflows".into()))?;
            layout.push(LayoutEntry { name, shape });
        }
        let count = r.u64()?;
        if count != expected {
            return Err(ModelError::Format(format!(
                "value count {count} disagrees with layout total {expected}"
            )));
        }
        let checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
        if (r.remaining() as u64) < count.saturating_mul(8) {
            return Err(ModelError::Format("truncated parameter vector".into()));
        }
        let raw = r.take(count as usize * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.remaining() != 0 {
            return Err(ModelError::Format("trailing bytes after values".into()));
        }
        let pv = ParamVector {
            layout,
            values,
            checksum,
        };
        pv.verify()?;
        Ok(pv)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Format(format!("{}: {e}", path.display())))?;
        ParamVector::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        ParamVector::new(
            vec![
                LayoutEntry {
                    name: "a".into(),
                    shape: vec![2, 2],
                },
                LayoutEntry {
                    name: "b".into(),
                    shape: vec![3],
                },
            ],
            vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 7.0, -0.0],
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let pv = sample();
        let back = ParamVector::from_bytes(&pv.to_bytes()).unwrap();
        assert_eq!(back, pv);
        assert_eq!(back.values()[6].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupted_value_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            ParamVector::from_bytes(&bytes),
            Err(ModelError::ChecksumMismatch)
        ));
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let bytes = sample().to_bytes();
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamVector::from_bytes(&bad).is_err());
    }

    #[test]
    fn huge_declared_count_rejected_before_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(PV_MAGIC);
        bytes.extend_from_slice(&PV_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(u64::MAX / 16).to_le_bytes());
        bytes.extend_from_slice(&(u64::MAX / 16).to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        assert!(ParamVector::from_bytes(&bytes).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let pv = sample();
        let joined = ParamVector::concat(&[("g", &pv), ("d", &pv)]);
        assert_eq!(joined.len(), 2 * pv.len());
        assert_eq!(joined.split("g").unwrap(), pv);
        assert_eq!(joined.split("d").unwrap(), pv);
        assert!(joined.split("x").is_err());
    }
}
