//! Named parameter sets and their binary container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use uvc_tensor::Tensor;

use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 8] = b"UVCBLOB1";

/// Parameters of one network, keyed by dotted path (`enc1.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Looks up a parameter. Architectures only ask for names they created,
    /// so a miss is a programming error.
    pub fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copy whose tensors are constants: gradients do not reach them.
    pub fn frozen(&self) -> Params {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.detach())).collect() }
    }

    /// Copy whose tensors are fresh trainable leaves.
    pub fn trainable(&self) -> Params {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.detach().requires_grad_leaf())).collect() }
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f64>) {
        let t = self.map.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(t.numel(), data.len(), "size mismatch for {name}");
        t.replace_data(data);
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    pub fn to_raw(&self) -> RawTensors {
        self.map.iter().map(|(k, v)| (k.clone(), (v.shape().to_vec(), v.to_vec()))).collect()
    }

    pub fn from_raw(raw: RawTensors, requires_grad: bool) -> Params {
        let map = raw
            .into_iter()
            .map(|(k, (shape, data))| {
                let t = Tensor::from_vec(data, &shape);
                (k, if requires_grad { t.requires_grad_leaf() } else { t })
            })
            .collect();
        Params { map }
    }

    /// SHA-256 of the serialized parameters.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(encode_blob(&self.to_raw())))
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &Params, what: &str) -> Result<()> {
        for (k, v) in &self.map {
            match other.map.get(k) {
                None => return Err(Error::Load(format!("{what}: parameter {k} missing from checkpoint"))),
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::Load(format!(
                        "{what}: parameter {k} has shape {:?} in checkpoint, expected {:?}",
                        o.shape(),
                        v.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.map.keys().find(|k| !self.map.contains_key(*k)) {
            return Err(Error::Load(format!("{what}: unexpected parameter {extra} in checkpoint")));
        }
        Ok(())
    }
}

/// Name → (shape, values), the serialization currency.
pub type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Builds parameter sets with a fixed initialization scheme.
pub struct Init<'a, R: Rng> {
    rng: &'a mut R,
    params: Params,
    std: f64,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R, std: f64) -> Self {
        Self { rng, params: Params::new(), std }
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn weight(&mut self, name: String, shape: &[usize]) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.std * truncated_normal(self.rng)).collect();
        self.params.insert(name, Tensor::from_vec(data, shape).requires_grad_leaf());
    }

    pub fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, v).requires_grad_leaf());
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

pub fn encode_blob(raw: &RawTensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(raw.len() as u64).to_le_bytes());
    for (name, (shape, data)) in raw {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<RawTensors> {
    match bytes.strip_prefix(BLOB_MAGIC) {
        Some(rest) => decode_entries(rest),
        None => Err(Error::Load("corrupt parameter blob: bad magic".into())),
    }
}

fn decode_entries(mut cur: &[u8]) -> Result<RawTensors> {
    fn read_u64(cur: &mut &[u8]) -> Result<u64> {
        let mut buf = [0u8; 8];
        cur.read_exact(&mut buf).map_err(|_| Error::Load("corrupt parameter blob: truncated".into()))?;
        Ok(u64::from_le_bytes(buf))
    }
    let count = read_u64(&mut cur)?;
    let mut raw = RawTensors::new();
    for _ in 0..count {
        let len = read_u64(&mut cur)? as usize;
        if len > cur.len() {
            return Err(Error::Load("corrupt parameter blob: truncated name".into()));
        }
        let (name, rest) = cur.split_at(len);
        cur = rest;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Load("corrupt parameter blob: name".into()))?;
        let rank = read_u64(&mut cur)? as usize;
        if rank > 8 {
            return Err(Error::Load(format!("corrupt parameter blob: rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut cur).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > cur.len()) {
            return Err(Error::Load(format!("corrupt parameter blob: truncated data for {name}")));
        }
        let data = (0..n).map(|_| read_u64(&mut cur).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        raw.insert(name, (shape, data));
    }
    if !cur.is_empty() {
        return Err(Error::Load("corrupt parameter blob: trailing bytes".into()));
    }
    Ok(raw)
}

pub fn write_blob(path: &Path, raw: &RawTensors) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_blob(raw)).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<RawTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes)
}
