//! Named parameter storage, per-step graph binding, and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic  b"MMETCKPT"
//! u32    format version
//! u32    metadata length, then that many bytes of UTF-8 JSON
//! u32    block count
//! blocks: u32 name length, name bytes, u32 rank, rank × u64 dims, numel × f64
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::rng::stream;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Normal(0, std) truncated to ±2 std by resampling (Box–Muller).
fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    /// Truncated-normal(0, `std`) initialization keyed by `(seed, name)`, so a
    /// parameter's initial value does not depend on what else the store holds.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        let mut rng = stream(seed, &[name_key(name)]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| truncated_normal(&mut rng, std)).collect();
        self.insert(name, Tensor::new(shape, data).expect("finite init"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies gradients into each tensor's grad buffer, clearing the others.
    pub fn attach_grads(&mut self, grads: &GradMap) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            match grads.get(name) {
                Some(g) => t.set_grad(g.clone())?,
                None => t.zero_grad(),
            }
        }
        Ok(())
    }

    /// Replaces values of every block present in both, requiring equal shapes.
    /// Returns the names that were loaded.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        for (name, t) in other.iter() {
            if let Some(mine) = self.params.get(name) {
                if mine.shape() != t.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint block {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        mine.shape()
                    )));
                }
            }
        }
        let mut loaded = Vec::new();
        for (name, t) in other.iter() {
            if let Some(mine) = self.params.get_mut(name) {
                *mine = t.clone();
                loaded.push(name.to_string());
            }
        }
        Ok(loaded)
    }

    pub fn bind<'g>(&'g self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound {
            graph,
            store: self,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }
}

/// Lazily records parameters on a graph the first time a forward pass uses them.
pub struct Bound<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable {
            self.graph.param(t)?
        } else {
            self.graph.constant(t.clone())?
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for `name` from now on instead of the stored tensor.
    pub fn bind_var(&self, name: &str, var: Var<'g>) -> Result<()> {
        let want = self.store.get(name)?.shape().to_vec();
        if var.shape() != want {
            return Err(Error::Integrity(format!(
                "{name}: bound value has shape {:?}, expected {want:?}",
                var.shape()
            )));
        }
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(())
    }

    /// Names of every parameter the forward pass touched.
    pub fn used(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Gradients of the parameters the loss actually reaches.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// Parameter blocks plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub blocks: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in self.blocks.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut blocks = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Data("checkpoint block name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Data(format!("checkpoint block {name}: {e}")))?;
            blocks.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint blocks".into()));
        }
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
