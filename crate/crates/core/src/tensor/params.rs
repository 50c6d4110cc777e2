use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Result, Tensor, TensorError};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors of one model.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Registers a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid parameter shape");
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Writes `<stem>.bin` (little-endian f64, concatenated in registration
    /// order) and `<stem>.idx` (one `name offset shape` line per parameter).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bin = Vec::with_capacity(self.num_scalars() * 8);
        let mut idx = String::new();
        let mut offset = 0usize;
        for (name, value) in self.names.iter().zip(&self.values) {
            for v in value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
            let shape = if dims.is_empty() {
                "scalar".to_string()
            } else {
                dims.join("x")
            };
            idx.push_str(&format!("{name} {offset} {shape}\n"));
            offset += value.numel();
        }
        fs::write(stem.with_extension("bin"), bin)?;
        let mut f = fs::File::create(stem.with_extension("idx"))?;
        f.write_all(idx.as_bytes())?;
        Ok(())
    }

    /// Overwrites every parameter of this store from a saved file pair. The
    /// saved set of names and shapes must match exactly.
    pub fn load_into(&mut self, stem: &Path) -> Result<()> {
        let loaded = Self::load(stem)?;
        if loaded.names != self.names {
            return Err(TensorError::Index(format!(
                "parameter names differ from model layout ({} saved, {} expected)",
                loaded.names.len(),
                self.names.len()
            )));
        }
        for (dst, src) in self.values.iter_mut().zip(loaded.values) {
            if dst.shape() != src.shape() {
                return Err(TensorError::Index(format!(
                    "shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = fs::read(stem.with_extension("bin"))?;
        let idx = fs::read_to_string(stem.with_extension("idx"))?;
        if bin.len() % 8 != 0 {
            return Err(TensorError::Index(
                "binary length not a multiple of 8".into(),
            ));
        }
        let floats: Vec<f64> = bin
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = Self::new();
        for (lineno, line) in idx.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || TensorError::Index(format!("line {}: {line:?}", lineno + 1));
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(bad)?;
            let offset: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let shape_s = parts.next().ok_or_else(bad)?;
            let shape: Vec<usize> = if shape_s == "scalar" {
                vec![]
            } else {
                shape_s
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            };
            let n: usize = shape.iter().product();
            let data = floats.get(offset..offset + n).ok_or_else(bad)?.to_vec();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}
