use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
}

impl ParamTensor {
    pub fn shape(&self) -> Vec<usize> {
        vec![self.value.rows(), self.value.cols()]
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, ParamTensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of parameter `{name}`")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params
            .insert(name.clone(), ParamTensor { name, value });
        Ok(())
    }

    /// Glorot-uniform weights: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
        self.insert(name, value)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, index: usize) -> &ParamTensor {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.params[index].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_entries(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> + '_ {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.params.keys().map(String::as_str)
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .params
                .values()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// Writes `params.json` (tensor index) and `params.bin` (little-endian f64).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.params.len());
        let mut bytes = Vec::with_capacity(self.num_entries() * 8);
        for p in self.params.values() {
            index.push(TensorEntry {
                name: p.name.clone(),
                shape: p.shape(),
                offset: bytes.len() / 8,
                length: p.value.len(),
            });
            for x in p.value.as_slice() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let json_path = dir.join("params.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        let bin_path = dir.join("params.bin");
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(dir: impl AsRef<Path>, rng_seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let json_path = dir.join("params.json");
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let index: Vec<TensorEntry> =
            serde_json::from_str(&text).map_err(|e| Error::parse(&json_path, e))?;
        let bin_path = dir.join("params.bin");
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::parse(&bin_path, "length is not a multiple of 8"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut store = Self::new(rng_seed);
        for entry in index {
            let [rows, cols] = entry.shape[..] else {
                return Err(Error::parse(
                    &json_path,
                    format!("tensor `{}` is not two-dimensional", entry.name),
                ));
            };
            if rows * cols != entry.length || entry.offset + entry.length > values.len() {
                return Err(Error::parse(
                    &json_path,
                    format!("tensor `{}` has an inconsistent extent", entry.name),
                ));
            }
            let data = values[entry.offset..entry.offset + entry.length].to_vec();
            store
                .insert(entry.name, Matrix::from_vec(rows, cols, data))
                .map_err(|e| Error::parse(&json_path, e))?;
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Gradients aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, index: usize) -> &Matrix {
        &self.grads[index]
    }

    pub(crate) fn accumulate(&mut self, index: usize, g: &Matrix) {
        self.grads[index].add_assign(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> + '_ {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Matrix> + '_ {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`; used to reduce per-worker gradients in a
    /// fixed order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}
