//! Named parameter storage and the text checkpoint container.
//!
//! Checkpoint layout (UTF-8, line oriented):
//!
//! ```text
//! delib-checkpoint 1
//! meta <key> <value>            (zero or more)
//! param <name> <rows> <cols>
//! <rows*cols space-separated values, row-major>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact. Parameter names are dot-separated paths
//! such as `enc.0.self_attn.q.w`; they are fixed by the layer constructors and
//! stable across runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAGIC: &str = "delib-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    /// Adds a `[rows, cols]` parameter drawn uniformly from `±sqrt(6 / (rows + cols))`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn write_checkpoint<W: Write>(
        &self,
        mut out: W,
        meta: &BTreeMap<String, String>,
    ) -> Result<()> {
        writeln!(out, "{MAGIC}")?;
        for (k, v) in meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(TensorError::Checkpoint(format!("bad metadata entry `{k}`")));
            }
            writeln!(out, "meta {k} {v}")?;
        }
        let mut line = String::new();
        for p in &self.params {
            let (r, c) = p.value.dims()?;
            writeln!(out, "param {} {} {}", p.name, r, c)?;
            line.clear();
            for (i, x) in p.value.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{x}").expect("writing to a String");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bad = |msg: String| TensorError::Checkpoint(msg);
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim_end() == MAGIC => {}
            _ => return Err(bad("missing header".into())),
        }
        let mut store = ParamStore::new();
        let mut meta = BTreeMap::new();
        while let Some(line) = lines.next() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad("meta without key".into()))?;
                    meta.insert(key.to_string(), parts.next().unwrap_or("").to_string());
                }
                Some("param") => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 4 {
                        return Err(bad(format!("malformed param line `{line}`")));
                    }
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| bad(format!("bad dimension `{s}`")))
                    };
                    let (rows, cols) = (parse(fields[2])?, parse(fields[3])?);
                    let values = lines
                        .next()
                        .ok_or_else(|| bad(format!("missing values for `{}`", fields[1])))??;
                    let data = values
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value `{s}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    store.add(fields[1], Tensor::matrix(rows, cols, data)?)?;
                }
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w, meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }

    /// Copies values from `other` for every parameter name present in both.
    /// Shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other.id(&p.name)?;
            let src = other.get(id);
            if src.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add_glorot("enc.0.w", 3, 5, &mut rng).unwrap();
        store.add("tiny", Tensor::row_vector(vec![1e-300, -0.1, 1.0 / 3.0])).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("hidden".to_string(), "100".to_string());
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &meta).unwrap();
        let (back, meta_back) = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add_filled("a", 1, 1, 0.0).unwrap();
        assert!(matches!(
            store.add_filled("a", 1, 1, 0.0),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let text = "delib-checkpoint 1\nparam w 2 2\n1 2 3\n";
        assert!(ParamStore::read_checkpoint(text.as_bytes()).is_err());
        assert!(ParamStore::read_checkpoint("nope\n".as_bytes()).is_err());
    }
}
