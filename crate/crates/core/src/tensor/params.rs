use super::Tensor;
use crate::error::{CoreError, Result};
use crate::rng::keyed_rng;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Initialization scheme for a named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// uniform(−s, s) with s = sqrt(1/fan_in), fan_in = first shape dim.
    Uniform,
    Zeros,
}

/// Named learnable tensors. Initialization is keyed by (seed, path), so the
/// values a parameter gets do not depend on creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get_or_init(&mut self, path: &str, shape: &[usize], init: Init) -> &Tensor {
        if !self.params.contains_key(path) {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Uniform => {
                    let fan_in = shape[0].max(1);
                    let s = (1.0 / fan_in as f64).sqrt();
                    let mut rng = keyed_rng(self.seed, path);
                    let numel: usize = shape.iter().product();
                    let data = (0..numel).map(|_| rng.random_range(-s..s)).collect();
                    Tensor { shape: shape.to_vec(), data }
                }
            };
            self.params.insert(path.to_string(), t);
        }
        let t = &self.params[path];
        assert_eq!(t.shape, shape, "parameter {path} reused with different shape");
        t
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn set(&mut self, path: &str, t: Tensor) {
        self.params.insert(path.to_string(), t);
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Gradient-descent update: p -= lr * g, with the whole gradient set
    /// clipped beforehand to a global L2 norm of `clip`.
    pub fn sgd_step(&mut self, grads: &[(&str, &[f64])], lr: f64, clip: f64) {
        let norm: f64 = grads
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = if norm > clip && norm > 0.0 { clip / norm } else { 1.0 };
        for (path, g) in grads {
            if let Some(t) = self.params.get_mut(*path) {
                for (p, gv) in t.data.iter_mut().zip(g.iter()) {
                    *p -= lr * factor * gv;
                }
            }
        }
    }

    /// Perturb one coordinate in place; used by finite-difference checks.
    pub fn nudge(&mut self, path: &str, index: usize, delta: f64) {
        let t = self.params.get_mut(path).expect("unknown parameter");
        t.data[index] += delta;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "format_version: 1")?;
        writeln!(w, "seed: {}", self.seed)?;
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            write!(w, "{}|{}|", name, shape.join("x"))?;
            for (i, v) in t.data.iter().enumerate() {
                if i > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let parse_err = |line: usize, msg: String| CoreError::Parse { line: line + 1, msg };

        let (i0, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty checkpoint".into()))?;
        let header = header?;
        if header.trim() != "format_version: 1" {
            return Err(parse_err(i0, format!("bad header {header:?}")));
        }
        let (i1, seed_line) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing seed line".into()))?;
        let seed_line = seed_line?;
        let seed: u64 = seed_line
            .strip_prefix("seed: ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse_err(i1, format!("bad seed line {seed_line:?}")))?;

        let mut store = ParamStore::new(seed);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '|');
            let (name, shape_s, values_s) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(parse_err(i, "expected name|shape|values".into())),
            };
            let shape: Vec<usize> = shape_s
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i, format!("bad shape {shape_s:?}: {e}")))?;
            let data: Vec<f64> = values_s
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i, format!("bad value in {name}: {e}")))?;
            let t = Tensor::new(shape, data)
                .map_err(|e| parse_err(i, format!("{name}: {e}")))?;
            if store.params.insert(name.to_string(), t).is_some() {
                return Err(parse_err(i, format!("duplicate parameter {name}")));
            }
        }
        Ok(store)
    }
}
