//! Minimal numerical core: named f64 parameter arrays with Adam state and
//! freeze flags, a reverse-mode tape over the fixed layer set every model
//! needs, and a finite-difference gradient checker.
//!
//! Everything is 64-bit and deterministic: same inputs and seeds give
//! bit-identical values, tapes, and optimizer steps.

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{NodeId, Tape};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise helpers shared by the tape forward pass and the plain
/// inference paths, so both compute literally the same floats.
pub(crate) mod math {
    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// ReLU derivative convention: exactly 0 at x = 0.
    pub fn relu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.0
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn l2_norm(x: &[f64]) -> f64 {
        dot(x, x).sqrt()
    }

    /// Numerically stable softmax (max subtraction).
    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    }

    /// y = W x + b with W stored row-major as (out_dim, in_dim).
    pub fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
        let mut out = b.to_vec();
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            out[o] += dot(row, x);
        }
        out
    }

    /// Elementwise mean over `chunks` equal consecutive chunks.
    pub fn mean_chunks(x: &[f64], chunks: usize) -> Vec<f64> {
        let m = x.len() / chunks;
        let mut out = vec![0.0; m];
        for c in 0..chunks {
            for j in 0..m {
                out[j] += x[c * m + j];
            }
        }
        for v in &mut out {
            *v /= chunks as f64;
        }
        out
    }

    /// sum_n weights[n] * vectors[n].
    pub fn weighted_sum(weights: &[f64], vectors: &[&[f64]]) -> Vec<f64> {
        let m = vectors.first().map(|v| v.len()).unwrap_or(0);
        let mut out = vec![0.0; m];
        for (n, v) in vectors.iter().enumerate() {
            for j in 0..m {
                out[j] += weights[n] * v[j];
            }
        }
        out
    }

    pub const BCE_EPS: f64 = 1e-12;

    /// Negative log-likelihood of a Bernoulli observation, with the
    /// prediction clipped to [eps, 1-eps].
    pub fn bce(yhat: f64, y: f64) -> f64 {
        let p = yhat.clamp(BCE_EPS, 1.0 - BCE_EPS);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }
}

#[derive(Debug, Clone)]
struct Param {
    shape: Vec<usize>,
    values: Vec<f64>,
    frozen: bool,
    // Adam state: first/second moment and per-parameter step count. Frozen
    // parameters never advance.
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named dense parameter arrays with per-parameter Adam state and a freeze
/// flag. Exclusively owned by one trainer at a time; forward-only inference
/// over a frozen store is safe from many threads.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Adam hyperparameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradients accumulated by one backward pass, keyed by parameter name.
/// Parameters the pass never touched have no entry and are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradTape {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn insert(&mut self, name: String, grad: Vec<f64>) {
        self.grads.insert(name, grad);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter with explicit values. Errors on duplicate names
    /// or shape/value length mismatch.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!("{name}: shape {shape:?} needs {len} values, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "param" });
        }
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = values.len();
        self.params.insert(
            name.to_string(),
            Param { shape, values, frozen: false, m: vec![0.0; n], v: vec![0.0; n], step: 0 },
        );
        Ok(())
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let len = shape.iter().product();
        self.add(name, shape, vec![0.0; len])
    }

    /// Uniform init in [-bound, bound].
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let len: usize = shape.iter().product();
        let values = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, values)
    }

    /// Embedding table init: uniform in [-1/sqrt(width), 1/sqrt(width)].
    pub fn add_embedding<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.add_uniform(name, vec![rows, width], 1.0 / (width as f64).sqrt(), rng)
    }

    /// Affine layer init: weight uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    /// under `{prefix}.w`, bias zeros under `{prefix}.b`.
    pub fn add_affine<R: Rng>(
        &mut self,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.add_uniform(
            &format!("{prefix}.w"),
            vec![out_dim, in_dim],
            1.0 / (in_dim as f64).sqrt(),
            rng,
        )?;
        self.add_zeros(&format!("{prefix}.b"), vec![out_dim])
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.params
            .get(name)
            .map(|p| p.values.as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.params
            .get_mut(name)
            .map(|p| p.values.as_mut_slice())
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.params
            .get(name)
            .map(|p| p.shape.as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.frozen).unwrap_or(false)
    }

    /// Set the freeze flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_group(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn len_of_group(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, p)| p.values.len())
            .sum()
    }

    /// One bias-corrected Adam step over every non-frozen parameter that has
    /// a gradient entry. Frozen parameters and untouched parameters keep
    /// their values and moments bit-identical.
    pub fn adam_step(&mut self, grads: &GradTape, hp: &AdamParams) -> Result<()> {
        for (name, grad) in grads.grads.iter() {
            let Some(p) = self.params.get_mut(name) else {
                continue; // gradient for a parameter owned by another store
            };
            if p.frozen {
                continue;
            }
            if grad.len() != p.values.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!(
                        "{name}: gradient length {} vs parameter length {}",
                        grad.len(),
                        p.values.len()
                    ),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
            p.step += 1;
            let bc1 = 1.0 - hp.beta1.powi(p.step as i32);
            let bc2 = 1.0 - hp.beta2.powi(p.step as i32);
            for i in 0..p.values.len() {
                p.m[i] = hp.beta1 * p.m[i] + (1.0 - hp.beta1) * grad[i];
                p.v[i] = hp.beta2 * p.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.values[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ArtifactParam {
    shape: Vec<usize>,
    frozen: bool,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    version: u32,
    meta: BTreeMap<String, serde_json::Value>,
    params: BTreeMap<String, ArtifactParam>,
}

const ARTIFACT_VERSION: u32 = 1;

/// Save a store as a versioned JSON artifact: named shapes, flat f64 arrays,
/// and freeze flags, plus caller-supplied metadata. Deterministic bytes for
/// identical stores; optimizer state is not persisted.
pub fn save_artifact(
    store: &ParamStore,
    meta: BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let file = ArtifactFile {
        version: ARTIFACT_VERSION,
        meta,
        params: store
            .params
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    ArtifactParam {
                        shape: p.shape.clone(),
                        frozen: p.frozen,
                        values: p.values.clone(),
                    },
                )
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::invalid(format!("artifact serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

/// Load a store saved by [`save_artifact`]. Returns the store and its
/// metadata map.
pub fn load_artifact(path: &Path) -> Result<(ParamStore, BTreeMap<String, serde_json::Value>)> {
    let text = fs::read_to_string(path)?;
    let file: ArtifactFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: None,
        detail: e.to_string(),
    })?;
    if file.version != ARTIFACT_VERSION {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: None,
            detail: format!("unsupported artifact version {}", file.version),
        });
    }
    let mut store = ParamStore::new();
    for (name, p) in file.params {
        store.add(&name, p.shape, p.values)?;
        if p.frozen {
            store.set_frozen_group(&name, true);
        }
    }
    Ok((store, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        store.add("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = store.values("w").unwrap().to_vec();
        let mut grads = GradTape::default();
        grads.insert("w".into(), vec![0.0; 3]);
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        assert_eq!(store.values("w").unwrap(), before.as_slice());
    }

    #[test]
    fn adam_frozen_group_untouched() {
        let mut store = ParamStore::new();
        store.add("kb.f", vec![2], vec![1.0, 2.0]).unwrap();
        store.add("kb.g", vec![2], vec![3.0, 4.0]).unwrap();
        store.set_frozen_group("kb.f", true);
        let mut grads = GradTape::default();
        grads.insert("kb.f".into(), vec![5.0, 5.0]);
        grads.insert("kb.g".into(), vec![5.0, 5.0]);
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        assert_eq!(store.values("kb.f").unwrap(), &[1.0, 2.0]);
        assert_ne!(store.values("kb.g").unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // Hand-computed oracle for the bias-corrected first step:
        // m_hat = g, v_hat = g^2, delta = lr * g / (|g| + eps).
        let (lr, g) = (0.1, 1.0);
        let hp = AdamParams { lr, ..AdamParams::default() };
        let expected = -lr * g / (g.abs() + hp.eps);

        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![0.0]).unwrap();
        let mut grads = GradTape::default();
        grads.insert("w".into(), vec![g]);
        store.adam_step(&grads, &hp).unwrap();
        let w = store.values("w").unwrap()[0];
        assert!((w - expected).abs() < 1e-15, "w = {w}, expected {expected}");
        assert!((w + 0.1).abs() < 1e-8);
    }

    #[test]
    fn untouched_params_keep_moments() {
        let mut store = ParamStore::new();
        store.add("a", vec![1], vec![1.0]).unwrap();
        store.add("b", vec![1], vec![1.0]).unwrap();
        let mut grads = GradTape::default();
        grads.insert("a".into(), vec![1.0]);
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        assert_eq!(store.params["b"].step, 0);
        assert_eq!(store.values("b").unwrap(), &[1.0]);
    }

    #[test]
    fn artifact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_embedding("emb", 4, 3, &mut rng).unwrap();
        store.add_affine("head", 2, 3, &mut rng).unwrap();
        store.set_frozen_group("emb", true);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut meta = BTreeMap::new();
        meta.insert("d".to_string(), serde_json::json!(8));
        save_artifact(&store, meta.clone(), &path).unwrap();

        let (back, back_meta) = load_artifact(&path).unwrap();
        assert_eq!(back_meta, meta);
        for name in ["emb", "head.w", "head.b"] {
            assert_eq!(store.values(name).unwrap(), back.values(name).unwrap());
            assert_eq!(store.shape(name).unwrap(), back.shape(name).unwrap());
            assert_eq!(store.is_frozen(name), back.is_frozen(name));
        }

        // Re-saving yields identical bytes.
        let path2 = dir.path().join("model2.json");
        save_artifact(&back, back_meta, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
