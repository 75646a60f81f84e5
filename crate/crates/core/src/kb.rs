//! The neural knowledge base: a retrieval-oriented embedding layer `f` at
//! half the backbone width, a knowledge encoder `g` that reconstructs the
//! teacher's aggregated representation, and a projector `h` for the
//! symmetric stop-gradient contrastive loss. Stage-1 training blends
//! imitation (MSE to the exported targets) with contrastive regularization.
//!
//! The projector is part of the saved artifact but is never used in stage 2.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{self, math, AdamParams, NodeId, ParamStore, Tape};
use crate::retrieval::PositiveStrategy;
use crate::teacher::KnowledgeTargets;

#[derive(Debug, Clone, Copy)]
pub struct KbDims {
    pub num_fields: usize,
    pub vocab_size: usize,
    /// Width of `f`: exactly half the configured backbone full width d.
    pub embed_width: usize,
    /// Encoder output width d_z; matches the teacher's aggregated width.
    pub out_width: usize,
    pub g_hidden: usize,
    pub h_hidden: usize,
}

impl KbDims {
    /// Default hidden sizes: g gets 2*d_z, h gets d_z.
    pub fn with_defaults(
        num_fields: usize,
        vocab_size: usize,
        embed_width: usize,
        out_width: usize,
    ) -> Self {
        KbDims {
            num_fields,
            vocab_size,
            embed_width,
            out_width,
            g_hidden: 2 * out_width,
            h_hidden: out_width,
        }
    }
}

pub struct KnowledgeBase {
    pub dims: KbDims,
    pub store: ParamStore,
}

pub const F_TABLE: &str = "kb.f";
const G1: &str = "kb.g1";
const G2: &str = "kb.g2";
const H1: &str = "kb.h1";
const H2: &str = "kb.h2";

/// Parameter-group prefixes for the stage-2 update strategies.
pub const GROUP_F: &str = "kb.f";
pub const GROUP_G: &str = "kb.g";
pub const GROUP_H: &str = "kb.h";

impl KnowledgeBase {
    pub fn new(dims: KbDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add_embedding(F_TABLE, dims.vocab_size, dims.embed_width, &mut rng)?;
        let g_in = dims.num_fields * dims.embed_width;
        store.add_affine(G1, dims.g_hidden, g_in, &mut rng)?;
        store.add_affine(G2, dims.out_width, dims.g_hidden, &mut rng)?;
        store.add_affine(H1, dims.h_hidden, dims.out_width, &mut rng)?;
        store.add_affine(H2, dims.out_width, dims.h_hidden, &mut rng)?;
        Ok(KnowledgeBase { dims, store })
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.dims.num_fields {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "sample has {} fields, knowledge base expects {}",
                    s.features.len(),
                    self.dims.num_fields
                ),
            });
        }
        if let Some(&bad) = s.features.iter().find(|&&f| f as usize >= self.dims.vocab_size) {
            return Err(Error::invalid(format!(
                "encode: feature id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// z = g(f(x)): pure, deterministic, O(1) in pool size.
    pub fn encode(&self, s: &Sample) -> Result<Vec<f64>> {
        self.check_sample(s)?;
        let d = self.dims.embed_width;
        let f = self.store.values(F_TABLE)?;
        let mut x = Vec::with_capacity(self.dims.num_fields * d);
        for &id in &s.features {
            x.extend_from_slice(&f[id as usize * d..(id as usize + 1) * d]);
        }
        let h = self.mlp_plain(G1, G2, &x, self.dims.g_hidden, self.dims.out_width)?;
        Ok(h)
    }

    /// p = h(z): the projector.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.out_width {
            return Err(Error::Shape {
                op: "project",
                detail: format!("z has width {}, expected {}", z.len(), self.dims.out_width),
            });
        }
        self.mlp_plain(H1, H2, z, self.dims.h_hidden, self.dims.out_width)
    }

    fn mlp_plain(
        &self,
        l1: &str,
        l2: &str,
        x: &[f64],
        hidden: usize,
        out: usize,
    ) -> Result<Vec<f64>> {
        let w1 = self.store.values(&format!("{l1}.w"))?;
        let b1 = self.store.values(&format!("{l1}.b"))?;
        let h = math::affine(w1, b1, x, hidden, x.len());
        let h: Vec<f64> = h.iter().map(|&v| math::relu(v)).collect();
        let w2 = self.store.values(&format!("{l2}.w"))?;
        let b2 = self.store.values(&format!("{l2}.b"))?;
        Ok(math::affine(w2, b2, &h, out, hidden))
    }

    /// Tape twin of [`KnowledgeBase::encode`].
    pub fn encode_on_tape(&self, tape: &mut Tape, s: &Sample) -> Result<NodeId> {
        self.check_sample(s)?;
        let f = tape.param(&self.store, F_TABLE)?;
        let ids: Vec<usize> = s.features.iter().map(|&x| x as usize).collect();
        let x = tape.embedding_lookup(f, &ids, self.dims.embed_width)?;
        self.mlp_on_tape(tape, G1, G2, x)
    }

    /// Tape twin of [`KnowledgeBase::project`].
    pub fn project_on_tape(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        self.mlp_on_tape(tape, H1, H2, z)
    }

    fn mlp_on_tape(&self, tape: &mut Tape, l1: &str, l2: &str, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param(&self.store, &format!("{l1}.w"))?;
        let b1 = tape.param(&self.store, &format!("{l1}.b"))?;
        let pre = tape.affine(w1, b1, x)?;
        let h = tape.relu(pre)?;
        let w2 = tape.param(&self.store, &format!("{l2}.w"))?;
        let b2 = tape.param(&self.store, &format!("{l2}.b"))?;
        tape.affine(w2, b2, h)
    }
}

/// Mean squared error between the reconstruction and the teacher target.
pub fn imitation_loss(z: &[f64], r: &[f64]) -> Result<f64> {
    if z.len() != r.len() {
        return Err(Error::Shape {
            op: "imitation_loss",
            detail: format!("widths {} vs {}", z.len(), r.len()),
        });
    }
    let n = z.len() as f64;
    Ok(z.iter().zip(r).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Cosine similarity of L2-normalized inputs, in [-1, 1]. In the training
/// graph the z argument carries the stop-gradient marker; this plain form is
/// for reporting. Zero norms are an error, not epsilon-guarded.
pub fn cosine_d(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::Shape {
            op: "cosine_d",
            detail: format!("widths {} vs {}", p.len(), z.len()),
        });
    }
    let (np, nz) = (math::l2_norm(p), math::l2_norm(z));
    if np == 0.0 || nz == 0.0 {
        return Err(Error::invalid("cosine_d: zero-norm input"));
    }
    Ok(math::dot(p, z) / (np * nz))
}

/// Symmetric negative-cosine loss; both z arguments are stopped in the
/// training graph.
pub fn contrastive_loss(p_x: &[f64], z_s: &[f64], p_s: &[f64], z_x: &[f64]) -> Result<f64> {
    Ok(-(0.5 * cosine_d(p_x, z_s)? + 0.5 * cosine_d(p_s, z_x)?))
}

/// (1 - alpha) * imitation + alpha * contrastive.
pub fn combined_loss(l_imit: f64, l_contra: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0,1]")));
    }
    Ok((1.0 - alpha) * l_imit + alpha * l_contra)
}

/// D(p, stop(z)) on the tape: dot of L2-normalized p and the stopped,
/// L2-normalized z.
pub fn cosine_d_on_tape(tape: &mut Tape, p: NodeId, z: NodeId) -> Result<NodeId> {
    let zs = tape.stop_gradient(z)?;
    let zn = tape.l2_normalize(zs)?;
    let pn = tape.l2_normalize(p)?;
    tape.dot(pn, zn)
}

/// The full per-sample stage-1 objective on the tape.
pub fn combined_loss_on_tape(
    kb: &KnowledgeBase,
    tape: &mut Tape,
    x: &Sample,
    positive: &Sample,
    r_target: &[f64],
    alpha: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0,1]")));
    }
    let z_x = kb.encode_on_tape(tape, x)?;
    let z_s = kb.encode_on_tape(tape, positive)?;
    let r = tape.constant(r_target.to_vec())?;
    let imit = tape.mse_loss(z_x, r)?;

    let p_x = kb.project_on_tape(tape, z_x)?;
    let p_s = kb.project_on_tape(tape, z_s)?;
    let c1 = cosine_d_on_tape(tape, p_x, z_s)?;
    let c2 = cosine_d_on_tape(tape, p_s, z_x)?;
    let csum = tape.add(c1, c2)?;
    let contra = tape.scale(csum, -0.5)?;

    let a = tape.scale(imit, 1.0 - alpha)?;
    let b = tape.scale(contra, alpha)?;
    tape.add(a, b)
}

/// Stage-1 training settings.
#[derive(Debug, Clone)]
pub struct ConstructionConfig {
    /// Full backbone embedding width d; f gets d/2.
    pub full_width: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Recorded for provenance; the positive ids themselves live in the
    /// target file, chosen at export time.
    pub positive: PositiveStrategy,
}

/// One row of the stage-1 training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct KbTraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub imit: f64,
    pub contra: f64,
}

/// Minibatch optimization of the blended objective over the train slice.
/// Per sample: z_x from the sample, z_s from its exported positive pool
/// neighbor, imitation against the exported r, symmetric stopped cosine
/// between projections and reconstructions.
pub fn construct_knowledge(
    targets: &KnowledgeTargets,
    pool: &Dataset,
    train: &Dataset,
    cfg: &ConstructionConfig,
) -> Result<(KnowledgeBase, Vec<KbTraceRow>)> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::invalid(format!("alpha {} outside [0,1]", cfg.alpha)));
    }
    if cfg.full_width % 2 != 0 || cfg.full_width == 0 {
        return Err(Error::invalid(format!(
            "embed width d = {} must be positive and even (f gets d/2)",
            cfg.full_width
        )));
    }
    if targets.num_fields as usize != train.num_fields() {
        return Err(Error::invalid(format!(
            "targets built for {} fields, train has {}",
            targets.num_fields,
            train.num_fields()
        )));
    }
    let by_id: HashMap<u64, usize> = targets
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| (rec.sample_id, i))
        .collect();
    for s in &train.samples {
        let Some(&idx) = by_id.get(&s.sample_id) else {
            return Err(Error::invalid(format!(
                "missing knowledge target for train sample {}",
                s.sample_id
            )));
        };
        let pos = targets.records[idx].pos_id;
        if pos as usize >= pool.len() {
            return Err(Error::invalid(format!(
                "target for sample {} names pool id {pos}, pool has {}",
                s.sample_id,
                pool.len()
            )));
        }
    }

    let dims = KbDims::with_defaults(
        train.num_fields(),
        train.vocab_size as usize,
        cfg.full_width / 2,
        targets.record_width(),
    );
    let mut kb = KnowledgeBase::new(dims, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b62);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_imit, mut sum_contra) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train.samples[i];
                let rec = &targets.records[by_id[&s.sample_id]];
                let positive = &pool.samples[rec.pos_id as usize];
                let loss =
                    combined_loss_on_tape(&kb, &mut tape, s, positive, &rec.r, cfg.alpha)?;
                losses.push(loss);
                // Trace components recomputed from the frozen forward values.
                let z_x = kb.encode(s)?;
                let z_s = kb.encode(positive)?;
                sum_imit += imitation_loss(&z_x, &rec.r)?;
                sum_contra +=
                    contrastive_loss(&kb.project(&z_x)?, &z_s, &kb.project(&z_s)?, &z_x)?;
                sum_loss += tape.scalar(loss)?;
            }
            let batch_loss = tape.mean_scalars(&losses)?;
            let grads = tape.backward(batch_loss)?;
            kb.store.adam_step(&grads, &cfg.adam)?;
        }
        let denom = n.max(1) as f64;
        trace.push(KbTraceRow {
            epoch,
            loss: sum_loss / denom,
            imit: sum_imit / denom,
            contra: sum_contra / denom,
        });
    }
    Ok((kb, trace))
}

/// Persist the knowledge base with provenance metadata
/// {d, d_z, F, vocab_size, alpha, seed}.
pub fn save_kb(kb: &KnowledgeBase, alpha: f64, seed: u64, path: &Path) -> Result<()> {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("d".to_string(), serde_json::json!(kb.dims.embed_width * 2));
    meta.insert("d_z".to_string(), serde_json::json!(kb.dims.out_width));
    meta.insert("num_fields".to_string(), serde_json::json!(kb.dims.num_fields));
    meta.insert("vocab_size".to_string(), serde_json::json!(kb.dims.vocab_size));
    meta.insert("g_hidden".to_string(), serde_json::json!(kb.dims.g_hidden));
    meta.insert("h_hidden".to_string(), serde_json::json!(kb.dims.h_hidden));
    meta.insert("alpha".to_string(), serde_json::json!(alpha));
    meta.insert("seed".to_string(), serde_json::json!(seed));
    nn::save_artifact(&kb.store, meta, path)
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let (store, meta) = nn::load_artifact(path)?;
    let get = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: None,
                detail: format!("missing metadata key `{key}`"),
            })
    };
    let dims = KbDims {
        num_fields: get("num_fields")?,
        vocab_size: get("vocab_size")?,
        embed_width: get("d")? / 2,
        out_width: get("d_z")?,
        g_hidden: get("g_hidden")?,
        h_hidden: get("h_hidden")?,
    };
    Ok(KnowledgeBase { dims, store })
}
