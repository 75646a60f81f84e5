//! Backbone CTR models (LR, MLP, FM-lite) with feature-wise and
//! instance-wise integration of the knowledge base, and the three parameter
//! update strategies for stage 2.
//!
//! Parameter fairness: with feature-wise integration on, the backbone's own
//! embedding width plus f's width equals the baseline width d exactly, so
//! integrated and baseline models carry the same embedding parameter count.
//!
//! Per-kind backbone representation phi(x): LR uses the concatenated field
//! embeddings, MLP its first hidden activation, FM-lite the linear term and
//! the second-order vector. Instance-wise integration concatenates the
//! knowledge vector z to phi(x) before the final layers; for FM-lite z
//! enters through its own linear term added after the interaction sum (the
//! alternative, a joint affine over [lin, so_vec, z], would reweight the
//! plain FM terms).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample, TemporalSplit};
use crate::error::{Error, Result};
use crate::eval;
use crate::kb::{KnowledgeBase, GROUP_F, GROUP_G, GROUP_H};
use crate::nn::{self, math, AdamParams, NodeId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Lr,
    Mlp,
    FmLite,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(BackboneKind::Lr),
            "mlp" => Ok(BackboneKind::Mlp),
            "fm" | "fm_lite" => Ok(BackboneKind::FmLite),
            other => Err(Error::invalid(format!(
                "unknown backbone kind `{other}` (expected lr|mlp|fm)"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackboneKind::Lr => "lr",
            BackboneKind::Mlp => "mlp",
            BackboneKind::FmLite => "fm",
        };
        write!(f, "{s}")
    }
}

/// Which knowledge-base groups stay trainable while the backbone trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    /// Freeze f, g, h (the default; the knowledge base is a finished module).
    Fix,
    /// Only the knowledge encoder g stays live.
    UpdG,
    /// f and g stay live.
    UpdFG,
}

impl std::str::FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fix" => Ok(UpdateStrategy::Fix),
            "upd_g" => Ok(UpdateStrategy::UpdG),
            "upd_fg" => Ok(UpdateStrategy::UpdFG),
            other => Err(Error::invalid(format!(
                "unknown update strategy `{other}` (expected fix|upd_g|upd_fg)"
            ))),
        }
    }
}

impl std::fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            UpdateStrategy::Fix => "fix",
            UpdateStrategy::UpdG => "upd_g",
            UpdateStrategy::UpdFG => "upd_fg",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneDims {
    pub kind: BackboneKind,
    pub num_fields: usize,
    pub vocab_size: usize,
    /// The backbone's own embedding width: d/2 integrated, d baseline.
    pub own_width: usize,
    /// Effective per-field width after feature-wise concatenation.
    pub field_width: usize,
    pub hidden: usize,
    /// Knowledge vector width when instance-wise integration is on, else 0.
    pub z_width: usize,
    pub feature_wise: bool,
    pub instance_wise: bool,
}

pub struct BackboneModel {
    pub dims: BackboneDims,
    pub store: ParamStore,
}

const EMB: &str = "bb.emb";
const LR: &str = "bb.lr";
const MLP1: &str = "bb.mlp1";
const MLP2: &str = "bb.mlp2";
const FM_LIN: &str = "bb.fm_lin";
const FM_Z: &str = "bb.fm_z";

impl BackboneModel {
    /// Build a backbone. `kb_dims` must be given exactly when an integration
    /// flag is on; feature-wise integration requires f's width to be d/2.
    pub fn new(
        kind: BackboneKind,
        num_fields: usize,
        vocab_size: usize,
        full_width: usize,
        hidden: usize,
        feature_wise: bool,
        instance_wise: bool,
        kb_dims: Option<&crate::kb::KbDims>,
        seed: u64,
    ) -> Result<Self> {
        if (feature_wise || instance_wise) && kb_dims.is_none() {
            return Err(Error::invalid(
                "integration flags are on but no knowledge base was provided",
            ));
        }
        let mut own_width = full_width;
        let mut z_width = 0;
        if let Some(kd) = kb_dims {
            if feature_wise {
                if kd.embed_width * 2 != full_width {
                    return Err(Error::invalid(format!(
                        "parameter fairness requires f width {} to be half of d = {full_width}",
                        kd.embed_width
                    )));
                }
                own_width = full_width - kd.embed_width;
            }
            if instance_wise {
                z_width = kd.out_width;
            }
        }
        let field_width = if feature_wise { full_width } else { own_width };
        let dims = BackboneDims {
            kind,
            num_fields,
            vocab_size,
            own_width,
            field_width,
            hidden,
            z_width,
            feature_wise,
            instance_wise,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add_embedding(EMB, vocab_size, own_width, &mut rng)?;
        let flat = num_fields * field_width;
        match kind {
            BackboneKind::Lr => {
                store.add_affine(LR, 1, flat + z_width, &mut rng)?;
            }
            BackboneKind::Mlp => {
                store.add_affine(MLP1, hidden, flat, &mut rng)?;
                store.add_affine(MLP2, 1, hidden + z_width, &mut rng)?;
            }
            BackboneKind::FmLite => {
                store.add_affine(FM_LIN, 1, flat, &mut rng)?;
                if instance_wise {
                    store.add_uniform(
                        &format!("{FM_Z}.w"),
                        vec![1, z_width],
                        1.0 / (z_width as f64).sqrt(),
                        &mut rng,
                    )?;
                }
            }
        }
        Ok(BackboneModel { dims, store })
    }

    /// Scalar count of the embedding table (the fairness accounting unit).
    pub fn embedding_param_count(&self) -> usize {
        self.dims.vocab_size * self.dims.own_width
    }

    fn check(&self, kb: Option<&KnowledgeBase>, s: &Sample) -> Result<()> {
        if s.features.len() != self.dims.num_fields {
            return Err(Error::Shape {
                op: "backbone_forward",
                detail: format!(
                    "sample has {} fields, model expects {}",
                    s.features.len(),
                    self.dims.num_fields
                ),
            });
        }
        if (self.dims.feature_wise || self.dims.instance_wise) && kb.is_none() {
            return Err(Error::MissingArtifact {
                path: "knowledge base".to_string(),
                produced_by: "build-kb",
            });
        }
        Ok(())
    }

    /// Per-field embedding vectors, feature-wise concatenated with f's rows
    /// when integrated.
    fn field_vectors(&self, kb: Option<&KnowledgeBase>, s: &Sample) -> Result<Vec<Vec<f64>>> {
        let emb = self.store.values(EMB)?;
        let d = self.dims.own_width;
        let mut fields = Vec::with_capacity(self.dims.num_fields);
        for &id in &s.features {
            let id = id as usize;
            if id >= self.dims.vocab_size {
                return Err(Error::invalid(format!(
                    "backbone_forward: feature id {id} outside vocabulary of {}",
                    self.dims.vocab_size
                )));
            }
            let mut v = emb[id * d..(id + 1) * d].to_vec();
            if self.dims.feature_wise {
                let kb = kb.unwrap();
                let fw = kb.dims.embed_width;
                let f = kb.store.values(crate::kb::F_TABLE)?;
                v.extend_from_slice(&f[id * fw..(id + 1) * fw]);
            }
            fields.push(v);
        }
        Ok(fields)
    }

    /// Click probability. Pure and thread-safe over frozen parameters.
    pub fn predict(&self, kb: Option<&KnowledgeBase>, s: &Sample) -> Result<f64> {
        self.check(kb, s)?;
        let fields = self.field_vectors(kb, s)?;
        let mut e_concat = Vec::with_capacity(self.dims.num_fields * self.dims.field_width);
        for f in &fields {
            e_concat.extend_from_slice(f);
        }
        let z = if self.dims.instance_wise {
            Some(kb.unwrap().encode(s)?)
        } else {
            None
        };

        let logit = match self.dims.kind {
            BackboneKind::Lr => {
                let mut input = e_concat;
                if let Some(z) = &z {
                    input.extend_from_slice(z);
                }
                let w = self.store.values("bb.lr.w")?;
                let b = self.store.values("bb.lr.b")?;
                math::affine(w, b, &input, 1, input.len())[0]
            }
            BackboneKind::Mlp => {
                let w1 = self.store.values("bb.mlp1.w")?;
                let b1 = self.store.values("bb.mlp1.b")?;
                let h = math::affine(w1, b1, &e_concat, self.dims.hidden, e_concat.len());
                let mut h: Vec<f64> = h.iter().map(|&v| math::relu(v)).collect();
                if let Some(z) = &z {
                    h.extend_from_slice(z);
                }
                let w2 = self.store.values("bb.mlp2.w")?;
                let b2 = self.store.values("bb.mlp2.b")?;
                math::affine(w2, b2, &h, 1, h.len())[0]
            }
            BackboneKind::FmLite => {
                let w = self.store.values("bb.fm_lin.w")?;
                let b = self.store.values("bb.fm_lin.b")?;
                let lin = math::affine(w, b, &e_concat, 1, e_concat.len())[0];
                let so_vec = fm_second_order(&fields);
                let mut logit = lin + so_vec.iter().sum::<f64>();
                if let Some(z) = &z {
                    let wz = self.store.values("bb.fm_z.w")?;
                    logit += math::dot(wz, z);
                }
                logit
            }
        };
        Ok(math::sigmoid(logit))
    }

    /// Tape twin of [`BackboneModel::predict`]; computes identical floats.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        kb: Option<&KnowledgeBase>,
        s: &Sample,
    ) -> Result<NodeId> {
        self.check(kb, s)?;
        let d = self.dims.own_width;
        let emb = tape.param(&self.store, EMB)?;
        let ids: Vec<usize> = s.features.iter().map(|&x| x as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.dims.vocab_size) {
            return Err(Error::invalid(format!(
                "backbone_forward: feature id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }

        let mut fields = Vec::with_capacity(self.dims.num_fields);
        for &id in &ids {
            let own = tape.embedding_lookup(emb, &[id], d)?;
            let v = if self.dims.feature_wise {
                let kb = kb.unwrap();
                let f = tape.param(&kb.store, crate::kb::F_TABLE)?;
                let frow = tape.embedding_lookup(f, &[id], kb.dims.embed_width)?;
                tape.concat(&[own, frow])?
            } else {
                own
            };
            fields.push(v);
        }
        let e_concat = tape.concat(&fields)?;
        let z = if self.dims.instance_wise {
            Some(kb.unwrap().encode_on_tape(tape, s)?)
        } else {
            None
        };

        let logit = match self.dims.kind {
            BackboneKind::Lr => {
                let input = match z {
                    Some(z) => tape.concat(&[e_concat, z])?,
                    None => e_concat,
                };
                let w = tape.param(&self.store, "bb.lr.w")?;
                let b = tape.param(&self.store, "bb.lr.b")?;
                tape.affine(w, b, input)?
            }
            BackboneKind::Mlp => {
                let w1 = tape.param(&self.store, "bb.mlp1.w")?;
                let b1 = tape.param(&self.store, "bb.mlp1.b")?;
                let pre = tape.affine(w1, b1, e_concat)?;
                let h = tape.relu(pre)?;
                let input = match z {
                    Some(z) => tape.concat(&[h, z])?,
                    None => h,
                };
                let w2 = tape.param(&self.store, "bb.mlp2.w")?;
                let b2 = tape.param(&self.store, "bb.mlp2.b")?;
                tape.affine(w2, b2, input)?
            }
            BackboneKind::FmLite => {
                let w = tape.param(&self.store, "bb.fm_lin.w")?;
                let b = tape.param(&self.store, "bb.fm_lin.b")?;
                let lin = tape.affine(w, b, e_concat)?;

                let mut sum_e = fields[0];
                for &f in &fields[1..] {
                    sum_e = tape.add(sum_e, f)?;
                }
                let sq_of_sum = tape.mul(sum_e, sum_e)?;
                let mut sum_of_sq = tape.mul(fields[0], fields[0])?;
                for &f in &fields[1..] {
                    let sq = tape.mul(f, f)?;
                    sum_of_sq = tape.add(sum_of_sq, sq)?;
                }
                let diff = tape.sub(sq_of_sum, sum_of_sq)?;
                let so_vec = tape.scale(diff, 0.5)?;
                let so = tape.sum(so_vec)?;
                let mut logit = tape.add(lin, so)?;
                if let Some(z) = z {
                    let wz = tape.param(&self.store, "bb.fm_z.w")?;
                    let zl = tape.dot(wz, z)?;
                    logit = tape.add(logit, zl)?;
                }
                logit
            }
        };
        tape.sigmoid(logit)
    }

    pub fn scores(&self, kb: Option<&KnowledgeBase>, ds: &Dataset) -> Result<Vec<f64>> {
        ds.samples.iter().map(|s| self.predict(kb, s)).collect()
    }
}

/// The FM second-order vector 0.5 * ((sum_i e_i)^2 - sum_i e_i^2), whose sum
/// over dimensions equals sum_{i<j} <e_i, e_j>.
fn fm_second_order(fields: &[Vec<f64>]) -> Vec<f64> {
    let m = fields[0].len();
    let mut sum_e = fields[0].clone();
    for f in &fields[1..] {
        for j in 0..m {
            sum_e[j] += f[j];
        }
    }
    let sq_of_sum: Vec<f64> = sum_e.iter().map(|&v| v * v).collect();
    let mut sum_of_sq: Vec<f64> = fields[0].iter().map(|&v| v * v).collect();
    for f in &fields[1..] {
        for j in 0..m {
            sum_of_sq[j] += f[j] * f[j];
        }
    }
    (0..m).map(|j| 0.5 * (sq_of_sum[j] - sum_of_sq[j])).collect()
}

/// One row of the stage-2 training trace. `valid_*` metrics come from the
/// test slice; no model selection happens on them.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneTraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub valid_logloss: f64,
}

#[derive(Debug, Clone)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub strategy: UpdateStrategy,
}

/// Apply the stage-2 freezing contract to the knowledge base. The projector
/// h never appears in the stage-2 graph and stays frozen in every strategy.
pub fn apply_update_strategy(kb: &mut KnowledgeBase, strategy: UpdateStrategy) {
    kb.store.set_frozen_group(GROUP_F, true);
    kb.store.set_frozen_group(GROUP_G, true);
    kb.store.set_frozen_group(GROUP_H, true);
    match strategy {
        UpdateStrategy::Fix => {}
        UpdateStrategy::UpdG => kb.store.set_frozen_group(GROUP_G, false),
        UpdateStrategy::UpdFG => {
            kb.store.set_frozen_group(GROUP_F, false);
            kb.store.set_frozen_group(GROUP_G, false);
        }
    }
}

/// Minibatch Adam on BCE over the train slice. Freezing is enforced at the
/// optimizer: frozen knowledge-base groups receive steps of exactly zero.
pub fn train_backbone(
    model: &mut BackboneModel,
    mut kb: Option<&mut KnowledgeBase>,
    split: &TemporalSplit,
    cfg: &BackboneTrainConfig,
) -> Result<Vec<BackboneTraceRow>> {
    if let Some(kb) = kb.as_deref_mut() {
        apply_update_strategy(kb, cfg.strategy);
    }
    let train = &split.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6262);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train.samples[i];
                let p = model.predict_on_tape(&mut tape, kb.as_deref(), s)?;
                losses.push(tape.bce_loss(p, f64::from(s.label))?);
            }
            let loss = tape.mean_scalars(&losses)?;
            epoch_loss += tape.scalar(loss)? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.store.adam_step(&grads, &cfg.adam)?;
            if let Some(kb) = kb.as_deref_mut() {
                kb.store.adam_step(&grads, &cfg.adam)?;
            }
        }
        let scores = model.scores(kb.as_deref(), &split.test)?;
        let labels = split.test.labels();
        trace.push(BackboneTraceRow {
            epoch,
            train_loss: if n == 0 { 0.0 } else { epoch_loss / n as f64 },
            valid_auc: eval::auc(&scores, &labels)?,
            valid_logloss: eval::logloss(&scores, &labels)?,
        });
    }
    Ok(trace)
}

pub fn save_backbone(model: &BackboneModel, path: &Path) -> Result<()> {
    let d = &model.dims;
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("kind".to_string(), serde_json::json!(d.kind.to_string()));
    meta.insert("num_fields".to_string(), serde_json::json!(d.num_fields));
    meta.insert("vocab_size".to_string(), serde_json::json!(d.vocab_size));
    meta.insert("own_width".to_string(), serde_json::json!(d.own_width));
    meta.insert("field_width".to_string(), serde_json::json!(d.field_width));
    meta.insert("hidden".to_string(), serde_json::json!(d.hidden));
    meta.insert("z_width".to_string(), serde_json::json!(d.z_width));
    meta.insert("feature_wise".to_string(), serde_json::json!(d.feature_wise));
    meta.insert("instance_wise".to_string(), serde_json::json!(d.instance_wise));
    nn::save_artifact(&model.store, meta, path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneModel> {
    let (store, meta) = nn::load_artifact(path)?;
    let missing = |key: &str| Error::Parse {
        path: path.display().to_string(),
        line: None,
        detail: format!("missing metadata key `{key}`"),
    };
    let get = |key: &str| -> Result<usize> {
        meta.get(key).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| missing(key))
    };
    let get_bool = |key: &str| -> Result<bool> {
        meta.get(key).and_then(|v| v.as_bool()).ok_or_else(|| missing(key))
    };
    let kind: BackboneKind = meta
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| missing("kind"))?
        .parse()?;
    let dims = BackboneDims {
        kind,
        num_fields: get("num_fields")?,
        vocab_size: get("vocab_size")?,
        own_width: get("own_width")?,
        field_width: get("field_width")?,
        hidden: get("hidden")?,
        z_width: get("z_width")?,
        feature_wise: get_bool("feature_wise")?,
        instance_wise: get_bool("instance_wise")?,
    };
    Ok(BackboneModel { dims, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_temporal, SyntheticSpec};
    use crate::kb::KbDims;
    use crate::nn::grad_check;

    fn sample(features: Vec<u32>, label: u8, id: u64) -> Sample {
        Sample { features, label, sample_id: id }
    }

    fn make_kb(seed: u64) -> KnowledgeBase {
        KnowledgeBase::new(KbDims::with_defaults(3, 12, 2, 6), seed).unwrap()
    }

    fn make_backbone(kind: BackboneKind, integrated: bool, seed: u64) -> BackboneModel {
        let kb = make_kb(0);
        BackboneModel::new(
            kind,
            3,
            12,
            4,
            5,
            integrated,
            integrated,
            integrated.then_some(&kb.dims),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn baseline_ignores_knowledge_base() {
        let model = make_backbone(BackboneKind::Mlp, false, 3);
        let s = sample(vec![0, 4, 8], 1, 0);
        let without = model.predict(None, &s).unwrap();
        let with = model.predict(Some(&make_kb(9)), &s).unwrap();
        assert_eq!(without, with);
    }

    #[test]
    fn integrated_model_requires_kb() {
        let model = make_backbone(BackboneKind::Lr, true, 3);
        let s = sample(vec![0, 4, 8], 1, 0);
        assert!(matches!(
            model.predict(None, &s),
            Err(Error::MissingArtifact { produced_by: "build-kb", .. })
        ));
    }

    #[test]
    fn zero_weight_lr_predicts_half() {
        let mut model = make_backbone(BackboneKind::Lr, false, 3);
        for name in ["bb.lr.w", "bb.lr.b"] {
            for v in model.store.values_mut(name).unwrap() {
                *v = 0.0;
            }
        }
        let s = sample(vec![0, 4, 8], 1, 0);
        assert_eq!(model.predict(None, &s).unwrap(), 0.5);
    }

    #[test]
    fn instance_wise_feature_flip_moves_prediction() {
        let kb = make_kb(5);
        let model = BackboneModel::new(
            BackboneKind::Mlp,
            3,
            12,
            4,
            5,
            false,
            true,
            Some(&kb.dims),
            7,
        )
        .unwrap();
        let a = sample(vec![0, 4, 8], 1, 0);
        let b = sample(vec![1, 4, 8], 1, 0);
        let pa = model.predict(Some(&kb), &a).unwrap();
        let pb = model.predict(Some(&kb), &b).unwrap();
        assert_ne!(pa, pb);
    }

    #[test]
    fn tape_predict_matches_plain_bitwise() {
        let kb = make_kb(11);
        for kind in [BackboneKind::Lr, BackboneKind::Mlp, BackboneKind::FmLite] {
            for integrated in [false, true] {
                let model = make_backbone(kind, integrated, 13);
                let kb_opt = integrated.then_some(&kb);
                let s = sample(vec![2, 6, 10], 1, 0);
                let plain = model.predict(kb_opt, &s).unwrap();
                let mut tape = Tape::new();
                let node = model.predict_on_tape(&mut tape, kb_opt, &s).unwrap();
                assert_eq!(tape.scalar(node).unwrap(), plain, "{kind} integrated={integrated}");
            }
        }
    }

    #[test]
    fn fm_second_order_matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let f = rng.gen_range(2..6);
            let m = rng.gen_range(1..5);
            let fields: Vec<Vec<f64>> =
                (0..f).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let fast: f64 = fm_second_order(&fields).iter().sum();
            let mut slow = 0.0;
            for i in 0..f {
                for j in (i + 1)..f {
                    slow += math::dot(&fields[i], &fields[j]);
                }
            }
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_check_all_kinds_integrated() {
        let kb = make_kb(17);
        let samples: Vec<Sample> = (0..5)
            .map(|i| sample(vec![i % 4, 4 + (i + 1) % 4, 8 + (i + 2) % 4], (i % 2) as u8, i as u64))
            .collect();
        for kind in [BackboneKind::Lr, BackboneKind::Mlp, BackboneKind::FmLite] {
            let model = make_backbone(kind, true, 23);
            // Check both the backbone's and the knowledge base's parameters
            // through one merged store.
            let mut merged = ParamStore::new();
            for src in [&model.store, &kb.store] {
                for name in src.names() {
                    merged
                        .add(name, src.shape(name).unwrap().to_vec(), src.values(name).unwrap().to_vec())
                        .unwrap();
                }
            }
            let dims = model.dims;
            let kb_dims = kb.dims;
            let report = grad_check(&mut merged, 1e-5, 1e-4, |s, t| {
                let m = BackboneModel { dims, store: s.clone() };
                let k = KnowledgeBase { dims: kb_dims, store: s.clone() };
                let mut losses = Vec::new();
                for smp in &samples {
                    let p = m.predict_on_tape(t, Some(&k), smp)?;
                    losses.push(t.bce_loss(p, f64::from(smp.label))?);
                }
                t.mean_scalars(&losses)
            })
            .unwrap();
            assert!(report.passed(), "{kind}: max rel err {}", report.max_rel_err);
        }
    }

    fn train_setup() -> (TemporalSplit, KnowledgeBase) {
        let spec = SyntheticSpec {
            num_samples: 150,
            num_fields: 3,
            field_cardinalities: vec![4, 4, 4],
            num_latent_clusters: 2,
            cluster_click_probs: vec![0.95, 0.05],
            noise_rate: 0.05,
            seed: 41,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let split = split_temporal(&ds, 0.4, 0.85).unwrap();
        let kb = KnowledgeBase::new(
            KbDims::with_defaults(3, ds.vocab_size as usize, 2, 6),
            19,
        )
        .unwrap();
        (split, kb)
    }

    #[test]
    fn fix_strategy_leaves_kb_bit_identical() {
        let (split, mut kb) = train_setup();
        let snapshot: Vec<(String, Vec<f64>)> = kb
            .store
            .names()
            .map(|n| (n.to_string(), kb.store.values(n).unwrap().to_vec()))
            .collect();
        let mut model = BackboneModel::new(
            BackboneKind::Mlp,
            3,
            12,
            4,
            5,
            true,
            true,
            Some(&kb.dims),
            29,
        )
        .unwrap();
        let cfg = BackboneTrainConfig {
            epochs: 2,
            batch_size: 16,
            adam: AdamParams::default(),
            seed: 3,
            strategy: UpdateStrategy::Fix,
        };
        train_backbone(&mut model, Some(&mut kb), &split, &cfg).unwrap();
        for (name, before) in snapshot {
            assert_eq!(kb.store.values(&name).unwrap(), before.as_slice(), "{name}");
        }
    }

    #[test]
    fn upd_g_strategy_moves_g_only() {
        let (split, mut kb) = train_setup();
        let f_before = kb.store.values("kb.f").unwrap().to_vec();
        let g_before = kb.store.values("kb.g1.w").unwrap().to_vec();
        let h_before = kb.store.values("kb.h1.w").unwrap().to_vec();
        let mut model = BackboneModel::new(
            BackboneKind::Mlp,
            3,
            12,
            4,
            5,
            true,
            true,
            Some(&kb.dims),
            29,
        )
        .unwrap();
        let cfg = BackboneTrainConfig {
            epochs: 2,
            batch_size: 16,
            adam: AdamParams::default(),
            seed: 3,
            strategy: UpdateStrategy::UpdG,
        };
        train_backbone(&mut model, Some(&mut kb), &split, &cfg).unwrap();
        assert_eq!(kb.store.values("kb.f").unwrap(), f_before.as_slice());
        assert_ne!(kb.store.values("kb.g1.w").unwrap(), g_before.as_slice());
        assert_eq!(kb.store.values("kb.h1.w").unwrap(), h_before.as_slice());
    }

    #[test]
    fn upd_fg_strategy_moves_f_and_g() {
        let (split, mut kb) = train_setup();
        let f_before = kb.store.values("kb.f").unwrap().to_vec();
        let g_before = kb.store.values("kb.g1.w").unwrap().to_vec();
        let mut model = BackboneModel::new(
            BackboneKind::Lr,
            3,
            12,
            4,
            5,
            true,
            true,
            Some(&kb.dims),
            29,
        )
        .unwrap();
        let cfg = BackboneTrainConfig {
            epochs: 2,
            batch_size: 16,
            adam: AdamParams::default(),
            seed: 3,
            strategy: UpdateStrategy::UpdFG,
        };
        train_backbone(&mut model, Some(&mut kb), &split, &cfg).unwrap();
        assert_ne!(kb.store.values("kb.f").unwrap(), f_before.as_slice());
        assert_ne!(kb.store.values("kb.g1.w").unwrap(), g_before.as_slice());
    }

    #[test]
    fn training_is_deterministic() {
        let (split, kb) = train_setup();
        let run = || {
            let mut kb = KnowledgeBase { dims: kb.dims, store: kb.store.clone() };
            let mut model = BackboneModel::new(
                BackboneKind::FmLite,
                3,
                12,
                4,
                5,
                true,
                true,
                Some(&kb.dims),
                29,
            )
            .unwrap();
            let cfg = BackboneTrainConfig {
                epochs: 2,
                batch_size: 16,
                adam: AdamParams::default(),
                seed: 3,
                strategy: UpdateStrategy::Fix,
            };
            train_backbone(&mut model, Some(&mut kb), &split, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parameter_fairness_is_exact() {
        let kb = make_kb(1);
        let integrated = make_backbone(BackboneKind::Lr, true, 2);
        let baseline = make_backbone(BackboneKind::Lr, false, 2);
        let f_count = kb.store.len_of_group(crate::kb::GROUP_F);
        assert_eq!(
            integrated.embedding_param_count() + f_count,
            baseline.embedding_param_count()
        );
    }

    #[test]
    fn backbone_artifact_round_trip() {
        let model = make_backbone(BackboneKind::FmLite, true, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.model.json");
        save_backbone(&model, &path).unwrap();
        let back = load_backbone(&path).unwrap();
        let kb = make_kb(0);
        let s = sample(vec![1, 5, 9], 0, 0);
        assert_eq!(
            model.predict(Some(&kb), &s).unwrap(),
            back.predict(Some(&kb), &s).unwrap()
        );
    }
}
