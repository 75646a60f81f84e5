//! Dataset representation, synthetic CTR data generation with a planted
//! neighbor signal, temporal splitting into pool/train/test, and file I/O.
//!
//! Feature ids live in one global space with disjoint contiguous per-field
//! ranges, so a single embedding table can serve every model. Temporal order
//! is encoded purely by row order; there is no timestamp column.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled interaction: F discrete feature ids plus a binary click label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// One feature id per field, drawn from the global id space.
    pub features: Vec<u32>,
    /// Click label, 0 or 1.
    pub label: u8,
    /// 0-based position in the source dataset (temporal order).
    pub sample_id: u64,
}

/// An ordered collection of samples plus the field layout they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub field_cardinalities: Vec<u32>,
    pub vocab_size: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.field_cardinalities.len()
    }

    /// Start of each field's id range (prefix sums of the cardinalities).
    pub fn field_offsets(&self) -> Vec<u32> {
        let mut offsets = Vec::with_capacity(self.field_cardinalities.len());
        let mut acc = 0u32;
        for &c in &self.field_cardinalities {
            offsets.push(acc);
            acc += c;
        }
        offsets
    }

    /// Position of a sample within this dataset given its (global) sample_id.
    /// Split parts keep their source ids, so ids are contiguous from the
    /// first sample's id.
    pub fn index_of_id(&self, sample_id: u64) -> Option<usize> {
        let first = self.samples.first()?.sample_id;
        let idx = sample_id.checked_sub(first)? as usize;
        if idx < self.samples.len() {
            Some(idx)
        } else {
            None
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// The three temporal slices: oldest samples form the search pool, newest
/// form the test set.
#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub pool: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub boundaries: (f64, f64),
}

/// Recipe for a synthetic CTR dataset with planted, retrievable structure:
/// each sample belongs to a latent cluster that biases both its feature
/// values and its click probability, so feature-overlap retrieval surfaces
/// label-informative neighbors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_fields: usize,
    pub field_cardinalities: Vec<u32>,
    pub num_latent_clusters: usize,
    pub cluster_click_probs: Vec<f64>,
    pub noise_rate: f64,
    pub seed: u64,
}

/// Probability that a field value is the sample's cluster-preferred value
/// rather than a uniform draw over the whole field range.
const CLUSTER_AFFINITY: f64 = 0.8;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.num_fields == 0 {
            violations.push("num_fields must be positive".to_string());
        }
        if self.field_cardinalities.len() != self.num_fields {
            violations.push(format!(
                "field_cardinalities has {} entries, expected num_fields={}",
                self.field_cardinalities.len(),
                self.num_fields
            ));
        }
        if self.field_cardinalities.iter().any(|&c| c == 0) {
            violations.push("field cardinalities must be positive".to_string());
        }
        if self.num_latent_clusters == 0 {
            violations.push("num_latent_clusters must be positive".to_string());
        }
        if self.cluster_click_probs.len() != self.num_latent_clusters {
            violations.push(format!(
                "cluster_click_probs has {} entries, expected num_latent_clusters={}",
                self.cluster_click_probs.len(),
                self.num_latent_clusters
            ));
        }
        if self.cluster_click_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            violations.push("cluster_click_probs must lie in [0,1]".to_string());
        }
        // Distinctness keeps the labels learnable. A single cluster has no
        // pair to compare, so the rule only bites from two clusters up.
        if self.num_latent_clusters >= 2 && !self.cluster_click_probs.is_empty() {
            let max = self.cluster_click_probs.iter().cloned().fold(f64::MIN, f64::max);
            let min = self.cluster_click_probs.iter().cloned().fold(f64::MAX, f64::min);
            if max - min < 0.3 {
                violations.push(format!(
                    "cluster_click_probs max-min = {:.3}, must be >= 0.3",
                    max - min
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            violations.push("noise_rate must lie in [0,1]".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }
}

/// Generate a dataset from the spec. Deterministic given the seed; the
/// latent cluster assignment is discarded.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_clusters(spec).map(|(ds, _)| ds)
}

/// Same as [`generate_synthetic`] but keeps the cluster ids. Used by tests
/// that need the latent assignment (e.g. the learnability witness).
///
/// Each cluster draws one preferred value per field up front. A sample takes
/// its cluster's preferred value with probability [`CLUSTER_AFFINITY`] and a
/// uniform value otherwise. With more clusters than values per field, a
/// single feature's marginal click rate carries little signal (several
/// clusters with mixed click probabilities share it), while matching on a
/// few fields pins down the cluster; that is what makes neighbor retrieval
/// genuinely informative here.
pub(crate) fn generate_synthetic_with_clusters(
    spec: &SyntheticSpec,
) -> Result<(Dataset, Vec<u32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets: Vec<u32> = {
        let mut acc = 0u32;
        spec.field_cardinalities
            .iter()
            .map(|&c| {
                let o = acc;
                acc += c;
                o
            })
            .collect()
    };
    let vocab_size: u32 = spec.field_cardinalities.iter().sum();

    // Per-cluster preferred value for every field, drawn before any sample.
    let preferred: Vec<Vec<u32>> = (0..spec.num_latent_clusters)
        .map(|_| spec.field_cardinalities.iter().map(|&card| rng.gen_range(0..card)).collect())
        .collect();

    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut cluster_ids = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let cluster = rng.gen_range(0..spec.num_latent_clusters as u32);
        let mut features = Vec::with_capacity(spec.num_fields);
        for (f, &card) in spec.field_cardinalities.iter().enumerate() {
            let within = if rng.gen::<f64>() < CLUSTER_AFFINITY {
                preferred[cluster as usize][f]
            } else {
                rng.gen_range(0..card)
            };
            features.push(offsets[f] + within);
        }
        let base = rng.gen::<f64>() < spec.cluster_click_probs[cluster as usize];
        let flip = rng.gen::<f64>() < spec.noise_rate;
        let label = u8::from(base ^ flip);
        samples.push(Sample { features, label, sample_id: i as u64 });
        cluster_ids.push(cluster);
    }

    Ok((
        Dataset { samples, field_cardinalities: spec.field_cardinalities.clone(), vocab_size },
        cluster_ids,
    ))
}

/// Cut the dataset at floor(cut1*N) and floor(cut2*N): oldest slice is the
/// search pool, newest is the test set.
pub fn split_temporal(ds: &Dataset, cut1: f64, cut2: f64) -> Result<TemporalSplit> {
    if !(cut1 > 0.0 && cut1 < cut2 && cut2 < 1.0) {
        return Err(Error::invalid(format!(
            "split cuts must satisfy 0 < cut1 < cut2 < 1, got ({cut1}, {cut2})"
        )));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::invalid(format!("dataset has {n} samples, need at least 3 to split")));
    }
    let b1 = (cut1 * n as f64).floor() as usize;
    let b2 = (cut2 * n as f64).floor() as usize;
    let part = |range: std::ops::Range<usize>| Dataset {
        samples: ds.samples[range].to_vec(),
        field_cardinalities: ds.field_cardinalities.clone(),
        vocab_size: ds.vocab_size,
    };
    Ok(TemporalSplit {
        pool: part(0..b1),
        train: part(b1..b2),
        test: part(b2..n),
        boundaries: (cut1, cut2),
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    num_fields: usize,
    field_cardinalities: Vec<u32>,
    vocab_size: u32,
}

/// Sidecar metadata path: `data.csv` -> `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Write the dataset as header-less CSV rows `f_1,...,f_F,label` plus a JSON
/// metadata sidecar. Row order encodes temporal order.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut row = String::new();
    for s in &ds.samples {
        row.clear();
        for &f in &s.features {
            row.push_str(&f.to_string());
            row.push(',');
        }
        row.push_str(&s.label.to_string());
        row.push('\n');
        w.write_all(row.as_bytes())?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        num_fields: ds.num_fields(),
        field_cardinalities: ds.field_cardinalities.clone(),
        vocab_size: ds.vocab_size,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::invalid(format!("metadata serialization failed: {e}")))?;
    fs::write(meta_path(path), json)?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]. Validates field counts,
/// label domain, and id ranges; parse errors carry the offending line.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let meta_text = fs::read_to_string(&meta_file).map_err(|_| Error::MissingArtifact {
        path: meta_file.display().to_string(),
        produced_by: "gen-data",
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: meta_file.display().to_string(),
        line: None,
        detail: e.to_string(),
    })?;

    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.display().to_string(),
        line: Some(line),
        detail,
    };

    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != meta.num_fields + 1 {
            return Err(parse_err(
                lineno,
                format!("expected {} cells, found {}", meta.num_fields + 1, cells.len()),
            ));
        }
        let mut features = Vec::with_capacity(meta.num_fields);
        for cell in &cells[..meta.num_fields] {
            let id: u32 = cell
                .parse()
                .map_err(|_| parse_err(lineno, format!("feature id `{cell}` is not an integer")))?;
            if id >= meta.vocab_size {
                return Err(parse_err(
                    lineno,
                    format!("feature id {id} outside vocabulary of {}", meta.vocab_size),
                ));
            }
            features.push(id);
        }
        let label: u8 = match *cells.last().unwrap() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(lineno, format!("label `{other}` must be 0 or 1"))),
        };
        samples.push(Sample { features, label, sample_id: samples.len() as u64 });
    }
    Ok(Dataset {
        samples,
        field_cardinalities: meta.field_cardinalities,
        vocab_size: meta.vocab_size,
    })
}
