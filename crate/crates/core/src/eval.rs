//! Metrics (AUC, log-loss, relative improvement), knowledge-vector export,
//! and the inference-latency benchmark contrasting the retrieval path with
//! the knowledge-base path.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::nn::math;
use crate::retrieval::SearchPoolIndex;
use crate::teacher::TeacherModel;

/// AUC by rank-sum (Mann-Whitney), ties credited 1/2 via average ranks.
/// O(n log n); equals the O(n^2) pairwise definition exactly.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("auc: both classes must be present"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "auc" });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tied score runs, accumulate positive rank sum.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = positives as f64;
    let nn = negatives as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean binary cross-entropy with 1e-12 clipping.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "logloss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("logloss: empty input"));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        if y > 1 {
            return Err(Error::invalid(format!("logloss: label {y} must be 0 or 1")));
        }
        total += math::bce(s, f64::from(y));
    }
    Ok(total / scores.len() as f64)
}

/// Relative AUC improvement over a base model, normalized by distance
/// from random ranking: ((measured - 0.5) / (base - 0.5) - 1) * 100.
pub fn rel_impr(measured_auc: f64, base_auc: f64) -> Result<f64> {
    if base_auc <= 0.5 {
        return Err(Error::invalid(format!(
            "rel_impr: base AUC {base_auc} must exceed 0.5"
        )));
    }
    Ok(((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0)
}

/// Evaluation summary for one model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    pub rel_impr: Option<f64>,
}

impl MetricReport {
    pub fn from_scores(model: &str, scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(MetricReport {
            model: model.to_string(),
            auc: auc(scores, labels)?,
            logloss: logloss(scores, labels)?,
            n: scores.len(),
            rel_impr: None,
        })
    }
}

/// Write `sample_id,label,z_0..z_{d-1}` rows for every sample; the vectors an
/// external tool can embed or plot. Deterministic bytes for a frozen KB.
pub fn export_vectors(kb: &KnowledgeBase, ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("sample_id,label");
    for j in 0..kb.dims.out_width {
        header.push_str(&format!(",z{j}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut row = String::new();
    for s in &ds.samples {
        let z = kb.encode(s)?;
        row.clear();
        row.push_str(&format!("{},{}", s.sample_id, s.label));
        for v in z {
            row.push_str(&format!(",{v}"));
        }
        row.push('\n');
        w.write_all(row.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Per-path latency statistics, per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub path: String,
    pub pool_size: usize,
    pub k: usize,
    pub samples: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    /// Retrieval component alone, for retrieval paths.
    pub retrieval_mean_ms: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, path: &str, pool_size: usize, threads: usize) -> Option<&LatencyRow> {
        self.rows
            .iter()
            .find(|r| r.path == path && r.pool_size == pool_size && r.threads == threads)
    }

    /// CSV with one row per (path, pool size, thread count).
    pub fn write_csv(&self, path: &Path, config_echo: &str) -> Result<()> {
        let mut out = String::new();
        out.push_str("path,pool_size,k,samples,threads,mean_ms,p50_ms,p99_ms,retrieval_mean_ms,config\n");
        for r in &self.rows {
            let retr = r.retrieval_mean_ms.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.path, r.pool_size, r.k, r.samples, r.threads, r.mean_ms, r.p50_ms, r.p99_ms,
                retr, config_echo
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub const PATH_KB_BACKBONE: &str = "kb_backbone";
pub const PATH_RETRIEVAL_TEACHER: &str = "retrieval_teacher";

/// Benchmark settings. `threads = 1` is the default reported mode; a second
/// parallel measurement is appended when `parallel_threads` is set.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub warmup: usize,
    pub samples: usize,
    pub k: usize,
    pub parallel_threads: Option<usize>,
}

fn percentile(sorted: &[Duration], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    duration_ms(sorted[idx])
}

fn duration_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn summarize(
    path: &str,
    pool_size: usize,
    k: usize,
    threads: usize,
    mut totals: Vec<Duration>,
    retrieval: Option<Vec<Duration>>,
) -> LatencyRow {
    let n = totals.len().max(1);
    let mean_ms = duration_ms(totals.iter().sum::<Duration>()) / n as f64;
    totals.sort();
    LatencyRow {
        path: path.to_string(),
        pool_size,
        k,
        samples: n,
        threads,
        mean_ms,
        p50_ms: percentile(&totals, 0.50),
        p99_ms: percentile(&totals, 0.99),
        retrieval_mean_ms: retrieval
            .map(|r| duration_ms(r.iter().sum::<Duration>()) / r.len().max(1) as f64),
    }
}

/// One timed pass over the samples on the retrieval-teacher path: retrieve,
/// aggregate, predict. The retrieval call is timed separately within each
/// sample so its share can be reported alongside the total.
fn run_teacher_path(
    teacher: &TeacherModel,
    index: &SearchPoolIndex,
    samples: &[crate::data::Sample],
    k: usize,
    warmup: usize,
) -> Result<(Vec<Duration>, Vec<Duration>)> {
    let mut totals = Vec::with_capacity(samples.len());
    let mut retrievals = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().cycle().take(warmup + samples.len()).enumerate() {
        let t0 = Instant::now();
        let tr0 = Instant::now();
        let result = index.retrieve_topk(s, k)?;
        let tr = tr0.elapsed();
        let neighbors = index.resolve(&result);
        let r = teacher.aggregate(s, &neighbors)?;
        let yhat = teacher.predict(s, &r)?;
        std::hint::black_box(yhat);
        let total = t0.elapsed();
        if i >= warmup {
            totals.push(total);
            retrievals.push(tr);
        }
    }
    Ok((totals, retrievals))
}

/// One timed pass on the knowledge-base path: encode + backbone forward.
/// Takes no index or pool argument at all; the path is compiled without any
/// retrieval reference, which is the structural form of the isolation claim.
fn run_kb_path(
    backbone: &BackboneModel,
    kb: &KnowledgeBase,
    samples: &[crate::data::Sample],
    warmup: usize,
) -> Result<Vec<Duration>> {
    let mut totals = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().cycle().take(warmup + samples.len()).enumerate() {
        let t0 = Instant::now();
        let yhat = backbone.predict(Some(kb), s)?;
        std::hint::black_box(yhat);
        let total = t0.elapsed();
        if i >= warmup {
            totals.push(total);
        }
    }
    Ok(totals)
}

/// Measure per-sample wall time for both prediction paths against one pool.
/// Models and index are read-only throughout. Appends single-threaded rows,
/// plus parallel rows when configured.
pub fn bench_latency(
    cfg: &BenchConfig,
    test: &Dataset,
    index: &SearchPoolIndex,
    teacher: &TeacherModel,
    kb: &KnowledgeBase,
    backbone: &BackboneModel,
    report: &mut LatencyReport,
) -> Result<()> {
    if test.is_empty() {
        return Err(Error::invalid("bench: empty test set"));
    }
    let pool_size = index.pool().len();
    let samples: Vec<crate::data::Sample> =
        test.samples.iter().cycle().take(cfg.samples).cloned().collect();

    let (totals, retrievals) = run_teacher_path(teacher, index, &samples, cfg.k, cfg.warmup)?;
    report.rows.push(summarize(
        PATH_RETRIEVAL_TEACHER,
        pool_size,
        cfg.k,
        1,
        totals,
        Some(retrievals),
    ));

    let totals = run_kb_path(backbone, kb, &samples, cfg.warmup)?;
    report.rows.push(summarize(PATH_KB_BACKBONE, pool_size, cfg.k, 1, totals, None));

    if let Some(threads) = cfg.parallel_threads {
        let threads = threads.max(1);
        let chunks: Vec<&[crate::data::Sample]> =
            samples.chunks(samples.len().div_ceil(threads)).collect();

        let (totals, retrievals) = std::thread::scope(|scope| -> Result<_> {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(|| run_teacher_path(teacher, index, chunk, cfg.k, cfg.warmup))
                })
                .collect();
            let mut totals = Vec::new();
            let mut retrievals = Vec::new();
            for h in handles {
                let (t, r) = h.join().expect("bench thread panicked")?;
                totals.extend(t);
                retrievals.extend(r);
            }
            Ok((totals, retrievals))
        })?;
        report.rows.push(summarize(
            PATH_RETRIEVAL_TEACHER,
            pool_size,
            cfg.k,
            threads,
            totals,
            Some(retrievals),
        ));

        let totals = std::thread::scope(|scope| -> Result<_> {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| scope.spawn(|| run_kb_path(backbone, kb, chunk, cfg.warmup)))
                .collect();
            let mut totals = Vec::new();
            for h in handles {
                totals.extend(h.join().expect("bench thread panicked")?);
            }
            Ok(totals)
        })?;
        report.rows.push(summarize(PATH_KB_BACKBONE, pool_size, cfg.k, threads, totals, None));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) pairwise oracle with half credit for ties.
    fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let n = rng.gen_range(5..120);
            // Quantized scores inject plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + 7.0).collect();
        assert_eq!(auc(&transformed, &labels).unwrap(), base);
    }

    #[test]
    fn logloss_basics() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(&[0.5, 0.5], &[1, 0]).unwrap() - ln2).abs() < 1e-15);
        assert!(logloss(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-10);
        // Equals the mean of per-sample BCE exactly.
        let scores = [0.3, 0.9, 0.6];
        let labels = [0u8, 1, 1];
        let mean: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&s, &y)| math::bce(s, f64::from(y)))
            .sum::<f64>()
            / 3.0;
        assert_eq!(logloss(&scores, &labels).unwrap(), mean);
    }

    #[test]
    fn rel_impr_identity_and_errors() {
        assert_eq!(rel_impr(0.75, 0.75).unwrap(), 0.0);
        assert!(rel_impr(0.9, 0.5).is_err());
        assert!(rel_impr(0.9, 0.3).is_err());
    }

    #[test]
    fn rel_impr_known_values() {
        let a = rel_impr(0.9226, 0.8839).unwrap();
        assert!((a - 10.08).abs() < 0.005, "{a}");
        let b = rel_impr(0.8093, 0.7647).unwrap();
        assert!((b - 16.85).abs() < 0.005, "{b}");
    }
}
