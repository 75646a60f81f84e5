//! Central finite-difference gradient checking.
//!
//! The checker perturbs only live branches: stop-gradient outputs recorded on
//! the baseline tape are replayed during perturbed evaluations, so the
//! finite-difference oracle matches the stop-gradient semantics of the
//! analytic backward pass.

use super::tape::{NodeId, Tape};
use super::ParamStore;
use crate::error::{Error, Result};

/// Outcome of a gradient check over every non-frozen parameter entry.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare the analytic gradient of a scalar loss against central finite
/// differences with step `h`, for every entry of every non-frozen parameter.
///
/// Relative error convention: |analytic - fd| / max(|analytic|, |fd|, 1.0) —
/// scale-aware for O(1) gradients, absolute near zero.
///
/// Errors if two evaluations of the loss at the same point differ
/// (non-deterministic loss function).
pub fn grad_check<F>(store: &mut ParamStore, h: f64, tol: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let mut baseline_tape = Tape::new();
    let loss_node = loss_fn(store, &mut baseline_tape)?;
    let baseline = baseline_tape.scalar(loss_node)?;
    let stops: Vec<Vec<f64>> = baseline_tape.stop_log().to_vec();

    // Determinism probe: a second evaluation must give bit-identical loss.
    {
        let mut probe = Tape::new();
        let node = loss_fn(store, &mut probe)?;
        let again = probe.scalar(node)?;
        if again.to_bits() != baseline.to_bits() {
            return Err(Error::NonDeterministic {
                detail: format!("loss evaluated to {baseline} then {again}"),
            });
        }
    }

    let analytic = baseline_tape.backward(loss_node)?;

    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(|n| n.to_string())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        tol,
    };

    for name in &names {
        let len = store.values(name)?.len();
        for i in 0..len {
            let orig = store.values(name)?[i];

            let mut eval_at = |value: f64, store: &mut ParamStore| -> Result<f64> {
                store.values_mut(name)?[i] = value;
                let mut tape = Tape::with_stop_replay(stops.clone());
                let node = loss_fn(store, &mut tape);
                store.values_mut(name)?[i] = orig;
                tape.scalar(node?)
            };

            let plus = eval_at(orig + h, store)?;
            let minus = eval_at(orig - h, store)?;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map(|g| g[i]).unwrap_or(0.0);

            let denom = a.abs().max(fd.abs()).max(1.0);
            let err = (a - fd).abs() / denom;
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = 0.5 * ||w||^2 has gradient w.
        let mut store = ParamStore::new();
        store.add("w", vec![4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let report = grad_check(&mut store, 1e-5, 1e-4, |s, t| {
            let w = t.param(s, "w")?;
            let sq = t.dot(w, w)?;
            t.scale(sq, 0.5)
        })
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![1.0, 2.0]).unwrap();
        store.add("frozen", vec![2], vec![1.0, 1.0]).unwrap();
        store.set_frozen_group("frozen", true);
        let report = grad_check(&mut store, 1e-5, 1e-4, |s, t| {
            let w = t.param(s, "w")?;
            let f = t.param(s, "frozen")?;
            let d = t.dot(w, f)?;
            t.scale(d, 1.0)
        })
        .unwrap();
        assert_eq!(report.entries_checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![1.0]).unwrap();
        let mut counter = 0.0;
        let result = grad_check(&mut store, 1e-5, 1e-4, |s, t| {
            counter += 1.0;
            let w = t.param(s, "w")?;
            let c = t.scalar_constant(counter)?;
            t.dot(w, c)
        });
        assert!(matches!(result, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn stop_gradient_two_sided_oracle() {
        // loss = dot(w, stop(w)). Analytic gradient (stop respected) is
        // stop(w)'s value. A naive finite difference through the whole
        // function would see d/dw [w*w] = 2w instead; the replaying checker
        // must agree with the analytic side, and the naive difference must
        // differ by exactly the stopped contribution.
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![0.7, -0.4]).unwrap();

        let report = grad_check(&mut store, 1e-5, 1e-4, |s, t| {
            let w = t.param(s, "w")?;
            let sw = t.stop_gradient(w)?;
            t.dot(w, sw)
        })
        .unwrap();
        assert!(report.passed(), "stop-respecting check failed: {}", report.max_rel_err);

        // Naive two-sided difference (no replay) on entry 0:
        let h = 1e-5;
        let eval = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let w = t.param(store, "w").unwrap();
            let sw = t.stop_gradient(w).unwrap();
            let loss = t.dot(w, sw).unwrap();
            t.scalar(loss).unwrap()
        };
        let orig = store.values("w").unwrap()[0];
        store.values_mut("w").unwrap()[0] = orig + h;
        let plus = eval(&store);
        store.values_mut("w").unwrap()[0] = orig - h;
        let minus = eval(&store);
        store.values_mut("w").unwrap()[0] = orig;
        let naive_fd = (plus - minus) / (2.0 * h);
        // Naive sees 2w; the stopped contribution is exactly w.
        assert!((naive_fd - 2.0 * orig).abs() < 1e-6);
        assert!((naive_fd - orig).abs() > 1e-3, "stop made no difference");
    }

    #[test]
    fn random_mlp_path_passes() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.add_embedding("emb", 5, 4, &mut rng).unwrap();
            store.add_affine("l1", 6, 8, &mut rng).unwrap();
            store.add_affine("l2", 1, 6, &mut rng).unwrap();
            let label = f64::from(rng.gen::<bool>());
            let report = grad_check(&mut store, 1e-5, 1e-4, |s, t| {
                let emb = t.param(s, "emb")?;
                let x = t.embedding_lookup(emb, &[0, 3], 4)?;
                let w1 = t.param(s, "l1.w")?;
                let b1 = t.param(s, "l1.b")?;
                let h1 = t.affine(w1, b1, x)?;
                let a1 = t.relu(h1)?;
                let w2 = t.param(s, "l2.w")?;
                let b2 = t.param(s, "l2.b")?;
                let logit = t.affine(w2, b2, a1)?;
                let p = t.sigmoid(logit)?;
                t.bce_loss(p, label)
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: rel err {}", report.max_rel_err);
        }
    }
}
