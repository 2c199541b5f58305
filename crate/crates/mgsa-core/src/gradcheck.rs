//! Finite-difference verification of the backward pass.
//!
//! Central differences of the forward computation are the reference that
//! every analytic gradient is judged against: the checks here never consult
//! the backward rules they validate. Used by the test suite and exposed
//! through the `gradcheck` CLI subcommand.

use std::collections::BTreeMap;

use rand::Rng;

use crate::params::ParamStore;
use crate::tensor::{seeded_rng, Tape, Tensor, TensorId};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for single primitives.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for gradients through a whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch: {} vs {}", a.len(), b.len());
    let diff = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central-difference gradient of `f` at `inputs`.
pub fn finite_difference(inputs: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; inputs.len()];
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        probe[i] = inputs[i] + h;
        let up = f(&probe);
        probe[i] = inputs[i] - h;
        let down = f(&probe);
        probe[i] = inputs[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Checks one op: builds a scalar loss from leaf tensors of the given shapes,
/// compares tape gradients against central differences. The loss projects the
/// op output against a fixed random weighting so that misrouted gradients
/// cannot cancel out.
fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    seed: u64,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> CheckReport {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seeded_rng(seed);
    let values: Vec<f64> = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();

    let assemble = |vals: &[f64], tape: &mut Tape, with_grad: bool| -> Vec<TensorId> {
        let mut ids = Vec::new();
        let mut offset = 0;
        for (shape, &size) in shapes.iter().zip(&sizes) {
            let mut t = Tensor::new(shape.clone(), vals[offset..offset + size].to_vec());
            if with_grad {
                t = t.with_grad();
            }
            ids.push(tape.leaf(t));
            offset += size;
        }
        ids
    };

    let mut tape = Tape::new();
    let ids = assemble(&values, &mut tape, true);
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let mut analytic = Vec::with_capacity(total);
    for &id in &ids {
        analytic.extend_from_slice(tape.grad(id).expect("leaf gradient missing"));
    }

    let numeric = finite_difference(&values, FD_STEP, |vals| {
        let mut tape = Tape::new();
        let ids = assemble(vals, &mut tape, false);
        let loss = build(&mut tape, &ids);
        tape.data(loss)[0]
    });

    CheckReport {
        name: name.to_string(),
        rel_err: relative_error(&analytic, &numeric),
        tolerance: OP_TOLERANCE,
    }
}

/// Sums the op output against a fixed pseudo-random projection, yielding a
/// scalar whose gradient exercises every output entry distinctly.
fn project(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights: Vec<f64> = (0..numel).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = tape.constant(shape, weights);
    let weighted = tape.mul(out, w);
    tape.sum_all(weighted)
}

/// Runs the finite-difference check over every registered tape operation.
pub fn check_all_ops(seed: u64) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let mut case =
        |name: &str, shapes: &[Vec<usize>], build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId| {
            reports.push(check_op(name, shapes, seed, build));
        };

    case("add", &[vec![3, 4], vec![3, 4]], &|t, ids| {
        let y = t.add(ids[0], ids[1]);
        project(t, y, 1)
    });
    case("sub", &[vec![3, 4], vec![3, 4]], &|t, ids| {
        let y = t.sub(ids[0], ids[1]);
        project(t, y, 2)
    });
    case("mul", &[vec![3, 4], vec![3, 4]], &|t, ids| {
        let y = t.mul(ids[0], ids[1]);
        project(t, y, 3)
    });
    case("add_bias", &[vec![3, 4], vec![4]], &|t, ids| {
        let y = t.add_bias(ids[0], ids[1]);
        project(t, y, 4)
    });
    case("scale", &[vec![3, 4]], &|t, ids| {
        let y = t.scale(ids[0], -1.75);
        project(t, y, 5)
    });
    case("sigmoid", &[vec![3, 4]], &|t, ids| {
        let y = t.sigmoid(ids[0]);
        project(t, y, 6)
    });
    case("tanh", &[vec![3, 4]], &|t, ids| {
        let y = t.tanh(ids[0]);
        project(t, y, 7)
    });
    case("relu", &[vec![3, 4]], &|t, ids| {
        let y = t.relu(ids[0]);
        project(t, y, 8)
    });
    case("matmul", &[vec![3, 4], vec![4, 2]], &|t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        project(t, y, 9)
    });
    case("transpose", &[vec![3, 4]], &|t, ids| {
        let y = t.transpose(ids[0]);
        project(t, y, 10)
    });
    case("softmax_rows", &[vec![3, 5]], &|t, ids| {
        let y = t.softmax_rows(ids[0]);
        project(t, y, 11)
    });
    case("cumsum_rows", &[vec![3, 5]], &|t, ids| {
        let y = t.cumsum_rows(ids[0]);
        project(t, y, 12)
    });
    case("concat_last_dim", &[vec![3, 2], vec![3, 3], vec![3, 1]], &|t, ids| {
        let y = t.concat_last_dim(ids);
        project(t, y, 13)
    });
    case("concat_rows", &[vec![2, 3], vec![1, 3], vec![3, 3]], &|t, ids| {
        let y = t.concat_rows(ids);
        project(t, y, 14)
    });
    case("slice_rows", &[vec![4, 3]], &|t, ids| {
        let y = t.slice_rows(ids[0], 1, 3);
        project(t, y, 15)
    });
    case("max_over_axis_0", &[vec![4, 3]], &|t, ids| {
        let y = t.max_over_axis(ids[0], 0);
        project(t, y, 16)
    });
    case("max_over_axis_1", &[vec![4, 3]], &|t, ids| {
        let y = t.max_over_axis(ids[0], 1);
        project(t, y, 17)
    });
    case("mean_over_axis_0", &[vec![4, 3]], &|t, ids| {
        let y = t.mean_over_axis(ids[0], 0);
        project(t, y, 18)
    });
    case("mean_over_axis_1", &[vec![4, 3]], &|t, ids| {
        let y = t.mean_over_axis(ids[0], 1);
        project(t, y, 19)
    });
    case("sum_all", &[vec![3, 4]], &|t, ids| t.sum_all(ids[0]));
    case("embedding_lookup", &[vec![5, 3]], &|t, ids| {
        let y = t.embedding_lookup(ids[0], &[0, 2, 2, 4]);
        project(t, y, 20)
    });
    case("cross_entropy_from_logits", &[vec![3, 4]], &|t, ids| {
        t.cross_entropy_from_logits(ids[0], &[1, 0, 3])
    });
    case("layer_norm", &[vec![3, 4], vec![4], vec![4]], &|t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2]);
        project(t, y, 21)
    });

    reports
}

/// Compares analytic gradients of a scalar loss with central differences for
/// every parameter in the store. `loss` must be a pure function of the store;
/// `grads` runs the backward pass once and reports gradients by name.
pub fn check_parameter_gradients(
    store: &ParamStore,
    tolerance: f64,
    loss: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&ParamStore) -> BTreeMap<String, Vec<f64>>,
) -> Vec<CheckReport> {
    let analytic = grads(store);
    let mut reports = Vec::new();
    for (name, param) in store.iter() {
        let mut perturbed = store.clone();
        let numeric = finite_difference(&param.data, FD_STEP, |vals| {
            perturbed.get_mut(name).data.copy_from_slice(vals);
            loss(&perturbed)
        });
        let a = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient reported for {name:?}"));
        reports.push(CheckReport {
            name: name.clone(),
            rel_err: relative_error(a, &numeric),
            tolerance,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for report in check_all_ops(7) {
            assert!(
                report.passed(),
                "op {} rel err {} exceeds {}",
                report.name,
                report.rel_err,
                report.tolerance
            );
        }
    }

    #[test]
    fn parameter_check_flags_a_corrupted_gradient() {
        let mut store = ParamStore::new();
        store.insert_tensor("w", Tensor::new(vec![2], vec![0.3, -0.7]));
        let loss = |s: &ParamStore| s.get("w").data.iter().map(|&v| v * v).sum::<f64>();
        let good = |s: &ParamStore| {
            let mut m = BTreeMap::new();
            m.insert("w".to_string(), s.get("w").data.iter().map(|&v| 2.0 * v).collect());
            m
        };
        let bad = |s: &ParamStore| {
            let mut m = BTreeMap::new();
            m.insert("w".to_string(), s.get("w").data.iter().map(|&v| 3.0 * v).collect());
            m
        };
        assert!(check_parameter_gradients(&store, 1e-6, loss, good)
            .iter()
            .all(CheckReport::passed));
        assert!(!check_parameter_gradients(&store, 1e-6, loss, bad)
            .iter()
            .all(CheckReport::passed));
    }
}
