//! Dense numeric kernel: tensors, a recorded-computation tape with
//! reverse-mode gradients, and a finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradFn};
pub use tape::{Tape, Var, LN_EPS, NEG_INF};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-deterministic loss function: evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
}

/// Numerically stabilized softmax of one row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>, DiffError> {
    if row.is_empty() {
        return Err(DiffError::Contract("softmax of empty input".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::Contract("softmax of non-finite input".into()));
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// −log softmax(logits)[target].
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64, DiffError> {
    if target >= logits.len() {
        return Err(DiffError::Contract(format!(
            "cross_entropy target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    Ok(-p[target].ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_reference_values() {
        // Frozen from high-precision scalar evaluation of exp/sum.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let loss = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_degenerate_vocab() {
        assert_eq!(cross_entropy(&[7.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_reference_value() {
        // −log(e²/(e²+1)) frozen from scalar evaluation.
        let loss = cross_entropy(&[2.0, 0.0], 0).unwrap();
        assert!((loss - 0.126928011042972).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_out_of_range() {
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn tape_quadratic_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(w, w);
        tape.backward(sq);
        assert!((tape.grad(w)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_associativity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut rng));
        let c = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut rng));
        let ab = tape.matmul(a, b);
        let ab_c = tape.matmul(ab, c);
        let bc = tape.matmul(b, c);
        let a_bc = tape.matmul(a, bc);
        let diff = tape
            .value(ab_c)
            .values
            .iter()
            .zip(&tape.value(a_bc).values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }
}
