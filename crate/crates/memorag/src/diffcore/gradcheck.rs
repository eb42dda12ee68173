use super::tensor::Tensor;
use super::DiffError;

/// A deterministic scalar loss over a list of parameter tensors.
/// Returns the loss and, when `want_grad`, one gradient vector per parameter.
pub type GradFn<'a> = &'a mut dyn FnMut(&[Tensor], bool) -> (f64, Option<Vec<Vec<f64>>>);

const REL_FLOOR: f64 = 1e-8;

/// Compares tape gradients against central differences over every parameter
/// entry and returns the maximum relative error.
pub fn grad_check(f: GradFn, params: &[Tensor], eps: f64) -> Result<f64, DiffError> {
    assert!(eps > 0.0, "eps must be positive");
    let (l0, grads) = f(params, true);
    let (l1, _) = f(params, false);
    if l0 != l1 {
        return Err(DiffError::NonDeterministic(l0, l1));
    }
    let grads = grads.expect("loss_fn must return gradients when asked");
    assert_eq!(grads.len(), params.len());

    let mut max_rel = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.values[ei];
            work[pi].values[ei] = orig + eps;
            let (lp, _) = f(&work, false);
            work[pi].values[ei] = orig - eps;
            let (lm, _) = f(&work, false);
            work[pi].values[ei] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let tg = grads[pi][ei];
            let rel = (tg - fd).abs() / tg.abs().max(fd.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use super::*;

    #[test]
    fn quadratic_matches_fd() {
        let mut f = |params: &[Tensor], want: bool| {
            let mut tape = Tape::new();
            let w = tape.leaf(params[0].clone());
            let sq = tape.mul(w, w);
            let loss = tape.mean_all(sq);
            let l = tape.scalar_value(loss);
            if want {
                tape.backward(loss);
                (l, Some(vec![tape.grad(w).to_vec()]))
            } else {
                (l, None)
            }
        };
        let params = vec![Tensor::scalar(3.0)];
        let rel = grad_check(&mut f, &params, 1e-5).unwrap();
        assert!(rel < 1e-8, "rel err {rel}");
    }

    #[test]
    fn linear_softmax_ce_matches_analytic() {
        // One linear layer + softmax CE; analytic gradient is (p − onehot) xᵀ.
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]);
        let target = 1usize;
        let mut f = |params: &[Tensor], want: bool| {
            let mut tape = Tape::new();
            let w = tape.leaf(params[0].clone());
            let xv = tape.constant(x.clone());
            let logits = tape.matmul(xv, w);
            let loss = tape.cross_entropy_rows(logits, &[target]);
            let l = tape.scalar_value(loss);
            if want {
                tape.backward(loss);
                (l, Some(vec![tape.grad(w).to_vec()]))
            } else {
                (l, None)
            }
        };
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect());
        let rel = grad_check(&mut f, &[w.clone()], 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");

        // Cross-check against the closed form.
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, wv);
        let loss = tape.cross_entropy_rows(logits, &[target]);
        tape.backward(loss);
        let p = crate::diffcore::softmax(&tape.value(logits).values).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let onehot = if c == target { 1.0 } else { 0.0 };
                let analytic = x.values[r] * (p[c] - onehot);
                assert!((tape.grad(wv)[r * 4 + c] - analytic).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nondeterminism_detected() {
        let mut calls = 0u32;
        let mut f = |_params: &[Tensor], _want: bool| {
            calls += 1;
            (calls as f64, Some(vec![vec![0.0]]))
        };
        let params = vec![Tensor::scalar(1.0)];
        assert!(grad_check(&mut f, &params, 1e-5).is_err());
    }
}
