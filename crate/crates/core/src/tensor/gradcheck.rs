//! Central-difference gradient validation.

use rand::seq::index::sample;

use super::{rng, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares tape gradients of `f` against `(f(w+h) - f(w-h)) / 2h`.
///
/// Tensors with more than `per_tensor` elements are checked on a seeded
/// sample of `per_tensor` coordinates (at least 32).
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64, per_tensor: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let per_tensor = per_tensor.max(32);
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut work = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut coords_checked = 0;
    for (ti, var) in vars.iter().enumerate() {
        let numel = params[ti].numel();
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let coords: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            let mut r = rng::stream(0x9c4a_u64 ^ ti as u64);
            let mut idx = sample(&mut r, numel, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        coords_checked,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tensor::{Init, RopeCache};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Normal { std: 0.5 }, seed).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|t, v| Ok(t.sum_squares(v[0])), &[randn(&[10], 1)], 1e-4, 1e-8, 32).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(randn(&[4], 2), true);
        let c = tape.leaf(randn(&[4], 3), false);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        let r = grad_check(|t, v| Ok(t.sum(v[1])), &[randn(&[4], 2), randn(&[4], 3)], 1e-4, 1e-8, 32).unwrap();
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn matmul_chain() {
        let params = [randn(&[3, 4], 1), randn(&[4, 5], 2), randn(&[5, 2], 3)];
        let r = grad_check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let abc = t.matmul(ab, v[2])?;
                Ok(t.sum_squares(abc))
            },
            &params,
            1e-4,
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn every_primitive() {
        let (batch, seq, heads, d) = (2, 4, 2, 8);
        let cache = Arc::new(RopeCache::<f64>::new(d / heads, seq, 10000.0).unwrap());
        let targets: Vec<usize> = (0..batch * seq).map(|i| (i * 3) % 6).collect();
        let mask: Vec<bool> = (0..batch * seq).map(|i| i % 3 != 1).collect();
        let ids: Vec<usize> = (0..batch * seq).map(|i| (i * 5) % 6).collect();
        let params = [
            randn(&[6, d], 1),
            randn(&[d], 2),
            randn(&[d, d], 3),
            randn(&[d, d], 4),
            randn(&[d, d], 5),
            randn(&[d, 6], 6),
        ];
        let r = grad_check(
            |t, v| {
                let x = t.embedding(v[0], &ids)?;
                let h = t.rms_norm(x, v[1], 1e-5)?;
                let q = t.matmul(h, v[2])?;
                let q = t.rope(q, seq, heads, &cache)?;
                let k = t.matmul(h, v[3])?;
                let k = t.rope(k, seq, heads, &cache)?;
                let vv = t.matmul(h, v[4])?;
                let a = t.causal_attention(q, k, vv, batch, seq, heads)?;
                let a = t.silu(a);
                let a = t.scale(a, 0.7);
                let x = t.add(x, a)?;
                let sm = t.softmax_rows(x);
                let x = t.add(x, sm)?;
                let logits = t.matmul(x, v[5])?;
                t.cross_entropy(logits, &targets, &mask)
            },
            &params,
            1e-4,
            1e-5,
            48,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
