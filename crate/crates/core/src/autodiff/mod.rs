//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Every operation records its output on a [`Graph`]; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into leaves that
//! were created with `requires_grad`.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    /// Central-difference oracle for a scalar function of one leaf.
    fn numeric_grad(
        x0: &[f64],
        shape: &[usize],
        f: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) -> Vec<f64> {
        let h = 1e-5;
        (0..x0.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut x = x0.to_vec();
                    x[i] += delta;
                    let mut g = Graph::new();
                    let v = g.constant(t(shape, &x));
                    let out = f(&mut g, v);
                    g.value(out).item().unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic_grad(
        x0: &[f64],
        shape: &[usize],
        f: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.param(t(shape, x0));
        let out = f(&mut g, v);
        g.backward(out).unwrap();
        g.grad(v).unwrap().to_vec()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() / y.abs().max(1.0) < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 4]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 4]);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut g = Graph::<f64>::new();
        let x = [1.0, -2.0, 3.5, 0.25, 7.0, -1.0];
        let a = g.constant(t(&[2, 3], &x));
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let c = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(c).data(), &x);
    }

    #[test]
    fn grad_of_sum_of_product_is_other_factor() {
        let bvals = [0.3, -1.2, 2.0, 0.7];
        let a0 = [1.0, 2.0, -3.0, 0.5];
        let f = |g: &mut Graph<f64>, a: Var| {
            let b = g.constant(t(&[4], &bvals));
            let p = g.mul(a, b).unwrap();
            g.sum(p).unwrap()
        };
        let ana = analytic_grad(&a0, &[4], f);
        let num = numeric_grad(&a0, &[4], f);
        assert_close(&ana, &bvals, 1e-12);
        assert_close(&ana, &num, 1e-8);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[2.0; 4]));
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.value(s).data(), &[0.25; 4], 1e-15);

        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.value(s).data(), &[0.25, 0.75], 1e-15);

        let base = [0.1, -0.4, 2.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 1000.0).collect();
        let a = g.constant(t(&[3], &base));
        let b = g.constant(t(&[3], &shifted));
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        assert_close(g.value(sa).data(), g.value(sb).data(), 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let s = g.softmax(x, 1).unwrap();
        let y = g.value(s).data();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| y[o * 12 + j * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        // second call accumulates
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.param(t(&[1], &[2.0]));
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none_or(|gx| gx == [0.0]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let x0: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.21).collect();
        let w: Vec<f64> = (0..16).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.3).collect();
        let f = |g: &mut Graph<f64>, x: Var| {
            let w = g.constant(t(&[4, 4], &w));
            let gamma = g.constant(t(&[4], &[1.0, 0.5, -0.7, 2.0]));
            let beta = g.constant(t(&[4], &[0.1, 0.0, 0.2, -0.3]));
            let h = g.matmul(x, w).unwrap(); // [2,3,4]
            let h = g.layer_norm(h, gamma, beta).unwrap();
            let ht = g.transpose(h).unwrap(); // [2,4,3]
            let s = g.matmul(h, ht).unwrap(); // [2,3,3]
            let s = g.softmax(s, 2).unwrap();
            let o = g.matmul(s, h).unwrap(); // [2,3,4]
            let a = g.slice(o, 2, 1, 3).unwrap();
            let b = g.slice(o, 2, 0, 2).unwrap();
            let c = g.concat(&[a, b], 2).unwrap();
            let c = g.relu(c).unwrap();
            let pooled = g.weighted_pool(c, &[0.5, 0.5, 0.0, 0.2, 0.3, 0.5]).unwrap();
            let r = g.reshape(pooled, &[8]).unwrap();
            let m = g.mul(r, r).unwrap();
            let s1 = g.sum_axis(c, 1).unwrap();
            let s1 = g.mean(s1).unwrap();
            let s2 = g.sum(m).unwrap();
            g.add(s1, s2).unwrap()
        };
        let ana = analytic_grad(&x0, &[2, 3, 4], f);
        let num = numeric_grad(&x0, &[2, 3, 4], f);
        assert_close(&ana, &num, 1e-6);
    }

    #[test]
    fn losses_match_finite_differences() {
        let x0: Vec<f64> = (0..12).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.4).collect();
        let f = |g: &mut Graph<f64>, x: Var| {
            let ce = g
                .cross_entropy(x, &[0, 3, 2], &[1.0, 0.5, 0.0])
                .unwrap();
            let se = g
                .squared_error(x, &[0.5; 12], &[0.1; 12])
                .unwrap();
            let bce = g
                .bce_with_logits(x, &[1.0; 12], &[0.3; 12])
                .unwrap();
            let s = g.add(ce, se).unwrap();
            g.add(s, bce).unwrap()
        };
        let ana = analytic_grad(&x0, &[3, 4], f);
        let num = numeric_grad(&x0, &[3, 4], f);
        assert_close(&ana, &num, 1e-7);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::<f64>::new();
        let table = g.param(t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]));
        let e = g
            .embedding(table, &[2, 1, 1, 0], &[true, true, false, true], &[4])
            .unwrap();
        assert_eq!(
            g.value(e).data(),
            &[3.0, 4.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]
        );
        let l = g.sum(e).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            g.embedding(table, &[3], &[true], &[1]),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 3, 2], &[1.0, 5.0, 4.0, 2.0, 9.0, 9.0]));
        let p = g.max_pool(x, &[true, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, 5.0]);
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
