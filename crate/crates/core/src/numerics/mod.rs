//! Dense tensors and tape-based reverse-mode differentiation.

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use kernels::AttentionLayout;
pub use params::{ParamId, ParamStore, Params};
pub use tensor::Tensor;

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_difference, max_relative_error};
    use super::*;
    use alloc::sync::Arc;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape.to_vec(), 1.0, rng)
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2();
        let (_, n) = b.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(Tensor::from_rows(&[&[2.0, 3.0], &[5.0, 7.0]]));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 3.0, 5.0, 7.0]);

        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(3);
        let a = rand_tensor(&[5, 7], &mut r);
        let b = rand_tensor(&[7, 3], &mut r);
        let expected = triple_loop(&a, &b);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            crate::Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn identity_associativity_is_bitwise() {
        let mut r = rng(11);
        for _ in 0..10 {
            let a = rand_tensor(&[4, 4], &mut r);
            let b = rand_tensor(&[4, 3], &mut r);
            let mut eye = Tensor::zeros([4, 4]);
            for i in 0..4 {
                eye.data_mut()[i * 5] = 1.0;
            }
            let mut g = Graph::new();
            let (va, vb, vi) = (g.constant(a), g.constant(b), g.constant(eye));
            let ai = g.matmul(va, vi).unwrap();
            let lhs = g.matmul(ai, vb).unwrap();
            let rhs = g.matmul(va, vb).unwrap();
            let bits = |v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(lhs), bits(rhs));
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![0.0; 3]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new([2], vec![1000.0, 1000.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        // exp-normalise evaluated directly: e^{i-3} / Σ e^{j-3}, exact reference values.
        let x = g.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut r = rng(5);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[4, 6], &mut r));
        let s0 = g.softmax(x, 0).unwrap();
        let s1 = g.softmax(x, 1).unwrap();
        let v0 = g.value(s0);
        for j in 0..6 {
            let total: f64 = (0..4).map(|i| v0.at(i, j)).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        for i in 0..4 {
            let total: f64 = g.value(s1).row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let s = g.sum(x);
        let grads = g.grad(s).unwrap();
        assert_eq!(grads.slice(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.grad(s).unwrap();
        assert_eq!(grads.slice(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn grad_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2]).with_grad());
        assert!(matches!(g.grad(x), Err(crate::Error::Contract(_))));
    }

    fn mlp_loss(params: &[Tensor], input: &Tensor) -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone().with_grad())).collect();
        let x = g.constant(input.clone());
        let h = g.matmul(x, vars[0]).unwrap();
        let h = g.add_row(h, vars[1]).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, vars[2]).unwrap();
        let o = g.add_row(o, vars[3]).unwrap();
        let o = g.sigmoid(o);
        let loss = g.binary_cross_entropy(o, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        (g, loss, vars)
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut r = rng(17);
        let input = rand_tensor(&[4, 5], &mut r);
        let params = vec![
            rand_tensor(&[5, 6], &mut r),
            rand_tensor(&[6], &mut r),
            rand_tensor(&[6, 1], &mut r),
            rand_tensor(&[1], &mut r),
        ];
        let (g, loss, vars) = mlp_loss(&params, &input);
        let grads = g.grad(loss).unwrap();
        for (pi, p) in params.iter().enumerate() {
            let numeric = central_difference(p.data(), 1e-5, |probe| {
                let mut ps = params.clone();
                ps[pi] = Tensor::new(p.shape().to_vec(), probe.to_vec()).unwrap();
                let (g, l, _) = mlp_loss(&ps, &input);
                g.value(l).data()[0]
            });
            let err = max_relative_error(grads.slice(vars[pi]).unwrap(), &numeric, 1e-8);
            assert!(err < 1e-4, "param {pi}: {err}");
        }
    }

    #[test]
    fn mean_pool_of_constant_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([5, 3], 2.5));
        let p = g.mean_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 2.5, 2.5]);
        assert_eq!(g.value(p).shape(), &[1, 3]);
    }

    #[test]
    fn bce_clamps_and_rejects() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(1.0));
        let l = g.binary_cross_entropy(p, &[1.0]).unwrap();
        assert!(g.value(l).data()[0] <= 1e-6);
        let p = g.constant(Tensor::scalar(0.0));
        let l = g.binary_cross_entropy(p, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - (-libm::log(BCE_CLAMP))).abs() < 1e-9);
        let bad = g.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(
            g.binary_cross_entropy(bad, &[1.0]),
            Err(crate::Error::Contract(_))
        ));
        let bad = g.constant(Tensor::scalar(1.5));
        assert!(g.binary_cross_entropy(bad, &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut r = rng(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([6, 16], 3.0, &mut r));
        let gamma = g.constant(Tensor::full([16], 1.0));
        let beta = g.constant(Tensor::zeros([16]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for i in 0..6 {
            let row = g.value(y).row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gather_concat_reshape_transpose_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let rows = g.gather_rows(x, &[1, 0, 1]).unwrap();
        assert_eq!(g.value(rows).data(), &[3., 4., 5., 0., 1., 2., 3., 4., 5.]);
        let t = g.transpose(x).unwrap();
        assert_eq!(g.value(t).shape(), &[3, 2]);
        assert_eq!(g.value(t).data(), &[0., 3., 1., 4., 2., 5.]);
        let r = g.reshape(x, &[3, 2]).unwrap();
        let c = g.concat_rows(&[r, t]).unwrap();
        assert_eq!(g.value(c).shape(), &[6, 2]);
        assert!(g.gather(x, Arc::from(vec![6usize]), &[1]).is_err());
    }

    /// Builds a scalar from one differentiable op applied to leaf inputs.
    type OpCase = fn(&mut Graph, &[Var]) -> Var;

    fn check_op(shapes: &[&[usize]], build: OpCase, seeds: u64, tol: f64, positive: bool) {
        for seed in 0..seeds {
            let mut r = rng(1000 + seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let mut t = rand_tensor(s, &mut r);
                    if positive {
                        t.data_mut().iter_mut().for_each(|v| *v = 0.05 + 0.9 * kernels::sigmoid(*v));
                    }
                    t
                })
                .collect();
            // Fixed random projection makes the scalar depend on every output element.
            let eval = |ins: &[Tensor], grad: bool| {
                let mut g = Graph::new();
                let vars: Vec<Var> = ins
                    .iter()
                    .map(|t| if grad { g.input(t.clone().with_grad()) } else { g.constant(t.clone()) })
                    .collect();
                let out = build(&mut g, &vars);
                let mut pr = rng(99);
                let w: Vec<f64> = (0..g.value(out).numel()).map(|_| pr.random_range(-1.0..1.0)).collect();
                let wv = g.constant(Tensor::new(g.value(out).shape().to_vec(), w).unwrap());
                let prod = g.mul(out, wv).unwrap();
                let loss = g.sum(prod);
                (g, loss, vars)
            };
            let (g, loss, vars) = eval(&inputs, true);
            let grads = g.grad(loss).unwrap();
            for (i, t) in inputs.iter().enumerate() {
                let numeric = central_difference(t.data(), 1e-5, |probe| {
                    let mut ins = inputs.clone();
                    ins[i] = Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap();
                    let (g, l, _) = eval(&ins, false);
                    g.value(l).data()[0]
                });
                let analytic = grads.slice(vars[i]).unwrap();
                let err = max_relative_error(analytic, &numeric, 1e-6);
                assert!(err < tol, "seed {seed} input {i}: relative error {err}");
            }
        }
    }

    #[test]
    fn every_op_passes_gradient_check_on_ten_seeds() {
        check_op(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.transpose(v[0]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.scale(v[0], -0.7), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.mean_pool(v[0]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.gelu(v[0]), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.sigmoid(v[0]), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.softmax(v[0], 1).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.softmax(v[0], 0).unwrap(), 10, 1e-4, false);
        check_op(
            &[&[3, 5], &[5], &[5]],
            |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
            10,
            1e-4,
            false,
        );
        check_op(&[&[3, 4]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap(), 10, 1e-4, false);
        check_op(&[&[3, 4]], |g, v| g.reshape(v[0], &[6, 2]).unwrap(), 10, 1e-4, false);
        check_op(&[&[1, 4], &[2, 4]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap(), 10, 1e-4, false);
        check_op(
            &[&[4, 1]],
            |g, v| g.binary_cross_entropy(v[0], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
            10,
            1e-4,
            true,
        );
        check_op(
            &[&[6, 4], &[6, 4], &[6, 4]],
            |g, v| {
                let layout = AttentionLayout {
                    tokens: 6,
                    group: 3,
                    masks: vec![None, Some(vec![0.0, -1e9, 0.0, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0])],
                };
                g.grouped_attention(v[0], v[1], v[2], Arc::new(layout), 2).unwrap()
            },
            10,
            1e-4,
            false,
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([4], vec![-1.0, 0.5, 0.01, 2.0]).unwrap().with_grad());
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.grad(s).unwrap();
        assert_eq!(grads.slice(x).unwrap(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([2], 3.0));
        let x = g.input(Tensor::full([2], 1.0).with_grad());
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.grad(s).unwrap();
        assert!(grads.slice(c).is_none());
        assert_eq!(grads.slice(x).unwrap(), &[3.0, 3.0]);
    }
}
