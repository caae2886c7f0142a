//! Dense reverse-mode differentiation and the Adam optimizer behind the
//! miniature detector.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, relative_error, Differentiable, GradCheckOptions, GradCheckReport, Precision};
pub use graph::{Graph, NodeId};
pub use optim::{AdamConfig, OptimState};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(p);
        let (loss, grads) = g.forward_backward(s).unwrap();
        assert_eq!(loss, 6.0);
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_product_gradient() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let sq = g.mul(p, p);
        let s = g.sum(sq);
        let (loss, grads) = g.forward_backward(s).unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(grads[0].data(), &[4.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::zeros(&[2, 2]));
        let r = g.relu(p);
        assert!(matches!(g.forward_backward(r), Err(crate::Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_reports_offending_node() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap());
        let s = g.sum(p);
        match g.forward_backward(s) {
            Err(crate::Error::NonFinite { node, op }) => {
                assert_eq!(node, p.index());
                assert_eq!(op, "param");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn frozen_inputs_receive_no_gradient_slot() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = g.matmul(x, w, false);
        let s = g.sum(y);
        let (_, grads) = g.forward_backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].data(), &[1.0, 2.0]);
    }

    struct Affine;
    impl Differentiable for Affine {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[NodeId]) -> NodeId {
            let y = g.matmul(p[0], p[1], false);
            let y = g.add(y, p[2]);
            let y = g.scale(y, T::of(0.5));
            g.sum(y)
        }
    }

    #[test]
    fn affine_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            rand_tensor(&mut rng, &[3, 4], 1.0),
            rand_tensor(&mut rng, &[4, 2], 1.0),
            rand_tensor(&mut rng, &[2], 1.0),
        ];
        let r = grad_check(&Affine, &params, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    struct Mlp;
    impl Differentiable for Mlp {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[NodeId]) -> NodeId {
            let h = g.matmul(p[0], p[1], false);
            let h = g.add(h, p[2]);
            let h = g.relu(h);
            let o = g.matmul(h, p[3], false);
            let o = g.add(o, p[4]);
            let o = g.sigmoid(o);
            g.mean(o)
        }
    }

    #[test]
    fn two_layer_perceptron_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            rand_tensor(&mut rng, &[5, 6], 1.0),
            rand_tensor(&mut rng, &[6, 8], 1.0),
            rand_tensor(&mut rng, &[8], 0.5),
            rand_tensor(&mut rng, &[8, 3], 1.0),
            rand_tensor(&mut rng, &[3], 0.5),
        ];
        let opts = GradCheckOptions {
            h: 1e-3,
            precision: Precision::F32,
            ..Default::default()
        };
        let r = grad_check(&Mlp, &params, opts).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    struct SoftmaxCe;
    impl Differentiable for SoftmaxCe {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[NodeId]) -> NodeId {
            let logits = g.matmul(p[0], p[1], false);
            let w: Vec<T> = [1.0, 0.1, 0.5, 1.0].iter().map(|&v| T::of(v)).collect();
            g.cross_entropy(logits, &[2, 0, 4, 1], &w)
        }
    }

    #[test]
    fn cross_entropy_head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_tensor(&mut rng, &[4, 6], 1.0), rand_tensor(&mut rng, &[6, 5], 1.0)];
        let r = grad_check(&SoftmaxCe, &params, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    struct NonDeterministic(std::cell::Cell<f64>);
    impl Differentiable for NonDeterministic {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[NodeId]) -> NodeId {
            self.0.set(self.0.get() + 1.0);
            let s = g.sum(p[0]);
            g.scale(s, T::of(self.0.get()))
        }
    }

    #[test]
    fn nondeterminism_is_detected() {
        let f = NonDeterministic(std::cell::Cell::new(0.0));
        let err = grad_check(&f, &[Tensor::scalar(1.0)], GradCheckOptions::default());
        assert!(matches!(err, Err(crate::Error::Nondeterministic(..))));
    }

    /// One op applied to random inputs and reduced with a random linear
    /// functional, so every output entry contributes.
    #[derive(Clone, Copy, Debug)]
    enum OpUnderTest {
        MatMul,
        MatMulT,
        AddBroadcast,
        Mul,
        Relu,
        Sigmoid,
        Softmax,
        LayerNorm,
        Gather,
        Concat,
        CrossEntropy,
        L1,
        Giou,
    }

    struct OpCase {
        op: OpUnderTest,
        target: Tensor<f64>,
    }

    impl Differentiable for OpCase {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[NodeId]) -> NodeId {
            let out = match self.op {
                OpUnderTest::MatMul => g.matmul(p[0], p[1], false),
                OpUnderTest::MatMulT => g.matmul(p[0], p[1], true),
                OpUnderTest::AddBroadcast => g.add(p[0], p[1]),
                OpUnderTest::Mul => g.mul(p[0], p[1]),
                OpUnderTest::Relu => g.relu(p[0]),
                OpUnderTest::Sigmoid => g.sigmoid(p[0]),
                OpUnderTest::Softmax => g.softmax(p[0]),
                OpUnderTest::LayerNorm => g.layer_norm(p[0], p[1], p[2]),
                OpUnderTest::Gather => g.gather(p[0], &[2, 0, 2]),
                OpUnderTest::Concat => g.concat(&[p[0], p[1]]),
                OpUnderTest::CrossEntropy => {
                    let w = vec![T::one(), T::of(0.1), T::of(2.0)];
                    return g.cross_entropy(p[0], &[1, 3, 0], &w);
                }
                OpUnderTest::L1 => return g.l1(p[0], self.target.cast()),
                OpUnderTest::Giou => {
                    let boxes = g.sigmoid(p[0]);
                    return g.giou_loss(boxes, self.target.cast());
                }
            };
            let w = g.input(self.target.cast());
            let prod = g.mul(out, w);
            g.sum(prod)
        }
    }

    fn op_case(op: OpUnderTest, rng: &mut ChaCha8Rng) -> (OpCase, Vec<Tensor<f64>>) {
        let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, 1.0);
        let (params, out_shape): (Vec<Tensor<f64>>, Vec<usize>) = match op {
            OpUnderTest::MatMul => (vec![r(rng, &[3, 4]), r(rng, &[4, 5])], vec![3, 5]),
            OpUnderTest::MatMulT => (vec![r(rng, &[3, 4]), r(rng, &[5, 4])], vec![3, 5]),
            OpUnderTest::AddBroadcast => (vec![r(rng, &[3, 4]), r(rng, &[4])], vec![3, 4]),
            OpUnderTest::Mul => (vec![r(rng, &[3, 4]), r(rng, &[3, 4])], vec![3, 4]),
            OpUnderTest::Relu | OpUnderTest::Sigmoid | OpUnderTest::Softmax => {
                (vec![r(rng, &[3, 4])], vec![3, 4])
            }
            OpUnderTest::LayerNorm => (
                vec![r(rng, &[3, 6]), r(rng, &[6]), r(rng, &[6])],
                vec![3, 6],
            ),
            OpUnderTest::Gather => (vec![r(rng, &[4, 3])], vec![3, 3]),
            OpUnderTest::Concat => (vec![r(rng, &[2, 3]), r(rng, &[4, 3])], vec![6, 3]),
            OpUnderTest::CrossEntropy => (vec![r(rng, &[3, 5])], vec![1]),
            OpUnderTest::L1 => (vec![r(rng, &[3, 4])], vec![3, 4]),
            OpUnderTest::Giou => (vec![r(rng, &[3, 4])], vec![3, 4]),
        };
        let target = match op {
            OpUnderTest::Giou => {
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|_| {
                        vec![
                            rng.gen_range(0.3..0.7),
                            rng.gen_range(0.3..0.7),
                            rng.gen_range(0.1..0.5),
                            rng.gen_range(0.1..0.5),
                        ]
                    })
                    .collect();
                Tensor::from_rows(&rows).unwrap()
            }
            _ => r(rng, &out_shape),
        };
        (OpCase { op, target }, params)
    }

    const ALL_OPS: [OpUnderTest; 13] = [
        OpUnderTest::MatMul,
        OpUnderTest::MatMulT,
        OpUnderTest::AddBroadcast,
        OpUnderTest::Mul,
        OpUnderTest::Relu,
        OpUnderTest::Sigmoid,
        OpUnderTest::Softmax,
        OpUnderTest::LayerNorm,
        OpUnderTest::Gather,
        OpUnderTest::Concat,
        OpUnderTest::CrossEntropy,
        OpUnderTest::L1,
        OpUnderTest::Giou,
    ];

    #[test]
    fn every_op_matches_finite_differences_over_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for op in ALL_OPS {
            for trial in 0..100 {
                let (case, params) = op_case(op, &mut rng);
                for (precision, tol) in [(Precision::F64, 1e-5), (Precision::F32, 1e-3)] {
                    let opts = GradCheckOptions {
                        h: 1e-6,
                        precision,
                        probes_per_tensor: None,
                        seed: trial,
                        // central differences of an f64 function carry ~1e-10
                        // rounding noise at this step
                        denom_floor: 1e-4,
                    };
                    let r = grad_check(&case, &params, opts).unwrap();
                    assert!(
                        r.max_rel_error < tol,
                        "{op:?} trial {trial} {precision:?}: {r:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<Tensor<f32>> = vec![
            rand_tensor(&mut rng, &[5, 6], 1.0).cast(),
            rand_tensor(&mut rng, &[6, 8], 1.0).cast(),
            rand_tensor(&mut rng, &[8], 0.5).cast(),
            rand_tensor(&mut rng, &[8, 3], 1.0).cast(),
            rand_tensor(&mut rng, &[3], 0.5).cast(),
        ];
        let run = || {
            let mut g = Graph::<f32>::new();
            let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
            let out = Mlp.build(&mut g, &ids);
            g.forward_backward(out).unwrap()
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[4, 5], 1.0);
            let w1 = rand_tensor(&mut rng, &[4, 5], 1.0);
            let w2 = rand_tensor(&mut rng, &[4, 5], 1.0);
            let grad_of = |ws: &[&Tensor<f64>]| {
                let mut g = Graph::<f64>::new();
                let p = g.param(x.clone());
                let s = g.sigmoid(p);
                let mut terms = Vec::new();
                for w in ws {
                    let wi = g.input((*w).clone());
                    let m = g.mul(s, wi);
                    terms.push(g.sum(m));
                }
                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = g.add(total, t);
                }
                g.forward_backward(total).unwrap().1.remove(0)
            };
            let joint = grad_of(&[&w1, &w2]);
            let mut separate = grad_of(&[&w1]);
            separate.add_assign(&grad_of(&[&w2]));
            assert!(joint.max_abs_diff(&separate) < 1e-12);
        }
    }
}
