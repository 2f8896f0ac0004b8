use nmt_core::data::{Batch, IdPair};
use nmt_core::model::{Dims, ReadoutKind, RnnSearchModel};
use nmt_core::train::mle_loss;
use nmt_core::{forward_op, Graph, Op, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `L = Σ w ∘ op(inputs)` for fixed random `w`, by plain forward evaluation.
fn weighted_output(op: &Op, inputs: &[Tensor], w: &[f64]) -> f64 {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = forward_op(op, &refs).unwrap();
    out.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn check_op(op: Op, inputs: Vec<Tensor>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = forward_op(&op, &refs).unwrap();
    let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);

    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = g.apply(op.clone(), &vars).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for i in 0..input.len() {
            let mut probe = inputs.clone();
            probe[k].data_mut()[i] += h;
            let up = weighted_output(&op, &probe, w.data());
            probe[k].data_mut()[i] -= 2.0 * h;
            let down = weighted_output(&op, &probe, w.data());
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(rel < 1e-6, "{} input {k}[{i}]: analytic {} numeric {numeric}", op.name(), analytic[i]);
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    check_op(Op::Matmul, vec![r(&[2, 3]), r(&[3, 4])], 1);
    check_op(Op::Add, vec![r(&[2, 3]), r(&[2, 3])], 2);
    check_op(Op::Add, vec![r(&[2, 3]), r(&[1, 3])], 3);
    check_op(Op::Mul, vec![r(&[2, 3]), r(&[2, 3])], 4);
    check_op(Op::Gate, vec![r(&[2, 3]), r(&[2, 3])], 5);
    check_op(Op::Sigmoid, vec![r(&[2, 3])], 6);
    check_op(Op::Tanh, vec![r(&[2, 3])], 7);
    check_op(Op::SoftmaxRows { mask: None }, vec![r(&[2, 4])], 8);
    check_op(
        Op::SoftmaxRows {
            mask: Some(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        },
        vec![r(&[2, 4])],
        9,
    );
    check_op(Op::LogSoftmaxRows, vec![r(&[3, 4])], 10);
    check_op(Op::Concat, vec![r(&[2, 3]), r(&[2, 1]), r(&[2, 2])], 11);
    check_op(Op::Slice { start: 1, end: 3 }, vec![r(&[2, 4])], 12);
    check_op(Op::Sum, vec![r(&[2, 3])], 13);
    check_op(Op::Mean, vec![r(&[2, 3])], 14);
    check_op(Op::LookupRows { ids: vec![2, 0, 2] }, vec![r(&[4, 3])], 15);
    check_op(Op::Exp, vec![r(&[2, 3])], 17);
    check_op(Op::Affine { has_bias: true }, vec![r(&[2, 3]), r(&[3, 2]), r(&[2, 4]), r(&[4, 2]), r(&[1, 2])], 19);
    check_op(Op::Affine { has_bias: false }, vec![r(&[1, 3]), r(&[3, 2])], 20);
    check_op(Op::Scale(-2.5), vec![r(&[2, 3])], 21);
    check_op(Op::AddScalar(0.7), vec![r(&[2, 3])], 22);
    check_op(Op::ScaleRows, vec![r(&[3, 2]), r(&[3, 1])], 23);
    check_op(Op::Pick { ids: vec![1, 0, 3] }, vec![r(&[3, 4])], 24);
    check_op(Op::Reshape { shape: vec![1, 6] }, vec![r(&[2, 3])], 25);
    let positive = rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[2, 3], 0.5, 2.0);
    check_op(Op::Log, vec![positive], 16);
    // operands at least 0.1 apart so the winner is stable under the probe
    let a = Tensor::matrix(2, 3, vec![0.3, -0.8, 0.9, 0.1, 0.5, -0.4]).unwrap();
    let b = Tensor::matrix(2, 3, vec![-0.2, 0.4, 0.1, 0.6, 0.2, -0.9]).unwrap();
    check_op(Op::MaximumPairwise, vec![a, b], 18);
}

fn model_gradient_check(readout_kind: ReadoutKind) {
    let mut dims = Dims::new(12, 12, 6, 6);
    dims.readout_kind = readout_kind;
    let mut model = RnnSearchModel::init(dims, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    // unequal lengths on both sides exercise the padding masks
    let pairs: Vec<IdPair> = vec![(vec![4, 5, 6, 7], vec![8, 9]), (vec![10], vec![11, 4, 5, 3]), (vec![6, 6], vec![8])];
    let batch = Batch::from_pairs(&pairs);
    let loss_of = |m: &RnnSearchModel| {
        let mut g = Graph::new();
        let mv = m.bind(&mut g, false);
        let l = mle_loss(&mut g, &mv, &batch).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let mv = model.bind(&mut g, true);
    let l = mle_loss(&mut g, &mv, &batch).unwrap();
    g.backward(l).unwrap();
    let grads = model.collect_grads(&g, &mv);
    let h = 1e-3;
    for k in 0..model.params().len() {
        for i in 0..model.params()[k].len() {
            let orig = model.params()[k].data()[i];
            let mut at = |d: f64| {
                model.params_mut()[k].data_mut()[i] = orig + d;
                loss_of(&model)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            model.params_mut()[k].data_mut()[i] = orig;
            let analytic = grads[k].data()[i];
            let denom = analytic.abs().max(numeric.abs());
            let err = if denom < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / denom };
            assert!(err < 1e-4, "{}[{i}]: analytic {analytic} numeric {numeric}", model.names()[k]);
        }
    }
}

#[test]
fn full_model_loss_matches_finite_differences() {
    model_gradient_check(ReadoutKind::Tanh);
}

#[test]
fn maxout_readout_matches_finite_differences() {
    model_gradient_check(ReadoutKind::Maxout);
}

#[test]
fn unused_embedding_rows_get_zero_gradient() {
    let model = RnnSearchModel::init(Dims::new(8, 8, 4, 4), 1).unwrap();
    let batch = Batch::from_pairs(&[(vec![4, 5], vec![6])]);
    let mut g = Graph::new();
    let mv = model.bind(&mut g, true);
    let l = mle_loss(&mut g, &mv, &batch).unwrap();
    g.backward(l).unwrap();
    let grads = model.collect_grads(&g, &mv);
    let src = &grads[0];
    // EOS (row 2) is appended to every source
    for row in [0, 1, 3, 6, 7] {
        assert!(src.row_slice(row).iter().all(|&v| v == 0.0), "src row {row}");
    }
    for row in [2, 4, 5] {
        assert!(src.row_slice(row).iter().any(|&v| v != 0.0), "src row {row}");
    }
}
