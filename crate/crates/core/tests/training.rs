use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usg_core::nn::{cross_entropy, LayerSpec, ParamStore, Sgd, Stack, Tape, Tensor};

/// Points on either side of `x0 + x1 = 0`, at least `margin` away from it.
fn margin_set(n: usize, margin: f32, seed: u64) -> Vec<([f32; 2], u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0)];
        let d = (p[0] + p[1]) / 2f32.sqrt();
        if d.abs() >= margin {
            out.push((p, (d > 0.0) as u8));
        }
    }
    out
}

fn rows(data: &[([f32; 2], u8)]) -> (Tensor, Vec<u8>) {
    let x = data.iter().flat_map(|(p, _)| *p).collect();
    (
        Tensor::new(vec![data.len(), 2], x).unwrap(),
        data.iter().map(|(_, y)| *y).collect(),
    )
}

fn net() -> Stack {
    Stack::new(
        "toy",
        vec![LayerSpec::linear(2, 8), LayerSpec::Relu, LayerSpec::linear(8, 2)],
    )
}

fn full_loss(stack: &Stack, params: &ParamStore, data: &[([f32; 2], u8)]) -> f32 {
    let (x, y) = rows(data);
    cross_entropy(&stack.forward(params, &x).unwrap(), &y).unwrap().0
}

fn one_epoch(stack: &Stack, params: &mut ParamStore, data: &[([f32; 2], u8)], lr: f32, seed: u64) {
    let sgd = Sgd::new(lr).unwrap();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for chunk in order.chunks(10) {
        let batch: Vec<_> = chunk.iter().map(|&i| data[i]).collect();
        let (x, y) = rows(&batch);
        let mut tape = Tape::default();
        let logits = stack.forward_cached(params, &x, &mut tape).unwrap();
        let (_, g) = cross_entropy(&logits, &y).unwrap();
        stack.backward_params(params, &tape, &g).unwrap();
        sgd.step(params);
    }
}

fn fresh(stack: &Stack, seed: u64) -> ParamStore {
    let mut p = ParamStore::new(seed);
    stack.init_params(&mut p).unwrap();
    p
}

#[test]
fn loss_drops_during_the_first_epoch_on_separable_data() {
    let data = margin_set(400, 0.3, 1);
    let stack = net();
    for seed in 0..3 {
        let mut params = fresh(&stack, seed);
        let before = full_loss(&stack, &params, &data);
        one_epoch(&stack, &mut params, &data, 0.01, seed);
        let after = full_loss(&stack, &params, &data);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn same_seed_and_order_give_identical_weights() {
    let data = margin_set(200, 0.3, 2);
    let stack = net();
    let run = || {
        let mut p = fresh(&stack, 5);
        one_epoch(&stack, &mut p, &data, 0.01, 5);
        p.to_bytes()
    };
    assert_eq!(run(), run());
    let mut other = fresh(&stack, 5);
    one_epoch(&stack, &mut other, &data, 0.01, 6);
    assert_ne!(run(), other.to_bytes());
}
