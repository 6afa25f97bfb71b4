//! Sanity floor for the graph + layers + optimizer stack.

use sure_core::nn::{Activation, Adam, Dropout, Mlp, Parameters};
use sure_core::rng::seeded;
use sure_core::tensor::{Graph, Tensor};

fn fit_line(mut mlp: Mlp, lr: f64, steps: usize) -> f64 {
    let xs: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 99.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let x = Tensor::column(xs);
    let y = Tensor::column(ys);
    let mut opt = Adam::new(lr);
    let mut mse = f64::INFINITY;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let yv = g.leaf(y.clone());
        let out = mlp.forward(&mut g, xv, Dropout::Off).unwrap();
        let diff = g.sub(out.output, yv).unwrap();
        let sq = g.square(diff);
        let loss = g.mean(sq);
        mse = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads: Vec<Tensor> = out.params.iter().map(|&p| g.grad(p)).collect();
        opt.step(mlp.parameters_mut(), &grads).unwrap();
    }
    mse
}

#[test]
fn linear_model_fits_line() {
    let mlp = Mlp::new(&[1, 1], &[Activation::Identity], &mut seeded(0)).unwrap();
    let mse = fit_line(mlp, 0.01, 2000);
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn hidden_layer_mlp_fits_line() {
    let mlp = Mlp::new(
        &[1, 16, 1],
        &[Activation::Relu, Activation::Identity],
        &mut seeded(1),
    )
    .unwrap();
    let mse = fit_line(mlp, 0.01, 2000);
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn frozen_mlp_is_bit_identical_after_training() {
    let mut mlp = Mlp::new(&[1, 4, 1], &[Activation::Softplus, Activation::Identity], &mut seeded(2)).unwrap();
    mlp.freeze();
    let before = mlp.fingerprint();
    let mut opt = Adam::new(0.05);
    for _ in 0..50 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![0.5, -0.5]));
        let out = mlp.forward(&mut g, x, Dropout::Off).unwrap();
        let loss = g.sum(out.output);
        g.backward(loss).unwrap();
        let grads: Vec<Tensor> = out.params.iter().map(|&p| g.grad(p)).collect();
        opt.step(mlp.parameters_mut(), &grads).unwrap();
    }
    assert_eq!(before, mlp.fingerprint());
}
