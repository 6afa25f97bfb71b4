//! Reverse-mode gradients checked against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sure_core::tensor::{Graph, Tensor, Var};

const H: f64 = 1e-5;

/// Builds a scalar function of one input tensor on a fresh graph.
type Build = dyn Fn(&mut Graph, Var) -> Var;

fn eval(build: &Build, x: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let root = build(&mut g, v);
    g.value(root).item()
}

fn autodiff(build: &Build, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let root = build(&mut g, v);
    g.grad_wrt(root, v).unwrap()
}

fn finite_diff(build: &Build, x: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        grad.data_mut()[i] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
    }
    grad
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.data().iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random values with magnitude in `gap..hi` and random sign.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `y` against fixed weights so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

struct Case {
    name: &'static str,
    input: fn(&mut ChaCha8Rng, usize, usize) -> Tensor,
    build: Box<Build>,
}

fn cases() -> Vec<Case> {
    let any = |rng: &mut ChaCha8Rng, r: usize, c: usize| random(rng, &[r, c], -2.0, 2.0);
    let positive = |rng: &mut ChaCha8Rng, r: usize, c: usize| random(rng, &[r, c], 0.5, 2.0);
    let off_kink = |rng: &mut ChaCha8Rng, r: usize, c: usize| random_off_zero(rng, &[r, c], 2.0, 1e-3);
    vec![
        Case {
            name: "matmul",
            input: any,
            build: Box::new(|g, x| {
                let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let w = g.leaf(random(&mut rng, &[cols, 3], -1.0, 1.0));
                let u = g.leaf(random(&mut rng, &[2, rows], -1.0, 1.0));
                // x as the left operand and as the right operand
                let left = g.matmul(x, w).unwrap();
                let right = g.matmul(u, x).unwrap();
                let a = weighted_sum(g, left, 1);
                let b = weighted_sum(g, right, 19);
                g.add(a, b).unwrap()
            }),
        },
        Case {
            name: "add",
            input: any,
            build: Box::new(|g, x| {
                let y = g.add(x, x).unwrap();
                weighted_sum(g, y, 2)
            }),
        },
        Case {
            name: "sub",
            input: any,
            build: Box::new(|g, x| {
                let sq = g.square(x);
                let y = g.sub(x, sq).unwrap();
                weighted_sum(g, y, 3)
            }),
        },
        Case {
            name: "mul",
            input: any,
            build: Box::new(|g, x| {
                let e = g.exp(x);
                let y = g.mul(x, e).unwrap();
                weighted_sum(g, y, 4)
            }),
        },
        Case {
            name: "div",
            input: positive,
            build: Box::new(|g, x| {
                let s = g.square(x);
                let y = g.div(s, x).unwrap();
                let one = g.offset(x, 1.0);
                let z = g.div(one, y).unwrap();
                weighted_sum(g, z, 5)
            }),
        },
        Case {
            name: "scale",
            input: any,
            build: Box::new(|g, x| {
                let y = g.scale(x, -2.5);
                weighted_sum(g, y, 6)
            }),
        },
        Case {
            name: "relu",
            input: off_kink,
            build: Box::new(|g, x| {
                let y = g.relu(x);
                weighted_sum(g, y, 7)
            }),
        },
        Case {
            name: "softplus",
            input: off_kink,
            build: Box::new(|g, x| {
                let y = g.softplus(x);
                weighted_sum(g, y, 8)
            }),
        },
        Case {
            name: "exp",
            input: any,
            build: Box::new(|g, x| {
                let y = g.exp(x);
                weighted_sum(g, y, 9)
            }),
        },
        Case {
            name: "log",
            input: positive,
            build: Box::new(|g, x| {
                let y = g.log(x).unwrap();
                weighted_sum(g, y, 10)
            }),
        },
        Case {
            name: "square",
            input: any,
            build: Box::new(|g, x| {
                let y = g.square(x);
                weighted_sum(g, y, 11)
            }),
        },
        Case {
            name: "sqrt",
            input: positive,
            build: Box::new(|g, x| {
                let y = g.sqrt(x).unwrap();
                weighted_sum(g, y, 12)
            }),
        },
        Case {
            name: "sum",
            input: any,
            build: Box::new(|g, x| {
                let s = g.square(x);
                g.sum(s)
            }),
        },
        Case {
            name: "mean",
            input: any,
            build: Box::new(|g, x| {
                let e = g.exp(x);
                g.mean(e)
            }),
        },
        Case {
            name: "sum_cols",
            input: any,
            build: Box::new(|g, x| {
                let s = g.square(x);
                let y = g.sum_cols(s).unwrap();
                weighted_sum(g, y, 13)
            }),
        },
        Case {
            name: "concat",
            input: any,
            build: Box::new(|g, x| {
                let e = g.exp(x);
                let y = g.concat(&[x, e, x]).unwrap();
                weighted_sum(g, y, 14)
            }),
        },
        Case {
            name: "slice",
            input: any,
            build: Box::new(|g, x| {
                let cols = g.value(x).cols();
                let e = g.square(x);
                let y = g.slice_cols(e, cols / 2, cols).unwrap();
                weighted_sum(g, y, 15)
            }),
        },
        Case {
            name: "broadcast-row",
            // the leaf is the bias vector
            input: |rng, _, c| random(rng, &[c], -2.0, 2.0),
            build: Box::new(|g, b| {
                let cols = g.value(b).len();
                let mut rng = ChaCha8Rng::seed_from_u64(16);
                let m = g.leaf(random(&mut rng, &[5, cols], -1.0, 1.0));
                let y = g.add_row(m, b).unwrap();
                let sq = g.square(y);
                weighted_sum(g, sq, 16)
            }),
        },
        Case {
            name: "expand",
            input: any,
            build: Box::new(|g, x| {
                let shape = g.value(x).shape().to_vec();
                let m = g.mean(x);
                let e = g.expand(m, &shape).unwrap();
                let y = g.mul(e, x).unwrap();
                weighted_sum(g, y, 17)
            }),
        },
        Case {
            name: "log_softmax",
            input: any,
            build: Box::new(|g, x| {
                let y = g.log_softmax(x).unwrap();
                weighted_sum(g, y, 18)
            }),
        },
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    for case in cases() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(1..=8);
            let cols = rng.random_range(2..=8);
            let x = (case.input)(&mut rng, rows, cols);
            let ad = autodiff(&*case.build, &x);
            let fd = finite_diff(&*case.build, &x);
            let err = rel_error(&ad, &fd);
            assert!(
                err < 1e-6,
                "{} seed {seed}: relative error {err:e}",
                case.name
            );
        }
    }
}

#[test]
fn mean_of_relu_of_product_matches_finite_differences() {
    // root = mean(relu(W z)) with z the leaf under test
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&mut rng, &[6, 4], -1.0, 1.0);
    let z = random(&mut rng, &[4, 3], -1.0, 1.0);
    let build = move |g: &mut Graph, z: Var| {
        let wv = g.leaf(w.clone());
        let p = g.matmul(wv, z).unwrap();
        let r = g.relu(p);
        g.mean(r)
    };
    let ad = autodiff(&build, &z);
    let fd = finite_diff(&build, &z);
    assert!(rel_error(&ad, &fd) < 1e-6);
}

#[test]
fn backward_is_linear() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[4, 5], -2.0, 2.0);
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let f = |g: &mut Graph, x: Var| {
            let s = g.softplus(x);
            g.mean(s)
        };
        let h = |g: &mut Graph, x: Var| {
            let e = g.exp(x);
            let m = g.mul(e, x).unwrap();
            g.sum(m)
        };
        let combined = move |g: &mut Graph, x: Var| {
            let fv = f(g, x);
            let hv = h(g, x);
            let fa = g.scale(fv, a);
            let hb = g.scale(hv, b);
            g.add(fa, hb).unwrap()
        };
        let gf = autodiff(&f, &x);
        let gh = autodiff(&h, &x);
        let gc = autodiff(&combined, &x);
        for i in 0..x.len() {
            let expected = a * gf.data()[i] + b * gh.data()[i];
            assert!((gc.data()[i] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for case in cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = (case.input)(&mut rng, 8, 8);
        let first = autodiff(&*case.build, &x);
        let second = autodiff(&*case.build, &x);
        assert_eq!(bits(&first), bits(&second), "{}", case.name);
    }
}
