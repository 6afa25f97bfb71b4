//! End-to-end acceptance checks. Each test prints one PASS/FAIL line; run
//! with `--nocapture` to see them.

use std::sync::OnceLock;
use std::thread;

use rand::Rng;
use rand_distr::StandardNormal;
use sure_core::evaluation::deferral_analysis;
use sure_core::losses::{nll_from_errors, pcc_loss, pcc_loss_value};
use sure_core::nn::{Activation, Adam, Dropout, Mlp, ParamMut};
use sure_core::pipeline::{pretrain_backbone, run, run_with_backbone, write_run, Method, RunConfig, RunOutcome};
use sure_core::propagation::{mc_oracle, propagate};
use sure_core::reconstruction::complexity_probe;
use sure_core::rng::{seeded, SeededRng};
use sure_core::verify::{check_identity, check_linear_propagation, check_loss_gradients, check_nll_closed_form};
use sure_core::{Graph, Result, Tensor, Var};

fn report(name: &str, passed: bool, detail: String) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn positives(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..2.0)).collect()
}

#[test]
fn standardized_mse_identity() {
    let c = check_identity(0).unwrap();
    report("standardized-mse identity", c.passed, format!("worst residual {:.2e} (< {:.0e})", c.worst, c.tolerance));
    assert!(c.passed);
}

#[test]
fn loss_gradient_oracles() {
    let fd = check_loss_gradients(1).unwrap();
    let closed = check_nll_closed_form(1).unwrap();
    report(
        "loss gradients",
        fd.passed && closed.passed,
        format!(
            "finite-difference rel err {:.2e} (< 1e-6), nll closed form {:.2e} (< 1e-9)",
            fd.worst, closed.worst
        ),
    );
    assert!(fd.passed && closed.passed);
}

#[test]
fn nll_optimum_is_the_squared_error() {
    let mut rng = seeded(2);
    let n = 32;
    let err2 = positives(&mut rng, n);
    let mut log_var = Tensor::column(vec![0.0; n]);
    let mut opt = Adam::new(0.01);
    let within = |lv: &Tensor| {
        lv.data()
            .iter()
            .zip(&err2)
            .map(|(s, e)| (s.exp() - e).abs() / e)
            .fold(0.0, f64::max)
    };
    let mut steps = 0;
    while steps < 5000 && within(&log_var) >= 0.01 {
        let mut g = Graph::new();
        let s = g.leaf(log_var.clone());
        let var = g.exp(s);
        let e = g.leaf(Tensor::column(err2.clone()));
        let loss = nll_from_errors(&mut g, e, var).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(s);
        let param = ParamMut {
            name: "log_var".into(),
            value: &mut log_var,
            frozen: false,
        };
        opt.step(vec![param], &[grad]).unwrap();
        steps += 1;
    }
    let worst = within(&log_var);
    report(
        "nll stationarity",
        worst < 0.01,
        format!("max relative gap {worst:.2e} after {steps} steps (< 1% within 5000)"),
    );
    assert!(worst < 0.01);
}

#[test]
fn correlation_loss_is_affine_invariant() {
    let mut rng = seeded(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = positives(&mut rng, 64);
        let e = positives(&mut rng, 64);
        let a = rng.random_range(1e-3..1e3);
        let b = rng.random_range(-10.0..10.0);
        let moved: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let base = pcc_loss_value(&s, &e).unwrap().0;
        worst = worst.max((pcc_loss_value(&moved, &e).unwrap().0 - base).abs());
        let mut g = Graph::new();
        let v = g.leaf(Tensor::column(moved));
        let traced = pcc_loss(&mut g, v, &e).unwrap().value;
        worst = worst.max((g.value(traced).item() - base).abs());
    }
    report("correlation loss affine invariance", worst < 1e-12, format!("worst change {worst:.2e} (< 1e-12)"));
    assert!(worst < 1e-12);
}

fn relu_path(net: Mlp) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> {
    move |g: &mut Graph, z: &[Var]| {
        let x = g.concat(z)?;
        Ok(net.forward(g, x, Dropout::Off)?.output)
    }
}

/// Distance from the nearest hidden pre-activation to the ReLU kink, in
/// standard deviations of that pre-activation under the input noise.
fn nearest_kink(net: &Mlp, latents: &[Tensor], variances: &[Vec<f64>]) -> f64 {
    let x: Vec<f64> = latents.iter().flat_map(|t| t.data().to_vec()).collect();
    let layer = &net.layers()[0];
    let d = latents[0].cols();
    (0..layer.out_dim())
        .map(|j| {
            let (mut pre, mut var) = (layer.bias.data()[j], 0.0);
            for (i, xi) in x.iter().enumerate() {
                let w = layer.weights.get(i, j);
                pre += xi * w;
                var += w * w * variances[i / d][0];
            }
            pre.abs() / var.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn first_order_propagation_matches_sampling() {
    let linear = check_linear_propagation(4).unwrap();
    let mut errors = Vec::new();
    let mut smooth_worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = seeded(100 + seed);
        let net = Mlp::new(&[12, 16, 2], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let latents: Vec<Tensor> = (0..3)
            .map(|_| Tensor::matrix(1, 4, (0..4).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
            .collect();
        let variances: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(1e-4..1e-3)]).collect();
        let kink = nearest_kink(&net, &latents, &variances);
        let path = relu_path(net);
        let first = propagate(&path, &latents, &variances).unwrap().input_variance[0];
        let mc = mc_oracle(&path, &latents, &variances, 100_000, seed).unwrap()[0].variance;
        let err = (first - mc).abs() / mc;
        errors.push(err);
        if kink >= 2.0 {
            smooth_worst = smooth_worst.max(err);
        }
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let passed = linear.passed && mean(&errors) < 0.1 && smooth_worst < 0.02;
    report(
        "first-order propagation",
        passed,
        format!(
            "linear exactness {:.2e} (< 1e-9), relu path mean rel err vs sampling {:.3} over 20 seeds (< 0.1), \
             worst seed {worst:.3}, worst with no kink within 2 sd {smooth_worst:.4} (< 0.02)",
            linear.worst,
            mean(&errors)
        ),
    );
    assert!(passed);
}

struct SeedRuns {
    sure: RunOutcome,
    nll: RunOutcome,
    ignore: RunOutcome,
    zero: RunOutcome,
    scratch: RunOutcome,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn seed_runs() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        thread::scope(|s| {
            let handles: Vec<_> = SEEDS
                .iter()
                .map(|&seed| {
                    s.spawn(move || {
                        let config = RunConfig::default().with_seed(seed);
                        let (backbone, log) = pretrain_backbone(&config).unwrap();
                        let go = |m: Method| run_with_backbone(&config.with_method(m), Some((&backbone, &log))).unwrap();
                        SeedRuns {
                            sure: go(Method::Sure),
                            nll: go(Method::SureNll),
                            ignore: go(Method::IgnoreIncomplete),
                            zero: go(Method::ZeroFill),
                            scratch: go(Method::NoPretraining),
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    })
}

fn mixed<T>(run: &RunOutcome, f: impl Fn(&sure_core::pipeline::ScenarioMetrics) -> Option<T>) -> T {
    f(&run.evaluation.scenario("mixed").unwrap().metrics).unwrap()
}

fn per_seed(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}] mean {:.3}", parts.join(", "), mean(values))
}

#[test]
fn decomposition_is_exact() {
    let mut worst: f64 = 0.0;
    let mut sum_exact = true;
    let mut full_zero = true;
    for runs in seed_runs() {
        for result in &runs.sure.evaluation.scenarios {
            for r in &result.records {
                let (i, w, t) = (r.input_variance.unwrap(), r.intrinsic_variance.unwrap(), r.total_variance.unwrap());
                sum_exact &= t == i + w;
                worst = worst.max((t - w - i).abs() / t.max(f64::MIN_POSITIVE));
                if result.metrics.scenario == "full" {
                    full_zero &= i == 0.0;
                }
            }
        }
    }
    let passed = sum_exact && full_zero && worst <= 4.0 * f64::EPSILON;
    report(
        "variance decomposition",
        passed,
        format!("total == input + intrinsic bitwise: {sum_exact}, residual of the difference {worst:.1e} relative, input zero on full: {full_zero}"),
    );
    assert!(passed);
}

#[test]
fn directional_reproduction() {
    let runs = seed_runs();
    let col = |f: &dyn Fn(&SeedRuns) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let out = col(&|r| mixed(&r.sure, |m| m.output_uncertainty_corr));
    let out_nll = col(&|r| mixed(&r.nll, |m| m.output_uncertainty_corr));
    let rec = col(&|r| mixed(&r.sure, |m| m.mean_reconstruction_uncertainty_corr));
    let acc = col(&|r| mixed(&r.sure, |m| m.task.accuracy));
    let acc_ignore = col(&|r| mixed(&r.ignore, |m| m.task.accuracy));
    let acc_zero = col(&|r| mixed(&r.zero, |m| m.task.accuracy));
    let acc_scratch = col(&|r| mixed(&r.scratch, |m| m.task.accuracy));

    let a = mean(&out) > 0.3 && mean(&out) > mean(&out_nll);
    let b = mean(&rec) > 0.5;
    let c = mean(&acc) >= mean(&acc_ignore) && mean(&acc) >= mean(&acc_zero);
    let d = mean(&acc) >= mean(&acc_scratch);
    report(
        "output uncertainty corr above 0.3 and above nll variant",
        a,
        format!("sure {} nll {}", per_seed(&out), per_seed(&out_nll)),
    );
    report("reconstruction uncertainty corr above 0.5", b, per_seed(&rec));
    report(
        "accuracy at least that of ignore-incomplete and zero-fill",
        c,
        format!("sure {} ignore {} zero {}", per_seed(&acc), per_seed(&acc_ignore), per_seed(&acc_zero)),
    );
    report(
        "pretrained accuracy at least that of from-scratch",
        d,
        format!("sure {} scratch {}", per_seed(&acc), per_seed(&acc_scratch)),
    );
    assert!(a && b && c && d);
}

#[test]
fn held_out_convergence_ends_above_likelihood_variant() {
    let last = |run: &RunOutcome| run.phase2.convergence.last().copied().flatten().unwrap();
    let sure: Vec<f64> = seed_runs().iter().map(|r| last(&r.sure)).collect();
    let nll: Vec<f64> = seed_runs().iter().map(|r| last(&r.nll)).collect();
    let passed = mean(&sure) > mean(&nll);
    report(
        "held-out convergence above nll variant",
        passed,
        format!("final-epoch corr sure {} nll {}", per_seed(&sure), per_seed(&nll)),
    );
    assert!(passed);
}

#[test]
fn deferral_sanity() {
    let mut rng = seeded(8);
    let n = 1000;
    let correct: Vec<bool> = (0..n).map(|i| i % 10 >= 3).collect();
    let oracle: Vec<f64> = correct
        .iter()
        .map(|&c| if c { rng.random_range(0.0..1.0) } else { rng.random_range(2.0..3.0) })
        .collect();
    let rows = deferral_analysis(&oracle, &correct, &[0.7]).unwrap();
    let oracle_ok = rows[0].tdr_recall == Some(1.0) && rows[0].fdr_recall == Some(0.0);

    let mut retained = Vec::new();
    let mut overall = Vec::new();
    for runs in seed_runs() {
        let table = runs.sure.evaluation.deferral.as_ref().unwrap();
        let row = table.iter().find(|r| r.quantile == 0.65).unwrap();
        retained.push(row.retained_acc.unwrap());
        overall.push(mixed(&runs.sure, |m| m.task.accuracy));
    }
    let trained_ok = mean(&retained) >= mean(&overall);
    report(
        "deferral",
        oracle_ok && trained_ok,
        format!(
            "oracle tdr_recall {:?} fdr_recall {:?}; retained acc at 0.65 {} vs overall {}",
            rows[0].tdr_recall,
            rows[0].fdr_recall,
            per_seed(&retained),
            per_seed(&overall)
        ),
    );
    assert!(oracle_ok && trained_ok);
}

#[test]
fn reconstruction_cost_scaling() {
    let ms = [2.0, 4.0, 8.0];
    let ops: Vec<f64> = ms
        .iter()
        .map(|&m| complexity_probe(m as usize, 6, 32, 16, 0).unwrap().operations as f64)
        .collect();
    let (mx, my) = (mean(&ms), mean(&ops));
    let sxy: f64 = ms.iter().zip(&ops).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = ms.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = ms.iter().zip(&ops).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let ss_tot: f64 = ops.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let narrow = complexity_probe(3, 6, 32, 16, 0).unwrap().operations as f64;
    let wide = complexity_probe(3, 6, 64, 16, 0).unwrap().operations as f64;
    let ratio = wide / narrow;
    let passed = r2 > 0.99 && (3.2..=4.8).contains(&ratio);
    report(
        "reconstruction cost scaling",
        passed,
        format!("linear fit over modalities R^2 {r2:.5} (> 0.99), width doubling ratio {ratio:.3} (in [3.2, 4.8])"),
    );
    assert!(passed);
}

#[test]
fn training_is_deterministic() {
    let config = RunConfig::default().with_seed(5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        write_run(dir.path(), &run(&config).unwrap()).unwrap();
    }
    let same = |f: &str| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap();
    let passed = same("summary.json") && same("records.csv");
    report("determinism", passed, format!("summary.json and records.csv byte-identical: {passed}"));
    assert!(passed);
}
