//! Finite-difference verification of the analytic gradients, in `f64`.
//!
//! Three suites at increasing composition depth: the raw kernel-parameter
//! derivatives, those derivatives chained through the depthwise-plus-mix
//! token mixer, and a full residual block. Central differences use step
//! 1e-6; the relative-error denominator is `max(1, |a|, |b|)` so near-zero
//! entries are judged absolutely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::blocks::{BfvBlock, FfnKind, LgfLayer};
use crate::gabor::{build_kernel, kernel_param_grads_mode, GaborParams, LambdaGradMode, PARAM_NAMES};
use crate::nn::Forward;
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Result;

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Failure {
    pub parameter: String,
    pub coordinate: String,
    pub analytic: f64,
    pub fd: f64,
    pub rel: f64,
}

#[derive(Debug)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} trials, {} checks, max relative error {:.3e} (tolerance {:.0e}) -> {}",
            self.name,
            self.trials,
            self.checks,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Parameter draws used across the suites. Ranges keep the envelope and
/// carrier in the regime the filters actually operate in.
pub fn random_gabor_params(rng: &mut ChaCha12Rng) -> GaborParams<f64> {
    GaborParams {
        lambda: rng.gen_range(2.0f64.ln()..8.0f64.ln()).exp(),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
        psi: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        gamma: rng.gen_range(0.4..2.0),
        sigma: rng.gen_range(0.8..4.0),
    }
}

/// Suite 1: the five kernel-parameter gradients against central differences
/// of the kernel itself.
pub fn kernel_grad_suite(trials: usize, seed: u64, mode: LambdaGradMode) -> SuiteReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tolerance = 1e-6;
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checks = 0usize;
    for trial in 0..trials {
        let k = [3, 5, 7][trial % 3];
        let p = random_gabor_params(&mut rng);
        let grads = kernel_param_grads_mode(k, &p, mode).expect("valid draw");
        for pi in 0..5 {
            let perturbed = |eps: f64| {
                let mut q = p;
                match pi {
                    0 => q.lambda += eps,
                    1 => q.theta += eps,
                    2 => q.psi += eps,
                    3 => q.gamma += eps,
                    _ => q.sigma += eps,
                }
                build_kernel(k, &q).expect("valid draw")
            };
            let plus = perturbed(FD_STEP);
            let minus = perturbed(-FD_STEP);
            let analytic = grads.by_index(pi);
            for i in 0..k * k {
                let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * FD_STEP);
                let a = analytic.data()[i];
                let rel = rel_err(a, fd);
                checks += 1;
                max_rel = max_rel.max(rel);
                if rel >= tolerance {
                    failures.push(Failure {
                        parameter: PARAM_NAMES[pi].into(),
                        coordinate: format!(
                            "trial {trial} k={k} entry ({},{})",
                            i / k,
                            i % k
                        ),
                        analytic: a,
                        fd,
                        rel,
                    });
                }
            }
        }
    }
    SuiteReport {
        name: "kernel parameter gradients".into(),
        trials,
        checks,
        max_rel_err: max_rel,
        tolerance,
        failures,
    }
}

/// Run loss + analytic parameter gradients for a parameterized forward
/// function, then finite-difference every trainable scalar against it.
fn fd_over_store(
    name: &str,
    store: &ParamStore<f64>,
    run: &dyn Fn(&ParamStore<f64>) -> (f64, Vec<(ParamId, Tensor<f64>)>),
    tolerance: f64,
) -> SuiteReport {
    let (_, analytic) = run(store);
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checks = 0usize;
    for (pid, g) in &analytic {
        for i in 0..g.numel() {
            let mut plus = store.clone();
            plus.value_mut(*pid).data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.value_mut(*pid).data_mut()[i] -= FD_STEP;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * FD_STEP);
            let a = g.data()[i];
            let rel = rel_err(a, fd);
            checks += 1;
            max_rel = max_rel.max(rel);
            if rel >= tolerance {
                failures.push(Failure {
                    parameter: store.entry(*pid).name.clone(),
                    coordinate: format!("[{i}]"),
                    analytic: a,
                    fd,
                    rel,
                });
            }
        }
    }
    SuiteReport {
        name: name.into(),
        trials: 1,
        checks,
        max_rel_err: max_rel,
        tolerance,
        failures,
    }
}

/// Suite 2: kernel gradients chained through the depthwise convolution and
/// channel mix of the token mixer.
pub fn lgf_layer_suite(seed: u64, mode: LambdaGradMode) -> Result<SuiteReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut lgf = LgfLayer::init(&mut store, &mut rng, "lgf", 4, 5)?;
    lgf.lambda_grad_mode = mode;
    let x = Tensor::<f64>::from_fn(&[1, 4, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let proj = Tensor::<f64>::from_fn(&[1, 4, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let run = move |store: &ParamStore<f64>| {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut f = Forward {
            tape: &mut tape,
            store,
            training: false,
            rng: &mut rng,
        };
        let y = lgf.forward(&mut f, xv).expect("forward");
        let pv = tape.leaf(proj.clone());
        let weighted = ops::mul(&mut tape, y, pv).expect("shapes match");
        let loss = ops::sum(&mut tape, weighted);
        let l = tape.value(loss).data()[0];
        let grads = tape.backward(loss).expect("backward");
        let by_param = tape
            .bound_params()
            .iter()
            .map(|&(pid, var)| (pid, grads.var(var).cloned().expect("grad present")))
            .collect();
        (l, by_param)
    };
    Ok(fd_over_store(
        "token-mixer chained gradients",
        &store,
        &run,
        1e-4,
    ))
}

/// Suite 3: every trainable scalar of one full residual block.
pub fn block_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = BfvBlock::init(&mut store, &mut rng, "block", 8, 3, 3.0, 0.0, FfnKind::Dual)?;
    let x = Tensor::<f64>::from_fn(&[1, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let proj = Tensor::<f64>::from_fn(&[1, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let run = move |store: &ParamStore<f64>| {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut f = Forward {
            tape: &mut tape,
            store,
            training: false,
            rng: &mut rng,
        };
        let y = block.forward(&mut f, xv).expect("forward");
        let pv = tape.leaf(proj.clone());
        let weighted = ops::mul(&mut tape, y, pv).expect("shapes match");
        let loss = ops::sum(&mut tape, weighted);
        let l = tape.value(loss).data()[0];
        let grads = tape.backward(loss).expect("backward");
        let by_param = tape
            .bound_params()
            .iter()
            .map(|&(pid, var)| (pid, grads.var(var).cloned().expect("grad present")))
            .collect();
        (l, by_param)
    };
    Ok(fd_over_store(
        "residual block gradients",
        &store,
        &run,
        1e-3,
    ))
}
