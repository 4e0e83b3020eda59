#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};

use edgequery_core::model::{
    Activation, BlockKind, ConvBlock, HeadSpec, LossSpec, MicroCnnSpec, Model, ModelHandle, ModelSpec, Pool,
};
use edgequery_core::target::BlackBoxTarget;
use edgequery_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs the acceptance tests one at a time so wall-clock limits are not
/// measured against sibling tests sharing the cores.
pub fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints one verdict line straight to stderr so it shows up even when the
/// harness captures test output.
pub fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {name}: {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Two-block tanh net; `kind` and `pool` pick the layer types under test.
pub fn smooth_spec(kind: BlockKind, pool: Pool) -> ModelSpec {
    ModelSpec::MicroCnn(MicroCnnSpec {
        name: format!("smooth-{kind:?}-{pool:?}"),
        input_shape: [2, 8, 8],
        blocks: vec![
            ConvBlock::plain(4, Activation::Tanh, pool),
            ConvBlock::plain(3, Activation::Tanh, Pool::None).with_kind(kind),
        ],
        head: HeadSpec::gap_linear(),
        num_classes: 3,
    })
}

/// Worst relative error between the analytic input gradient and central
/// differences over `samples` random coordinates. Coordinates whose stencil
/// changes a ReLU sign or max-pool winner are redrawn.
pub fn fd_check(handle: &ModelHandle, x: &Tensor, loss: &LossSpec<'_>, samples: usize, seed: u64) -> f64 {
    let m = handle.white().unwrap();
    let analytic = handle.input_gradient(x, loss).unwrap().wrt_input;
    let sig = m.kink_signature(x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut tries = 0;
    while checked < samples {
        tries += 1;
        assert!(tries < samples * 100, "too many coordinates sit on kinks");
        let i = rng.gen_range(0..x.len());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        if m.kink_signature(&xp).unwrap() != sig || m.kink_signature(&xm).unwrap() != sig {
            continue;
        }
        let fd = (handle.loss(&xp, loss).unwrap() - handle.loss(&xm, loss).unwrap()) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-5));
        checked += 1;
    }
    worst
}

/// Two-class linear model on a `[1, 1, n]` input with
/// `logit1 - logit0 = w . x - bias0`.
pub fn linear_handle(weights: &[f64], bias0: f64) -> ModelHandle {
    let n = weights.len();
    let spec = ModelSpec::Linear {
        input_shape: [1, 1, n],
        num_outputs: 2,
    };
    let mut params: Vec<f32> = vec![0.0; n];
    params.extend(weights.iter().map(|&w| w as f32));
    params.extend([bias0 as f32, 0.0]);
    ModelHandle::white_box(Model::from_parts(spec, params, None).unwrap())
}

pub fn linear_target(weights: &[f64], bias0: f64, budget: u64) -> BlackBoxTarget {
    BlackBoxTarget::new(&linear_handle(weights, bias0), None, budget).unwrap()
}
