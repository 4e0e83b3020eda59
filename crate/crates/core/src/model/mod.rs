//! Micro-CNN classifiers: architecture specs, white-box and black-box
//! handles, training and weight files.

mod network;
pub mod spec;
pub mod train;
pub mod weights;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpreters::{self, Method, SaliencyMap};
use crate::numerics::{self, Dual, Gradient, Scalar};
use crate::tensor::{argmax, Tensor};

pub(crate) use network::Shape;
use network::{backward_seq, forward_seq, hash_kinks, Cache, Network};
pub use spec::{Activation, BlockKind, ConvBlock, Family, HeadSpec, MicroCnnSpec, ModelSpec, Pool};
pub use train::{train, TrainConfig};

/// Accuracy figures recorded by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Classifier weights plus their layer graph. Immutable once built.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    net: Network,
    params: Vec<f32>,
    params64: Vec<f64>,
    report: Option<TrainingReport>,
}

/// Logits and softmax probabilities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Output {
    pub fn label(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) struct Trace<T> {
    body: Vec<Cache<T>>,
    pub features: Vec<T>,
    head: Vec<Cache<T>>,
    pub logits: Vec<T>,
}

impl Model {
    /// Freshly initialized model; weights drawn from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let net = Network::build(&spec)?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_parts(spec, params, None)
    }

    pub fn from_parts(spec: ModelSpec, params: Vec<f32>, report: Option<TrainingReport>) -> Result<Self> {
        let net = Network::build(&spec)?;
        if params.len() != net.param_count {
            return Err(Error::Format(format!(
                "{} expects {} parameters, got {}",
                spec.name(),
                net.param_count,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        let params64 = params.iter().map(|&p| p as f64).collect();
        Ok(Self {
            spec,
            net,
            params,
            params64,
            report,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub(crate) fn update_params(&mut self, f: impl Fn(usize, f32) -> f32) {
        for (i, (p, p64)) in self.params.iter_mut().zip(&mut self.params64).enumerate() {
            *p = f(i, *p);
            *p64 = *p as f64;
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// True when every nonlinearity is piecewise linear, so input gradients
    /// are locally constant.
    pub fn is_piecewise_linear(&self) -> bool {
        self.net.piecewise_linear
    }

    pub fn cam_compatible(&self) -> bool {
        matches!(&self.spec, ModelSpec::MicroCnn(s) if s.cam_compatible())
    }

    pub(crate) fn feature_shape(&self) -> Shape {
        self.net.features
    }

    /// Weights of the final linear layer feeding `class`, when the head is a
    /// single linear layer after global average pooling.
    pub(crate) fn cam_weights(&self, class: usize) -> Result<&[f64]> {
        if !self.cam_compatible() {
            return Err(Error::Capability(format!(
                "{} has no global-average-pool + linear head; CAM unavailable",
                self.spec.name()
            )));
        }
        let k = self.num_classes();
        if class >= k {
            return Err(Error::Index { index: class, len: k });
        }
        match self.net.head.last().map(|n| &n.layer) {
            Some(network::Layer::Linear { n_in, weight, .. }) => {
                let start = weight.start + class * n_in;
                Ok(&self.params64[start..start + n_in])
            }
            _ => unreachable!("cam-compatible head ends in a linear layer"),
        }
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_shape();
        let ok = match x.shape() {
            [xc, xh, xw] => (*xc, *xh, *xw) == (c, h, w),
            [xh, xw] => c == 1 && (*xh, *xw) == (h, w),
            _ => false,
        };
        if !ok {
            return Err(Error::Dimension(format!(
                "{} expects input [{c}, {h}, {w}], got {:?}",
                self.spec.name(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Output> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x.data()))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Output {
        let feats = forward_seq(&self.net.body, x.to_vec(), &self.params64, None);
        let logits = forward_seq(&self.net.head, feats, &self.params64, None);
        let probs = numerics::softmax(&logits);
        Output { logits, probs }
    }

    pub(crate) fn trace<T: Scalar>(&self, x: Vec<T>) -> Trace<T> {
        let mut body = Vec::with_capacity(self.net.body.len());
        let features = forward_seq(&self.net.body, x, &self.params64, Some(&mut body));
        let mut head = Vec::with_capacity(self.net.head.len());
        let logits = forward_seq(&self.net.head, features.clone(), &self.params64, Some(&mut head));
        Trace {
            body,
            features,
            head,
            logits,
        }
    }

    /// Reverse pass from seeds on the logits and/or on the body output.
    pub(crate) fn backward<T: Scalar>(
        &self,
        trace: &Trace<T>,
        logit_seed: Option<Vec<T>>,
        feature_seed: Option<Vec<T>>,
        mut pgrad: Option<&mut [f64]>,
    ) -> Vec<T> {
        let mut g = match logit_seed {
            Some(seed) => backward_seq(&self.net.head, &trace.head, seed, &self.params64, pgrad.as_deref_mut()),
            None => vec![T::default(); trace.features.len()],
        };
        if let Some(fs) = feature_seed {
            for (a, b) in g.iter_mut().zip(fs) {
                *a += b;
            }
        }
        backward_seq(&self.net.body, &trace.body, g, &self.params64, pgrad)
    }

    /// Fingerprint of the piecewise-linear region containing `x`: equal
    /// signatures mean identical ReLU signs and max-pool winners.
    pub fn kink_signature(&self, x: &Tensor) -> Result<u64> {
        use std::hash::Hasher;
        self.check_input(x)?;
        let tr = self.trace(x.data().to_vec());
        let mut h = std::collections::hash_map::DefaultHasher::new();
        hash_kinks(&tr.body, &self.net.body, &mut h);
        hash_kinks(&tr.head, &self.net.head, &mut h);
        Ok(h.finish())
    }

    /// Gradient of logit `class` with respect to the input.
    pub(crate) fn logit_gradient(&self, x: &[f64], class: usize) -> Vec<f64> {
        let tr = self.trace(x.to_vec());
        let mut seed = vec![0.0; tr.logits.len()];
        seed[class] = 1.0;
        self.backward(&tr, Some(seed), None, None)
    }

    /// `H v` where `H` is the input Hessian of logit `class`, by forward-mode
    /// differentiation of the reverse pass.
    pub(crate) fn logit_hessian_vector(&self, x: &[f64], class: usize, v: &[f64]) -> Vec<f64> {
        let xd: Vec<Dual> = x.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let tr = self.trace(xd);
        let mut seed = vec![Dual::default(); tr.logits.len()];
        seed[class] = Dual::cst(1.0);
        self.backward(&tr, Some(seed), None, None)
            .into_iter()
            .map(|d| d.du)
            .collect()
    }
}

/// Which way the classification term enters the PGD objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Descend `-l_prd + lambda * l_int`: push the true class down while
    /// keeping the interpretation close to the benign map.
    #[default]
    Intent,
    /// Descend `l_prd + lambda * l_int` exactly as written.
    Literal,
}

impl SignConvention {
    pub(crate) fn prd_sign(self) -> f64 {
        match self {
            SignConvention::Intent => -1.0,
            SignConvention::Literal => 1.0,
        }
    }
}

/// Scalar losses that [`ModelHandle::input_gradient`] can differentiate.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    CrossEntropy { label: usize },
    /// Raw pre-softmax score of one class.
    Logit { class: usize },
    /// `0.5 * (logit[output] - target)^2`
    SquaredError { output: usize, target: f64 },
    /// `|| g(x) - reference ||^2`
    Interpretation {
        method: Method,
        class: usize,
        reference: &'a SaliencyMap,
    },
    /// Combined PGD objective `s * l_prd + lambda * l_int`, `s` from the convention.
    Adversarial {
        label: usize,
        method: Method,
        reference: &'a SaliencyMap,
        lambda: f64,
        convention: SignConvention,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    WhiteBox,
    BlackBox,
}

/// Shared, immutable classifier reference with an access level.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    model: Arc<Model>,
    access: Access,
}

impl ModelHandle {
    pub fn white_box(model: Model) -> Self {
        Self {
            model: Arc::new(model),
            access: Access::WhiteBox,
        }
    }

    /// Same weights with gradients and internals withheld.
    pub fn to_black_box(&self) -> Self {
        Self {
            model: Arc::clone(&self.model),
            access: Access::BlackBox,
        }
    }

    pub fn access(&self) -> Access {
        self.access
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.model.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.model.report()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Output> {
        self.model.forward(x)
    }

    /// The underlying model; only available with white-box access.
    pub fn white(&self) -> Result<&Model> {
        match self.access {
            Access::WhiteBox => Ok(&self.model),
            Access::BlackBox => Err(Error::Capability(
                "model internals are not available for a black-box handle".into(),
            )),
        }
    }

    /// Value of a scalar loss at `x`.
    pub fn loss(&self, x: &Tensor, loss: &LossSpec<'_>) -> Result<f64> {
        Ok(self.loss_and_gradient(x, loss)?.0)
    }

    pub fn input_gradient(&self, x: &Tensor, loss: &LossSpec<'_>) -> Result<Gradient> {
        Ok(self.loss_and_gradient(x, loss)?.1)
    }

    pub fn loss_and_gradient(&self, x: &Tensor, loss: &LossSpec<'_>) -> Result<(f64, Gradient)> {
        let m = self.white()?;
        m.check_input(x)?;
        let k = m.num_classes();
        let check = |i: usize| {
            if i < k {
                Ok(())
            } else {
                Err(Error::Index { index: i, len: k })
            }
        };
        let (value, grad) = match *loss {
            LossSpec::CrossEntropy { label } => {
                check(label)?;
                let tr = m.trace(x.data().to_vec());
                let probs = numerics::softmax(&tr.logits);
                let value = numerics::cross_entropy(&probs, label)?;
                let seed = numerics::cross_entropy_logit_grad(&probs, label);
                (value, m.backward(&tr, Some(seed), None, None))
            }
            LossSpec::Logit { class } => {
                check(class)?;
                let tr = m.trace(x.data().to_vec());
                let mut seed = vec![0.0; k];
                seed[class] = 1.0;
                (tr.logits[class], m.backward(&tr, Some(seed), None, None))
            }
            LossSpec::SquaredError { output, target } => {
                check(output)?;
                let tr = m.trace(x.data().to_vec());
                let r = tr.logits[output] - target;
                let mut seed = vec![0.0; k];
                seed[output] = r;
                (0.5 * r * r, m.backward(&tr, Some(seed), None, None))
            }
            LossSpec::Interpretation {
                method,
                class,
                reference,
            } => {
                check(class)?;
                interpreters::interpretation_loss_grad(m, x, method, class, reference, 0.0, 1.0)?
            }
            LossSpec::Adversarial {
                label,
                method,
                reference,
                lambda,
                convention,
            } => {
                check(label)?;
                interpreters::interpretation_loss_grad(
                    m,
                    x,
                    method,
                    label,
                    reference,
                    convention.prd_sign(),
                    lambda,
                )?
            }
        };
        let wrt_input = Tensor::new(x.shape().to_vec(), grad)?;
        Ok((value, Gradient { wrt_input }))
    }
}
