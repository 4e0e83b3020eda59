//! Layer graph built from a [`ModelSpec`], with generic forward and
//! reverse-mode passes.

use std::ops::Range;

use rand::Rng;

use super::spec::{Activation, BlockKind, ModelSpec, Pool};
use crate::error::Result;
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::Scalar;

/// Pixels enter the first convolution as `(x - INPUT_CENTER) * INPUT_SCALE`.
pub(crate) const INPUT_CENTER: f64 = 0.5;
pub(crate) const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv {
        geom: ConvGeom,
        weight: Range<usize>,
        bias: Range<usize>,
    },
    /// `(x - center) * scale`, applied to raw pixels.
    Standardize { center: f64, scale: f64 },
    Relu,
    Tanh,
    MaxPool2,
    AvgPool2,
    /// `x + body(x)`
    Residual(Vec<Node>),
    /// `concat(x, body(x))` along channels.
    Concat(Vec<Node>),
    GlobalAvgPool,
    Linear {
        n_in: usize,
        weight: Range<usize>,
        bias: Range<usize>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub layer: Layer,
    pub input: Shape,
    pub output: Shape,
}

/// What a backward step needs from its forward step.
#[derive(Debug)]
pub(crate) enum Cache<T> {
    Input(Vec<T>),
    Output(Vec<T>),
    Argmax(Vec<usize>),
    Nested(Vec<Cache<T>>),
    Empty,
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    /// Feature extractor; its output feeds the head.
    pub body: Vec<Node>,
    pub head: Vec<Node>,
    pub features: Shape,
    pub param_count: usize,
    /// Weight ranges paired with their fan-in, for initialization.
    pub weight_fans: Vec<(Range<usize>, usize)>,
    pub piecewise_linear: bool,
}

struct Builder {
    next: usize,
    fans: Vec<(Range<usize>, usize)>,
}

impl Builder {
    fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.next..self.next + n;
        self.next += n;
        r
    }

    fn conv(&mut self, input: Shape, filters: usize, kernel: usize, stride: usize) -> Node {
        let geom = ConvGeom {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: filters,
            kh: kernel,
            kw: kernel,
            stride,
            pad: kernel / 2,
        };
        let weight = self.alloc(geom.weight_len());
        let bias = self.alloc(filters);
        self.fans.push((weight.clone(), input.c * kernel * kernel));
        Node {
            output: Shape {
                c: filters,
                h: geom.out_h(),
                w: geom.out_w(),
            },
            layer: Layer::Conv { geom, weight, bias },
            input,
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> Node {
        let weight = self.alloc(n_in * n_out);
        let bias = self.alloc(n_out);
        self.fans.push((weight.clone(), n_in));
        Node {
            layer: Layer::Linear {
                n_in,
                weight,
                bias,
            },
            input: Shape { c: n_in, h: 1, w: 1 },
            output: Shape { c: n_out, h: 1, w: 1 },
        }
    }
}

fn pointwise(layer: Layer, shape: Shape) -> Node {
    Node {
        layer,
        input: shape,
        output: shape,
    }
}

fn activation(act: Activation, shape: Shape) -> Node {
    match act {
        Activation::Relu => pointwise(Layer::Relu, shape),
        Activation::Tanh => pointwise(Layer::Tanh, shape),
    }
}

impl Network {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        let [c, h, w] = spec.input_shape();
        let input = Shape { c, h, w };
        let mut b = Builder {
            next: 0,
            fans: Vec::new(),
        };
        let mut body = Vec::new();
        let mut head = Vec::new();
        let mut piecewise_linear = true;
        let mut shape = input;
        match spec {
            ModelSpec::Linear { num_outputs, .. } => {
                head.push(b.linear(input.len(), *num_outputs));
            }
            ModelSpec::MicroCnn(s) => {
                s.validate()?;
                body.push(Node {
                    layer: Layer::Standardize {
                        center: INPUT_CENTER,
                        scale: INPUT_SCALE,
                    },
                    input: shape,
                    output: shape,
                });
                for block in &s.blocks {
                    if block.activation != Activation::Relu {
                        piecewise_linear = false;
                    }
                    let conv = b.conv(shape, block.filters, block.kernel, block.stride);
                    let after = conv.output;
                    match block.kind {
                        BlockKind::Plain => {
                            body.push(conv);
                            body.push(activation(block.activation, after));
                            shape = after;
                        }
                        BlockKind::Residual => {
                            body.push(conv);
                            body.push(activation(block.activation, after));
                            let inner_conv = b.conv(after, block.filters, block.kernel, 1);
                            let inner = vec![inner_conv, activation(block.activation, after)];
                            body.push(Node {
                                layer: Layer::Residual(inner),
                                input: after,
                                output: after,
                            });
                            shape = after;
                        }
                        BlockKind::Dense => {
                            let inner = vec![conv, activation(block.activation, after)];
                            let out = Shape {
                                c: shape.c + block.filters,
                                ..shape
                            };
                            body.push(Node {
                                layer: Layer::Concat(inner),
                                input: shape,
                                output: out,
                            });
                            shape = out;
                        }
                    }
                    if block.pool != Pool::None && shape.h >= 2 && shape.w >= 2 {
                        let out = Shape {
                            c: shape.c,
                            h: shape.h / 2,
                            w: shape.w / 2,
                        };
                        let layer = match block.pool {
                            Pool::Max => Layer::MaxPool2,
                            _ => Layer::AvgPool2,
                        };
                        body.push(Node {
                            layer,
                            input: shape,
                            output: out,
                        });
                        shape = out;
                    }
                }
                let mut width = if s.head.global_avg_pool {
                    head.push(Node {
                        layer: Layer::GlobalAvgPool,
                        input: shape,
                        output: Shape { c: shape.c, h: 1, w: 1 },
                    });
                    shape.c
                } else {
                    shape.len()
                };
                for &hidden in &s.head.hidden {
                    head.push(b.linear(width, hidden));
                    head.push(activation(s.head.hidden_activation, Shape { c: hidden, h: 1, w: 1 }));
                    if s.head.hidden_activation != Activation::Relu {
                        piecewise_linear = false;
                    }
                    width = hidden;
                }
                head.push(b.linear(width, s.num_classes));
            }
        }
        Ok(Self {
            body,
            head,
            features: shape,
            param_count: b.next,
            weight_fans: b.fans,
            piecewise_linear,
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f32> {
        let mut p = vec![0f32; self.param_count];
        for (range, fan_in) in &self.weight_fans {
            let bound = (6.0 / *fan_in as f64).sqrt();
            for v in &mut p[range.clone()] {
                *v = rng.gen_range(-bound..bound) as f32;
            }
        }
        p
    }
}

pub(crate) fn forward_seq<T: Scalar>(
    nodes: &[Node],
    mut x: Vec<T>,
    params: &[f64],
    mut caches: Option<&mut Vec<Cache<T>>>,
) -> Vec<T> {
    for node in nodes {
        let (y, cache) = forward_node(node, x, params, caches.is_some());
        if let Some(c) = caches.as_mut() {
            c.push(cache);
        }
        x = y;
    }
    x
}

fn forward_node<T: Scalar>(node: &Node, x: Vec<T>, params: &[f64], keep: bool) -> (Vec<T>, Cache<T>) {
    let s = node.input;
    match &node.layer {
        Layer::Conv { geom, weight, bias } => {
            let y = kernels::conv_forward(&x, geom, &params[weight.clone()], Some(&params[bias.clone()]));
            (y, if keep { Cache::Input(x) } else { Cache::Empty })
        }
        Layer::Linear { weight, bias, .. } => {
            let y = kernels::linear_forward(&x, &params[weight.clone()], &params[bias.clone()]);
            (y, if keep { Cache::Input(x) } else { Cache::Empty })
        }
        Layer::Standardize { center, scale } => (
            x.into_iter().map(|v| (v - T::cst(*center)).scale(*scale)).collect(),
            Cache::Empty,
        ),
        Layer::Relu => {
            let y = kernels::relu_forward(&x);
            (y, if keep { Cache::Input(x) } else { Cache::Empty })
        }
        Layer::Tanh => {
            let y = kernels::tanh_forward(&x);
            let cache = if keep { Cache::Output(y.clone()) } else { Cache::Empty };
            (y, cache)
        }
        Layer::MaxPool2 => {
            let (y, arg) = kernels::maxpool2_forward(&x, s.c, s.h, s.w);
            (y, Cache::Argmax(arg))
        }
        Layer::AvgPool2 => (kernels::avgpool2_forward(&x, s.c, s.h, s.w), Cache::Empty),
        Layer::GlobalAvgPool => (kernels::global_avg_forward(&x, s.c, s.h * s.w), Cache::Empty),
        Layer::Residual(inner) => {
            let mut nested = Vec::new();
            let branch = forward_seq(inner, x.clone(), params, keep.then_some(&mut nested));
            let y = x.iter().zip(&branch).map(|(&a, &b)| a + b).collect();
            (y, Cache::Nested(nested))
        }
        Layer::Concat(inner) => {
            let mut nested = Vec::new();
            let branch = forward_seq(inner, x.clone(), params, keep.then_some(&mut nested));
            let mut y = x;
            y.extend(branch);
            (y, Cache::Nested(nested))
        }
    }
}

/// Backpropagates `grad` through `nodes` using caches from [`forward_seq`].
/// Parameter gradients are accumulated into `pgrad` when given.
pub(crate) fn backward_seq<T: Scalar>(
    nodes: &[Node],
    caches: &[Cache<T>],
    mut grad: Vec<T>,
    params: &[f64],
    mut pgrad: Option<&mut [f64]>,
) -> Vec<T> {
    for (node, cache) in nodes.iter().zip(caches).rev() {
        grad = backward_node(node, cache, grad, params, pgrad.as_deref_mut());
    }
    grad
}

fn split_param_grad<'a>(
    pgrad: Option<&'a mut [f64]>,
    weight: &Range<usize>,
    bias: &Range<usize>,
) -> Option<(&'a mut [f64], &'a mut [f64])> {
    debug_assert_eq!(weight.end, bias.start);
    pgrad.map(|g| {
        let (w, b) = g[weight.start..bias.end].split_at_mut(weight.len());
        (w, b)
    })
}

fn backward_node<T: Scalar>(
    node: &Node,
    cache: &Cache<T>,
    grad: Vec<T>,
    params: &[f64],
    pgrad: Option<&mut [f64]>,
) -> Vec<T> {
    let s = node.input;
    match (&node.layer, cache) {
        (Layer::Conv { geom, weight, bias }, Cache::Input(x)) => kernels::conv_backward(
            x,
            geom,
            &params[weight.clone()],
            &grad,
            split_param_grad(pgrad, weight, bias),
        ),
        (Layer::Linear { weight, bias, .. }, Cache::Input(x)) => kernels::linear_backward(
            x,
            &params[weight.clone()],
            &grad,
            split_param_grad(pgrad, weight, bias),
        ),
        (Layer::Standardize { scale, .. }, _) => grad.into_iter().map(|g| g.scale(*scale)).collect(),
        (Layer::Relu, Cache::Input(x)) => kernels::relu_backward(x, &grad),
        (Layer::Tanh, Cache::Output(y)) => kernels::tanh_backward(y, &grad),
        (Layer::MaxPool2, Cache::Argmax(arg)) => kernels::maxpool2_backward(s.len(), arg, &grad),
        (Layer::AvgPool2, _) => kernels::avgpool2_backward(s.c, s.h, s.w, &grad),
        (Layer::GlobalAvgPool, _) => kernels::global_avg_backward(s.c, s.h * s.w, &grad),
        (Layer::Residual(inner), Cache::Nested(nested)) => {
            let through = backward_seq(inner, nested, grad.clone(), params, pgrad);
            grad.iter().zip(&through).map(|(&a, &b)| a + b).collect()
        }
        (Layer::Concat(inner), Cache::Nested(nested)) => {
            let (skip, branch) = grad.split_at(s.len());
            let through = backward_seq(inner, nested, branch.to_vec(), params, pgrad);
            skip.iter().zip(&through).map(|(&a, &b)| a + b).collect()
        }
        (layer, _) => unreachable!("backward without matching cache for {layer:?}"),
    }
}

/// Folds the discrete choices of a forward pass (ReLU signs, max-pool
/// winners) into `state`.
pub(crate) fn hash_kinks<H: std::hash::Hasher>(caches: &[Cache<f64>], nodes: &[Node], state: &mut H) {
    for (node, cache) in nodes.iter().zip(caches) {
        match (&node.layer, cache) {
            (Layer::Relu, Cache::Input(x)) => {
                for v in x {
                    state.write_u8((*v > 0.0) as u8);
                }
            }
            (Layer::MaxPool2, Cache::Argmax(a)) => {
                for &i in a {
                    state.write_usize(i);
                }
            }
            (Layer::Residual(inner) | Layer::Concat(inner), Cache::Nested(n)) => hash_kinks(n, inner, state),
            _ => {}
        }
    }
}
