#![allow(dead_code)]

use advrobust::nn::{mlp_layers, ForwardTrace};
use advrobust::{LayerSpec, Network, ScalarObjective, Tensor};
use rand::Rng;

/// Smallest |pre-activation| over every ReLU input; finite differences are
/// only trusted when it is comfortably larger than the probe step.
pub fn kink_margin(net: &Network, trace: &ForwardTrace) -> f64 {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Relu))
        .flat_map(|(i, _)| trace.activations[i].iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

pub fn random_mlp(rng: &mut impl Rng, max_in: usize) -> Network {
    let d = rng.random_range(1..=max_in);
    let k = rng.random_range(2..=5);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
    Network::init(vec![d], k, mlp_layers(d, &hidden, k), rng).unwrap()
}

/// Tiny conv net over a `1 x s x s` image.
pub fn random_convnet(rng: &mut impl Rng) -> Network {
    let s = rng.random_range(5..=7);
    let ch = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let out = (s - 3) / stride + 1;
    let k = rng.random_range(2..=4);
    let layers = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: ch, kernel: 3, stride },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: ch * out * out, out_dim: k },
    ];
    Network::init(vec![1, s, s], k, layers, rng).unwrap()
}

pub fn random_input(rng: &mut impl Rng, net: &Network) -> Tensor {
    let data = (0..net.input_len()).map(|_| rng.random::<f64>()).collect();
    Tensor::new(net.input_shape().to_vec(), data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Absolute agreement required when the gradient itself vanishes. Below
/// this, relative error measures roundoff: a saturated normalized
/// prediction amplifies it by `1 / floor`.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// Relative error `<= tol`, or absolute error within [`GRAD_ABS_FLOOR`].
pub fn grad_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    rel_err(a, b) <= tol || norm(&diff) <= GRAD_ABS_FLOOR
}

fn objective_value(net: &Network, x: &[f64], obj: &ScalarObjective) -> f64 {
    obj.evaluate(&net.logits(x).unwrap()).unwrap().value
}

pub fn fd_input_grad(net: &Network, x: &[f64], obj: &ScalarObjective, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (objective_value(net, &p, obj) - objective_value(net, &m, obj)) / (2.0 * h)
        })
        .collect()
}

/// Central differences over every parameter, flattened layer by layer
/// (weights then biases).
pub fn fd_param_grad(net: &Network, x: &[f64], obj: &ScalarObjective, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in 0..net.params().len() {
        let nw = net.params()[layer].weight.len();
        let nb = net.params()[layer].bias.len();
        for j in 0..nw + nb {
            let eval = |delta: f64| {
                let mut params = net.params().to_vec();
                if j < nw {
                    params[layer].weight[j] += delta;
                } else {
                    params[layer].bias[j - nw] += delta;
                }
                let mut n = net.clone();
                n.set_params(params).unwrap();
                objective_value(&n, x, obj)
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    out
}

pub fn flatten_grads(g: &advrobust::nn::ParamGrads) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
}
