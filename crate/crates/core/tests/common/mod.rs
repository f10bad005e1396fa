//! Shared oracles for the integration tests.
#![allow(dead_code)]

use carfollow::nn::{Mlp, Mode};
use ndarray::{Array2, ArrayView2};

/// `sum(upstream * f(x))` with batch statistics and no side effects.
pub fn probe_loss(net: &Mlp, x: ArrayView2<f64>, side: Option<ArrayView2<f64>>, upstream: &Array2<f64>) -> f64 {
    let mut n = net.clone();
    let out = n.forward(x, side, Mode::Probe).expect("forward");
    (&out * upstream).sum()
}

/// Central finite differences of [`probe_loss`] with respect to every
/// parameter, in `Mlp::params` order.
pub fn fd_param_grads(
    net: &Mlp,
    x: ArrayView2<f64>,
    side: Option<ArrayView2<f64>>,
    upstream: &Array2<f64>,
    h: f64,
) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let mut plus = net.clone();
            plus.params_mut()[t][i] += h;
            let mut minus = net.clone();
            minus.params_mut()[t][i] -= h;
            let lp = probe_loss(&plus, x, side, upstream);
            let lm = probe_loss(&minus, x, side, upstream);
            g.push((lp - lm) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Central finite differences with respect to the entries of `x`.
pub fn fd_input_grad(
    net: &Mlp,
    x: &Array2<f64>,
    side: Option<ArrayView2<f64>>,
    upstream: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    for idx in ndarray::indices(x.raw_dim()) {
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        g[idx] = (probe_loss(net, xp.view(), side, upstream) - probe_loss(net, xm.view(), side, upstream)) / (2.0 * h);
    }
    g
}

/// Symmetric relative error with an absolute floor for tiny gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-5)
}
