//! Cross-entropy, the bound-regularized objective
//! `ℓ′ = ℓ_cls + α max_{y′≠y} τ^{y′y} + β max_{y′≠y} ζ^{y′y}`, and their
//! gradients with respect to every weight and the input.
//!
//! Subgradient conventions: `ReLU′(0) = 0`, `d|v|/dv = sign(v)` with
//! `sign(0) = 0`, and every max (row max inside `‖W‖_∞`, class max over `y′`)
//! differentiates through its smallest-index maximizer only.

use serde::{Deserialize, Serialize};

use crate::bounds::{worst_pair_from_terms, BoundTerms, PerturbationBudget, ShiftedPass};
use crate::error::{Error, Result};
use crate::linalg::{axpy, sign, DenseMatrix, DenseVector};
use crate::network::{ForwardTrace, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the τ (input-sensitivity) regularizer.
    pub alpha: f64,
    /// Weight on the ζ (weight-sensitivity) regularizer.
    pub beta: f64,
    pub budget: PerturbationBudget,
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64, budget: PerturbationBudget) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha and beta must be finite and nonnegative, got {alpha}, {beta}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            budget,
        })
    }

    /// Plain cross-entropy.
    pub fn unregularized(depth: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            budget: PerturbationBudget::zero(depth),
        }
    }

    pub fn is_unregularized(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

/// Loss value with gradients shaped like the network layers and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss_value: f64,
    pub weight_grads: Vec<DenseMatrix>,
    pub input_grad: DenseVector,
}

pub(crate) fn zero_grads(net: &Mlp) -> Vec<DenseMatrix> {
    net.layers()
        .iter()
        .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
        .collect()
}

/// Cross-entropy and its gradient with respect to the logits.
pub(crate) fn cross_entropy_with_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[y] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[y] -= 1.0;
    (loss.max(0.0), grad)
}

/// `−log softmax(logits)[y]`, max-shifted so large logits do not overflow.
pub fn cross_entropy(logits: &DenseVector, y: usize) -> Result<f64> {
    if y >= logits.dim() {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: y,
            bound: logits.dim(),
        });
    }
    Ok(cross_entropy_with_grad(logits.as_slice(), y).0)
}

/// Reverse pass from a logit gradient. Adds `scale ×` the weight gradients
/// into `grads` and, when requested, `scale ×` the input gradient into
/// `input_grad`.
pub(crate) fn backprop_into(
    net: &Mlp,
    trace: &ForwardTrace,
    dlogits: &[f64],
    scale: f64,
    mut grads: Option<&mut [DenseMatrix]>,
    mut input_grad: Option<&mut [f64]>,
) {
    let depth = net.depth();
    let mut delta = dlogits.to_vec();
    for m in (1..=depth).rev() {
        let w = net.layer(m);
        let a = &trace.activations[m - 1];
        if let Some(grads) = grads.as_deref_mut() {
            let g = &mut grads[m - 1];
            for (i, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(scale * d, a, g.row_mut(i));
                }
            }
        }
        if m > 1 {
            let mut prev = w.mat_t_vec_raw(&delta);
            for (p, &act) in prev.iter_mut().zip(a) {
                if act <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        } else if let Some(out) = input_grad.as_deref_mut() {
            let gx = w.mat_t_vec_raw(&delta);
            axpy(scale, &gx, out);
        }
    }
}

fn check_example(net: &Mlp, x: &DenseVector, y: usize) -> Result<()> {
    net.check_input(x)?;
    net.check_class(y)
}

/// Exact gradient of `cross_entropy(forward(net, x), y)`.
pub fn backprop(net: &Mlp, x: &DenseVector, y: usize) -> Result<GradientBundle> {
    check_example(net, x, y)?;
    let trace = net.forward_trace(x.as_slice());
    let (loss_value, dlogits) = cross_entropy_with_grad(&trace.logits, y);
    let mut weight_grads = zero_grads(net);
    let mut input_grad = vec![0.0; x.dim()];
    backprop_into(
        net,
        &trace,
        &dlogits,
        1.0,
        Some(&mut weight_grads),
        Some(&mut input_grad),
    );
    Ok(GradientBundle {
        loss_value,
        weight_grads,
        input_grad: DenseVector::from_raw(input_grad),
    })
}

/// `α max τ + β max ζ` alone, at the clean input.
pub fn regularizer_value(net: &Mlp, x: &DenseVector, y: usize, cfg: &LossConfig) -> Result<f64> {
    check_example(net, x, y)?;
    cfg.budget.check_for(net)?;
    if cfg.is_unregularized() {
        return Ok(0.0);
    }
    let (terms, _) = BoundTerms::with_input(net, x.as_slice(), &cfg.budget);
    let worst = worst_pair_from_terms(net, &terms, y)?;
    Ok(cfg.alpha * worst.tau_max + cfg.beta * worst.zeta_max)
}

/// `ℓ′(f(x), y)`; equals `cross_entropy` exactly when `α = β = 0`.
pub fn regularized_loss(net: &Mlp, x: &DenseVector, y: usize, cfg: &LossConfig) -> Result<f64> {
    check_example(net, x, y)?;
    let ce = cross_entropy(&net.forward(x)?, y)?;
    if cfg.is_unregularized() {
        return Ok(ce);
    }
    Ok(ce + regularizer_value(net, x, y, cfg)?)
}

fn add_row_sign_grad(g: &mut DenseMatrix, w: &DenseMatrix, coef: f64, c: usize, y: usize) {
    if coef == 0.0 {
        return;
    }
    for k in 0..w.cols() {
        let s = sign(w.get(c, k) - w.get(y, k));
        if s != 0.0 {
            g.as_mut_slice()[c * w.cols() + k] += coef * s;
            g.as_mut_slice()[y * w.cols() + k] -= coef * s;
        }
    }
}

/// Adds `coef · ∂‖W‖_∞/∂W` (sign pattern of the maximizing row).
fn add_inf_norm_grad(g: &mut DenseMatrix, w: &DenseMatrix, coef: f64) {
    if coef == 0.0 {
        return;
    }
    let r = w.inf_norm_argmax();
    let cols = w.cols();
    for k in 0..cols {
        g.as_mut_slice()[r * cols + k] += coef * sign(w.get(r, k));
    }
}

/// Reverse pass through the interval layers for `Σ_k seed_k ‖h^{k*}‖₁`
/// (`seeds[k]` for `k = 1..L-1`; `seeds[0]` is ignored).
fn shifted_backprop(
    net: &Mlp,
    x: &[f64],
    eps_layers: &[f64],
    pass: &ShiftedPass,
    seeds: &[f64],
    grads: &mut [DenseMatrix],
    input_grad: &mut [f64],
) {
    let top = pass.layers.len();
    if top == 0 {
        return;
    }
    let mut gu: Vec<f64> = vec![seeds[top]; pass.layers[top - 1].upper.len()];
    let mut gl: Vec<f64> = vec![0.0; gu.len()];
    for k in (1..=top).rev() {
        let layer = &pass.layers[k - 1];
        let w = net.layer(k);
        let eps = eps_layers[k - 1];
        let du: Vec<f64> = gu
            .iter()
            .zip(&layer.upper_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let dl: Vec<f64> = gl
            .iter()
            .zip(&layer.lower_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let g = &mut grads[k - 1];
        let cols = w.cols();
        if k == 1 {
            for i in 0..w.rows() {
                let (a, b) = (du[i], dl[i]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let row = w.row(i);
                let grow = &mut g.as_mut_slice()[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    let s = sign(x[j]) * eps;
                    grow[j] += (a + b) * x[j];
                    input_grad[j] += a * (row[j] + s) + b * (row[j] - s);
                }
            }
        } else {
            let prev = &pass.layers[k - 2];
            let mut gu_prev = vec![seeds[k - 1]; cols];
            let mut gl_prev = vec![0.0; cols];
            for i in 0..w.rows() {
                let (a, b) = (du[i], dl[i]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let row = w.row(i);
                let grow = &mut g.as_mut_slice()[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    let c = row[j] + eps;
                    let e = row[j] - eps;
                    if c >= 0.0 {
                        grow[j] += a * prev.upper[j];
                        gu_prev[j] += a * c;
                    } else {
                        grow[j] += a * prev.lower[j];
                        gl_prev[j] += a * c;
                    }
                    if e >= 0.0 {
                        grow[j] += b * prev.lower[j];
                        gl_prev[j] += b * e;
                    } else {
                        grow[j] += b * prev.upper[j];
                        gu_prev[j] += b * e;
                    }
                }
            }
            gu = gu_prev;
            gl = gl_prev;
        }
    }
}

/// Value and gradient of `α max_{y′≠y} τ^{y′y} + β max_{y′≠y} ζ^{y′y}` at the
/// clean input `x`. `input_grad` carries ζ's dependence on `x` (through `‖x‖₁`
/// and the shifted activations).
pub fn regularizer_backprop(
    net: &Mlp,
    x: &DenseVector,
    y: usize,
    cfg: &LossConfig,
) -> Result<GradientBundle> {
    check_example(net, x, y)?;
    cfg.budget.check_for(net)?;
    let mut weight_grads = zero_grads(net);
    let mut input_grad = vec![0.0; x.dim()];
    if cfg.is_unregularized() {
        return Ok(GradientBundle {
            loss_value: 0.0,
            weight_grads,
            input_grad: DenseVector::from_raw(input_grad),
        });
    }
    let value = add_regularizer_grads(
        net,
        x.as_slice(),
        y,
        cfg,
        1.0,
        &mut weight_grads,
        &mut input_grad,
    )?;
    Ok(GradientBundle {
        loss_value: value,
        weight_grads,
        input_grad: DenseVector::from_raw(input_grad),
    })
}

/// Adds `scale ×` the regularizer gradient into the accumulators and returns
/// the unscaled regularizer value.
pub(crate) fn add_regularizer_grads(
    net: &Mlp,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    scale: f64,
    grads: &mut [DenseMatrix],
    input_grad: &mut [f64],
) -> Result<f64> {
    let depth = net.depth();
    let budget = &cfg.budget;
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let (terms, pass) = BoundTerms::with_input(net, x, budget);
    let worst = worst_pair_from_terms(net, &terms, y)?;
    let value = alpha * worst.tau_max + beta * worst.zeta_max;

    let last = net.layer(depth);
    let n = &terms.inf_norms;
    let eps = |m: usize| budget.eps(m);
    let d = |m: usize| net.layer(m).cols() as f64;

    // τ = ε_x (r + 2 d_L ε_L) Π_{m<L} (n_m + d_m ε_m)
    if alpha != 0.0 && budget.eps_x != 0.0 {
        let r = last.row_diff_l1(worst.tau_class, y)?;
        let coef = scale * alpha * budget.eps_x;
        add_row_sign_grad(
            &mut grads[depth - 1],
            last,
            coef * terms.tau_product,
            worst.tau_class,
            y,
        );
        let head = r + 2.0 * d(depth) * eps(depth);
        for m in 1..depth {
            let mut others = 1.0;
            for q in (1..depth).filter(|&q| q != m) {
                others *= n[q - 1] + d(q) * eps(q);
            }
            add_inf_norm_grad(&mut grads[m - 1], net.layer(m), coef * head * others);
        }
    }

    // ζ = r Σ_k F_k ε_k a_{k-1} + 2 ε_L a_{L-1},  F_k = Π_{m=k+1}^{L-1} n_m
    if beta != 0.0 {
        let r = last.row_diff_l1(worst.zeta_class, y)?;
        let a = &terms.shifted_l1;
        let coef = scale * beta;
        add_row_sign_grad(
            &mut grads[depth - 1],
            last,
            coef * terms.zeta_inner,
            worst.zeta_class,
            y,
        );

        let tail_product = |from: usize, skip: usize| -> f64 {
            (from..depth)
                .filter(|&q| q != skip)
                .map(|q| n[q - 1])
                .product()
        };
        for m in 2..depth {
            let mut dn = 0.0;
            for k in 1..m {
                dn += tail_product(k + 1, m) * eps(k) * a[k - 1];
            }
            add_inf_norm_grad(&mut grads[m - 1], net.layer(m), coef * r * dn);
        }

        // Seeds on a_k = ‖h^{k*}‖₁.
        let mut seeds = vec![0.0; depth];
        for (k, seed) in seeds.iter_mut().enumerate().take(depth - 1) {
            *seed = coef * r * tail_product(k + 2, 0) * eps(k + 1);
        }
        seeds[depth - 1] += coef * 2.0 * eps(depth);
        // a_0 = ‖x‖₁
        for (gx, &xv) in input_grad.iter_mut().zip(x) {
            *gx += seeds[0] * sign(xv);
        }
        shifted_backprop(net, x, &budget.eps_layers, &pass, &seeds, grads, input_grad);
    }
    Ok(value)
}

/// Gradient of `ℓ′`; identical to [`backprop`] when `α = β = 0`.
pub fn regularized_backprop(
    net: &Mlp,
    x: &DenseVector,
    y: usize,
    cfg: &LossConfig,
) -> Result<GradientBundle> {
    let mut bundle = backprop(net, x, y)?;
    cfg.budget.check_for(net)?;
    if cfg.is_unregularized() {
        return Ok(bundle);
    }
    let mut input_grad = bundle.input_grad.into_inner();
    let reg = add_regularizer_grads(
        net,
        x.as_slice(),
        y,
        cfg,
        1.0,
        &mut bundle.weight_grads,
        &mut input_grad,
    )?;
    bundle.loss_value += reg;
    bundle.input_grad = DenseVector::from_raw(input_grad);
    Ok(bundle)
}
