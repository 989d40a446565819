//! Worst-case pairwise-margin bounds under joint ℓ∞ perturbation of the input
//! and the weights.
//!
//! For `x̂ ∈ B(x, ε_x)` and `Ŵ^m ∈ B(W^m, ε_m)` (element-wise balls):
//!
//! ```text
//! f^{ij}_Ŵ(x̂) ≤ f^{ij}_W(x) + τ^{ij}(ξ) + ζ^{ij}(x, ξ)
//!
//! τ = ε_x (‖W^L_i − W^L_j‖₁ + 2 d_L ε_L) Π_{m<L} (‖W^m‖_∞ + d_m ε_m)
//! ζ = ‖W^L_i − W^L_j‖₁ Σ_{k=1}^{L-1} (Π_{m=k+1}^{L-1} ‖W^m‖_∞) ε_k ‖h^{(k-1)*}‖₁
//!     + 2 ε_L ‖h^{(L-1)*}‖₁,          h^{0*} := x
//! ```
//!
//! `d_m` is the column count of `W^m`. `h^{k*}` is the upper envelope of the
//! k-th hidden layer over all weight perturbations at the clean input; see
//! [`shifted_hidden`].
//!
//! The single-layer bound covers a perturbation confined to one layer `N` plus
//! the input, with a separate closed form when `N = L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sign, DenseMatrix, DenseVector};
use crate::network::Mlp;

const LANES: usize = 8;

/// Input radius `ε_x` plus one element-wise radius per layer, `ε_1..ε_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub eps_x: f64,
    pub eps_layers: Vec<f64>,
}

impl PerturbationBudget {
    pub fn new(eps_x: f64, eps_layers: Vec<f64>) -> Result<Self> {
        let valid = |e: f64| e.is_finite() && e >= 0.0;
        if !valid(eps_x) || !eps_layers.iter().all(|&e| valid(e)) {
            return Err(Error::InvalidConfig(format!(
                "radii must be finite and nonnegative: eps_x={eps_x}, eps_layers={eps_layers:?}"
            )));
        }
        Ok(Self { eps_x, eps_layers })
    }

    pub fn zero(depth: usize) -> Self {
        Self {
            eps_x: 0.0,
            eps_layers: vec![0.0; depth],
        }
    }

    /// Same weight radius on every layer.
    pub fn uniform(eps_x: f64, eps_w: f64, depth: usize) -> Result<Self> {
        Self::new(eps_x, vec![eps_w; depth])
    }

    /// Only layer `n` (1-based) and the input are perturbed.
    pub fn single_layer(depth: usize, n: usize, eps_n: f64, eps_x: f64) -> Result<Self> {
        if n == 0 || n > depth {
            return Err(Error::IndexOutOfRange {
                what: "perturbed layer",
                index: n,
                bound: depth + 1,
            });
        }
        let mut eps_layers = vec![0.0; depth];
        eps_layers[n - 1] = eps_n;
        Self::new(eps_x, eps_layers)
    }

    /// `ε_m`, 1-based.
    pub fn eps(&self, m: usize) -> f64 {
        self.eps_layers[m - 1]
    }

    pub fn is_zero(&self) -> bool {
        self.eps_x == 0.0 && self.eps_layers.iter().all(|&e| e == 0.0)
    }

    pub fn check_for(&self, net: &Mlp) -> Result<()> {
        if self.eps_layers.len() != net.depth() {
            return Err(Error::DimensionMismatch {
                context: "budget eps_layers vs network depth",
                expected: net.depth(),
                found: self.eps_layers.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBoundReport {
    pub class_i: usize,
    pub class_j: usize,
    pub margin: f64,
    pub tau: f64,
    pub zeta: f64,
    pub upper_bound: f64,
}

/// Argmax classes and values of the two regularizers for a true class `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstRegularizerPair {
    pub tau_class: usize,
    pub tau_max: f64,
    pub zeta_class: usize,
    pub zeta_max: f64,
}

/// One layer of the interval pass behind `h^{k*}`.
#[derive(Debug, Clone)]
pub(crate) struct IntervalLayer {
    pub upper_pre: Vec<f64>,
    pub lower_pre: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

/// Upper and lower envelopes of the hidden layers `1..L-1` over every
/// `Ŵ^m ∈ B(W^m, ε_m)` at a fixed input `x`.
///
/// Layer 1 is exact: the maximizing first-layer weight is
/// `W^1_{ij} + sgn(x_j) ε_1`. From layer 2 on the inputs are nonnegative and
/// only known to lie in `[lower, upper]`; the shifted weight `W_{ij} + ε` takes
/// the upper activation when nonnegative and the lower one otherwise.
/// With every `ε = 0` both envelopes reproduce the clean activations bit for bit.
#[derive(Debug, Clone)]
pub(crate) struct ShiftedPass {
    pub layers: Vec<IntervalLayer>,
}

#[inline]
fn shifted_first_dot(w_row: &[f64], x: &[f64], signs: &[f64], eps: f64) -> (f64, f64) {
    let mut up = [0.0f64; LANES];
    let mut lo = [0.0f64; LANES];
    let n = w_row.len();
    let main = n - n % LANES;
    for base in (0..main).step_by(LANES) {
        for l in 0..LANES {
            let j = base + l;
            let s = signs[j] * eps;
            up[l] += (w_row[j] + s) * x[j];
            lo[l] += (w_row[j] - s) * x[j];
        }
    }
    let (mut tu, mut tl) = (0.0, 0.0);
    for j in main..n {
        let s = signs[j] * eps;
        tu += (w_row[j] + s) * x[j];
        tl += (w_row[j] - s) * x[j];
    }
    (reduce(&up) + tu, reduce(&lo) + tl)
}

#[inline]
fn reduce(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline]
fn pick(coef: f64, hi: f64, lo: f64) -> f64 {
    if coef >= 0.0 {
        hi
    } else {
        lo
    }
}

#[inline]
fn shifted_hidden_dot(w_row: &[f64], upper: &[f64], lower: &[f64], eps: f64) -> (f64, f64) {
    let mut up = [0.0f64; LANES];
    let mut lo = [0.0f64; LANES];
    let n = w_row.len();
    let main = n - n % LANES;
    for base in (0..main).step_by(LANES) {
        for l in 0..LANES {
            let j = base + l;
            let c = w_row[j] + eps;
            let e = w_row[j] - eps;
            up[l] += c * pick(c, upper[j], lower[j]);
            lo[l] += e * pick(e, lower[j], upper[j]);
        }
    }
    let (mut tu, mut tl) = (0.0, 0.0);
    for j in main..n {
        let c = w_row[j] + eps;
        let e = w_row[j] - eps;
        tu += c * pick(c, upper[j], lower[j]);
        tl += e * pick(e, lower[j], upper[j]);
    }
    (reduce(&up) + tu, reduce(&lo) + tl)
}

impl ShiftedPass {
    /// Runs the pass through hidden layers `1..=upto`.
    pub(crate) fn run(net: &Mlp, x: &[f64], eps_layers: &[f64], upto: usize) -> Self {
        let mut layers: Vec<IntervalLayer> = Vec::with_capacity(upto);
        let signs: Vec<f64> = x.iter().map(|&v| sign(v)).collect();
        for k in 1..=upto {
            let w = net.layer(k);
            let eps = eps_layers[k - 1];
            let mut upper_pre = Vec::with_capacity(w.rows());
            let mut lower_pre = Vec::with_capacity(w.rows());
            for i in 0..w.rows() {
                let (u, l) = match layers.last() {
                    None => shifted_first_dot(w.row(i), x, &signs, eps),
                    Some(prev) => shifted_hidden_dot(w.row(i), &prev.upper, &prev.lower, eps),
                };
                upper_pre.push(u);
                lower_pre.push(l);
            }
            let upper = upper_pre.iter().map(|v| v.max(0.0)).collect();
            let lower = lower_pre.iter().map(|v| v.max(0.0)).collect();
            layers.push(IntervalLayer {
                upper_pre,
                lower_pre,
                upper,
                lower,
            });
        }
        Self { layers }
    }

    /// `‖h^{k*}‖₁` for `k = 0..=upto`, with `k = 0` giving `‖x‖₁`.
    pub(crate) fn upper_l1_norms(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(crate::linalg::abs_sum(x));
        out.extend(self.layers.iter().map(|l| l.upper.iter().sum::<f64>()));
        out
    }
}

/// `h^{k*}`: entry-wise upper envelope of the k-th hidden activation over
/// all weight perturbations in the budget, at the clean input `x`.
///
/// Dominates `layer_output(x, k)` and every weight-perturbed activation; equals
/// `layer_output(x, k)` exactly when all radii are zero.
pub fn shifted_hidden(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    k: usize,
) -> Result<DenseVector> {
    net.check_input(x)?;
    budget.check_for(net)?;
    if k == 0 || k >= net.depth() {
        return Err(Error::IndexOutOfRange {
            what: "hidden layer",
            index: k,
            bound: net.depth(),
        });
    }
    let pass = ShiftedPass::run(net, x.as_slice(), &budget.eps_layers, k);
    Ok(DenseVector::from_raw(pass.layers[k - 1].upper.clone()))
}

/// Pair-independent pieces of τ and ζ for one `(net, x, budget)`.
#[derive(Debug, Clone)]
pub(crate) struct BoundTerms {
    /// `‖W^m‖_∞`, index `m-1`, for `m = 1..L`.
    pub inf_norms: Vec<f64>,
    /// `‖h^{k*}‖₁` for `k = 0..L-1` (`k = 0` is `‖x‖₁`).
    pub shifted_l1: Vec<f64>,
    /// `Π_{m<L} (‖W^m‖_∞ + d_m ε_m)`.
    pub tau_product: f64,
    /// `Σ_{k=1}^{L-1} (Π_{m=k+1}^{L-1} ‖W^m‖_∞) ε_k ‖h^{(k-1)*}‖₁`.
    pub zeta_inner: f64,
    pub eps_x: f64,
    pub eps_last: f64,
    pub d_last: f64,
}

impl BoundTerms {
    pub(crate) fn without_input(net: &Mlp, budget: &PerturbationBudget) -> Self {
        Self::build(net, budget, None)
    }

    pub(crate) fn with_input(
        net: &Mlp,
        x: &[f64],
        budget: &PerturbationBudget,
    ) -> (Self, ShiftedPass) {
        let pass = ShiftedPass::run(net, x, &budget.eps_layers, net.depth() - 1);
        let norms = pass.upper_l1_norms(x);
        (Self::build(net, budget, Some(norms)), pass)
    }

    fn build(net: &Mlp, budget: &PerturbationBudget, shifted_l1: Option<Vec<f64>>) -> Self {
        let l = net.depth();
        let inf_norms: Vec<f64> = net.layers().iter().map(DenseMatrix::inf_norm).collect();
        let mut tau_product = 1.0;
        for m in 1..l {
            tau_product *= inf_norms[m - 1] + net.layer(m).cols() as f64 * budget.eps(m);
        }
        let shifted_l1 = shifted_l1.unwrap_or_default();
        let mut zeta_inner = 0.0;
        if !shifted_l1.is_empty() {
            for k in 1..l {
                let mut factor = 1.0;
                for m in k + 1..l {
                    factor *= inf_norms[m - 1];
                }
                zeta_inner += factor * budget.eps(k) * shifted_l1[k - 1];
            }
        }
        Self {
            inf_norms,
            shifted_l1,
            tau_product,
            zeta_inner,
            eps_x: budget.eps_x,
            eps_last: budget.eps(l),
            d_last: net.layer(l).cols() as f64,
        }
    }

    pub(crate) fn tau(&self, row_diff: f64) -> f64 {
        self.eps_x * (row_diff + 2.0 * self.d_last * self.eps_last) * self.tau_product
    }

    pub(crate) fn zeta(&self, row_diff: f64) -> f64 {
        let last = *self.shifted_l1.last().expect("zeta needs the shifted pass");
        row_diff * self.zeta_inner + 2.0 * self.eps_last * last
    }
}

fn check_pair(net: &Mlp, i: usize, j: usize) -> Result<()> {
    net.check_class(i)?;
    net.check_class(j)
}

/// τ^{ij}(ξ): input-perturbation term, amplified by majorized weight norms.
pub fn tau(net: &Mlp, budget: &PerturbationBudget, i: usize, j: usize) -> Result<f64> {
    budget.check_for(net)?;
    check_pair(net, i, j)?;
    let terms = BoundTerms::without_input(net, budget);
    Ok(terms.tau(net.layer(net.depth()).row_diff_l1(i, j)?))
}

/// ζ^{ij}(x, ξ): pure weight-perturbation term. Does not read `ε_x`.
pub fn zeta(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    i: usize,
    j: usize,
) -> Result<f64> {
    net.check_input(x)?;
    budget.check_for(net)?;
    check_pair(net, i, j)?;
    let (terms, _) = BoundTerms::with_input(net, x.as_slice(), budget);
    Ok(terms.zeta(net.layer(net.depth()).row_diff_l1(i, j)?))
}

/// Upper bound on `f^{ij}_Ŵ(x̂)` over the joint ball, split into its parts.
pub fn margin_bound_joint(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    i: usize,
    j: usize,
) -> Result<MarginBoundReport> {
    net.check_input(x)?;
    budget.check_for(net)?;
    check_pair(net, i, j)?;
    let margin = net.pairwise_margin(x, i, j)?;
    let (terms, _) = BoundTerms::with_input(net, x.as_slice(), budget);
    let row_diff = net.layer(net.depth()).row_diff_l1(i, j)?;
    let tau = terms.tau(row_diff);
    let zeta = terms.zeta(row_diff);
    Ok(MarginBoundReport {
        class_i: i,
        class_j: j,
        margin,
        tau,
        zeta,
        upper_bound: margin + tau + zeta,
    })
}

/// Reports for every ordered pair `i ≠ j`, sharing one shifted pass.
pub fn margin_bound_all_pairs(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
) -> Result<Vec<MarginBoundReport>> {
    net.check_input(x)?;
    budget.check_for(net)?;
    let logits = net.forward(x)?;
    let (terms, _) = BoundTerms::with_input(net, x.as_slice(), budget);
    let last = net.layer(net.depth());
    let k = net.class_count();
    let mut out = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let row_diff = last.row_diff_l1(i, j)?;
            let margin = logits[i] - logits[j];
            let tau = terms.tau(row_diff);
            let zeta = terms.zeta(row_diff);
            out.push(MarginBoundReport {
                class_i: i,
                class_j: j,
                margin,
                tau,
                zeta,
                upper_bound: margin + tau + zeta,
            });
        }
    }
    Ok(out)
}

/// Upper bound on `f^{ij}_Ŵ(x̂)` when only layer `n` (1-based) and the input
/// are perturbed. `z^0 := x`.
pub fn margin_bound_single_layer(
    net: &Mlp,
    x: &DenseVector,
    n: usize,
    eps_n: f64,
    eps_x: f64,
    i: usize,
    j: usize,
) -> Result<f64> {
    net.check_input(x)?;
    check_pair(net, i, j)?;
    let l = net.depth();
    if n == 0 || n > l {
        return Err(Error::IndexOutOfRange {
            what: "perturbed layer",
            index: n,
            bound: l + 1,
        });
    }
    if !(eps_n >= 0.0 && eps_x >= 0.0 && eps_n.is_finite() && eps_x.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "radii must be finite and nonnegative: eps_n={eps_n}, eps_x={eps_x}"
        )));
    }
    let margin = net.pairwise_margin(x, i, j)?;
    let row_diff = net.layer(l).row_diff_l1(i, j)?;
    let inf = |m: usize| net.layer(m).inf_norm();

    let extra = if n != l {
        let mut tail = 1.0;
        for m in n + 1..l {
            tail *= inf(m);
        }
        let mut head = 1.0;
        for m in 1..n {
            head *= inf(m);
        }
        let z_prev = net.layer_output(x, n - 1)?.l1();
        let d_n = net.layer(n).cols() as f64;
        row_diff * tail * (eps_n * z_prev + eps_x * head * (inf(n) + d_n * eps_n))
    } else {
        let mut inf_prod = 1.0;
        let mut one_prod = 1.0;
        for m in 1..l {
            inf_prod *= inf(m);
            one_prod *= net.layer(m).one_norm();
        }
        let d_0 = net.input_dim() as f64;
        eps_x * row_diff * inf_prod + 2.0 * eps_n * one_prod * (x.l1() + d_0 * eps_x)
    };
    Ok(margin + extra)
}

/// Worst classes `y′ ≠ y` for the τ and ζ regularizers, each maximized
/// independently; ties go to the smallest class index.
pub fn worst_regularizer_pair(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    y: usize,
) -> Result<WorstRegularizerPair> {
    net.check_input(x)?;
    budget.check_for(net)?;
    let (terms, _) = BoundTerms::with_input(net, x.as_slice(), budget);
    worst_pair_from_terms(net, &terms, y)
}

pub(crate) fn worst_pair_from_terms(
    net: &Mlp,
    terms: &BoundTerms,
    y: usize,
) -> Result<WorstRegularizerPair> {
    let k = net.class_count();
    if k < 2 {
        return Err(Error::InvalidNetwork(format!(
            "regularizers need at least 2 classes, got {k}"
        )));
    }
    net.check_class(y)?;
    let last = net.layer(net.depth());
    let mut best: Option<WorstRegularizerPair> = None;
    for c in (0..k).filter(|&c| c != y) {
        let row_diff = last.row_diff_l1(c, y)?;
        let (t, z) = (terms.tau(row_diff), terms.zeta(row_diff));
        best = Some(match best {
            None => WorstRegularizerPair {
                tau_class: c,
                tau_max: t,
                zeta_class: c,
                zeta_max: z,
            },
            Some(mut b) => {
                if t > b.tau_max {
                    b.tau_class = c;
                    b.tau_max = t;
                }
                if z > b.zeta_max {
                    b.zeta_class = c;
                    b.zeta_max = z;
                }
                b
            }
        });
    }
    Ok(best.expect("k >= 2 leaves at least one candidate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::net;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    fn budget(eps_x: f64, layers: &[f64]) -> PerturbationBudget {
        PerturbationBudget::new(eps_x, layers.to_vec()).unwrap()
    }

    #[test]
    fn shifted_hidden_examples() {
        let n = net(&[&[&[1., -1.]], &[&[1.], &[2.]]]);
        let h = shifted_hidden(&n, &v(&[1., 0.]), &budget(0., &[0.5, 0.]), 1).unwrap();
        assert_eq!(h, v(&[1.5]));

        let n = net(&[&[&[-1.]], &[&[1.]]]);
        let h = shifted_hidden(&n, &v(&[1.]), &budget(0., &[2., 0.]), 1).unwrap();
        assert_eq!(h, v(&[1.]));

        let n = net(&[
            &[&[1., -2.], &[0.5, 1.]],
            &[&[1., -1.], &[0.3, 2.]],
            &[&[1., 1.]],
        ]);
        let x = v(&[0.7, -0.2]);
        for k in 1..3 {
            assert_eq!(
                shifted_hidden(&n, &x, &PerturbationBudget::zero(3), k).unwrap(),
                n.layer_output(&x, k).unwrap()
            );
        }
        assert!(shifted_hidden(&n, &x, &PerturbationBudget::zero(3), 3).is_err());
        assert!(shifted_hidden(&n, &x, &PerturbationBudget::zero(2), 1).is_err());
    }

    #[test]
    fn tau_examples() {
        let n = net(&[&[&[1.]], &[&[2.], &[0.]]]);
        let b = budget(0.1, &[0.1, 0.1]);
        assert!((tau(&n, &b, 0, 1).unwrap() - 0.242).abs() < 1e-12);
        assert_eq!(tau(&n, &budget(0., &[0.1, 0.1]), 0, 1).unwrap(), 0.0);
        assert_eq!(tau(&n, &budget(0.3, &[0., 0.]), 1, 1).unwrap(), 0.0);
        assert!(tau(&n, &b, 0, 2).is_err());
    }

    #[test]
    fn zeta_examples() {
        let n = net(&[&[&[1.]], &[&[1.], &[-1.]]]);
        let x = v(&[2.]);
        assert!((zeta(&n, &x, &budget(0., &[0.1, 0.05]), 0, 1).unwrap() - 0.62).abs() < 1e-12);
        assert_eq!(zeta(&n, &x, &budget(0.4, &[0., 0.]), 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn zeta_on_deeper_net_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Mlp::glorot(&[3, 4, 5, 3, 3], &mut rng).unwrap();
        let x = v(&[0.4, -0.3, 0.9]);
        let b = budget(0.05, &[0.02, 0.01, 0.03, 0.015]);
        let z = zeta(&n, &x, &b, 0, 2).unwrap();

        let inf = |m: usize| n.layer(m).inf_norm();
        let h = |k: usize| shifted_hidden(&n, &x, &b, k).unwrap().l1();
        let r = n.layer(4).row_diff_l1(0, 2).unwrap();
        let terms = [
            r * b.eps(1) * x.l1() * inf(2) * inf(3),
            r * b.eps(2) * h(1) * inf(3),
            r * b.eps(3) * h(2),
            2.0 * b.eps(4) * h(3),
        ];
        assert!((z - terms.iter().sum::<f64>()).abs() < 1e-12 * z.max(1.0));
        assert!(terms.iter().all(|&t| z >= t));
    }

    #[test]
    fn joint_bound_sums_parts_on_shared_net() {
        let n = net(&[&[&[1.]], &[&[1.], &[-1.]]]);
        let x = v(&[2.]);
        let b = budget(0.1, &[0.1, 0.05]);
        let rep = margin_bound_joint(&n, &x, &b, 0, 1).unwrap();
        // τ = 0.1 (2 + 2·0.05)(1 + 0.1) = 0.231
        assert!((rep.tau - 0.231).abs() < 1e-12);
        assert!((rep.zeta - 0.62).abs() < 1e-12);
        assert_eq!(rep.margin, 4.0);
        assert_eq!(rep.upper_bound, rep.margin + rep.tau + rep.zeta);

        let zero = margin_bound_joint(&n, &x, &PerturbationBudget::zero(2), 0, 1).unwrap();
        assert_eq!(zero.upper_bound, zero.margin);
        assert_eq!((zero.tau, zero.zeta), (0.0, 0.0));
    }

    #[test]
    fn single_layer_branches() {
        let n = net(&[
            &[&[1., -1.], &[0.5, 2.]],
            &[&[1., 1.], &[-1., 0.5]],
            &[&[1., 0.], &[0., 1.]],
        ]);
        let x = v(&[0.5, 0.25]);
        let m = n.pairwise_margin(&x, 0, 1).unwrap();
        for layer in 1..=3 {
            assert_eq!(
                margin_bound_single_layer(&n, &x, layer, 0., 0., 0, 1).unwrap(),
                m
            );
        }
        // N = L: ε_x ‖Δrow‖₁ Π‖W‖_∞ + 2 ε_L Π‖W‖₁ (‖x‖₁ + d_0 ε_x)
        let r = 2.0;
        let want = m + 0.1 * r * 2.5 * 2.0 + 2.0 * 0.2 * 3.0 * 2.0 * (0.75 + 2.0 * 0.1);
        let got = margin_bound_single_layer(&n, &x, 3, 0.2, 0.1, 0, 1).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(margin_bound_single_layer(&n, &x, 4, 0.1, 0.1, 0, 1).is_err());
        assert!(margin_bound_single_layer(&n, &x, 0, 0.1, 0.1, 0, 1).is_err());
    }

    /// Four-layer case with only `W^2` and the input perturbed: the bound is
    /// `‖ΔW^4‖₁ ‖W^3‖_∞ (ε_2 ‖z^1‖₁ + ε_x ‖W^1‖_∞ (‖W^2‖_∞ + d_2 ε_2))`.
    #[test]
    fn four_layer_second_layer_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Mlp::glorot(&[4, 5, 4, 3, 2], &mut rng).unwrap();
        let x = v(&[0.2, 0.9, 0.0, 0.4]);
        let (eps2, eps_x) = (0.03, 0.05);
        let z1 = n.layer_output(&x, 1).unwrap().l1();
        let eta = eps2 * z1 + eps_x * n.layer(1).inf_norm() * (n.layer(2).inf_norm() + 5.0 * eps2);
        let want = n.pairwise_margin(&x, 0, 1).unwrap()
            + n.layer(4).row_diff_l1(0, 1).unwrap() * n.layer(3).inf_norm() * eta;
        let got = margin_bound_single_layer(&n, &x, 2, eps2, eps_x, 0, 1).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn worst_pair_examples() {
        let n = net(&[&[&[1.]], &[&[1.], &[-1.]]]);
        let b = budget(0.1, &[0.1, 0.1]);
        let w = worst_regularizer_pair(&n, &v(&[1.]), &b, 0).unwrap();
        assert_eq!((w.tau_class, w.zeta_class), (1, 1));

        let n = net(&[&[&[1.]], &[&[1.], &[-1.], &[0.]]]);
        let w = worst_regularizer_pair(&n, &v(&[1.]), &b, 0).unwrap();
        assert_eq!(w.zeta_class, 1);
        assert_eq!(w.tau_class, 1);

        let n = net(&[&[&[1.]], &[&[0.5], &[0.5], &[0.5]]]);
        let w = worst_regularizer_pair(&n, &v(&[1.]), &b, 1).unwrap();
        assert_eq!((w.tau_class, w.zeta_class), (0, 0));
        // Only the 2 d_L ε_L part survives in τ.
        assert!((w.tau_max - 0.1 * (2.0 * 0.1) * (1.0 + 0.1)).abs() < 1e-15);

        let one_class = net(&[&[&[1.]], &[&[1.]]]);
        assert!(worst_regularizer_pair(&one_class, &v(&[1.]), &b, 0).is_err());
    }

    /// Shifting every weight up by its radius does not majorize deeper layers:
    /// a negative shifted weight paired with the raised activation lowers the
    /// output. The interval pass handles that case.
    #[test]
    fn plain_upward_shift_is_not_a_majorant() {
        let n = net(&[&[&[1.], &[0.]], &[&[1., -3.]], &[&[0.], &[0.]]]);
        let x = v(&[1.]);
        let b = budget(0.0, &[0.5, 0.0, 0.1]);

        // Plain shift: h1 = ρ([1.5, 0.5]), h2 = ρ(1.5 − 1.5) = 0, so ζ would be 0.
        let plain_h2 = (1.5f64 - 3.0 * 0.5).max(0.0);
        assert_eq!(plain_h2, 0.0);

        // A perturbed network in the ball reaches margin 0.3 > 0.
        let perturbed = net(&[&[&[1.5], &[-0.5]], &[&[1., -3.]], &[&[0.1], &[-0.1]]]);
        let attained = perturbed.pairwise_margin(&x, 0, 1).unwrap();
        assert!((attained - 0.3).abs() < 1e-12);

        let rep = margin_bound_joint(&n, &x, &b, 0, 1).unwrap();
        assert!(rep.upper_bound >= attained - 1e-12);
        assert_eq!(shifted_hidden(&n, &x, &b, 2).unwrap(), v(&[1.5]));
    }

    #[test]
    fn budget_validation() {
        assert!(PerturbationBudget::new(-0.1, vec![0.0]).is_err());
        assert!(PerturbationBudget::new(0.1, vec![f64::NAN]).is_err());
        assert!(PerturbationBudget::single_layer(3, 0, 0.1, 0.1).is_err());
        let b = PerturbationBudget::single_layer(3, 2, 0.1, 0.2).unwrap();
        assert_eq!(b.eps_layers, vec![0.0, 0.1, 0.0]);
    }

    fn random_case(seed: u64) -> (Mlp, DenseVector, PerturbationBudget) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.gen_range(2..=4);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(1..=6));
        }
        let last = dims.len() - 1;
        dims[last] = dims[last].max(2);
        let n = Mlp::glorot(&dims, &mut rng).unwrap();
        let x = DenseVector::new((0..dims[0]).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let b = PerturbationBudget::new(
            rng.gen_range(0.0..0.2),
            (0..depth).map(|_| rng.gen_range(0.0..0.1)).collect(),
        )
        .unwrap();
        (n, x, b)
    }

    proptest! {
        #[test]
        fn shifted_hidden_dominates_clean_activation(seed in any::<u64>()) {
            let (n, x, b) = random_case(seed);
            for k in 1..n.depth() {
                let h = shifted_hidden(&n, &x, &b, k).unwrap();
                let z = n.layer_output(&x, k).unwrap();
                for (a, c) in h.as_slice().iter().zip(z.as_slice()) {
                    prop_assert!(*a >= *c - 1e-12);
                }
            }
        }

        #[test]
        fn zeta_ignores_input_radius(seed in any::<u64>(), eps_x in 0.0f64..1.0) {
            let (n, x, b) = random_case(seed);
            let mut b2 = b.clone();
            b2.eps_x = eps_x;
            let k = n.class_count();
            prop_assert_eq!(
                zeta(&n, &x, &b, 0, k - 1).unwrap().to_bits(),
                zeta(&n, &x, &b2, 0, k - 1).unwrap().to_bits()
            );
        }

        #[test]
        fn argmax_invariant_under_scaling(seed in any::<u64>()) {
            let (n, x, b) = random_case(seed);
            let w = worst_regularizer_pair(&n, &x, &b, 0).unwrap();
            prop_assert!(w.tau_max >= 0.0 && w.zeta_max >= 0.0);
            prop_assert!(w.tau_class != 0 && w.zeta_class != 0);
        }
    }
}
