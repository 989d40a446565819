//! Empirical check that the margin bounds dominate every perturbation we can
//! find: uniform samples, random corners of the balls, and a signed-gradient
//! ascent on each pairwise margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{margin_bound_all_pairs, margin_bound_single_layer, PerturbationBudget};
use crate::error::{Error, Result};
use crate::linalg::{sign, DenseMatrix, DenseVector};
use crate::loss::{backprop_into, zero_grads};
use crate::network::Mlp;

/// Which bound is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// All layers and the input at once.
    Joint,
    /// Only the given layer (1-based) and the input.
    SingleLayer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Ascent steps per class pair; 0 disables the ascent.
    pub ascent_steps: usize,
    /// Absolute slack before a sample counts as a violation.
    pub slack: f64,
    pub kind: BoundKind,
    /// Multiplies the τ part of every bound. Only for exercising the harness.
    #[doc(hidden)]
    #[serde(skip, default = "one")]
    pub tau_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            ascent_steps: 50,
            slack: 1e-9,
            kind: BoundKind::Joint,
            tau_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Uniform,
    Corner,
    Ascent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub class_i: usize,
    pub class_j: usize,
    pub clean_margin: f64,
    pub bound: f64,
    pub max_observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub class_i: usize,
    pub class_j: usize,
    pub observed: f64,
    pub bound: f64,
    pub kind: SampleKind,
    pub input: Vec<f64>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub budget: PerturbationBudget,
    pub kind: BoundKind,
    pub samples: usize,
    pub pairs: Vec<PairReport>,
    pub violation_count: usize,
    /// The first violation found, if any.
    pub first_violation: Option<Violation>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

struct Sample {
    x: Vec<f64>,
    net: Mlp,
}

fn perturb(values: &mut [f64], center: &[f64], eps: f64, corner: bool, rng: &mut ChaCha8Rng) {
    if eps == 0.0 {
        values.copy_from_slice(center);
        return;
    }
    for (v, &c) in values.iter_mut().zip(center) {
        let delta = if corner {
            if rng.gen::<bool>() {
                eps
            } else {
                -eps
            }
        } else {
            rng.gen_range(-eps..=eps)
        };
        *v = c + delta;
    }
}

fn draw(
    net: &Mlp,
    x: &[f64],
    budget: &PerturbationBudget,
    corner: bool,
    sample: &mut Sample,
    rng: &mut ChaCha8Rng,
) {
    perturb(&mut sample.x, x, budget.eps_x, corner, rng);
    for (m, (w, w0)) in sample
        .net
        .layers_mut()
        .iter_mut()
        .zip(net.layers())
        .enumerate()
    {
        perturb(
            w.as_mut_slice(),
            w0.as_slice(),
            budget.eps(m + 1),
            corner,
            rng,
        );
    }
}

/// Signed-gradient ascent on `f^{ij}` over the joint ball, from the clean point.
fn margin_ascent(
    net: &Mlp,
    x: &[f64],
    budget: &PerturbationBudget,
    i: usize,
    j: usize,
    steps: usize,
) -> Sample {
    let mut cur = Sample {
        x: x.to_vec(),
        net: net.clone(),
    };
    let mut dlogits = vec![0.0; net.class_count()];
    dlogits[i] = 1.0;
    dlogits[j] = -1.0;
    let mut grads = zero_grads(net);
    let mut gx = vec![0.0; x.len()];
    let step = |eps: f64| eps / steps.max(1) as f64 * 2.5;
    for _ in 0..steps {
        grads.iter_mut().for_each(|g| g.as_mut_slice().fill(0.0));
        gx.fill(0.0);
        let trace = cur.net.forward_trace(&cur.x);
        backprop_into(
            &cur.net,
            &trace,
            &dlogits,
            1.0,
            Some(&mut grads),
            Some(&mut gx),
        );
        let sx = step(budget.eps_x);
        for ((v, &g), &c) in cur.x.iter_mut().zip(&gx).zip(x) {
            *v = (*v + sx * sign(g)).clamp(c - budget.eps_x, c + budget.eps_x);
        }
        for (m, ((w, g), w0)) in cur
            .net
            .layers_mut()
            .iter_mut()
            .zip(&grads)
            .zip(net.layers())
            .enumerate()
        {
            let eps = budget.eps(m + 1);
            let sw = step(eps);
            for ((v, &gv), &c) in w
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(w0.as_slice())
            {
                *v = (*v + sw * sign(gv)).clamp(c - eps, c + eps);
            }
        }
    }
    cur
}

fn bounds_for(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    opts: &VerifyOptions,
) -> Result<Vec<PairReport>> {
    let reports = margin_bound_all_pairs(net, x, budget)?;
    reports
        .into_iter()
        .map(|r| {
            let bound = match opts.kind {
                BoundKind::Joint => r.margin + opts.tau_scale * r.tau + r.zeta,
                BoundKind::SingleLayer(n) => {
                    let eps_n = budget.eps(n);
                    if opts.tau_scale == 1.0 {
                        margin_bound_single_layer(
                            net,
                            x,
                            n,
                            eps_n,
                            budget.eps_x,
                            r.class_i,
                            r.class_j,
                        )?
                    } else {
                        let full = margin_bound_single_layer(
                            net,
                            x,
                            n,
                            eps_n,
                            budget.eps_x,
                            r.class_i,
                            r.class_j,
                        )?;
                        let no_input =
                            margin_bound_single_layer(net, x, n, eps_n, 0.0, r.class_i, r.class_j)?;
                        no_input + opts.tau_scale * (full - no_input)
                    }
                }
            };
            Ok(PairReport {
                class_i: r.class_i,
                class_j: r.class_j,
                clean_margin: r.margin,
                bound,
                max_observed: r.margin,
            })
        })
        .collect()
}

fn check_kind(net: &Mlp, budget: &PerturbationBudget, kind: BoundKind) -> Result<()> {
    if let BoundKind::SingleLayer(n) = kind {
        if n == 0 || n > net.depth() {
            return Err(Error::IndexOutOfRange {
                what: "perturbed layer",
                index: n,
                bound: net.depth() + 1,
            });
        }
        if budget
            .eps_layers
            .iter()
            .enumerate()
            .any(|(m, &e)| m + 1 != n && e != 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "single-layer check on layer {n} needs every other layer radius at 0"
            )));
        }
    }
    Ok(())
}

/// Compares every pairwise margin reached by the sampled perturbations against
/// its bound.
pub fn verify_bound(
    net: &Mlp,
    x: &DenseVector,
    budget: &PerturbationBudget,
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    net.check_input(x)?;
    budget.check_for(net)?;
    check_kind(net, budget, opts.kind)?;
    let mut pairs = bounds_for(net, x, budget, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut violation_count = 0;
    let mut first_violation = None;

    let mut record =
        |pairs: &mut [PairReport], sample: &Sample, kind: SampleKind, only: Option<usize>| {
            let logits = sample.net.logits_raw(&sample.x);
            for (idx, p) in pairs.iter_mut().enumerate() {
                if only.is_some_and(|o| o != idx) {
                    continue;
                }
                let observed = logits[p.class_i] - logits[p.class_j];
                p.max_observed = p.max_observed.max(observed);
                if observed > p.bound + opts.slack {
                    violation_count += 1;
                    if first_violation.is_none() {
                        first_violation = Some(Violation {
                            class_i: p.class_i,
                            class_j: p.class_j,
                            observed,
                            bound: p.bound,
                            kind,
                            input: sample.x.clone(),
                            weights: sample
                                .net
                                .layers()
                                .iter()
                                .map(DenseMatrix::to_rows)
                                .collect(),
                        });
                    }
                }
            }
        };

    let mut sample = Sample {
        x: x.as_slice().to_vec(),
        net: net.clone(),
    };
    for s in 0..opts.samples {
        let corner = s % 2 == 1;
        draw(net, x.as_slice(), budget, corner, &mut sample, &mut rng);
        let kind = if corner {
            SampleKind::Corner
        } else {
            SampleKind::Uniform
        };
        record(&mut pairs, &sample, kind, None);
    }
    if opts.ascent_steps > 0 {
        for idx in 0..pairs.len() {
            let (i, j) = (pairs[idx].class_i, pairs[idx].class_j);
            let found = margin_ascent(net, x.as_slice(), budget, i, j, opts.ascent_steps);
            record(&mut pairs, &found, SampleKind::Ascent, Some(idx));
        }
    }

    Ok(VerifyReport {
        budget: budget.clone(),
        kind: opts.kind,
        samples: opts.samples,
        pairs,
        violation_count,
        first_violation,
    })
}
