//! Signed-gradient PGD on the cross-entropy loss over the input, the weights,
//! or both at once.
//!
//! Each step evaluates one gradient of `ℓ_cls(f_W̃(X̃), y)` at the current
//! point and moves every free coordinate by `step · sign(grad)`, then projects
//! back onto its own element-wise ball (and the input box, when set). The
//! attack starts from the clean point; there are no random restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, sign, DenseMatrix, DenseVector};
use crate::loss::{backprop_into, cross_entropy_with_grad};
use crate::network::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    InputOnly,
    WeightOnly,
    Joint,
}

impl AttackMode {
    pub fn moves_input(self) -> bool {
        matches!(self, AttackMode::InputOnly | AttackMode::Joint)
    }

    pub fn moves_weights(self) -> bool {
        matches!(self, AttackMode::WeightOnly | AttackMode::Joint)
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_only" | "input-only" | "input" => Ok(AttackMode::InputOnly),
            "weight_only" | "weight-only" | "weight" => Ok(AttackMode::WeightOnly),
            "joint" => Ok(AttackMode::Joint),
            other => Err(Error::InvalidConfig(format!(
                "unknown attack mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_x: f64,
    pub step_w: f64,
    pub eps_x: f64,
    /// One radius shared by every layer.
    pub eps_w: f64,
    pub mode: AttackMode,
    /// Box the attacked input is kept in; `None` disables it.
    pub input_clamp: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_x: 0.01,
            step_w: 0.0005,
            eps_x: 0.0,
            eps_w: 0.0,
            mode: AttackMode::Joint,
            input_clamp: Some((0.0, 1.0)),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if self.steps == 0 {
            return Err(Error::InvalidConfig(
                "attack steps must be at least 1".into(),
            ));
        }
        if !(ok(self.step_x) && ok(self.step_w) && ok(self.eps_x) && ok(self.eps_w)) {
            return Err(Error::InvalidConfig(format!(
                "attack radii and step sizes must be finite and nonnegative: {self:?}"
            )));
        }
        if let Some((lo, hi)) = self.input_clamp {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "bad input clamp [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn with_radii(&self, eps_x: f64, eps_w: f64) -> Self {
        Self {
            eps_x,
            eps_w,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub perturbed_input: DenseVector,
    pub perturbed_weights: Vec<DenseMatrix>,
    pub final_loss: f64,
    pub clean_prediction: usize,
    pub attacked_prediction: usize,
    pub prediction_flipped: bool,
}

#[inline]
fn clip_scalar(value: f64, center: f64, radius: f64) -> f64 {
    if (value - center).abs() <= radius {
        return value;
    }
    let mut lo = center - radius;
    while center - lo > radius {
        lo = lo.next_up();
    }
    let mut hi = center + radius;
    while hi - center > radius {
        hi = hi.next_down();
    }
    value.max(lo).min(hi)
}

/// Element-wise projection of `value` onto `[center − radius, center + radius]`.
pub fn clip_to_ball(value: &[f64], center: &[f64], radius: f64) -> Result<Vec<f64>> {
    if value.len() != center.len() {
        return Err(Error::DimensionMismatch {
            context: "clip value vs center",
            expected: center.len(),
            found: value.len(),
        });
    }
    Ok(value
        .iter()
        .zip(center)
        .map(|(&v, &c)| clip_scalar(v, c, radius))
        .collect())
}

pub fn clip_vector(value: &DenseVector, center: &DenseVector, radius: f64) -> Result<DenseVector> {
    clip_to_ball(value.as_slice(), center.as_slice(), radius).map(DenseVector::from_raw)
}

pub fn clip_matrix(value: &DenseMatrix, center: &DenseMatrix, radius: f64) -> Result<DenseMatrix> {
    if value.shape() != center.shape() {
        return Err(Error::DimensionMismatch {
            context: "clip matrix entries",
            expected: center.rows() * center.cols(),
            found: value.rows() * value.cols(),
        });
    }
    let data = clip_to_ball(value.as_slice(), center.as_slice(), radius)?;
    Ok(DenseMatrix::from_raw(value.rows(), value.cols(), data))
}

/// Runs the attack. See [`pgd_observed`] for per-step inspection.
pub fn pgd(net: &Mlp, x: &DenseVector, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    pgd_observed(net, x, y, cfg, |_, _, _| {})
}

/// Like [`pgd`], calling `observer(step, x̃, W̃)` after every update.
pub fn pgd_observed<F>(
    net: &Mlp,
    x: &DenseVector,
    y: usize,
    cfg: &AttackConfig,
    mut observer: F,
) -> Result<AttackResult>
where
    F: FnMut(usize, &[f64], &[DenseMatrix]),
{
    net.check_input(x)?;
    net.check_class(y)?;
    cfg.validate()?;

    let clean = x.as_slice();
    let clean_prediction = net.predict_raw(clean);
    let mut cur_x = clean.to_vec();
    let mut cur_net = net.clone();
    let move_x = cfg.mode.moves_input();
    let move_w = cfg.mode.moves_weights();

    let mut weight_grads: Vec<DenseMatrix> = crate::loss::zero_grads(net);
    let mut input_grad = vec![0.0; clean.len()];

    for step in 0..cfg.steps {
        let trace = cur_net.forward_trace(&cur_x);
        let (_, dlogits) = cross_entropy_with_grad(&trace.logits, y);
        if move_w {
            weight_grads
                .iter_mut()
                .for_each(|g| g.as_mut_slice().fill(0.0));
        }
        if move_x {
            input_grad.fill(0.0);
        }
        backprop_into(
            &cur_net,
            &trace,
            &dlogits,
            1.0,
            move_w.then_some(weight_grads.as_mut_slice()),
            move_x.then_some(input_grad.as_mut_slice()),
        );

        if move_x {
            for ((v, &g), &c) in cur_x.iter_mut().zip(&input_grad).zip(clean) {
                let mut next = *v + cfg.step_x * sign(g);
                if let Some((lo, hi)) = cfg.input_clamp {
                    next = next.clamp(lo, hi);
                }
                *v = clip_scalar(next, c, cfg.eps_x);
            }
        }
        if move_w {
            for ((w, g), w0) in cur_net
                .layers_mut()
                .iter_mut()
                .zip(&weight_grads)
                .zip(net.layers())
            {
                for ((v, &gv), &c) in w
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(w0.as_slice())
                {
                    *v = clip_scalar(*v + cfg.step_w * sign(gv), c, cfg.eps_w);
                }
            }
        }

        debug_assert!(cur_x
            .iter()
            .zip(clean)
            .all(|(a, b)| (a - b).abs() <= cfg.eps_x));
        debug_assert!(cur_net.layers().iter().zip(net.layers()).all(|(a, b)| a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(p, q)| (p - q).abs() <= cfg.eps_w)));

        observer(step, &cur_x, cur_net.layers());
    }

    let logits = cur_net.logits_raw(&cur_x);
    let (final_loss, _) = cross_entropy_with_grad(&logits, y);
    let attacked_prediction = argmax(&logits);
    Ok(AttackResult {
        perturbed_input: DenseVector::from_raw(cur_x),
        perturbed_weights: cur_net.into_layers(),
        final_loss,
        clean_prediction,
        attacked_prediction,
        prediction_flipped: attacked_prediction != clean_prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::cross_entropy;
    use crate::network::tests::net;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_to_ball(&[0.75], &[0.5], 0.1).unwrap(), vec![0.6]);
        assert_eq!(
            clip_to_ball(&[0.55, 0.45], &[0.5, 0.5], 0.1).unwrap(),
            vec![0.55, 0.45]
        );
        assert_eq!(
            clip_to_ball(&[0.9, -3.0], &[0.5, 0.25], 0.0).unwrap(),
            vec![0.5, 0.25]
        );
        assert!(clip_to_ball(&[0.9], &[0.5, 0.25], 0.1).is_err());
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = DenseMatrix::zeros(1, 2);
        assert_eq!(clip_matrix(&m, &c, 0.5).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_radius_attack_returns_clean_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Mlp::glorot(&[4, 6, 3], &mut rng).unwrap();
        let x = v(&[0.1, 0.2, 0.3, 0.4]);
        let res = pgd(
            &n,
            &x,
            1,
            &AttackConfig {
                steps: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(res.perturbed_input, x);
        assert_eq!(res.perturbed_weights, n.layers());
        assert_eq!(
            res.final_loss,
            cross_entropy(&n.forward(&x).unwrap(), 1).unwrap()
        );
        assert!(!res.prediction_flipped);
    }

    #[test]
    fn single_input_step() {
        // d ce / d x > 0 for y = 1: logits (x, −x), so raising x hurts class 1.
        let n = net(&[&[&[1.]], &[&[1.], &[-1.]]]);
        let cfg = AttackConfig {
            steps: 1,
            eps_x: 0.1,
            mode: AttackMode::InputOnly,
            ..Default::default()
        };
        let res = pgd(&n, &v(&[0.5]), 1, &cfg).unwrap();
        assert!((res.perturbed_input[0] - 0.51).abs() < 1e-15);
        assert_eq!(res.perturbed_weights, n.layers());
    }

    #[test]
    fn mode_isolation_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = Mlp::glorot(&[5, 7, 4], &mut rng).unwrap();
        let x = DenseVector::new((0..5).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let base = AttackConfig {
            steps: 20,
            eps_x: 0.2,
            eps_w: 0.05,
            step_w: 0.01,
            ..Default::default()
        };

        let input_only = pgd(
            &n,
            &x,
            2,
            &AttackConfig {
                mode: AttackMode::InputOnly,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(input_only.perturbed_weights, n.layers());
        let weight_only = pgd(
            &n,
            &x,
            2,
            &AttackConfig {
                mode: AttackMode::WeightOnly,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(weight_only.perturbed_input, x);

        let a = pgd(&n, &x, 2, &base).unwrap();
        let b = pgd(&n, &x, 2, &base).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn containment_holds_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = Mlp::glorot(&[6, 5, 3], &mut rng).unwrap();
        let x = DenseVector::new((0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let cfg = AttackConfig {
            steps: 30,
            eps_x: 0.05,
            eps_w: 0.003,
            ..Default::default()
        };
        let mut seen = 0;
        pgd_observed(&n, &x, 0, &cfg, |_, xt, wt| {
            seen += 1;
            for (a, b) in xt.iter().zip(x.as_slice()) {
                assert!((a - b).abs() <= cfg.eps_x && (0.0..=1.0).contains(a));
            }
            for (w, w0) in wt.iter().zip(n.layers()) {
                for (p, q) in w.as_slice().iter().zip(w0.as_slice()) {
                    assert!((p - q).abs() <= cfg.eps_w);
                }
            }
        })
        .unwrap();
        assert_eq!(seen, 30);
    }

    #[test]
    fn rejects_bad_config() {
        let n = net(&[&[&[1.]], &[&[1.], &[-1.]]]);
        let bad = AttackConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(pgd(&n, &v(&[0.5]), 0, &bad).is_err());
        let bad = AttackConfig {
            eps_x: -1.0,
            ..Default::default()
        };
        assert!(pgd(&n, &v(&[0.5]), 0, &bad).is_err());
        assert!("sideways".parse::<AttackMode>().is_err());
        assert_eq!("joint".parse::<AttackMode>().unwrap(), AttackMode::Joint);
    }
}
