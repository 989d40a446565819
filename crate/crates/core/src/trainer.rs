//! Mini-batch Adam over the five training regimes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, AttackMode};
use crate::bounds::PerturbationBudget;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::loss::{
    add_regularizer_grads, backprop_into, cross_entropy_with_grad, zero_grads, LossConfig,
};
use crate::mnist::{Dataset, Example};
use crate::network::Mlp;

pub const MNIST_DIMS: [usize; 5] = [784, 128, 64, 32, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    WeightPerturb,
    At,
    AtBeta,
    Jiwp,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Standard,
        Regime::WeightPerturb,
        Regime::At,
        Regime::AtBeta,
        Regime::Jiwp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::WeightPerturb => "weight_perturb",
            Regime::At => "at",
            Regime::AtBeta => "at_beta",
            Regime::Jiwp => "jiwp",
        }
    }

    /// Whether the regime trains on PGD examples.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Regime::At | Regime::AtBeta | Regime::Jiwp)
    }

    fn inner_mode(self) -> AttackMode {
        match self {
            Regime::Jiwp => AttackMode::Joint,
            _ => AttackMode::InputOnly,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s || r.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub layer_dims: Vec<usize>,
    pub loss_cfg: LossConfig,
    pub inner_attack: AttackConfig,
    pub adam: AdamParams,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Inner PGD step for a radius and step count.
pub fn inner_step(eps: f64, steps: usize) -> f64 {
    2.5 * eps / steps as f64
}

impl TrainConfig {
    /// A config for `regime` with the given loss weights and training radii.
    /// `eps_train_x` drives the inner attack; `eps_train_w` sets every layer
    /// of the regularizer budget (and the inner weight radius for JIWP).
    pub fn for_regime(
        regime: Regime,
        alpha: f64,
        beta: f64,
        eps_train_x: f64,
        eps_train_w: f64,
        layer_dims: Vec<usize>,
    ) -> Result<Self> {
        let depth = layer_dims.len().saturating_sub(1);
        let budget = PerturbationBudget::uniform(eps_train_x, eps_train_w, depth)?;
        let steps = 10;
        let inner_attack = AttackConfig {
            steps,
            step_x: inner_step(eps_train_x, steps),
            step_w: inner_step(eps_train_w, steps),
            eps_x: if regime.is_adversarial() {
                eps_train_x
            } else {
                0.0
            },
            eps_w: if regime == Regime::Jiwp {
                eps_train_w
            } else {
                0.0
            },
            mode: regime.inner_mode(),
            input_clamp: Some((0.0, 1.0)),
        };
        let cfg = Self {
            regime,
            layer_dims,
            loss_cfg: LossConfig::new(alpha, beta, budget)?,
            inner_attack,
            adam: AdamParams::default(),
            batch_size: 50,
            epochs: 300,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Standard CE training.
    pub fn standard() -> Self {
        Self::for_regime(Regime::Standard, 0.0, 0.0, 0.0, 0.0, MNIST_DIMS.to_vec())
            .expect("static config")
    }

    /// `α = β = 0.25`, `ε_w = 0.01`, clean inputs.
    pub fn weight_perturb() -> Self {
        Self::for_regime(
            Regime::WeightPerturb,
            0.25,
            0.25,
            0.0,
            0.01,
            MNIST_DIMS.to_vec(),
        )
        .expect("static config")
    }

    /// Input-only min-max training at `ε_x = 0.09`.
    pub fn at() -> Self {
        Self::for_regime(Regime::At, 0.0, 0.0, 0.09, 0.0, MNIST_DIMS.to_vec())
            .expect("static config")
    }

    /// Min-max training plus `β max ζ`; `ε_w` for ζ is 0.01.
    pub fn at_beta(beta: f64, eps_train_x: f64) -> Result<Self> {
        Self::for_regime(
            Regime::AtBeta,
            0.0,
            beta,
            eps_train_x,
            0.01,
            MNIST_DIMS.to_vec(),
        )
    }

    pub fn at_beta_1() -> Self {
        Self::at_beta(0.0003, 0.08).expect("static config")
    }

    pub fn at_beta_2() -> Self {
        Self::at_beta(0.005, 0.03).expect("static config")
    }

    /// `α = β = 0.02`, `ε_w = 0.02`, `ε_x = 0.3`.
    pub fn jiwp() -> Self {
        Self::for_regime(Regime::Jiwp, 0.02, 0.02, 0.3, 0.02, MNIST_DIMS.to_vec())
            .expect("static config")
    }

    pub fn depth(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layer_dims.len() < 3 || self.layer_dims.contains(&0) {
            return bad(format!(
                "need at least two nonempty layers, got {:?}",
                self.layer_dims
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                a.learning_rate
            ));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("bad Adam moments {a:?}"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        self.inner_attack.validate()?;
        if self.loss_cfg.budget.eps_layers.len() != self.depth() {
            return bad(format!(
                "budget has {} layer radii for a depth-{} network",
                self.loss_cfg.budget.eps_layers.len(),
                self.depth()
            ));
        }
        let (alpha, beta) = (self.loss_cfg.alpha, self.loss_cfg.beta);
        match self.regime {
            Regime::Standard | Regime::At if alpha != 0.0 || beta != 0.0 => {
                bad(format!("{} requires alpha = beta = 0", self.regime.name()))
            }
            Regime::AtBeta if alpha != 0.0 => bad("at_beta requires alpha = 0".into()),
            Regime::Standard | Regime::WeightPerturb if self.inner_attack.eps_x != 0.0 => {
                bad(format!("{} trains on clean inputs", self.regime.name()))
            }
            Regime::Standard if !self.loss_cfg.budget.is_zero() => {
                bad("standard takes no training radii".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<DenseMatrix>,
    pub second_moment: Vec<DenseMatrix>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self {
            first_moment: zero_grads(net),
            second_moment: zero_grads(net),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    net: &mut Mlp,
    grads: &[DenseMatrix],
    state: &mut AdamState,
    params: &AdamParams,
) -> Result<()> {
    let shapes_ok = net.same_shape(grads)
        && net.same_shape(&state.first_moment)
        && net.same_shape(&state.second_moment);
    if !shapes_ok {
        return Err(Error::DimensionMismatch {
            context: "adam gradient shapes",
            expected: net.parameter_count(),
            found: grads.iter().map(|g| g.rows() * g.cols()).sum(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    let layers = net.layers_mut().iter_mut();
    for (((w, g), m), v) in layers
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let w = w.as_mut_slice().iter_mut();
        let m = m.as_mut_slice().iter_mut();
        let v = v.as_mut_slice().iter_mut();
        for (((w, &g), m), v) in w.zip(g.as_slice()).zip(m).zip(v) {
            *m = params.beta1 * *m + (1.0 - params.beta1) * g;
            *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
            *w -= params.learning_rate * (*m / c1) / ((*v / c2).sqrt() + params.eps);
        }
    }
    Ok(())
}

/// Mean training loss over `batch` and its weight gradient.
pub fn make_batch_loss(
    net: &Mlp,
    batch: &[Example],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<DenseMatrix>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    cfg.loss_cfg.budget.check_for(net)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = zero_grads(net);
    let mut scratch = vec![0.0; net.input_dim()];
    let mut total = 0.0;
    let attack = cfg.regime.is_adversarial() && cfg.inner_attack.eps_x > 0.0;
    let regularized = !cfg.loss_cfg.is_unregularized();

    for ex in batch {
        net.check_input(&ex.x)?;
        net.check_class(ex.label)?;
        let adv;
        let x_train: &[f64] = if attack {
            adv = pgd(net, &ex.x, ex.label, &cfg.inner_attack)?.perturbed_input;
            adv.as_slice()
        } else {
            ex.x.as_slice()
        };
        let trace = net.forward_trace(x_train);
        let (ce, dlogits) = cross_entropy_with_grad(&trace.logits, ex.label);
        backprop_into(net, &trace, &dlogits, scale, Some(&mut grads), None);
        total += ce;
        if regularized {
            let x_reg = match cfg.regime {
                Regime::AtBeta => ex.x.as_slice(),
                _ => x_train,
            };
            total += add_regularizer_grads(
                net,
                x_reg,
                ex.label,
                &cfg.loss_cfg,
                scale,
                &mut grads,
                &mut scratch,
            )?;
        }
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
}

/// Fraction of `data` classified correctly by `net`.
pub fn accuracy(net: &Mlp, data: &Dataset) -> f64 {
    let correct = data
        .examples()
        .iter()
        .filter(|ex| net.predict_raw(ex.x.as_slice()) == ex.label)
        .count();
    correct as f64 / data.len() as f64
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let input = cfg.layer_dims[0];
    let classes = *cfg.layer_dims.last().expect("validated");
    if data.input_dim() != input {
        return Err(Error::DimensionMismatch {
            context: "training input",
            expected: input,
            found: data.input_dim(),
        });
    }
    if let Some(ex) = data.examples().iter().find(|ex| ex.label >= classes) {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: ex.label,
            bound: classes,
        });
    }
    Ok(())
}

/// Trains a freshly initialized network.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<Mlp> {
    train_observed(data, cfg, |_| {})
}

/// Like [`train`], handing each epoch's metrics to `on_epoch`.
pub fn train_observed<F>(data: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<Mlp>
where
    F: FnMut(&EpochMetrics),
{
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::glorot(&cfg.layer_dims, &mut rng)?;
    let mut state = AdamState::new(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data.examples()[i].clone()));
            let (loss, grads) = make_batch_loss(&net, &batch, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss",
                    value: loss,
                });
            }
            adam_step(&mut net, &grads, &mut state, &cfg.adam)?;
            loss_sum += loss;
            batches += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            clean_acc: accuracy(&net, data),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5}, clean acc {:.4}",
            cfg.regime.name(),
            metrics.train_loss,
            metrics.clean_acc
        );
        on_epoch(&metrics);
    }
    Ok(net)
}
