//! Accuracy under joint PGD over a grid of input and weight radii.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, AttackMode};
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::network::Mlp;

/// `steps` evenly spaced values from 0 to `max` inclusive.
pub fn linspace(max: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps)
            .map(|k| max * k as f64 / (steps - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub eps_x_values: Vec<f64>,
    pub eps_w_values: Vec<f64>,
    pub attack: AttackConfig,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            eps_x_values: linspace(0.30, 7),
            eps_w_values: linspace(0.030, 7),
            attack: AttackConfig {
                mode: AttackMode::Joint,
                ..AttackConfig::default()
            },
            sample_count: 1000,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("eps_x", &self.eps_x_values), ("eps_w", &self.eps_w_values)] {
            let sorted = values.windows(2).all(|w| w[0] <= w[1]);
            let valid = values.iter().all(|v| v.is_finite() && *v >= 0.0);
            if values.first() != Some(&0.0) || !sorted || !valid {
                return Err(Error::InvalidConfig(format!(
                    "{name} grid must be nonempty, sorted, nonnegative and start at 0: {values:?}"
                )));
            }
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("sample_count must be positive".into()));
        }
        self.attack.validate()
    }

    pub fn cell_count(&self) -> usize {
        self.eps_x_values.len() * self.eps_w_values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub eps_x: f64,
    pub eps_w: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEvalResult {
    pub cells: Vec<GridCell>,
    pub auc: f64,
}

impl GridEvalResult {
    pub fn cell(&self, eps_x: f64, eps_w: f64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.eps_x == eps_x && c.eps_w == eps_w)
    }
}

/// Fraction of `data` still classified correctly after attacking each example
/// on its own, starting from the clean weights every time.
pub fn eval_cell(
    net: &Mlp,
    data: &Dataset,
    eps_x: f64,
    eps_w: f64,
    template: &AttackConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation subset"));
    }
    let cfg = template.with_radii(eps_x, eps_w);
    cfg.validate()?;
    let mut correct = 0usize;
    for ex in data.examples() {
        let prediction = if eps_x == 0.0 && eps_w == 0.0 {
            net.predict(&ex.x)?
        } else {
            pgd(net, &ex.x, ex.label, &cfg)?.attacked_prediction
        };
        if prediction == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `100 ×` the mean cell accuracy; every grid point must be present.
pub fn auc_score(cells: &[GridCell], spec: &GridSpec) -> Result<f64> {
    for &eps_x in &spec.eps_x_values {
        for &eps_w in &spec.eps_w_values {
            if !cells.iter().any(|c| c.eps_x == eps_x && c.eps_w == eps_w) {
                return Err(Error::InvalidConfig(format!(
                    "missing grid cell ({eps_x}, {eps_w})"
                )));
            }
        }
    }
    let mean = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
    Ok(100.0 * mean)
}

/// The seeded evaluation subset: `sample_count` examples drawn without
/// replacement (all of them if fewer).
pub fn sample_subset(data: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(count.min(data.len()));
    data.select(&indices)
}

pub fn run_grid(net: &Mlp, data: &Dataset, spec: &GridSpec) -> Result<GridEvalResult> {
    run_grid_observed(net, data, spec, |_| {})
}

/// Like [`run_grid`], reporting each cell as it finishes.
pub fn run_grid_observed<F>(
    net: &Mlp,
    data: &Dataset,
    spec: &GridSpec,
    mut on_cell: F,
) -> Result<GridEvalResult>
where
    F: FnMut(&GridCell),
{
    spec.validate()?;
    let subset = sample_subset(data, spec.sample_count, spec.seed)?;
    let mut cells = Vec::with_capacity(spec.cell_count());
    for &eps_x in &spec.eps_x_values {
        for &eps_w in &spec.eps_w_values {
            let accuracy = eval_cell(net, &subset, eps_x, eps_w, &spec.attack)?;
            let cell = GridCell {
                eps_x,
                eps_w,
                accuracy,
            };
            log::debug!("cell eps_x={eps_x} eps_w={eps_w}: {accuracy:.4}");
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let auc = auc_score(&cells, spec)?;
    Ok(GridEvalResult { cells, auc })
}
