#![allow(dead_code)]

use std::path::PathBuf;

use nonsing::linalg::{DenseMatrix, DenseVector};
use nonsing::network::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Where a scalar function is evaluated: one weight entry or one input entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Weight {
        layer: usize,
        row: usize,
        col: usize,
    },
    Input(usize),
}

pub fn shift(net: &Mlp, x: &DenseVector, coord: Coord, delta: f64) -> (Mlp, DenseVector) {
    match coord {
        Coord::Weight { layer, row, col } => {
            let mut layers: Vec<DenseMatrix> = net.layers().to_vec();
            let w = &mut layers[layer];
            w.set(row, col, w.get(row, col) + delta);
            (Mlp::new(layers).unwrap(), x.clone())
        }
        Coord::Input(k) => {
            let mut x = x.clone();
            x.as_mut_slice()[k] += delta;
            (net.clone(), x)
        }
    }
}

pub enum FdOutcome {
    /// Central difference, analytic value.
    Compared { numeric: f64, analytic: f64 },
    /// One-sided differences disagree: a kink sits within `h`.
    Kink,
}

impl FdOutcome {
    pub fn agrees(&self) -> Option<bool> {
        match *self {
            FdOutcome::Compared { numeric, analytic } => {
                let scale = numeric.abs().max(analytic.abs());
                Some((numeric - analytic).abs() <= FD_REL_TOL * scale + FD_ABS_FLOOR)
            }
            FdOutcome::Kink => None,
        }
    }
}

/// Central difference of `f` along `coord`, with kink detection from the
/// one-sided quotients.
pub fn check<F>(net: &Mlp, x: &DenseVector, coord: Coord, analytic: f64, f: F) -> FdOutcome
where
    F: Fn(&Mlp, &DenseVector) -> f64,
{
    let h = FD_STEP;
    let f0 = f(net, x);
    let (np, xp) = shift(net, x, coord, h);
    let (nm, xm) = shift(net, x, coord, -h);
    let (fp, fm) = (f(&np, &xp), f(&nm, &xm));
    let forward = (fp - f0) / h;
    let backward = (f0 - fm) / h;
    let scale = forward.abs().max(backward.abs());
    if (forward - backward).abs() > 1e-3 * scale + 1e-6 {
        return FdOutcome::Kink;
    }
    FdOutcome::Compared {
        numeric: (fp - fm) / (2.0 * h),
        analytic,
    }
}

pub fn random_coord(net: &Mlp, rng: &mut ChaCha8Rng) -> Coord {
    let inputs = net.input_dim();
    let total = net.parameter_count() + inputs;
    let mut k = rng.gen_range(0..total);
    if k < inputs {
        return Coord::Input(k);
    }
    k -= inputs;
    for (layer, w) in net.layers().iter().enumerate() {
        let n = w.rows() * w.cols();
        if k < n {
            return Coord::Weight {
                layer,
                row: k / w.cols(),
                col: k % w.cols(),
            };
        }
        k -= n;
    }
    unreachable!()
}

pub fn random_input(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> DenseVector {
    DenseVector::new((0..dim).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// A net with random depth in `depths` and widths in `1..=max_width`; at
/// least two classes.
pub fn random_net(rng: &mut ChaCha8Rng, depths: &[usize], max_width: usize) -> Mlp {
    let depth = depths[rng.gen_range(0..depths.len())];
    let mut dims: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=max_width)).collect();
    dims.push(rng.gen_range(2..=max_width.max(2)));
    let mut net = Mlp::glorot(&dims, rng).unwrap();
    // Spread weights beyond the Glorot range so bounds see varied norms.
    let scale = rng.gen_range(0.5..2.0);
    let layers = net
        .layers()
        .iter()
        .map(|w| {
            DenseMatrix::new(
                w.rows(),
                w.cols(),
                w.as_slice().iter().map(|v| v * scale).collect(),
            )
            .unwrap()
        })
        .collect();
    net = Mlp::new(layers).unwrap();
    net
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mnist_dir() -> PathBuf {
    nonsing::mnist::data_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
