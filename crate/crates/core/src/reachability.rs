//! Monte-Carlo cover rates of reachable sets and the translation rules for
//! the triple integrator.

use nalgebra::SVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::state::State9;
use crate::trajgen::{bvp_feasible, ConstraintSet};

/// Gaussian over the 9-dimensional state with diagonal covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: State9,
    pub var: SVector<f64, 9>,
}

impl GaussianSpec {
    pub fn new(mean: State9, var: SVector<f64, 9>) -> Self {
        Self { mean, var }
    }

    pub fn dirac(mean: State9) -> Self {
        Self::new(mean, SVector::zeros())
    }

    pub fn is_valid(&self) -> bool {
        self.var.iter().all(|v| *v >= 0.0 && v.is_finite()) && self.mean.is_finite()
    }

    /// Same spread, mean moved by `delta`.
    pub fn shifted(&self, delta: &State9) -> Self {
        Self::new(self.mean + *delta, self.var)
    }

    /// Mean plus a standard-normal draw per coordinate scaled by the standard
    /// deviation. The noise is drawn for every coordinate, including those
    /// with zero variance, so the stream consumption is fixed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State9 {
        let mut noise = SVector::<f64, 9>::zeros();
        for i in 0..9 {
            let z: f64 = rng.sample(StandardNormal);
            noise[i] = self.var[i].sqrt() * z;
        }
        self.mean + State9::from_vector(&noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverEstimate {
    pub value: f64,
    pub samples: usize,
    pub stderr: f64,
}

impl CoverEstimate {
    fn binomial(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            value: p,
            samples: n,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

/// Noise draws for `n` target samples of `seed`; shared by every start
/// state evaluated with that seed.
fn target_samples(target: &GaussianSpec, n: usize, seed: u64) -> Vec<State9> {
    (0..n)
        .into_par_iter()
        .map(|i| target.sample(&mut rng::stream(seed, i as u64)))
        .collect()
}

fn count_reachable(x0: &State9, t: f64, samples: &[State9], c: &ConstraintSet) -> usize {
    samples
        .par_iter()
        .map(|s| bvp_feasible(x0, s, t, c) as usize)
        .sum()
}

/// Fraction of `n` draws from `target` that can be reached from `x0` in
/// exactly `t` seconds by a feasible quintic.
pub fn cover_rate(
    x0: &State9,
    t: f64,
    target: &GaussianSpec,
    c: &ConstraintSet,
    n: usize,
    seed: u64,
) -> CoverEstimate {
    let n = n.max(1);
    let samples = target_samples(target, n, seed);
    CoverEstimate::binomial(count_reachable(x0, t, &samples, c), n)
}

/// Cover rate averaged over start states drawn from `N(x0, start_var)`.
///
/// Every start state is scored against the same `n_inner` target draws, so
/// a zero start variance reproduces [`cover_rate`] exactly and candidates
/// evaluated with one seed share their random numbers.
#[allow(clippy::too_many_arguments)]
pub fn expected_cover(
    x0: &State9,
    t: f64,
    target: &GaussianSpec,
    start_var: &SVector<f64, 9>,
    c: &ConstraintSet,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> CoverEstimate {
    let n_outer = n_outer.max(1);
    let n_inner = n_inner.max(1);
    let inner = target_samples(target, n_inner, seed);
    let start = GaussianSpec::new(*x0, *start_var);
    let outer_seed = rng::derive_seed(seed, 1);
    let rates: Vec<f64> = (0..n_outer)
        .into_par_iter()
        .map(|j| {
            let x = if start_var.iter().all(|v| *v == 0.0) {
                *x0
            } else {
                start.sample(&mut rng::stream(outer_seed, j as u64))
            };
            count_reachable(&x, t, &inner, c) as f64 / n_inner as f64
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / n_outer as f64;
    let outer_var = if n_outer > 1 {
        rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n_outer - 1) as f64
    } else {
        0.0
    };
    CoverEstimate {
        value: mean,
        samples: n_outer * n_inner,
        stderr: (outer_var / n_outer as f64 + mean * (1.0 - mean) / n_inner as f64).sqrt(),
    }
}

/// Start-state shift that carries the reachable set of horizon `t` onto a
/// terminal shift: `e^{-A t} dx_t`.
pub fn translate_pair(xt_shift: &State9, t: f64) -> State9 {
    xt_shift.flow(-t)
}

/// Moves a waypoint that was optimal for `xt_old` so that it serves
/// `xt_new`, `horizon` seconds ahead of the terminal.
pub fn transform_waypoint(w: &State9, xt_old: &State9, xt_new: &State9, horizon: f64) -> State9 {
    *w + translate_pair(&(*xt_new - *xt_old), horizon)
}
