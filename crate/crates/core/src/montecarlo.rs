//! Seeded Monte Carlo harness.
//!
//! Trial `t` draws from a ChaCha8 stream keyed by `(seed, t)`, so results do
//! not depend on how trials are scheduled across threads. Trial outputs are
//! reduced in index order.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{EnsembleModel, LinkDraws};
use crate::diffusion::{self, DiffusionConfig, NetworkState};
use crate::error::{Error, Result};

pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Runs `f(trial, rng)` for every trial and returns the outputs in trial order.
pub fn run_trials<T, F>(seed: u64, trials: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            f(t, &mut rng)
        })
        .collect()
}

/// Elementwise mean of equally long curves, summed in slice order.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for c in curves {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let n = curves.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// First index of the steady-state window (last `fraction` of `iterations`).
pub fn window_start(iterations: usize, fraction: f64) -> usize {
    let len = ((iterations as f64) * fraction).ceil() as usize;
    iterations - len.clamp(usize::from(iterations > 0), iterations)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
    pub steady_fraction: f64,
    /// Keep the trial-averaged error vector `w^o − w_i` at each step.
    pub track_mean: bool,
}

impl SimOptions {
    pub fn new(iterations: usize, trials: usize, seed: u64) -> Self {
        Self {
            iterations,
            trials,
            seed,
            steady_fraction: 0.1,
            track_mean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    /// Network MSD after step `i`, averaged over trials.
    pub msd: Vec<f64>,
    /// Network EMSE after step `i`, averaged over trials.
    pub emse: Vec<f64>,
    /// Per-node steady-state MSD and EMSE.
    pub node_msd: Vec<f64>,
    pub node_emse: Vec<f64>,
    pub msd_steady: f64,
    pub emse_steady: f64,
    /// Trials that tripped the divergence sentinel.
    pub diverged_trials: usize,
    /// Trial-averaged stacked error vector per step (only with `track_mean`).
    pub mean_error: Vec<DVector<f64>>,
}

struct Trial {
    msd: Vec<f64>,
    emse: Vec<f64>,
    node_msd: Vec<f64>,
    node_emse: Vec<f64>,
    diverged: bool,
    errors: Vec<DVector<f64>>,
}

fn stacked_error(state: &NetworkState, wo: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(state.n * state.m, |r, _| wo[r % state.m] - state.w[r])
}

/// Simulates adaptive diffusion (or consensus / smoothing, per `cfg`) from `w = 0`.
/// A diverged trial records +inf for every remaining step.
pub fn simulate(model: &EnsembleModel, cfg: &DiffusionConfig, opts: &SimOptions) -> Result<SimulationResult> {
    if opts.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if model.n() != cfg.n() {
        return Err(Error::Validation("model and strategy disagree on N".into()));
    }
    let (n, m) = (model.n(), model.m());
    let start = window_start(opts.iterations, opts.steady_fraction);
    let wo = model.wo().clone();

    let trials: Vec<Result<Trial>> = run_trials(opts.seed, opts.trials, |_, rng| {
        let mut state = NetworkState::for_config(cfg, m)?;
        let mut draws = cfg.link_noise.as_ref().map(|_| LinkDraws::zeros(n, m));
        let mut t = Trial {
            msd: Vec::with_capacity(opts.iterations),
            emse: Vec::with_capacity(opts.iterations),
            node_msd: vec![0.0; n],
            node_emse: vec![0.0; n],
            diverged: false,
            errors: Vec::new(),
        };
        for i in 0..opts.iterations {
            if !t.diverged {
                let snap = model.sample_snapshot(rng);
                if let (Some(lm), Some(d)) = (cfg.link_noise.as_ref(), draws.as_mut()) {
                    lm.sample_into(rng, d);
                }
                let prev = state.clone();
                diffusion::adaptive_step(&mut state, cfg, &snap, draws.as_ref())?;
                if state.diverged(&wo) {
                    t.diverged = true;
                    state = prev;
                }
            }
            let (msd, emse) = if t.diverged {
                (f64::INFINITY, f64::INFINITY)
            } else {
                (state.msd(&wo), state.emse(model))
            };
            t.msd.push(msd);
            t.emse.push(emse);
            if i >= start {
                for k in 0..n {
                    t.node_msd[k] += state.node_msd(k, &wo);
                    t.node_emse[k] += state.node_emse(k, model);
                }
            }
            if opts.track_mean {
                t.errors.push(stacked_error(&state, &wo));
            }
        }
        let len = (opts.iterations - start).max(1) as f64;
        t.node_msd.iter_mut().for_each(|x| *x /= len);
        t.node_emse.iter_mut().for_each(|x| *x /= len);
        Ok(t)
    });
    let trials: Vec<Trial> = trials.into_iter().collect::<Result<_>>()?;

    let msd = mean_curve(&trials.iter().map(|t| t.msd.clone()).collect::<Vec<_>>());
    let emse = mean_curve(&trials.iter().map(|t| t.emse.clone()).collect::<Vec<_>>());
    let node_msd = mean_curve(&trials.iter().map(|t| t.node_msd.clone()).collect::<Vec<_>>());
    let node_emse = mean_curve(&trials.iter().map(|t| t.node_emse.clone()).collect::<Vec<_>>());
    let window_mean = |c: &[f64]| {
        if c.len() > start {
            c[start..].iter().sum::<f64>() / (c.len() - start) as f64
        } else {
            f64::NAN
        }
    };
    let mut mean_error = Vec::new();
    if opts.track_mean {
        for i in 0..opts.iterations {
            let mut acc = DVector::zeros(n * m);
            for t in &trials {
                acc += &t.errors[i];
            }
            mean_error.push(acc / opts.trials as f64);
        }
    }
    Ok(SimulationResult {
        msd_steady: window_mean(&msd),
        emse_steady: window_mean(&emse),
        msd,
        emse,
        node_msd,
        node_emse,
        diverged_trials: trials.iter().filter(|t| t.diverged).count(),
        mean_error,
    })
}
