//! Diffusion Kalman filtering for the state-space model
//! `x_{i+1} = F_i x_i + G_i n_i`, `y_{k,i} = H_{k,i} x_i + v_{k,i}`.
//!
//! Every node first absorbs the measurements of its neighbourhood, either
//! one neighbour at a time ([`dkf_tm_step`]) or in information form
//! ([`dkf_info_step`]), then combines the neighbours' intermediate estimates
//! and predicts forward.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::linalg;
use crate::montecarlo;

/// Model matrices at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Per node, `p×n`.
    pub h: Vec<DMatrix<f64>>,
    /// Per node, `p×p`, positive-definite.
    pub r: Vec<DMatrix<f64>>,
}

impl SystemMatrices {
    fn validate(&self, n: usize) -> Result<()> {
        if self.f.shape() != (n, n) {
            return Err(Error::Validation(format!("F must be {n}×{n}")));
        }
        if self.g.nrows() != n || self.q.shape() != (self.g.ncols(), self.g.ncols()) {
            return Err(Error::Validation("G and Q have inconsistent shapes".into()));
        }
        if self.h.len() != self.r.len() {
            return Err(Error::Validation("one H and one R per node required".into()));
        }
        if linalg::min_sym_eigenvalue(&self.q) < -1e-12 * self.q.amax().max(1.0) {
            return Err(Error::Validation("Q must be nonnegative-definite".into()));
        }
        for (k, (h, r)) in self.h.iter().zip(&self.r).enumerate() {
            if h.ncols() != n || r.shape() != (h.nrows(), h.nrows()) {
                return Err(Error::Validation(format!("H/R shapes at node {k} are inconsistent")));
            }
            if !linalg::is_symmetric(r, 1e-12) || r.clone().cholesky().is_none() {
                return Err(Error::Validation(format!("R at node {k} must be positive-definite")));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.h.len()
    }
}

/// Source of the model matrices at time `i`.
#[derive(Clone)]
pub enum Provider {
    Constant(SystemMatrices),
    TimeVarying(Arc<dyn Fn(usize) -> SystemMatrices + Send + Sync>),
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provider::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Provider::TimeVarying(_) => f.write_str("TimeVarying(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub state_dim: usize,
    pub pi0: DMatrix<f64>,
    pub provider: Provider,
}

impl StateSpaceModel {
    pub fn constant(sys: SystemMatrices, pi0: DMatrix<f64>) -> Result<Self> {
        let n = sys.f.nrows();
        sys.validate(n)?;
        Self::check_pi0(&pi0, n)?;
        Ok(Self {
            state_dim: n,
            pi0,
            provider: Provider::Constant(sys),
        })
    }

    pub fn time_varying(state_dim: usize, pi0: DMatrix<f64>, f: Arc<dyn Fn(usize) -> SystemMatrices + Send + Sync>) -> Result<Self> {
        Self::check_pi0(&pi0, state_dim)?;
        Ok(Self {
            state_dim,
            pi0,
            provider: Provider::TimeVarying(f),
        })
    }

    fn check_pi0(pi0: &DMatrix<f64>, n: usize) -> Result<()> {
        if pi0.shape() != (n, n) || !linalg::is_symmetric(pi0, 1e-12) || pi0.clone().cholesky().is_none() {
            return Err(Error::Validation("Π₀ must be a symmetric positive-definite n×n matrix".into()));
        }
        Ok(())
    }

    pub fn matrices(&self, i: usize) -> Result<Cow<'_, SystemMatrices>> {
        match &self.provider {
            Provider::Constant(m) => Ok(Cow::Borrowed(m)),
            Provider::TimeVarying(f) => {
                let m = f(i);
                m.validate(self.state_dim)?;
                Ok(Cow::Owned(m))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfNodeState {
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub x_filt: DVector<f64>,
    pub p_filt: DMatrix<f64>,
    /// Time index of the next measurement.
    pub i: usize,
}

impl KfNodeState {
    pub fn new(model: &StateSpaceModel) -> Self {
        let n = model.state_dim;
        Self {
            x_pred: DVector::zeros(n),
            p_pred: model.pi0.clone(),
            x_filt: DVector::zeros(n),
            p_filt: model.pi0.clone(),
            i: 0,
        }
    }
}

pub fn init_states(model: &StateSpaceModel, nodes: usize) -> Vec<KfNodeState> {
    vec![KfNodeState::new(model); nodes]
}

fn spd_inverse(x: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    x.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive-definite")))
}

fn check_step(states: &[KfNodeState], sys: &SystemMatrices, t: &Topology, y: &[DVector<f64>]) -> Result<()> {
    let n = states.len();
    if sys.nodes() != n || t.n() != n || y.len() != n {
        return Err(Error::Validation("Kalman inputs disagree on the number of nodes".into()));
    }
    for (k, yk) in y.iter().enumerate() {
        if yk.len() != sys.h[k].nrows() {
            return Err(Error::Validation(format!("measurement at node {k} has the wrong length")));
        }
    }
    Ok(())
}

/// Sequential measurement update over `N_k` in ascending order.
fn incremental_tm(st: &KfNodeState, sys: &SystemMatrices, hood: &[usize], y: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut psi = st.x_pred.clone();
    let mut p = st.p_pred.clone();
    for &l in hood {
        let h = &sys.h[l];
        let re = &sys.r[l] + h * &p * h.transpose();
        let re_inv = spd_inverse(&re, "R_e")?;
        let gain = &p * h.transpose() * re_inv;
        psi += &gain * (&y[l] - h * &psi);
        p -= &gain * h * &p;
        linalg::symmetrize(&mut p);
    }
    Ok((psi, p))
}

fn incremental_info(st: &KfNodeState, sys: &SystemMatrices, hood: &[usize], y: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = st.x_pred.len();
    let mut s = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for &l in hood {
        let ht_rinv = sys.h[l].transpose() * spd_inverse(&sys.r[l], "R")?;
        s += &ht_rinv * &sys.h[l];
        q += &ht_rinv * &y[l];
    }
    let pinv = spd_inverse(&st.p_pred, "P_{i|i−1}")? + &s;
    let mut p = spd_inverse(&pinv, "P_{i|i}⁻¹")?;
    linalg::symmetrize(&mut p);
    let psi = &st.x_pred + &p * (q - s * &st.x_pred);
    Ok((psi, p))
}

fn time_update(st: &mut KfNodeState, sys: &SystemMatrices, x_filt: DVector<f64>, p_filt: DMatrix<f64>) {
    st.x_pred = &sys.f * &x_filt;
    let mut p = &sys.f * &p_filt * sys.f.transpose() + &sys.g * &sys.q * sys.g.transpose();
    linalg::symmetrize(&mut p);
    st.x_filt = x_filt;
    st.p_filt = p_filt;
    st.p_pred = p;
    st.i += 1;
}

/// How intermediate estimates are fused across a neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion<'a> {
    /// `x̂_k = Σ_ℓ a_ℓk ψ_ℓ` with left-stochastic `A`.
    Diffusion(&'a DMatrix<f64>),
    /// Consensus weights `1 + ε − n_kε` (self) and `ε` (neighbours).
    Consensus(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    TimeMeasurement,
    Information,
}

/// One incremental-plus-fusion step in either form.
pub fn dkf_step(
    states: &mut [KfNodeState],
    model: &StateSpaceModel,
    t: &Topology,
    fusion: Fusion<'_>,
    form: Form,
    y: &[DVector<f64>],
) -> Result<()> {
    let i = states.first().map_or(0, |s| s.i);
    let sys = model.matrices(i)?;
    check_step(states, &sys, t, y)?;
    let mut psis = Vec::with_capacity(states.len());
    let mut ps = Vec::with_capacity(states.len());
    for (k, st) in states.iter().enumerate() {
        let (psi, p) = match form {
            Form::TimeMeasurement => incremental_tm(st, &sys, t.neighborhood(k), y)?,
            Form::Information => incremental_info(st, &sys, t.neighborhood(k), y)?,
        };
        psis.push(psi);
        ps.push(p);
    }
    let fused = match fusion {
        Fusion::Diffusion(a) => diffusion_combine(&psis, t, a)?,
        Fusion::Consensus(eps) => ckf_combine(&psis, t, eps)?,
    };
    for ((st, x), p) in states.iter_mut().zip(fused).zip(ps) {
        time_update(st, &sys, x, p);
    }
    Ok(())
}

pub fn dkf_tm_step(states: &mut [KfNodeState], model: &StateSpaceModel, t: &Topology, a: &DMatrix<f64>, y: &[DVector<f64>]) -> Result<()> {
    dkf_step(states, model, t, Fusion::Diffusion(a), Form::TimeMeasurement, y)
}

pub fn dkf_info_step(states: &mut [KfNodeState], model: &StateSpaceModel, t: &Topology, a: &DMatrix<f64>, y: &[DVector<f64>]) -> Result<()> {
    dkf_step(states, model, t, Fusion::Diffusion(a), Form::Information, y)
}

pub fn diffusion_combine(psi: &[DVector<f64>], t: &Topology, a: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let n = psi.len();
    if a.shape() != (n, n) || t.n() != n {
        return Err(Error::Validation("combination matrix does not match the network".into()));
    }
    Ok((0..n)
        .map(|k| {
            let mut x = DVector::zeros(psi[k].len());
            for &l in t.neighborhood(k) {
                if a[(l, k)] != 0.0 {
                    x += &psi[l] * a[(l, k)];
                }
            }
            x
        })
        .collect())
}

/// Consensus combination weights as a left-stochastic matrix.
pub fn ckf_weights(t: &Topology, eps: f64) -> Result<DMatrix<f64>> {
    let n = t.n();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let self_w = 1.0 + eps - t.degree(k) as f64 * eps;
        if self_w < 0.0 {
            return Err(Error::Precondition(format!(
                "ε = {eps} gives negative self-weight {self_w} at node {k}"
            )));
        }
        for &l in t.neighborhood(k) {
            a[(l, k)] = if l == k { self_w } else { eps };
        }
    }
    Ok(a)
}

/// `x̂_k = (1 + ε − n_kε) ψ_k + ε Σ_{ℓ∈N_k∖k} ψ_ℓ`.
pub fn ckf_combine(psi: &[DVector<f64>], t: &Topology, eps: f64) -> Result<Vec<DVector<f64>>> {
    let a = ckf_weights(t, eps)?;
    diffusion_combine(psi, t, &a)
}

/// Covariance-form filter over the stacked measurements of all nodes.
pub fn centralized_kf_step(state: &mut KfNodeState, model: &StateSpaceModel, y: &[DVector<f64>]) -> Result<()> {
    let sys = model.matrices(state.i)?;
    if y.len() != sys.nodes() {
        return Err(Error::Validation("one measurement per node required".into()));
    }
    let n = model.state_dim;
    let (x, p) = if sys.nodes() == 0 {
        (state.x_pred.clone(), state.p_pred.clone())
    } else {
        let h = stack_rows(&sys.h, n);
        let r = linalg::block_diag(&sys.r);
        let ystack = DVector::from_iterator(h.nrows(), y.iter().flat_map(|v| v.iter().copied()));
        if ystack.len() != h.nrows() {
            return Err(Error::Validation("measurement lengths do not match H".into()));
        }
        let re = &r + &h * &state.p_pred * h.transpose();
        let gain = &state.p_pred * h.transpose() * spd_inverse(&re, "R_e")?;
        let x = &state.x_pred + &gain * (ystack - &h * &state.x_pred);
        let mut p = &state.p_pred - &gain * &h * &state.p_pred;
        linalg::symmetrize(&mut p);
        (x, p)
    };
    time_update(state, &sys, x, p);
    Ok(())
}

fn stack_rows(blocks: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, n);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), n)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Filtered-estimate tracking error `E‖x_i − x̂_{k,i|i}‖²` averaged over nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingCurves {
    pub diffusion: Vec<f64>,
    pub consensus: Vec<f64>,
    pub centralized: Vec<f64>,
}

fn gaussian<R: Rng + ?Sized>(sqrt_cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(sqrt_cov.ncols(), |_, _| StandardNormal.sample(rng));
    sqrt_cov * z
}

/// Monte Carlo comparison of diffusion fusion with `A`, consensus fusion with
/// `ε` and the centralized filter, all on the same simulated trajectories.
pub fn simulate_tracking(
    model: &StateSpaceModel,
    t: &Topology,
    a: &DMatrix<f64>,
    eps: f64,
    iterations: usize,
    trials: usize,
    seed: u64,
) -> Result<TrackingCurves> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    ckf_weights(t, eps)?;
    let nodes = t.n();
    let pi0_sqrt = linalg::psd_sqrt(&model.pi0)?;
    let runs = montecarlo::run_trials(seed, trials, |_, rng| -> Result<_> {
        let mut x = gaussian(&pi0_sqrt, rng);
        let mut dif = init_states(model, nodes);
        let mut con = init_states(model, nodes);
        let mut cen = KfNodeState::new(model);
        let (mut e1, mut e2, mut e3) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..iterations {
            let sys = model.matrices(i)?;
            if sys.nodes() != nodes {
                return Err(Error::Validation("model and topology disagree on the number of nodes".into()));
            }
            let mut y = Vec::with_capacity(nodes);
            for k in 0..nodes {
                let v = gaussian(&linalg::psd_sqrt(&sys.r[k])?, rng);
                y.push(&sys.h[k] * &x + v);
            }
            dkf_step(&mut dif, model, t, Fusion::Diffusion(a), Form::TimeMeasurement, &y)?;
            dkf_step(&mut con, model, t, Fusion::Consensus(eps), Form::TimeMeasurement, &y)?;
            centralized_kf_step(&mut cen, model, &y)?;
            let avg = |s: &[KfNodeState]| s.iter().map(|n| (&x - &n.x_filt).norm_squared()).sum::<f64>() / nodes as f64;
            e1.push(avg(&dif));
            e2.push(avg(&con));
            e3.push((&x - &cen.x_filt).norm_squared());
            let w = gaussian(&linalg::psd_sqrt(&sys.q)?, rng);
            x = &sys.f * &x + &sys.g * w;
        }
        Ok((e1, e2, e3))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        montecarlo::mean_curve(&runs.iter().map(|r| f(r).clone()).collect::<Vec<_>>())
    };
    Ok(TrackingCurves {
        diffusion: mean(|r| &r.0),
        consensus: mean(|r| &r.1),
        centralized: mean(|r| &r.2),
    })
}
