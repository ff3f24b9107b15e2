//! Iterative network strategies.
//!
//! Every diffusion variant is an instance of the general three-step form
//!
//! ```text
//! φ_k = Σ_ℓ a1_ℓk w_ℓ
//! ψ_k = φ_k + μ_k Σ_ℓ c_ℓk u_ℓᵀ (d_ℓ − u_ℓ φ_k)
//! w_k = Σ_ℓ a2_ℓk ψ_ℓ
//! ```
//!
//! with ATC, CTA and non-cooperative LMS obtained by fixing some of the
//! matrices to the identity. The network state is a stacked vector of `N`
//! blocks of length `M`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::combiners::VarianceProductState;
use crate::datamodel::{EnsembleModel, LinkDraws, LinkNoiseModel, Snapshot};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::linalg;
use crate::stochmat::{self, Kind};

const STOCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    General,
    Atc,
    Cta,
    NonCooperative,
    ConsensusLms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SmoothingOrder {
    Tsa,
    Tas,
    Sta,
    Ats,
    Sat,
    Ast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Adapt,
    Smooth,
    Combine,
}

impl SmoothingOrder {
    fn stages(self) -> [Stage; 3] {
        use Stage::*;
        match self {
            SmoothingOrder::Tsa => [Smooth, Combine, Adapt],
            SmoothingOrder::Tas => [Smooth, Adapt, Combine],
            SmoothingOrder::Sta => [Combine, Smooth, Adapt],
            SmoothingOrder::Ats => [Adapt, Smooth, Combine],
            SmoothingOrder::Sat => [Combine, Adapt, Smooth],
            SmoothingOrder::Ast => [Adapt, Combine, Smooth],
        }
    }

    pub const ALL: [SmoothingOrder; 6] = [
        SmoothingOrder::Tsa,
        SmoothingOrder::Tas,
        SmoothingOrder::Sta,
        SmoothingOrder::Ats,
        SmoothingOrder::Sat,
        SmoothingOrder::Ast,
    ];
}

/// Temporal smoothing settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothing {
    pub order: SmoothingOrder,
    /// Per node, `P` nonnegative coefficients summing to one (lag 0 first).
    pub f: Vec<Vec<f64>>,
    /// Per-node scaling of the exchanged adaptation terms, in `(0, 1]`.
    pub q: Vec<f64>,
}

impl Smoothing {
    pub fn new(order: SmoothingOrder, f: Vec<Vec<f64>>, q: Vec<f64>) -> Result<Self> {
        let p = f.first().map_or(0, |x| x.len());
        if p < 1 {
            return Err(Error::Config("smoothing needs P ≥ 1".into()));
        }
        if f.len() != q.len() {
            return Err(Error::Config("f and q must cover the same nodes".into()));
        }
        for (k, fk) in f.iter().enumerate() {
            if fk.len() != p {
                return Err(Error::Config(format!("node {k} has {} coefficients, expected {p}", fk.len())));
            }
            if fk.iter().any(|&x| !(x >= 0.0)) || (fk.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "smoothing coefficients at node {k} must be nonnegative and sum to 1"
                )));
            }
        }
        if let Some(k) = q.iter().position(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Config(format!("q at node {k} must lie in (0,1]")));
        }
        Ok(Self { order, f, q })
    }

    pub fn uniform(order: SmoothingOrder, f: Vec<f64>, q: f64, n: usize) -> Result<Self> {
        Self::new(order, vec![f; n], vec![q; n])
    }

    pub fn depth(&self) -> usize {
        self.f[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    pub topology: Topology,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub variant: Variant,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub link_noise: Option<LinkNoiseModel>,
    pub adaptive_weights: Option<AdaptiveWeights>,
    pub smoothing: Option<Smoothing>,
}

fn check_kind(name: &str, a: &DMatrix<f64>, kind: Kind, n: usize) -> Result<()> {
    if a.shape() != (n, n) {
        return Err(Error::Validation(format!("{name} must be {n}×{n}")));
    }
    if !stochmat::is_kind(a, kind, STOCH_TOL) {
        return Err(Error::Validation(format!("{name} is not {kind:?}")));
    }
    Ok(())
}

impl DiffusionConfig {
    fn build(variant: Variant, a1: DMatrix<f64>, a2: DMatrix<f64>, c: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        check_kind("A1", &a1, Kind::LeftStochastic, n)?;
        check_kind("A2", &a2, Kind::LeftStochastic, n)?;
        check_kind("C", &c, Kind::RightStochastic, n)?;
        if let Some(k) = mu.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Validation(format!("step size at node {k} must be positive")));
        }
        Ok(Self {
            variant,
            a1,
            a2,
            c,
            mu,
            link_noise: None,
            adaptive_weights: None,
            smoothing: None,
        })
    }

    pub fn general(a1: DMatrix<f64>, c: DMatrix<f64>, a2: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        Self::build(Variant::General, a1, a2, c, mu)
    }

    pub fn atc(a: DMatrix<f64>, c: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        Self::build(Variant::Atc, DMatrix::identity(n, n), a, c, mu)
    }

    pub fn cta(a: DMatrix<f64>, c: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        Self::build(Variant::Cta, a, DMatrix::identity(n, n), c, mu)
    }

    pub fn non_cooperative(mu: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        let i = DMatrix::identity(n, n);
        Self::build(Variant::NonCooperative, i.clone(), i.clone(), i, mu)
    }

    /// Consensus LMS: `A` is stored in `a1`; `a2` and `C` are the identity.
    pub fn consensus(a: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        let i = DMatrix::identity(n, n);
        Self::build(Variant::ConsensusLms, a, i.clone(), i, mu)
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn with_link_noise(mut self, lm: LinkNoiseModel) -> Result<Self> {
        if lm.n() != self.n() {
            return Err(Error::Validation("link-noise model size mismatch".into()));
        }
        self.link_noise = Some(lm);
        Ok(self)
    }

    /// Adaptive relative-variance weights replace `A2`; only for the ATC family (`A1 = I`).
    pub fn with_adaptive_weights(mut self, topology: Topology, nu: Vec<f64>) -> Result<Self> {
        let n = self.n();
        if self.a1 != DMatrix::identity(n, n) || self.variant == Variant::ConsensusLms {
            return Err(Error::Config(
                "adaptive weights are defined for ATC-family strategies (A1 = I) only".into(),
            ));
        }
        if topology.n() != n || nu.len() != n {
            return Err(Error::Config("adaptive-weight settings size mismatch".into()));
        }
        self.adaptive_weights = Some(AdaptiveWeights { topology, nu });
        Ok(self)
    }

    pub fn with_smoothing(mut self, s: Smoothing) -> Result<Self> {
        if s.q.len() != self.n() {
            return Err(Error::Config("smoothing settings size mismatch".into()));
        }
        if matches!(self.variant, Variant::ConsensusLms) {
            return Err(Error::Config("smoothing is not defined for consensus LMS".into()));
        }
        self.smoothing = Some(s);
        Ok(self)
    }

    /// Matrix used by the combination stage of the smoothing variants.
    pub fn smoothing_combiner(&self) -> &DMatrix<f64> {
        match self.variant {
            Variant::Cta => &self.a1,
            _ => &self.a2,
        }
    }
}

/// Estimates of all nodes plus the auxiliary state some strategies carry.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub n: usize,
    pub m: usize,
    pub w: DVector<f64>,
    pub i: usize,
    /// Inputs of the smoothing stage, most recent first.
    pub history: VecDeque<DVector<f64>>,
    pub weights: Option<VarianceProductState>,
    /// Combination matrix currently in use when adaptive weights are enabled.
    pub a2_current: Option<DMatrix<f64>>,
}

impl NetworkState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            w: DVector::zeros(n * m),
            i: 0,
            history: VecDeque::new(),
            weights: None,
            a2_current: None,
        }
    }

    pub fn for_config(cfg: &DiffusionConfig, m: usize) -> Result<Self> {
        let mut s = Self::zeros(cfg.n(), m);
        if let Some(aw) = &cfg.adaptive_weights {
            let vp = VarianceProductState::new(&aw.topology, aw.nu.clone())?;
            let mut a = DMatrix::zeros(cfg.n(), cfg.n());
            for k in 0..cfg.n() {
                vp.write_weights(k, &mut a);
            }
            s.weights = Some(vp);
            s.a2_current = Some(a);
        }
        Ok(s)
    }

    pub fn node(&self, k: usize) -> DVector<f64> {
        linalg::block(&self.w, k, self.m).clone_owned()
    }

    /// `‖w^o − w_k‖²` averaged over nodes.
    pub fn msd(&self, wo: &DVector<f64>) -> f64 {
        (0..self.n).map(|k| self.node_msd(k, wo)).sum::<f64>() / self.n as f64
    }

    pub fn node_msd(&self, k: usize, wo: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for a in 0..self.m {
            let e = wo[a] - self.w[k * self.m + a];
            s += e * e;
        }
        s
    }

    /// `w̃_kᵀ R_{u,k} w̃_k`.
    pub fn node_emse(&self, k: usize, model: &EnsembleModel) -> f64 {
        let m = self.m;
        let e = DVector::from_fn(m, |a, _| model.wo()[a] - self.w[k * m + a]);
        e.dot(&(model.ru(k) * &e))
    }

    pub fn emse(&self, model: &EnsembleModel) -> f64 {
        (0..self.n).map(|k| self.node_emse(k, model)).sum::<f64>() / self.n as f64
    }

    /// Divergence sentinel: some `‖w_k‖ > 1e9·(1 + ‖w^o‖)` or a non-finite entry.
    pub fn diverged(&self, wo: &DVector<f64>) -> bool {
        let limit = 1e9 * (1.0 + wo.norm());
        !self.w.iter().all(|x| x.is_finite())
            || stochmat::block_max_norm(&self.w, self.m) > limit
    }
}

/// `out_k = Σ_ℓ a_ℓk src_ℓ`, skipping zero weights.
pub fn combine(src: &DVector<f64>, a: &DMatrix<f64>, m: usize) -> DVector<f64> {
    let n = a.nrows();
    let mut out = DVector::zeros(n * m);
    for k in 0..n {
        for l in 0..n {
            let w = a[(l, k)];
            if w != 0.0 {
                for j in 0..m {
                    out[k * m + j] += w * src[l * m + j];
                }
            }
        }
    }
    out
}

/// `Σ_ℓ weight_ℓ · u_ℓᵀ (d_ℓk − u_ℓ x)` for the estimate `x` held at node `k`.
fn data_correction(
    x: &[f64],
    k: usize,
    weights: impl Iterator<Item = (usize, f64)>,
    snap: &Snapshot,
    draws: Option<&LinkDraws>,
    out: &mut [f64],
) {
    let m = x.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (l, c) in weights {
        if c == 0.0 {
            continue;
        }
        let mut ux = 0.0;
        for j in 0..m {
            ux += snap.u[(l, j)] * x[j];
        }
        let d = match draws {
            Some(dr) => snap.d[l] + dr.vd[dr.idx(l, k)],
            None => snap.d[l],
        };
        let e = d - ux;
        for j in 0..m {
            out[j] += c * (snap.u[(l, j)] * e);
        }
    }
}

fn column_weights(a: &DMatrix<f64>, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    (0..a.nrows()).map(move |l| (l, a[(l, k)]))
}

fn check_dims(state: &NetworkState, cfg: &DiffusionConfig) -> Result<()> {
    if state.n != cfg.n() || state.w.len() != state.n * state.m {
        return Err(Error::Validation(format!(
            "state has {} nodes × {}, config has {} nodes",
            state.n,
            state.m,
            cfg.n()
        )));
    }
    Ok(())
}

fn check_snapshot(state: &NetworkState, snap: &Snapshot) -> Result<()> {
    if snap.d.len() != state.n || snap.u.shape() != (state.n, state.m) {
        return Err(Error::Validation("snapshot dimensions do not match the network".into()));
    }
    Ok(())
}

/// Deterministic diffusion with the true moments `{R_{u,ℓ}, r_{du,ℓ}}`.
pub fn steepest_descent_step(state: &mut NetworkState, cfg: &DiffusionConfig, model: &EnsembleModel) -> Result<()> {
    check_dims(state, cfg)?;
    if cfg.variant == Variant::ConsensusLms {
        return Err(Error::Config("steepest descent is not defined for consensus LMS".into()));
    }
    if model.n() != state.n || model.m() != state.m {
        return Err(Error::Validation("model dimensions do not match the network".into()));
    }
    let (n, m) = (state.n, state.m);
    let phi = combine(&state.w, &cfg.a1, m);
    let mut psi = phi.clone();
    for k in 0..n {
        let phik = linalg::block(&phi, k, m).clone_owned();
        let mut g = DVector::zeros(m);
        for l in 0..n {
            let c = cfg.c[(l, k)];
            if c != 0.0 {
                let r = model.rdu(l) - model.ru(l) * &phik;
                g += r * c;
            }
        }
        let mut out = psi.rows_mut(k * m, m);
        out += g * cfg.mu[k];
    }
    state.w = combine(&psi, &cfg.a2, m);
    state.i += 1;
    Ok(())
}

/// Diffusion with a user-supplied gradient `∇J_ℓ(w)`, optionally perturbed
/// by `noise(ℓ, k, φ_k)`.
pub fn generic_cost_step(
    state: &mut NetworkState,
    cfg: &DiffusionConfig,
    grad: &dyn Fn(usize, &DVector<f64>) -> DVector<f64>,
    mut noise: Option<&mut dyn FnMut(usize, usize, &DVector<f64>) -> DVector<f64>>,
) -> Result<()> {
    check_dims(state, cfg)?;
    let (n, m) = (state.n, state.m);
    let phi = combine(&state.w, &cfg.a1, m);
    let mut psi = phi.clone();
    for k in 0..n {
        let phik = linalg::block(&phi, k, m).clone_owned();
        let mut h = DVector::zeros(m);
        for l in 0..n {
            let c = cfg.c[(l, k)];
            if c != 0.0 {
                let mut g = grad(l, &phik);
                if g.len() != m {
                    return Err(Error::Validation(format!(
                        "gradient oracle returned length {} (expected {m})",
                        g.len()
                    )));
                }
                if let Some(nz) = noise.as_deref_mut() {
                    g += nz(l, k, &phik);
                }
                h += g * c;
            }
        }
        let mut out = psi.rows_mut(k * m, m);
        out -= h * cfg.mu[k];
    }
    state.w = combine(&psi, &cfg.a2, m);
    state.i += 1;
    Ok(())
}

/// One step of adaptive diffusion from streaming data. With link noise
/// configured, `draws` must carry this step's exchange noise.
pub fn adaptive_step(
    state: &mut NetworkState,
    cfg: &DiffusionConfig,
    snap: &Snapshot,
    draws: Option<&LinkDraws>,
) -> Result<()> {
    check_dims(state, cfg)?;
    check_snapshot(state, snap)?;
    if cfg.variant == Variant::ConsensusLms {
        return consensus_lms_step(state, &cfg.a1, &cfg.mu, snap);
    }
    if cfg.smoothing.is_some() {
        return smoothing_step(state, cfg, snap);
    }
    if cfg.link_noise.is_some() && draws.is_none() {
        return Err(Error::Validation("link noise configured but no draws supplied".into()));
    }
    let draws = if cfg.link_noise.is_some() { draws } else { None };
    let (n, m) = (state.n, state.m);

    let phi = match draws {
        None => combine(&state.w, &cfg.a1, m),
        Some(dr) => {
            let mut out = DVector::zeros(n * m);
            for k in 0..n {
                for l in 0..n {
                    let a = cfg.a1[(l, k)];
                    if a != 0.0 {
                        let v = &dr.vw[dr.idx(l, k)];
                        for j in 0..m {
                            out[k * m + j] += a * (state.w[l * m + j] + v[j]);
                        }
                    }
                }
            }
            out
        }
    };

    let mut psi = phi.clone();
    let mut g = vec![0.0; m];
    for k in 0..n {
        let x = &phi.as_slice()[k * m..(k + 1) * m];
        data_correction(x, k, column_weights(&cfg.c, k), snap, draws, &mut g);
        for j in 0..m {
            psi[k * m + j] += cfg.mu[k] * g[j];
        }
    }

    if let (Some(vp), Some(a)) = (state.weights.as_mut(), state.a2_current.as_mut()) {
        for k in 0..n {
            for idx in 0..vp.neighborhood(k).len() {
                let l = vp.neighborhood(k)[idx];
                let mut dist2 = 0.0;
                for j in 0..m {
                    let noisy = match draws {
                        Some(dr) => psi[l * m + j] + dr.vpsi[dr.idx(l, k)][j],
                        None => psi[l * m + j],
                    };
                    let e = noisy - state.w[k * m + j];
                    dist2 += e * e;
                }
                vp.update(l, k, dist2);
            }
            vp.write_weights(k, a);
        }
    }
    let a2 = state.a2_current.as_ref().unwrap_or(&cfg.a2);

    state.w = match draws {
        None => combine(&psi, a2, m),
        Some(dr) => {
            let mut out = DVector::zeros(n * m);
            for k in 0..n {
                for l in 0..n {
                    let a = a2[(l, k)];
                    if a != 0.0 {
                        let v = &dr.vpsi[dr.idx(l, k)];
                        for j in 0..m {
                            out[k * m + j] += a * (psi[l * m + j] + v[j]);
                        }
                    }
                }
            }
            out
        }
    };
    state.i += 1;
    Ok(())
}

/// `w_k ← Σ_ℓ a_ℓk w_ℓ + μ_k u_kᵀ(d_k − u_k w_k)`, the local term evaluated at the previous `w_k`.
pub fn consensus_lms_step(state: &mut NetworkState, a: &DMatrix<f64>, mu: &[f64], snap: &Snapshot) -> Result<()> {
    check_snapshot(state, snap)?;
    let (n, m) = (state.n, state.m);
    if a.shape() != (n, n) || mu.len() != n {
        return Err(Error::Validation("consensus parameters do not match the network".into()));
    }
    let mut next = combine(&state.w, a, m);
    let mut g = vec![0.0; m];
    for k in 0..n {
        let x = &state.w.as_slice()[k * m..(k + 1) * m];
        data_correction(x, k, std::iter::once((k, 1.0)), snap, None, &mut g);
        for j in 0..m {
            next[k * m + j] += mu[k] * g[j];
        }
    }
    state.w = next;
    state.i += 1;
    Ok(())
}

/// Adaptive diffusion with temporal smoothing; stages run in the configured order.
pub fn smoothing_step(state: &mut NetworkState, cfg: &DiffusionConfig, snap: &Snapshot) -> Result<()> {
    check_dims(state, cfg)?;
    check_snapshot(state, snap)?;
    let sm = cfg
        .smoothing
        .as_ref()
        .ok_or_else(|| Error::Config("smoothing is not configured".into()))?;
    let (n, m) = (state.n, state.m);
    let p = sm.depth();
    if p < 1 {
        return Err(Error::Config("smoothing needs P ≥ 1".into()));
    }
    let a = cfg.smoothing_combiner();
    let mut x = state.w.clone();
    let mut g = vec![0.0; m];
    for stage in sm.order.stages() {
        match stage {
            Stage::Adapt => {
                let mut next = x.clone();
                for k in 0..n {
                    let xk = &x.as_slice()[k * m..(k + 1) * m];
                    let weights = (0..n).map(|l| (l, sm.q[l] * cfg.c[(l, k)]));
                    data_correction(xk, k, weights, snap, None, &mut g);
                    for j in 0..m {
                        next[k * m + j] += cfg.mu[k] * g[j];
                    }
                }
                x = next;
            }
            Stage::Combine => x = combine(&x, a, m),
            Stage::Smooth => {
                state.history.push_front(x.clone());
                state.history.truncate(p);
                let avail = state.history.len();
                let mut out = DVector::zeros(n * m);
                for k in 0..n {
                    let f = &sm.f[k];
                    let scale = if avail < p {
                        f[..avail].iter().sum::<f64>()
                    } else {
                        1.0
                    };
                    for (lag, h) in state.history.iter().enumerate() {
                        let w = f[lag];
                        if w != 0.0 {
                            let w = if avail < p { w / scale } else { w };
                            for j in 0..m {
                                out[k * m + j] += w * h[k * m + j];
                            }
                        }
                    }
                }
                x = out;
            }
        }
    }
    state.w = x;
    state.i += 1;
    Ok(())
}

/// `z_n = (Aᵀ ⊗ I_M) z_{n−1}` repeated `n_iters` times.
pub fn consensus_average(a: &DMatrix<f64>, z0: &DVector<f64>, m: usize, n_iters: usize) -> DVector<f64> {
    let mut z = z0.clone();
    for _ in 0..n_iters {
        z = combine(&z, a, m);
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusReport {
    /// Doubly stochastic with `ρ(Aᵀ − 11ᵀ/N) < 1`.
    pub converges: bool,
    pub lambda2: f64,
    /// `‖z_n − 1⊗w^o‖` for `n = 0..=iterations`.
    pub errors: Vec<f64>,
    pub final_error: f64,
    /// Geometric decay rate fitted to the error trajectory; `None` if too few usable points.
    pub fitted_rate: Option<f64>,
}

pub fn consensus_report(a: &DMatrix<f64>, z0: &DVector<f64>, m: usize, n_iters: usize) -> Result<ConsensusReport> {
    let n = a.nrows();
    let doubly = stochmat::is_kind(a, Kind::DoublyStochastic, STOCH_TOL);
    let centered = a.transpose() - DMatrix::from_element(n, n, 1.0 / n as f64);
    let rho = linalg::spectral_radius(&centered)?;
    let lambda2 = if doubly {
        stochmat::second_eigenvalue_magnitude(a, STOCH_TOL)?
    } else {
        f64::NAN
    };
    let mut avg = DVector::zeros(m);
    for k in 0..n {
        avg += linalg::block(z0, k, m);
    }
    avg /= n as f64;
    let err = |z: &DVector<f64>| {
        (0..n)
            .map(|k| (linalg::block(z, k, m) - &avg).norm_squared())
            .sum::<f64>()
            .sqrt()
    };
    let mut z = z0.clone();
    let mut errors = vec![err(&z)];
    for _ in 0..n_iters {
        z = combine(&z, a, m);
        errors.push(err(&z));
    }
    let fitted_rate = fit_geometric_rate(&errors);
    Ok(ConsensusReport {
        converges: doubly && rho < 1.0 - 1e-12,
        lambda2,
        final_error: *errors.last().unwrap(),
        errors,
        fitted_rate,
    })
}

/// Least-squares slope of `ln e_n` over the asymptotic stretch of a decaying
/// trajectory: after the error falls below 1e−2 of its start and while it
/// stays above 1e−11 of it.
pub fn fit_geometric_rate(errors: &[f64]) -> Option<f64> {
    let e0 = *errors.first()?;
    if !(e0 > 0.0) {
        return None;
    }
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .skip_while(|(_, &e)| e > 1e-2 * e0)
        .take_while(|(_, &e)| e > 1e-11 * e0)
        .map(|(i, &e)| (i as f64, e.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let np = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / np;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / np;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

/// `R_k = Σ_ℓ c_ℓk R_{u,ℓ}` per node.
pub fn combined_covariances(model: &EnsembleModel, c: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (n, m) = (model.n(), model.m());
    (0..n)
        .map(|k| {
            let mut r = DMatrix::zeros(m, m);
            for l in 0..n {
                if c[(l, k)] != 0.0 {
                    r += model.ru(l) * c[(l, k)];
                }
            }
            r
        })
        .collect()
}

/// Per-node mean-stability bound `2/λ_max(R_k)`.
pub fn step_size_bounds(model: &EnsembleModel, c: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !stochmat::is_kind(c, Kind::RightStochastic, STOCH_TOL) {
        return Err(Error::Precondition("C must be right-stochastic".into()));
    }
    Ok(combined_covariances(model, c)
        .iter()
        .map(|r| 2.0 / linalg::max_sym_eigenvalue(r))
        .collect())
}

/// Step-size bound for general convex costs with Hessians in
/// `[λ_min,ℓ, λ_max,ℓ]` and gradient noise of relative size `α`.
pub fn generic_step_bound(lambda_min: &[f64], lambda_max: &[f64], c: &DMatrix<f64>, alpha: f64) -> Result<Vec<f64>> {
    let n = c.nrows();
    if lambda_min.len() != n || lambda_max.len() != n {
        return Err(Error::Precondition("one Hessian bound per node required".into()));
    }
    let c1 = (0..n)
        .map(|k| c.column(k).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok((0..n)
        .map(|k| {
            let smax: f64 = (0..n).map(|l| c[(l, k)] * lambda_max[l]).sum();
            let smin: f64 = (0..n).map(|l| c[(l, k)] * lambda_min[l]).sum();
            if alpha == 0.0 {
                2.0 / smax
            } else {
                let extra = alpha * c1 * c1;
                (2.0 * smax / (smax * smax + extra)).min(2.0 * smin / (smin * smin + extra))
            }
        })
        .collect())
}
