//! Closed-form mean and mean-square performance.
//!
//! The error vector obeys, to first order in the step sizes,
//! `w̃_i = B w̃_{i−1} + noise` with noise covariance `Y`. Its steady-state
//! covariance `P = B P Bᵀ + Y` gives every metric as a contraction
//! `Σ_ij P_ij T_ij`:
//!
//! | target `T`  | metric           |
//! |-------------|------------------|
//! | `I/N`       | network MSD      |
//! | `R_u/N`     | network EMSE     |
//! | `J_k`       | MSD of node `k`  |
//! | `T_k`       | EMSE of node `k` |
//!
//! For `NM ≤ 64` `P` comes from a dense solve with `F = Bᵀ ⊗ Bᵀ`; larger
//! systems use a doubling form of the series `Σ_j Bʲ Y Bᵀʲ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datamodel::{EnsembleModel, LinkNoiseModel};
use crate::diffusion::{DiffusionConfig, Variant};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stochmat::{self, Kind};

/// Largest `NM` for which `F` is formed explicitly.
pub const DENSE_F_LIMIT: usize = 64;
const SERIES_TOL: f64 = 1e-10;
const KIND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMoments {
    pub n: usize,
    pub m: usize,
    /// `diag{μ_k I_M}`.
    pub mblk: DMatrix<f64>,
    /// `diag{R_k}` with `R_k = Σ_ℓ c_ℓk R_{u,ℓ}`.
    pub r: DMatrix<f64>,
    pub ru: DMatrix<f64>,
    /// `diag{σ²_{v,k} R_{u,k}}`.
    pub s: DMatrix<f64>,
    /// `diag{σ²_{v,k}}`, `N×N`.
    pub rv: DMatrix<f64>,
}

pub fn build_moments(model: &EnsembleModel, cfg: &DiffusionConfig) -> Result<NetworkMoments> {
    let (n, m) = (model.n(), model.m());
    if cfg.n() != n {
        return Err(Error::Validation(format!("model has {n} nodes, strategy has {}", cfg.n())));
    }
    let mblk = DMatrix::from_diagonal(&DVector::from_fn(n * m, |r, _| cfg.mu[r / m]));
    let ru = linalg::block_diag(model.ru_all());
    let r = if cfg.variant == Variant::ConsensusLms {
        ru.clone()
    } else {
        linalg::block_diag(&crate::diffusion::combined_covariances(model, &cfg.c))
    };
    let s_blocks: Vec<DMatrix<f64>> = (0..n).map(|k| model.ru(k) * model.sigma2_v(k)).collect();
    let s = linalg::block_diag(&s_blocks);
    let rv = DMatrix::from_diagonal(&DVector::from_vec(model.sigma2_v_all().to_vec()));
    Ok(NetworkMoments { n, m, mblk, r, ru, s, rv })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceConstructs {
    pub n: usize,
    pub m: usize,
    /// Mean-error transition matrix.
    pub b: DMatrix<f64>,
    /// Noise gain.
    pub g: DMatrix<f64>,
    /// Driving noise covariance.
    pub y: DMatrix<f64>,
    pub rho_b: f64,
}

impl VarianceConstructs {
    pub fn from_parts(b: DMatrix<f64>, g: DMatrix<f64>, mut y: DMatrix<f64>, n: usize, m: usize) -> Result<Self> {
        linalg::symmetrize(&mut y);
        let rho_b = linalg::spectral_radius(&b)?;
        Ok(Self { n, m, b, g, y, rho_b })
    }

    /// `F = Bᵀ ⊗ Bᵀ` (real data), only for `NM ≤ 64`.
    pub fn f_matrix(&self) -> Option<DMatrix<f64>> {
        (self.b.nrows() <= DENSE_F_LIMIT).then(|| {
            let bt = self.b.transpose();
            linalg::kron(&bt, &bt)
        })
    }

    pub fn mean_square_stable(&self) -> bool {
        self.rho_b < 1.0
    }
}

fn check_analysable(cfg: &DiffusionConfig) -> Result<()> {
    if cfg.smoothing.is_some() {
        return Err(Error::Config("closed-form analysis does not cover temporal smoothing".into()));
    }
    Ok(())
}

/// `B = A2ᵀ(I − M R)A1ᵀ`, `G = A2ᵀ M Cᵀ`, `Y = G S Gᵀ`; consensus LMS uses
/// `B = Aᵀ⊗I − M R_u` and `Y = M S M`. Adaptive weights are analysed at the
/// configured static `A2`.
pub fn variance_constructs(mom: &NetworkMoments, cfg: &DiffusionConfig) -> Result<VarianceConstructs> {
    check_analysable(cfg)?;
    let (n, m) = (mom.n, mom.m);
    let nm = n * m;
    if cfg.variant == Variant::ConsensusLms {
        let b = linalg::extend(&cfg.a1.transpose(), m) - &mom.mblk * &mom.ru;
        let g = mom.mblk.clone();
        let y = &g * &mom.s * g.transpose();
        return VarianceConstructs::from_parts(b, g, y, n, m);
    }
    let a1t = linalg::extend(&cfg.a1.transpose(), m);
    let a2t = linalg::extend(&cfg.a2.transpose(), m);
    let ct = linalg::extend(&cfg.c.transpose(), m);
    let h = &a2t * (DMatrix::identity(nm, nm) - &mom.mblk * &mom.r);
    let b = &h * a1t;
    let g = &a2t * &mom.mblk * ct;
    let y = &g * &mom.s * g.transpose();
    VarianceConstructs::from_parts(b, g, y, n, m)
}

/// Extra driving covariance caused by noisy exchanges of `w`, `ψ` and `d`.
pub fn link_noise_correction(mom: &NetworkMoments, cfg: &DiffusionConfig, model: &EnsembleModel, lm: &LinkNoiseModel) -> Result<DMatrix<f64>> {
    check_analysable(cfg)?;
    let (n, m) = (mom.n, mom.m);
    if lm.n() != n || lm.m() != m {
        return Err(Error::Validation("link-noise model size mismatch".into()));
    }
    if cfg.variant == Variant::ConsensusLms {
        return Err(Error::Config("link-noise analysis covers diffusion strategies only".into()));
    }
    let nm = n * m;
    let rdu: Vec<DMatrix<f64>> = (0..n)
        .map(|k| {
            let mut acc = DMatrix::zeros(m, m);
            for l in 0..n {
                if let Some(p) = lm.pair(l, k) {
                    let c = cfg.c[(l, k)];
                    if c != 0.0 && p.sigma2_d != 0.0 {
                        acc += model.ru(l) * (c * c * p.sigma2_d);
                    }
                }
            }
            acc
        })
        .collect();
    let a2t = linalg::extend(&cfg.a2.transpose(), m);
    let h = &a2t * (DMatrix::identity(nm, nm) - &mom.mblk * &mom.r);
    let rw = linalg::block_diag(&lm.aggregate_w(&cfg.a1));
    let rpsi = linalg::block_diag(&lm.aggregate_psi(&cfg.a2));
    let ma2 = &mom.mblk * a2t.transpose();
    let mut dy = ma2.transpose() * linalg::block_diag(&rdu) * &ma2 + &h * rw * h.transpose() + rpsi;
    linalg::symmetrize(&mut dy);
    Ok(dy)
}

/// Constructs with `Y_imperfect = Y_perfect + ΔY`.
pub fn imperfect_constructs(
    mom: &NetworkMoments,
    cfg: &DiffusionConfig,
    model: &EnsembleModel,
    lm: &LinkNoiseModel,
) -> Result<VarianceConstructs> {
    let perfect = variance_constructs(mom, cfg)?;
    let dy = link_noise_correction(mom, cfg, model, lm)?;
    let y = &perfect.y + dy;
    VarianceConstructs::from_parts(perfect.b, perfect.g, y, mom.n, mom.m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Method {
    LinearSolve,
    /// Number of series terms summed.
    Series(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    pub msd_network: f64,
    pub emse_network: f64,
    pub msd_node: Vec<f64>,
    pub emse_node: Vec<f64>,
    pub rho_b: f64,
    pub stable_mean: bool,
    pub stable_ms: bool,
    pub method: Method,
}

/// Solution of `P = B P Bᵀ + Y`.
pub fn steady_state_covariance(b: &DMatrix<f64>, y: &DMatrix<f64>, rho_b: f64) -> Result<(DMatrix<f64>, Method)> {
    if !(rho_b < 1.0) {
        return Err(Error::Instability(format!("ρ(B) = {rho_b} ≥ 1")));
    }
    let d = b.nrows();
    if d <= DENSE_F_LIMIT {
        let bt = b.transpose();
        let f = linalg::kron(&bt, &bt);
        let lhs = (DMatrix::identity(d * d, d * d) - f).transpose();
        let rhs = linalg::vec(&y.transpose());
        let x = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Instability("I − F is singular".into()))?;
        let mut p = linalg::unvec(&x, d);
        linalg::symmetrize(&mut p);
        Ok((p, Method::LinearSolve))
    } else {
        let (p, terms) = doubling_series(b, y, SERIES_TOL, 64)?;
        Ok((p, Method::Series(terms)))
    }
}

/// `Σ_j Bʲ Y Bᵀʲ` by repeated squaring: after `r` rounds the first `2^r` terms are summed.
fn doubling_series(b: &DMatrix<f64>, y: &DMatrix<f64>, tol: f64, max_rounds: u32) -> Result<(DMatrix<f64>, u64)> {
    let mut p = y.clone();
    let mut a = b.clone();
    for round in 0..max_rounds {
        let inc = &a * &p * a.transpose();
        let done = inc.norm() <= tol * p.norm().max(f64::MIN_POSITIVE);
        p += inc;
        if done {
            linalg::symmetrize(&mut p);
            return Ok((p, 1u64 << (round + 1).min(63)));
        }
        a = &a * &a;
    }
    Err(Error::Instability("series did not converge".into()))
}

/// `Σ_ij P_ij T_ij`.
pub fn contract(p: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    p.component_mul(t).sum()
}

pub fn performance_report(c: &VarianceConstructs, mom: &NetworkMoments) -> Result<PerformanceReport> {
    let (n, m) = (c.n, c.m);
    if !c.mean_square_stable() {
        return Ok(PerformanceReport {
            msd_network: f64::NAN,
            emse_network: f64::NAN,
            msd_node: vec![f64::NAN; n],
            emse_node: vec![f64::NAN; n],
            rho_b: c.rho_b,
            stable_mean: false,
            stable_ms: false,
            method: Method::LinearSolve,
        });
    }
    let (p, method) = steady_state_covariance(&c.b, &c.y, c.rho_b)?;
    let msd_node: Vec<f64> = (0..n).map(|k| p.view((k * m, k * m), (m, m)).trace()).collect();
    let emse_node: Vec<f64> = (0..n)
        .map(|k| {
            let pk = p.view((k * m, k * m), (m, m)).clone_owned();
            let rk = mom.ru.view((k * m, k * m), (m, m)).clone_owned();
            contract(&pk, &rk)
        })
        .collect();
    Ok(PerformanceReport {
        msd_network: contract(&p, &DMatrix::identity(n * m, n * m)) / n as f64,
        emse_network: contract(&p, &mom.ru) / n as f64,
        msd_node,
        emse_node,
        rho_b: c.rho_b,
        stable_mean: true,
        stable_ms: true,
        method,
    })
}

/// Convenience: moments, constructs and report for a model and strategy.
pub fn analyse(model: &EnsembleModel, cfg: &DiffusionConfig) -> Result<(NetworkMoments, VarianceConstructs, PerformanceReport)> {
    let mom = build_moments(model, cfg)?;
    let c = match &cfg.link_noise {
        Some(lm) => imperfect_constructs(&mom, cfg, model, lm)?,
        None => variance_constructs(&mom, cfg)?,
    };
    let rep = performance_report(&c, &mom)?;
    Ok((mom, c, rep))
}

/// `Σ_j Tr(Bʲ Y Bᵀʲ T)` summed term by term. Stops once a term drops below
/// `tol·(1 − ρ(B)²)`, which bounds the neglected tail by about `tol`.
pub fn msd_series(c: &VarianceConstructs, target: &DMatrix<f64>, max_terms: usize, tol: f64) -> Result<(f64, usize)> {
    if !(c.rho_b < 1.0) {
        return Err(Error::Instability(format!("ρ(B) = {} ≥ 1", c.rho_b)));
    }
    let stop = tol * (1.0 - c.rho_b * c.rho_b);
    let bt = c.b.transpose();
    let mut term = c.y.clone();
    let mut sum = 0.0;
    for j in 0..max_terms {
        let inc = contract(&term, target);
        sum += inc;
        if inc.abs() < stop || term.iter().all(|&x| x == 0.0) {
            return Ok((sum, j + 1));
        }
        term = &c.b * term * &bt;
    }
    Ok((sum, max_terms))
}

/// Theoretical `E‖w̃_i‖²_T` for `i = 0..steps`, from the initial error `w̃_{−1}`.
///
/// Uses `ζ(i) = ζ(i−1) + Tr(Σ_i Y) − w̃ᵀ(Σ_i − BᵀΣ_iB)w̃` with `Σ_i = Bᵀⁱ T Bⁱ`.
pub fn learning_curve(c: &VarianceConstructs, target: &DMatrix<f64>, initial_error: &DVector<f64>, steps: usize) -> Result<Vec<f64>> {
    if initial_error.len() != c.b.nrows() {
        return Err(Error::Validation("initial error has the wrong length".into()));
    }
    if !(c.rho_b < 1.0) {
        return Err(Error::Instability(format!("ρ(B) = {} ≥ 1", c.rho_b)));
    }
    let bt = c.b.transpose();
    let mut sigma = target.clone();
    let mut zeta = initial_error.dot(&(target * initial_error));
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = &bt * &sigma * &c.b;
        let diff = &sigma - &next;
        zeta += contract(&sigma, &c.y) - initial_error.dot(&(diff * initial_error));
        out.push(zeta);
        sigma = next;
    }
    Ok(out)
}

/// Network EMSE learning curve from `w = w_init` at every node.
pub fn learning_curve_theory(
    c: &VarianceConstructs,
    mom: &NetworkMoments,
    wo: &DVector<f64>,
    w_init: &DVector<f64>,
    steps: usize,
) -> Result<Vec<f64>> {
    let e = stacked_error(wo, w_init, mom.n);
    learning_curve(c, &(&mom.ru / mom.n as f64), &e, steps)
}

/// Network MSD learning curve from `w = w_init` at every node.
pub fn msd_curve_theory(c: &VarianceConstructs, mom: &NetworkMoments, wo: &DVector<f64>, w_init: &DVector<f64>, steps: usize) -> Result<Vec<f64>> {
    let e = stacked_error(wo, w_init, mom.n);
    let nm = mom.n * mom.m;
    learning_curve(c, &(DMatrix::identity(nm, nm) / mom.n as f64), &e, steps)
}

fn stacked_error(wo: &DVector<f64>, w_init: &DVector<f64>, n: usize) -> DVector<f64> {
    let m = wo.len();
    DVector::from_fn(n * m, |r, _| wo[r % m] - w_init[r % m])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStability {
    pub rho_b: f64,
    pub stable: bool,
    /// `μ_k < 2/λ_max(R_k)` per node.
    pub per_node_bound_ok: Vec<bool>,
}

pub fn mean_stability(c: &VarianceConstructs, mom: &NetworkMoments) -> MeanStability {
    let m = mom.m;
    let per_node_bound_ok = (0..mom.n)
        .map(|k| {
            let rk = mom.r.view((k * m, k * m), (m, m)).clone_owned();
            mom.mblk[(k * m, k * m)] < 2.0 / linalg::max_sym_eigenvalue(&rk)
        })
        .collect();
    MeanStability {
        rho_b: c.rho_b,
        stable: c.rho_b < 1.0,
        per_node_bound_ok,
    }
}

/// Uniform-profile network MSD written as `(μ²/N) Σ_j Tr(X_j) · Tr(Z_j)` with
/// `X_j = (A2ᵀA1ᵀ)ʲ A2ᵀCᵀR_vCA2 (A1A2)ʲ` and `Z_j = (I−μR_u)ʲ R_u (I−μR_u)ʲ`.
/// `C` must be doubly stochastic so that every node sees `R_k = R_u`.
pub fn uniform_profile_msd(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    c: &DMatrix<f64>,
    rv: &DMatrix<f64>,
    ru: &DMatrix<f64>,
    mu: f64,
    max_terms: usize,
) -> Result<f64> {
    let n = a1.nrows();
    let m = ru.nrows();
    if !stochmat::is_kind(c, Kind::DoublyStochastic, KIND_TOL) {
        return Err(Error::Precondition("the decoupled form needs a doubly stochastic C".into()));
    }
    let p = a2.transpose() * a1.transpose();
    let d = DMatrix::identity(m, m) - ru * mu;
    let rho = linalg::spectral_radius(&p)? * linalg::spectral_radius(&d)?;
    if !(rho < 1.0) {
        return Err(Error::Instability(format!("ρ(B) = {rho} ≥ 1")));
    }
    let mut x = a2.transpose() * c.transpose() * rv * c * a2;
    let mut z = ru.clone();
    let pt = p.transpose();
    let mut sum = 0.0;
    for _ in 0..max_terms {
        let term = x.trace() * z.trace();
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
        x = &p * x * &pt;
        z = &d * z * &d;
    }
    Ok(mu * mu * sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowStatus {
    Holds,
    Violated,
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub relation: String,
    /// Left-to-right values of the chained inequality.
    pub values: Vec<f64>,
    /// Smallest gap between consecutive values (`rhs − lhs`).
    pub margin: f64,
    #[serde(flatten)]
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub msd_atc: f64,
    pub msd_cta: f64,
    pub msd_lms: f64,
    pub msd_atc_no_exchange: f64,
    pub msd_cta_no_exchange: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn all_hold(&self) -> bool {
        !self.rows.iter().any(|r| r.status == RowStatus::Violated)
    }
}

fn network_msd(model: &EnsembleModel, cfg: &DiffusionConfig) -> Result<f64> {
    let (_, c, rep) = analyse(model, cfg)?;
    if !rep.stable_ms {
        return Err(Error::Instability(format!("ρ(B) = {} ≥ 1", c.rho_b)));
    }
    Ok(rep.msd_network)
}

/// `lhs ≤ rhs` up to rounding.
fn leq(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-10 * rhs.abs().max(lhs.abs()) + 1e-300
}

fn chain_row(relation: &str, values: Vec<f64>, unmet: Option<String>) -> ComparisonRow {
    let margin = values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let status = match unmet {
        Some(reason) => RowStatus::Skipped { reason },
        None if values.windows(2).all(|w| leq(w[0], w[1])) => RowStatus::Holds,
        None => RowStatus::Violated,
    };
    ComparisonRow {
        relation: relation.into(),
        values,
        margin,
        status,
    }
}

/// Checks the MSD orderings between ATC, CTA, non-cooperative LMS and the
/// variants without data exchange (`C = I`). Each relation is asserted only
/// when its conditions hold; otherwise the row records why it was skipped.
pub fn compare_strategies(model: &EnsembleModel, a: &DMatrix<f64>, c: &DMatrix<f64>, mu: &[f64]) -> Result<ComparisonReport> {
    let n = model.n();
    let i = DMatrix::identity(n, n);
    let atc = network_msd(model, &DiffusionConfig::atc(a.clone(), c.clone(), mu.to_vec())?)?;
    let cta = network_msd(model, &DiffusionConfig::cta(a.clone(), c.clone(), mu.to_vec())?)?;
    let lms = network_msd(model, &DiffusionConfig::non_cooperative(mu.to_vec())?)?;
    let atc_i = network_msd(model, &DiffusionConfig::atc(a.clone(), i.clone(), mu.to_vec())?)?;
    let cta_i = network_msd(model, &DiffusionConfig::cta(a.clone(), i, mu.to_vec())?)?;

    let a_doubly = stochmat::is_kind(a, Kind::DoublyStochastic, KIND_TOL);
    let c_doubly = stochmat::is_kind(c, Kind::DoublyStochastic, KIND_TOL);
    let uniform = model.uniform_profile(1e-12) && mu.iter().all(|&x| x == mu[0]);
    let rv = DMatrix::from_diagonal(&DVector::from_vec(model.sigma2_v_all().to_vec()));
    let diff = &rv - c.transpose() * &rv * c;
    let scale = rv.amax().max(f64::MIN_POSITIVE);
    let eig = linalg::sym_eigenvalues(&diff);
    let ctrvc_le = eig[0] >= -1e-12 * scale;
    let ctrvc_ge = eig[eig.len() - 1] <= 1e-12 * scale;

    let need = |conds: &[(bool, &str)]| -> Option<String> {
        let missing: Vec<&str> = conds.iter().filter(|c| !c.0).map(|c| c.1).collect();
        (!missing.is_empty()).then(|| format!("requires {}", missing.join(", ")))
    };
    let exch = |le: bool, tag: &'static str| -> [(bool, &'static str); 3] {
        [
            (le, tag),
            (c_doubly, "C doubly stochastic"),
            (uniform, "uniform data profile and step sizes"),
        ]
    };

    let rows = vec![
        chain_row("atc <= cta", vec![atc, cta], need(&[(a_doubly, "A doubly stochastic")])),
        chain_row("cta(C) <= cta(C=I)", vec![cta, cta_i], need(&exch(ctrvc_le, "CᵀR_vC ≤ R_v"))),
        chain_row("cta(C=I) <= cta(C)", vec![cta_i, cta], need(&exch(ctrvc_ge, "CᵀR_vC ≥ R_v"))),
        chain_row("atc(C) <= atc(C=I)", vec![atc, atc_i], need(&exch(ctrvc_le, "CᵀR_vC ≤ R_v"))),
        chain_row("atc(C=I) <= atc(C)", vec![atc_i, atc], need(&exch(ctrvc_ge, "CᵀR_vC ≥ R_v"))),
        chain_row(
            "atc <= cta <= lms",
            vec![atc, cta, lms],
            need(&[
                (a_doubly, "A doubly stochastic"),
                (c_doubly, "C doubly stochastic"),
                (uniform, "uniform data profile and step sizes"),
            ]),
        ),
    ];
    Ok(ComparisonReport {
        msd_atc: atc,
        msd_cta: cta,
        msd_lms: lms,
        msd_atc_no_exchange: atc_i,
        msd_cta_no_exchange: cta_i,
        rows,
    })
}

/// Network MSD of diffusion over general costs, from per-node Hessians at
/// `w^o` and the gradient-noise covariance `Z` (`NM×NM`).
///
/// Hessians follow the descent convention in which the quadratic cost has
/// Hessian `R_{u,k}`.
pub fn generic_cost_report(hessians: &[DMatrix<f64>], cfg: &DiffusionConfig, z: &DMatrix<f64>) -> Result<f64> {
    check_analysable(cfg)?;
    let n = cfg.n();
    if hessians.len() != n {
        return Err(Error::Validation("one Hessian per node required".into()));
    }
    let m = hessians[0].nrows();
    let nm = n * m;
    if z.shape() != (nm, nm) {
        return Err(Error::Validation(format!("Z must be {nm}×{nm}")));
    }
    let r_blocks: Vec<DMatrix<f64>> = (0..n)
        .map(|k| {
            let mut acc = DMatrix::zeros(m, m);
            for l in 0..n {
                if cfg.c[(l, k)] != 0.0 {
                    acc += &hessians[l] * cfg.c[(l, k)];
                }
            }
            acc
        })
        .collect();
    let mblk = DMatrix::from_diagonal(&DVector::from_fn(nm, |r, _| cfg.mu[r / m]));
    let a1t = linalg::extend(&cfg.a1.transpose(), m);
    let a2t = linalg::extend(&cfg.a2.transpose(), m);
    let b = &a2t * (DMatrix::identity(nm, nm) - &mblk * linalg::block_diag(&r_blocks)) * a1t;
    let y = &a2t * &mblk * z.transpose() * &mblk * a2t.transpose();
    let c = VarianceConstructs::from_parts(b, a2t * mblk, y, n, m)?;
    let (p, _) = steady_state_covariance(&c.b, &c.y, c.rho_b)?;
    Ok(p.trace() / n as f64)
}
