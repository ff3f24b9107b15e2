//! Diffusion recursive least squares.
//!
//! Three recursions over the same data:
//!
//! * [`drls_step`]: each node folds its neighbours' data in one rank-one
//!   update at a time, then averages the intermediate estimates.
//! * [`drls_alt_step`]: the same recursion written with `P⁻¹` and `q = P⁻¹ψ`.
//! * [`crls_step`]: a consensus-type scheme in which nodes also exchange
//!   `P⁻¹` and `q`.

use nalgebra::{DMatrix, DVector};

use crate::datamodel::{EnsembleModel, Snapshot};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::linalg;
use crate::montecarlo;
use crate::stochmat::{self, Kind};

pub const DEFAULT_DELTA: f64 = 1e4;
pub const DEFAULT_LAMBDA: f64 = 0.995;
/// Asymmetry above which a step reports a warning.
pub const ASYMMETRY_WARN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RlsNodeState {
    pub w: DVector<f64>,
    pub p: DMatrix<f64>,
    pub lambda: f64,
}

impl RlsNodeState {
    pub fn new(m: usize, delta: f64, lambda: f64) -> Result<Self> {
        check_params(delta, lambda)?;
        Ok(Self {
            w: DVector::zeros(m),
            p: DMatrix::identity(m, m) * delta,
            lambda,
        })
    }
}

fn check_params(delta: f64, lambda: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("δ must be positive, got {delta}")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Validation(format!("λ must lie in (0,1], got {lambda}")));
    }
    Ok(())
}

pub fn init_states(n: usize, m: usize, delta: f64, lambda: f64) -> Result<Vec<RlsNodeState>> {
    (0..n).map(|_| RlsNodeState::new(m, delta, lambda)).collect()
}

/// State of the information-form recursions: the last intermediate
/// estimate, `P⁻¹` and `q = P⁻¹ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNodeState {
    pub psi: DVector<f64>,
    pub pinv: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lambda: f64,
}

impl InfoNodeState {
    pub fn new(m: usize, delta: f64, lambda: f64) -> Result<Self> {
        check_params(delta, lambda)?;
        Ok(Self {
            psi: DVector::zeros(m),
            pinv: DMatrix::identity(m, m) / delta,
            q: DVector::zeros(m),
            lambda,
        })
    }
}

pub fn init_info_states(n: usize, m: usize, delta: f64, lambda: f64) -> Result<Vec<InfoNodeState>> {
    (0..n).map(|_| InfoNodeState::new(m, delta, lambda)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Scalars received by each node during the step.
    pub exchanged_scalars: Vec<usize>,
    /// Largest asymmetry removed by symmetrization.
    pub max_asymmetry: f64,
    /// Nodes whose matrix drifted by more than [`ASYMMETRY_WARN`].
    pub asymmetry_warnings: Vec<usize>,
}

impl StepInfo {
    fn new(exchanged_scalars: Vec<usize>) -> Self {
        Self {
            exchanged_scalars,
            max_asymmetry: 0.0,
            asymmetry_warnings: Vec::new(),
        }
    }

    fn symmetrize(&mut self, k: usize, p: &mut DMatrix<f64>) {
        let a = linalg::max_asymmetry(p);
        if a > ASYMMETRY_WARN {
            self.asymmetry_warnings.push(k);
        }
        self.max_asymmetry = self.max_asymmetry.max(a);
        linalg::symmetrize(p);
    }
}

/// Per-node receive count for diffusion RLS: `{d_ℓ, u_ℓ, ψ_ℓ}` from each neighbour.
pub fn drls_exchanged_scalars(t: &Topology, m: usize) -> Vec<usize> {
    t.degrees().iter().map(|&nk| nk * (1 + 2 * m)).collect()
}

/// Per-node receive count for consensus RLS: additionally `P⁻¹_ℓ` and `q_ℓ`.
pub fn crls_exchanged_scalars(t: &Topology, m: usize) -> Vec<usize> {
    t.degrees().iter().map(|&nk| nk * (m * m + 2 * m + 1)).collect()
}

fn check_inputs(n: usize, m: usize, t: &Topology, snap: &Snapshot) -> Result<()> {
    if t.n() != n || snap.d.len() != n || snap.u.shape() != (n, m) {
        return Err(Error::Validation("RLS inputs disagree on network dimensions".into()));
    }
    Ok(())
}

fn check_matrix(name: &str, x: &DMatrix<f64>, kind: Kind, t: &Topology) -> Result<()> {
    let n = t.n();
    if x.shape() != (n, n) {
        return Err(Error::Validation(format!("{name} must be {n}×{n}")));
    }
    if !stochmat::is_kind(x, kind, 1e-9) {
        return Err(Error::Validation(format!("{name} is not {kind:?}")));
    }
    for l in 0..n {
        for k in 0..n {
            if x[(l, k)] != 0.0 && !t.in_neighborhood(l, k) {
                return Err(Error::Validation(format!("{name} has weight on non-edge ({l},{k})")));
            }
        }
    }
    Ok(())
}

fn regressor(snap: &Snapshot, l: usize) -> DVector<f64> {
    snap.u.row(l).transpose()
}

/// Incremental update over neighbours in ascending order, then `w_k = Σ_ℓ a_ℓk ψ_ℓ`.
pub fn drls_step(
    states: &mut [RlsNodeState],
    t: &Topology,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    snap: &Snapshot,
) -> Result<StepInfo> {
    let n = states.len();
    let m = states.first().map_or(0, |s| s.w.len());
    check_inputs(n, m, t, snap)?;
    check_matrix("A", a, Kind::LeftStochastic, t)?;
    check_matrix("C", c, Kind::RightStochastic, t)?;
    let mut info = StepInfo::new(drls_exchanged_scalars(t, m));
    let mut psis = Vec::with_capacity(n);
    for (k, st) in states.iter_mut().enumerate() {
        let mut psi = st.w.clone();
        let mut p = &st.p / st.lambda;
        for &l in t.neighborhood(k) {
            let ckl = c[(l, k)];
            if ckl == 0.0 {
                continue;
            }
            let u = regressor(snap, l);
            let pu = &p * &u;
            let den = 1.0 + ckl * u.dot(&pu);
            if !(den > 0.0) {
                return Err(Error::Numerical(format!("nonpositive RLS denominator {den} at node {k}")));
            }
            let e = snap.d[l] - u.dot(&psi);
            psi += &pu * (ckl * e / den);
            p -= &pu * pu.transpose() * (ckl / den);
        }
        info.symmetrize(k, &mut p);
        st.p = p;
        psis.push(psi);
    }
    for (k, st) in states.iter_mut().enumerate() {
        let mut w = DVector::zeros(m);
        for &l in t.neighborhood(k) {
            if a[(l, k)] != 0.0 {
                w += &psis[l] * a[(l, k)];
            }
        }
        st.w = w;
    }
    Ok(info)
}

fn solve_spd(pinv: &DMatrix<f64>, q: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    pinv.clone()
        .cholesky()
        .map(|ch| ch.solve(q))
        .ok_or_else(|| Error::Numerical(format!("P⁻¹ at node {k} is not positive-definite")))
}

/// Current estimates `w_k = Σ_ℓ a_ℓk ψ_ℓ` of information-form states.
pub fn combined_estimates(states: &[InfoNodeState], t: &Topology, a: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let m = states.first().map_or(0, |s| s.psi.len());
    (0..states.len())
        .map(|k| {
            let mut w = DVector::zeros(m);
            for &l in t.neighborhood(k) {
                if a[(l, k)] != 0.0 {
                    w += &states[l].psi * a[(l, k)];
                }
            }
            w
        })
        .collect()
}

/// `w_{k,i−1} = Σ a_ℓk ψ_{ℓ,i−1}`, `P⁻¹ ← λP⁻¹ + Σ c_ℓk uᵀu`,
/// `q = λP⁻¹_old w_{k,i−1} + Σ c_ℓk uᵀd`, `ψ = P q`.
pub fn drls_alt_step(
    states: &mut [InfoNodeState],
    t: &Topology,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    snap: &Snapshot,
) -> Result<StepInfo> {
    let n = states.len();
    let m = states.first().map_or(0, |s| s.psi.len());
    check_inputs(n, m, t, snap)?;
    check_matrix("A", a, Kind::LeftStochastic, t)?;
    check_matrix("C", c, Kind::RightStochastic, t)?;
    let mut info = StepInfo::new(drls_exchanged_scalars(t, m));
    let w_prev = combined_estimates(states, t, a);
    for (k, st) in states.iter_mut().enumerate() {
        let mut q = (&st.pinv * &w_prev[k]) * st.lambda;
        let mut pinv = &st.pinv * st.lambda;
        for &l in t.neighborhood(k) {
            let ckl = c[(l, k)];
            if ckl != 0.0 {
                let u = regressor(snap, l);
                pinv += &u * u.transpose() * ckl;
                q += &u * (ckl * snap.d[l]);
            }
        }
        info.symmetrize(k, &mut pinv);
        st.psi = solve_spd(&pinv, &q, k)?;
        st.pinv = pinv;
        st.q = q;
    }
    Ok(info)
}

/// `P⁻¹_k = Σ c_ℓk [P⁻¹_ℓ + uᵀu]`, `q_k = Σ c_ℓk [q_ℓ + uᵀd]`, `ψ = P q`.
pub fn crls_step(states: &mut [InfoNodeState], t: &Topology, c: &DMatrix<f64>, snap: &Snapshot) -> Result<StepInfo> {
    let n = states.len();
    let m = states.first().map_or(0, |s| s.psi.len());
    check_inputs(n, m, t, snap)?;
    if c.shape() != (n, n) || c.iter().any(|&x| x < 0.0) {
        return Err(Error::Validation("C must be a nonnegative N×N matrix".into()));
    }
    let mut info = StepInfo::new(crls_exchanged_scalars(t, m));
    let prev: Vec<(DMatrix<f64>, DVector<f64>)> = states.iter().map(|s| (s.pinv.clone(), s.q.clone())).collect();
    for (k, st) in states.iter_mut().enumerate() {
        let mut pinv = DMatrix::zeros(m, m);
        let mut q = DVector::zeros(m);
        for &l in t.neighborhood(k) {
            let ckl = c[(l, k)];
            if ckl != 0.0 {
                let u = regressor(snap, l);
                pinv += (&prev[l].0 + &u * u.transpose()) * ckl;
                q += (&prev[l].1 + &u * snap.d[l]) * ckl;
            }
        }
        info.symmetrize(k, &mut pinv);
        st.psi = solve_spd(&pinv, &q, k)?;
        st.pinv = pinv;
        st.q = q;
    }
    Ok(info)
}

/// Network MSD learning curves of the three recursions run on shared data.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsCurves {
    pub drls: Vec<f64>,
    pub drls_alt: Vec<f64>,
    pub crls: Vec<f64>,
    /// Largest `|w_drls − w_alt|` entry seen over all trials and steps.
    pub max_form_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlsParams {
    pub delta: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
}

fn network_msd(ws: impl Iterator<Item = DVector<f64>>, wo: &DVector<f64>, n: usize) -> f64 {
    ws.map(|w| (wo - w).norm_squared()).sum::<f64>() / n as f64
}

/// Monte Carlo run of diffusion RLS (both forms) and consensus RLS with `C` as its weights.
pub fn simulate(model: &EnsembleModel, t: &Topology, a: &DMatrix<f64>, c: &DMatrix<f64>, p: &RlsParams) -> Result<RlsCurves> {
    let (n, m) = (model.n(), model.m());
    if t.n() != n {
        return Err(Error::Validation("topology and model disagree on N".into()));
    }
    if p.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let wo = model.wo();
    let runs = montecarlo::run_trials(p.seed, p.trials, |_, rng| -> Result<_> {
        let mut d = init_states(n, m, p.delta, p.lambda)?;
        let mut alt = init_info_states(n, m, p.delta, p.lambda)?;
        let mut cr = init_info_states(n, m, p.delta, 1.0)?;
        let (mut c1, mut c2, mut c3) = (Vec::new(), Vec::new(), Vec::new());
        let mut gap: f64 = 0.0;
        for _ in 0..p.iterations {
            let snap = model.sample_snapshot(rng);
            drls_step(&mut d, t, a, c, &snap)?;
            drls_alt_step(&mut alt, t, a, c, &snap)?;
            crls_step(&mut cr, t, c, &snap)?;
            let alt_w = combined_estimates(&alt, t, a);
            for (x, y) in d.iter().zip(&alt_w) {
                gap = gap.max((&x.w - y).amax());
            }
            c1.push(network_msd(d.iter().map(|s| s.w.clone()), wo, n));
            c2.push(network_msd(alt_w.into_iter(), wo, n));
            c3.push(network_msd(cr.iter().map(|s| s.psi.clone()), wo, n));
        }
        Ok((c1, c2, c3, gap))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&(Vec<f64>, Vec<f64>, Vec<f64>, f64)) -> &Vec<f64>| {
        montecarlo::mean_curve(&runs.iter().map(|r| f(r).clone()).collect::<Vec<_>>())
    };
    Ok(RlsCurves {
        drls: pick(|r| &r.0),
        drls_alt: pick(|r| &r.1),
        crls: pick(|r| &r.2),
        max_form_gap: runs.iter().map(|r| r.3).fold(0.0, f64::max),
    })
}
