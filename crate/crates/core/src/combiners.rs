//! Combination-weight rules: static constructions from topology and node
//! statistics, plus the adaptive relative-variance estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Topology};
use crate::stochmat::{CombinationMatrix, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    Averaging,
    /// `A = I − γL`.
    Laplacian { gamma: f64 },
    /// Laplacian rule with `γ = 1/N`.
    MaxDegree,
    Metropolis,
    RelativeDegree,
    /// Per-node variance products `γ²_ℓ`.
    RelativeVariance { gamma2: Vec<f64> },
    /// Per-node noise variances `σ²_{v,ℓ}`.
    RelativeDegreeVariance { sigma2_v: Vec<f64> },
}

impl Rule {
    pub fn kind(&self) -> Kind {
        match self {
            Rule::Laplacian { .. } | Rule::MaxDegree | Rule::Metropolis => Kind::DoublyStochastic,
            _ => Kind::LeftStochastic,
        }
    }
}

pub fn build_combination(t: &Topology, rule: &Rule) -> Result<CombinationMatrix> {
    let n = t.n();
    let entries = match rule {
        Rule::Averaging => ratio_weighted(t, |_| 1.0, |_| 1.0),
        Rule::Laplacian { gamma } => laplacian_rule(t, *gamma)?,
        Rule::MaxDegree => laplacian_rule(t, 1.0 / n as f64)?,
        Rule::Metropolis => metropolis(t),
        Rule::RelativeDegree => ratio_weighted(t, |l| t.degree(l) as f64, |_| 1.0),
        Rule::RelativeVariance { gamma2 } => {
            check_variances(gamma2, n, "variance product")?;
            ratio_weighted(t, |_| 1.0, |l| gamma2[l])
        }
        Rule::RelativeDegreeVariance { sigma2_v } => {
            check_variances(sigma2_v, n, "noise variance")?;
            ratio_weighted(t, |l| t.degree(l) as f64, |l| sigma2_v[l])
        }
    };
    CombinationMatrix::new(entries, rule.kind(), t, 1e-12)
}

fn check_variances(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Precondition(format!(
            "expected {n} {what} values, got {}",
            v.len()
        )));
    }
    if let Some(k) = v.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Precondition(format!(
            "{what} at node {k} must be strictly positive"
        )));
    }
    Ok(())
}

/// `a_ℓk = p_ℓ / Σ_{m∈N_k} p_m` with `p_ℓ = num_ℓ·(min_m den_m / den_ℓ)`.
///
/// Scaling by the neighborhood minimum keeps the uniform-denominator case
/// bit-identical to the rule without denominators.
fn ratio_weighted(
    t: &Topology,
    num: impl Fn(usize) -> f64,
    den: impl Fn(usize) -> f64,
) -> DMatrix<f64> {
    let n = t.n();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let nk = t.neighborhood(k);
        let reference = nk.iter().map(|&l| den(l)).fold(f64::INFINITY, f64::min);
        let p: Vec<f64> = nk.iter().map(|&l| num(l) * (reference / den(l))).collect();
        let total: f64 = p.iter().sum();
        for (&l, &pl) in nk.iter().zip(&p) {
            a[(l, k)] = pl / total;
        }
    }
    a
}

fn laplacian_rule(t: &Topology, gamma: f64) -> Result<DMatrix<f64>> {
    let nmax = t.max_degree();
    let limit = if nmax > 1 {
        1.0 / (nmax - 1) as f64
    } else {
        f64::INFINITY
    };
    if !(gamma > 0.0) || gamma > limit {
        return Err(Error::Precondition(format!(
            "Laplacian rule needs 0 < γ ≤ 1/(n_max − 1) = {limit}, got {gamma}"
        )));
    }
    let n = t.n();
    Ok(DMatrix::identity(n, n) - graph::laplacian(t) * gamma)
}

fn metropolis(t: &Topology) -> DMatrix<f64> {
    let n = t.n();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut off = 0.0;
        for &l in t.neighborhood(k) {
            if l != k {
                let w = 1.0 / t.degree(k).max(t.degree(l)) as f64;
                a[(l, k)] = w;
                off += w;
            }
        }
        a[(k, k)] = 1.0 - off;
    }
    a
}

/// `γ²_ℓ = μ²_ℓ σ²_{v,ℓ} Tr(R_{u,ℓ})`.
pub fn variance_product(mu: f64, sigma2_v: f64, trace_ru: f64) -> f64 {
    mu * mu * sigma2_v * trace_ru
}

pub const DEFAULT_NU: f64 = 0.05;
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Running estimates `γ̂²_ℓk(i)` held by each node `k` for its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProductState {
    /// Entry `(ℓ, k)`; only maintained for `ℓ ∈ N_k`.
    pub gamma2: DMatrix<f64>,
    pub nu: Vec<f64>,
    pub floor: f64,
    neighborhoods: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    /// `(ℓ, a_ℓk)` for `ℓ ∈ N_k`, ascending.
    pub weights: Vec<(usize, f64)>,
    /// True when some estimate hit the inversion floor.
    pub floored: bool,
}

impl VarianceProductState {
    pub fn new(t: &Topology, nu: Vec<f64>) -> Result<Self> {
        if nu.len() != t.n() {
            return Err(Error::Precondition("one ν per node required".into()));
        }
        if let Some(k) = nu.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Precondition(format!("ν at node {k} must lie in (0,1)")));
        }
        let n = t.n();
        let mut gamma2 = DMatrix::zeros(n, n);
        for k in 0..n {
            for &l in t.neighborhood(k) {
                gamma2[(l, k)] = 1.0;
            }
        }
        Ok(Self {
            gamma2,
            nu,
            floor: DEFAULT_FLOOR,
            neighborhoods: (0..n).map(|k| t.neighborhood(k).to_vec()).collect(),
        })
    }

    pub fn uniform(t: &Topology, nu: f64) -> Result<Self> {
        Self::new(t, vec![nu; t.n()])
    }

    pub fn neighborhood(&self, k: usize) -> &[usize] {
        &self.neighborhoods[k]
    }

    /// `γ̂²_ℓk ← (1−ν_k) γ̂²_ℓk + ν_k·dist2`.
    #[inline]
    pub fn update(&mut self, l: usize, k: usize, dist2: f64) {
        let nu = self.nu[k];
        self.gamma2[(l, k)] = (1.0 - nu) * self.gamma2[(l, k)] + nu * dist2;
    }

    /// Writes the relative-variance weights of node `k` into column `k` of `a`.
    pub fn write_weights(&self, k: usize, a: &mut DMatrix<f64>) -> bool {
        let mut floored = false;
        let mut total = 0.0;
        for &l in &self.neighborhoods[k] {
            let g = self.gamma2[(l, k)];
            let g = if g < self.floor {
                floored = true;
                self.floor
            } else {
                g
            };
            total += 1.0 / g;
        }
        for &l in &self.neighborhoods[k] {
            let g = self.gamma2[(l, k)].max(self.floor);
            a[(l, k)] = (1.0 / g) / total;
        }
        floored
    }

    pub fn weights(&self, k: usize) -> WeightRow {
        let n = self.gamma2.nrows();
        let mut col = DMatrix::zeros(n, n);
        let floored = self.write_weights(k, &mut col);
        WeightRow {
            weights: self.neighborhoods[k].iter().map(|&l| (l, col[(l, k)])).collect(),
            floored,
        }
    }

    /// One estimator step at node `k`: `psi[j]` is the (possibly noisy)
    /// intermediate estimate received from the `j`-th member of `N_k`.
    pub fn adapt_weights_step(
        &mut self,
        k: usize,
        psi: &[DVector<f64>],
        w_prev_k: &DVector<f64>,
    ) -> Result<WeightRow> {
        let nk = self.neighborhoods[k].clone();
        if psi.len() != nk.len() {
            return Err(Error::Precondition(format!(
                "node {k} has {} neighbors, got {} estimates",
                nk.len(),
                psi.len()
            )));
        }
        for (&l, p) in nk.iter().zip(psi) {
            self.update(l, k, (p - w_prev_k).norm_squared());
        }
        Ok(self.weights(k))
    }
}
