//! Linear regression data model `d_k(i) = u_{k,i} w^o + v_k(i)`, its moments,
//! sampling of data and link noise, and the per-node quadratic cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    m: usize,
    wo: DVector<f64>,
    ru: Vec<DMatrix<f64>>,
    sigma2_v: Vec<f64>,
    ru_sqrt: Vec<DMatrix<f64>>,
}

/// One time instant of network data. Row `k` of `u` is the regressor `u_{k,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub d: Vec<f64>,
    pub u: DMatrix<f64>,
    pub v: Vec<f64>,
}

impl Snapshot {
    pub fn n(&self) -> usize {
        self.d.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cost {
    pub j: f64,
    /// Real-field gradient `2(R_{u,k} w − r_{du,k})`.
    pub gradient: DVector<f64>,
    pub jmin: f64,
}

impl EnsembleModel {
    pub fn new(wo: DVector<f64>, ru: Vec<DMatrix<f64>>, sigma2_v: Vec<f64>) -> Result<Self> {
        let m = wo.len();
        if m == 0 {
            return Err(Error::Validation("parameter dimension must be positive".into()));
        }
        if ru.len() != sigma2_v.len() || ru.is_empty() {
            return Err(Error::Validation(format!(
                "{} regressor covariances but {} noise variances",
                ru.len(),
                sigma2_v.len()
            )));
        }
        let mut ru_sqrt = Vec::with_capacity(ru.len());
        for (k, r) in ru.iter().enumerate() {
            if r.shape() != (m, m) {
                return Err(Error::Validation(format!("R_u at node {k} is not {m}×{m}")));
            }
            if !linalg::is_symmetric(r, 1e-12 * r.amax().max(1.0)) {
                return Err(Error::Validation(format!("R_u at node {k} is not symmetric")));
            }
            ru_sqrt.push(linalg::sym_sqrt(r).map_err(|_| {
                Error::Validation(format!("R_u at node {k} is not positive-definite"))
            })?);
        }
        if let Some(k) = sigma2_v.iter().position(|&s| !(s >= 0.0)) {
            return Err(Error::Validation(format!("noise variance at node {k} is negative")));
        }
        Ok(Self {
            m,
            wo,
            ru,
            sigma2_v,
            ru_sqrt,
        })
    }

    /// Same `R_u` and `σ²_v` at every node.
    pub fn uniform(wo: DVector<f64>, ru: DMatrix<f64>, sigma2_v: f64, n: usize) -> Result<Self> {
        Self::new(wo, vec![ru; n], vec![sigma2_v; n])
    }

    pub fn n(&self) -> usize {
        self.ru.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn wo(&self) -> &DVector<f64> {
        &self.wo
    }

    pub fn ru(&self, k: usize) -> &DMatrix<f64> {
        &self.ru[k]
    }

    pub fn ru_all(&self) -> &[DMatrix<f64>] {
        &self.ru
    }

    pub fn sigma2_v(&self, k: usize) -> f64 {
        self.sigma2_v[k]
    }

    pub fn sigma2_v_all(&self) -> &[f64] {
        &self.sigma2_v
    }

    /// `r_{du,k} = R_{u,k} w^o`.
    pub fn rdu(&self, k: usize) -> DVector<f64> {
        &self.ru[k] * &self.wo
    }

    /// `σ²_{d,k} = w^oᵀ R_{u,k} w^o + σ²_{v,k}`.
    pub fn sigma2_d(&self, k: usize) -> f64 {
        self.wo.dot(&(&self.ru[k] * &self.wo)) + self.sigma2_v[k]
    }

    /// `J_{k,min} = σ²_{d,k} − r_{du,k}ᵀ R_{u,k}⁻¹ r_{du,k}`.
    pub fn jmin(&self, k: usize) -> f64 {
        let r = self.rdu(k);
        let sol = self.ru[k]
            .clone()
            .cholesky()
            .expect("validated positive-definite")
            .solve(&r);
        self.sigma2_d(k) - r.dot(&sol)
    }

    /// `R_{u,k} w − r_{du,k}`: the gradient direction the diffusion recursions step along.
    pub fn descent_gradient(&self, k: usize, w: &DVector<f64>) -> DVector<f64> {
        &self.ru[k] * w - self.rdu(k)
    }

    pub fn quadratic_cost(&self, k: usize, w: &DVector<f64>) -> Cost {
        let r = self.rdu(k);
        let rw = &self.ru[k] * w;
        let j = self.sigma2_d(k) - 2.0 * w.dot(&r) + w.dot(&rw);
        Cost {
            j,
            gradient: (rw - r) * 2.0,
            jmin: self.jmin(k),
        }
    }

    pub fn uniform_profile(&self, tol: f64) -> bool {
        let r0 = &self.ru[0];
        self.ru.iter().all(|r| (r - r0).amax() <= tol)
    }

    pub fn sample_snapshot<R: Rng + ?Sized>(&self, rng: &mut R) -> Snapshot {
        let n = self.n();
        let m = self.m;
        let mut u = DMatrix::zeros(n, m);
        let mut d = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut z = vec![0.0; m];
        for k in 0..n {
            for zj in z.iter_mut() {
                *zj = StandardNormal.sample(rng);
            }
            let s = &self.ru_sqrt[k];
            for a in 0..m {
                let mut acc = 0.0;
                for b in 0..m {
                    acc += s[(a, b)] * z[b];
                }
                u[(k, a)] = acc;
            }
            let g: f64 = StandardNormal.sample(rng);
            v[k] = self.sigma2_v[k].sqrt() * g;
            let mut uw = 0.0;
            for a in 0..m {
                uw += u[(k, a)] * self.wo[a];
            }
            d[k] = uw + v[k];
        }
        Snapshot { d, u, v }
    }
}

/// Default generator settings for random desk-scale models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default = "default_eigen_range")]
    pub eigen_range: [f64; 2],
    #[serde(default = "default_noise_range")]
    pub noise_range: [f64; 2],
}

fn default_eigen_range() -> [f64; 2] {
    [0.5, 2.0]
}

fn default_noise_range() -> [f64; 2] {
    [0.001, 0.01]
}

impl GeneratorSpec {
    pub fn new(seed: u64, n: usize, m: usize) -> Self {
        Self {
            seed,
            n,
            m,
            eigen_range: default_eigen_range(),
            noise_range: default_noise_range(),
        }
    }
}

pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    let (lo, hi) = (range[0].ln(), range[1].ln());
    (lo + (hi - lo) * rng.random::<f64>()).exp()
}

/// Haar-like random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, m: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            let mut c = q.column_mut(j);
            c *= -1.0;
        }
    }
    q
}

/// `Q Λ Qᵀ` with eigenvalues log-uniform in `range`.
pub fn random_covariance<R: Rng + ?Sized>(rng: &mut R, m: usize, range: [f64; 2]) -> DMatrix<f64> {
    let q = random_orthogonal(rng, m);
    let lam = DVector::from_fn(m, |_, _| log_uniform(rng, range));
    let mut r = &q * DMatrix::from_diagonal(&lam) * q.transpose();
    linalg::symmetrize(&mut r);
    r
}

pub fn generate_model(spec: &GeneratorSpec) -> Result<EnsembleModel> {
    if spec.n == 0 || spec.m == 0 {
        return Err(Error::Validation("N and M must be positive".into()));
    }
    for r in [spec.eigen_range, spec.noise_range] {
        if !(r[0] > 0.0 && r[1] >= r[0]) {
            return Err(Error::Validation(format!("invalid range {r:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z: DVector<f64> = DVector::from_fn(spec.m, |_, _| StandardNormal.sample(&mut rng));
    let wo = &z / z.norm();
    let ru = (0..spec.n)
        .map(|_| random_covariance(&mut rng, spec.m, spec.eigen_range))
        .collect();
    let sigma2_v = (0..spec.n)
        .map(|_| log_uniform(&mut rng, spec.noise_range))
        .collect();
    EnsembleModel::new(wo, ru, sigma2_v)
}

/// Model as written in an experiment document: explicit moments or a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Explicit {
        wo: Vec<f64>,
        /// One row-major `M×M` array per node.
        ru: Vec<Vec<Vec<f64>>>,
        sigma2_v: Vec<f64>,
    },
    Generator(GeneratorSpec),
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Validation("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ModelSpec {
    pub fn build(&self) -> Result<EnsembleModel> {
        match self {
            ModelSpec::Explicit { wo, ru, sigma2_v } => {
                let ru = ru
                    .iter()
                    .map(|r| matrix_from_rows(r))
                    .collect::<Result<Vec<_>>>()?;
                EnsembleModel::new(DVector::from_vec(wo.clone()), ru, sigma2_v.clone())
            }
            ModelSpec::Generator(g) => generate_model(g),
        }
    }

    pub fn from_model(model: &EnsembleModel) -> Self {
        ModelSpec::Explicit {
            wo: model.wo().iter().copied().collect(),
            ru: model.ru_all().iter().map(matrix_to_rows).collect(),
            sigma2_v: model.sigma2_v_all().to_vec(),
        }
    }
}

/// Noise covariances on one directed link `ℓ → k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPair {
    pub rw: DMatrix<f64>,
    pub rpsi: DMatrix<f64>,
    pub sigma2_d: f64,
    rw_sqrt: DMatrix<f64>,
    rpsi_sqrt: DMatrix<f64>,
}

impl LinkPair {
    pub fn new(rw: DMatrix<f64>, rpsi: DMatrix<f64>, sigma2_d: f64) -> Result<Self> {
        let rw_sqrt = linalg::psd_sqrt(&rw)?;
        let rpsi_sqrt = linalg::psd_sqrt(&rpsi)?;
        if !(sigma2_d >= 0.0) {
            return Err(Error::Validation("link data-noise variance is negative".into()));
        }
        Ok(Self {
            rw,
            rpsi,
            sigma2_d,
            rw_sqrt,
            rpsi_sqrt,
        })
    }

    pub fn zero(m: usize) -> Self {
        Self::new(DMatrix::zeros(m, m), DMatrix::zeros(m, m), 0.0).expect("zero is valid")
    }
}

/// Additive exchange noise on every directed link `ℓ → k`, `ℓ ∈ N_k \ {k}`.
/// Regressors are exchanged without noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkNoiseModel {
    n: usize,
    m: usize,
    pairs: Vec<Option<LinkPair>>,
}

/// Noise draws indexed by `ℓ·N + k`; zero for self-pairs and non-links.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDraws {
    pub n: usize,
    pub vw: Vec<DVector<f64>>,
    pub vpsi: Vec<DVector<f64>>,
    pub vd: Vec<f64>,
}

impl LinkDraws {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            vw: vec![DVector::zeros(m); n * n],
            vpsi: vec![DVector::zeros(m); n * n],
            vd: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn idx(&self, l: usize, k: usize) -> usize {
        l * self.n + k
    }
}

impl LinkNoiseModel {
    pub fn new(t: &Topology, m: usize) -> Self {
        let n = t.n();
        let mut pairs = vec![None; n * n];
        for k in 0..n {
            for &l in t.neighborhood(k) {
                if l != k {
                    pairs[l * n + k] = Some(LinkPair::zero(m));
                }
            }
        }
        Self { n, m, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn set(&mut self, l: usize, k: usize, pair: LinkPair) -> Result<()> {
        if pair.rw.shape() != (self.m, self.m) || pair.rpsi.shape() != (self.m, self.m) {
            return Err(Error::Validation("link covariance has the wrong size".into()));
        }
        match self.pairs.get_mut(l * self.n + k) {
            Some(slot @ Some(_)) => {
                *slot = Some(pair);
                Ok(())
            }
            _ => Err(Error::Validation(format!("({l},{k}) is not a link"))),
        }
    }

    pub fn pair(&self, l: usize, k: usize) -> Option<&LinkPair> {
        self.pairs[l * self.n + k].as_ref()
    }

    /// Random covariances on every link: `R^{(w)}`, `R^{(ψ)}` from
    /// [`random_covariance`] scaled into `scale`, `σ²` log-uniform in `scale`.
    pub fn random<R: Rng + ?Sized>(t: &Topology, m: usize, scale: [f64; 2], rng: &mut R) -> Self {
        let mut model = Self::new(t, m);
        for idx in 0..model.pairs.len() {
            if model.pairs[idx].is_some() {
                let rw = random_covariance(rng, m, scale);
                let rpsi = random_covariance(rng, m, scale);
                let s = log_uniform(rng, scale);
                model.pairs[idx] = Some(LinkPair::new(rw, rpsi, s).expect("random link is valid"));
            }
        }
        model
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LinkDraws {
        let mut out = LinkDraws::zeros(self.n, self.m);
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut LinkDraws) {
        let m = self.m;
        let mut z = DVector::zeros(m);
        for (idx, pair) in self.pairs.iter().enumerate() {
            let Some(p) = pair else { continue };
            if p.rw.iter().any(|&x| x != 0.0) {
                z.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
                out.vw[idx].gemv(1.0, &p.rw_sqrt, &z, 0.0);
            } else {
                out.vw[idx].fill(0.0);
            }
            if p.rpsi.iter().any(|&x| x != 0.0) {
                z.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
                out.vpsi[idx].gemv(1.0, &p.rpsi_sqrt, &z, 0.0);
            } else {
                out.vpsi[idx].fill(0.0);
            }
            out.vd[idx] = if p.sigma2_d != 0.0 {
                let g: f64 = StandardNormal.sample(rng);
                p.sigma2_d.sqrt() * g
            } else {
                0.0
            };
        }
    }

    /// `R^{(w)}_{v,k} = Σ_ℓ a²_{1,ℓk} R^{(w)}_{ℓk}` per node.
    pub fn aggregate_w(&self, a1: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        self.aggregate(a1, |p| &p.rw)
    }

    /// `R^{(ψ)}_{v,k} = Σ_ℓ a²_{2,ℓk} R^{(ψ)}_{ℓk}` per node.
    pub fn aggregate_psi(&self, a2: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        self.aggregate(a2, |p| &p.rpsi)
    }

    fn aggregate(&self, a: &DMatrix<f64>, pick: impl Fn(&LinkPair) -> &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        (0..self.n)
            .map(|k| {
                let mut acc = DMatrix::zeros(self.m, self.m);
                for l in 0..self.n {
                    if let Some(p) = self.pair(l, k) {
                        acc += pick(p) * (a[(l, k)] * a[(l, k)]);
                    }
                }
                acc
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.pairs.iter().flatten().all(|p| {
            p.sigma2_d == 0.0 && p.rw.iter().all(|&x| x == 0.0) && p.rpsi.iter().all(|&x| x == 0.0)
        })
    }
}
