#![allow(dead_code)]

use diffnet::datamodel::EnsembleModel;
use diffnet::graph::{self, Topology};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> Topology {
    graph::random_geometric(n, 0.45, rng).unwrap()
}

/// Random left-stochastic matrix supported on the topology (columns sum to one).
pub fn random_left_stochastic(t: &Topology, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = t.n();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let hood = t.neighborhood(k);
        let w: Vec<f64> = hood.iter().map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        for (&l, x) in hood.iter().zip(w) {
            a[(l, k)] = x / s;
        }
    }
    a
}

pub fn random_right_stochastic(t: &Topology, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    random_left_stochastic(t, rng).transpose()
}

/// Metropolis weights written out directly: `1/max(n_k, n_l)` off the diagonal.
pub fn metropolis(t: &Topology) -> DMatrix<f64> {
    let n = t.n();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        for &l in t.neighborhood(k) {
            if l != k {
                a[(l, k)] = 1.0 / t.degree(k).max(t.degree(l)) as f64;
            }
        }
    }
    for k in 0..n {
        let off: f64 = (0..n).filter(|&l| l != k).map(|l| a[(l, k)]).sum();
        a[(k, k)] = 1.0 - off;
    }
    a
}

pub fn random_spd(m: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let x = DMatrix::from_fn(m, m, |_, _| normal(rng));
    let q = x.qr().q();
    let d: DVector<f64> = DVector::from_fn(m, |_, _| lo + (hi - lo) * rng.random::<f64>());
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

pub fn random_symmetric(m: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let x: DMatrix<f64> = DMatrix::from_fn(m, m, |_, _| scale * rng.random::<f64>() - scale / 2.0);
    (&x + x.transpose()) * 0.5
}

pub fn uniform_model(n: usize, m: usize, rng: &mut ChaCha8Rng) -> EnsembleModel {
    let ru = random_spd(m, 0.5, 2.0, rng);
    let s2 = 0.001 + 0.009 * rng.random::<f64>();
    let wo = DVector::from_fn(m, |_, _| normal(rng));
    EnsembleModel::uniform(wo, ru, s2, n).unwrap()
}

pub fn random_model(n: usize, m: usize, rng: &mut ChaCha8Rng) -> EnsembleModel {
    let ru = (0..n).map(|_| random_spd(m, 0.5, 2.0, rng)).collect();
    let s2 = (0..n).map(|_| 0.001 + 0.009 * rng.random::<f64>()).collect();
    let wo = DVector::from_fn(m, |_, _| normal(rng));
    EnsembleModel::new(wo, ru, s2).unwrap()
}

fn set_block(x: &mut DMatrix<f64>, k: usize, l: usize, m: usize, b: &DMatrix<f64>) {
    x.view_mut((k * m, l * m), (m, m)).copy_from(b);
}

/// Error-recursion matrices of the general diffusion form, built block by block:
/// `B_kl = Σ_j a2_jk (I − μ_j R_j) a1_lj` and
/// `Y_kl = Σ_{j,p} a2_jk a2_pl μ_j μ_p G_jp`, `G_jp = Σ_q c_qj c_qp σ²_q R_q`.
pub fn oracle_b_y(
    model: &EnsembleModel,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    c: &DMatrix<f64>,
    mu: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (model.n(), model.m());
    let eye = DMatrix::<f64>::identity(m, m);
    let rk: Vec<DMatrix<f64>> = (0..n)
        .map(|k| (0..n).fold(DMatrix::zeros(m, m), |acc, l| acc + model.ru(l) * c[(l, k)]))
        .collect();
    let mut b = DMatrix::zeros(n * m, n * m);
    for k in 0..n {
        for l in 0..n {
            let mut blk = DMatrix::zeros(m, m);
            for j in 0..n {
                let w = a2[(j, k)] * a1[(l, j)];
                if w != 0.0 {
                    blk += (&eye - &rk[j] * mu[j]) * w;
                }
            }
            set_block(&mut b, k, l, m, &blk);
        }
    }
    let g = |j: usize, p: usize| -> DMatrix<f64> {
        (0..n).fold(DMatrix::zeros(m, m), |acc, q| {
            acc + model.ru(q) * (c[(q, j)] * c[(q, p)] * model.sigma2_v(q))
        })
    };
    let mut y = DMatrix::zeros(n * m, n * m);
    for j in 0..n {
        for p in 0..n {
            let gjp = g(j, p) * (mu[j] * mu[p]);
            for k in 0..n {
                for l in 0..n {
                    let w = a2[(j, k)] * a2[(p, l)];
                    if w != 0.0 {
                        let cur = y.view((k * m, l * m), (m, m)).clone_owned();
                        set_block(&mut y, k, l, m, &(cur + &gjp * w));
                    }
                }
            }
        }
    }
    (b, y)
}

/// Steady-state error covariance by plain iteration of `P ← B P Bᵀ + Y`.
pub fn fixed_point_covariance(b: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = y.clone();
    for _ in 0..5_000_000 {
        let next = b * &p * b.transpose() + y;
        let delta = (&next - &p).amax();
        p = next;
        if delta <= 1e-15 * p.amax() {
            break;
        }
    }
    p
}

/// Network MSD and EMSE `(Tr P / N, Σ Tr(P_kk R_k) / N)`.
pub fn oracle_msd_emse(model: &EnsembleModel, p: &DMatrix<f64>) -> (f64, f64) {
    let (n, m) = (model.n(), model.m());
    let msd = p.trace() / n as f64;
    let emse = (0..n)
        .map(|k| (p.view((k * m, k * m), (m, m)) * model.ru(k)).trace())
        .sum::<f64>()
        / n as f64;
    (msd, emse)
}

pub fn oracle_network_msd(
    model: &EnsembleModel,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    c: &DMatrix<f64>,
    mu: &[f64],
) -> f64 {
    let (b, y) = oracle_b_y(model, a1, a2, c, mu);
    oracle_msd_emse(model, &fixed_point_covariance(&b, &y)).0
}

pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
