//! Full-covariance Gaussian mixture clustering fitted by EM.
//!
//! Each restart seeds with k-means++ and refines with a few Lloyd iterations
//! before EM. The restart with the highest final log-likelihood wins.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, forward_substitute};
use crate::scalar::Scalar;

pub const RESTARTS: usize = 5;
pub const KMEANS_ITERATIONS: usize = 10;
pub const MAX_EM_ITERATIONS: usize = 300;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;
/// Ridge added to every covariance, relative to the mean data variance.
pub const RIDGE_SCALE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel<T> {
    pub weights: Array1<T>,
    /// K×P.
    pub means: Array2<T>,
    /// K full P×P covariances, ridge included.
    pub covariances: Vec<Array2<T>>,
    /// Log-likelihood after each E-step of the winning restart.
    pub log_likelihood_trace: Vec<f64>,
    /// Which restart produced this model.
    pub restart: usize,
}

impl<T: Scalar> GmmModel<T> {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn squared_distance<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Seeds using k-means++ and runs a fixed number of Lloyd iterations.
fn kmeans<T: Scalar>(z: ArrayView2<'_, T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = z.nrows();
    let mut centers = Array2::<T>::zeros((k, z.ncols()));
    centers.row_mut(0).assign(&z.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(z.row(i), centers.row(0)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&z.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(z.row(i), centers.row(c)).as_f64());
        }
    }

    let mut labels = vec![0usize; n];
    for iteration in 0..=KMEANS_ITERATIONS {
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (T::infinity(), 0);
            for c in 0..k {
                let d = squared_distance(z.row(i), centers.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            *label = best.1;
        }
        if iteration == KMEANS_ITERATIONS {
            break;
        }
        let mut sums = Array2::<T>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            sums.row_mut(c).scaled_add(T::one(), &z.row(i));
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / T::of_usize(counts[c])));
            }
        }
    }
    labels
}

/// Cholesky factors and log-determinants for fast density evaluation.
struct Factored<T> {
    chol: Vec<Array2<T>>,
    log_det: Vec<T>,
}

fn factor<T: Scalar>(covariances: &[Array2<T>]) -> Result<Factored<T>> {
    let mut chol = Vec::with_capacity(covariances.len());
    let mut log_det = Vec::with_capacity(covariances.len());
    for (component, cov) in covariances.iter().enumerate() {
        let l = cholesky(cov.view()).ok_or(Error::DegenerateCluster { component })?;
        log_det.push(l.diag().iter().fold(T::zero(), |acc, &v| acc + v.ln()) * T::of(2.0));
        chol.push(l);
    }
    Ok(Factored { chol, log_det })
}

/// Per-point, per-component `log(w_k) + log N(z_i | μ_k, Σ_k)`.
fn weighted_log_densities<T: Scalar>(
    z: ArrayView2<'_, T>,
    weights: &Array1<T>,
    means: &Array2<T>,
    factored: &Factored<T>,
) -> Array2<T> {
    let (n, p) = z.dim();
    let k = weights.len();
    let log_2pi = T::of((2.0 * std::f64::consts::PI).ln());
    let half = T::of(0.5);
    let mut out = Array2::zeros((n, k));
    let mut buf = vec![T::zero(); p];
    for c in 0..k {
        let constant = weights[c].ln() - half * (T::of_usize(p) * log_2pi + factored.log_det[c]);
        for i in 0..n {
            for (f, b) in buf.iter_mut().enumerate() {
                *b = z[[i, f]] - means[[c, f]];
            }
            forward_substitute(factored.chol[c].view(), &mut buf);
            let maha = buf.iter().fold(T::zero(), |acc, &v| acc + v * v);
            out[[i, c]] = constant - half * maha;
        }
    }
    out
}

/// Normalizes log densities in place into responsibilities; returns the total
/// log-likelihood.
fn normalize_rows<T: Scalar>(log_dens: &mut Array2<T>) -> f64 {
    let mut total = 0.0;
    for mut row in log_dens.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + sum.ln();
        total += lse.as_f64();
        row.mapv_inplace(|v| (v - lse).exp());
    }
    total
}

struct Components<T> {
    weights: Array1<T>,
    means: Array2<T>,
    covariances: Vec<Array2<T>>,
}

fn m_step<T: Scalar>(z: ArrayView2<'_, T>, resp: &Array2<T>, ridge: T) -> Result<Components<T>> {
    let (n, p) = z.dim();
    let k = resp.ncols();
    let mut weights = Array1::zeros(k);
    let mut means = Array2::zeros((k, p));
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let r = resp.column(c);
        let nk = r.sum();
        if nk < T::one() {
            return Err(Error::DegenerateCluster { component: c });
        }
        weights[c] = nk / T::of_usize(n);
        let mean = r.dot(&z) / nk;
        let centered = &z - &mean.view().insert_axis(Axis(0));
        let weighted = &centered * &r.view().insert_axis(Axis(1));
        let mut cov = weighted.t().dot(&centered) / nk;
        for f in 0..p {
            cov[[f, f]] += ridge;
        }
        means.row_mut(c).assign(&mean);
        covariances.push(cov);
    }
    Ok(Components {
        weights,
        means,
        covariances,
    })
}

fn ridge_for<T: Scalar>(z: ArrayView2<'_, T>) -> T {
    let n = T::of_usize(z.nrows());
    let mean = z.sum_axis(Axis(0)) / n;
    let trace = z
        .rows()
        .into_iter()
        .fold(T::zero(), |acc, row| acc + squared_distance(row, mean.view()))
        / n;
    let ridge = T::of(RIDGE_SCALE) * trace / T::of_usize(z.ncols());
    if ridge > T::zero() {
        ridge
    } else {
        T::of(RIDGE_SCALE)
    }
}

fn run_em<T: Scalar>(z: ArrayView2<'_, T>, k: usize, ridge: T, rng: &mut ChaCha8Rng) -> Result<(Components<T>, Vec<f64>)> {
    let labels = kmeans(z, k, rng);
    let mut hard = Array2::<T>::zeros((z.nrows(), k));
    for (i, &c) in labels.iter().enumerate() {
        hard[[i, c]] = T::one();
    }
    let mut params = m_step(z, &hard, ridge)?;
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..MAX_EM_ITERATIONS {
        let factored = factor(&params.covariances)?;
        let mut resp = weighted_log_densities(z, &params.weights, &params.means, &factored);
        let ll = normalize_rows(&mut resp);
        let converged = trace
            .last()
            .is_some_and(|&prev| (ll - prev).abs() < RELATIVE_TOLERANCE * prev.abs());
        trace.push(ll);
        if converged {
            break;
        }
        params = m_step(z, &resp, ridge)?;
    }
    Ok((params, trace))
}

/// Seed for restart `r`, derived from the master seed.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Fits a `k`-component mixture; deterministic per seed.
pub fn fit_gmm<T: Scalar>(z: ArrayView2<'_, T>, k: usize, seed: u64) -> Result<GmmModel<T>> {
    let n = z.nrows();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    if z.ncols() == 0 || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("clustering input must be finite with at least one column".into()));
    }
    let ridge = ridge_for(z);
    let mut best: Option<GmmModel<T>> = None;
    let mut last_error = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, restart));
        match run_em(z, k, ridge, &mut rng) {
            Ok((params, trace)) => {
                let ll = *trace.last().expect("at least one E-step");
                if best.as_ref().is_none_or(|b| ll > b.log_likelihood()) {
                    best = Some(GmmModel {
                        weights: params.weights,
                        means: params.means,
                        covariances: params.covariances,
                        log_likelihood_trace: trace,
                        restart,
                    });
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    best.ok_or_else(|| last_error.expect("every restart either succeeds or fails"))
}

/// Posterior responsibilities, N×K.
pub fn responsibilities<T: Scalar>(model: &GmmModel<T>, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if z.ncols() != model.means.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} features, input has {}",
            model.means.ncols(),
            z.ncols()
        )));
    }
    let factored = factor(&model.covariances)?;
    let mut resp = weighted_log_densities(z, &model.weights, &model.means, &factored);
    normalize_rows(&mut resp);
    Ok(resp)
}

/// Hard labels by maximum posterior; ties go to the smaller component.
pub fn assign<T: Scalar>(model: &GmmModel<T>, z: ArrayView2<'_, T>) -> Result<Vec<usize>> {
    let resp = responsibilities(model, z)?;
    Ok(resp
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
