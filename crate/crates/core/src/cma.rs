//! CMA-ES (maximization) with the standard default parameter formulas,
//! active covariance update and, for small populations, selective mirrored
//! sampling: the worst candidate of a generation is reflected through the
//! old mean and injected into the next one.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest eigenvalue kept when the covariance is repaired.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub population_size: usize,
    pub mu: usize,
    /// Recombination weights for all ranks; the first `mu` are positive and
    /// sum to one, the rest are non-positive.
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub cc: f64,
    pub cs: f64,
    pub c1: f64,
    pub cmu: f64,
    pub damps: f64,
    pub chi_n: f64,
    /// Number of selective mirrors injected per generation.
    pub mirrors: usize,
}

impl CmaParams {
    pub fn new(n: usize, population_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("CMA-ES dimension must be >= 1"));
        }
        if population_size < 2 {
            return Err(Error::input("CMA-ES population must be >= 2"));
        }
        let nf = n as f64;
        let lambda = population_size;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..lambda)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let pos_sum: f64 = raw[..mu].iter().sum();
        let pos_sq: f64 = raw[..mu].iter().map(|w| w * w).sum();
        let mu_eff = pos_sum * pos_sum / pos_sq;
        let neg_sum: f64 = -raw[mu..].iter().filter(|w| **w < 0.0).sum::<f64>();
        let neg_sq: f64 = raw[mu..].iter().filter(|w| **w < 0.0).map(|w| w * w).sum();
        let mu_eff_neg = if neg_sq > 0.0 { neg_sum * neg_sum / neg_sq } else { 0.0 };

        let cc = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let cs = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let cmu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let mirrors = if lambda < 6 {
            (0.5 + 0.16 * lambda.min(2 * n + 2) as f64 + 0.29) as usize
        } else {
            0
        };
        let mirror_term = 0.5 + 0.5 * (mirrors as f64 / (0.159 * lambda as f64) - 1.0).powi(2).min(1.0);
        let damps = mirror_term + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

        // negative weights scaled as in Hansen's 2016 tutorial
        let alpha_mu = 1.0 + c1 / cmu.max(1e-300);
        let alpha_mueff = 1.0 + 2.0 * mu_eff_neg / (mu_eff + 2.0);
        let alpha_pd = (1.0 - c1 - cmu) / (nf * cmu.max(1e-300));
        let neg_scale = alpha_mu.min(alpha_mueff).min(alpha_pd);
        let weights = raw
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i < mu {
                    w / pos_sum
                } else if w < 0.0 && neg_sum > 0.0 {
                    neg_scale * w / neg_sum
                } else {
                    0.0
                }
            })
            .collect();
        Ok(CmaParams {
            population_size,
            mu,
            weights,
            mu_eff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
            mirrors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub step_size: f64,
    pub covariance: DMatrix<f64>,
    /// Evolution path of the covariance.
    pub pc: DVector<f64>,
    /// Evolution path of the step size.
    pub ps: DVector<f64>,
    pub generation: usize,
    pub params: CmaParams,
    /// Number of eigenvalue repairs performed so far.
    pub repairs: usize,
    /// Mirror directions queued for the next `ask`.
    pub pending_mirrors: Vec<DVector<f64>>,
    /// Indices of the last population that were injected mirrors.
    pub mirror_indices: Vec<usize>,
}

struct Decomposition {
    /// B·D, maps standard normal draws to covariance-shaped ones.
    bd: DMatrix<f64>,
    /// C^{-1/2}
    inv_sqrt: DMatrix<f64>,
    repaired: bool,
}

fn decompose(c: &DMatrix<f64>) -> Result<Decomposition> {
    let sym = (c + c.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fault("covariance is not finite".into()));
    }
    let eig = SymmetricEigen::new(sym);
    let repaired = eig.eigenvalues.iter().any(|&e| e < EIGEN_FLOOR);
    let vals = eig.eigenvalues.map(|e| e.max(EIGEN_FLOOR));
    let b = eig.eigenvectors;
    let d = vals.map(f64::sqrt);
    let bd = &b * DMatrix::from_diagonal(&d);
    let inv_sqrt = &b * DMatrix::from_diagonal(&d.map(|x| 1.0 / x)) * b.transpose();
    Ok(Decomposition { bd, inv_sqrt, repaired })
}

impl CmaState {
    pub fn new(mean: DVector<f64>, step_size: f64, population_size: usize) -> Result<Self> {
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::input("CMA-ES step size must be positive"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("CMA-ES mean must be finite"));
        }
        let n = mean.len();
        let params = CmaParams::new(n, population_size)?;
        Ok(CmaState {
            mean,
            step_size,
            covariance: DMatrix::identity(n, n),
            pc: DVector::zeros(n),
            ps: DVector::zeros(n),
            generation: 0,
            params,
            repairs: 0,
            pending_mirrors: Vec::new(),
            mirror_indices: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `population_size` candidates from N(mean, σ²C).
    pub fn ask<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let dec = decompose(&self.covariance)?;
        if dec.repaired {
            self.repairs += 1;
            log::warn!("covariance eigenvalues floored at {EIGEN_FLOOR}");
        }
        let n = self.dim();
        let mut pop = Vec::with_capacity(self.params.population_size);
        self.mirror_indices.clear();
        for d in std::mem::take(&mut self.pending_mirrors) {
            // long mirrors get a length drawn like an ordinary sample
            let mahal = (&dec.inv_sqrt * &d).norm() / self.step_size;
            let scale = if mahal > (n as f64).sqrt() {
                let z = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(rng));
                z.norm() / mahal
            } else {
                1.0
            };
            self.mirror_indices.push(pop.len());
            pop.push(&self.mean + d * scale);
        }
        while pop.len() < self.params.population_size {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
            pop.push(&self.mean + (&dec.bd * z) * self.step_size);
        }
        Ok(pop)
    }

    /// Updates the search distribution; higher fitness is better. If every
    /// fitness is equal the generation carries no ranking information and
    /// only the generation counter advances.
    pub fn tell(&mut self, population: &[DVector<f64>], fitness: &[f64]) -> Result<()> {
        let p = &self.params;
        if population.len() != p.population_size || fitness.len() != p.population_size {
            return Err(Error::input(format!(
                "expected {} candidates and fitnesses, got {} and {}",
                p.population_size,
                population.len(),
                fitness.len()
            )));
        }
        if fitness.iter().any(|f| f.is_nan()) {
            return Err(Error::input("fitness contains NaN"));
        }
        self.generation += 1;
        if fitness.iter().all(|&f| f == fitness[0]) {
            return Ok(());
        }
        let n = self.dim();
        let nf = n as f64;
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));
        let sigma = self.step_size;
        let ys: Vec<DVector<f64>> = order.iter().map(|&i| (&population[i] - &self.mean) / sigma).collect();

        let mut y_w = DVector::zeros(n);
        for (y, w) in ys.iter().zip(&p.weights).take(p.mu) {
            y_w += y * *w;
        }
        let dec = decompose(&self.covariance)?;
        let old_mean = self.mean.clone();
        self.mean += &y_w * sigma;
        // mirror the worst candidates, but never a mirror again
        self.pending_mirrors = order
            .iter()
            .rev()
            .take(p.mirrors)
            .filter(|i| !self.mirror_indices.contains(i))
            .map(|&i| &old_mean - &population[i])
            .collect();

        let cs = p.cs;
        self.ps = &self.ps * (1.0 - cs) + &dec.inv_sqrt * &y_w * (cs * (2.0 - cs) * p.mu_eff).sqrt();
        let ps_norm = self.ps.norm();
        let denom = (1.0 - (1.0 - cs).powi(2 * self.generation as i32)).sqrt();
        let hsig = ps_norm / denom / p.chi_n < 1.4 + 2.0 / (nf + 1.0);
        let cc = p.cc;
        let h = if hsig { 1.0 } else { 0.0 };
        self.pc = &self.pc * (1.0 - cc) + &y_w * (h * (cc * (2.0 - cc) * p.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (y, &w) in ys.iter().zip(&p.weights) {
            if w == 0.0 {
                continue;
            }
            let w_eff = if w > 0.0 {
                w
            } else {
                // negative updates are normalized by the Mahalanobis length
                let m = (&dec.inv_sqrt * y).norm_squared();
                if m > 0.0 {
                    w * nf / m
                } else {
                    0.0
                }
            };
            rank_mu += y * y.transpose() * w_eff;
        }
        let w_sum: f64 = p.weights.iter().sum();
        let decay = 1.0 - p.c1 - p.cmu * w_sum + (1.0 - h) * p.c1 * cc * (2.0 - cc);
        self.covariance = &self.covariance * decay + &self.pc * self.pc.transpose() * p.c1 + rank_mu * p.cmu;
        self.covariance = (&self.covariance + self.covariance.transpose()) * 0.5;

        self.step_size *= ((cs / p.damps) * (ps_norm / p.chi_n - 1.0)).min(1.0).exp();
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::Fault(format!("CMA-ES step size degenerated to {}", self.step_size)));
        }
        let dec = decompose(&self.covariance)?;
        if dec.repaired {
            self.repairs += 1;
            log::warn!("covariance eigenvalues floored at {EIGEN_FLOOR}");
            let eig = SymmetricEigen::new(self.covariance.clone());
            let vals = eig.eigenvalues.map(|e| e.max(EIGEN_FLOOR));
            self.covariance = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        }
        Ok(())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.covariance.clone()).eigenvalues.min()
    }
}

/// Default population 4 + ⌊3 ln n⌋.
pub fn default_population(n: usize) -> usize {
    4 + (3.0 * (n.max(1) as f64).ln()).floor() as usize
}

/// Runs ask/tell until `max_evals` evaluations; returns the final state and
/// the number of evaluations used.
pub fn maximize<R: Rng + ?Sized>(
    f: impl Fn(&DVector<f64>) -> f64,
    mut state: CmaState,
    max_evals: usize,
    stop: impl Fn(&CmaState) -> bool,
    rng: &mut R,
) -> Result<(CmaState, usize)> {
    let mut evals = 0;
    while evals + state.params.population_size <= max_evals && !stop(&state) {
        let pop = state.ask(rng)?;
        let fit: Vec<f64> = pop.iter().map(&f).collect();
        evals += pop.len();
        state.tell(&pop, &fit)?;
    }
    Ok((state, evals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_parameters_for_dimension_24() {
        // reference values from the published formulas, evaluated independently
        let p = CmaParams::new(24, 5).unwrap();
        assert_eq!(p.mu, 2);
        assert_eq!(p.mirrors, 1);
        assert!((p.mu_eff - 1.6496498388807412).abs() < 1e-12);
        assert!((p.cc - 0.14460203036709365).abs() < 1e-12);
        assert!((p.cs - 0.11907639591532829).abs() < 1e-12);
        assert!((p.c1 - 0.0031165286428883315).abs() < 1e-12);
        assert!((p.damps - 0.6523227073745268).abs() < 1e-12);
        assert_eq!(CmaParams::new(24, 13).unwrap().mirrors, 0);
    }

    fn sphere_run(start: f64, sigma: f64, seed: u64, budget: usize) -> (f64, usize) {
        let s = CmaState::new(DVector::from_element(24, start), sigma, 5).unwrap();
        let (st, ev) = maximize(
            |x| -x.norm_squared(),
            s,
            budget,
            |s| s.mean.norm() < 1e-3,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        (st.mean.norm(), ev)
    }

    #[test]
    fn sphere_from_far_start() {
        for seed in 0..3 {
            let (norm, ev) = sphere_run(5.0, 5.0, seed, 2000);
            assert!(norm < 1e-3, "seed {seed}: {norm} after {ev}");
        }
    }

    #[test]
    fn displaced_optimum_within_1000_evaluations() {
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let xs = DVector::from_fn(24, |_, _| r.random_range(-1.0..1.0));
            let s = CmaState::new(&xs + DVector::from_element(24, 0.01), 0.02, 5).unwrap();
            let (st, ev) = maximize(
                |x| -(x - &xs).norm_squared(),
                s,
                1000,
                |s| (&s.mean - &xs).norm() < 1e-3,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            assert!((&st.mean - &xs).norm() < 1e-3, "seed {seed} after {ev}");
        }
    }

    #[test]
    fn rotated_quadratic_optimum() {
        // x* and the rotation are arbitrary; condition number 100
        let n = 5;
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let xs = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let m = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let q = m.qr().q();
        let d = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 10f64.powf(2.0 * i as f64 / (n - 1) as f64)));
        let h = &q * d * q.transpose();
        let f = |x: &DVector<f64>| -((x - &xs).transpose() * &h * (x - &xs))[0];
        let s = CmaState::new(DVector::zeros(n), 0.5, 5).unwrap();
        let (st, _) = maximize(f, s, 1000, |s| (&s.mean - &xs).norm() < 1e-5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((&st.mean - &xs).norm() < 1e-4, "{}", (&st.mean - &xs).norm());
    }

    #[test]
    fn mirrors_reflect_worst_candidate() {
        let mut s = CmaState::new(DVector::zeros(4), 0.1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pop = s.ask(&mut rng).unwrap();
        assert!(s.mirror_indices.is_empty());
        let fit: Vec<f64> = pop.iter().map(|x| -x.norm_squared()).collect();
        let worst = (0..5).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).unwrap();
        s.tell(&pop, &fit).unwrap();
        assert_eq!(s.pending_mirrors.len(), 1);
        let dir = &s.pending_mirrors[0];
        assert!((dir + &pop[worst]).norm() < 1e-12);
        s.ask(&mut rng).unwrap();
        assert_eq!(s.mirror_indices, vec![0]);
    }

    #[test]
    fn weights_are_normalized() {
        let p = CmaParams::new(24, 13).unwrap();
        let pos: f64 = p.weights[..p.mu].iter().sum();
        assert!((pos - 1.0).abs() < 1e-12);
        assert!(p.weights[p.mu..].iter().all(|&w| w <= 0.0));
        assert!(p.mu_eff > 1.0 && p.mu_eff <= p.mu as f64);
    }

    #[test]
    fn tiny_step_collapses_samples() {
        let mut s = CmaState::new(DVector::from_element(24, 0.3), 1e-8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            draws.extend(s.ask(&mut rng).unwrap());
        }
        let n = draws.len() as f64;
        let mean = draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let std = (draws.iter().map(|d| (d[0] - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(std < 1e-6);
    }

    #[test]
    fn unit_covariance_sample_std() {
        let mut s = CmaState::new(DVector::zeros(24), 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            draws.extend(s.ask(&mut rng).unwrap());
        }
        let n = draws.len() as f64;
        for k in 0..24 {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n;
            let std = (draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std - 1.0).abs() < 0.05, "coord {k}: {std}");
        }
    }

    #[test]
    fn equal_fitness_keeps_mean() {
        let mut s = CmaState::new(DVector::from_element(24, 1.0), 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pop = s.ask(&mut rng).unwrap();
        let before = s.mean.clone();
        s.tell(&pop, &[2.0; 5]).unwrap();
        assert_eq!(s.mean, before);
        assert_eq!(s.generation, 1);
    }

    #[test]
    fn covariance_stays_symmetric_pd() {
        let mut s = CmaState::new(DVector::from_element(24, 3.0), 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let pop = s.ask(&mut rng).unwrap();
            let fit: Vec<f64> = pop.iter().map(|x| -x.norm_squared()).collect();
            s.tell(&pop, &fit).unwrap();
            assert!((&s.covariance - s.covariance.transpose()).amax() < 1e-12);
            assert!(s.min_eigenvalue() > 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CmaState::new(DVector::zeros(3), 0.0, 5).is_err());
        assert!(CmaState::new(DVector::zeros(3), 1.0, 1).is_err());
        let mut s = CmaState::new(DVector::zeros(3), 1.0, 5).unwrap();
        let pop = s.ask(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.tell(&pop[..4], &[0.0; 4]).is_err());
    }
}
