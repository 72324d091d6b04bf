//! Survey-weighted Metropolis-within-Gibbs engine.
//!
//! The chain targets the weighted complete-data pseudo-posterior: each
//! individual's likelihood contribution enters multiplied by its survey
//! weight, priors are as documented on [`Priors`], and the point estimates
//! are post-burn-in chain means (a frequentist pseudo-likelihood estimator,
//! not a Bayesian posterior summary).
//!
//! One sweep updates, in fixed order: all latent `W` rows, all random
//! effects `U`, each coefficient row `beta_j`, `Sigma_u`, then every error
//! covariance parameter (radii and angles on their grids, `v` entries by
//! uniform random walk). Latent updates use unit weight regardless of the
//! survey weight; parameter updates scale their data terms by it.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovMatrix, EpsParamId, PatternedCovParams};
use crate::data_model::{build_design, DesignMatrices, SurveyDataset, Term};
use crate::error::{Error, Result};

/// Prior settings. Defaults follow the standardized-data conventions:
/// `beta ~ N(0, 100)` per coordinate, `Sigma_u ~ IW((m_u - d - 1) * S0, m_u)`
/// with `S0` exchangeable (unit diagonal, correlation 0.5) and `m_u = 21`,
/// radii `Uniform[-1, 1]`, angles `Uniform[-pi, pi]`, `v` entries
/// `Uniform[-3, 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub beta_variance: f64,
    pub sigma_u_correlation: f64,
    pub m_u: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_variance: 100.0,
            sigma_u_correlation: 0.5,
            m_u: 21.0,
        }
    }
}

impl Priors {
    /// Exchangeable prior scale matrix for `Sigma_u`.
    pub fn sigma_u_prior(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                1.0
            } else {
                self.sigma_u_correlation
            }
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.m_u > dim as f64 + 1.0) {
            return Err(Error::validation(format!(
                "inverse-Wishart degrees of freedom {} must exceed dim + 1 = {}",
                self.m_u,
                dim + 1
            )));
        }
        if !(self.beta_variance > 0.0) {
            return Err(Error::validation("beta prior variance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Grid points `M` for the radius/angle proposals; odd, at least 3.
    pub grid_points: usize,
    /// Length of the uniform proposal window for `v` entries.
    pub proposal_window: f64,
    /// Batch count `a` for batch-means MCSE.
    pub batch_count: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 70_000,
            burnin: 20_000,
            thin: 1,
            seed: 0,
            grid_points: 41,
            proposal_window: 0.4,
            batch_count: 50,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnin >= self.iterations {
            return Err(Error::validation(format!(
                "burn-in {} leaves no iterations out of {}",
                self.burnin, self.iterations
            )));
        }
        if self.grid_points < 3 || self.grid_points % 2 == 0 {
            return Err(Error::validation("grid point count must be odd and >= 3"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thinning interval must be >= 1"));
        }
        Ok(())
    }
}

/// Standardized observations and design matrices, frozen for the fit.
#[derive(Debug, Clone)]
pub struct FitData {
    /// `q[i][k]`: indicator rows hold 0/1; observed amount rows hold the
    /// standardized transformed amount; unobserved amounts are NaN.
    pub q: Vec<Vec<DVector<f64>>>,
    pub design: DesignMatrices,
    pub weights: Vec<f64>,
    pub n_episodic: usize,
    pub n_daily: usize,
    /// `sum_i w_i * m_i`.
    pub sum_w_m: f64,
    /// `sum_i w_i sum_k x x'` (shared across response rows).
    pub sxx: DMatrix<f64>,
}

impl FitData {
    pub fn prepare(d: &SurveyDataset, formula: &[Term]) -> Result<FitData> {
        if !d.preprocessed {
            return Err(Error::validation(
                "dataset must be preprocessed before fitting (zeros present in daily columns?)",
            ));
        }
        d.validate()?;
        let spec = &d.spec;
        let design = build_design(d, formula)?;
        let n_rows = spec.n_rows();
        let mut q = Vec::with_capacity(d.individuals.len());
        for ind in &d.individuals {
            let mut per = Vec::with_capacity(ind.recalls.len());
            for rec in &ind.recalls {
                let mut v = DVector::from_element(n_rows, f64::NAN);
                for l in 0..spec.n_episodic() {
                    let ind_row = spec.indicator_row(l);
                    let amt_row = spec.episodic_amount_row(l);
                    let qv = rec.responses[ind_row];
                    v[ind_row] = qv;
                    if qv == 1.0 {
                        let t = d.transform(l)?;
                        v[amt_row] = t.g_tr(rec.responses[amt_row])?;
                    }
                }
                for a in spec.n_episodic()..spec.n_amounts() {
                    let row = spec.row_of_amount_index(a);
                    let t = d.transform(a)?;
                    v[row] = t.g_tr(rec.responses[row])?;
                }
                per.push(v);
            }
            q.push(per);
        }
        let weights: Vec<f64> = d.individuals.iter().map(|i| i.weight).collect();
        let sum_w_m = d.weighted_recall_count();
        let p = design.n_coefficients();
        let mut sxx = DMatrix::zeros(p, p);
        for (i, ind) in d.individuals.iter().enumerate() {
            for k in 0..ind.recalls.len() {
                let x = design.row(i, k);
                sxx.syger(ind.weight, x, x, 1.0);
            }
        }
        Ok(FitData {
            q,
            design,
            weights,
            n_episodic: spec.n_episodic(),
            n_daily: spec.n_daily(),
            sum_w_m,
            sxx,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.q.len()
    }

    pub fn n_recalls(&self, i: usize) -> usize {
        self.q[i].len()
    }

    pub fn n_rows(&self) -> usize {
        2 * self.n_episodic + self.n_daily + 1
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.n_coefficients()
    }
}

/// Current state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub beta: Vec<DVector<f64>>,
    pub sigma_u: DMatrix<f64>,
    pub eps_params: PatternedCovParams,
    pub sigma_eps: CovMatrix,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<Vec<DVector<f64>>>,
}

/// Point estimates: post-burn-in chain means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimates {
    pub term_labels: Vec<String>,
    pub n_episodic: usize,
    pub n_daily: usize,
    /// Row-major coefficient means, one vector per response row.
    pub beta: Vec<Vec<f64>>,
    pub sigma_u: Vec<Vec<f64>>,
    pub sigma_eps: Vec<Vec<f64>>,
    pub eps_param_labels: Vec<String>,
    pub eps_param_means: Vec<f64>,
}

impl ParameterEstimates {
    pub fn sigma_u_matrix(&self) -> DMatrix<f64> {
        matrix_from_rows(&self.sigma_u)
    }

    pub fn sigma_eps_matrix(&self) -> DMatrix<f64> {
        matrix_from_rows(&self.sigma_eps)
    }

    pub fn beta_vectors(&self) -> Vec<DVector<f64>> {
        self.beta
            .iter()
            .map(|b| DVector::from_column_slice(b))
            .collect()
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Thinned scalar draws retained for Monte Carlo diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedDraws {
    pub labels: Vec<String>,
    /// `draws[t][s]`: retained iteration `t`, scalar `s`.
    pub draws: Vec<Vec<f64>>,
}

impl RetainedDraws {
    pub fn column(&self, s: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[s]).collect()
    }
}

/// Acceptance counts per proposal family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub r: (u64, u64),
    pub theta: (u64, u64),
    pub v_diag: (u64, u64),
    pub v_free: (u64, u64),
}

impl AcceptanceStats {
    fn rate(pair: (u64, u64)) -> f64 {
        if pair.1 == 0 {
            f64::NAN
        } else {
            pair.0 as f64 / pair.1 as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimates: ParameterEstimates,
    pub draws: RetainedDraws,
    pub acceptance: AcceptanceStats,
}

pub struct Sampler<'a> {
    pub data: &'a FitData,
    pub priors: Priors,
    pub cfg: ChainConfig,
    pub state: ChainState,
    rng: ChaCha8Rng,
    r_grid: Vec<f64>,
    theta_grid: Vec<f64>,
    /// Current grid index per radius / angle parameter.
    r_idx: Vec<usize>,
    theta_idx: Vec<usize>,
    pub acceptance: AcceptanceStats,
}

impl<'a> Sampler<'a> {
    /// Starting values: observed rows copy the data, consumption rows get a
    /// sign-consistent magnitude draw, then one sweep of the latent updates.
    pub fn init(data: &'a FitData, priors: Priors, cfg: ChainConfig) -> Result<Sampler<'a>> {
        cfg.validate()?;
        let n_rows = data.n_rows();
        priors.validate(n_rows)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = data.n_coefficients();
        let beta = vec![DVector::zeros(p); n_rows];
        let sigma_u = priors.sigma_u_prior(n_rows);
        let eps_params = PatternedCovParams::identity(data.n_episodic, data.n_daily);
        let sigma_eps = eps_params.sigma_eps()?;

        let prior_chol = Cholesky::new(sigma_u.clone())
            .ok_or_else(|| Error::numerical("random-effect prior matrix is not positive definite"))?;
        let mut u = Vec::with_capacity(data.n_individuals());
        let mut w = Vec::with_capacity(data.n_individuals());
        for i in 0..data.n_individuals() {
            let z = DVector::from_fn(n_rows, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ui = prior_chol.l() * z;
            let mut per = Vec::with_capacity(data.n_recalls(i));
            for k in 0..data.n_recalls(i) {
                let q = &data.q[i][k];
                let mut wk = DVector::zeros(n_rows);
                for row in 0..n_rows {
                    if let Some(l) = consumption_component(data, row) {
                        // beta prior mean is zero, so X'beta_prior vanishes.
                        let noise: f64 = rng.sample(StandardNormal);
                        let z = (ui[row] + noise).abs();
                        let qv = q[row];
                        wk[row] = z * qv - z * (1.0 - qv);
                        let _ = l;
                    } else if q[row].is_nan() {
                        wk[row] = 0.0; // unobserved amount, resampled below
                    } else {
                        wk[row] = q[row];
                    }
                }
                per.push(wk);
            }
            u.push(ui);
            w.push(per);
        }

        let m = cfg.grid_points;
        let r_grid: Vec<f64> = (0..m)
            .map(|j| -0.99 + 2.0 * 0.99 * j as f64 / (m as f64 - 1.0))
            .collect();
        let theta_grid: Vec<f64> = (0..m)
            .map(|j| {
                std::f64::consts::PI * (-0.99 + 2.0 * 0.99 * j as f64 / (m as f64 - 1.0))
            })
            .collect();
        let center = m / 2; // initial radii/angles are zero, the grid midpoint

        let mut sampler = Sampler {
            data,
            priors,
            cfg,
            state: ChainState {
                beta,
                sigma_u,
                eps_params,
                sigma_eps,
                u,
                w,
            },
            rng,
            r_idx: vec![center; 0],
            theta_idx: vec![center; 0],
            r_grid,
            theta_grid,
            acceptance: AcceptanceStats::default(),
        };
        sampler.r_idx = vec![center; sampler.state.eps_params.r.len()];
        sampler.theta_idx = vec![center; sampler.state.eps_params.theta.len()];

        // Single application of the latent updates to settle W.
        for i in 0..sampler.data.n_individuals() {
            for k in 0..sampler.data.n_recalls(i) {
                sampler.update_w_recall(i, k);
            }
        }
        Ok(sampler)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Weighted complete-data pseudo-loglikelihood at the current state.
    /// Returns negative infinity when a latent `W` sign contradicts its
    /// observed indicator.
    pub fn complete_loglik(&self) -> f64 {
        let s = &self.state;
        let d = self.data;
        let n_rows = d.n_rows();
        let j_dim = n_rows as f64;

        // Indicator consistency.
        for i in 0..d.n_individuals() {
            for k in 0..d.n_recalls(i) {
                for l in 0..d.n_episodic {
                    let row = 2 * l;
                    let q = d.q[i][k][row];
                    let w = s.w[i][k][row];
                    if (q == 1.0 && w <= 0.0) || (q == 0.0 && w >= 0.0) {
                        return f64::NEG_INFINITY;
                    }
                }
            }
        }

        let sigma_u_chol = match Cholesky::new(s.sigma_u.clone()) {
            Some(c) => c,
            None => return f64::NEG_INFINITY,
        };
        let sigma_u_inv = sigma_u_chol.inverse();
        let logdet_u_inv = -2.0 * (0..n_rows).map(|i| sigma_u_chol.l()[(i, i)].ln()).sum::<f64>();

        let sum_w: f64 = d.weights.iter().sum();
        let mut ll = 0.5 * sum_w * logdet_u_inv;
        for i in 0..d.n_individuals() {
            ll -= 0.5 * d.weights[i] * (s.u[i].transpose() * &sigma_u_inv * &s.u[i])[(0, 0)];
        }

        // beta prior.
        let inv_var = 1.0 / self.priors.beta_variance;
        for b in &s.beta {
            ll -= 0.5 * inv_var * b.dot(b);
        }

        // Sigma_u prior (inverse-Wishart kernel).
        let m_u = self.priors.m_u;
        ll += 0.5 * (m_u + j_dim + 1.0) * logdet_u_inv;
        ll -= 0.5 * (m_u - j_dim - 1.0)
            * (self.priors.sigma_u_prior(n_rows) * &sigma_u_inv).trace();

        // Error covariance normalization via the closed-form log-determinant.
        let logdet_eps = match s.eps_params.logdet() {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        ll -= 0.5 * d.sum_w_m * logdet_eps;

        // Weighted Gaussian quadratic in the W residuals.
        for i in 0..d.n_individuals() {
            for k in 0..d.n_recalls(i) {
                let r = self.residual(i, k);
                ll -= 0.5 * d.weights[i] * (r.transpose() * &s.sigma_eps.inv * &r)[(0, 0)];
            }
        }
        ll
    }

    /// `W_ik - (X'beta_1, ..., X'beta_J)' - U_i`.
    fn residual(&self, i: usize, k: usize) -> DVector<f64> {
        let x = self.data.design.row(i, k);
        let n_rows = self.data.n_rows();
        DVector::from_fn(n_rows, |row, _| {
            self.state.w[i][k][row] - x.dot(&self.state.beta[row]) - self.state.u[i][row]
        })
    }

    /// One full sweep in the fixed scan order.
    pub fn sweep(&mut self) -> Result<()> {
        for i in 0..self.data.n_individuals() {
            for k in 0..self.data.n_recalls(i) {
                self.update_w_recall(i, k);
            }
        }
        self.update_u_all();
        for j in 0..self.data.n_rows() {
            self.update_beta_row(j)?;
        }
        self.update_sigma_u()?;
        self.update_eps_params()?;
        Ok(())
    }

    /// Latent-row updates for one recall: truncated-normal consumption rows,
    /// then Gaussian draws for unobserved amounts. Observed rows untouched.
    pub fn update_w_recall(&mut self, i: usize, k: usize) {
        let n_rows = self.data.n_rows();
        let x = self.data.design.row(i, k);
        let mut mu = DVector::zeros(n_rows);
        for row in 0..n_rows {
            mu[row] = x.dot(&self.state.beta[row]) + self.state.u[i][row];
        }
        let mut res = DVector::zeros(n_rows);
        for row in 0..n_rows {
            res[row] = self.state.w[i][k][row] - mu[row];
        }
        let inv = self.state.sigma_eps.inv.clone();
        for l in 0..self.data.n_episodic {
            let row = 2 * l;
            let (mean, sd) = conditional_scalar(&inv, &mu, &res, row);
            let q = self.data.q[i][k][row];
            let draw = if q == 1.0 {
                mean + sd * tn_plus_std(-mean / sd, &mut self.rng)
            } else {
                mean - sd * tn_plus_std(mean / sd, &mut self.rng)
            };
            self.state.w[i][k][row] = draw;
            res[row] = draw - mu[row];
        }
        for l in 0..self.data.n_episodic {
            let row = 2 * l + 1;
            if !self.data.q[i][k][row].is_nan() {
                continue; // observed amount, never resampled
            }
            let (mean, sd) = conditional_scalar(&inv, &mu, &res, row);
            let z: f64 = self.rng.sample(StandardNormal);
            let draw = mean + sd * z;
            self.state.w[i][k][row] = draw;
            res[row] = draw - mu[row];
        }
    }

    /// Closed-form conditional moments of one latent row given the others,
    /// at the current state.
    pub fn w_conditional_moments(&self, i: usize, k: usize, row: usize) -> (f64, f64) {
        let n_rows = self.data.n_rows();
        let x = self.data.design.row(i, k);
        let mut mu = DVector::zeros(n_rows);
        let mut res = DVector::zeros(n_rows);
        for r in 0..n_rows {
            mu[r] = x.dot(&self.state.beta[r]) + self.state.u[i][r];
            res[r] = self.state.w[i][k][r] - mu[r];
        }
        conditional_scalar(&self.state.sigma_eps.inv, &mu, &res, row)
    }

    /// Random-effect updates. Unit weight per individual by construction:
    /// the weight expands an individual into pseudo-copies that share one
    /// latent vector, so it cancels from this conditional.
    pub fn update_u_all(&mut self) {
        let mut per_m: BTreeMap<usize, Cholesky<f64, nalgebra::Dyn>> = BTreeMap::new();
        let sigma_u_inv = match Cholesky::new(self.state.sigma_u.clone()) {
            Some(c) => c.inverse(),
            None => return,
        };
        for i in 0..self.data.n_individuals() {
            let m_i = self.data.n_recalls(i);
            if !per_m.contains_key(&m_i) {
                let prec = &sigma_u_inv + m_i as f64 * &self.state.sigma_eps.inv;
                let c2 = Cholesky::new(prec)
                    .expect("posterior precision of U must be positive definite")
                    .inverse();
                per_m.insert(m_i, Cholesky::new(c2).unwrap());
            }
            let c2_chol = per_m.get(&m_i).unwrap();
            let mut c1 = DVector::zeros(self.data.n_rows());
            for k in 0..m_i {
                let x = self.data.design.row(i, k);
                let dev = DVector::from_fn(self.data.n_rows(), |row, _| {
                    self.state.w[i][k][row] - x.dot(&self.state.beta[row])
                });
                c1 += &self.state.sigma_eps.inv * dev;
            }
            let mean = c2_chol.l() * c2_chol.l().transpose() * c1;
            let z = DVector::from_fn(self.data.n_rows(), |_, _| {
                self.rng.sample::<f64, _>(StandardNormal)
            });
            self.state.u[i] = mean + c2_chol.l() * z;
        }
    }

    /// Closed-form conditional moments of `U_i` at the current state.
    pub fn u_conditional_moments(&self, i: usize) -> (DVector<f64>, DMatrix<f64>) {
        let m_i = self.data.n_recalls(i);
        let sigma_u_inv = Cholesky::new(self.state.sigma_u.clone()).unwrap().inverse();
        let prec = &sigma_u_inv + m_i as f64 * &self.state.sigma_eps.inv;
        let c2 = Cholesky::new(prec).unwrap().inverse();
        let mut c1 = DVector::zeros(self.data.n_rows());
        for k in 0..m_i {
            let x = self.data.design.row(i, k);
            let dev = DVector::from_fn(self.data.n_rows(), |row, _| {
                self.state.w[i][k][row] - x.dot(&self.state.beta[row])
            });
            c1 += &self.state.sigma_eps.inv * dev;
        }
        (&c2 * c1, c2)
    }

    /// Gaussian conjugate update of one coefficient row.
    pub fn update_beta_row(&mut self, j: usize) -> Result<()> {
        let (mean, c2) = self.beta_conditional_moments(j);
        let chol = Cholesky::new(c2).ok_or_else(|| {
            Error::numerical(format!("beta row {j}: conditional covariance not positive definite"))
        })?;
        let z = DVector::from_fn(self.data.n_coefficients(), |_, _| {
            self.rng.sample::<f64, _>(StandardNormal)
        });
        self.state.beta[j] = mean + chol.l() * z;
        Ok(())
    }

    /// Closed-form conditional moments of `beta_j` at the current state.
    pub fn beta_conditional_moments(&self, j: usize) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.data.n_coefficients();
        let inv = &self.state.sigma_eps.inv;
        let sjj = inv[(j, j)];
        let mut prec = DMatrix::identity(p, p) / self.priors.beta_variance;
        prec += sjj * &self.data.sxx;
        let c2 = Cholesky::new(prec)
            .expect("beta conditional precision must be positive definite")
            .inverse();

        let n_rows = self.data.n_rows();
        let mut c1 = DVector::zeros(p);
        for i in 0..self.data.n_individuals() {
            let w_i = self.data.weights[i];
            for k in 0..self.data.n_recalls(i) {
                let x = self.data.design.row(i, k);
                let mut scalar = sjj * (self.state.w[i][k][j] - self.state.u[i][j]);
                for l in 0..n_rows {
                    if l == j {
                        continue;
                    }
                    let res_l =
                        self.state.w[i][k][l] - x.dot(&self.state.beta[l]) - self.state.u[i][l];
                    scalar += inv[(j, l)] * res_l;
                }
                c1.axpy(w_i * scalar, x, 1.0);
            }
        }
        (&c2 * c1, c2)
    }

    /// Inverse-Wishart update of the random-effect covariance.
    pub fn update_sigma_u(&mut self) -> Result<()> {
        let n_rows = self.data.n_rows();
        let j_dim = n_rows as f64;
        let mut scale =
            (self.priors.m_u - j_dim - 1.0) * self.priors.sigma_u_prior(n_rows);
        for i in 0..self.data.n_individuals() {
            scale.syger(self.data.weights[i], &self.state.u[i], &self.state.u[i], 1.0);
        }
        let df = self.data.n_individuals() as f64 + self.priors.m_u;
        self.state.sigma_u = draw_inverse_wishart(&scale, df, &mut self.rng)?;
        Ok(())
    }

    /// Scale matrix and degrees of freedom of the `Sigma_u` conditional.
    pub fn sigma_u_conditional(&self) -> (DMatrix<f64>, f64) {
        let n_rows = self.data.n_rows();
        let j_dim = n_rows as f64;
        let mut scale =
            (self.priors.m_u - j_dim - 1.0) * self.priors.sigma_u_prior(n_rows);
        for i in 0..self.data.n_individuals() {
            scale.syger(self.data.weights[i], &self.state.u[i], &self.state.u[i], 1.0);
        }
        (scale, self.data.n_individuals() as f64 + self.priors.m_u)
    }

    /// Weighted residual second-moment matrix `sum_i w_i sum_k r r'`, which
    /// is all the data the error-covariance conditionals need.
    pub fn residual_outer_sum(&self) -> DMatrix<f64> {
        let n_rows = self.data.n_rows();
        let mut s = DMatrix::zeros(n_rows, n_rows);
        for i in 0..self.data.n_individuals() {
            for k in 0..self.data.n_recalls(i) {
                let r = self.residual(i, k);
                s.syger(self.data.weights[i], &r, &r, 1.0);
            }
        }
        // syger fills the lower triangle; mirror it.
        for a in 0..n_rows {
            for b in (a + 1)..n_rows {
                s[(a, b)] = s[(b, a)];
            }
        }
        s
    }

    /// Metropolis-within-Gibbs scan over all error-covariance parameters.
    pub fn update_eps_params(&mut self) -> Result<()> {
        let s_mat = self.residual_outer_sum();
        let ids = self.state.eps_params.param_ids();
        for id in ids {
            self.update_eps_param(id, &s_mat)?;
        }
        Ok(())
    }

    /// Log of the conditional target for the error-covariance parameters:
    /// the parameter-dependent part of the normalization plus the Gaussian
    /// quadratic, evaluated through the residual second-moment matrix.
    fn eps_log_target(
        params: &PatternedCovParams,
        id: EpsParamId,
        s_mat: &DMatrix<f64>,
        sum_w_m: f64,
    ) -> Option<(f64, CovMatrix)> {
        let cov = params.sigma_eps().ok()?;
        let quad = (&cov.inv * s_mat).trace();
        let norm = match id {
            EpsParamId::R(t) => {
                let f = 1.0 - params.r[t] * params.r[t];
                -0.5 * sum_w_m * f.ln()
            }
            EpsParamId::VDiag(q) => {
                // |y|^{-sum w_i m_i}; the diagonal is kept positive so the
                // absolute value is the value itself.
                -sum_w_m * params.v_diag[q].abs().ln()
            }
            EpsParamId::Theta(_) | EpsParamId::VFree(_, _) => 0.0,
        };
        Some((norm - 0.5 * quad, cov))
    }

    /// One Metropolis step for a single error-covariance parameter.
    pub fn update_eps_param(&mut self, id: EpsParamId, s_mat: &DMatrix<f64>) -> Result<()> {
        let sum_w_m = self.data.sum_w_m;
        let proposal = match id {
            EpsParamId::R(t) => {
                let idx = self.r_idx[t];
                let cand = grid_candidates(idx, self.r_grid.len());
                let pick = cand[self.rng.gen_range(0..cand.len())];
                Some((self.r_grid[pick], Some(pick)))
            }
            EpsParamId::Theta(t) => {
                let idx = self.theta_idx[t];
                let cand = grid_candidates(idx, self.theta_grid.len());
                let pick = cand[self.rng.gen_range(0..cand.len())];
                Some((self.theta_grid[pick], Some(pick)))
            }
            EpsParamId::VDiag(_) | EpsParamId::VFree(_, _) => {
                let half = self.cfg.proposal_window / 2.0;
                let current = self.state.eps_params.get(id);
                let prop = current + self.rng.gen_range(-half..half);
                let in_support = match id {
                    EpsParamId::VDiag(_) => prop > 0.0 && prop <= 3.0,
                    _ => (-3.0..=3.0).contains(&prop),
                };
                if in_support {
                    Some((prop, None))
                } else {
                    None // outside the prior support: reject outright
                }
            }
        };
        let family = match id {
            EpsParamId::R(_) => &mut self.acceptance.r,
            EpsParamId::Theta(_) => &mut self.acceptance.theta,
            EpsParamId::VDiag(_) => &mut self.acceptance.v_diag,
            EpsParamId::VFree(_, _) => &mut self.acceptance.v_free,
        };
        family.1 += 1;
        let Some((prop_value, prop_idx)) = proposal else {
            return Ok(());
        };

        let current_value = self.state.eps_params.get(id);
        if prop_value == current_value {
            // Identical proposal: ratio is one, always accepted.
            match id {
                EpsParamId::R(_) => self.acceptance.r.0 += 1,
                EpsParamId::Theta(_) => self.acceptance.theta.0 += 1,
                EpsParamId::VDiag(_) => self.acceptance.v_diag.0 += 1,
                EpsParamId::VFree(_, _) => self.acceptance.v_free.0 += 1,
            }
            return Ok(());
        }

        let Some((log_old, _)) =
            Self::eps_log_target(&self.state.eps_params, id, s_mat, sum_w_m)
        else {
            return Err(Error::numerical("current error covariance became invalid"));
        };
        let mut proposed = self.state.eps_params.clone();
        proposed.set(id, prop_value);
        let Some((log_new, cov_new)) = Self::eps_log_target(&proposed, id, s_mat, sum_w_m) else {
            return Ok(()); // singular proposal: reject
        };
        let delta = (log_new - log_old).clamp(-700.0, 700.0);
        let accept = delta >= 0.0 || self.rng.gen::<f64>() < delta.exp();
        if accept {
            self.state.eps_params = proposed;
            self.state.sigma_eps = cov_new;
            match id {
                EpsParamId::R(t) => {
                    self.r_idx[t] = prop_idx.unwrap();
                    self.acceptance.r.0 += 1;
                }
                EpsParamId::Theta(t) => {
                    self.theta_idx[t] = prop_idx.unwrap();
                    self.acceptance.theta.0 += 1;
                }
                EpsParamId::VDiag(_) => self.acceptance.v_diag.0 += 1,
                EpsParamId::VFree(_, _) => self.acceptance.v_free.0 += 1,
            }
        }
        Ok(())
    }
}

/// Consumption row index check: `Some(l)` when `row` is the indicator row of
/// episodic component `l`.
fn consumption_component(data: &FitData, row: usize) -> Option<usize> {
    if row < 2 * data.n_episodic && row % 2 == 0 {
        Some(row / 2)
    } else {
        None
    }
}

/// Conditional mean and standard deviation of coordinate `row` of a Gaussian
/// with precision `inv`, mean stack `mu`, given residuals `res` elsewhere.
fn conditional_scalar(
    inv: &DMatrix<f64>,
    mu: &DVector<f64>,
    res: &DVector<f64>,
    row: usize,
) -> (f64, f64) {
    let spp = inv[(row, row)];
    let mut cross = 0.0;
    for j in 0..inv.nrows() {
        if j != row {
            cross += inv[(row, j)] * res[j];
        }
    }
    (mu[row] - cross / spp, (1.0 / spp).sqrt())
}

/// Standard truncated normal `TN_+(0, 1, c)`: plain rejection below zero,
/// exponential-tilt rejection (Robert's scheme) for positive cutoffs.
pub fn tn_plus_std(c: f64, rng: &mut impl Rng) -> f64 {
    if c <= 0.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > c {
                return z;
            }
        }
    } else {
        let alpha = (c + (c * c + 4.0).sqrt()) / 2.0;
        loop {
            let e: f64 = rng.gen::<f64>();
            let x = c - (1.0 - e).ln() / alpha;
            let rho = (-(x - alpha) * (x - alpha) / 2.0).exp();
            if rng.gen::<f64>() < rho {
                return x;
            }
        }
    }
}

/// Inverse-Wishart draw with scale `omega` and degrees of freedom `df`
/// (density `|Q|^{-(df+d+1)/2} exp(-tr(omega Q^{-1})/2)`, mean
/// `omega/(df-d-1)`), via a Bartlett-decomposed Wishart draw of the inverse.
pub fn draw_inverse_wishart(
    omega: &DMatrix<f64>,
    df: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let d = omega.nrows();
    if df <= (d - 1) as f64 {
        return Err(Error::numerical(format!(
            "inverse-Wishart degrees of freedom {df} too small for dimension {d}"
        )));
    }
    let omega_inv = Cholesky::new(omega.clone())
        .ok_or_else(|| Error::numerical("inverse-Wishart scale matrix not positive definite"))?
        .inverse();
    let l = Cholesky::new(omega_inv)
        .ok_or_else(|| Error::numerical("inverse-Wishart scale inverse not positive definite"))?;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = Gamma::new((df - i as f64) / 2.0, 2.0)
            .map_err(|e| Error::numerical(format!("invalid chi-square shape: {e}")))?;
        a[(i, i)] = chi2.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let factor = l.l() * a;
    let wishart = &factor * factor.transpose();
    let precision_chol = Cholesky::new(wishart)
        .ok_or_else(|| Error::numerical("Wishart draw not positive definite"))?;
    Ok(precision_chol.inverse())
}

/// In-grid members of `{idx-1, idx, idx+1}`: the 3-candidate proposal set,
/// shrinking to 2 candidates at the grid edges.
pub fn grid_candidates(idx: usize, n: usize) -> Vec<usize> {
    let mut cand = Vec::with_capacity(3);
    if idx > 0 {
        cand.push(idx - 1);
    }
    cand.push(idx);
    if idx + 1 < n {
        cand.push(idx + 1);
    }
    cand
}

/// One step of the 3-candidate grid Metropolis kernel with plain acceptance
/// ratio `min(1, g(new)/g(old))`.
pub fn grid_mh_step(
    idx: usize,
    n: usize,
    log_g: impl Fn(usize) -> f64,
    rng: &mut impl Rng,
) -> usize {
    let cand = grid_candidates(idx, n);
    let pick = cand[rng.gen_range(0..cand.len())];
    if pick == idx {
        return idx;
    }
    let delta = (log_g(pick) - log_g(idx)).clamp(-700.0, 700.0);
    if delta >= 0.0 || rng.gen::<f64>() < delta.exp() {
        pick
    } else {
        idx
    }
}

/// Batch-means Monte Carlo standard error of a chain average.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMeans {
    pub mcse: f64,
    pub sigma2: f64,
    pub batch_size: usize,
    /// Trailing draws dropped so that the length divides into `a` batches.
    pub trimmed: usize,
}

pub fn batch_means_mcse(draws: &[f64], a: usize) -> Result<BatchMeans> {
    if a < 2 {
        return Err(Error::validation("batch count must be at least 2"));
    }
    let b = draws.len() / a;
    if b < 2 {
        return Err(Error::validation(format!(
            "batch size {b} too small: need at least 2 draws per batch ({} draws, {a} batches)",
            draws.len()
        )));
    }
    let n = a * b;
    let trimmed = draws.len() - n;
    let used = &draws[..n];
    let grand = used.iter().sum::<f64>() / n as f64;
    let mut sigma2 = 0.0;
    for j in 0..a {
        let batch_mean = used[j * b..(j + 1) * b].iter().sum::<f64>() / b as f64;
        sigma2 += (batch_mean - grand) * (batch_mean - grand);
    }
    sigma2 *= b as f64 / (a as f64 - 1.0);
    Ok(BatchMeans {
        mcse: (sigma2 / n as f64).sqrt(),
        sigma2,
        batch_size: b,
        trimmed,
    })
}

/// Runs the chain and returns post-burn-in means plus retained thinned draws.
/// `diag_log`, when given, receives one line per thinned iteration with the
/// pseudo-loglikelihood and family acceptance rates.
pub fn run_chain(
    d: &SurveyDataset,
    formula: &[Term],
    priors: &Priors,
    cfg: &ChainConfig,
    mut diag_log: Option<&mut dyn IoWrite>,
) -> Result<FitResult> {
    let data = FitData::prepare(d, formula)?;
    let mut sampler = Sampler::init(&data, priors.clone(), cfg.clone())?;
    let n_rows = data.n_rows();
    let p = data.n_coefficients();

    // Scalar labels for retained draws.
    let mut labels = Vec::new();
    for j in 0..n_rows {
        for t in 0..p {
            labels.push(format!("beta[{j}][{t}]"));
        }
    }
    for a in 0..n_rows {
        for b in a..n_rows {
            labels.push(format!("sigma_u[{a}][{b}]"));
        }
    }
    let eps_labels = eps_param_labels(&sampler.state.eps_params);
    labels.extend(eps_labels.iter().cloned());

    let kept = cfg.iterations - cfg.burnin;
    let mut beta_sum = vec![DVector::<f64>::zeros(p); n_rows];
    let mut sigma_u_sum = DMatrix::<f64>::zeros(n_rows, n_rows);
    let mut sigma_eps_sum = DMatrix::<f64>::zeros(n_rows, n_rows);
    let ids = sampler.state.eps_params.param_ids();
    let mut eps_sum = vec![0.0; ids.len()];
    let mut draws = Vec::with_capacity(kept / cfg.thin + 1);

    for iter in 0..cfg.iterations {
        sampler.sweep()?;
        if iter < cfg.burnin {
            continue;
        }
        for j in 0..n_rows {
            beta_sum[j] += &sampler.state.beta[j];
        }
        sigma_u_sum += &sampler.state.sigma_u;
        sigma_eps_sum += &sampler.state.sigma_eps.sigma;
        for (s, &id) in ids.iter().enumerate() {
            eps_sum[s] += sampler.state.eps_params.get(id);
        }
        if (iter - cfg.burnin) % cfg.thin == 0 {
            let mut row = Vec::with_capacity(labels.len());
            for j in 0..n_rows {
                row.extend(sampler.state.beta[j].iter().copied());
            }
            for a in 0..n_rows {
                for b in a..n_rows {
                    row.push(sampler.state.sigma_u[(a, b)]);
                }
            }
            for &id in &ids {
                row.push(sampler.state.eps_params.get(id));
            }
            draws.push(row);
            if let Some(log) = diag_log.as_deref_mut() {
                let ll = sampler.complete_loglik();
                if ll.is_nan() || ll == f64::INFINITY {
                    return Err(Error::numerical(format!(
                        "non-finite pseudo-loglikelihood {ll} at iteration {iter}"
                    )));
                }
                writeln!(
                    log,
                    "iter={iter} loglik={ll:.6} acc_r={:.4} acc_theta={:.4} acc_vdiag={:.4} acc_vfree={:.4}",
                    AcceptanceStats::rate(sampler.acceptance.r),
                    AcceptanceStats::rate(sampler.acceptance.theta),
                    AcceptanceStats::rate(sampler.acceptance.v_diag),
                    AcceptanceStats::rate(sampler.acceptance.v_free),
                )?;
            }
        }
    }

    let kf = kept as f64;
    let estimates = ParameterEstimates {
        term_labels: data.design.term_labels.clone(),
        n_episodic: data.n_episodic,
        n_daily: data.n_daily,
        beta: beta_sum
            .iter()
            .map(|b| b.iter().map(|v| v / kf).collect())
            .collect(),
        sigma_u: matrix_to_rows(&(&sigma_u_sum / kf)),
        sigma_eps: matrix_to_rows(&(&sigma_eps_sum / kf)),
        eps_param_labels: eps_labels,
        eps_param_means: eps_sum.iter().map(|v| v / kf).collect(),
    };
    Ok(FitResult {
        estimates,
        draws: RetainedDraws { labels, draws },
        acceptance: sampler.acceptance,
    })
}

/// Human-readable labels for the covariance parameters, in scan order.
pub fn eps_param_labels(params: &PatternedCovParams) -> Vec<String> {
    let j = params.n_episodic;
    params
        .param_ids()
        .iter()
        .map(|id| match *id {
            EpsParamId::R(t) => format!("r[{}]", t + 1),
            EpsParamId::Theta(s) => format!("theta[{}]", s + 1),
            EpsParamId::VDiag(q) => {
                let row = if q < j { 2 * (q + 1) } else { 2 * j + (q - j) + 1 };
                format!("v[{row},{row}]")
            }
            EpsParamId::VFree(ri, ci) => {
                let row = if ri < j - 1 { 2 * (ri + 2) } else { 2 * j + (ri - (j - 1)) + 1 };
                format!("v[{row},{}]", ci + 1)
            }
        })
        .collect()
}
