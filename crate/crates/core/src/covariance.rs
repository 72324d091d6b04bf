//! The patterned error covariance for mixed episodic/daily recall data.
//!
//! With `J` episodic components, `K` daily components and energy, the error
//! vector has dimension `2J + K + 1`. Identifiability of the probit
//! consumption parts forces unit variances at the consumption rows
//! (1, 3, ..., 2J-1) and independence of each consumption/amount error pair,
//! i.e. structural zeros at (2l-1, 2l). The covariance is built as
//! `Sigma = V V'` from an unconstrained lower-triangular `V` whose
//! consumption rows are spherically parameterized (radius `r_q`, nested
//! angles `theta`) and whose amount rows carry one entry determined by the
//! orthogonality restriction. Everything else is free.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unconstrained parameters generating the patterned covariance.
///
/// Layouts (1-based row/column indices into the `(2J+K+1)` square matrix):
/// - `r[q-1]`, `q = 1..J-1`: radius of consumption row `2q+1`, in `[-1, 1]`.
/// - `theta`: `(J-1)^2` angles in `[-pi, pi]`; row `2q+1` uses the block
///   `theta[(q-1)^2 .. q^2]`.
/// - `v_diag`: diagonals of the amount rows `2, 4, ..., 2J` followed by the
///   daily/energy rows `2J+1, ..., 2J+K+1`; restricted to `(0, 3]`.
/// - `v_free`: free below-diagonal entries, one vector per row: amount rows
///   `2q` (`q = 2..J`) hold columns `1..2q-2`; daily/energy rows hold all
///   columns below the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternedCovParams {
    pub n_episodic: usize,
    pub n_daily: usize,
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub v_diag: Vec<f64>,
    pub v_free: Vec<Vec<f64>>,
}

/// Identifies one scalar parameter inside [`PatternedCovParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsParamId {
    R(usize),
    Theta(usize),
    VDiag(usize),
    /// `(row index into v_free, entry index within that row)`.
    VFree(usize, usize),
}

impl PatternedCovParams {
    pub fn new(
        n_episodic: usize,
        n_daily: usize,
        r: Vec<f64>,
        theta: Vec<f64>,
        v_diag: Vec<f64>,
        v_free: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let p = PatternedCovParams {
            n_episodic,
            n_daily,
            r,
            theta,
            v_diag,
            v_free,
        };
        p.audit()?;
        Ok(p)
    }

    /// Parameters that generate the identity covariance: all radii and angles
    /// zero, unit diagonals, zero free entries.
    pub fn identity(n_episodic: usize, n_daily: usize) -> Self {
        let j = n_episodic;
        let mut v_free = Vec::new();
        for q in 2..=j {
            v_free.push(vec![0.0; 2 * q - 2]);
        }
        for row in (2 * j + 1)..=(2 * j + n_daily + 1) {
            v_free.push(vec![0.0; row - 1]);
        }
        PatternedCovParams {
            n_episodic: j,
            n_daily,
            r: vec![0.0; j.saturating_sub(1)],
            theta: vec![0.0; j.saturating_sub(1).pow(2)],
            v_diag: vec![1.0; j + n_daily + 1],
            v_free,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.n_episodic + self.n_daily + 1
    }

    /// Dimension audit plus range checks. Rejects any layout other than the
    /// one documented on the type.
    pub fn audit(&self) -> Result<()> {
        let j = self.n_episodic;
        if j < 1 {
            return Err(Error::Covariance("need at least one episodic component".into()));
        }
        if self.r.len() != j - 1 {
            return Err(Error::Covariance(format!(
                "expected {} radii, got {}",
                j - 1,
                self.r.len()
            )));
        }
        if self.theta.len() != (j - 1) * (j - 1) {
            return Err(Error::Covariance(format!(
                "expected {} angles, got {}",
                (j - 1) * (j - 1),
                self.theta.len()
            )));
        }
        if self.v_diag.len() != j + self.n_daily + 1 {
            return Err(Error::Covariance(format!(
                "expected {} diagonal entries, got {}",
                j + self.n_daily + 1,
                self.v_diag.len()
            )));
        }
        let expected_rows = (j - 1) + self.n_daily + 1;
        if self.v_free.len() != expected_rows {
            return Err(Error::Covariance(format!(
                "expected {} free rows, got {}",
                expected_rows,
                self.v_free.len()
            )));
        }
        for (idx, row) in self.v_free.iter().enumerate() {
            let want = if idx < j - 1 {
                2 * (idx + 2) - 2
            } else {
                2 * j + (idx - (j - 1))
            };
            if row.len() != want {
                return Err(Error::Covariance(format!(
                    "free row {idx} has {} entries, expected {want}",
                    row.len()
                )));
            }
        }
        for (t, &r) in self.r.iter().enumerate() {
            if !(r.abs() <= 1.0) {
                return Err(Error::Covariance(format!("|r_{}| = {} > 1", t + 1, r.abs())));
            }
        }
        for (s, &th) in self.theta.iter().enumerate() {
            if !(th.abs() <= std::f64::consts::PI) {
                return Err(Error::Covariance(format!("|theta_{}| = {} > pi", s + 1, th.abs())));
            }
        }
        for (q, &v) in self.v_diag.iter().enumerate() {
            if !(v > 0.0 && v <= 3.0) {
                return Err(Error::Covariance(format!(
                    "diagonal entry {q} = {v} outside (0, 3]"
                )));
            }
        }
        Ok(())
    }

    /// All scalar parameters in a fixed scan order: radii, angles, diagonals,
    /// then free entries row by row.
    pub fn param_ids(&self) -> Vec<EpsParamId> {
        let mut out = Vec::new();
        for t in 0..self.r.len() {
            out.push(EpsParamId::R(t));
        }
        for s in 0..self.theta.len() {
            out.push(EpsParamId::Theta(s));
        }
        for q in 0..self.v_diag.len() {
            out.push(EpsParamId::VDiag(q));
        }
        for (row, entries) in self.v_free.iter().enumerate() {
            for col in 0..entries.len() {
                out.push(EpsParamId::VFree(row, col));
            }
        }
        out
    }

    pub fn get(&self, id: EpsParamId) -> f64 {
        match id {
            EpsParamId::R(t) => self.r[t],
            EpsParamId::Theta(s) => self.theta[s],
            EpsParamId::VDiag(q) => self.v_diag[q],
            EpsParamId::VFree(row, col) => self.v_free[row][col],
        }
    }

    pub fn set(&mut self, id: EpsParamId, value: f64) {
        match id {
            EpsParamId::R(t) => self.r[t] = value,
            EpsParamId::Theta(s) => self.theta[s] = value,
            EpsParamId::VDiag(q) => self.v_diag[q] = value,
            EpsParamId::VFree(row, col) => self.v_free[row][col] = value,
        }
    }

    /// The lower-triangular factor `V` with `Sigma = V V'`.
    pub fn build_v(&self) -> Result<DMatrix<f64>> {
        self.audit()?;
        let j = self.n_episodic;
        let dim = self.dim();
        let mut v = DMatrix::<f64>::zeros(dim, dim);

        // Row 1 (consumption of component 1): (1, 0, ..., 0).
        v[(0, 0)] = 1.0;
        // Row 2 (amount of component 1): v21 = 0 forced by orthogonality.
        v[(1, 1)] = self.v_diag[0];

        // Consumption rows 2q+1, q = 1..J-1: spherical with radius r_q.
        for q in 1..j {
            let row = 2 * q; // 0-based index of row 2q+1
            let rq = self.r[q - 1];
            let a0 = (q - 1) * (q - 1); // angle block offset
            let n_ang = 2 * q - 1;
            let mut cos_prod = 1.0;
            for p in 0..n_ang {
                v[(row, p)] = rq * cos_prod * self.theta[a0 + p].sin();
                cos_prod *= self.theta[a0 + p].cos();
            }
            v[(row, n_ang)] = rq * cos_prod; // column 2q
            v[(row, row)] = (1.0 - rq * rq).sqrt(); // column 2q+1
        }

        // Amount rows 2q, q = 2..J: free entries, one determined entry, diagonal.
        for q in 2..=j {
            let row = 2 * q - 1; // 0-based index of row 2q
            let free = &self.v_free[q - 2];
            for (p, &val) in free.iter().enumerate() {
                v[(row, p)] = val;
            }
            // Orthogonality with consumption row 2q-1 determines column 2q-1.
            let crow = 2 * q - 2;
            let vqq = v[(crow, crow)];
            if vqq.abs() < 1e-14 {
                return Err(Error::Covariance(format!(
                    "determined entry in row {} requires division by v_qq = {vqq} (r_{} too close to 1)",
                    2 * q,
                    q - 1
                )));
            }
            let mut dot = 0.0;
            for p in 0..crow {
                dot += v[(crow, p)] * v[(row, p)];
            }
            v[(row, crow)] = -dot / vqq;
            v[(row, row)] = self.v_diag[q - 1];
        }

        // Daily/energy rows: fully free below the diagonal.
        for m in (2 * j + 1)..=dim {
            let row = m - 1;
            let free = &self.v_free[(j - 1) + (m - 2 * j - 1)];
            for (p, &val) in free.iter().enumerate() {
                v[(row, p)] = val;
            }
            v[(row, row)] = self.v_diag[j + (m - 2 * j - 1)];
        }

        Ok(v)
    }

    /// `Sigma = V V'` with cached inverse and log-determinant.
    pub fn sigma_eps(&self) -> Result<CovMatrix> {
        let v = self.build_v()?;
        let sigma = &v * v.transpose();
        let chol = Cholesky::new(sigma.clone()).ok_or_else(|| {
            Error::Covariance(
                "error covariance is numerically singular; check v_diag and r entries".into(),
            )
        })?;
        let l = chol.l();
        let mut dmin = f64::INFINITY;
        let mut dmax: f64 = 0.0;
        for i in 0..sigma.nrows() {
            dmin = dmin.min(l[(i, i)]);
            dmax = dmax.max(l[(i, i)]);
        }
        if dmin <= 0.0 || (dmax / dmin).powi(2) > 1e12 {
            return Err(Error::Covariance(format!(
                "error covariance condition estimate {:.3e} exceeds 1e12; \
                 a v_diag entry or radius is too extreme",
                (dmax / dmin).powi(2)
            )));
        }
        let inv = chol.inverse();
        let logdet = self.logdet()?;
        Ok(CovMatrix { sigma, inv, logdet })
    }

    /// Closed-form `log |Sigma|` from the product of factor diagonals:
    /// `sum log v_diag^2 + sum log(1 - r_q^2)`.
    pub fn logdet(&self) -> Result<f64> {
        let mut acc = 0.0;
        for (t, &r) in self.r.iter().enumerate() {
            let f = 1.0 - r * r;
            if f <= 0.0 {
                return Err(Error::Covariance(format!(
                    "log-determinant is -inf: r_{} = {r}",
                    t + 1
                )));
            }
            acc += f.ln();
        }
        for (q, &v) in self.v_diag.iter().enumerate() {
            if v == 0.0 {
                return Err(Error::Covariance(format!(
                    "log-determinant is -inf: diagonal entry {q} is zero"
                )));
            }
            acc += (v * v).ln();
        }
        Ok(acc)
    }
}

/// Dense patterned covariance with cached inverse and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub sigma: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub logdet: f64,
}

impl CovMatrix {
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}
