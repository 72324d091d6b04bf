//! Verification and orchestration: synthetic-data generation from known
//! parameters, Box-Cox power estimation by profile likelihood, and balanced
//! repeated replication (BRR) variance across replicate weight sets.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::PatternedCovParams;
use crate::data_model::{ComponentSpec, Individual, RecallObservation, SurveyDataset};
use crate::error::{Error, Result};
use crate::transforms::{g, TransformSpec};

/// Complete generative parameter set plus population/design description.
///
/// Coefficient layout per response row: `[intercept, weekend, second_recall,
/// covariate_1, ...]` — the same fixed order the design builder uses.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub spec: ComponentSpec,
    pub beta: Vec<DVector<f64>>,
    pub sigma_u: DMatrix<f64>,
    pub eps_params: PatternedCovParams,
    /// Per amount component, the transform constants used both to generate
    /// amounts and (carried on the dataset) to standardize them at fit time.
    pub standardization: Vec<TransformSpec>,
    pub n_individuals: usize,
    pub recalls_per_individual: usize,
    /// Extra standard-normal covariates appended after the three dummies.
    pub n_covariates: usize,
    pub weight_low: f64,
    pub weight_high: f64,
    pub weekend_probability: f64,
}

impl SyntheticTruth {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n_rows = self.spec.n_rows();
        if self.beta.len() != n_rows {
            return Err(Error::validation(format!(
                "expected {n_rows} coefficient rows, got {}",
                self.beta.len()
            )));
        }
        let p = 3 + self.n_covariates;
        if self.beta.iter().any(|b| b.len() != p) {
            return Err(Error::validation(format!("every beta row must have length {p}")));
        }
        if self.sigma_u.nrows() != n_rows || self.sigma_u.ncols() != n_rows {
            return Err(Error::validation("sigma_u dimension mismatch"));
        }
        if self.standardization.len() != self.spec.n_amounts() {
            return Err(Error::validation(
                "one standardization entry per amount component required",
            ));
        }
        if self.eps_params.n_episodic != self.spec.n_episodic()
            || self.eps_params.n_daily != self.spec.n_daily()
        {
            return Err(Error::validation("error covariance dimensions mismatch"));
        }
        if self.n_individuals == 0 || self.recalls_per_individual == 0 {
            return Err(Error::validation("need at least one individual and recall"));
        }
        if !(self.weight_low > 0.0 && self.weight_high >= self.weight_low) {
            return Err(Error::validation("invalid weight range"));
        }
        if !(0.0..=1.0).contains(&self.weekend_probability) {
            return Err(Error::validation("weekend probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Counters reported alongside a synthetic dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticDiagnostics {
    /// Recalls whose error draw was regenerated after a back-transform
    /// domain violation.
    pub resampled: u64,
}

/// Runs the generative model forward: random effects and errors from the
/// truth covariances, indicators by thresholding the latent consumption
/// rows at zero, amounts by inverting the standardized transform.
///
/// The returned dataset carries the truth's standardization constants and is
/// flagged preprocessed, so a fit on it estimates coefficients on the same
/// scale they were generated on.
pub fn generate_synthetic(
    truth: &SyntheticTruth,
    seed: u64,
) -> Result<(SurveyDataset, SyntheticDiagnostics)> {
    truth.validate()?;
    let spec = &truth.spec;
    let n_rows = spec.n_rows();
    let chol_u = Cholesky::new(truth.sigma_u.clone())
        .ok_or_else(|| Error::numerical("truth sigma_u is not positive definite"))?;
    let sigma_eps = truth.eps_params.sigma_eps()?;
    let chol_eps = Cholesky::new(sigma_eps.sigma.clone())
        .ok_or_else(|| Error::numerical("truth sigma_eps is not positive definite"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diag = SyntheticDiagnostics::default();
    let mut individuals = Vec::with_capacity(truth.n_individuals);
    let mut reported_outputs = Vec::with_capacity(truth.n_individuals);
    for i in 0..truth.n_individuals {
        let weight = if truth.weight_high > truth.weight_low {
            rng.gen_range(truth.weight_low..truth.weight_high)
        } else {
            truth.weight_low
        };
        let covariates: Vec<f64> = (0..truth.n_covariates)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z = DVector::from_fn(n_rows, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = chol_u.l() * z;

        let mut recalls = Vec::with_capacity(truth.recalls_per_individual);
        let mut rec_outputs = Vec::with_capacity(truth.recalls_per_individual);
        for k in 0..truth.recalls_per_individual {
            let weekend = rng.gen::<f64>() < truth.weekend_probability;
            let mut x = DVector::zeros(3 + truth.n_covariates);
            x[0] = 1.0;
            x[1] = if weekend { 1.0 } else { 0.0 };
            x[2] = if k > 0 { 1.0 } else { 0.0 };
            for (c, &v) in covariates.iter().enumerate() {
                x[3 + c] = v;
            }
            let mean = DVector::from_fn(n_rows, |row, _| x.dot(&truth.beta[row]) + u[row]);

            // Draw the error vector; regenerate on a back-transform domain
            // violation in any consumed amount row.
            let mut attempts = 0;
            let responses = loop {
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::numerical(
                        "synthetic generation: persistent back-transform domain violations; \
                         check truth parameters",
                    ));
                }
                let ez = DVector::from_fn(n_rows, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w = &mean + chol_eps.l() * ez;
                match responses_from_latent(spec, &truth.standardization, &w) {
                    Ok(r) => break r,
                    Err(_) => {
                        diag.resampled += 1;
                        continue;
                    }
                }
            };
            recalls.push(RecallObservation {
                recall_index: (k + 1) as u32,
                weekend,
                covariates: covariates.clone(),
                responses,
            });
            // Reported-scale outputs: output = derived + sum(parts).
            let rec = recalls.last().unwrap();
            let outputs: Vec<f64> = spec
                .composition
                .iter()
                .map(|rule| {
                    let derived =
                        spec.row_of_amount_index(spec.amount_index_of(&rule.derived).unwrap());
                    let parts: f64 = rule
                        .subtract
                        .iter()
                        .map(|s| {
                            rec.responses[spec.row_of_amount_index(spec.amount_index_of(s).unwrap())]
                        })
                        .sum();
                    rec.responses[derived] + parts
                })
                .collect();
            rec_outputs.push(outputs);
        }
        individuals.push(Individual {
            id: format!("s{i:06}"),
            weight,
            recalls,
        });
        reported_outputs.push(rec_outputs);
    }

    let dataset = SurveyDataset {
        individuals,
        spec: spec.clone(),
        covariate_names: (0..truth.n_covariates).map(|c| format!("cov{}", c + 1)).collect(),
        standardization: Some(truth.standardization.clone()),
        reported_outputs,
        preprocessed: true,
    };
    dataset.validate()?;
    Ok((dataset, diag))
}

/// Raw-scale response vector from a latent draw, or a domain error when an
/// inverse transform leaves its support.
fn responses_from_latent(
    spec: &ComponentSpec,
    standardization: &[TransformSpec],
    w: &DVector<f64>,
) -> Result<Vec<f64>> {
    let mut responses = vec![0.0; spec.n_rows()];
    for l in 0..spec.n_episodic() {
        let consumed = w[spec.indicator_row(l)] > 0.0;
        responses[spec.indicator_row(l)] = if consumed { 1.0 } else { 0.0 };
        responses[spec.episodic_amount_row(l)] = if consumed {
            standardization[l].g_tr_inv(w[spec.episodic_amount_row(l)])?
        } else {
            0.0
        };
    }
    for a in spec.n_episodic()..spec.n_amounts() {
        let row = spec.row_of_amount_index(a);
        responses[row] = standardization[a].g_tr_inv(w[row])?;
    }
    Ok(responses)
}

/// Grid value maximizing the Gaussian profile loglikelihood of the Box-Cox
/// model on the (positive) values:
/// `-(n/2) log(sigma_hat^2(lambda)) + (lambda - 1) sum log y`.
pub fn estimate_lambda(values: &[f64], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::validation("empty lambda grid"));
    }
    if values.len() < 2 {
        return Err(Error::validation("need at least 2 values to estimate lambda"));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::validation("lambda estimation requires positive values"));
    }
    let first = values[0];
    if values.iter().all(|v| *v == first) {
        return Err(Error::validation("degenerate column: all values equal"));
    }
    let n = values.len() as f64;
    let log_sum: f64 = values.iter().map(|v| v.ln()).sum();
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &lam in grid {
        let z: Vec<f64> = values.iter().map(|&y| g(y, lam).unwrap()).collect();
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            continue;
        }
        let ll = -0.5 * n * var.ln() + (lam - 1.0) * log_sum;
        if ll > best.0 {
            best = (ll, lam);
        }
    }
    Ok(best.1)
}

/// Replicate weight sets for BRR variance estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BRRWeights {
    /// `replicates[p][i]`: weight of individual `i` under replicate `p`.
    pub replicates: Vec<Vec<f64>>,
    /// Perturbation (Fay) factor `f`; the variance divisor uses `(1 - f)^2`.
    pub factor: f64,
}

impl BRRWeights {
    pub fn validate(&self, n_individuals: usize) -> Result<()> {
        if self.replicates.len() < 2 {
            return Err(Error::validation("BRR needs at least 2 replicate weight sets"));
        }
        if !(0.0..1.0).contains(&self.factor) {
            return Err(Error::validation(format!(
                "BRR factor {} must be in [0, 1)",
                self.factor
            )));
        }
        for (p, w) in self.replicates.iter().enumerate() {
            if w.len() != n_individuals {
                return Err(Error::validation(format!(
                    "replicate {p} has {} weights for {n_individuals} individuals",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::validation(format!("replicate {p} has a nonpositive weight")));
            }
        }
        Ok(())
    }

    /// Reads a delimited file with columns `id, rep1, rep2, ...`, aligned to
    /// the dataset's individual order by id.
    pub fn from_csv(path: impl AsRef<std::path::Path>, d: &SurveyDataset, factor: f64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path.as_ref())?;
        let n_rep = reader.headers()?.len().saturating_sub(1);
        if n_rep < 2 {
            return Err(Error::schema("BRR weight file needs an id column plus >= 2 replicates"));
        }
        let mut by_id = std::collections::HashMap::new();
        for record in reader.records() {
            let record = record?;
            let id = record
                .get(0)
                .ok_or_else(|| Error::validation("short row in BRR weight file"))?
                .to_string();
            let weights: Vec<f64> = (1..=n_rep)
                .map(|c| {
                    record
                        .get(c)
                        .ok_or_else(|| Error::validation(format!("id {id}: short BRR row")))?
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::validation(format!("id {id}: bad BRR weight")))
                })
                .collect::<Result<_>>()?;
            by_id.insert(id, weights);
        }
        let mut replicates = vec![Vec::with_capacity(d.n_individuals()); n_rep];
        for ind in &d.individuals {
            let w = by_id.get(&ind.id).ok_or_else(|| {
                Error::validation(format!("individual {} missing from BRR weight file", ind.id))
            })?;
            for (p, v) in w.iter().enumerate() {
                replicates[p].push(*v);
            }
        }
        let out = BRRWeights { replicates, factor };
        out.validate(d.n_individuals())?;
        Ok(out)
    }
}

/// BRR variance of one statistic:
/// `{R (1 - f)^2}^{-1} sum_p (theta_p - theta)^2`.
pub fn brr_variance(full: f64, replicates: &[f64], factor: f64) -> Result<f64> {
    if replicates.is_empty() {
        return Err(Error::validation("no replicate estimates"));
    }
    let r = replicates.len() as f64;
    let denom = r * (1.0 - factor) * (1.0 - factor);
    if !(denom > 0.0) {
        return Err(Error::validation("BRR divisor is zero (factor = 1?)"));
    }
    Ok(replicates.iter().map(|t| (t - full) * (t - full)).sum::<f64>() / denom)
}

/// Full pipeline output with BRR standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrrOutcome {
    /// Statistic values under the full weights.
    pub estimate: Vec<f64>,
    /// Per-statistic BRR standard errors over the surviving replicates.
    pub standard_errors: Vec<f64>,
    /// Indices of replicates whose pipeline run failed.
    pub failed_replicates: Vec<usize>,
}

/// Reruns a deterministic pipeline once per replicate weight set and pools
/// squared deviations into standard errors. The pipeline receives the
/// reweighted dataset and `Some(replicate_index)` (or `None` for the full
/// run) for seed derivation.
pub fn run_brr<F>(d: &SurveyDataset, weights: &BRRWeights, mut pipeline: F) -> Result<BrrOutcome>
where
    F: FnMut(&SurveyDataset, Option<usize>) -> Result<Vec<f64>>,
{
    weights.validate(d.n_individuals())?;
    let full = pipeline(d, None)?;
    let mut replicate_estimates = Vec::new();
    let mut failed = Vec::new();
    for (p, rw) in weights.replicates.iter().enumerate() {
        let mut rd = d.clone();
        for (ind, w) in rd.individuals.iter_mut().zip(rw) {
            ind.weight = *w;
        }
        match pipeline(&rd, Some(p)) {
            Ok(est) => {
                if est.len() != full.len() {
                    return Err(Error::validation(format!(
                        "replicate {p} returned {} statistics, full run returned {}",
                        est.len(),
                        full.len()
                    )));
                }
                replicate_estimates.push(est);
            }
            Err(_) => failed.push(p),
        }
    }
    if replicate_estimates.is_empty() {
        return Err(Error::numerical("every BRR replicate failed"));
    }
    let mut ses = Vec::with_capacity(full.len());
    for s in 0..full.len() {
        let reps: Vec<f64> = replicate_estimates.iter().map(|e| e[s]).collect();
        ses.push(brr_variance(full[s], &reps, weights.factor)?.sqrt());
    }
    Ok(BrrOutcome {
        estimate: full,
        standard_errors: ses,
        failed_replicates: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ComponentDef;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;

    #[test]
    fn brr_hand_example() {
        // One replicate off by 1, 32 replicates, (1-f)^2 = 0.49.
        let mut reps = vec![10.0; 32];
        reps[0] = 11.0;
        let v = brr_variance(10.0, &reps, 0.3).unwrap();
        assert_relative_eq!(v, 1.0 / 15.68, epsilon = 1e-12);
        // Permutation invariance.
        reps.rotate_left(7);
        assert_relative_eq!(brr_variance(10.0, &reps, 0.3).unwrap(), v, epsilon = 1e-15);
        // Zero variance.
        assert_eq!(brr_variance(10.0, &vec![10.0; 32], 0.3).unwrap(), 0.0);
        // Doubling deviations quadruples the variance.
        let mut reps2 = vec![10.0; 32];
        reps2[0] = 12.0;
        assert_relative_eq!(
            brr_variance(10.0, &reps2, 0.3).unwrap(),
            4.0 * v,
            epsilon = 1e-12
        );
    }

    #[test]
    fn lambda_grid_cases() {
        let mut rng = StdRng::seed_from_u64(3);
        let grid: Vec<f64> = (0..=40).map(|s| -1.0 + s as f64 * 0.05).collect();
        // Lognormal data -> lambda near 0.
        let logn: Vec<f64> = (0..4000)
            .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let lam = estimate_lambda(&logn, &grid).unwrap();
        assert!(lam.abs() <= 0.0501, "lambda for lognormal: {lam}");
        // Normal positive data -> lambda near 1.
        let norm: Vec<f64> = (0..4000)
            .map(|_| 20.0 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lam = estimate_lambda(&norm, &grid).unwrap();
        assert!((lam - 1.0).abs() <= 0.2, "lambda for normal: {lam}");
        // Single-point grid returns that point.
        assert_eq!(estimate_lambda(&norm, &[0.33]).unwrap(), 0.33);
        // Degenerate column.
        assert!(estimate_lambda(&[2.0, 2.0, 2.0], &grid).is_err());
    }

    pub(crate) fn small_truth(j: usize, k: usize, n: usize) -> SyntheticTruth {
        let spec = ComponentSpec {
            episodic: (0..j)
                .map(|l| ComponentDef {
                    name: format!("ep{}", l + 1),
                    units: String::new(),
                    lambda: 0.5,
                })
                .collect(),
            daily: (0..k)
                .map(|d| ComponentDef {
                    name: format!("daily{}", d + 1),
                    units: String::new(),
                    lambda: 0.25,
                })
                .collect(),
            energy: ComponentDef {
                name: "energy".into(),
                units: "kcal".into(),
                lambda: 0.0,
            },
            composition: vec![],
        };
        let n_rows = spec.n_rows();
        let beta: Vec<DVector<f64>> = (0..n_rows)
            .map(|r| DVector::from_column_slice(&[0.4 - 0.1 * r as f64, 0.2, -0.1]))
            .collect();
        let sigma_u = DMatrix::from_fn(n_rows, n_rows, |a, b| {
            if a == b {
                0.6
            } else {
                0.18
            }
        });
        let mut eps = PatternedCovParams::identity(j, k);
        for r in eps.r.iter_mut() {
            *r = 0.3;
        }
        let standardization = (0..spec.n_amounts())
            .map(|a| {
                let lam = spec.amount_component(a).lambda;
                if a + 1 == spec.n_amounts() {
                    TransformSpec::new(lam, 7.3, 0.35).unwrap() // energy ~ e^7.3
                } else {
                    TransformSpec::new(lam, 1.2, 0.8).unwrap()
                }
            })
            .collect();
        SyntheticTruth {
            spec,
            beta,
            sigma_u,
            eps_params: eps,
            standardization,
            n_individuals: n,
            recalls_per_individual: 2,
            n_covariates: 0,
            weight_low: 0.5,
            weight_high: 2.0,
            weekend_probability: 3.0 / 7.0,
        }
    }

    #[test]
    fn synthetic_dataset_is_valid_and_deterministic() {
        let truth = small_truth(2, 1, 50);
        let (d1, _) = generate_synthetic(&truth, 42).unwrap();
        let (d2, _) = generate_synthetic(&truth, 42).unwrap();
        assert_eq!(d1, d2);
        let (d3, _) = generate_synthetic(&truth, 43).unwrap();
        assert_ne!(d1, d3);
        assert!(d1.preprocessed);
        assert_eq!(d1.n_individuals(), 50);
        d1.validate().unwrap();
    }

    #[test]
    fn extreme_intercepts_control_consumption() {
        let mut truth = small_truth(1, 0, 200);
        truth.beta[0] = DVector::from_column_slice(&[-10.0, 0.0, 0.0]);
        let (d, _) = generate_synthetic(&truth, 7).unwrap();
        let all_zero = d
            .individuals
            .iter()
            .all(|i| i.recalls.iter().all(|r| r.responses[0] == 0.0));
        assert!(all_zero);
        truth.beta[0] = DVector::from_column_slice(&[10.0, 0.0, 0.0]);
        let (d, _) = generate_synthetic(&truth, 7).unwrap();
        let all_one = d
            .individuals
            .iter()
            .all(|i| i.recalls.iter().all(|r| r.responses[0] == 1.0));
        assert!(all_one);
    }

    #[test]
    fn consumption_frequency_matches_probit_marginal() {
        // P(consume) = Phi(x'beta / sqrt(1 + sigma_u_cons)) marginally over
        // U and the unit-variance consumption error.
        let mut truth = small_truth(1, 0, 25_000);
        truth.recalls_per_individual = 2;
        truth.beta[0] = DVector::from_column_slice(&[0.3, 0.0, 0.0]);
        truth.beta[1] = DVector::from_column_slice(&[0.1, 0.0, 0.0]);
        let (d, _) = generate_synthetic(&truth, 99).unwrap();
        let mut consumed = 0u64;
        let mut total = 0u64;
        for ind in &d.individuals {
            for rec in &ind.recalls {
                total += 1;
                if rec.responses[0] == 1.0 {
                    consumed += 1;
                }
            }
        }
        let phat = consumed as f64 / total as f64;
        let su = truth.sigma_u[(0, 0)];
        let p = crate::population::normal_cdf(0.3 / (1.0 + su).sqrt());
        let se = (p * (1.0 - p) / total as f64).sqrt();
        assert!(
            (phat - p).abs() < 3.0 * se + 1e-3,
            "phat = {phat}, expected {p} (se {se})"
        );
    }

    #[test]
    fn run_brr_linear_statistic() {
        // Statistic linear in the weights: weighted total of the energy row.
        let truth = small_truth(1, 0, 6);
        let (d, _) = generate_synthetic(&truth, 5).unwrap();
        let energy_row = d.spec.energy_row();
        let stat = |ds: &SurveyDataset| -> f64 {
            ds.individuals
                .iter()
                .map(|i| i.weight * i.recalls[0].responses[energy_row])
                .sum()
        };
        let w1: Vec<f64> = d.individuals.iter().map(|i| i.weight * 1.5).collect();
        let w2: Vec<f64> = d.individuals.iter().map(|i| i.weight * 0.5).collect();
        let weights = BRRWeights {
            replicates: vec![w1, w2],
            factor: 0.3,
        };
        let out = run_brr(&d, &weights, |ds, _| Ok(vec![stat(ds)])).unwrap();
        let full = stat(&d);
        // Replicates scale the statistic by 1.5 and 0.5 exactly.
        let expected = brr_variance(full, &[1.5 * full, 0.5 * full], 0.3)
            .unwrap()
            .sqrt();
        assert_relative_eq!(out.estimate[0], full, epsilon = 1e-12);
        assert_relative_eq!(out.standard_errors[0], expected, epsilon = 1e-9);
        assert!(out.failed_replicates.is_empty());
        // Identical replicate weight sets -> zero standard error.
        let same = BRRWeights {
            replicates: vec![
                d.individuals.iter().map(|i| i.weight).collect(),
                d.individuals.iter().map(|i| i.weight).collect(),
            ],
            factor: 0.3,
        };
        let out = run_brr(&d, &same, |ds, _| Ok(vec![stat(ds)])).unwrap();
        assert_eq!(out.standard_errors[0], 0.0);
    }

    #[test]
    fn run_brr_flags_failures() {
        let truth = small_truth(1, 0, 4);
        let (d, _) = generate_synthetic(&truth, 1).unwrap();
        let weights = BRRWeights {
            replicates: vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4]],
            factor: 0.3,
        };
        let out = run_brr(&d, &weights, |ds, rep| {
            if rep == Some(1) {
                Err(Error::numerical("boom"))
            } else {
                Ok(vec![ds.individuals[0].weight])
            }
        })
        .unwrap();
        assert_eq!(out.failed_replicates, vec![1]);
    }

    #[test]
    fn brr_weights_csv_roundtrip() {
        use std::io::Write;
        let truth = small_truth(1, 0, 2);
        let (d, _) = generate_synthetic(&truth, 2).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "id,rep1,rep2").unwrap();
        // Reversed row order relative to the dataset.
        writeln!(f, "{},1.5,2.5", d.individuals[1].id).unwrap();
        writeln!(f, "{},1.0,2.0", d.individuals[0].id).unwrap();
        f.flush().unwrap();
        let w = BRRWeights::from_csv(f.path(), &d, 0.3).unwrap();
        assert_eq!(w.replicates[0], vec![1.0, 1.5]);
        assert_eq!(w.replicates[1], vec![2.0, 2.5]);
    }
}
