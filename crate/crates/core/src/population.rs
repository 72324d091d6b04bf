//! From fitted parameters to population statistics: simulated usual intakes,
//! energy-adjusted densities and diet-quality scores, survey-weighted
//! CDFs/percentiles/correlations, conditional distributions, and joint
//! exceedance probabilities.

use std::io::Write as IoWrite;

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{DesignMatrices, SurveyDataset};
use crate::error::{Error, Result};
use crate::sampler::ParameterEstimates;
use crate::transforms::{TransformSpec, DOMAIN_FLOOR};

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// How a component's energy-adjusted density is computed from usual intake
/// `t` and usual energy `e` (kcal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DensityKind {
    /// `1000 * unit_scale * t / e` — amount per 1000 kcal. `unit_scale`
    /// converts the modeled unit into the scoring unit (e.g. grams of
    /// sodium modeled, milligrams scored: 1000).
    PerThousandKcal { unit_scale: f64 },
    /// `9 * 100 * t / e` — percent of energy from fat grams (9 kcal/gram).
    PercentEnergyFat,
    /// `100 * t / e` — percent of energy, `t` already in kcal.
    PercentEnergyDirect,
}

impl DensityKind {
    pub fn density(&self, t: f64, energy: f64) -> f64 {
        match *self {
            DensityKind::PerThousandKcal { unit_scale } => 1000.0 * unit_scale * t / energy,
            DensityKind::PercentEnergyFat => 9.0 * 100.0 * t / energy,
            DensityKind::PercentEnergyDirect => 100.0 * t / energy,
        }
    }
}

/// Piecewise map from density to component score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScoreMap {
    /// `min(cap, cap * density / standard)` — nondecreasing adequacy form.
    CappedRatio { cap: f64, standard: f64 },
    /// Nonincreasing moderation form: `cap` at or below `full_at`, zero at
    /// or above `zero_at`, linear between with an optional interior knot
    /// `(density, score)` where the slope changes.
    Descending {
        cap: f64,
        full_at: f64,
        zero_at: f64,
        knot: Option<(f64, f64)>,
    },
}

impl ScoreMap {
    pub fn cap(&self) -> f64 {
        match *self {
            ScoreMap::CappedRatio { cap, .. } | ScoreMap::Descending { cap, .. } => cap,
        }
    }

    /// Branch order follows the published listing: the saturating `>=` /
    /// `<=` branches first, then the upper linear segment, then the lower.
    pub fn score(&self, density: f64) -> f64 {
        match *self {
            ScoreMap::CappedRatio { cap, standard } => cap.min(cap * density / standard),
            ScoreMap::Descending {
                cap,
                full_at,
                zero_at,
                knot,
            } => {
                if density >= zero_at {
                    0.0
                } else if density <= full_at {
                    cap
                } else if let Some((kd, ks)) = knot {
                    if density > kd {
                        ks - ks * (density - kd) / (zero_at - kd)
                    } else {
                        cap - (cap - ks) * (density - full_at) / (kd - full_at)
                    }
                } else {
                    cap - cap * (density - full_at) / (zero_at - full_at)
                }
            }
        }
    }
}

/// One component's density definition plus score map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRule {
    /// Modeled or composed component name the rule applies to.
    pub component: String,
    pub density: DensityKind,
    pub map: ScoreMap,
}

impl ScoringRule {
    pub fn score(&self, t: f64, energy: f64) -> f64 {
        self.map.score(self.density.density(t, energy))
    }
}

fn ratio_rule(component: &str, cap: f64, standard: f64) -> ScoringRule {
    ScoringRule {
        component: component.to_string(),
        density: DensityKind::PerThousandKcal { unit_scale: 1.0 },
        map: ScoreMap::CappedRatio { cap, standard },
    }
}

/// The standard 12-component HEI-2005 rule set. Component names are the
/// conventional ones; sodium is assumed modeled in milligrams (pass a
/// different `unit_scale` by editing the returned rule if modeled in grams).
pub fn hei2005_rules() -> Vec<ScoringRule> {
    vec![
        ratio_rule("total_fruit", 5.0, 0.8),
        ratio_rule("whole_fruit", 5.0, 0.4),
        ratio_rule("total_vegetables", 5.0, 1.1),
        ratio_rule("dol", 5.0, 0.4),
        ratio_rule("total_grains", 5.0, 3.0),
        ratio_rule("whole_grains", 5.0, 1.5),
        ratio_rule("milk", 10.0, 1.3),
        ratio_rule("meat_beans", 10.0, 2.5),
        ratio_rule("oil", 10.0, 12.0),
        ScoringRule {
            component: "saturated_fat".to_string(),
            density: DensityKind::PercentEnergyFat,
            map: ScoreMap::Descending {
                cap: 10.0,
                full_at: 7.0,
                zero_at: 15.0,
                knot: Some((10.0, 8.0)),
            },
        },
        ScoringRule {
            component: "sodium".to_string(),
            density: DensityKind::PerThousandKcal { unit_scale: 1.0 },
            map: ScoreMap::Descending {
                cap: 10.0,
                full_at: 700.0,
                zero_at: 2000.0,
                knot: Some((1100.0, 8.0)),
            },
        },
        ScoringRule {
            component: "sofaas".to_string(),
            density: DensityKind::PercentEnergyDirect,
            map: ScoreMap::Descending {
                cap: 20.0,
                full_at: 20.0,
                zero_at: 50.0,
                knot: None,
            },
        },
    ]
}

/// Score one component from usual intake and usual energy.
pub fn hei_component_score(t: f64, energy: f64, rule: &ScoringRule) -> f64 {
    rule.score(t, energy)
}

/// Sum of all component scores; every rule must have a score present.
pub fn hei_total_score(scores: &[(String, f64)], rules: &[ScoringRule]) -> Result<f64> {
    let mut total = 0.0;
    for rule in rules {
        let found = scores
            .iter()
            .find(|(name, _)| *name == rule.component)
            .ok_or_else(|| {
                Error::validation(format!("missing component score: {}", rule.component))
            })?;
        total += found.1;
    }
    Ok(total)
}

/// Usual intake of an episodic component: consumption probability times the
/// bias-corrected mean amount, mixed over day types as
/// `(4 * weekday + 3 * weekend) / 7`. Design rows must carry the
/// first-recall convention (second-recall dummy zero).
#[allow(clippy::too_many_arguments)]
pub fn usual_intake_episodic(
    beta_indicator: &DVector<f64>,
    beta_amount: &DVector<f64>,
    u_indicator: f64,
    u_amount: f64,
    t: &TransformSpec,
    eps_amount_var: f64,
    x_wkday: &DVector<f64>,
    x_wkend: &DVector<f64>,
    clamped: &mut u64,
) -> f64 {
    let mut day = |x: &DVector<f64>| {
        let prob = normal_cdf(x.dot(beta_indicator) + u_indicator);
        let amount =
            t.g_star_clamped(x.dot(beta_amount) + u_amount, eps_amount_var, DOMAIN_FLOOR, clamped);
        prob * amount
    };
    (4.0 * day(x_wkday) + 3.0 * day(x_wkend)) / 7.0
}

/// Usual intake of a daily-consumed component or energy: the bias-corrected
/// mean amount alone, mixed over day types.
pub fn usual_intake_daily(
    beta: &DVector<f64>,
    u: f64,
    t: &TransformSpec,
    eps_var: f64,
    x_wkday: &DVector<f64>,
    x_wkend: &DVector<f64>,
    clamped: &mut u64,
) -> f64 {
    let mut day =
        |x: &DVector<f64>| t.g_star_clamped(x.dot(beta) + u, eps_var, DOMAIN_FLOOR, clamped);
    (4.0 * day(x_wkday) + 3.0 * day(x_wkend)) / 7.0
}

/// One simulated usual-intake vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsualIntakeSample {
    pub individual: usize,
    pub replicate: usize,
    pub weight: f64,
    /// Values in the order of [`PopulationSamples::labels`].
    pub t: Vec<f64>,
}

/// All simulated samples plus the column layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSamples {
    /// Modeled component names first, then composed (reported-scale) names.
    pub labels: Vec<String>,
    /// Index of the column holding total energy on the reported scale.
    pub energy_index: usize,
    pub samples: Vec<UsualIntakeSample>,
    /// Count of back-transform domain clamps during generation.
    pub clamped: u64,
}

impl PopulationSamples {
    pub fn column_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::validation(format!("unknown component column: {label}")))
    }

    pub fn values(&self, col: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.t[col]).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }
}

/// Simulate `b` usual-intake vectors per individual by drawing fresh random
/// effects from the fitted `Sigma_u` and applying the usual-intake formulas,
/// then compose reported-scale totals from the composition rules.
///
/// The random stream depends only on `seed`, never on the sampler's stream.
pub fn monte_carlo_population(
    est: &ParameterEstimates,
    d: &SurveyDataset,
    design: &DesignMatrices,
    b: usize,
    seed: u64,
) -> Result<PopulationSamples> {
    if b < 1 {
        return Err(Error::validation("replicate count B must be at least 1"));
    }
    let spec = &d.spec;
    let n_rows = spec.n_rows();
    if est.beta.len() != n_rows {
        return Err(Error::validation(format!(
            "estimate has {} response rows, dataset needs {n_rows}",
            est.beta.len()
        )));
    }
    let sigma_u = est.sigma_u_matrix();
    let sigma_eps = est.sigma_eps_matrix();
    let chol = Cholesky::new(sigma_u)
        .ok_or_else(|| Error::numerical("fitted Sigma_u is not positive definite"))?;
    let betas = est.beta_vectors();
    let transforms: Vec<TransformSpec> = (0..spec.n_amounts())
        .map(|a| d.transform(a).map(|t| *t))
        .collect::<Result<_>>()?;

    let mut labels: Vec<String> = (0..spec.n_amounts())
        .map(|a| spec.amount_component(a).name.clone())
        .collect();
    for rule in &spec.composition {
        labels.push(rule.output.clone());
    }
    // Composition rules as (output slot, derived slot, subtracted slots).
    let mut compose = Vec::new();
    let mut energy_index = spec.n_amounts() - 1;
    for (r, rule) in spec.composition.iter().enumerate() {
        let derived = spec.amount_index_of(&rule.derived).ok_or_else(|| {
            Error::validation(format!("composition derived component {} not modeled", rule.derived))
        })?;
        let subs: Vec<usize> = rule
            .subtract
            .iter()
            .map(|s| {
                spec.amount_index_of(s).ok_or_else(|| {
                    Error::validation(format!("composition part {s} not modeled"))
                })
            })
            .collect::<Result<_>>()?;
        if derived == spec.n_amounts() - 1 {
            energy_index = spec.n_amounts() + r; // composed total energy
        }
        compose.push((spec.n_amounts() + r, derived, subs));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(d.individuals.len() * b);
    let mut clamped = 0u64;
    for (i, ind) in d.individuals.iter().enumerate() {
        let x_wkday = design.usual_intake_row(i, false);
        let x_wkend = design.usual_intake_row(i, true);
        for rep in 0..b {
            let z = DVector::from_fn(n_rows, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = chol.l() * z;
            let mut t = vec![0.0; labels.len()];
            for l in 0..spec.n_episodic() {
                let ir = spec.indicator_row(l);
                let ar = spec.episodic_amount_row(l);
                t[l] = usual_intake_episodic(
                    &betas[ir],
                    &betas[ar],
                    u[ir],
                    u[ar],
                    &transforms[l],
                    sigma_eps[(ar, ar)],
                    &x_wkday,
                    &x_wkend,
                    &mut clamped,
                );
            }
            for a in spec.n_episodic()..spec.n_amounts() {
                let row = spec.row_of_amount_index(a);
                t[a] = usual_intake_daily(
                    &betas[row],
                    u[row],
                    &transforms[a],
                    sigma_eps[(row, row)],
                    &x_wkday,
                    &x_wkend,
                    &mut clamped,
                );
            }
            for (slot, derived, subs) in &compose {
                t[*slot] = t[*derived] + subs.iter().map(|&s| t[s]).sum::<f64>();
            }
            samples.push(UsualIntakeSample {
                individual: i,
                replicate: rep,
                weight: ind.weight,
                t,
            });
        }
    }
    Ok(PopulationSamples {
        labels,
        energy_index,
        samples,
        clamped,
    })
}

/// Survey-weighted empirical CDF at `x`:
/// `sum I{value <= x} * w / sum w` over all samples.
pub fn weighted_cdf(values: &[f64], weights: &[f64], x: f64) -> Result<f64> {
    check_samples(values, weights)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.iter().zip(weights) {
        if *v <= x {
            num += w;
        }
        den += w;
    }
    Ok(num / den)
}

/// Smallest sample value whose CDF reaches `p` (left-continuous generalized
/// inverse of the weighted CDF).
pub fn weighted_percentile(values: &[f64], weights: &[f64], p: f64) -> Result<f64> {
    check_samples(values, weights)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!("percentile level {p} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut cum = 0.0;
    for &idx in &order {
        cum += weights[idx];
        if cum / total >= p {
            return Ok(values[idx]);
        }
    }
    Ok(values[*order.last().unwrap()])
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    check_samples(values, weights)?;
    let den: f64 = weights.iter().sum();
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / den)
}

fn check_samples(values: &[f64], weights: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::validation("empty sample set"));
    }
    if values.len() != weights.len() {
        return Err(Error::validation("values/weights length mismatch"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::validation("weights must be positive"));
    }
    Ok(())
}

/// Weighted Pearson correlation; `None` when either variance is zero.
pub fn weighted_correlation(a: &[f64], b: &[f64], weights: &[f64]) -> Result<Option<f64>> {
    check_samples(a, weights)?;
    check_samples(b, weights)?;
    let total: f64 = weights.iter().sum();
    let ma = weighted_mean(a, weights)?;
    let mb = weighted_mean(b, weights)?;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += weights[i] * da * db;
        va += weights[i] * da * da;
        vb += weights[i] * db * db;
    }
    cov /= total;
    va /= total;
    vb /= total;
    if va <= 0.0 || vb <= 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}

/// Weighted correlation matrix over statistic columns; `None` entries flag
/// zero-variance statistics.
pub fn usual_correlations(
    columns: &[Vec<f64>],
    weights: &[f64],
) -> Result<Vec<Vec<Option<f64>>>> {
    let n = columns.len();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = if i == j {
                weighted_correlation(&columns[i], &columns[i], weights)?.map(|_| 1.0)
            } else {
                weighted_correlation(&columns[i], &columns[j], weights)?
            };
        }
    }
    Ok(out)
}

/// Per-component weighted correlation between each component score and the
/// sum of the remaining scores. `scores[s]` is one sample's component-score
/// vector.
pub fn score_rest_correlation(
    scores: &[Vec<f64>],
    weights: &[f64],
) -> Result<Vec<Option<f64>>> {
    if scores.is_empty() {
        return Err(Error::validation("empty sample set"));
    }
    let n_comp = scores[0].len();
    let totals: Vec<f64> = scores.iter().map(|s| s.iter().sum()).collect();
    let mut out = Vec::with_capacity(n_comp);
    for c in 0..n_comp {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let rest: Vec<f64> = totals.iter().zip(&col).map(|(t, v)| t - v).collect();
        out.push(weighted_correlation(&col, &rest, weights)?);
    }
    Ok(out)
}

/// Weighted conditional CDF of `values` at `x` among samples where
/// `condition` holds.
pub fn conditional_cdf(
    values: &[f64],
    condition: &[bool],
    weights: &[f64],
    x: f64,
) -> Result<f64> {
    check_samples(values, weights)?;
    if condition.len() != values.len() {
        return Err(Error::validation("condition/values length mismatch"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..values.len() {
        if condition[i] {
            den += weights[i];
            if values[i] <= x {
                num += weights[i];
            }
        }
    }
    if den == 0.0 {
        return Err(Error::validation("condition selects an empty weighted subset"));
    }
    Ok(num / den)
}

/// Weighted probability that every listed statistic meets or exceeds its
/// threshold simultaneously. `stats[s]` is one sample's statistic vector,
/// aligned with `thresholds`.
pub fn joint_exceedance(stats: &[Vec<f64>], weights: &[f64], thresholds: &[f64]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::validation("empty sample set"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, w) in stats.iter().zip(weights) {
        den += w;
        if s.iter().zip(thresholds).all(|(v, k)| v >= k) {
            num += w;
        }
    }
    Ok(num / den)
}

/// Statistic kinds attachable to a reported value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StatKind {
    Mean,
    Percentile(f64),
    CdfAt(f64),
    Correlation,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub kind: StatKind,
    pub value: f64,
    pub standard_error: Option<f64>,
}

/// Percentile levels used in the distribution tables.
pub const TABLE_PERCENTILES: [f64; 7] = [0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95];

/// Mean plus the seven table percentiles for one statistic.
pub fn distribution_row(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let mut row = vec![weighted_mean(values, weights)?];
    for p in TABLE_PERCENTILES {
        row.push(weighted_percentile(values, weights, p)?);
    }
    Ok(row)
}

/// Tab-delimited distribution table: one row per statistic, columns mean
/// then the table percentiles; optional standard-error row beneath each.
pub fn write_distribution_table(
    out: &mut dyn IoWrite,
    rows: &[(String, Vec<f64>, Option<Vec<f64>>)],
) -> Result<()> {
    write!(out, "component\tmean")?;
    for p in TABLE_PERCENTILES {
        write!(out, "\tp{:02}", (p * 100.0).round() as u32)?;
    }
    writeln!(out)?;
    for (name, vals, se) in rows {
        write!(out, "{name}")?;
        for v in vals {
            write!(out, "\t{v:.6}")?;
        }
        writeln!(out)?;
        if let Some(se) = se {
            write!(out, "{name}_se")?;
            for v in se {
                write!(out, "\t{v:.6}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Tab-delimited correlation matrix; undefined entries print `NA`.
pub fn write_correlation_table(
    out: &mut dyn IoWrite,
    labels: &[String],
    matrix: &[Vec<Option<f64>>],
) -> Result<()> {
    write!(out, "component")?;
    for l in labels {
        write!(out, "\t{l}")?;
    }
    writeln!(out)?;
    for (i, row) in matrix.iter().enumerate() {
        write!(out, "{}", labels[i])?;
        for entry in row {
            match entry {
                Some(v) => write!(out, "\t{v:.6}")?,
                None => write!(out, "\tNA")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Plot-ready percentile curve: level in column 1, value in column 2, for
/// p = 0.01, ..., 0.99.
pub fn write_percentile_curve(
    out: &mut dyn IoWrite,
    values: &[f64],
    weights: &[f64],
) -> Result<()> {
    writeln!(out, "p\tvalue")?;
    for s in 1..100 {
        let p = s as f64 / 100.0;
        writeln!(out, "{p:.2}\t{:.6}", weighted_percentile(values, weights, p)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rule(name: &str) -> ScoringRule {
        hei2005_rules()
            .into_iter()
            .find(|r| r.component == name)
            .unwrap()
    }

    #[test]
    fn normal_cdf_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-14);
        assert_relative_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-9);
        assert!(normal_cdf(-40.0) < 1e-300);
    }

    #[test]
    fn table_values_capped_ratio() {
        // Densities chosen so the score is read straight off the table rule.
        let fruit = rule("total_fruit");
        assert_eq!(fruit.map.score(0.8), 5.0);
        assert_eq!(fruit.map.score(0.4), 2.5);
        assert_eq!(fruit.map.score(0.0), 0.0);
        assert_eq!(fruit.map.score(5.0), 5.0);
    }

    #[test]
    fn table_values_satfat() {
        let m = rule("saturated_fat").map;
        assert_eq!(m.score(7.0), 10.0);
        assert_eq!(m.score(10.0), 8.0);
        assert_eq!(m.score(12.5), 4.0);
        assert_eq!(m.score(15.0), 0.0);
    }

    #[test]
    fn table_values_sodium() {
        let m = rule("sodium").map;
        assert_eq!(m.score(700.0), 10.0);
        assert_eq!(m.score(1100.0), 8.0);
        assert_eq!(m.score(2000.0), 0.0);
    }

    #[test]
    fn table_values_sofaas() {
        let m = rule("sofaas").map;
        assert_eq!(m.score(20.0), 20.0);
        assert_eq!(m.score(35.0), 10.0);
        assert_eq!(m.score(50.0), 0.0);
    }

    #[test]
    fn knot_continuity() {
        let cases = [
            (rule("saturated_fat").map, vec![7.0, 10.0]),
            (rule("sodium").map, vec![700.0, 1100.0]),
            (rule("sofaas").map, vec![20.0, 50.0]),
        ];
        for (m, knots) in cases {
            for k in knots {
                let below = m.score(k - 1e-9);
                let at = m.score(k);
                let above = m.score(k + 1e-9);
                assert!((below - at).abs() < 1e-6, "discontinuity below {k}");
                assert!((above - at).abs() < 1e-6, "discontinuity above {k}");
            }
        }
    }

    #[test]
    fn score_monotonicity_and_range() {
        for r in hei2005_rules() {
            let (lo, hi, increasing) = match r.map {
                ScoreMap::CappedRatio { .. } => (0.0, 10.0, true),
                ScoreMap::Descending { zero_at, .. } => (0.0, zero_at * 1.5, false),
            };
            let mut prev = r.map.score(lo);
            let steps = 500;
            for s in 1..=steps {
                let d = lo + (hi - lo) * s as f64 / steps as f64;
                let v = r.map.score(d);
                assert!(v >= -1e-12 && v <= r.map.cap() + 1e-12);
                if increasing {
                    assert!(v >= prev - 1e-12);
                } else {
                    assert!(v <= prev + 1e-12);
                }
                prev = v;
            }
        }
    }

    #[test]
    fn density_forms() {
        // 0.4 cups per 500 kcal = 0.8 per 1000 kcal.
        let d = DensityKind::PerThousandKcal { unit_scale: 1.0 };
        assert_relative_eq!(d.density(0.4, 500.0), 0.8);
        // 20 g fat in 1800 kcal = 10% of energy.
        assert_relative_eq!(DensityKind::PercentEnergyFat.density(20.0, 1800.0), 10.0);
        // 500 kcal of 2000 = 25%.
        assert_relative_eq!(DensityKind::PercentEnergyDirect.density(500.0, 2000.0), 25.0);
    }

    #[test]
    fn total_score() {
        let rules = hei2005_rules();
        let at_cap: Vec<(String, f64)> = rules
            .iter()
            .map(|r| (r.component.clone(), r.map.cap()))
            .collect();
        assert_eq!(hei_total_score(&at_cap, &rules).unwrap(), 100.0);
        let zeros: Vec<(String, f64)> =
            rules.iter().map(|r| (r.component.clone(), 0.0)).collect();
        assert_eq!(hei_total_score(&zeros, &rules).unwrap(), 0.0);
        let mut mixed = at_cap.clone();
        mixed.last_mut().unwrap().1 = 10.0; // SoFAAS at 10
        assert_eq!(hei_total_score(&mixed, &rules).unwrap(), 90.0);
        let missing = &at_cap[..11];
        assert!(hei_total_score(missing, &rules).is_err());
    }

    #[test]
    fn usual_intake_hand_values() {
        let p = 3;
        let beta_ind = DVector::zeros(p); // probit argument 0 -> probability 1/2
        let beta_amt = DVector::zeros(p);
        let x = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mut clamped = 0;
        // Amount part: lambda=0 plain transform, u_amount chosen so
        // g_star(v, var) = 2: with v = 0, var = 2, g_star = 1 + 1 = 2.
        let t = TransformSpec::plain(0.0);
        let v = usual_intake_episodic(
            &beta_ind, &beta_amt, 0.0, 0.0, &t, 2.0, &x, &x, &mut clamped,
        );
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn usual_intake_probit_tail() {
        let x = DVector::from_column_slice(&[1.0]);
        let beta_ind = DVector::from_column_slice(&[-50.0]);
        let beta_amt = DVector::zeros(1);
        let mut clamped = 0;
        let t = TransformSpec::plain(0.0);
        let v = usual_intake_episodic(
            &beta_ind, &beta_amt, 0.0, 0.0, &t, 0.0, &x, &x, &mut clamped,
        );
        assert!(v.abs() < 1e-300);
    }

    #[test]
    fn usual_intake_daily_hand_value() {
        // lambda = 1, mu = 0, sigma = 1: g_tr_inv(z) = 1 + z/sqrt(2), so
        // z = sqrt(2), zero error variance -> 2 on both day types -> 2.
        let t = TransformSpec::new(1.0, 0.0, 1.0).unwrap();
        let x = DVector::from_column_slice(&[std::f64::consts::SQRT_2]);
        let beta = DVector::from_column_slice(&[1.0]);
        let mut clamped = 0;
        let v = usual_intake_daily(&beta, 0.0, &t, 0.0, &x, &x, &mut clamped);
        assert_relative_eq!(v, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn day_mix_is_identity_when_equal() {
        let t = TransformSpec::plain(0.0);
        let x = DVector::from_column_slice(&[0.5, 1.0]);
        let beta = DVector::from_column_slice(&[0.3, -0.2]);
        let mut c = 0;
        let v = usual_intake_daily(&beta, 0.1, &t, 0.4, &x, &x, &mut c);
        let single = t.g_star_clamped(x.dot(&beta) + 0.1, 0.4, DOMAIN_FLOOR, &mut c);
        assert_relative_eq!(v, single, epsilon = 1e-14);
    }

    #[test]
    fn cdf_hand_examples() {
        assert_eq!(weighted_cdf(&[5.0], &[2.0], 5.0).unwrap(), 1.0);
        assert_eq!(weighted_cdf(&[5.0], &[2.0], 4.9).unwrap(), 0.0);
        // weights 1 and 3 on values 0 and 10.
        let v = [0.0, 10.0];
        let w = [1.0, 3.0];
        assert_relative_eq!(weighted_cdf(&v, &w, 5.0).unwrap(), 0.25);
        assert_eq!(weighted_cdf(&v, &w, -1.0).unwrap(), 0.0);
        assert_eq!(weighted_cdf(&v, &w, 100.0).unwrap(), 1.0);
        assert!(weighted_cdf(&[], &[], 0.0).is_err());
    }

    #[test]
    fn cdf_monotone_step() {
        let v = [3.0, 1.0, 2.0, 2.0];
        let w = [1.0, 2.0, 1.0, 0.5];
        let mut prev = 0.0;
        let mut x = 0.0;
        while x <= 4.0 {
            let f = weighted_cdf(&v, &w, x).unwrap();
            assert!(f >= prev);
            prev = f;
            x += 0.01;
        }
    }

    #[test]
    fn percentile_conventions() {
        assert_eq!(weighted_percentile(&[7.0], &[1.0], 0.01).unwrap(), 7.0);
        assert_eq!(weighted_percentile(&[7.0], &[1.0], 0.99).unwrap(), 7.0);
        let v = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0; 4];
        assert_eq!(weighted_percentile(&v, &w, 0.5).unwrap(), 2.0);
        let v2 = [0.0, 10.0];
        let w2 = [1.0, 3.0];
        assert_eq!(weighted_percentile(&v2, &w2, 0.5).unwrap(), 10.0);
        // Nondecreasing in p.
        let mut prev = f64::NEG_INFINITY;
        for s in 1..100 {
            let q = weighted_percentile(&v, &w, s as f64 / 100.0).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn correlation_properties() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let b = [2.0, 1.0, 4.0, 4.0];
        let w = [1.0, 2.0, 1.0, 1.5];
        let c = weighted_correlation(&a, &b, &w).unwrap().unwrap();
        assert!(c > -1.0 && c < 1.0);
        // Self-correlation is one; rescaling invariance.
        assert_relative_eq!(
            weighted_correlation(&a, &a, &w).unwrap().unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let b_scaled: Vec<f64> = b.iter().map(|x| 7.0 * x).collect();
        assert_relative_eq!(
            weighted_correlation(&a, &b_scaled, &w).unwrap().unwrap(),
            c,
            epsilon = 1e-12
        );
        // Zero variance flagged.
        assert!(weighted_correlation(&a, &[1.0; 4], &w).unwrap().is_none());
    }

    #[test]
    fn score_rest_correlation_cases() {
        // Two perfectly correlated components, rest constant.
        let scores = vec![
            vec![1.0, 1.0, 5.0],
            vec![2.0, 2.0, 5.0],
            vec![3.0, 3.0, 5.0],
        ];
        let w = [1.0, 1.0, 1.0];
        let out = score_rest_correlation(&scores, &w).unwrap();
        assert_relative_eq!(out[0].unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(out[1].unwrap(), 1.0, epsilon = 1e-12);
        assert!(out[2].is_none()); // constant component: zero variance
    }

    #[test]
    fn conditional_cdf_cases() {
        let v = [3.0, 9.0];
        let w = [1.0, 1.0];
        let keep_first = [true, false];
        assert_eq!(conditional_cdf(&v, &keep_first, &w, 3.0).unwrap(), 1.0);
        assert_eq!(conditional_cdf(&v, &keep_first, &w, 2.0).unwrap(), 0.0);
        // Tautological condition equals the plain CDF pointwise.
        let all = [true, true];
        for x in [0.0, 3.0, 5.0, 9.0, 10.0] {
            assert_eq!(
                conditional_cdf(&v, &all, &w, x).unwrap(),
                weighted_cdf(&v, &w, x).unwrap()
            );
        }
        assert!(conditional_cdf(&v, &[false, false], &w, 1.0).is_err());
    }

    #[test]
    fn joint_exceedance_cases() {
        let stats = vec![vec![5.0, 10.0], vec![5.0, 0.0]];
        let w = [1.0, 1.0];
        assert_eq!(joint_exceedance(&stats, &w, &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(joint_exceedance(&stats, &w, &[100.0, 100.0]).unwrap(), 0.0);
        // Second sample meets only the first threshold.
        assert_eq!(joint_exceedance(&stats, &w, &[5.0, 1.0]).unwrap(), 0.5);
        // Single-component exceedance equals one minus the CDF just below.
        let col: Vec<Vec<f64>> = stats.iter().map(|s| vec![s[1]]).collect();
        let vals: Vec<f64> = stats.iter().map(|s| s[1]).collect();
        let kappa = 10.0;
        let p = joint_exceedance(&col, &w, &[kappa]).unwrap();
        let cdf_below = weighted_cdf(&vals, &w, kappa - 1e-9).unwrap();
        assert_relative_eq!(p, 1.0 - cdf_below, epsilon = 1e-12);
    }

    #[test]
    fn table_writer_smoke() {
        let mut buf = Vec::new();
        let rows = vec![(
            "fruit".to_string(),
            vec![1.0; 8],
            Some(vec![0.1; 8]),
        )];
        write_distribution_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("component\tmean\tp05\tp10\tp25\tp50\tp75\tp90\tp95\n"));
        assert!(text.contains("fruit_se"));
        let mut buf2 = Vec::new();
        write_percentile_curve(&mut buf2, &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(String::from_utf8(buf2).unwrap().lines().count(), 100);
    }
}
