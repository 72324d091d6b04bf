//! TOML run configuration: components and transforms, data column mappings,
//! chain settings, population/scoring settings, synthetic-generation truth
//! parameters and BRR settings, with conversions into the library types.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::PatternedCovParams;
use crate::data_model::{ColumnSchema, ComponentDef, ComponentSpec, CompositionRule, Term};
use crate::error::{Error, Result};
use crate::harness::SyntheticTruth;
use crate::population::{DensityKind, ScoreMap, ScoringRule};
use crate::sampler::ChainConfig;
use crate::transforms::TransformSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub brr: Option<BrrConfig>,
    #[serde(default)]
    pub episodic: Vec<ComponentConfig>,
    #[serde(default)]
    pub daily: Vec<ComponentConfig>,
    pub energy: ComponentConfig,
    #[serde(default)]
    pub composition: Vec<CompositionConfig>,
    #[serde(default)]
    pub score: Vec<ScoreConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub name: String,
    #[serde(default)]
    pub units: String,
    pub lambda: f64,
    /// Input file column holding the raw amount; omitted for components
    /// derived by a composition rule.
    #[serde(default)]
    pub column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub output: String,
    pub derived: String,
    pub subtract: Vec<String>,
    /// Input file column with the reported output values.
    #[serde(default)]
    pub column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Covariate formula terms, e.g. `["age", "age*gender"]`.
    pub covariates: Vec<String>,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub proposal_window: f64,
    pub batch_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = ChainConfig::default();
        ModelConfig {
            covariates: Vec::new(),
            iterations: c.iterations,
            burnin: c.burnin,
            thin: c.thin,
            seed: c.seed,
            grid_points: c.grid_points,
            proposal_window: c.proposal_window,
            batch_count: c.batch_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    /// Monte Carlo replicates per individual.
    pub b_draws: usize,
    /// Seed for the population stream, independent of the sampler seed.
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            b_draws: 5000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_weight")]
    pub weight: String,
    #[serde(default = "default_recall")]
    pub recall: String,
    #[serde(default = "default_weekend")]
    pub weekend: String,
    /// Covariate columns available to formula terms.
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn default_id() -> String {
    "id".into()
}
fn default_weight() -> String {
    "weight".into()
}
fn default_recall() -> String {
    "recall".into()
}
fn default_weekend() -> String {
    "weekend".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_individuals: usize,
    #[serde(default = "default_recalls")]
    pub recalls: usize,
    #[serde(default = "default_weekend_probability")]
    pub weekend_probability: f64,
    #[serde(default = "default_one")]
    pub weight_low: f64,
    #[serde(default = "default_one")]
    pub weight_high: f64,
    #[serde(default)]
    pub n_covariates: usize,
    /// Coefficient rows, one per response row, layout
    /// `[intercept, weekend, second_recall, covariates...]`.
    pub beta: Vec<Vec<f64>>,
    pub sigma_u: Vec<Vec<f64>>,
    #[serde(default)]
    pub r: Vec<f64>,
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub v_diag: Vec<f64>,
    #[serde(default)]
    pub v_free: Vec<Vec<f64>>,
    /// Per amount component `[mu, sigma]` standardization constants, in
    /// component order (episodic, daily, energy).
    pub standardization: Vec<[f64; 2]>,
}

fn default_recalls() -> usize {
    2
}
fn default_weekend_probability() -> f64 {
    3.0 / 7.0
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrrConfig {
    pub weights_file: PathBuf,
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Optional reduced iteration count for replicate fits.
    #[serde(default)]
    pub replicate_iterations: Option<usize>,
    #[serde(default)]
    pub replicate_burnin: Option<usize>,
}

fn default_factor() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Modeled or composed component name.
    pub component: String,
    /// `per_thousand`, `percent_energy_fat`, or `percent_energy_direct`.
    pub density: String,
    #[serde(default = "default_one")]
    pub unit_scale: f64,
    pub cap: f64,
    /// Present for the adequacy form `min(cap, cap * density / standard)`.
    #[serde(default)]
    pub standard: Option<f64>,
    /// Moderation form knots.
    #[serde(default)]
    pub full_at: Option<f64>,
    #[serde(default)]
    pub zero_at: Option<f64>,
    #[serde(default)]
    pub knot_density: Option<f64>,
    #[serde(default)]
    pub knot_score: Option<f64>,
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn component_spec(&self) -> Result<ComponentSpec> {
        let def = |c: &ComponentConfig| ComponentDef {
            name: c.name.clone(),
            units: c.units.clone(),
            lambda: c.lambda,
        };
        let spec = ComponentSpec {
            episodic: self.episodic.iter().map(def).collect(),
            daily: self.daily.iter().map(def).collect(),
            energy: def(&self.energy),
            composition: self
                .composition
                .iter()
                .map(|c| CompositionRule {
                    output: c.output.clone(),
                    derived: c.derived.clone(),
                    subtract: c.subtract.clone(),
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn schema(&self) -> Result<ColumnSchema> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("[data] section required for this command".into()))?;
        let mut amounts = std::collections::BTreeMap::new();
        for c in self.episodic.iter().chain(&self.daily).chain([&self.energy]) {
            if let Some(col) = &c.column {
                amounts.insert(c.name.clone(), col.clone());
            }
        }
        let mut outputs = std::collections::BTreeMap::new();
        for c in &self.composition {
            let col = c.column.as_ref().ok_or_else(|| {
                Error::Config(format!("composition output {} needs a column", c.output))
            })?;
            outputs.insert(c.output.clone(), col.clone());
        }
        Ok(ColumnSchema {
            id: data.id.clone(),
            weight: data.weight.clone(),
            recall: data.recall.clone(),
            weekend: data.weekend.clone(),
            covariates: data.covariates.clone(),
            amounts,
            outputs,
        })
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            iterations: self.model.iterations,
            burnin: self.model.burnin,
            thin: self.model.thin,
            seed: self.model.seed,
            grid_points: self.model.grid_points,
            proposal_window: self.model.proposal_window,
            batch_count: self.model.batch_count,
        }
    }

    pub fn formula(&self) -> Vec<Term> {
        self.model.covariates.iter().map(|s| Term::parse(s)).collect()
    }

    /// Scoring rules; empty `[[score]]` sections yield `None`.
    pub fn scoring_rules(&self) -> Result<Option<Vec<ScoringRule>>> {
        if self.score.is_empty() {
            return Ok(None);
        }
        let mut rules = Vec::with_capacity(self.score.len());
        for s in &self.score {
            let density = match s.density.as_str() {
                "per_thousand" => DensityKind::PerThousandKcal {
                    unit_scale: s.unit_scale,
                },
                "percent_energy_fat" => DensityKind::PercentEnergyFat,
                "percent_energy_direct" => DensityKind::PercentEnergyDirect,
                other => {
                    return Err(Error::Config(format!(
                        "unknown density kind {other:?} for {}",
                        s.component
                    )))
                }
            };
            let map = match (s.standard, s.full_at, s.zero_at) {
                (Some(standard), None, None) => ScoreMap::CappedRatio {
                    cap: s.cap,
                    standard,
                },
                (None, Some(full_at), Some(zero_at)) => {
                    let knot = match (s.knot_density, s.knot_score) {
                        (Some(d), Some(v)) => Some((d, v)),
                        (None, None) => None,
                        _ => {
                            return Err(Error::Config(format!(
                                "{}: knot_density and knot_score must appear together",
                                s.component
                            )))
                        }
                    };
                    ScoreMap::Descending {
                        cap: s.cap,
                        full_at,
                        zero_at,
                        knot,
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{}: give either standard (adequacy) or full_at + zero_at (moderation)",
                        s.component
                    )))
                }
            };
            rules.push(ScoringRule {
                component: s.component.clone(),
                density,
                map,
            });
        }
        Ok(Some(rules))
    }

    pub fn synthetic_truth(&self) -> Result<SyntheticTruth> {
        let sim = self
            .simulate
            .as_ref()
            .ok_or_else(|| Error::Config("[simulate] section required".into()))?;
        let spec = self.component_spec()?;
        let n_rows = spec.n_rows();
        if sim.sigma_u.len() != n_rows || sim.sigma_u.iter().any(|r| r.len() != n_rows) {
            return Err(Error::Config(format!("sigma_u must be {n_rows}x{n_rows}")));
        }
        let sigma_u = DMatrix::from_fn(n_rows, n_rows, |i, j| sim.sigma_u[i][j]);
        let beta: Vec<DVector<f64>> = sim
            .beta
            .iter()
            .map(|row| DVector::from_column_slice(row))
            .collect();
        let mut eps = PatternedCovParams::identity(spec.n_episodic(), spec.n_daily());
        if !sim.r.is_empty() {
            if sim.r.len() != eps.r.len() {
                return Err(Error::Config(format!("r needs {} entries", eps.r.len())));
            }
            eps.r = sim.r.clone();
        }
        if !sim.theta.is_empty() {
            if sim.theta.len() != eps.theta.len() {
                return Err(Error::Config(format!("theta needs {} entries", eps.theta.len())));
            }
            eps.theta = sim.theta.clone();
        }
        if !sim.v_diag.is_empty() {
            if sim.v_diag.len() != eps.v_diag.len() {
                return Err(Error::Config(format!("v_diag needs {} entries", eps.v_diag.len())));
            }
            eps.v_diag = sim.v_diag.clone();
        }
        if !sim.v_free.is_empty() {
            if sim.v_free.len() != eps.v_free.len()
                || sim
                    .v_free
                    .iter()
                    .zip(&eps.v_free)
                    .any(|(a, b)| a.len() != b.len())
            {
                return Err(Error::Config("v_free row layout mismatch".into()));
            }
            eps.v_free = sim.v_free.clone();
        }
        eps.audit()?;
        if sim.standardization.len() != spec.n_amounts() {
            return Err(Error::Config(format!(
                "standardization needs {} [mu, sigma] pairs",
                spec.n_amounts()
            )));
        }
        let standardization = sim
            .standardization
            .iter()
            .enumerate()
            .map(|(a, pair)| {
                TransformSpec::new(spec.amount_component(a).lambda, pair[0], pair[1])
            })
            .collect::<Result<_>>()?;
        let truth = SyntheticTruth {
            spec,
            beta,
            sigma_u,
            eps_params: eps,
            standardization,
            n_individuals: sim.n_individuals,
            recalls_per_individual: sim.recalls,
            n_covariates: sim.n_covariates,
            weight_low: sim.weight_low,
            weight_high: sim.weight_high,
            weekend_probability: sim.weekend_probability,
        };
        truth.validate()?;
        Ok(truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
[model]
iterations = 200
burnin = 50
seed = 9

[simulate]
n_individuals = 10
beta = [[0.5, 0.2, -0.1], [0.3, 0.0, 0.0], [7.0, 0.1, 0.0]]
sigma_u = [[0.5, 0.1, 0.1], [0.1, 0.5, 0.1], [0.1, 0.1, 0.5]]
standardization = [[1.0, 0.8], [7.3, 0.4]]

[[episodic]]
name = "fruit"
lambda = 0.5
column = "fruit"

[energy]
name = "energy"
lambda = 0.0
column = "kcal"

[[score]]
component = "fruit"
density = "per_thousand"
cap = 5.0
standard = 0.8
"#;

    #[test]
    fn parse_demo_config() {
        let cfg: RunConfig = toml::from_str(DEMO).unwrap();
        assert_eq!(cfg.model.iterations, 200);
        assert_eq!(cfg.model.thin, 1); // default
        let spec = cfg.component_spec().unwrap();
        assert_eq!(spec.n_rows(), 3);
        let cc = cfg.chain_config();
        assert_eq!(cc.seed, 9);
        cc.validate().unwrap();
        let truth = cfg.synthetic_truth().unwrap();
        assert_eq!(truth.n_individuals, 10);
        let rules = cfg.scoring_rules().unwrap().unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].map.score(0.8), 5.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        let bad = DEMO.replace("iterations = 200", "iterationz = 200");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
        let bad_dims = DEMO.replace(
            "sigma_u = [[0.5, 0.1, 0.1], [0.1, 0.5, 0.1], [0.1, 0.1, 0.5]]",
            "sigma_u = [[0.5, 0.1], [0.1, 0.5]]",
        );
        let cfg: RunConfig = toml::from_str(&bad_dims).unwrap();
        assert!(cfg.synthetic_truth().is_err());
    }

    #[test]
    fn schema_requires_data_section() {
        let cfg: RunConfig = toml::from_str(DEMO).unwrap();
        assert!(cfg.schema().is_err());
        let with_data = format!("{DEMO}\n[data]\npath = \"recalls.csv\"\n");
        let cfg: RunConfig = toml::from_str(&with_data).unwrap();
        let schema = cfg.schema().unwrap();
        assert_eq!(schema.id, "id");
        assert_eq!(schema.amounts["fruit"], "fruit");
    }
}
