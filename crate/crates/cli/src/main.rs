//! Batch command-line interface.
//!
//! Subcommands form a pipeline over files in an output directory:
//! `simulate` writes a synthetic dataset; `fit` estimates the model and
//! writes parameter estimates plus a diagnostics log; `estimate` simulates
//! usual-intake distributions from the estimates; `score` turns them into
//! diet-quality score tables; `brr` repeats fit+estimation under replicate
//! weights and attaches standard errors.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 numerical
//! failure, 64 usage error.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use intake_core::config::RunConfig;
use intake_core::data_model::{
    build_design, compute_standardization, ingest_survey, preprocess, SurveyDataset,
};
use intake_core::error::Error;
use intake_core::harness::{generate_synthetic, run_brr, BRRWeights};
use intake_core::population::{
    distribution_row, hei_total_score, monte_carlo_population, score_rest_correlation,
    usual_correlations, weighted_percentile, write_correlation_table, write_distribution_table,
    write_percentile_curve, PopulationSamples, ScoringRule,
};
use intake_core::sampler::{batch_means_mcse, run_chain, ChainConfig, ParameterEstimates, Priors};

#[derive(Parser)]
#[command(
    name = "intake",
    about = "Fits a survey-weighted measurement-error model for episodically \
             consumed dietary components and estimates usual-intake and \
             diet-quality score distributions.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [simulate] truth parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model; writes estimates.json, draws.json and diagnostics.log.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset file: .json from `simulate`, otherwise delimited text
        /// ingested via the [data] section.
        #[arg(long)]
        data: PathBuf,
        /// Overrides [model].iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Overrides [model].burnin.
        #[arg(long)]
        burnin: Option<usize>,
    },
    /// Estimate usual-intake distributions from fitted parameters.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// estimates.json from `fit`.
        #[arg(long)]
        estimates: PathBuf,
        /// Overrides [population].b_draws.
        #[arg(long)]
        b_draws: Option<usize>,
    },
    /// Compute diet-quality score tables from fitted parameters.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        b_draws: Option<usize>,
    },
    /// Fit + estimation per BRR replicate weight set; tables gain SE rows.
    Brr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the replicate count (uses the first R weight sets).
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        b_draws: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numerical(_) | Error::Covariance(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { common } => {
            let (cfg, _) = setup(&common)?;
            let seed = common.seed.unwrap_or(cfg.model.seed);
            let truth = cfg.synthetic_truth()?;
            let (dataset, diag) = generate_synthetic(&truth, seed)?;
            write_json(&common.out.join("dataset.json"), &dataset)?;
            println!(
                "wrote {} ({} individuals, {} recalls, {} resampled draws)",
                common.out.join("dataset.json").display(),
                dataset.n_individuals(),
                dataset.total_recalls(),
                diag.resampled
            );
            Ok(())
        }
        Command::Fit {
            common,
            data,
            iterations,
            burnin,
        } => {
            let (cfg, mut chain) = setup(&common)?;
            if let Some(s) = common.seed {
                chain.seed = s;
            }
            if let Some(i) = iterations {
                chain.iterations = i;
            }
            if let Some(b) = burnin {
                chain.burnin = b;
            }
            let dataset = load_dataset(&cfg, &data)?;
            let formula = cfg.formula();
            let mut log = BufWriter::new(File::create(common.out.join("diagnostics.log"))?);
            let fit = run_chain(&dataset, &formula, &Priors::default(), &chain, Some(&mut log))?;
            log.flush()?;
            write_json(&common.out.join("estimates.json"), &fit.estimates)?;
            write_json(&common.out.join("draws.json"), &fit.draws)?;
            // Batch-means MCSE per retained scalar.
            let mut mcse = BufWriter::new(File::create(common.out.join("mcse.tsv"))?);
            writeln!(mcse, "scalar\tmean\tmcse")?;
            for (s, label) in fit.draws.labels.iter().enumerate() {
                let col = fit.draws.column(s);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                match batch_means_mcse(&col, chain.batch_count) {
                    Ok(bm) => writeln!(mcse, "{label}\t{mean:.6}\t{:.6}", bm.mcse)?,
                    Err(_) => writeln!(mcse, "{label}\t{mean:.6}\tNA")?,
                }
            }
            mcse.flush()?;
            println!("wrote {}", common.out.join("estimates.json").display());
            Ok(())
        }
        Command::Estimate {
            common,
            data,
            estimates,
            b_draws,
        } => {
            let (cfg, _) = setup(&common)?;
            let dataset = load_dataset(&cfg, &data)?;
            let est: ParameterEstimates = read_json(&estimates)?;
            let design = build_design(&dataset, &cfg.formula())?;
            let b = b_draws.unwrap_or(cfg.population.b_draws);
            let seed = common.seed.unwrap_or(cfg.population.seed);
            let samples = monte_carlo_population(&est, &dataset, &design, b, seed)?;
            write_intake_tables(&common.out, &samples, None)?;
            println!(
                "wrote usual-intake tables to {} ({} samples, {} clamped)",
                common.out.display(),
                samples.samples.len(),
                samples.clamped
            );
            Ok(())
        }
        Command::Score {
            common,
            data,
            estimates,
            b_draws,
        } => {
            let (cfg, _) = setup(&common)?;
            let dataset = load_dataset(&cfg, &data)?;
            let est: ParameterEstimates = read_json(&estimates)?;
            let design = build_design(&dataset, &cfg.formula())?;
            let b = b_draws.unwrap_or(cfg.population.b_draws);
            let seed = common.seed.unwrap_or(cfg.population.seed);
            let rules = cfg
                .scoring_rules()?
                .ok_or_else(|| Error::Config("[[score]] rules required for `score`".into()))?;
            let samples = monte_carlo_population(&est, &dataset, &design, b, seed)?;
            write_score_tables(&common.out, &samples, &rules, None)?;
            println!("wrote score tables to {}", common.out.display());
            Ok(())
        }
        Command::Brr {
            common,
            data,
            replicates,
            b_draws,
        } => {
            let (cfg, chain) = setup(&common)?;
            let dataset = load_dataset(&cfg, &data)?;
            let brr_cfg = cfg
                .brr
                .clone()
                .ok_or_else(|| Error::Config("[brr] section required for `brr`".into()))?;
            let mut weights = BRRWeights::from_csv(&brr_cfg.weights_file, &dataset, brr_cfg.factor)?;
            if let Some(r) = replicates {
                if r < weights.replicates.len() {
                    weights.replicates.truncate(r);
                }
            }
            let mut rep_chain = chain.clone();
            if let Some(i) = brr_cfg.replicate_iterations {
                rep_chain.iterations = i;
            }
            if let Some(b) = brr_cfg.replicate_burnin {
                rep_chain.burnin = b;
            }
            let formula = cfg.formula();
            let b = b_draws.unwrap_or(cfg.population.b_draws);
            let pop_seed = common.seed.unwrap_or(cfg.population.seed);
            let rules = cfg.scoring_rules()?;

            // One statistic vector per run: distribution rows of every
            // intake column, plus score rows when rules are configured.
            let pipeline = |d: &SurveyDataset, rep: Option<usize>| -> Result<Vec<f64>, Error> {
                let mut c = if rep.is_some() { rep_chain.clone() } else { chain.clone() };
                // Replicates use shifted seeds so their chains are independent.
                if let Some(p) = rep {
                    c.seed = c.seed.wrapping_add(1 + p as u64);
                }
                let fit = run_chain(d, &formula, &Priors::default(), &c, None)?;
                let design = build_design(d, &formula)?;
                let samples =
                    monte_carlo_population(&fit.estimates, d, &design, b, pop_seed)?;
                statistic_vector(&samples, rules.as_deref())
            };
            let labels = statistic_labels(&dataset, &cfg)?;
            let outcome = run_brr(&dataset, &weights, pipeline)?;
            let mut out = BufWriter::new(File::create(common.out.join("brr.tsv"))?);
            writeln!(out, "statistic\testimate\tstandard_error")?;
            for (s, label) in labels.iter().enumerate() {
                writeln!(
                    out,
                    "{label}\t{:.6}\t{:.6}",
                    outcome.estimate[s], outcome.standard_errors[s]
                )?;
            }
            out.flush()?;
            if !outcome.failed_replicates.is_empty() {
                eprintln!(
                    "warning: {} replicate(s) failed: {:?}; standard errors use survivors only",
                    outcome.failed_replicates.len(),
                    outcome.failed_replicates
                );
            }
            println!("wrote {}", common.out.join("brr.tsv").display());
            Ok(())
        }
    }
}

fn setup(common: &Common) -> Result<(RunConfig, ChainConfig), Error> {
    let cfg = RunConfig::from_path(&common.config)?;
    fs::create_dir_all(&common.out)?;
    let chain = cfg.chain_config();
    chain.validate()?;
    Ok((cfg, chain))
}

/// Loads a `.json` dataset verbatim, or ingests + preprocesses +
/// standardizes a delimited file through the [data] schema.
fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<SurveyDataset, Error> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let d: SurveyDataset = read_json(path)?;
        d.validate()?;
        return Ok(d);
    }
    let spec = cfg.component_spec()?;
    let schema = cfg.schema()?;
    let raw = ingest_survey(path, &spec, &schema)?;
    let mut d = preprocess(&raw)?;
    if d.standardization.is_none() {
        d.standardization = Some(compute_standardization(&d)?);
    }
    Ok(d)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("cannot parse {}: {e}", path.display())))
}

/// Distribution tables and percentile curves for every intake column.
fn write_intake_tables(
    out_dir: &Path,
    samples: &PopulationSamples,
    se_rows: Option<&[Vec<f64>]>,
) -> Result<(), Error> {
    let weights = samples.weights();
    let mut rows = Vec::new();
    for (c, label) in samples.labels.iter().enumerate() {
        let values = samples.values(c);
        rows.push((
            label.clone(),
            distribution_row(&values, &weights)?,
            se_rows.map(|se| se[c].clone()),
        ));
        let mut curve =
            BufWriter::new(File::create(out_dir.join(format!("percentiles_{label}.tsv")))?);
        write_percentile_curve(&mut curve, &values, &weights)?;
        curve.flush()?;
    }
    let mut table = BufWriter::new(File::create(out_dir.join("intake_distributions.tsv"))?);
    write_distribution_table(&mut table, &rows)?;
    table.flush()?;

    // Correlations between the intake columns.
    let columns: Vec<Vec<f64>> = (0..samples.labels.len()).map(|c| samples.values(c)).collect();
    let corr = usual_correlations(&columns, &weights)?;
    let mut cf = BufWriter::new(File::create(out_dir.join("intake_correlations.tsv"))?);
    write_correlation_table(&mut cf, &samples.labels, &corr)?;
    cf.flush()?;
    Ok(())
}

/// Per-sample component scores and totals under the given rules.
fn score_samples(
    samples: &PopulationSamples,
    rules: &[ScoringRule],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), Error> {
    let mut cols: Vec<usize> = Vec::with_capacity(rules.len());
    for rule in rules {
        cols.push(samples.column_index(&rule.component)?);
    }
    let mut scores = Vec::with_capacity(samples.samples.len());
    let mut totals = Vec::with_capacity(samples.samples.len());
    for s in &samples.samples {
        let energy = s.t[samples.energy_index];
        let row: Vec<f64> = rules
            .iter()
            .zip(&cols)
            .map(|(rule, &c)| rule.score(s.t[c], energy))
            .collect();
        let named: Vec<(String, f64)> = rules
            .iter()
            .zip(&row)
            .map(|(r, &v)| (r.component.clone(), v))
            .collect();
        totals.push(hei_total_score(&named, rules)?);
        scores.push(row);
    }
    Ok((scores, totals))
}

fn write_score_tables(
    out_dir: &Path,
    samples: &PopulationSamples,
    rules: &[ScoringRule],
    se_rows: Option<&[Vec<f64>]>,
) -> Result<(), Error> {
    let weights = samples.weights();
    let (scores, totals) = score_samples(samples, rules)?;
    let mut rows = Vec::new();
    for (c, rule) in rules.iter().enumerate() {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        rows.push((
            format!("score_{}", rule.component),
            distribution_row(&col, &weights)?,
            se_rows.map(|se| se[c].clone()),
        ));
    }
    rows.push((
        "score_total".to_string(),
        distribution_row(&totals, &weights)?,
        se_rows.map(|se| se[rules.len()].clone()),
    ));
    let mut table = BufWriter::new(File::create(out_dir.join("score_distributions.tsv"))?);
    write_distribution_table(&mut table, &rows)?;
    table.flush()?;

    // Component-vs-rest score correlations.
    let rest = score_rest_correlation(&scores, &weights)?;
    let mut rf = BufWriter::new(File::create(out_dir.join("score_rest_correlations.tsv"))?);
    writeln!(rf, "component\tcorrelation_with_rest")?;
    for (c, rule) in rules.iter().enumerate() {
        match rest[c] {
            Some(v) => writeln!(rf, "{}\t{v:.6}", rule.component)?,
            None => writeln!(rf, "{}\tNA", rule.component)?,
        }
    }
    rf.flush()?;

    // Total-score percentile curve and the median for exceedance queries.
    let mut curve = BufWriter::new(File::create(out_dir.join("percentiles_score_total.tsv"))?);
    write_percentile_curve(&mut curve, &totals, &weights)?;
    curve.flush()?;
    let median = weighted_percentile(&totals, &weights, 0.5)?;
    let mut mf = BufWriter::new(File::create(out_dir.join("score_total_median.tsv"))?);
    writeln!(mf, "statistic\tvalue")?;
    writeln!(mf, "median_total_score\t{median:.6}")?;
    mf.flush()?;
    Ok(())
}

/// Flattened statistic vector for BRR: distribution rows for every intake
/// column, then (when rules are given) for every score column and the total.
fn statistic_vector(
    samples: &PopulationSamples,
    rules: Option<&[ScoringRule]>,
) -> Result<Vec<f64>, Error> {
    let weights = samples.weights();
    let mut out = Vec::new();
    for c in 0..samples.labels.len() {
        out.extend(distribution_row(&samples.values(c), &weights)?);
    }
    if let Some(rules) = rules {
        let (scores, totals) = score_samples(samples, rules)?;
        for c in 0..rules.len() {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            out.extend(distribution_row(&col, &weights)?);
        }
        out.extend(distribution_row(&totals, &weights)?);
    }
    Ok(out)
}

fn statistic_labels(d: &SurveyDataset, cfg: &RunConfig) -> Result<Vec<String>, Error> {
    let stat_names = ["mean", "p05", "p10", "p25", "p50", "p75", "p90", "p95"];
    let mut labels = Vec::new();
    let mut columns: Vec<String> = (0..d.spec.n_amounts())
        .map(|a| d.spec.amount_component(a).name.clone())
        .collect();
    for rule in &d.spec.composition {
        columns.push(rule.output.clone());
    }
    for c in &columns {
        for s in stat_names {
            labels.push(format!("{c}_{s}"));
        }
    }
    if let Some(rules) = cfg.scoring_rules()? {
        for rule in &rules {
            for s in stat_names {
                labels.push(format!("score_{}_{s}", rule.component));
            }
        }
        for s in stat_names {
            labels.push(format!("score_total_{s}"));
        }
    }
    Ok(labels)
}
