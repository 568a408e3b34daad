//! Command-line driver. One TOML document describes the schema, MCDA
//! criteria, priors and run settings; each subcommand reads it, does one
//! job and writes delimiter-separated tables into the output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::assessment::{assess_models, write_folds_csv, write_report_csv, AssessConfig};
use crate::data::{
    interleave_groups, load_dataset, reference_theta, simulate_with_schema, write_dataset, Dataset, Item, ItemKind,
    OutcomeSchema, REFERENCE_COUNTS,
};
use crate::fit::{fit_batch, write_summary_csv, FitConfig, PosteriorDraws};
use crate::mcda::{
    group_scores, sequential_trace, write_score_summary_csv, write_superiority_csv, McdaConfig, ScorePosterior,
    DEFAULT_THRESHOLD,
};
use crate::model::{Layout, ModelSpec, Prior, PriorConfig, Theta};
use crate::smc::{sequential_model, supports_sequential, SmcConfig};
use crate::{Error, Result};

pub const WORKERS_ENV: &str = "BRSMC_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "brsmc", version, about = "Bayesian benefit-risk analysis: factor models, model assessment, MCDA and sequential Monte Carlo")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Model to run, e.g. `EZ1-p`; repeat for several. Overrides the config file.
    #[arg(long = "model", global = true)]
    pub models: Vec<String>,
    /// Superiority threshold for first-crossing reports.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write it with its true parameters.
    Simulate,
    /// Fit each model by HMC and write draws and parameter summaries.
    Fit,
    /// Cross-validated log scores and posterior predictive p-values.
    Assess,
    /// Score posteriors and pairwise superiority from a draws file.
    Mcda {
        /// Draws written by `fit`; when absent the first model is fitted.
        draws: Option<PathBuf>,
    },
    /// Absorb subjects one at a time and trace the score posteriors.
    Sequential,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemConfig {
    pub name: String,
    pub kind: ItemKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub items: Vec<ItemConfig>,
    pub groups: Vec<String>,
}

impl SchemaConfig {
    pub fn build(&self) -> Result<OutcomeSchema> {
        OutcomeSchema::new(
            self.items
                .iter()
                .map(|i| Item {
                    name: i.name.clone(),
                    kind: i.kind,
                })
                .collect(),
            self.groups.clone(),
        )
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Subjects per group.
    pub counts: Vec<usize>,
    /// Optional R×p override of the true intercepts.
    pub alpha: Option<Vec<Vec<f64>>>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            counts: REFERENCE_COUNTS.to_vec(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequentialConfig {
    pub threshold: f64,
    /// Interleave groups (shuffled within group) instead of file order.
    pub interleave: bool,
}

impl Default for SequentialConfig {
    fn default() -> Self {
        SequentialConfig {
            threshold: DEFAULT_THRESHOLD,
            interleave: true,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub models: Vec<String>,
    pub schema: Option<SchemaConfig>,
    pub mcda: Option<McdaConfig>,
    pub prior: PriorConfig,
    pub fit: FitConfig,
    pub assess: AssessConfig,
    pub smc: SmcConfig,
    pub simulate: SimulateConfig,
    pub sequential: SequentialConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn schema(&self) -> Result<OutcomeSchema> {
        match &self.schema {
            Some(s) => s.build(),
            None => Ok(OutcomeSchema::diabetes_reference()),
        }
    }

    pub fn mcda_config(&self, schema: &OutcomeSchema) -> Result<McdaConfig> {
        let cfg = match &self.mcda {
            Some(m) => m.clone(),
            None if *schema == OutcomeSchema::diabetes_reference() => McdaConfig::diabetes_reference(),
            None => McdaConfig::uniform(schema),
        };
        cfg.validate_for(schema)?;
        Ok(cfg)
    }

    pub fn model_specs(&self, schema: &OutcomeSchema) -> Result<Vec<ModelSpec>> {
        let names = if self.models.is_empty() { vec!["EZ1-p".to_string()] } else { self.models.clone() };
        names
            .iter()
            .map(|n| ModelSpec::parse(n, schema.n_continuous(), schema.n_binary(), schema.n_groups()))
            .collect()
    }

    fn load_data(&self, schema: &OutcomeSchema) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("`dataset` is required for this command".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("dataset `{}` does not exist", path.display())));
        }
        load_dataset(path, schema)
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.fit.kernel.validate()?;
        self.assess.validate()?;
        self.smc.validate()?;
        if !(self.sequential.threshold > 0.0 && self.sequential.threshold <= 1.0) {
            return Err(Error::Config("sequential threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Files written by a command. Unless committed, they are deleted on drop
/// so a failed command leaves no partial output behind.
struct Outputs {
    dir: PathBuf,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Outputs {
            dir,
            created: Vec::new(),
            committed: false,
        })
    }

    fn write<F>(&mut self, name: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.created.push(path.clone());
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.created)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Settings after merging the config file with command-line overrides.
pub struct Resolved {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn resolve(cli: &Cli) -> Result<Resolved> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !cli.models.is_empty() {
        cfg.models = cli.models.clone();
    }
    if let Some(t) = cli.threshold {
        cfg.sequential.threshold = t;
    }
    cfg.validate()?;
    let seed = cli
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Error::Config("a seed is required (--seed or `seed` in the config)".into()))?;
    let out = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Resolved { cfg, seed, out })
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let r = resolve(cli)?;
    let work = || match &cli.command {
        Command::Simulate => cmd_simulate(&r),
        Command::Fit => cmd_fit(&r),
        Command::Assess => cmd_assess(&r),
        Command::Mcda { draws } => cmd_mcda(&r, draws.as_deref()),
        Command::Sequential => cmd_sequential(&r),
    };
    match cli.workers {
        Some(0) => Err(Error::Config("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn file_tag(spec: &ModelSpec) -> String {
    spec.name().replace(['/', ' '], "_")
}

pub fn cmd_simulate(r: &Resolved) -> Result<Vec<PathBuf>> {
    let schema = r.cfg.schema()?;
    let (spec, mut theta) = reference_theta();
    if schema.n_continuous() != spec.p_c || schema.n_binary() != spec.p_b || schema.n_groups() != spec.n_groups {
        return Err(Error::Config(format!(
            "simulation truth has {} continuous items, {} binary items and {} groups; the schema does not",
            spec.p_c, spec.p_b, spec.n_groups
        )));
    }
    let counts = &r.cfg.simulate.counts;
    if counts.len() != spec.n_groups || counts.iter().sum::<usize>() == 0 {
        return Err(Error::Config("simulate.counts needs one positive total across all groups".into()));
    }
    if let Some(alpha) = &r.cfg.simulate.alpha {
        if alpha.len() != spec.n_groups || alpha.iter().any(|row| row.len() != spec.p()) {
            return Err(Error::Config(format!("simulate.alpha must be {}×{}", spec.n_groups, spec.p())));
        }
        for (g, row) in alpha.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                theta.alpha[(g, j)] = *a;
            }
        }
    }
    let data = simulate_with_schema(&schema, &spec, &theta, counts, r.seed)?;
    let mut out = Outputs::new(r.out.clone())?;
    out.write("dataset.csv", |w| write_dataset(w, &data))?;
    out.write("truth.csv", |w| write_truth(w, &spec, &theta, &schema))?;
    Ok(out.commit())
}

fn write_truth<W: Write>(w: W, spec: &ModelSpec, theta: &Theta, schema: &OutcomeSchema) -> Result<()> {
    let layout = Layout::new(spec);
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["parameter", "value"])?;
    for (n, v) in layout.parameter_names(schema).iter().zip(layout.reported_values(theta)) {
        wr.write_record([n.clone(), format!("{v:?}")])?;
    }
    wr.flush().map_err(|e| Error::io("<truth>", e))?;
    Ok(())
}

pub fn cmd_fit(r: &Resolved) -> Result<Vec<PathBuf>> {
    let schema = r.cfg.schema()?;
    let data = r.cfg.load_data(&schema)?;
    let specs = r.cfg.model_specs(&schema)?;
    let mut out = Outputs::new(r.out.clone())?;
    for spec in &specs {
        let draws = fit_batch(spec, &r.cfg.prior, &data, &r.cfg.fit, r.seed)?;
        let tag = file_tag(spec);
        out.write(&format!("draws_{tag}.csv"), |w| draws.write_csv(w))?;
        out.write(&format!("summary_{tag}.csv"), |w| write_summary_csv(&draws.summary(), w))?;
    }
    Ok(out.commit())
}

pub fn cmd_assess(r: &Resolved) -> Result<Vec<PathBuf>> {
    let schema = r.cfg.schema()?;
    let data = r.cfg.load_data(&schema)?;
    let specs = r.cfg.model_specs(&schema)?;
    let reports = assess_models(&data, &specs, &r.cfg.prior, &r.cfg.fit, &r.cfg.assess, r.seed)?;
    let mut out = Outputs::new(r.out.clone())?;
    out.write("assessment.csv", |w| write_report_csv(&reports, w))?;
    out.write("assessment_folds.csv", |w| write_folds_csv(&reports, w))?;
    Ok(out.commit())
}

/// Reads draws written by [`PosteriorDraws::write_csv`].
pub fn read_draws(path: &Path, spec: &ModelSpec, schema: &OutcomeSchema) -> Result<Vec<Theta>> {
    let layout = Layout::new(spec);
    let names = layout.parameter_names(schema);
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = names
        .iter()
        .map(|n| headers.iter().position(|h| h == n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<_>>()?;
    let mut thetas = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let values: Vec<f64> = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| {
                rec.get(c).unwrap_or_default().parse().map_err(|_| Error::InvalidValue {
                    row: i + 1,
                    column: n.clone(),
                    message: "not a number".into(),
                })
            })
            .collect::<Result<_>>()?;
        thetas.push(layout.theta_from_reported(&values)?);
    }
    if thetas.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(thetas)
}

pub fn cmd_mcda(r: &Resolved, draws_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let schema = r.cfg.schema()?;
    let mcda = r.cfg.mcda_config(&schema)?;
    let spec = r.cfg.model_specs(&schema)?.remove(0);
    let thetas = match draws_path {
        Some(p) => read_draws(p, &spec, &schema)?,
        None => {
            let data = r.cfg.load_data(&schema)?;
            let d: PosteriorDraws = fit_batch(&spec, &r.cfg.prior, &data, &r.cfg.fit, r.seed)?;
            d.thetas
        }
    };
    let sp = ScorePosterior::from_thetas(&thetas, &mcda, &spec)?;
    let summary = sp.summary();
    let labels = schema.group_labels().to_vec();
    let mut out = Outputs::new(r.out.clone())?;
    out.write("scores.csv", |w| sp.write_csv(&labels, w))?;
    out.write("score_summary.csv", |w| write_score_summary_csv(&summary, &labels, w))?;
    out.write("superiority.csv", |w| write_superiority_csv(&summary, &labels, w))?;
    Ok(out.commit())
}

pub fn cmd_sequential(r: &Resolved) -> Result<Vec<PathBuf>> {
    let schema = r.cfg.schema()?;
    let data = r.cfg.load_data(&schema)?;
    let mcda = r.cfg.mcda_config(&schema)?;
    let spec = r.cfg.model_specs(&schema)?.remove(0);
    if !supports_sequential(&spec) {
        return Err(Error::Model(format!(
            "{} has no sequential sampler; use SAT, IND or EZ1 variants",
            spec.name()
        )));
    }
    let prior = Prior::resolve(&r.cfg.prior, &spec, &data.pooled_continuous_covariance())?;
    let model = sequential_model(&spec, &prior, &data)?;
    let order = if r.cfg.sequential.interleave {
        interleave_groups(&data, r.seed)?.order
    } else {
        (0..data.n()).collect()
    };
    let scorer = |t: &Theta| group_scores(t, &mcda, &spec);
    let (ps, records) = crate::smc::run_sequential(model.as_ref(), &order, &r.cfg.smc, r.seed, Some(&scorer))?;
    let labels = schema.group_labels().to_vec();
    let trace = sequential_trace(&records, &labels, r.cfg.sequential.threshold);
    let ids: Vec<String> = data.rows().iter().map(|row| row.subject_id.clone()).collect();

    let thetas: Vec<Theta> = (0..ps.len()).filter_map(|m| model.constrain(ps.theta_x(m))).collect();
    if thetas.len() != ps.len() {
        return Err(Error::Model("a final particle has invalid parameters".into()));
    }
    let final_scores = ScorePosterior::from_weighted(&thetas, &ps.normalized_weights(), &mcda, &spec)?;

    let mut out = Outputs::new(r.out.clone())?;
    out.write("trace.csv", |w| trace.write_csv(&ids, w))?;
    out.write("crossings.csv", |w| trace.write_crossings_csv(w))?;
    out.write("final_scores.csv", |w| final_scores.write_csv(&labels, w))?;
    out.write("final_score_summary.csv", |w| write_score_summary_csv(&final_scores.summary(), &labels, w))?;
    out.write("evidence.txt", |w| {
        writeln!(w, "model = \"{}\"", spec.name()).and_then(|_| writeln!(w, "log_evidence = {:?}", ps.log_evidence))
            .and_then(|_| writeln!(w, "rejuvenations = {}", ps.n_rejuvenations))
            .and_then(|_| writeln!(w, "laplace_fallbacks = {}", ps.n_fallbacks))
            .map_err(|e| Error::io("evidence.txt", e))
    })?;
    Ok(out.commit())
}
