use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use labmae::baselines::{ImputerKind, ImputerSpec};
use labmae::carbon::{self, EmissionFactorRegistry, PowerModel, Timing};
use labmae::data::io::render;
use labmae::data::{load_cohort, save_cohort, Cohort, LabSchema, DEFAULT_CLIP_QUANTILES, DEFAULT_MIN_OBSERVED};
use labmae::eval::{self, BaselineMethod, Imputer, MetricRecord};
use labmae::math::Matrix;
use labmae::model::{save_checkpoint, load_trainer, LabMae, ModelConfig, TrainConfig, Trainer};
use labmae::synth::{self, MissingMechanism, Nonlinearity, SynthConfig};

use crate::fail::{CliError, CliResult, Kind};
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::report;

pub const ALL_METHODS: [&str; 5] = ["labmae", "mean", "softimpute", "em", "mice"];

fn default_methods() -> Vec<String> {
    ALL_METHODS.iter().map(|s| s.to_string()).collect()
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn to_value<T: Serialize>(t: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(t).map_err(|e| CliError::internal(e.to_string()))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 20)]
    pub features: usize,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// none | quadratic | interaction
    #[arg(long, default_value = "none", value_parser = parse_nonlinearity)]
    pub nonlinearity: String,
    /// mcar | mar
    #[arg(long, default_value = "mcar", value_parser = parse_mechanism)]
    pub mechanism: String,
    #[arg(long, default_value_t = 0.25)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub followup_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    pub followup_drift: f64,
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    #[arg(long, default_value_t = 0.0)]
    pub group_shift: f64,
}

fn parse_nonlinearity(s: &str) -> Result<String, String> {
    to_nonlinearity(s).map(|_| s.to_string())
}

fn to_nonlinearity(s: &str) -> Result<Nonlinearity, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown nonlinearity `{s}`"))
}

fn parse_mechanism(s: &str) -> Result<String, String> {
    to_mechanism(s).map(|_| s.to_string())
}

fn to_mechanism(s: &str) -> Result<MissingMechanism, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mechanism `{s}`"))
}

impl SynthArgs {
    pub fn config(&self, seed: u64) -> CliResult<SynthConfig> {
        Ok(SynthConfig {
            n_rows: self.rows,
            n_features: self.features,
            latent_rank: self.rank,
            noise_sd: self.noise,
            nonlinearity: to_nonlinearity(&self.nonlinearity).map_err(CliError::usage)?,
            missing_mechanism: to_mechanism(&self.mechanism).map_err(CliError::usage)?,
            missing_rate: self.missing_rate,
            followup_prob: self.followup_prob,
            followup_drift_sd: self.followup_drift,
            n_groups: self.groups,
            group_shift_sd: self.group_shift,
            seed,
            ..Default::default()
        })
    }
}

pub fn cmd_synth(a: &SynthArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let cohort = synth::generate(&a.config(seed)?)?;
    save_cohort(&cohort, &out.join("cohort.csv"))?;
    RunManifest::new("synth", seed, to_value(a)?, &[])?.finish(out, &["cohort.csv".into(), "cohort.truth.csv".into()])
}

/// Temporal split and normalization settings shared by every command that
/// reads a cohort.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Admissions at or after this timestamp form the test split.
    #[arg(long)]
    pub cutoff: Option<i64>,
    /// Test share used to place the cutoff when none is given.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_CLIP_QUANTILES.0)]
    pub clip_lo: f64,
    #[arg(long, default_value_t = DEFAULT_CLIP_QUANTILES.1)]
    pub clip_hi: f64,
    /// Training rows need at least this many observed value and time cells.
    #[arg(long, default_value_t = DEFAULT_MIN_OBSERVED)]
    pub min_observed: usize,
}

impl SplitArgs {
    pub fn load(&self) -> CliResult<(Cohort, Cohort, Cohort)> {
        let full = load_cohort(&self.cohort)?;
        let cutoff = match self.cutoff {
            Some(c) => c,
            None => default_cutoff(&full, self.test_fraction)?,
        };
        let (train, test) = full.temporal_split(cutoff);
        let train = train.filter_min_observed(self.min_observed);
        if train.is_empty() || test.is_empty() {
            return Err(CliError::new(Kind::Data, format!("cutoff {cutoff} leaves an empty split (after the min_observed filter)")));
        }
        Ok((full, train, test))
    }
}

/// Admission time at the `1 − test_fraction` quantile.
pub fn default_cutoff(c: &Cohort, test_fraction: f64) -> CliResult<i64> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(CliError::usage(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    let mut t: Vec<i64> = c.rows.iter().map(|r| r.admission_time).collect();
    if t.is_empty() {
        return Err(CliError::new(Kind::Data, "cohort is empty"));
    }
    t.sort_unstable();
    let k = ((t.len() as f64) * (1.0 - test_fraction)).floor() as usize;
    Ok(t[k.min(t.len() - 1)])
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub ff_mult: usize,
    #[arg(long, default_value_t = 0.25)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Defaults to 1.5e-3 · batch_size / 256.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub min_lr: f64,
    /// Defaults to min(20, epochs − 1).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 10)]
    pub validate_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    pub fn configs(&self, seed: u64, seq_len: usize) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            embed_dim: self.embed_dim,
            n_layers_enc: self.enc_layers,
            n_layers_dec: self.dec_layers,
            n_heads: self.heads,
            ff_hidden_mult: self.ff_mult,
            mask_ratio: self.mask_ratio,
            seq_len,
            dropout_rate: self.dropout,
            ..Default::default()
        };
        let mut tc = TrainConfig::new(self.batch_size, self.epochs);
        if let Some(lr) = self.lr {
            tc.schedule.base_lr = lr;
        }
        if let Some(w) = self.warmup {
            tc.schedule.warmup_epochs = w;
        }
        tc.schedule.min_lr = self.min_lr;
        tc.weight_decay = self.weight_decay;
        tc.checkpoint_every = self.checkpoint_every;
        tc.validate_every = self.validate_every;
        tc.val_fraction = self.val_fraction;
        tc.seed = seed;
        (model, tc)
    }
}

pub fn cmd_train(a: &TrainArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let (_, train, _) = a.split.load()?;
    let mut inputs = vec![a.split.cohort.clone()];
    let mut trainer = match &a.resume {
        Some(p) => {
            inputs.push(p.clone());
            load_trainer(p)?
        }
        None => {
            let (m, t) = a.configs(seed, train.schema.seq_len());
            Trainer::new(m, t)?
        }
    };
    let schema = match &trainer.schema {
        Some(s) => s.clone(),
        None => train.fit_normalizer((a.split.clip_lo, a.split.clip_hi))?,
    };
    let normalized = train.normalized(&schema)?;
    let ckpt_dir = out.join("checkpoints");
    if trainer.config.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    }
    let start = trainer.epoch;
    trainer.run(&normalized, (trainer.config.checkpoint_every > 0).then_some(ckpt_dir.as_path()))?;
    save_checkpoint(&trainer, &out.join("model.lmae"))?;
    write_train_log(&trainer, &out.join("train_log.csv"))?;
    let mut outputs = vec!["model.lmae".to_string(), "train_log.csv".to_string()];
    if trainer.config.checkpoint_every > 0 {
        for e in (start + 1)..=trainer.epoch {
            if e % trainer.config.checkpoint_every == 0 {
                let name = format!("checkpoints/{}", labmae::model::checkpoint_path(Path::new(""), e).display());
                outputs.push(name);
            }
        }
    }
    RunManifest::new("train", seed, to_value(a)?, &inputs)?.finish(out, &outputs)
}

fn write_train_log(t: &Trainer, path: &Path) -> CliResult<()> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    writeln!(w, "epoch,lr,loss,val_loss,val_rmse,val_r2,val_mae,val_wasserstein,val_n_masked").map_err(io)?;
    for l in &t.log {
        let (vl, vr, vr2, vm, vw, vn) = match &l.val {
            Some(v) => (
                render(v.loss),
                render(v.rmse),
                v.r2.map(render).unwrap_or_default(),
                render(v.mae),
                render(v.wasserstein),
                v.n_masked.to_string(),
            ),
            None => Default::default(),
        };
        writeln!(w, "{},{},{},{vl},{vr},{vr2},{vm},{vw},{vn}", l.epoch, render(l.lr), render(l.loss)).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Feature ids to fill; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
}

pub fn cmd_impute(a: &ImputeArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let model = LabMae::load(&a.model)?;
    let cohort = load_cohort(&a.cohort)?;
    let ids: Vec<String> = if a.features.is_empty() {
        cohort.schema.features().iter().map(|f| f.id.clone()).collect()
    } else {
        a.features.clone()
    };
    let path = out.join("predictions.csv");
    let mut w = create(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(w, "admission_id,feature_id,prediction").map_err(io)?;
    for id in &ids {
        let f = cohort.schema.feature_index(id)?;
        let preds = model.impute(&cohort, id)?;
        for (row, p) in cohort.rows.iter().zip(preds) {
            if row.values[f].is_none() {
                writeln!(w, "{},{id},{}", row.admission_id, render(p)).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    RunManifest::new("impute", seed, to_value(a)?, &[a.model.clone(), a.cohort.clone()])?
        .finish(out, &["predictions.csv".into()])
}

/// Returns the answer from the cohort's ground truth, for pipeline checks.
pub struct Oracle {
    truth: Matrix,
    index: HashMap<String, usize>,
}

impl Oracle {
    pub fn new(full: &Cohort) -> CliResult<Self> {
        Ok(Self {
            truth: full.ground_truth()?.clone(),
            index: full.rows.iter().enumerate().map(|(i, r)| (r.admission_id.clone(), i)).collect(),
        })
    }
}

impl Imputer for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, hidden: &Cohort, feature: usize) -> labmae::Result<Vec<f64>> {
        hidden
            .rows
            .iter()
            .map(|r| {
                self.index
                    .get(&r.admission_id)
                    .map(|&i| self.truth.get(i, feature))
                    .ok_or(labmae::Error::TruthUnavailable)
            })
            .collect()
    }
}

/// Method selection shared by eval, fairness, followup and carbon.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MethodArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Trained model; required when `labmae` is among the methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Any of labmae, mean, softimpute, em, mice, oracle.
    #[arg(long, value_delimiter = ',', default_values_t = default_methods())]
    pub methods: Vec<String>,
}

pub struct Prepared {
    pub test: Cohort,
    pub methods: Vec<Box<dyn Imputer>>,
}

impl MethodArgs {
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.split.cohort.clone()];
        v.extend(self.model.clone());
        v
    }

    pub fn prepare(&self, seed: u64) -> CliResult<Prepared> {
        let (full, train, test) = self.split.load()?;
        let model = match (&self.model, self.methods.iter().any(|m| m == "labmae")) {
            (Some(p), _) => Some(LabMae::load(p)?),
            (None, true) => return Err(CliError::usage("method labmae needs --model")),
            (None, false) => None,
        };
        let schema: LabSchema = match &model {
            Some(m) => m.schema.clone(),
            None => train.fit_normalizer((self.split.clip_lo, self.split.clip_hi))?,
        };
        let mut methods: Vec<Box<dyn Imputer>> = Vec::new();
        for name in &self.methods {
            let m: Box<dyn Imputer> = match name.as_str() {
                "labmae" => Box::new(model.clone().expect("checked above")),
                "oracle" => Box::new(Oracle::new(&full)?),
                other => {
                    let kind = ImputerKind::ALL
                        .into_iter()
                        .find(|k| k.label() == other)
                        .ok_or_else(|| CliError::usage(format!("unknown method `{other}`")))?;
                    let mut spec = ImputerSpec::new(kind);
                    spec.seed = seed;
                    Box::new(BaselineMethod::fit(&train, &schema, &spec)?)
                }
            };
            methods.push(m);
        }
        Ok(Prepared { test, methods })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub methods: MethodArgs,
    /// Method the win counts compare against.
    #[arg(long, default_value = "labmae")]
    pub reference: String,
}

pub fn cmd_eval(a: &EvalArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let p = a.methods.prepare(seed)?;
    let mut records = Vec::new();
    for m in &p.methods {
        records.extend(eval::evaluate_all(&p.test, m.as_ref())?);
    }
    eval::write_records_csv(&records, create(&out.join("records.csv"))?)?;
    let mut outputs = vec!["records.csv".to_string()];
    if a.methods.methods.len() > 1 && a.methods.methods.contains(&a.reference) {
        let table = eval::win_counts(&records, &a.reference)?;
        fs::write(out.join("win_counts.md"), table.to_markdown()).map_err(|e| CliError::io(out, e))?;
        let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::internal(e.to_string()))?;
        fs::write(out.join("win_counts.json"), json + "\n").map_err(|e| CliError::io(out, e))?;
        outputs.extend(["win_counts.md".to_string(), "win_counts.json".to_string()]);
    }
    RunManifest::new("eval", seed, to_value(a)?, &a.methods.inputs())?.finish(out, &outputs)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FairnessArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub methods: MethodArgs,
    /// Allowed group labels; any label is accepted when omitted.
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<String>,
    #[arg(long, default_value_t = eval::DEFAULT_MIN_GROUP_N)]
    pub min_n: usize,
}

pub fn cmd_fairness(a: &FairnessArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let p = a.methods.prepare(seed)?;
    let mut records = Vec::new();
    for m in &p.methods {
        records.extend(eval::stratify_by_group(&p.test, m.as_ref(), &a.groups, a.min_n)?);
    }
    eval::write_records_csv(&records, create(&out.join("fairness.csv"))?)?;
    RunManifest::new("fairness", seed, to_value(a)?, &a.methods.inputs())?.finish(out, &["fairness.csv".into()])
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FollowupArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub methods: MethodArgs,
    /// Feature ids to ablate; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
}

pub fn cmd_followup(a: &FollowupArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let p = a.methods.prepare(seed)?;
    let ids: Vec<String> = if a.features.is_empty() {
        p.test.schema.features().iter().map(|f| f.id.clone()).collect()
    } else {
        a.features.clone()
    };
    let mut rows = Vec::new();
    for m in &p.methods {
        for id in &ids {
            rows.push((id.clone(), m.name().to_string(), eval::followup_ablation(&p.test, m.as_ref(), id)?));
        }
    }
    eval::write_ablation_csv(&rows, create(&out.join("followup.csv"))?)?;
    RunManifest::new("followup", seed, to_value(a)?, &a.methods.inputs())?.finish(out, &["followup.csv".into()])
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CarbonArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub methods: MethodArgs,
    #[arg(long, value_delimiter = ',', default_values_t = carbon::DEFAULT_BATCH_SIZES.to_vec())]
    pub batch_sizes: Vec<usize>,
    /// Registry JSON `{region: kg CO2 per kWh}`; a bundled example otherwise.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Regions to report; every registry entry when omitted.
    #[arg(long, value_delimiter = ',')]
    pub regions: Vec<String>,
    #[arg(long, default_value_t = PowerModel::default().cpu_w)]
    pub cpu_w: f64,
    #[arg(long, default_value_t = PowerModel::default().gpu_w)]
    pub gpu_w: f64,
    #[arg(long, default_value_t = PowerModel::default().ram_w)]
    pub ram_w: f64,
    /// Test rows in the timed workload.
    #[arg(long, default_value_t = 256)]
    pub workload_rows: usize,
    /// Reuse recorded durations instead of measuring.
    #[arg(long)]
    pub timings: Option<PathBuf>,
}

pub fn cmd_carbon(a: &CarbonArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let registry = match &a.registry {
        Some(p) => EmissionFactorRegistry::from_json(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
        None => EmissionFactorRegistry::example(),
    };
    let regions: Vec<String> = if a.regions.is_empty() {
        registry.regions().map(String::from).collect()
    } else {
        a.regions.clone()
    };
    for r in &regions {
        registry.factor(r)?;
    }
    let power = PowerModel {
        cpu_w: a.cpu_w,
        gpu_w: a.gpu_w,
        ram_w: a.ram_w,
    };
    let mut inputs = a.methods.inputs();
    inputs.extend(a.registry.clone());
    let timings: Vec<Timing> = match &a.timings {
        Some(p) => {
            inputs.push(p.clone());
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", p.display())))?
        }
        None => {
            let prep = a.methods.prepare(seed)?;
            let n = prep.test.len().min(a.workload_rows);
            let work = prep.test.subset(&(0..n).collect::<Vec<_>>());
            let mut workloads: Vec<(String, Box<dyn FnMut(usize) -> labmae::Result<()> + '_>)> = prep
                .methods
                .iter()
                .map(|m| {
                    let work = &work;
                    let run = move |b: usize| -> labmae::Result<()> {
                        let idx: Vec<usize> = (0..work.len()).collect();
                        for chunk in idx.chunks(b.max(1)) {
                            let part = work.subset(chunk);
                            for f in 0..part.schema.n_features() {
                                std::hint::black_box(eval::predict_feature(&part, m.as_ref(), f)?);
                            }
                        }
                        Ok(())
                    };
                    (m.name().to_string(), Box::new(run) as Box<dyn FnMut(usize) -> labmae::Result<()>>)
                })
                .collect();
            carbon::measure(&mut workloads, &a.batch_sizes)?
        }
    };
    let records = carbon::assemble(&timings, &regions, &registry, &power)?;
    let json = serde_json::to_string_pretty(&timings).map_err(|e| CliError::internal(e.to_string()))?;
    fs::write(out.join("timings.json"), json + "\n").map_err(|e| CliError::io(out, e))?;
    carbon::write_emissions_csv(&records, create(&out.join("emissions.csv"))?)?;
    carbon::write_emissions_csv(&carbon::region_means(&records), create(&out.join("emissions_mean.csv"))?)?;
    RunManifest::new("carbon", seed, to_value(a)?, &inputs)?.finish(
        out,
        &["timings.json".into(), "emissions.csv".into(), "emissions_mean.csv".into()],
    )
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    /// `records.csv` from `eval`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value = "labmae")]
    pub reference: String,
    /// `emissions_mean.csv` or `emissions.csv` from `carbon`.
    #[arg(long)]
    pub emissions: Option<PathBuf>,
}

pub fn cmd_report(a: &ReportArgs, seed: u64, out: &Path) -> CliResult<RunManifest> {
    prepare_out(out)?;
    let records: Vec<MetricRecord> =
        eval::read_records_csv(File::open(&a.records).map_err(|e| CliError::io(&a.records, e))?)?;
    let emissions = match &a.emissions {
        Some(p) => Some(carbon::read_emissions_csv(File::open(p).map_err(|e| CliError::io(p, e))?)?),
        None => None,
    };
    let written = report::write(&records, &a.reference, emissions.as_deref(), out)?;
    let mut inputs = vec![a.records.clone()];
    inputs.extend(a.emissions.clone());
    RunManifest::new("report", seed, to_value(a)?, &inputs)?.finish(out, &written)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// `manifest.json` of the run to repeat. Outputs go to --out-dir.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn args_of<T: serde::de::DeserializeOwned>(m: &RunManifest) -> CliResult<T> {
    serde_json::from_value(m.args.clone()).map_err(|e| CliError::schema(format!("manifest args: {e}")))
}

pub fn cmd_replay(a: &ReplayArgs, out: &Path) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        return Err(CliError::new(
            Kind::ReplayMismatch,
            format!("inputs changed since the run: {}", changed.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")),
        ));
    }
    let origin = a.manifest.parent().unwrap_or(Path::new("."));
    let again = match m.command.as_str() {
        "synth" => cmd_synth(&args_of(&m)?, m.seed, out)?,
        "train" => cmd_train(&args_of(&m)?, m.seed, out)?,
        "impute" => cmd_impute(&args_of(&m)?, m.seed, out)?,
        "eval" => cmd_eval(&args_of(&m)?, m.seed, out)?,
        "fairness" => cmd_fairness(&args_of(&m)?, m.seed, out)?,
        "followup" => cmd_followup(&args_of(&m)?, m.seed, out)?,
        "carbon" => {
            // durations are measurements; replay the recorded ones
            let mut args: CarbonArgs = args_of(&m)?;
            if args.timings.is_none() {
                args.timings = Some(origin.join("timings.json"));
            }
            cmd_carbon(&args, m.seed, out)?
        }
        "report" => cmd_report(&args_of(&m)?, m.seed, out)?,
        other => return Err(CliError::schema(format!("manifest names unknown command `{other}`"))),
    };
    let differing: Vec<String> = m
        .outputs
        .iter()
        .filter(|o| !again.outputs.iter().any(|n| n.path == o.path && n.sha256 == o.sha256))
        .map(|o| o.path.display().to_string())
        .collect();
    if !differing.is_empty() {
        return Err(CliError::new(
            Kind::ReplayMismatch,
            format!("outputs differ: {}", differing.join(", ")),
        ));
    }
    println!(
        "{}",
        serde_json::json!({"replayed": m.command, "identical": m.outputs.len(), "manifest": out.join(MANIFEST_NAME)})
    );
    Ok(())
}
