//! Command-line front end.
//!
//! Configuration precedence is flag > config file > built-in default. The
//! resolved [`RunConfig`] is embedded in every artifact's `meta` block.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{config_hash, with_meta, Checkpoint};
use crate::data::{
    fit_normalizer, read_dataset, split_condition_target, synthetic_dataset, train_val_test, write_dataset,
    IrregularSeries, SyntheticConfig, DEFAULT_TRIM,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_seeds, interpolation_trace, EvalConfig, EvalReport};
use crate::model::{Hetvae, HetvaeConfig};
use crate::numgrad::AdamState;
use crate::objective::{history_csv, train, TrainConfig};
use crate::rng::{keyed, stream, streams};
use crate::untan::UnionTimeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolateConfig {
    pub ids: Vec<String>,
    /// Conditioning set sizes.
    pub n_cond: Vec<usize>,
    pub grid: usize,
}

impl Default for InterpolateConfig {
    fn default() -> Self {
        Self {
            ids: Vec::new(),
            n_cond: vec![3, 10, 20],
            grid: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; copied into the training and synthetic settings.
    pub seed: u64,
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub jobs: usize,
    pub trim: f64,
    pub model: HetvaeConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub eval: EvalConfig,
    pub interpolate: InterpolateConfig,
    pub ablations: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: None,
            jobs: 1,
            trim: DEFAULT_TRIM,
            model: HetvaeConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            eval: EvalConfig::default(),
            interpolate: InterpolateConfig::default(),
            ablations: ABLATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RunConfig {
    fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synthetic.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Ablation names: `full` or the removed components as dash-separated suffixes.
pub const ABLATIONS: [&str; 9] = [
    "full",
    "-ALO",
    "-DET",
    "-INT",
    "-HET-ALO",
    "-DET-ALO",
    "-PROB-ALO",
    "-INT-DET-ALO",
    "-HET-INT-DET-ALO",
];

fn ablation_tokens(name: &str) -> Option<Vec<&'static str>> {
    let name = name.trim();
    let name = name.strip_prefix("HeTVAE").unwrap_or(name).trim();
    if name.is_empty() || name.eq_ignore_ascii_case("full") {
        return Some(Vec::new());
    }
    let mut tokens = Vec::new();
    for part in name.split('-').map(str::trim).filter(|p| !p.is_empty()) {
        let t = ["HET", "ALO", "INT", "DET", "PROB"]
            .into_iter()
            .find(|t| t.eq_ignore_ascii_case(part))?;
        tokens.push(t);
    }
    tokens.sort_unstable();
    Some(tokens)
}

/// Canonical form of an ablation name, if it is one of [`ABLATIONS`].
pub fn canonical_ablation(name: &str) -> Result<&'static str> {
    let tokens = ablation_tokens(name);
    ABLATIONS
        .into_iter()
        .find(|a| tokens.is_some() && ablation_tokens(a) == tokens)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation `{name}`; valid names: {}",
                ABLATIONS.join(", ")
            ))
        })
}

/// Switches off the components named by an ablation.
pub fn apply_ablation(name: &str, model: &mut HetvaeConfig, train: &mut TrainConfig) -> Result<()> {
    let canonical = canonical_ablation(name)?;
    for t in ablation_tokens(canonical).unwrap_or_default() {
        match t {
            "HET" => model.het = false,
            "ALO" => train.alo = false,
            "INT" => model.int_path = false,
            "DET" => model.det_path = false,
            "PROB" => model.prob_path = false,
            _ => unreachable!(),
        }
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "hetvae", version, about = "Heteroscedastic temporal VAE for irregular time series")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for per-case evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark as train/val/test JSONL.
    Generate {
        /// Number of trajectories.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the normalizer and train a model.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train an ablated variant.
        #[arg(long, allow_hyphen_values = true)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Emit interpolation traces for chosen test cases.
    Interpolate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        n_cond: Vec<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and evaluate a set of ablations.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated ablation names; empty runs nothing.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, num_args = 0..)]
        names: Option<Vec<String>>,
        #[arg(long)]
        iterations: Option<u64>,
    },
}

/// Loads the config file (if any) and reports whether it set a model section.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, bool)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), false));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let has_model = raw.get("model").is_some();
    let cfg = serde_json::from_value(raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, has_model))
}

fn ensure_writable(paths: &[PathBuf], force: bool) -> Result<()> {
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    for p in paths {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_split(data: &Path, split: &str) -> Result<Vec<IrregularSeries>> {
    let path = data.join(format!("{split}.jsonl"));
    if !path.exists() {
        return Err(Error::Data(format!("dataset file {} not found", path.display())));
    }
    read_dataset(&path)
}

pub fn run(cli: Cli) -> Result<()> {
    let (mut cfg, model_from_file) = load_config(cli.common.config.as_deref())?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.common.out {
        cfg.out = o;
    }
    if let Some(j) = cli.common.jobs {
        cfg.jobs = j;
    }
    let force = cli.common.force;
    match cli.command {
        Command::Generate { n } => {
            if let Some(n) = n {
                cfg.synthetic.n_trajectories = n;
            }
            cmd_generate(&cfg.resolve()?, force).map(|_| ())
        }
        Command::Train {
            data,
            iterations,
            resume,
            ablation,
        } => {
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            if let Some(a) = &ablation {
                apply_ablation(a, &mut cfg.model, &mut cfg.train)?;
            }
            cmd_train(&cfg.resolve()?, resume.as_deref(), force).map(|_| ())
        }
        Command::Evaluate {
            data,
            checkpoint,
            seeds,
            samples,
        } => {
            if let Some(d) = data {
                cfg.data = d;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            if let Some(s) = samples {
                cfg.eval.samples = s;
            }
            cmd_evaluate(&cfg.resolve()?, model_from_file, force).map(|_| ())
        }
        Command::Interpolate {
            data,
            checkpoint,
            ids,
            n_cond,
            grid,
            samples,
        } => {
            if let Some(d) = data {
                cfg.data = d;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if !ids.is_empty() {
                cfg.interpolate.ids = ids;
            }
            if !n_cond.is_empty() {
                cfg.interpolate.n_cond = n_cond;
            }
            if let Some(g) = grid {
                cfg.interpolate.grid = g;
            }
            if let Some(s) = samples {
                cfg.eval.samples = s;
            }
            cmd_interpolate(&cfg.resolve()?, force).map(|_| ())
        }
        Command::Ablate { data, names, iterations } => {
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(n) = names {
                cfg.ablations = n.into_iter().filter(|s| !s.trim().is_empty()).collect();
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            cmd_ablate(&cfg.resolve()?, force).map(|_| ())
        }
    }
}

/// Case counts written by [`cmd_generate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<SplitCounts> {
    let out = &cfg.out;
    let files: Vec<PathBuf> = ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    ensure_writable(&files, force)?;
    let data = synthetic_dataset(&cfg.synthetic)?;
    let (manifest, [train_s, val_s, test_s]) = train_val_test(&data, cfg.seed, &mut stream(cfg.seed, streams::SPLIT));
    write_dataset(&train_s, &files[0])?;
    write_dataset(&val_s, &files[1])?;
    write_dataset(&test_s, &files[2])?;
    let counts = SplitCounts {
        train: train_s.len(),
        val: val_s.len(),
        test: test_s.len(),
    };
    let payload = json!({ "split": manifest, "counts": counts });
    write_json(&files[3], &with_meta(&payload, &cfg.to_value()?, cfg.seed)?)?;
    log::info!("wrote {} / {} / {} cases to {}", counts.train, counts.val, counts.test, out.display());
    Ok(counts)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, force: bool) -> Result<Checkpoint> {
    let out = &cfg.out;
    let ckpt_path = out.join("checkpoint.json");
    let loss_path = out.join("loss.csv");
    let in_place = resume.is_some_and(|r| r == ckpt_path);
    ensure_writable(&[ckpt_path.clone(), loss_path.clone()], force || in_place)?;
    let run = cfg.to_value()?;
    log::info!("resolved config: {run}");

    let train_raw = read_split(&cfg.data, "train")?;
    let mut train_cfg = cfg.train.clone();
    let (mut model, mut adam, normalizer, mut history) = match resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            train_cfg.seed = c.seed;
            if c.step() > cfg.train.iterations {
                return Err(Error::Config(format!(
                    "checkpoint is at step {}, beyond the requested {} iterations",
                    c.step(),
                    cfg.train.iterations
                )));
            }
            (c.model, c.adam, c.normalizer, c.history)
        }
        None => {
            let normalizer = fit_normalizer(&train_raw, cfg.trim)?;
            let train_n = normalizer.apply_all(&train_raw)?;
            let union = UnionTimeSet::from_dataset(&train_n, cfg.model.input_dim);
            let model = Hetvae::new(cfg.model.clone(), union, cfg.seed)?;
            let adam = AdamState::new(cfg.train.adam(), &model.params);
            (model, adam, normalizer, Vec::new())
        }
    };
    let train_n = normalizer.apply_all(&train_raw)?;
    let prior = history.clone();
    let every_dir = out.clone();
    let snapshot = |model: &Hetvae, adam: &AdamState, h: &[_]| -> Checkpoint {
        let mut hist = prior.clone();
        hist.extend_from_slice(h);
        Checkpoint {
            model: model.clone(),
            adam: adam.clone(),
            normalizer: normalizer.clone(),
            history: hist,
            seed: train_cfg.seed,
            run: run.clone(),
        }
    };
    let new = train(&mut model, &mut adam, &train_n, &train_cfg, |m, a, h| {
        if a.step < cfg.train.iterations {
            snapshot(m, a, h).save(every_dir.join(format!("checkpoint-{}.json", a.step)))?;
        }
        Ok(())
    })?;
    history.extend(new.iter().copied());
    let ckpt = snapshot(&model, &adam, &new);
    ckpt.save(&ckpt_path)?;
    write_text(&loss_path, &history_csv(&history))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("loss {} -> {} over {} iterations", first.total, last.total, history.len());
    }
    Ok(ckpt)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint.json"));
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

pub fn cmd_evaluate(cfg: &RunConfig, check_model: bool, force: bool) -> Result<EvalReport> {
    let path = cfg.out.join("eval.json");
    ensure_writable(std::slice::from_ref(&path), force)?;
    let ckpt = load_checkpoint(cfg)?;
    if check_model && config_hash(&cfg.model)? != ckpt.model_hash()? {
        return Err(Error::Config(
            "model config hash differs from the checkpoint's; refusing to evaluate".into(),
        ));
    }
    let test = ckpt.normalizer.apply_all(&read_split(&cfg.data, "test")?)?;
    let report = evaluate_seeds(&ckpt.model, &test, &cfg.eval, cfg.seed, cfg.jobs)?;
    write_json(&path, &with_meta(&report, &cfg.to_value()?, cfg.seed)?)?;
    log::info!("nll {:.4} ± {:.4}, mse {:.4}", report.nll, report.nll_std, report.mse);
    Ok(report)
}

/// Paths of the trace files written.
pub fn cmd_interpolate(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(cfg)?;
    let test = read_split(&cfg.data, "test")?;
    let ic = &cfg.interpolate;
    if ic.grid == 0 {
        return Err(Error::Config("grid must have at least one point".into()));
    }
    let ids: Vec<String> = if ic.ids.is_empty() {
        test.first().map(|c| vec![c.id.clone()]).unwrap_or_default()
    } else {
        ic.ids.clone()
    };
    let mut cases = Vec::with_capacity(ids.len());
    for id in &ids {
        let case = test.iter().find(|c| &c.id == id).ok_or_else(|| {
            let avail: Vec<&str> = test.iter().map(|c| c.id.as_str()).collect();
            Error::Data(format!("unknown case id `{id}`; available ids: {}", avail.join(", ")))
        })?;
        cases.push(ckpt.normalizer.apply(case)?);
    }
    let mut paths = Vec::new();
    for case in &cases {
        for &n in &ic.n_cond {
            paths.push(cfg.out.join(format!("trace_{}_n{n}.csv", case.id)));
        }
    }
    let meta_path = cfg.out.join("interpolate.json");
    let mut all = paths.clone();
    all.push(meta_path.clone());
    ensure_writable(&all, force)?;

    let grid: Vec<f64> = if ic.grid == 1 {
        vec![0.0]
    } else {
        (0..ic.grid).map(|i| i as f64 / (ic.grid - 1) as f64).collect()
    };
    let norm = &ckpt.normalizer;
    let mut written = paths.iter();
    for case in &cases {
        for &n in &ic.n_cond {
            let cond = if n >= case.n_obs() {
                case.clone()
            } else {
                let frac = n as f64 / case.n_obs() as f64;
                let mut rng = keyed(cfg.seed, streams::CONDITION, &case.id);
                split_condition_target(case, frac, &mut rng)?.0
            };
            let mut rng = keyed(cfg.seed, streams::CASE_NOISE, &case.id);
            let trace = interpolation_trace(&ckpt.model, &cond, &grid, cfg.eval.samples, &mut rng)?;
            let trace = trace.map_units(|t| norm.time_inverse(t), |d, m, s| (norm.value_inverse(d, m), s * norm.std[d]));
            let path = written.next().expect("one path per trace");
            write_text(path, &trace.to_csv())?;
        }
    }
    let payload = json!({ "ids": ids, "n_cond": ic.n_cond, "grid": grid.len(), "files": paths });
    write_json(&meta_path, &with_meta(&payload, &cfg.to_value()?, cfg.seed)?)?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

pub const ABLATION_HEADER: &str = "name,nll,nll_std,mae,mae_std,mse,mse_std";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let e = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, e.nll, e.nll_std, e.mae, e.mae_std, e.mse, e.mse_std
        ));
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, force: bool) -> Result<Vec<AblationRow>> {
    let names = cfg
        .ablations
        .iter()
        .map(|n| canonical_ablation(n))
        .collect::<Result<Vec<_>>>()?;
    let json_path = cfg.out.join("ablation.json");
    let csv_path = cfg.out.join("ablation.csv");
    ensure_writable(&[json_path.clone(), csv_path.clone()], force)?;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let mut run = cfg.clone();
        apply_ablation(name, &mut run.model, &mut run.train)?;
        run.out = cfg.out.join(name.trim_start_matches('-').to_ascii_lowercase());
        let run = run.resolve()?;
        cmd_train(&run, None, true)?;
        let mut eval_run = run.clone();
        eval_run.checkpoint = Some(run.out.join("checkpoint.json"));
        let report = cmd_evaluate(&eval_run, false, true)?;
        log::info!("{name}: nll {:.4}", report.nll);
        rows.push(AblationRow {
            name: name.to_string(),
            report,
        });
    }
    write_json(&json_path, &with_meta(&json!({ "rows": rows }), &cfg.to_value()?, cfg.seed)?)?;
    write_text(&csv_path, &ablation_csv(&rows))?;
    Ok(rows)
}
