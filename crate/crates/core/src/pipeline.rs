//! Command implementations over a run directory:
//!
//! ```text
//! <run>/config.toml   <run>/checkpoint   <run>/banks/   <run>/records/   <run>/reports/
//! <run>/metadata.json (timestamps and warnings)      <run>/.lock (while a command runs)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    category_frequencies, fd_score, fidelity_score, BenchmarkRow, BenchmarkTable, FdReport, FidelityReport,
};
use crate::inference::{generate_batch, DistributionSpec, GenerationRecord, GenerationRequest};
use crate::nn::{grad_check, DenoiserModel, GradCheckReport, GradMode, ModelConfig, Projection};
use crate::persist::{BankFile, BankMeta, Checkpoint};
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::svg::bar_chart;
use crate::train::{pretrain_base, train_attribute, PretrainLogRow};
use crate::world::{make_world, SyntheticWorld};

const SEED_PRETRAIN: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_SAMPLE: u64 = 3;
const SEED_EVAL: u64 = 4;

/// Exclusive handle on a run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        for sub in ["banks", "records", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(root.display().to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn bank_path(&self, attribute: &str) -> PathBuf {
        self.root.join("banks").join(format!("{attribute}.bank"))
    }

    pub fn records_path(&self, name: &str) -> PathBuf {
        self.root.join("records").join(format!("{name}.jsonl"))
    }

    pub fn report_path(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    /// Appends an entry to `metadata.json`, the only file that carries wall-clock time.
    pub fn note(&self, command: &str, config_hash: &str, notes: Vec<String>) -> Result<()> {
        let path = self.root.join("metadata.json");
        let mut entries: Vec<serde_json::Value> = match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => Vec::new(),
        };
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        entries.push(serde_json::json!({
            "command": command,
            "unix_time": now,
            "config_hash": config_hash,
            "notes": notes,
        }));
        fs::write(path, serde_json::to_vec_pretty(&entries)?)?;
        Ok(())
    }

    fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let text = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml());
        fs::write(self.config_path(), text)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config { key: what.to_string(), message: format!("{} does not exist", path.display()) })
    }
}

/// Loads a checkpoint and checks it matches the world and architecture of `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig, world: &SyntheticWorld) -> Result<(Checkpoint, String)> {
    require(path, "checkpoint")?;
    let (ck, hash) = Checkpoint::load(path)?;
    if ck.vocab != *world.vocab() {
        return Err(Error::ArchitectureMismatch("checkpoint vocabulary differs from the configured world".into()));
    }
    let want = cfg.model.model_config(world.dim(), world.vocab().len());
    if ck.model.config() != &want {
        return Err(Error::ArchitectureMismatch("checkpoint architecture differs from the configured model".into()));
    }
    Ok((ck, hash))
}

fn csv_pretrain(curve: &[PretrainLogRow], hash: &str) -> String {
    let mut s = String::from("step,train_loss,heldout_loss,config_hash\n");
    for r in curve {
        let _ = writeln!(s, "{},{:.8},{:.8},{hash}", r.step, r.train_loss, r.heldout_loss);
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub heldout_first: f64,
    pub heldout_last: f64,
}

/// Pretrains the base model and writes `checkpoint` and `reports/pretrain_curve.csv`.
pub fn cmd_pretrain(run: &RunDir, cfg: &RunConfig, init_from: Option<&Path>) -> Result<PretrainSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let world = make_world(&cfg.world)?;
    let sched = cfg.schedule.build()?;
    let init = match init_from {
        Some(p) => Some(load_checkpoint(p, cfg, &world)?.0.model),
        None => None,
    };
    run.write_config(cfg)?;
    let arch = cfg.model.model_config(world.dim(), world.vocab().len());
    let init_seed = derive_seed(cfg.pretrain.init_seed.unwrap_or(cfg.seed), SEED_PRETRAIN, 0);
    let seed = derive_seed(cfg.seed, SEED_PRETRAIN, 0);
    let out = pretrain_base(&world, arch, &sched, &cfg.pretrain, init, init_seed, seed)?;
    let ck = Checkpoint {
        model: out.model,
        schedule: cfg.schedule.clone(),
        vocab: world.vocab().clone(),
        config_hash: hash.clone(),
    };
    let ck_hash = ck.save(&run.checkpoint_path())?;
    fs::write(run.report_path("pretrain_curve.csv"), csv_pretrain(&out.curve, &hash))?;
    let notes = init_from.map(|p| vec![format!("initialised from {}", p.display())]).unwrap_or_default();
    run.note("pretrain", &hash, notes)?;
    Ok(PretrainSummary {
        checkpoint_hash: ck_hash,
        config_hash: hash,
        heldout_first: out.curve.first().map(|r| r.heldout_loss).unwrap_or(f64::NAN),
        heldout_last: out.curve.last().map(|r| r.heldout_loss).unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSummary {
    pub attribute: String,
    pub bank_hash: String,
    pub orth: f64,
    pub orth_baseline: f64,
    pub config_hash: String,
}

/// Trains one bank per debiased attribute, in order, each regularised against the earlier ones.
pub fn cmd_train_adapters(run: &RunDir, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<BankSummary>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let world = make_world(&cfg.world)?;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint_path());
    let (ck, ck_hash) = load_checkpoint(&ck_path, cfg, &world)?;
    let sched = ck.schedule.build()?;
    run.write_config(cfg)?;
    let mut prior = Vec::new();
    let mut out = Vec::new();
    for (i, name) in cfg.debias_order().iter().enumerate() {
        let tcfg = cfg.train_for(name)?;
        let attr = world.attribute(name)?.clone();
        let trained = train_attribute(
            &ck.model,
            world.vocab(),
            &sched,
            &attr,
            &prior,
            &tcfg,
            derive_seed(cfg.seed, SEED_TRAIN, i as u64),
        )?;
        let file = BankFile {
            meta: BankMeta {
                attribute: attr,
                layout: trained.bank.layout.clone(),
                architecture: ck.model.config().clone(),
                train: tcfg,
                base_hash: ck_hash.clone(),
                orth: trained.orth,
                orth_baseline: trained.orth_baseline,
                config_hash: hash.clone(),
            },
            bank: trained.bank.clone(),
        };
        let bank_hash = file.save(&run.bank_path(name))?;
        let mut csv = String::from("category,step,l_guidance,l_orth,total,config_hash\n");
        for r in &trained.curve {
            let _ = writeln!(csv, "{},{},{:.10},{:.10},{:.10},{hash}", r.category, r.step, r.guidance, r.orth, r.total);
        }
        fs::write(run.report_path(&format!("train_curve_{name}.csv")), csv)?;
        out.push(BankSummary {
            attribute: name.clone(),
            bank_hash,
            orth: trained.orth,
            orth_baseline: trained.orth_baseline,
            config_hash: hash.clone(),
        });
        prior.push(trained.bank);
    }
    fs::write(run.report_path("banks.json"), serde_json::to_vec_pretty(&out)?)?;
    run.note("train-adapters", &hash, vec![format!("checkpoint {ck_hash}")])?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleVariant {
    /// Base model only.
    Base,
    /// Indicator-selected adapters following the configured targets.
    Debiased,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub records: PathBuf,
    pub n: usize,
    /// Banks that were trained against a different checkpoint.
    pub transferred: Vec<String>,
}

pub struct SampleArgs<'a> {
    pub variant: SampleVariant,
    pub name: &'a str,
    pub checkpoint: Option<&'a Path>,
    pub banks: Option<&'a Path>,
    pub threads: usize,
}

pub fn cmd_sample(run: &RunDir, cfg: &RunConfig, args: &SampleArgs<'_>) -> Result<SampleSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let world = make_world(&cfg.world)?;
    let ck_path = args.checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint_path());
    let (ck, ck_hash) = load_checkpoint(&ck_path, cfg, &world)?;
    let sched = ck.schedule.build()?;
    let mut banks = Vec::new();
    let mut specs: Vec<DistributionSpec> = Vec::new();
    let mut transferred = Vec::new();
    let mut notes = Vec::new();
    if args.variant == SampleVariant::Debiased {
        specs = cfg.targets()?;
        let dir = args.banks.map(Path::to_path_buf).unwrap_or_else(|| run.root().join("banks"));
        for spec in &specs {
            let path = dir.join(format!("{}.bank", spec.attribute));
            require(&path, "banks")?;
            let (file, _) = BankFile::load(&path)?;
            if file.check_against(&ck.model, &ck_hash)? {
                log::warn!(
                    "bank `{}` was trained against checkpoint {}, sampling with {} (transfer mode)",
                    spec.attribute,
                    file.meta.base_hash,
                    ck_hash
                );
                notes.push(format!(
                    "transfer: bank `{}` base {} applied to checkpoint {}",
                    spec.attribute, file.meta.base_hash, ck_hash
                ));
                transferred.push(spec.attribute.clone());
            }
            banks.push(file.bank);
        }
    }
    let req = GenerationRequest {
        group: &cfg.generation.group,
        n: cfg.generation.n,
        guidance_scale: cfg.generation.guidance_scale,
        alpha_scale: cfg.alpha_scale(),
        seed: derive_seed(cfg.seed, SEED_SAMPLE, 0),
        config_hash: &hash,
        threads: args.threads,
    };
    let records = generate_batch(&ck.model, &sched, world.vocab(), &specs, &banks, &req)?;
    let path = run.records_path(args.name);
    write_records(&path, &records)?;
    notes.push(format!("records {} from checkpoint {ck_hash}", args.name));
    run.note("sample", &hash, notes)?;
    Ok(SampleSummary { records: path, n: records.len(), transferred })
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    require(path, "records")?;
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// FD for every target, oracle category frequencies and fidelity of one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: String,
    pub n: usize,
    pub fd: Vec<FdReport>,
    pub frequencies: BTreeMap<String, Vec<f64>>,
    pub fidelity: FidelityReport,
    pub fidelity_metric: String,
    pub config_hash: String,
}

pub fn evaluate_samples(
    name: &str,
    samples: &[Vec<f64>],
    world: &SyntheticWorld,
    targets: &[DistributionSpec],
    reference: usize,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut fd = Vec::new();
    let mut frequencies = BTreeMap::new();
    for t in targets {
        fd.push(fd_score(samples, t, world, seed)?);
        frequencies.insert(t.attribute.clone(), category_frequencies(samples, world, &t.attribute)?);
    }
    Ok(EvalReport {
        records: name.to_string(),
        n: samples.len(),
        fd,
        frequencies,
        fidelity: fidelity_score(samples, world, reference, seed)?,
        fidelity_metric: "energy distance to ground truth (lower is better)".into(),
        config_hash: config_hash.to_string(),
    })
}

/// Scores `records/<name>.jsonl` into `reports/eval_<name>.json`.
pub fn cmd_eval(run: &RunDir, cfg: &RunConfig, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let world = make_world(&cfg.world)?;
    let records = read_records(&run.records_path(name))?;
    if records.is_empty() {
        return Err(Error::Distribution(format!("records `{name}` are empty")));
    }
    if let Some(r) = records.iter().find(|r| r.z0.len() != world.dim()) {
        return Err(Error::ArchitectureMismatch(format!(
            "record {} has {} values, world dimension is {}",
            r.index,
            r.z0.len(),
            world.dim()
        )));
    }
    let samples: Vec<Vec<f64>> = records.into_iter().map(|r| r.z0).collect();
    let report = evaluate_samples(
        name,
        &samples,
        &world,
        &cfg.targets()?,
        cfg.eval.reference,
        derive_seed(cfg.seed, SEED_EVAL, 0),
        &hash,
    )?;
    fs::write(run.report_path(&format!("eval_{name}.json")), serde_json::to_vec_pretty(&report)?)?;
    run.note("eval", &hash, vec![format!("evaluated {name}")])?;
    Ok(report)
}

fn eval_reports(dir: &Path) -> Vec<(String, EvalReport)> {
    let reports = dir.join("reports");
    let Ok(entries) = fs::read_dir(&reports) else {
        log::warn!("{} has no reports; run skipped", dir.display());
        return Vec::new();
    };
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    let mut out = Vec::new();
    for p in names {
        let Some(stem) = p.file_name().and_then(|s| s.to_str()) else { continue };
        let Some(name) = stem.strip_prefix("eval_").and_then(|s| s.strip_suffix(".json")) else {
            continue;
        };
        match fs::read(&p).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice::<EvalReport>(&b)?)) {
            Ok(r) => out.push((name.to_string(), r)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    out
}

fn run_seed(dir: &Path) -> u64 {
    fs::read_to_string(dir.join("config.toml"))
        .ok()
        .and_then(|t| RunConfig::from_toml_str(&t).ok())
        .map(|c| c.seed)
        .unwrap_or(0)
}

/// Collects every `reports/eval_*.json` of `runs` into `reports/benchmark.{csv,json}` under
/// `out`, plus one frequency chart per attribute.
pub fn cmd_report(out: &RunDir, runs: &[PathBuf]) -> Result<BenchmarkTable> {
    let mut table = BenchmarkTable::default();
    let mut charts: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    let mut hashes = Vec::new();
    for dir in runs {
        let run_name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        let seed = run_seed(dir);
        for (name, rep) in eval_reports(dir) {
            let label = if runs.len() > 1 { format!("{run_name}/{name}") } else { name.clone() };
            table.rows.push(BenchmarkRow {
                variant: name.clone(),
                run: run_name.clone(),
                fd: rep.fd.iter().map(|f| (f.attribute.clone(), f.fd)).collect(),
                fd_ci: rep.fd.iter().map(|f| (f.attribute.clone(), f.ci)).collect(),
                fidelity: rep.fidelity.mean,
                config_hash: rep.config_hash.clone(),
                seed,
            });
            for (attr, freq) in &rep.frequencies {
                charts.entry(attr.clone()).or_default().push((label.clone(), freq.clone()));
            }
            hashes.push(rep.config_hash.clone());
        }
    }
    hashes.sort();
    hashes.dedup();
    let combined = hashes.join("+");
    fs::write(out.report_path("benchmark.csv"), table.to_csv())?;
    fs::write(out.report_path("benchmark.json"), table.to_json()?)?;
    for (attr, series) in charts {
        let categories =
            categories_of(runs, &attr).unwrap_or_else(|| (0..series[0].1.len()).map(|i| format!("#{i}")).collect());
        let svg = bar_chart(&format!("{attr}: oracle category frequencies"), &categories, &series, &combined);
        fs::write(out.report_path(&format!("frequencies_{attr}.svg")), svg)?;
    }
    out.note("report", &combined, runs.iter().map(|r| r.display().to_string()).collect())?;
    Ok(table)
}

fn categories_of(runs: &[PathBuf], attribute: &str) -> Option<Vec<String>> {
    runs.iter().find_map(|d| {
        let cfg = RunConfig::from_toml_str(&fs::read_to_string(d.join("config.toml")).ok()?).ok()?;
        cfg.world.attributes.into_iter().find(|a| a.name == attribute).map(|a| a.categories)
    })
}

/// Finite-difference check of adapter-only and full gradients on a small model with
/// `sample_dim` outputs and two cross-attention blocks.
pub fn cmd_grad_check(sample_dim: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = ModelConfig {
        sample_dim,
        tokens: 2,
        channels: 3,
        cond_tokens: 2,
        cond_dim: 3,
        attn_dim: 4,
        heads: 2,
        time_dim: 4,
        vocab_size: 3,
        ..ModelConfig::default()
    };
    let mut rng = seeded(seed);
    let mut model = DenoiserModel::<f64>::init(cfg, &mut rng)?;
    let x: Vec<f64> = normal_vec(&mut rng, sample_dim);
    let w: Vec<f64> = normal_vec(&mut rng, sample_dim);
    let (cond, t) = (1usize, 7usize);
    let loss = |m: &DenoiserModel<f64>, view: Option<&crate::nn::AdapterView<'_, f64>>| -> f64 {
        let y = m.forward(&x, cond, t, view).expect("valid inputs");
        y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * y.iter().map(|a| a * a).sum::<f64>()
    };
    let dloss = |y: &[f64]| -> Vec<f64> { y.iter().zip(&w).map(|(a, b)| a + b).collect() };

    // Adapter-only gradients.
    let layout =
        crate::adapter::AdapterLayout::for_model(&model, crate::adapter::Placement::AllLayers, &Projection::ALL)?;
    let mut adapter = crate::adapter::AttributeAdapter::<f64>::zeros("probe", &layout);
    for pair in &mut adapter.pairs {
        pair.p = normal_vec(&mut rng, pair.p.len());
        pair.q = normal_vec(&mut rng, pair.q.len());
    }
    let scale = 0.3;
    let analytic = {
        let view = adapter.view(scale);
        let (y, mut tape) = model.forward_train(&x, cond, t, Some(&view), GradMode::AdapterOnly)?;
        let g = tape.backward(&dloss(&y))?;
        g.adapters
            .iter()
            .flat_map(|a| [(format!("{}.p", a.target), a.p.clone()), (format!("{}.q", a.target), a.q.clone())])
            .collect::<Vec<_>>()
    };
    let adapter_report = grad_check(&analytic, 1e-6, 1e-4, |group, i, d| {
        let (pair, is_q) = (group / 2, group % 2 == 1);
        let mut a = adapter.clone();
        let v = if is_q { &mut a.pairs[pair].q } else { &mut a.pairs[pair].p };
        v[i] += d;
        let view = a.view(scale);
        loss(&model, Some(&view))
    });

    // Full trunk gradients.
    let analytic: Vec<(String, Vec<f64>)> = {
        let (y, mut tape) = model.forward_train(&x, cond, t, None, GradMode::Full)?;
        let g = tape.backward(&dloss(&y))?;
        g.model.expect("full gradients").params().into_iter().map(|(n, p)| (n, p.to_vec())).collect()
    };
    let full_report = grad_check(&analytic, 1e-6, 1e-4, |group, i, d| {
        let mut params = model.params_mut();
        params[group].1[i] += d;
        drop(params);
        let v = loss(&model, None);
        model.params_mut()[group].1[i] -= d;
        v
    });
    Ok(vec![("adapter".into(), adapter_report), ("full".into(), full_report)])
}
