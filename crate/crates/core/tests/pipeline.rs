//! End-to-end behaviour of the run directory, artifacts and adapter no-op guarantees.

use std::fs;
use std::path::Path;

use fairgen::adapter::{AdapterBank, AdapterLayout, AttributeAdapter, Placement};
use fairgen::config::RunConfig;
use fairgen::diffusion::{sample_final, NoiseSchedule};
use fairgen::error::Error;
use fairgen::eval::mmd_rbf;
use fairgen::inference::{generate_batch, DistributionSpec, GenerationRequest};
use fairgen::nn::{DenoiserModel, ModelConfig, Projection};
use fairgen::persist::{BankFile, Checkpoint};
use fairgen::pipeline::{
    cmd_eval, cmd_pretrain, cmd_report, cmd_sample, cmd_train_adapters, read_records, RunDir, SampleArgs, SampleVariant,
};
use fairgen::rng::{derive_seed, seeded};
use fairgen::train::{adapter_train_step, model_config_for, LatentPool, TrainConfig};
use fairgen::world::{make_world, SyntheticWorld, WorldSpec};

fn quick_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.schedule.steps = 30;
    cfg.model.channels = 8;
    cfg.model.attn_dim = 8;
    cfg.model.cond_dim = 8;
    cfg.pretrain.iters = 120;
    cfg.pretrain.heldout = 16;
    cfg.pretrain.log_every = 40;
    cfg.train.iters = 6;
    cfg.train.lr = 0.005;
    cfg.train.pool = 4;
    cfg.train.batch = 2;
    cfg.train.log_every = 2;
    cfg.generation.n = 48;
    cfg.eval.reference = 200;
    cfg
}

fn run_all(dir: &Path, cfg: &RunConfig) {
    let run = RunDir::open(dir).unwrap();
    cmd_pretrain(&run, cfg, None).unwrap();
    cmd_train_adapters(&run, cfg, None).unwrap();
    for (variant, name) in [(SampleVariant::Base, "base"), (SampleVariant::Debiased, "fairgen")] {
        let args = SampleArgs { variant, name, checkpoint: None, banks: None, threads: 1 };
        cmd_sample(&run, cfg, &args).unwrap();
        cmd_eval(&run, cfg, name).unwrap();
    }
    cmd_report(&run, &[dir.to_path_buf()]).unwrap();
}

fn tiny_model(world: &SyntheticWorld, seed: u64) -> DenoiserModel<f64> {
    let arch = ModelConfig { tokens: 2, channels: 4, cond_dim: 4, attn_dim: 4, time_dim: 4, ..ModelConfig::default() };
    DenoiserModel::init(model_config_for(world, arch), &mut seeded(seed)).unwrap()
}

#[test]
fn run_dir_lock_is_exclusive_until_dropped() {
    let tmp = tempfile::tempdir().unwrap();
    let first = RunDir::open(tmp.path()).unwrap();
    assert!(tmp.path().join(".lock").exists());
    assert!(matches!(RunDir::open(tmp.path()), Err(Error::Locked(_))));
    drop(first);
    assert!(!tmp.path().join(".lock").exists());
    RunDir::open(tmp.path()).unwrap();
}

#[test]
fn eta_zero_training_leaves_adapters_as_no_ops() {
    let world = make_world(&WorldSpec::two_category()).unwrap();
    let model = tiny_model(&world, 3);
    let sched = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
    let group = world.group_id("worker").unwrap();
    let cfg = TrainConfig { eta: 0.0, ..TrainConfig::default() };
    let layout = AdapterLayout::for_model(&model, cfg.placement, &cfg.projections).unwrap();
    let mut rng = seeded(7);
    let pool = LatentPool::build(&model, group, &sched, 4, &mut rng).unwrap();
    let category = world.category_id("gender", 1).unwrap();
    let mut adapter = AttributeAdapter::init("female", &layout, cfg.q_init_std, &mut rng);
    for step in 0..40 {
        let batch = pool.draw(cfg.batch, cfg.timesteps(sched.steps()), &mut rng);
        adapter_train_step(&model, &mut adapter, 1, &layout, &[], &batch, category, &cfg, step).unwrap();
    }
    assert!(adapter.pairs.iter().all(|p| p.p.iter().all(|v| *v == 0.0)));

    let view = adapter.view(1.0);
    let n = 1000;
    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            sample_final(&model, world.dim(), group, &sched, 1.0, None, &mut seeded(derive_seed(1, 0, i))).unwrap()
        })
        .collect();
    let adapted: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            sample_final(&model, world.dim(), group, &sched, 1.0, Some(&view), &mut seeded(derive_seed(2, 0, i)))
                .unwrap()
        })
        .collect();
    let mmd = mmd_rbf(&base, &adapted, None).unwrap();
    assert!(mmd < 0.05, "MMD {mmd}");
}

#[test]
fn zero_banks_reproduce_base_records() {
    let world = make_world(&WorldSpec::benchmark()).unwrap();
    let model = tiny_model(&world, 11);
    let sched = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
    let layout = AdapterLayout::for_model(&model, Placement::AllLayers, &Projection::ALL).unwrap();
    let mut specs = Vec::new();
    let mut banks = Vec::new();
    for attr in &world.spec().attributes {
        let k = attr.len();
        specs.push(DistributionSpec::new(&attr.name, vec![1.0 / k as f64; k]).unwrap());
        banks.push(AdapterBank::new(&attr.name, &attr.categories, layout.clone(), 1.0, &mut seeded(k as u64)).unwrap());
    }
    let req = GenerationRequest {
        group: "worker",
        n: 24,
        guidance_scale: 2.0,
        alpha_scale: 1.0,
        seed: 5,
        config_hash: "h",
        threads: 2,
    };
    let plain = generate_batch(&model, &sched, world.vocab(), &[], &[], &req).unwrap();
    let zero = generate_batch(&model, &sched, world.vocab(), &specs, &banks, &req).unwrap();
    for (a, b) in plain.iter().zip(&zero) {
        assert_eq!(a.z0, b.z0);
        assert_eq!(b.chosen.len(), 2);
    }
}

#[test]
fn every_artifact_carries_the_config_hash_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(0);
    let hash = cfg.hash();
    run_all(tmp.path(), &cfg);

    let config_text = fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert!(config_text.contains(&hash));
    assert_eq!(RunConfig::from_toml_str(&config_text).unwrap().hash(), hash);

    for sub in ["records", "reports"] {
        for entry in fs::read_dir(tmp.path().join(sub)).unwrap() {
            let path = entry.unwrap().path();
            let text = fs::read_to_string(&path).unwrap();
            assert!(text.contains(&hash), "{} lacks the config hash", path.display());
        }
    }
    for r in read_records(&tmp.path().join("records/fairgen.jsonl")).unwrap() {
        assert_eq!(r.config_hash, hash);
        assert_eq!(r.chosen.len(), 1);
    }
    let csv = fs::read_to_string(tmp.path().join("reports/benchmark.csv")).unwrap();
    assert!(!csv.contains(';'), "{csv}");
    assert!(tmp.path().join("reports/frequencies_gender.svg").exists());

    let ck_path = tmp.path().join("checkpoint");
    let (ck, ck_hash) = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.config_hash, hash);
    assert_eq!(ck.to_bytes().unwrap().0, fs::read(&ck_path).unwrap());
    assert_eq!(ck.to_bytes().unwrap().1, ck_hash);

    let bank_path = tmp.path().join("banks/gender.bank");
    let (bank, _) = BankFile::load(&bank_path).unwrap();
    assert_eq!(bank.meta.config_hash, hash);
    assert_eq!(bank.meta.base_hash, ck_hash);
    assert_eq!(bank.to_bytes().unwrap().0, fs::read(&bank_path).unwrap());
    assert!(!tmp.path().join(".lock").exists());
}

#[test]
fn foreign_banks_are_marked_as_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (tmp.path().join("a"), tmp.path().join("b"));
    let a_cfg = quick_config(0);
    {
        let run = RunDir::open(&a_dir).unwrap();
        cmd_pretrain(&run, &a_cfg, None).unwrap();
        cmd_train_adapters(&run, &a_cfg, None).unwrap();
    }
    let b_cfg = quick_config(1);
    let run = RunDir::open(&b_dir).unwrap();
    cmd_pretrain(&run, &b_cfg, None).unwrap();
    let own = cmd_sample(
        &run,
        &b_cfg,
        &SampleArgs { variant: SampleVariant::Base, name: "base", checkpoint: None, banks: None, threads: 1 },
    )
    .unwrap();
    assert!(own.transferred.is_empty());
    let banks = a_dir.join("banks");
    let summary = cmd_sample(
        &run,
        &b_cfg,
        &SampleArgs {
            variant: SampleVariant::Debiased,
            name: "transfer",
            checkpoint: None,
            banks: Some(&banks),
            threads: 1,
        },
    )
    .unwrap();
    assert_eq!(summary.transferred, vec!["gender".to_string()]);
    let meta = fs::read_to_string(b_dir.join("metadata.json")).unwrap();
    assert!(meta.contains("transfer: bank `gender`"), "{meta}");
}

#[test]
fn banks_for_another_architecture_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (tmp.path().join("a"), tmp.path().join("b"));
    let a_cfg = quick_config(0);
    {
        let run = RunDir::open(&a_dir).unwrap();
        cmd_pretrain(&run, &a_cfg, None).unwrap();
        cmd_train_adapters(&run, &a_cfg, None).unwrap();
    }
    let mut b_cfg = quick_config(0);
    b_cfg.model.channels = 6;
    let run = RunDir::open(&b_dir).unwrap();
    cmd_pretrain(&run, &b_cfg, None).unwrap();
    let banks = a_dir.join("banks");
    let err = cmd_sample(
        &run,
        &b_cfg,
        &SampleArgs {
            variant: SampleVariant::Debiased,
            name: "mismatch",
            checkpoint: None,
            banks: Some(&banks),
            threads: 1,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::ArchitectureMismatch(_)), "{err}");
    // The checkpoint of run a does not match run b's architecture either.
    let ck = a_dir.join("checkpoint");
    let err = cmd_train_adapters(&run, &b_cfg, Some(&ck)).unwrap_err();
    assert!(matches!(err, Error::ArchitectureMismatch(_)), "{err}");
}

#[test]
fn report_over_runs_without_evaluations_is_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("nothing");
    fs::create_dir_all(&empty).unwrap();
    let out = RunDir::open(&tmp.path().join("out")).unwrap();
    let table = cmd_report(&out, &[empty]).unwrap();
    assert!(table.is_empty());
    let csv = fs::read_to_string(out.report_path("benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        cfg.targets().unwrap();
        seen += 1;
    }
    assert!(seen >= 4);
    let bench = RunConfig::load(&dir.join("benchmark.toml")).unwrap();
    assert_eq!(bench.world, WorldSpec::benchmark());
}
