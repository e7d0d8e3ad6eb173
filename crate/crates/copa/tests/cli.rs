use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use copa::commands::{self, RunOptions};
use copa::dataset::{export_dataset, import_dataset, write_json};
use copa_core::config::{DataSource, ExperimentConfig, Method, PrevalenceChoice, SiteEntry, SiteRole};
use copa_core::eval::prepare_synthetic;
use copa_core::scm::CausalRelation;
use copa_core::tabular::{ColumnManifest, ZColumnKind};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_copa"))
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::multi_site(CausalRelation::CommonCause);
    for s in cfg.sites.iter_mut() {
        s.n_samples = Some(if s.role == SiteRole::Train { 600 } else { 150 });
        s.prevalence_pool_size = 400;
    }
    cfg.train.steps = 300;
    cfg.train.lr = 1e-2;
    cfg.train.checkpoint_every = 100;
    cfg.seeds = vec![0, 1];
    cfg.methods = vec![Method::Copa, Method::ErmA, Method::ErmB, Method::BayesOracle];
    cfg.ablations = vec![
        PrevalenceChoice::Subsample(100),
        PrevalenceChoice::Marginal,
        PrevalenceChoice::Uniform,
        PrevalenceChoice::Marginalized,
    ];
    cfg.output_dir = dir.join("runs").to_string_lossy().into_owned();
    let path = dir.join("config.json");
    write_json(&path, &cfg).unwrap();
    path
}

fn tabular_site(id: &str, role: SiteRole) -> SiteEntry {
    SiteEntry {
        site_id: id.into(),
        role,
        n_samples: None,
        beta: None,
        prevalence_pool_size: 1000,
        relation: None,
    }
}

fn opts(config: &Path) -> RunOptions {
    RunOptions {
        config: config.to_path_buf(),
        ..RunOptions::default()
    }
}

#[test]
fn generate_writes_preset_sites_deterministically() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::multi_site(CausalRelation::CommonCause);
    for s in cfg.sites.iter_mut() {
        s.prevalence_pool_size = 1000;
    }
    let path = tmp.path().join("c.json");
    write_json(&path, &cfg).unwrap();
    let run = |out: &str| {
        let status = bin()
            .args(["generate", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(tmp.path().join(out))
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    run("a");
    run("b");
    let (manifest, sites) = import_dataset(&tmp.path().join("a")).unwrap();
    let rows: Vec<usize> = sites.iter().map(|(_, s)| s.samples.len()).collect();
    assert_eq!(rows, vec![10_000, 10_000, 500, 1000]);
    assert_eq!(manifest.config_hash, cfg.hash());
    for f in fs::read_dir(tmp.path().join("a")).unwrap() {
        let name = f.unwrap().file_name();
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn exported_sites_round_trip_exactly() {
    let tmp = TempDir::new().unwrap();
    let cfg = ExperimentConfig::multi_site(CausalRelation::ZCausesY);
    let mut small = cfg.clone();
    small.sites.iter_mut().for_each(|s| {
        s.n_samples = Some(300);
        s.prevalence_pool_size = 200;
    });
    let (sites, w) = prepare_synthetic(&small).unwrap();
    export_dataset(tmp.path(), &small.hash(), &sites, &ColumnManifest::categorical(1), Some(&w)).unwrap();
    let (manifest, back) = import_dataset(tmp.path()).unwrap();
    assert_eq!(back, sites);
    assert_eq!(manifest.mixing, Some(w));
}

#[test]
fn config_without_test_site_exits_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::multi_site(CausalRelation::CommonCause);
    cfg.sites.retain(|s| s.role != SiteRole::Test);
    let path = tmp.path().join("c.json");
    write_json(&path, &cfg).unwrap();
    let out = bin().args(["generate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["train", "--dry-run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_trains_nothing() {
    let tmp = TempDir::new().unwrap();
    let path = small_config(tmp.path());
    let out = bin().args(["train", "--dry-run", "--config"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn eval_without_models_exits_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let path = small_config(tmp.path());
    let out = bin().args(["eval", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = bin()
        .args(["eval", "--config"])
        .arg(&path)
        .arg("--checkpoint")
        .arg(tmp.path().join("nowhere"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn resumed_training_writes_the_same_model() {
    let tmp = TempDir::new().unwrap();
    let path = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let mut o = opts(&path);
    o.out = Some(a.clone());
    commands::train(&o, false, None).unwrap();
    o.out = Some(b.clone());
    let paused = commands::train(&o, false, Some(170)).unwrap();
    assert!(paused.iter().all(|(_, _, r)| matches!(r, commands::JobOutcome::Paused { step: 170 })));
    commands::train(&o, false, None).unwrap();
    let cfg: ExperimentConfig = copa::dataset::read_json(&path).unwrap();
    for m in ["copa", "erm_a", "erm_b"] {
        for s in [0, 1] {
            let rel = Path::new(&cfg.hash()).join("models").join(format!("{m}-seed{s}"));
            for f in ["selected.json", "manifest.json", "log.csv"] {
                assert_eq!(
                    fs::read(a.join(&rel).join(f)).unwrap(),
                    fs::read(b.join(&rel).join(f)).unwrap(),
                    "{m} seed {s} {f}"
                );
            }
            assert!(!b.join(&rel).join("state.json").exists());
        }
    }
}

#[test]
fn eval_and_ablation_are_repeatable_and_agree() {
    let tmp = TempDir::new().unwrap();
    let path = small_config(tmp.path());
    let o = opts(&path);
    commands::train(&o, false, None).unwrap();
    let r1 = commands::eval(&o, PrevalenceChoice::Conditional, None).unwrap();
    let cfg: ExperimentConfig = copa::dataset::read_json(&path).unwrap();
    let root = Path::new(&cfg.output_dir).join(cfg.hash());
    let bytes = fs::read(root.join("report.json")).unwrap();
    let r2 = commands::eval(&o, PrevalenceChoice::Conditional, None).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(bytes, fs::read(root.join("report.json")).unwrap());
    assert_eq!(r1.rows.len(), 4 * 2);

    let uniform = commands::eval(&o, PrevalenceChoice::Uniform, None).unwrap();
    let ablation = commands::ablate(&o).unwrap();
    for seed in [0, 1] {
        let u = uniform.rows.iter().find(|r| r.method == "copa" && r.seed == seed).unwrap();
        let a = ablation
            .rows
            .iter()
            .find(|r| r.method == "copa/uniform" && r.seed == seed)
            .unwrap();
        assert_eq!(u.test_f1, a.test_f1);
        let hashes: Vec<&str> = ablation
            .rows
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.model_hash.as_str())
            .collect();
        assert_eq!(hashes.len(), 4);
        assert!(hashes.iter().all(|h| *h == u.model_hash));
    }
    let csv = fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,seed,site,metric,value,config_hash"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(&cfg.hash())));
    let table = commands::report(&o).unwrap();
    assert!(table.contains("copa/marginal"));

    let model_dir = root.join("models").join("copa-seed1");
    let single = commands::eval(&o, PrevalenceChoice::Conditional, Some(&model_dir)).unwrap();
    assert_eq!(single.rows[0].test_f1, r1.rows.iter().find(|r| r.method == "copa" && r.seed == 1).unwrap().test_f1);
}

#[test]
fn locked_or_foreign_run_directories_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let path = small_config(tmp.path());
    let cfg: ExperimentConfig = copa::dataset::read_json(&path).unwrap();
    let root = Path::new(&cfg.output_dir).join(cfg.hash());
    fs::create_dir_all(&root).unwrap();
    fs::write(root.join(".lock"), "1").unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    fs::remove_file(root.join(".lock")).unwrap();

    let mut other = cfg.clone();
    other.data_seed = 99;
    write_json(
        &root.join("config.json"),
        &serde_json::json!({ "config_hash": other.hash(), "config": other }),
    )
    .unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tabular_csv_with_continuous_z_uses_auxiliary_prevalence() {
    let tmp = TempDir::new().unwrap();
    let mut lines = vec!["site_id,y,z_0,z_1,x_0,x_1,x_2".to_string()];
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for (site, n, shift) in [("a", 200, 0.2), ("b", 200, 0.5), ("v", 80, 0.6), ("t", 80, 0.8)] {
        for _ in 0..n {
            let age = 20.0 + 60.0 * next();
            let sex = if next() < 0.5 { 0 } else { 1 };
            let y = usize::from(next() < shift * age / 80.0);
            let x: Vec<f64> = (0..3).map(|j| y as f64 * (j as f64 - 1.0) + next()).collect();
            lines.push(format!("{site},{y},{age},{sex},{},{},{}", x[0], x[1], x[2]));
        }
    }
    fs::write(tmp.path().join("data.csv"), lines.join("\n")).unwrap();
    write_json(
        &tmp.path().join("columns.json"),
        &ColumnManifest {
            z_columns: vec![ZColumnKind::Continuous, ZColumnKind::Categorical],
        },
    )
    .unwrap();
    let mut cfg = ExperimentConfig {
        data: DataSource::Tabular {
            csv: "data.csv".into(),
            manifest: "columns.json".into(),
        },
        sites: vec![
            tabular_site("a", SiteRole::Train),
            tabular_site("b", SiteRole::Train),
            tabular_site("v", SiteRole::Validation),
            tabular_site("t", SiteRole::Test),
        ],
        methods: vec![Method::Copa, Method::ErmA],
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    cfg.train.steps = 100;
    cfg.train.checkpoint_every = 50;
    cfg.aux.steps = 50;
    cfg.ablations = vec![PrevalenceChoice::Marginal, PrevalenceChoice::Uniform];
    cfg.output_dir = tmp.path().join("runs").to_string_lossy().into_owned();
    let path = tmp.path().join("c.json");
    write_json(&path, &cfg).unwrap();

    let data = commands::prepare(&cfg, &path).unwrap();
    assert!(!data.z_categorical);
    assert_eq!((data.x_dim, data.z_dim), (3, 2));
    // continuous z standardized on training sites only
    let train_z: Vec<f64> = data
        .sites_with_role(SiteRole::Train)
        .flat_map(|s| s.data.samples.iter().map(|q| q.z[0]))
        .collect();
    let mean = train_z.iter().sum::<f64>() / train_z.len() as f64;
    assert!(mean.abs() < 1e-9);
    assert!(data.sites.iter().all(|s| s.prevalence.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-9)));

    let o = opts(&path);
    commands::train(&o, false, None).unwrap();
    let rep = commands::eval(&o, PrevalenceChoice::Conditional, None).unwrap();
    assert_eq!(rep.rows.len(), 2);
    commands::ablate(&o).unwrap();
}

#[test]
fn tabular_rows_must_match_the_manifest() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("d.csv"), "site_id,y,z_0,x_0\na,0,0.5,1.0\nt,1,1,2.0\n").unwrap();
    write_json(&tmp.path().join("m.json"), &ColumnManifest::categorical(1)).unwrap();
    let cfg = ExperimentConfig {
        data: DataSource::Tabular {
            csv: "d.csv".into(),
            manifest: "m.json".into(),
        },
        sites: vec![tabular_site("a", SiteRole::Train), tabular_site("t", SiteRole::Test)],
        validation: copa_core::eval::ValidationMode::Internal,
        ..ExperimentConfig::default()
    };
    let path = tmp.path().join("c.json");
    write_json(&path, &cfg).unwrap();
    let err = commands::prepare(&cfg, &path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
