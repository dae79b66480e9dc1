mod common;

use std::fs;
use std::path::Path;

use common::snapshot;
use tailor_core::model::{module_param_count, ModelSpec, ModuleId};
use tailor_core::optim::{build_group_table, coarse_to_fine};
use tailor_core::report::run_checkpoint_bytes;
use tailor_core::store::{list_checkpoints, read_checkpoint, SaveManifest, MANIFEST_FILE, WEIGHTS_FILE};
use tailor_core::strategy::modules_to_save;
use tailor_core::trainer::{StepRecord, LOG_FILE};
use tailor_core::{
    expected_run_bytes, inject_failure, resume, train, GroupLayout, ShardGeometry, StrategyConfig, StrategyKind,
    TailorError, Trainer, TrainerConfig,
};

fn config(layers: usize, kind: StrategyKind, interval: u64, ranks: usize) -> TrainerConfig {
    TrainerConfig::new(ModelSpec::desk(layers), StrategyConfig::new(kind, interval), ranks)
}

fn log_steps(run: &Path) -> Vec<u64> {
    fs::read_to_string(run.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<StepRecord>(l).unwrap().step)
        .collect()
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(4, StrategyKind::Full, 50, 2);
    let full = train(&cfg, 100, &tmp.path().join("a")).unwrap();

    let b = tmp.path().join("b");
    train(&cfg, 50, &b).unwrap();
    let resumed = resume(&b.join("checkpoint-50"), 50, Some(&b)).unwrap();
    assert_eq!(resumed.step(), 100);
    let bits = |t: &Trainer| t.masters().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed), bits(&full));
    assert_eq!(resumed.state(), full.state());
    assert_eq!(snapshot(&tmp.path().join("a")), snapshot(&b));
}

#[test]
fn resume_with_zero_steps_keeps_state() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&config(2, StrategyKind::Full, 10, 3), 10, &run).unwrap();
    let ckpt = read_checkpoint(&run.join("checkpoint-10")).unwrap();
    let t = resume(&run.join("checkpoint-10"), 0, None).unwrap();
    assert_eq!(t.step(), 10);
    assert_eq!(t.state(), &ckpt.optim);
    assert_eq!(t.strategy(), &StrategyConfig::new(StrategyKind::Full, 10));
}

#[test]
fn partial_checkpoint_cannot_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&config(4, StrategyKind::Parity, 10, 2), 20, &run).unwrap();
    match resume(&run.join("checkpoint-10"), 5, None) {
        Err(TailorError::MissingModules(m)) => {
            assert_eq!(m, vec![ModuleId::EmbedTokens, ModuleId::Layer(1), ModuleId::Layer(3)])
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(3, StrategyKind::Parity, 7, 4);
    train(&cfg, 30, &tmp.path().join("a")).unwrap();
    train(&cfg, 30, &tmp.path().join("b")).unwrap();
    assert_eq!(snapshot(&tmp.path().join("a")), snapshot(&tmp.path().join("b")));
    assert_eq!(log_steps(&tmp.path().join("a")), (1..=30).collect::<Vec<_>>());
}

#[test]
fn non_empty_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("x"), b"").unwrap();
    let err = train(&config(2, StrategyKind::Full, 10, 1), 10, tmp.path()).unwrap_err();
    assert!(matches!(err, TailorError::Config(_)));
}

#[test]
fn parity_manifests_alternate() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = config(4, StrategyKind::Parity, 10, 2);
    train(&cfg, 40, &run).unwrap();
    let a = vec![ModuleId::Layer(0), ModuleId::Layer(2), ModuleId::Norm, ModuleId::LmHead];
    let b = vec![ModuleId::EmbedTokens, ModuleId::Layer(1), ModuleId::Layer(3)];
    let saved: Vec<Vec<ModuleId>> = list_checkpoints(&run)
        .unwrap()
        .into_iter()
        .map(|(_, p)| tailor_core::store::read_json::<SaveManifest>(&p.join(MANIFEST_FILE)).unwrap().modules)
        .collect();
    assert_eq!(saved, vec![a.clone(), b.clone(), a, b]);
}

#[test]
fn group_layout_does_not_change_training() {
    let tmp = tempfile::tempdir().unwrap();
    let fine_cfg = config(4, StrategyKind::Full, 25, 2);
    let coarse_cfg = TrainerConfig {
        layout: GroupLayout::Coarse,
        ..fine_cfg.clone()
    };
    let fine = train(&fine_cfg, 100, &tmp.path().join("fine")).unwrap();
    let coarse = train(&coarse_cfg, 100, &tmp.path().join("coarse")).unwrap();
    let bits = |t: &Trainer| t.masters().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&fine), bits(&coarse));

    for step in [25, 50, 75, 100] {
        let name = format!("checkpoint-{step}");
        let f = tmp.path().join("fine").join(&name);
        let c = tmp.path().join("coarse").join(&name);
        assert_eq!(fs::read(f.join(WEIGHTS_FILE)).unwrap(), fs::read(c.join(WEIGHTS_FILE)).unwrap());
        let fc = read_checkpoint(&f).unwrap();
        let cc = read_checkpoint(&c).unwrap();
        assert_eq!(cc.optim.groups.len(), 2);
        let spec = fine_cfg.spec;
        let regrouped = coarse_to_fine(&cc.optim, &build_group_table(&spec)).unwrap();
        assert_eq!(regrouped, fc.optim);
    }
    // Coarse checkpoints resume too.
    let a = resume(&tmp.path().join("coarse/checkpoint-50"), 50, None).unwrap();
    assert_eq!(bits(&a), bits(&coarse));
}

#[test]
fn coarse_layout_needs_full_strategy() {
    let cfg = TrainerConfig {
        layout: GroupLayout::Coarse,
        ..config(4, StrategyKind::Parity, 10, 2)
    };
    assert!(matches!(Trainer::new(&cfg), Err(TailorError::Config(_))));
}

#[test]
fn run_size_matches_prediction() {
    for kind in [StrategyKind::Full, StrategyKind::Parity, StrategyKind::DEFAULT_FILTER] {
        let tmp = tempfile::tempdir().unwrap();
        let run = tmp.path().join("run");
        let cfg = config(8, kind, 5, 2);
        train(&cfg, 60, &run).unwrap();
        let measured = run_checkpoint_bytes(&run).unwrap();
        let expected =
            expected_run_bytes(&cfg.strategy, &cfg.spec, 12, ShardGeometry::new(2).unwrap(), cfg.hyper).unwrap();
        assert_eq!(measured, expected, "{kind}");
    }
}

#[test]
fn filter_saves_follow_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = config(8, StrategyKind::DEFAULT_FILTER, 1, 1);
    train(&cfg, 10, &run).unwrap();
    for (step, path) in list_checkpoints(&run).unwrap() {
        let manifest: SaveManifest = tailor_core::store::read_json(&path.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.modules, modules_to_save(&cfg.strategy, &cfg.spec, step));
    }
    let m5: SaveManifest = tailor_core::store::read_json(&run.join("checkpoint-5").join(MANIFEST_FILE)).unwrap();
    assert!(m5.contains(ModuleId::EmbedTokens) && m5.contains(ModuleId::Layer(3)) && !m5.contains(ModuleId::Layer(4)));
    let m10: SaveManifest = tailor_core::store::read_json(&run.join("checkpoint-10").join(MANIFEST_FILE)).unwrap();
    assert!(m10.contains(ModuleId::LmHead) && m10.contains(ModuleId::Layer(4)) && !m10.contains(ModuleId::Layer(3)));
    let params = |m: &SaveManifest| m.modules.iter().map(|&x| module_param_count(&cfg.spec, x)).sum::<usize>();
    let m1: SaveManifest = tailor_core::store::read_json(&run.join("checkpoint-1").join(MANIFEST_FILE)).unwrap();
    assert!(params(&m1) < params(&m5));
}

#[test]
fn failure_keeps_checkpoint_at_boundary() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&config(2, StrategyKind::Full, 10, 1), 40, &run).unwrap();
    let removed = inject_failure(&run, 20).unwrap();
    assert_eq!(removed.len(), 2);
    let steps: Vec<u64> = list_checkpoints(&run).unwrap().into_iter().map(|(s, _)| s).collect();
    assert_eq!(steps, vec![10, 20]);
    assert_eq!(log_steps(&run), (1..=20).collect::<Vec<_>>());
    resume(&run.join("checkpoint-20"), 20, Some(&run)).unwrap();
    assert_eq!(log_steps(&run), (1..=40).collect::<Vec<_>>());
}
