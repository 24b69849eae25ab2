//! Whole-pipeline properties on a small simulated world.

use skillroute_core::config::Config;
use skillroute_core::handbook::{to_canonical_json, validate};
use skillroute_core::pipeline::{dry_run, Split, Workbench};
use skillroute_core::router::{Router, Selection};
use skillroute_core::trajectory::{write_jsonl, Query};

fn small(seed: u64) -> Workbench {
    let mut cfg = Config::from_toml(include_str!("../../../configs/heterogeneous.toml"), "heterogeneous.toml").unwrap();
    cfg.seed = seed;
    cfg.data.train_queries = 80;
    cfg.data.validation_queries = 40;
    cfg.data.test_queries = 40;
    Workbench::new(cfg).unwrap()
}

fn artifacts(wb: &Workbench) -> (String, Vec<u8>) {
    let policy = wb.policy();
    let built = wb.build_handbook(&policy, 0.5).unwrap();
    let ts = wb.route(&built.selected, &policy, Selection::SkillGrounded, Split::Test).unwrap();
    let mut log = Vec::new();
    write_jsonl(&mut log, &ts).unwrap();
    (to_canonical_json(&built.selected), log)
}

#[test]
fn equal_configs_give_equal_artifacts() {
    assert_eq!(artifacts(&small(11)), artifacts(&small(11)));
    assert_ne!(artifacts(&small(11)).0, artifacts(&small(12)).0);
}

#[test]
fn built_handbooks_are_valid_and_versioned() {
    let wb = small(5);
    let built = wb.build_handbook(&wb.policy(), 0.5).unwrap();
    for h in [&built.learned, &built.refined, &built.selected] {
        assert!(validate(h).is_empty(), "{:?}", validate(h));
    }
    assert!(built.learned.version > wb.initial_handbook().version);
    assert!(built.refined.version >= built.learned.version);
    assert!(!built.learned.skills.is_empty());
}

#[test]
fn dry_run_ends_at_terminal_mode() {
    let wb = small(5);
    let policy = wb.policy();
    let built = wb.build_handbook(&policy, 0.5).unwrap();
    let router = Router::new(&policy, wb.config.router.clone());
    let queries: Vec<Query> = wb.test.iter().map(|q| q.query.clone()).collect();
    let plan = dry_run(&queries, &built.selected, &router).unwrap();
    for q in &queries {
        let steps: Vec<_> = plan.iter().filter(|d| d.query_id == q.id).collect();
        assert!(!steps.is_empty() && steps.len() <= router.config.max_turns);
        let last = steps.last().unwrap();
        assert!(last.decision.mode == router.config.terminal_mode || steps.len() == router.config.max_turns);
        assert!(steps.iter().enumerate().all(|(i, d)| d.turn == i));
    }
}
