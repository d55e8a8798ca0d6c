use std::path::PathBuf;

use plenoxels::dataset::SceneType;
use plenoxels::toy::toy_config;
use plenoxels::trainer::{default_config, load_config, TrainConfig};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> TrainConfig {
    load_config(&configs_dir().join(name), &[]).unwrap()
}

#[test]
fn bundled_files_match_presets() {
    assert_eq!(load("toy.toml"), toy_config());
    assert_eq!(load("bounded.toml"), default_config(SceneType::Bounded));
    assert_eq!(load("forward_facing.toml"), default_config(SceneType::ForwardFacingNdc));
    assert_eq!(load("unbounded_360.toml"), default_config(SceneType::Unbounded360));
}

#[test]
fn synthetic_preset_snapshot_disables_tv_after_first_rung() {
    let c = load("bounded.toml");
    assert!(!c.losses.tv_after_upsample);
    assert_eq!(c.ladder.len(), 2);
    assert!(load("forward_facing.toml").losses.tv_after_upsample);
}

#[test]
fn override_reaches_nested_tables() {
    let c = load_config(
        &configs_dir().join("toy.toml"),
        &["optimizer.method=sgd".into(), "losses.tv_sigma=0.5".into()],
    )
    .unwrap();
    assert_eq!(c.optimizer.method, plenoxels::optim::OptimMethod::Sgd);
    assert_eq!(c.losses.tv_sigma, 0.5);
}
