//! Regenerates `tests/data/corpus`: task files, inputs, the initial skill,
//! configs, replay fixtures and the expected outputs of a replayed run.
//!
//! The model replies come from the scripted world in `tests/support`, so the
//! corpus is reproducible; rerun after changing prompts or the world.
//!
//!     cargo run -p skill-distill-core --example build_fixture_corpus

#[path = "../tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use skill_distill::gateway::{FixtureStore, Gateway};
use skill_distill::pipeline::{run, PipelineConfig};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus");
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear corpus");
    }
    support::world::write_corpus(&dir);
    let fixtures = FixtureStore::new(dir.join("fixtures"));

    for (config, expected) in [("config.toml", "expected/deepening"), ("creation.toml", "expected/creation")] {
        let cfg = PipelineConfig::load(&dir.join(config)).expect("config loads");
        let gateway = Gateway::new(Arc::new(support::world::backend())).recording(fixtures.clone());
        let out = tempfile::tempdir().expect("tempdir");
        let manifest = run(&cfg, &gateway, out.path()).expect("run succeeds");
        let target = dir.join(expected);
        fs::create_dir_all(&target).unwrap();
        fs::copy(out.path().join("manifest.json"), target.join("manifest.json")).unwrap();
        fs::copy(out.path().join("evolved_skill/SKILL.md"), target.join("SKILL.md")).unwrap();
        fs::copy(out.path().join("evolved.diff"), target.join("evolved.diff")).unwrap();
        println!(
            "{config}: {} trajectories ({} failed), pool {}, evaluation {:?}",
            manifest.stats.trajectories,
            manifest.stats.failures,
            manifest.stats.pool_size,
            manifest.evaluation.as_ref().map(|e| (e.initial, e.evolved))
        );
    }
    println!("{} fixtures in {}", fixtures.keys().unwrap().len(), fixtures.dir().display());
}
