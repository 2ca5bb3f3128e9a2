#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use fcflow_core::backend::ScriptedBackend;
use fcflow_core::{Engine, EngineConfig, Registry};

pub const VCF: &str = "./example_data/VEP_raw.A25.mutect2.filtered.snp.vcf";

pub fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/phyloflow_demo")
}

pub fn demo_registry() -> Arc<Registry> {
    Arc::new(Registry::load_file(demo_dir().join("manifest.json")).expect("demo manifest loads"))
}

pub fn faulty_registry() -> Arc<Registry> {
    Arc::new(Registry::load_file(demo_dir().join("manifest_faulty.json")).expect("faulty manifest loads"))
}

pub fn script(name: &str) -> ScriptedBackend {
    ScriptedBackend::load_file(demo_dir().join("backend").join(name)).expect("script loads")
}

pub fn reference_instruction() -> String {
    let text = std::fs::read_to_string(demo_dir().join("instruction.txt")).unwrap();
    text.trim_end_matches('\n').to_string()
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(demo_dir().join("golden").join(name)).unwrap()
}

pub fn engine(registry: Arc<Registry>, runs_root: &std::path::Path, counter: u64) -> Engine {
    let config = EngineConfig::new(runs_root, fcflow_core::engine::generate_run_id()).with_initial_counter(counter);
    Engine::new(registry, config).expect("engine starts")
}

/// Scratch space under the target directory.
pub fn scratch() -> tempfile::TempDir {
    tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap()
}
