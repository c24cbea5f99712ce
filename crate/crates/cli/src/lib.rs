//! Command-line driver: configuration, stages and run manifests.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use config::PipelineConfig;
use error::CliError;
use manifest::Manifest;
use stages::{run_stage, EvalInputs, Stage, StageContext};

/// Runs `stages` in order, writing one manifest per stage (plus a combined
/// one when more than one stage ran) and the resolved configuration.
pub fn run(stages: &[Stage], config: &PipelineConfig, eval: &EvalInputs, workers: usize) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    let ctx = StageContext { config, eval };
    let dir = &config.paths.workdir;
    let mut all_artifacts: Vec<PathBuf> = Vec::new();
    for &stage in stages {
        eprintln!("[{}] running", stage.name());
        let out = pool.install(|| run_stage(stage, &ctx))?;
        let resolved = dir.join("config.resolved.toml");
        std::fs::write(&resolved, config.to_toml()).map_err(|e| CliError::Data(format!("{}: {e}", resolved.display())))?;
        let mut artifacts = out.artifacts.clone();
        artifacts.push(resolved);
        Manifest::new(stage.name(), config, &out.inputs, &artifacts)?.write(dir)?;
        if !out.summary.is_empty() {
            println!("[{}] {}", stage.name(), out.summary.replace('\n', &format!("\n[{}] ", stage.name())));
        }
        for a in out.artifacts {
            if !all_artifacts.contains(&a) {
                all_artifacts.push(a);
            }
        }
    }
    if stages.len() > 1 {
        Manifest::new("pipeline", config, &[], &all_artifacts)?.write(dir)?;
    }
    Ok(())
}
