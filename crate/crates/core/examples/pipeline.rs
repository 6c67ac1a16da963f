//! Run every stage end to end from a config file and print the report.
//!
//! cargo run --example pipeline -- [config.toml] [out_dir]
//!
//! The test fixture `crates/core/tests/fixtures/tiny.toml` finishes in seconds.

use std::path::{Path, PathBuf};

use concept_em::config::RunConfig;
use concept_em::pipeline::{run_pipeline, Stage};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let config = args.next().map(PathBuf::from);
    let mut cfg = RunConfig::load(config.as_deref(), std::env::vars())?;
    if let Some(out) = args.next() {
        cfg.out = out.into();
    }
    for (stage, outcome) in run_pipeline(&cfg, &Stage::ALL, false)? {
        println!("{:<12} {outcome:?}", stage.name());
    }
    print!("{}", std::fs::read_to_string(Path::new(&cfg.out).join("report/table.txt"))?);
    Ok(())
}
