//! Library behind the `riemod` binary: configuration, datasets, artifact
//! writing and the `train`, `verify`, `stability` and `bench` runners.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod stability;
pub mod train;
pub mod verify;

use std::path::Path;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Train,
    Verify,
    Stability,
    Bench,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Verify => "verify",
            Subcommand::Stability => "stability",
            Subcommand::Bench => "bench",
        }
    }
}

/// Header embedded in every artifact: subcommand, version and the resolved config.
pub fn run_header(cfg: &RunConfig, subcommand: &str) -> String {
    let mut pairs = vec![
        ("subcommand".to_string(), subcommand.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ];
    pairs.extend(cfg.resolved_pairs());
    artifacts::header(&pairs)
}

/// Loads the config, applies the seed override and runs one subcommand.
/// Returns a one-line summary for stdout.
pub fn run(command: Subcommand, config: &Path, out: &Path, seed: Option<u64>) -> CliResult<String> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(match command {
        Subcommand::Train => {
            let s = train::run_train(cfg, out)?;
            format!(
                "train: {} steps, loss {:.6e} -> {:.6e}",
                s.steps, s.initial_loss, s.final_loss
            )
        }
        Subcommand::Verify => {
            let r = verify::run_verify(cfg, out)?;
            format!("verify: {} properties passed", r.len())
        }
        Subcommand::Stability => {
            let entries = stability::run_stability(cfg, out)?;
            let margins: Vec<String> = entries
                .iter()
                .map(|e| {
                    format!(
                        "n={} margin={:.3e}",
                        e.report.constants.n,
                        e.report.margin()
                    )
                })
                .collect();
            format!("stability: bound holds ({})", margins.join(", "))
        }
        Subcommand::Bench => {
            let s = bench::run_bench(cfg, out)?;
            format!(
                "bench: {} sizes, woodbury exponent {}",
                s.rows.len(),
                s.woodbury_exponent
                    .map_or("n/a".into(), |e| format!("{e:.3}"))
            )
        }
    })
}
