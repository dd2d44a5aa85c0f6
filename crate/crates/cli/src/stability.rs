use std::fmt::Write as _;
use std::path::Path;

use riemod::stability::{paired_training, PairedDatasets, StabilityConfig, StabilityReport};

use crate::artifacts::{fmt_f64, OutputDir};
use crate::config::RunConfig;
use crate::data::{self, seed_streams};
use crate::error::{CliError, CliResult};
use crate::run_header;

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub report: StabilityReport,
    /// Bound at this `n` with the constants of the first entry.
    pub bound_fixed_constants: f64,
    /// `(observed divergence at η/2, relative change)`.
    pub halving: Option<(f64, f64)>,
}

impl SweepEntry {
    pub fn passed(&self, halving_tolerance: f64) -> bool {
        self.report.bound_holds()
            && self.report.disturbance.passed
            && self
                .halving
                .is_none_or(|(_, change)| change < halving_tolerance)
    }
}

fn relative_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn run_sweep(mut cfg: RunConfig) -> CliResult<(RunConfig, Vec<SweepEntry>)> {
    let s = cfg.stability.clone();
    if s.n_values.is_empty() || s.n_values.contains(&0) {
        return Err(CliError::config(
            "stability.n_values must list positive sample counts",
        ));
    }
    if !(s.halving_tolerance > 0.0) {
        return Err(CliError::config(
            "stability.halving_tolerance must be positive",
        ));
    }
    if s.trace_every == 0 {
        return Err(CliError::config("stability.trace_every must be at least 1"));
    }
    let n_min = *s.n_values.iter().min().expect("nonempty");
    let n_max = *s.n_values.iter().max().expect("nonempty");
    let index = *cfg.stability.replacement_index.get_or_insert(n_min / 2);
    if index >= n_min {
        return Err(CliError::config(format!(
            "stability.replacement_index = {index} must be below every n (smallest is {n_min})"
        )));
    }
    let network = cfg.network()?;
    let (mut data_rng, mut init_rng) = seed_streams(cfg.seed);
    cfg.data.samples.get_or_insert(n_max + 1);
    let data = data::load(&mut cfg.data, &mut data_rng)?;
    if data.samples.len() < n_max + 1 {
        return Err(CliError::config(format!(
            "stability needs data.samples ≥ {} (largest n plus the replacement)",
            n_max + 1
        )));
    }
    if data.input_dim != network.input_dim() || data.output_dim != network.output_dim() {
        return Err(CliError::config("model and data dims disagree"));
    }
    let metric = cfg.optimizer.to_core(cfg.seed)?;
    metric.validate(network.layer_count())?;
    let core = StabilityConfig {
        metric,
        step_factor: s.step_factor,
        learning_rate: s.learning_rate,
        ntk_interval: s.ntk_interval,
        transient_factor: s.transient_factor,
        horizon_factor: s.horizon_factor,
        max_steps: s.max_steps,
        ..Default::default()
    };

    let init = network.init_params(&mut init_rng);
    let replacement = data.samples[data.samples.len() - 1].clone();
    let mut entries: Vec<SweepEntry> = Vec::new();
    for &n in &s.n_values {
        let base = data.samples[..n].to_vec();
        let paired = if s.null_replacement {
            PairedDatasets::null(base, index)?
        } else {
            PairedDatasets::new(base, index, replacement.clone())?
        };
        log::info!("stability run n = {n}");
        let report = paired_training(&network, &init, &paired, &core)?;
        let halving = if s.check_halving {
            let half = StabilityConfig {
                learning_rate: Some(report.learning_rate / 2.0),
                ..core.clone()
            };
            log::info!("stability run n = {n} at half step");
            let r2 = paired_training(&network, &init, &paired, &half)?;
            Some((
                r2.observed_divergence,
                relative_change(report.observed_divergence, r2.observed_divergence),
            ))
        } else {
            None
        };
        let bound_fixed_constants = match entries.first() {
            Some(first) => first.report.constants.with_n(n).bound(),
            None => report.bound,
        };
        entries.push(SweepEntry {
            report,
            bound_fixed_constants,
            halving,
        });
    }
    Ok((cfg, entries))
}

pub fn report_text(header: &str, entries: &[SweepEntry], halving_tolerance: f64) -> String {
    let mut out = header.to_string();
    for e in entries {
        let _ = writeln!(out, "\n[n = {}]", e.report.constants.n);
        out.push_str(&e.report.to_text());
        let _ = writeln!(
            out,
            "bound_fixed_constants = {}",
            fmt_f64(e.bound_fixed_constants)
        );
        if let Some((div, change)) = e.halving {
            let _ = writeln!(out, "halved_step_observed_divergence = {}", fmt_f64(div));
            let _ = writeln!(out, "halving_relative_change = {}", fmt_f64(change));
            let _ = writeln!(
                out,
                "halving_within_tolerance = {}",
                change < halving_tolerance
            );
        }
        let _ = writeln!(out, "passed = {}", e.passed(halving_tolerance));
    }
    out
}

pub fn divergence_csv(header: &str, entries: &[SweepEntry], every: usize) -> String {
    let mut out = header.to_string();
    out.push_str("n,");
    for (k, e) in entries.iter().enumerate() {
        let body = e.report.divergence_csv(every);
        let mut lines = body.lines();
        let columns = lines.next().unwrap_or_default();
        if k == 0 {
            out.push_str(columns);
            out.push('\n');
        }
        for line in lines {
            let _ = writeln!(out, "{},{line}", e.report.constants.n);
        }
    }
    if entries.is_empty() {
        out.push('\n');
    }
    out
}

/// Writes `stability_report.txt` and `divergence.csv`; a violated bound is
/// a verification failure.
pub fn run_stability(cfg: RunConfig, out: &Path) -> CliResult<Vec<SweepEntry>> {
    let tolerance = cfg.stability.halving_tolerance;
    let every = cfg.stability.trace_every;
    let (resolved, entries) = run_sweep(cfg)?;
    let header = run_header(&resolved, "stability");
    let dir = OutputDir::create(out)?;
    dir.write(
        "stability_report.txt",
        report_text(&header, &entries, tolerance).as_bytes(),
    )?;
    dir.write(
        "divergence.csv",
        divergence_csv(&header, &entries, every).as_bytes(),
    )?;
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed(tolerance))
        .map(|e| e.report.constants.n.to_string())
        .collect();
    if failed.is_empty() {
        Ok(entries)
    } else {
        Err(CliError::VerificationFailed(format!(
            "stability checks failed for n = {}",
            failed.join(", ")
        )))
    }
}
