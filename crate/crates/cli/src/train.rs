use std::fmt::Write as _;
use std::path::Path;

use riemod::optimizer::{batch_loss, train, TrainingRecord};

use crate::artifacts::{encode_params, fmt_f64, OutputDir};
use crate::config::RunConfig;
use crate::data::{self, seed_streams};
use crate::error::{CliError, CliResult};
use crate::run_header;

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn training_csv(
    header: &str,
    records: &[TrainingRecord],
    layers: usize,
    final_loss: f64,
) -> String {
    let mut out = header.to_string();
    let _ = writeln!(out, "# final_loss = {}", fmt_f64(final_loss));
    out.push_str("step,loss");
    for a in 0..layers {
        let _ = write!(out, ",update_norm_{a}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{}", r.step, fmt_f64(r.loss));
        for u in &r.update_norms {
            let _ = write!(out, ",{}", fmt_f64(*u));
        }
        out.push('\n');
    }
    out
}

fn timing_csv(header: &str, records: &[TrainingRecord]) -> String {
    let mut out = header.to_string();
    out.push_str("step,step_ms\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{}",
            r.step,
            fmt_f64(r.duration.as_secs_f64() * 1e3)
        );
    }
    out
}

/// Trains the configured model and writes `training.csv`, `timing.csv`
/// and `final_params.bin`. Wall-clock timings live only in `timing.csv`
/// so that `training.csv` is reproducible byte for byte.
pub fn run_train(mut cfg: RunConfig, out: &Path) -> CliResult<TrainSummary> {
    let network = cfg.network()?;
    let (mut data_rng, mut init_rng) = seed_streams(cfg.seed);
    let data = data::load(&mut cfg.data, &mut data_rng)?;
    if data.input_dim != network.input_dim() || data.output_dim != network.output_dim() {
        return Err(CliError::config(format!(
            "model maps {} → {} but the data is {} → {}",
            network.input_dim(),
            network.output_dim(),
            data.input_dim,
            data.output_dim
        )));
    }
    let opt = cfg.optimizer.to_core(cfg.seed)?;
    opt.validate(network.layer_count())?;
    let header = run_header(&cfg, "train");

    let dir = OutputDir::create(out)?;
    let init = network.init_params(&mut init_rng);
    let outcome = train(
        &network,
        init,
        &data.samples,
        &opt,
        cfg.optimizer.method(),
        cfg.optimizer.batch_size,
    )?;
    let final_loss = match &outcome.error {
        None => batch_loss(&network, &outcome.params, &data.samples, opt.loss)?,
        Some(_) => f64::NAN,
    };
    let records = &outcome.records;
    dir.write(
        "training.csv",
        training_csv(&header, records, network.layer_count(), final_loss).as_bytes(),
    )?;
    dir.write("timing.csv", timing_csv(&header, records).as_bytes())?;
    if let Some(e) = outcome.error {
        return Err(e.into());
    }
    dir.write(
        "final_params.bin",
        &encode_params(&header, outcome.params.values()),
    )?;
    let initial_loss = records.first().map_or(final_loss, |r| r.loss);
    log::info!(
        "trained {} steps: loss {initial_loss:.6e} → {final_loss:.6e}",
        records.len()
    );
    Ok(TrainSummary {
        steps: records.len(),
        initial_loss,
        final_loss,
    })
}
