//! Per-layer metric inversion timings: Woodbury against a dense Cholesky solve.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use riemod::linalg::{DenseMatrix, DiagonalMatrix};
use riemod::metric::LayerMetric;
use riemod::rng::SplitMix64;

use crate::artifacts::{fmt_f64, OutputDir};
use crate::config::{BenchSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run_header;

/// Each timed repeat runs the solve enough times to last at least this long.
const MIN_REPEAT: Duration = Duration::from_millis(2);

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_alpha: usize,
    pub d: usize,
    pub woodbury_ms: f64,
    pub dense_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    /// Slope of `log woodbury_ms` against `log n_α`; needs two sizes.
    pub woodbury_exponent: Option<f64>,
    pub dense_exponent: Option<f64>,
    /// Smallest `n_α` at which Woodbury beat the dense solve.
    pub crossover: Option<usize>,
}

pub fn validate(b: &BenchSection) -> CliResult<()> {
    if b.sizes.is_empty() || b.sizes.contains(&0) {
        return Err(CliError::config(
            "bench.sizes must list positive layer sizes",
        ));
    }
    if b.output_dim == 0 || b.repeats == 0 {
        return Err(CliError::config(
            "bench.output_dim and bench.repeats must be positive",
        ));
    }
    Ok(())
}

/// Least-squares slope of `log y` on `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Best-of-`repeats` milliseconds per call of `f`.
fn time_ms(repeats: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<f64> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().max(Duration::from_nanos(100));
    let inner = (MIN_REPEAT.as_secs_f64() / once.as_secs_f64())
        .ceil()
        .max(1.0) as usize;
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        best = best.min(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    Ok(best)
}

/// One layer with `D` uniform in `[0.5, 1.5]` and `K ~ N(0, 1/n_α)` of shape `d × n_α`.
/// Each timed call builds a fresh metric, so no factorization is reused.
pub fn bench_size(
    rng: &mut SplitMix64,
    n_alpha: usize,
    d: usize,
    repeats: usize,
    dense: bool,
) -> CliResult<BenchRow> {
    let mass = DiagonalMatrix::new((0..n_alpha).map(|_| rng.uniform_range(0.5, 1.5)).collect())?;
    let scale = 1.0 / (n_alpha as f64).sqrt();
    let k = DenseMatrix::new(
        d,
        n_alpha,
        rng.normal_vec(d * n_alpha)
            .iter()
            .map(|x| scale * x)
            .collect(),
    )?;
    let v = rng.normal_vec(n_alpha);
    let woodbury_ms = time_ms(repeats, || {
        let m = LayerMetric::new(0, mass.clone(), k.clone())?;
        std::hint::black_box(m.woodbury_apply_inverse(&v)?);
        Ok(())
    })?;
    let dense_ms = if dense {
        Some(time_ms(repeats, || {
            let m = LayerMetric::new(0, mass.clone(), k.clone())?;
            std::hint::black_box(m.dense_apply_inverse(&v)?);
            Ok(())
        })?)
    } else {
        None
    };
    log::info!("bench n_alpha = {n_alpha}: woodbury {woodbury_ms:.4} ms, dense {dense_ms:?} ms");
    Ok(BenchRow {
        n_alpha,
        d,
        woodbury_ms,
        dense_ms,
    })
}

pub fn run_sweep(b: &BenchSection, seed: u64) -> CliResult<BenchSummary> {
    validate(b)?;
    let mut rng = SplitMix64::new(seed);
    let rows = b
        .sizes
        .iter()
        .map(|&n| bench_size(&mut rng, n, b.output_dim, b.repeats, n <= b.dense_max))
        .collect::<CliResult<Vec<_>>>()?;
    let woodbury: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n_alpha as f64, r.woodbury_ms))
        .collect();
    let dense: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.dense_ms.map(|t| (r.n_alpha as f64, t)))
        .collect();
    let crossover = rows
        .iter()
        .filter(|r| r.dense_ms.is_some_and(|t| r.woodbury_ms < t))
        .map(|r| r.n_alpha)
        .min();
    Ok(BenchSummary {
        woodbury_exponent: loglog_slope(&woodbury),
        dense_exponent: loglog_slope(&dense),
        crossover,
        rows,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), fmt_f64)
}

pub fn bench_csv(header: &str, s: &BenchSummary) -> String {
    let mut out = header.to_string();
    let _ = writeln!(out, "# woodbury_exponent = {}", opt(s.woodbury_exponent));
    let _ = writeln!(out, "# dense_exponent = {}", opt(s.dense_exponent));
    let _ = writeln!(
        out,
        "# crossover_n_alpha = {}",
        s.crossover
            .map_or_else(|| "none".to_string(), |n| n.to_string())
    );
    for r in &s.rows {
        if let Some(d) = r.dense_ms {
            let _ = writeln!(
                out,
                "# speedup_at_{} = {}",
                r.n_alpha,
                fmt_f64(d / r.woodbury_ms)
            );
        }
    }
    out.push_str("n_alpha,d,woodbury_ms,dense_ms\n");
    for r in &s.rows {
        let dense = r.dense_ms.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{dense}",
            r.n_alpha,
            r.d,
            fmt_f64(r.woodbury_ms)
        );
    }
    out
}

pub fn run_bench(cfg: RunConfig, out: &Path) -> CliResult<BenchSummary> {
    validate(&cfg.bench)?;
    let header = run_header(&cfg, "bench");
    let dir = OutputDir::create(out)?;
    let summary = run_sweep(&cfg.bench, cfg.seed)?;
    dir.write("bench.csv", bench_csv(&header, &summary).as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.5)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn single_size_gives_single_row() {
        let b = BenchSection {
            sizes: vec![20],
            output_dim: 3,
            repeats: 1,
            dense_max: 100,
        };
        let s = run_sweep(&b, 1).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert!(s.rows[0].dense_ms.is_some());
        assert_eq!(s.woodbury_exponent, None);
        let csv = bench_csv("", &s);
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 2);
    }

    #[test]
    fn degenerate_square_case_still_emits_rows() {
        let b = BenchSection {
            sizes: vec![8, 16],
            output_dim: 16,
            repeats: 1,
            dense_max: 8,
        };
        let s = run_sweep(&b, 2).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert!(s.rows[1].dense_ms.is_none());
        assert!(bench_csv("", &s).ends_with(",\n"));
    }

    #[test]
    fn empty_sweep_rejected() {
        let b = BenchSection {
            sizes: vec![],
            ..Default::default()
        };
        assert_eq!(validate(&b).unwrap_err().exit_code(), 2);
    }
}
