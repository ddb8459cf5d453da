//! Report tables built from a run, and their CSV / JSON emission.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backtest::{cost_label, net_rescaled, write_returns_csv, write_turnover_csv, CostModel};
use crate::market_data::format_exact;
use crate::metrics::{compute_metrics, correlation_matrix, rolling_correlation, turnover_distribution, MetricsRow, TurnoverSummary};
use crate::pipeline::{PanelSummary, RunConfig, RunOutput, SeedRun, StrategyRun};
use crate::training::WindowReport;
use crate::Result;

/// Mean and sample standard deviation across seeds. `None` when any seed
/// has no value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Self {
        let v: Option<Vec<f64>> = values.iter().copied().collect();
        match v {
            Some(v) if !v.is_empty() => {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let s = if v.len() > 1 {
                    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Stat {
                    mean: Some(m),
                    std: Some(s),
                }
            }
            _ => Stat { mean: None, std: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub strategy: String,
    pub seeds: usize,
    /// Aligned with [`MetricsRow::NAMES`].
    pub values: Vec<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub strategy: String,
    /// Sharpe of the rescaled net series at each cost level.
    pub sharpe: Vec<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnoverEntry {
    pub strategy: String,
    pub summary: TurnoverSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub strategies: Vec<String>,
    pub matrix: Vec<Vec<Option<f64>>>,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowManifest {
    pub strategy: String,
    pub seed: u64,
    pub windows: Vec<WindowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub input: PanelSummary,
    pub evaluation_start: NaiveDate,
    pub windows: Vec<WindowManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: Manifest,
    pub metric_names: Vec<String>,
    pub metrics_raw: Vec<MetricsEntry>,
    pub metrics_rescaled: Vec<MetricsEntry>,
    pub costs: Vec<f64>,
    pub cost_sweep: Vec<CostEntry>,
    pub turnover: Vec<TurnoverEntry>,
    pub correlation: CorrelationTable,
}

fn metrics_entry(run: &StrategyRun, pick: impl Fn(&SeedRun) -> &[f64]) -> Result<MetricsEntry> {
    let rows: Vec<MetricsRow> = run
        .runs
        .iter()
        .map(|r| compute_metrics(&r.result.active_values(pick(r))))
        .collect::<Result<_>>()?;
    let values = (0..MetricsRow::NAMES.len())
        .map(|k| Stat::of(&rows.iter().map(|m| m.values()[k]).collect::<Vec<_>>()))
        .collect();
    Ok(MetricsEntry {
        strategy: run.strategy.to_string(),
        seeds: run.runs.len(),
        values,
    })
}

fn cost_entry(run: &StrategyRun, costs: &[f64]) -> Result<CostEntry> {
    let sharpe = costs
        .iter()
        .map(|&c| {
            let per_seed = run
                .runs
                .iter()
                .map(|r| {
                    let net = net_rescaled(&r.result, CostModel::new(c)?);
                    Ok(compute_metrics(&r.result.active_values(&net))?.sharpe)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Stat::of(&per_seed))
        })
        .collect::<Result<_>>()?;
    Ok(CostEntry {
        strategy: run.strategy.to_string(),
        sharpe,
    })
}

fn turnover_entry(run: &StrategyRun) -> TurnoverEntry {
    let sums: Vec<TurnoverSummary> = run
        .runs
        .iter()
        .map(|r| turnover_distribution(&r.result.mean_turnover()))
        .collect();
    let k = sums.len() as f64;
    let avg = |f: fn(&TurnoverSummary) -> f64| sums.iter().map(f).sum::<f64>() / k;
    TurnoverEntry {
        strategy: run.strategy.to_string(),
        summary: TurnoverSummary {
            min: avg(|s| s.min),
            q1: avg(|s| s.q1),
            median: avg(|s| s.median),
            q3: avg(|s| s.q3),
            max: avg(|s| s.max),
            mean: avg(|s| s.mean),
        },
    }
}

/// Seed-averaged rescaled returns of every strategy on the dates where all
/// of them are active.
pub fn common_rescaled(out: &RunOutput) -> (Vec<NaiveDate>, Vec<Vec<f64>>) {
    let first = &out.strategies[0].runs[0].result;
    let keep: Vec<usize> = (0..first.n_dates())
        .filter(|&t| out.strategies.iter().all(|s| s.runs.iter().all(|r| r.result.active[t])))
        .collect();
    let series = out
        .strategies
        .iter()
        .map(|s| {
            keep.iter()
                .map(|&t| s.runs.iter().map(|r| r.result.rescaled[t]).sum::<f64>() / s.runs.len() as f64)
                .collect()
        })
        .collect();
    (keep.iter().map(|&t| first.dates[t]).collect(), series)
}

pub fn build_report(out: &RunOutput) -> Result<Report> {
    let cfg = &out.config;
    let mut metrics_raw = Vec::new();
    let mut metrics_rescaled = Vec::new();
    let mut cost_sweep = Vec::new();
    let mut turnover = Vec::new();
    for s in &out.strategies {
        metrics_raw.push(metrics_entry(s, |r| &r.result.raw)?);
        metrics_rescaled.push(metrics_entry(s, |r| &r.result.rescaled)?);
        cost_sweep.push(cost_entry(s, &cfg.costs)?);
        turnover.push(turnover_entry(s));
    }
    let (dates, series) = common_rescaled(out);
    let correlation = CorrelationTable {
        strategies: out.strategies.iter().map(|s| s.strategy.to_string()).collect(),
        matrix: correlation_matrix(&series)?,
        observations: dates.len(),
    };
    let windows = out
        .strategies
        .iter()
        .filter(|s| !s.strategy.is_combination())
        .flat_map(|s| {
            s.runs.iter().filter_map(|r| {
                r.seed.map(|seed| WindowManifest {
                    strategy: s.strategy.to_string(),
                    seed,
                    windows: r.windows.clone(),
                })
            })
        })
        .collect();
    Ok(Report {
        manifest: Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            input: out.panel.clone(),
            evaluation_start: out.evaluation_start_date,
            windows,
        },
        metric_names: MetricsRow::NAMES.iter().map(|s| s.to_string()).collect(),
        metrics_raw,
        metrics_rescaled,
        costs: cfg.costs.clone(),
        cost_sweep,
        turnover,
        correlation,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_exact)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["strategy".to_string(), "seeds".into()];
    for n in MetricsRow::NAMES {
        header.push(n.into());
        header.push(format!("{n}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.strategy.clone(), r.seeds.to_string()];
        for s in &r.values {
            rec.push(cell(s.mean));
            rec.push(cell(s.std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cost_sweep_csv<W: Write>(costs: &[f64], rows: &[CostEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["strategy".to_string()];
    for &c in costs {
        header.push(cost_label(c));
        header.push(format!("{}_std", cost_label(c)));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.strategy.clone()];
        for s in &r.sharpe {
            rec.push(cell(s.mean));
            rec.push(cell(s.std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_turnover_summary_csv<W: Write>(rows: &[TurnoverEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "min", "q1", "median", "q3", "max", "mean"])?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![r.strategy.clone()];
        rec.extend([s.min, s.q1, s.median, s.q3, s.max, s.mean].map(format_exact));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation_csv<W: Write>(table: &CorrelationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["strategy".to_string()];
    header.extend(table.strategies.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in table.strategies.iter().zip(&table.matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| cell(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Rolling correlation of a reference strategy (the first model, or the
/// first strategy) against each other one. `None` when the common sample
/// is shorter than the window.
pub fn write_rolling_correlation_csv<W: Write>(out_run: &RunOutput, window: usize, out: W) -> Result<bool> {
    let (dates, series) = common_rescaled(out_run);
    if series.len() < 2 || dates.len() < window.max(2) {
        return Ok(false);
    }
    let names: Vec<String> = out_run.strategies.iter().map(|s| s.strategy.to_string()).collect();
    let reference = out_run.strategies.iter().position(|s| s.strategy.is_seeded()).unwrap_or(0);
    let others: Vec<usize> = (0..series.len()).filter(|&k| k != reference).collect();
    let cols = others
        .iter()
        .map(|&k| rolling_correlation(&series[reference], &series[k], window))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend(others.iter().map(|&k| format!("{}~{}", names[reference], names[k])));
    w.write_record(&header)?;
    for t in window - 1..dates.len() {
        let mut rec = vec![dates[t].format("%Y-%m-%d").to_string()];
        rec.extend(cols.iter().map(|c| cell(c[t])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(true)
}

pub fn write_training_log_csv<W: Write>(log: &[(usize, crate::training::LogRow)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "candidate", "epoch", "train_loss", "val_loss"])?;
    for (window, r) in log {
        w.write_record([
            window.to_string(),
            r.candidate.to_string(),
            r.epoch.epoch.to_string(),
            format_exact(r.epoch.train_loss),
            format_exact(r.epoch.val_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes every table, per-strategy series and the manifest into `dir`.
/// Returns the written file names in order.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let report = build_report(out)?;
    let mut written = Vec::new();
    let mut done = |name: String| written.push(PathBuf::from(name));

    write_metrics_csv(&report.metrics_raw, create(dir, "metrics_raw.csv")?)?;
    done("metrics_raw.csv".into());
    write_metrics_csv(&report.metrics_rescaled, create(dir, "metrics_rescaled.csv")?)?;
    done("metrics_rescaled.csv".into());
    write_cost_sweep_csv(&report.costs, &report.cost_sweep, create(dir, "cost_sweep.csv")?)?;
    done("cost_sweep.csv".into());
    write_turnover_summary_csv(&report.turnover, create(dir, "turnover_summary.csv")?)?;
    done("turnover_summary.csv".into());
    write_correlation_csv(&report.correlation, create(dir, "correlation.csv")?)?;
    done("correlation.csv".into());
    let window = out.config.backtest.rolling_window;
    let rolling = dir.join("rolling_correlation.csv");
    if write_rolling_correlation_csv(out, window, create(dir, "rolling_correlation.csv")?)? {
        done("rolling_correlation.csv".into());
    } else {
        fs::remove_file(rolling)?;
        log::warn!("common sample shorter than the {window}-day rolling window; rolling correlations skipped");
    }

    for s in &out.strategies {
        let name = s.strategy.to_string();
        for r in &s.runs {
            let suffix = r.seed.map_or_else(String::new, |seed| format!("_seed{seed}"));
            let f = format!("returns_{name}{suffix}.csv");
            write_returns_csv(&r.result, &out.config.costs, create(dir, &f)?)?;
            done(f);
            let f = format!("turnover_{name}{suffix}.csv");
            write_turnover_csv(&r.result, create(dir, &f)?)?;
            done(f);
            if !r.log.is_empty() {
                let f = format!("training_log_{name}{suffix}.csv");
                write_training_log_csv(&r.log, create(dir, &f)?)?;
                done(f);
            }
        }
    }
    write_json(dir, "manifest.json", &report.manifest)?;
    done("manifest.json".into());
    write_json(dir, "report.json", &report)?;
    done("report.json".into());
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn fmt_stat(s: &Stat) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) if sd > 0.0 => format!("{m:.3} ({sd:.3})"),
        (Some(m), _) => format!("{m:.3}"),
        _ => "NA".into(),
    }
}

fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Plain-text rendering of the report tables; standard deviations across
/// seeds in parentheses.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let m = &report.manifest;
    out.push_str(&format!(
        "{} assets, {} dates ({} to {}), evaluated from {}\n\n",
        m.input.n_assets, m.input.n_dates, m.input.first_date, m.input.last_date, m.evaluation_start
    ));
    let mut header = vec!["strategy".to_string()];
    header.extend(report.metric_names.iter().cloned());
    for (title, rows) in [("Raw signals", &report.metrics_raw), ("Rescaled to target volatility", &report.metrics_rescaled)] {
        out.push_str(title);
        out.push('\n');
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| std::iter::once(r.strategy.clone()).chain(r.values.iter().map(fmt_stat)).collect())
            .collect();
        out.push_str(&text_table(&header, &body));
        out.push('\n');
    }
    out.push_str("Sharpe by transaction cost (bps)\n");
    let mut header = vec!["strategy".to_string()];
    header.extend(report.costs.iter().map(|c| c.to_string()));
    let body: Vec<Vec<String>> = report
        .cost_sweep
        .iter()
        .map(|r| std::iter::once(r.strategy.clone()).chain(r.sharpe.iter().map(fmt_stat)).collect())
        .collect();
    out.push_str(&text_table(&header, &body));
    out.push('\n');
    out.push_str("Average turnover\n");
    let header: Vec<String> = ["strategy", "min", "q1", "median", "q3", "max", "mean"].map(String::from).to_vec();
    let body: Vec<Vec<String>> = report
        .turnover
        .iter()
        .map(|r| {
            let s = &r.summary;
            std::iter::once(r.strategy.clone())
                .chain([s.min, s.q1, s.median, s.q3, s.max, s.mean].map(|v| format!("{v:.4}")))
                .collect()
        })
        .collect();
    out.push_str(&text_table(&header, &body));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_mean_and_sample_std() {
        let s = Stat::of(&[Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert!((s.std.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[Some(4.0)]).std, Some(0.0));
        assert_eq!(Stat::of(&[Some(1.0), None]).mean, None);
    }

    #[test]
    fn metrics_csv_has_mean_and_std_columns() {
        let rows = vec![MetricsEntry {
            strategy: "tsmom".into(),
            seeds: 1,
            values: vec![Stat::of(&[Some(0.5)]); 9],
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("strategy,seeds,expected_return,expected_return_std,volatility"));
        assert_eq!(header.split(',').count(), 20);
    }
}
