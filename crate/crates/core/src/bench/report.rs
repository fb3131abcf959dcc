use std::path::Path;

use crate::fsutil::write_atomic;
use crate::trainer::{fixed2, render_minutes, EpochStats};

use super::{BenchError, BenchReport, PreprocessTiming, StrategyReport};

const FOOTER: &str = "Rows that differ only in the execution device (CPU versus GPU) are \
collapsed: every strategy here runs on the CPU, so the plain and the device-accelerated \
single-worker configurations share the baseline row, and the data parallel rows use \
worker threads that exchange encoded gradient messages.";

/// Rendered tables in both formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tables {
    pub markdown: String,
    pub csv: String,
}

/// One parsed row of `tables.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub table: String,
    pub key: String,
    pub network: String,
    pub description: String,
    pub value: Option<f64>,
}

fn percent(acc: Option<f64>) -> String {
    acc.map_or_else(|| "n/a".to_string(), |a| format!("{}%", fixed2(a * 100.0)))
}

fn final_loss(r: &StrategyReport) -> Option<f64> {
    r.epochs.last().map(|e| e.mean_loss).filter(|l| l.is_finite())
}

fn description(r: &StrategyReport) -> String {
    if r.workers > 1 {
        format!("{} ({} workers)", r.strategy.description(), r.workers)
    } else {
        r.strategy.description().to_string()
    }
}

/// Markdown table with padded columns.
fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect()));
    for row in rows {
        out.push_str(&line(row.clone()));
    }
    out
}

pub fn emit_tables(reports: &[StrategyReport], preprocessing: &[PreprocessTiming]) -> Tables {
    let acc_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| vec![r.strategy.network().to_string(), description(r), percent(r.test_accuracy)])
        .collect();
    let time_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.strategy.network().to_string(),
                description(r),
                render_minutes(r.total_seconds),
                final_loss(r).map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}")),
            ]
        })
        .collect();
    let pre_rows: Vec<Vec<String>> = preprocessing
        .iter()
        .map(|p| {
            vec![
                p.workers.to_string(),
                p.images.to_string(),
                format!("{} seconds", fixed2(p.seconds)),
            ]
        })
        .collect();

    let mut md = String::from("## Test accuracy\n\n");
    md.push_str(&aligned(&["Network", "Strategy", "Test accuracy"], &acc_rows));
    md.push_str("\n## Execution time\n\n");
    md.push_str(&aligned(&["Network", "Strategy", "Training time", "Final loss"], &time_rows));
    if !pre_rows.is_empty() {
        md.push_str("\n## Parallel preprocessing\n\n");
        md.push_str(&aligned(&["Workers", "Images", "Wall time"], &pre_rows));
    }
    let failures: Vec<&StrategyReport> = reports.iter().filter(|r| r.error.is_some()).collect();
    if !failures.is_empty() {
        md.push_str("\n## Failures\n\n");
        for r in failures {
            md.push_str(&format!("- {}: {}\n", r.strategy.key(), r.error.as_deref().unwrap_or("")));
        }
    }
    md.push_str(&format!("\n{FOOTER}\n"));

    let mut csv = String::from("table,key,network,description,value\n");
    let num = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "n/a".to_string(), f);
    for r in reports {
        let key = r.strategy.key();
        let net = r.strategy.network();
        let desc = description(r);
        csv.push_str(&format!(
            "accuracy_percent,{key},{net},{desc},{}\n",
            num(r.test_accuracy, &|a| fixed2(a * 100.0))
        ));
        csv.push_str(&format!("time_minutes,{key},{net},{desc},{}\n", fixed2(r.total_minutes())));
        csv.push_str(&format!(
            "final_loss,{key},{net},{desc},{}\n",
            num(final_loss(r), &|l| format!("{l:.4}"))
        ));
    }
    for p in preprocessing {
        csv.push_str(&format!(
            "preprocess_seconds,workers_{},,{} images,{}\n",
            p.workers,
            p.images,
            fixed2(p.seconds)
        ));
    }
    Tables { markdown: md, csv }
}

pub fn parse_tables_csv(text: &str) -> Result<Vec<TableRow>, BenchError> {
    let mut lines = text.lines();
    if lines.next() != Some("table,key,network,description,value") {
        return Err(BenchError::Invalid("unexpected tables.csv header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(BenchError::Invalid(format!("line {}: expected 5 fields", i + 2)));
            }
            let value = match f[4] {
                "n/a" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| BenchError::Invalid(format!("line {}: bad value {v:?}", i + 2)))?,
                ),
            };
            Ok(TableRow {
                table: f[0].to_string(),
                key: f[1].to_string(),
                network: f[2].to_string(),
                description: f[3].to_string(),
                value,
            })
        })
        .collect()
}

pub fn render_loss_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for s in stats {
        out.push_str(&format!("{},{}\n", s.epoch, s.mean_loss));
    }
    out
}

/// Line chart of mean loss against epoch.
pub fn render_loss_svg(stats: &[EpochStats], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 56.0;
    let losses: Vec<f64> = stats.iter().map(|s| s.mean_loss).filter(|l| l.is_finite()).collect();
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if losses.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let first = stats.first().map_or(0, |s| s.epoch) as f64;
    let last = stats.last().map_or(0, |s| s.epoch) as f64;
    let x = |e: f64| {
        if last > first {
            M + (e - first) / (last - first) * (W - 2.0 * M)
        } else {
            W / 2.0
        }
    };
    let y = |l: f64| H - M - (l - lo) / (hi - lo) * (H - 2.0 * M);
    let points: Vec<String> = stats
        .iter()
        .filter(|s| s.mean_loss.is_finite())
        .map(|s| format!("{:.2},{:.2}", x(s.epoch as f64), y(s.mean_loss)))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {cy})\">mean loss</text>\n\
         <text x=\"{tl}\" y=\"{M}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{hi:.4}</text>\n\
         <text x=\"{tl}\" y=\"{b}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{lo:.4}</text>\n",
        cx = W / 2.0,
        cy = H / 2.0,
        b = H - M,
        r = W - M,
        xl = H - 16.0,
        tl = M - 4.0,
        title = title.replace('&', "&amp;").replace('<', "&lt;"),
    );
    if points.len() == 1 {
        let (px, py) = points[0].split_once(',').expect("formatted pair");
        svg.push_str(&format!("<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"steelblue\"/>\n"));
    } else if !points.is_empty() {
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `epoch,mean_loss` to `csv_path` and, if given, a chart to
/// `svg_path`.
pub fn emit_loss_curve(stats: &[EpochStats], csv_path: &Path, svg_path: Option<&Path>) -> Result<(), BenchError> {
    if stats.is_empty() {
        return Err(BenchError::Invalid("loss curve needs at least one epoch".into()));
    }
    write_atomic(csv_path, render_loss_csv(stats).as_bytes())?;
    if let Some(p) = svg_path {
        let title = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("loss");
        write_atomic(p, render_loss_svg(stats, title).as_bytes())?;
    }
    Ok(())
}

/// `tables.md`, `tables.csv` and `loss_<strategy>.{csv,svg}` under `dir`.
pub fn write_report(dir: &Path, report: &BenchReport) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    let tables = emit_tables(&report.strategies, &report.preprocessing);
    write_atomic(&dir.join("tables.md"), tables.markdown.as_bytes())?;
    write_atomic(&dir.join("tables.csv"), tables.csv.as_bytes())?;
    for r in &report.strategies {
        if r.epochs.is_empty() {
            continue;
        }
        let key = r.strategy.key();
        emit_loss_curve(
            &r.epochs,
            &dir.join(format!("loss_{key}.csv")),
            Some(&dir.join(format!("loss_{key}.svg"))),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Strategy;

    fn stats(losses: &[f64]) -> Vec<EpochStats> {
        losses
            .iter()
            .enumerate()
            .map(|(epoch, &mean_loss)| EpochStats {
                epoch,
                mean_loss,
                lr: 0.001,
                wall_seconds: 1.0,
                skipped_steps: 0,
            })
            .collect()
    }

    fn report(strategy: Strategy, acc: Option<f64>, seconds: f64, losses: &[f64]) -> StrategyReport {
        StrategyReport {
            strategy,
            workers: 1,
            total_seconds: seconds,
            test_accuracy: acc,
            epochs: stats(losses),
            error: None,
        }
    }

    #[test]
    fn formatting_rules() {
        let t = emit_tables(&[report(Strategy::Baseline, Some(0.8692), 611.4, &[0.5, 0.25])], &[]);
        assert!(t.markdown.contains("86.92%"), "{}", t.markdown);
        assert!(t.markdown.contains("10.19 minutes"));
        assert!(t.markdown.contains("0.2500"));
        assert!(t.csv.contains("accuracy_percent,baseline,micro-resnet,No accelerated strategy,86.92\n"));
        assert!(t.csv.contains("time_minutes,baseline,micro-resnet,No accelerated strategy,10.19\n"));
    }

    #[test]
    fn missing_values_render_na() {
        let mut r = report(Strategy::Parallel, None, 3.0, &[]);
        r.error = Some("worker 1 failed".into());
        let t = emit_tables(&[r], &[]);
        assert!(t.markdown.contains("n/a"));
        assert!(t.markdown.contains("worker 1 failed"));
        let rows = parse_tables_csv(&t.csv).unwrap();
        assert_eq!(rows[0].value, None);
        assert_eq!(rows[2].value, None);
    }

    #[test]
    fn markdown_columns_align() {
        let t = emit_tables(
            &[
                report(Strategy::Baseline, Some(0.5), 1.0, &[1.0]),
                report(Strategy::DeepParallelMixedSched, Some(0.75), 100.0, &[1.0]),
            ],
            &[],
        );
        let table: Vec<&str> = t.markdown.lines().skip(2).take(4).collect();
        let widths: Vec<usize> = table.iter().map(|l| l.chars().count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{table:#?}");
    }

    #[test]
    fn csv_round_trip_to_two_decimals() {
        let reports = [
            report(Strategy::Baseline, Some(0.861234), 9023.0, &[0.7]),
            report(Strategy::Parallel, Some(0.8629), 626.4, &[0.6]),
        ];
        let pre = [PreprocessTiming {
            workers: 4,
            images: 64,
            seconds: 0.123,
            failures: 0,
        }];
        let rows = parse_tables_csv(&emit_tables(&reports, &pre).csv).unwrap();
        assert_eq!(rows.len(), 7);
        let get = |t: &str, k: &str| rows.iter().find(|r| r.table == t && r.key == k).unwrap().value.unwrap();
        assert!((get("accuracy_percent", "baseline") - 86.12).abs() < 0.005 + 1e-9);
        assert!((get("time_minutes", "baseline") - 150.38).abs() < 0.005 + 1e-9);
        assert!((get("time_minutes", "parallel") - 10.44).abs() < 0.005 + 1e-9);
        assert_eq!(get("preprocess_seconds", "workers_4"), 0.12);
    }

    #[test]
    fn loss_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = stats(&[0.9, 0.5, 0.2]);
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        emit_loss_curve(&s, &a, Some(&dir.path().join("a.svg"))).unwrap();
        emit_loss_curve(&s, &b, None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 4);
        assert!(std::fs::read_to_string(dir.path().join("a.svg")).unwrap().contains("<polyline"));
        assert!(emit_loss_curve(&[], &a, None).is_err());
        assert!(emit_loss_curve(&s, &a.join("x.csv"), None).is_err());
    }

    #[test]
    fn single_epoch_chart() {
        let svg = render_loss_svg(&stats(&[0.3]), "one");
        assert!(svg.contains("<circle"));
    }
}
