//! Results tables and figures.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluator::{aggregate, efficiency_curve, AggregateRow, EfficiencyPoint, ResultRecord};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct EfficiencyRow<'a> {
    method: &'a str,
    k: usize,
    sparsity: &'a str,
    avg_inputs: f64,
    mean_iou: f64,
}

/// Distinct values in order of first appearance.
fn distinct<T: PartialEq + Clone>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn family(sparsity: &str) -> &str {
    sparsity.split(':').next().unwrap_or(sparsity)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Draws named polylines on shared axes.
fn line_plot(
    path: &Path,
    title: &str,
    x_desc: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(1.0, f64::max)
        * 1.05;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..x_max, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("mean IoU")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One IoU-vs-shots figure per sparsity family; one line per method and
/// sparsity setting.
pub fn plot_iou_vs_shots(dir: &Path, rows: &[AggregateRow]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for fam in distinct(rows.iter().map(|r| family(&r.sparsity).to_string())) {
        let series: Vec<(String, Vec<(f64, f64)>)> = distinct(
            rows.iter()
                .filter(|r| family(&r.sparsity) == fam)
                .map(|r| (r.method.clone(), r.sparsity.clone())),
        )
        .into_iter()
        .map(|(method, sparsity)| {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == method && r.sparsity == sparsity)
                .map(|r| (r.k as f64, r.mean_iou))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("{method} {sparsity}"), pts)
        })
        .collect();
        let path = dir.join(format!("iou_vs_shots_{fam}.svg"));
        line_plot(&path, &format!("IoU by shots ({fam})"), "shots (k)", &series)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn plot_efficiency(path: &Path, curves: &[(String, Vec<EfficiencyPoint>)]) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(m, pts)| (m.clone(), pts.iter().map(|p| (p.avg_inputs, p.mean_iou)).collect()))
        .collect();
    line_plot(path, "IoU by average inputs per image", "average positive inputs per image", &series)
}

/// Files written by [`write_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub aggregate_csv: PathBuf,
    pub efficiency_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Aggregated table, per-method efficiency curves and figures for one
/// held-out task's records.
pub fn write_report(dir: &Path, records: &[ResultRecord], fold_count: usize) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let rows = aggregate(records, fold_count)?;
    let aggregate_csv = dir.join("aggregate.csv");
    write_csv(&aggregate_csv, &rows)?;
    let curves: Vec<(String, Vec<EfficiencyPoint>)> = distinct(records.iter().map(|r| r.method.clone()))
        .into_iter()
        .map(|m| {
            let mine: Vec<ResultRecord> = records.iter().filter(|r| r.method == m).cloned().collect();
            (m, efficiency_curve(&mine))
        })
        .collect();
    let efficiency_rows: Vec<EfficiencyRow> = curves
        .iter()
        .flat_map(|(m, pts)| {
            pts.iter().map(move |p| EfficiencyRow {
                method: m,
                k: p.k,
                sparsity: &p.sparsity,
                avg_inputs: p.avg_inputs,
                mean_iou: p.mean_iou,
            })
        })
        .collect();
    let efficiency_csv = dir.join("efficiency.csv");
    write_csv(&efficiency_csv, &efficiency_rows)?;
    let mut plots = plot_iou_vs_shots(dir, &rows)?;
    let eff = dir.join("efficiency.svg");
    plot_efficiency(&eff, &curves)?;
    plots.push(eff);
    Ok(ReportFiles {
        aggregate_csv,
        efficiency_csv,
        plots,
    })
}
