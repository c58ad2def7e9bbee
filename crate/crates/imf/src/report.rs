//! CSV tables and SVG plots.

use std::fs;
use std::io::Write;
use std::path::Path;

use imf_core::experiments::{ModelReport, Scenario, SweepTable};
use imf_core::supervisor::TrainLog;
use imf_core::utility::IntentSet;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Error;

/// One line of an IAE table. `metric` names the IAE variant: `iae` for the
/// target-relative form, `iae_range` for zero-target KPIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaeRow {
    pub scenario: String,
    pub model: String,
    pub expectation: String,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "IAE")]
    pub iae: f64,
    pub seed_count: usize,
    pub metric: String,
}

pub fn report_rows(intents: &IntentSet, report: &ModelReport) -> Vec<IaeRow> {
    report
        .entries
        .iter()
        .map(|e| IaeRow {
            scenario: report.scenario.clone(),
            model: report.model.clone(),
            expectation: e.expectation.to_string(),
            p: intents.get(&e.expectation).map_or(f64::NAN, |x| x.priority),
            iae: e.mean,
            seed_count: report.seeds.len(),
            metric: e.kind.label().into(),
        })
        .collect()
}

/// Rows of one swept expectation; `P` is the swept priority.
pub fn sweep_rows(table: &SweepTable, swept: &str) -> Vec<IaeRow> {
    table
        .rows
        .iter()
        .filter(|r| r.swept.as_str() == swept)
        .map(|r| IaeRow {
            scenario: r.scenario.clone(),
            model: r.model.clone(),
            expectation: r.expectation.to_string(),
            p: r.priority,
            iae: r.iae,
            seed_count: r.seed_count,
            metric: r.kind.label().into(),
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const IAE_HEADER: [&str; 7] = ["scenario", "model", "expectation", "P", "IAE", "seed_count", "metric"];

pub fn write_iae_csv(path: &Path, rows: &[IaeRow]) -> Result<(), Error> {
    write_rows(path, &IAE_HEADER, rows)
}

pub fn read_iae_csv(path: &Path) -> Result<Vec<IaeRow>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct TraceRow<'a> {
    model: &'a str,
    seed: u64,
    step: usize,
    qoe_cv: f64,
    pl_urllc: f64,
    pl_miot: f64,
    latency_urllc: f64,
    latency_miot: f64,
    power_miot: f64,
    z: f64,
}

/// KPI series of every rollout. Step 0 is the initial state and carries no
/// utility value.
pub fn write_traces_csv(path: &Path, reports: &[ModelReport]) -> Result<(), Error> {
    let header = [
        "model", "seed", "step", "qoe_cv", "pl_urllc", "pl_miot", "latency_urllc", "latency_miot", "power_miot", "z",
    ];
    let mut rows = Vec::new();
    for r in reports {
        for (seed, t) in r.seeds.iter().zip(&r.traces) {
            let k = t.initial_kpis;
            rows.push(TraceRow {
                model: &r.model,
                seed: *seed,
                step: 0,
                qoe_cv: k.qoe_cv,
                pl_urllc: k.pl_urllc,
                pl_miot: k.pl_miot,
                latency_urllc: k.latency_urllc,
                latency_miot: k.latency_miot,
                power_miot: k.power_miot_normalized,
                z: f64::NAN,
            });
            for s in &t.steps {
                let k = s.kpis;
                rows.push(TraceRow {
                    model: &r.model,
                    seed: *seed,
                    step: s.step + 1,
                    qoe_cv: k.qoe_cv,
                    pl_urllc: k.pl_urllc,
                    pl_miot: k.pl_miot,
                    latency_urllc: k.latency_urllc,
                    latency_miot: k.latency_miot,
                    power_miot: k.power_miot_normalized,
                    z: s.z,
                });
            }
        }
    }
    write_rows(path, &header, &rows)
}

pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> Result<(), Error> {
    let header = ["episode", "episode_return", "mean_reward", "actor_loss", "critic_loss", "entropy"];
    write_rows(path, &header, &log.entries)
}

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series], extra: Option<f64>) -> (f64, f64, f64, f64) {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(extra);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    (x0, x1.max(x0 + 1.0), y0 - pad, y1 + pad)
}

fn line_plot(path: &Path, title: &str, series: &[Series], target: Option<f64>) -> Result<(), Error> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Ok(());
    }
    let (x0, x1, y0, y1) = bounds(series, target);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 400)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().draw().map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if let Some(t) = target {
            chart
                .draw_series(LineSeries::new([(x0, t), (x1, t)], BLACK.mix(0.5)))
                .map_err(plot_err)?
                .label("target")
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK.mix(0.5)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// One SVG per expectation: the seed-averaged KPI trace of every model
/// against the target. Returns the written file names.
pub fn plot_traces(dir: &Path, scenario: &Scenario, reports: &[ModelReport]) -> Result<Vec<String>, Error> {
    let mut written = Vec::new();
    for e in scenario.intents.iter() {
        let series: Vec<Series> = reports
            .iter()
            .map(|r| {
                let per_seed: Vec<Vec<f64>> = r.traces.iter().map(|t| t.series(e.service, e.kpi)).collect();
                let n = per_seed.iter().map(Vec::len).min().unwrap_or(0);
                let points = (0..n)
                    .map(|k| ((k + 1) as f64, per_seed.iter().map(|s| s[k]).sum::<f64>() / per_seed.len() as f64))
                    .collect();
                Series { label: r.model.clone(), points }
            })
            .collect();
        let name = format!("trace-{}.svg", e.id);
        line_plot(&dir.join(&name), &format!("{} {}", scenario.name, e.id), &series, Some(e.target))?;
        written.push(name);
    }
    Ok(written)
}

/// IAE against the swept priority for one swept expectation.
pub fn plot_sweep(dir: &Path, scenario: &str, table: &SweepTable, swept: &str) -> Result<String, Error> {
    let mut models: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    let series: Vec<Series> =
        models.iter().map(|m| Series { label: (*m).into(), points: table.curve(m, swept) }).collect();
    let name = format!("sweep-{swept}.svg");
    line_plot(&dir.join(&name), &format!("{scenario}: IAE of {swept} vs priority"), &series, None)?;
    Ok(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: &str, p: f64, iae: f64) -> IaeRow {
        IaeRow {
            scenario: "s".into(),
            model: m.into(),
            expectation: "cv-qoe".into(),
            p,
            iae,
            seed_count: 5,
            metric: "iae".into(),
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iae.csv");
        write_iae_csv(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "scenario,model,expectation,P,IAE,seed_count,metric\n");
        assert!(read_iae_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn known_rows_have_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iae.csv");
        let rows = vec![row("proposed", 8.0, 0.125), row("baseline", 1.0, 1.0 / 3.0)];
        write_iae_csv(&path, &rows).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "scenario,model,expectation,P,IAE,seed_count,metric\n\
             s,proposed,cv-qoe,8.0,0.125,5,iae\n\
             s,baseline,cv-qoe,1.0,0.3333333333333333,5,iae\n"
        );
        assert_eq!(read_iae_csv(&path).unwrap(), rows);
    }

    #[test]
    fn plot_is_standalone_svg() {
        let dir = tempfile::tempdir().unwrap();
        let s = [Series { label: "a".into(), points: vec![(1.0, 2.0), (2.0, 3.0)] }];
        line_plot(&dir.path().join("p.svg"), "t", &s, Some(2.5)).unwrap();
        let text = fs::read_to_string(dir.path().join("p.svg")).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    }
}
