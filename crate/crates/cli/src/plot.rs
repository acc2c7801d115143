//! SVG curves from metrics files: returns, losses and feature spread.

use std::path::{Path, PathBuf};

use anyhow::Context;
use plotters::prelude::*;
use wmrl::agent::{read_metrics, MetricsRecord};

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

/// Reads every input (a metrics file or a run directory) and writes
/// `returns.svg`, `losses.svg` and `collapse.svg` into `out`.
pub fn render(inputs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut runs = Vec::new();
    for input in inputs {
        let file = if input.is_dir() { input.join("metrics.jsonl") } else { input.clone() };
        let records = read_metrics(&file).with_context(|| format!("reading {}", file.display()))?;
        let name = file
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        runs.push((name, records));
    }
    let multi = runs.len() > 1;
    let label = |run: &str, what: &str| if multi { format!("{run} {what}") } else { what.to_string() };

    let mut returns = Vec::new();
    let mut losses = Vec::new();
    let mut spread = Vec::new();
    for (run, records) in &runs {
        let pick = |f: &dyn Fn(&MetricsRecord) -> Option<(f64, f64)>| records.iter().filter_map(f).collect::<Vec<_>>();
        returns.push(Series {
            label: label(run, "episode"),
            points: pick(&|r| match r {
                MetricsRecord::Episode(e) => Some((e.env_steps as f64, e.episode_return)),
                _ => None,
            }),
        });
        returns.push(Series {
            label: label(run, "eval mean"),
            points: pick(&|r| match r {
                MetricsRecord::Eval(e) => Some((e.env_steps as f64, e.mean)),
                _ => None,
            }),
        });
        type Field = fn(&wmrl::agent::TrainRecord) -> f64;
        let loss_fields: [(&str, Field); 7] = [
            ("total", |t| t.world_model.total),
            ("reward", |t| t.world_model.reward),
            ("cont", |t| t.world_model.cont),
            ("value", |t| t.world_model.value),
            ("action", |t| t.world_model.action),
            ("l_dyn", |t| t.world_model.l_dyn),
            ("l_rep", |t| t.world_model.l_rep),
        ];
        for (what, f) in loss_fields {
            losses.push(Series {
                label: label(run, what),
                points: pick(&|r| match r {
                    MetricsRecord::Train(t) => Some((t.grad_steps as f64, f(t))),
                    _ => None,
                }),
            });
        }
        let spread_fields: [(&str, Field); 2] = [("x_std", |t| t.x_std), ("h_std", |t| t.h_std)];
        for (what, f) in spread_fields {
            spread.push(Series {
                label: label(run, what),
                points: pick(&|r| match r {
                    MetricsRecord::Train(t) => Some((t.grad_steps as f64, f(t))),
                    _ => None,
                }),
            });
        }
    }
    let charts = [
        ("returns.svg", "Episode return", "env steps", returns),
        ("losses.svg", "World-model losses", "gradient steps", losses),
        ("collapse.svg", "Normalised feature std", "gradient steps", spread),
    ];
    let mut written = Vec::new();
    for (file, title, x_label, series) in charts {
        let path = out.join(file);
        chart(&path, title, x_label, &series).with_context(|| format!("drawing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let margin = 0.05 * (y1 - y0);
    (x0, x1, y0 - margin, y1 + margin)
}

fn chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1, y0, y1) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_label).draw()?;
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied().filter(|(_, y)| y.is_finite()), color.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
