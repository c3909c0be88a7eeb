//! Static SVG line plots drawn from the same rows that go to CSV.

use std::path::Path;

use demoselect_core::{Error, Result};
use plotters::prelude::*;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("plot: {e}"))
}

fn bounds(points: &[(f64, f64)]) -> ((f64, f64), (f64, f64)) {
    let fold = |f: fn(&(f64, f64)) -> f64| {
        points
            .iter()
            .map(f)
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let pad = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = 0.05 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    (pad(fold(|p| p.0)), pad(fold(|p| p.1)))
}

/// One stacked panel per series, sharing the x label.
pub fn panels(path: &Path, title: &str, x_label: &str, series: &[Series<'_>]) -> Result<()> {
    let height = 220 * series.len().max(1) as u32 + 40;
    let root = SVGBackend::new(path, (720, height)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(plot_err)?;
    for (area, s) in root.split_evenly((series.len().max(1), 1)).iter().zip(series) {
        let ((x0, x1), (y0, y1)) = bounds(&s.points);
        let mut chart = ChartBuilder::on(area)
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .caption(s.label, ("sans-serif", 14))
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .light_line_style(WHITE)
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), &BLUE))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
