use std::path::Path;

use plotters::prelude::*;

use super::train::TrainRun;
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Png(format!("plot: {e}"))
}

/// Two stacked panels — accuracy on [0, 1] above, loss below — with one
/// colour per run: thick lines for validation, thin for training. Axes
/// carry grid lines only; the CSV beside the plot has the numbers.
pub fn plot_curves(runs: &[&TrainRun], path: &Path) -> Result<()> {
    if runs.is_empty() || runs.iter().any(|r| r.epochs.is_empty()) {
        return Err(Error::invalid("nothing to plot"));
    }
    let epochs = runs.iter().map(|r| r.epochs.len()).max().unwrap_or(1).max(2);
    let max_loss = runs
        .iter()
        .flat_map(|r| r.epochs.iter().flat_map(|e| [Some(e.train_loss), e.val_loss]))
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6);

    let root = BitMapBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 1));
    for (pi, area) in panels.iter().enumerate() {
        let top = if pi == 0 { 1.0 } else { max_loss * 1.05 };
        let mut chart = ChartBuilder::on(area)
            .margin(16)
            .build_cartesian_2d(1f64..epochs as f64, 0f64..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_labels(0)
            .y_labels(0)
            .light_line_style(RGBColor(235, 235, 235))
            .bold_line_style(RGBColor(200, 200, 200))
            .draw()
            .map_err(plot_err)?;
        for (ri, run) in runs.iter().enumerate() {
            let colour = PALETTE[ri % PALETTE.len()];
            let pick = |e: &super::train::EpochRecord, val: bool| match (pi, val) {
                (0, true) => e.val_accuracy,
                (0, false) => Some(e.train_accuracy),
                (_, true) => e.val_loss,
                (_, false) => Some(e.train_loss),
            };
            for (val, width) in [(false, 1), (true, 3)] {
                let pts: Vec<(f64, f64)> =
                    run.epochs.iter().filter_map(|e| pick(e, val).map(|v| (e.epoch as f64, v))).collect();
                chart.draw_series(LineSeries::new(pts, colour.stroke_width(width))).map_err(plot_err)?;
            }
        }
    }
    root.present().map_err(plot_err)
}
