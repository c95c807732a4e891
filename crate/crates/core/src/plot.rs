//! SVG loss and validation-mIoU curves from training history files.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::HistoryRecord;

/// Parse a line-delimited JSON history file.
pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::data(format!("{}:{}: bad history record: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_history(path: &Path, records: &[HistoryRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn draw(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let fail = |e: String| Error::data(format!("cannot draw {}: {e}", path.display()));
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max, y_min..y_max)
        .map_err(|e| fail(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()
        .map_err(|e| fail(e.to_string()))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| fail(e.to_string()))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| fail(e.to_string()))?;
    }
    root.present().map_err(|e| fail(e.to_string()))?;
    Ok(())
}

/// Write `loss.svg` and `miou.svg` into `out_dir`; one line per history file.
/// Steps of later stages continue after the previous file's last step when
/// the files are given in stage order.
pub fn plot_histories(histories: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut loss = Vec::new();
    let mut miou = Vec::new();
    let mut offset = 0.0;
    for path in histories {
        let records = read_history(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        loss.push(Series {
            label: label.clone(),
            points: records.iter().map(|r| (offset + r.step as f64, r.loss)).collect(),
        });
        miou.push(Series {
            label,
            points: records
                .iter()
                .filter_map(|r| r.val_miou.map(|m| (offset + r.step as f64, m)))
                .collect(),
        });
        offset += records.last().map(|r| r.step as f64).unwrap_or(0.0);
    }
    let loss_path = out_dir.join("loss.svg");
    let miou_path = out_dir.join("miou.svg");
    draw(&loss_path, "Training loss", "loss", &loss)?;
    draw(&miou_path, "Validation mIoU", "mIoU", &miou)?;
    Ok(vec![loss_path, miou_path])
}
