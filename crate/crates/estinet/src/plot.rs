//! Accuracy-vs-epoch charts emitted as self-contained SVG plus a CSV of the
//! plotted points, so downstream checks never parse images.

use std::io;
use std::path::Path;

use crate::metrics::{fmt_f, write_csv, MetricsRecord};

pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Renders accuracy curves (y in [0, 1]) over epochs as a line chart.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    curves: &[Curve],
    path: &Path,
) -> io::Result<()> {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (56.0, 16.0, 36.0, 48.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let sx = |x: f64| ml + (x / x_max) * pw;
    let sy = |y: f64| mt + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        title
    ));
    // axes and gridlines
    for i in 0..=5 {
        let yv = i as f64 / 5.0;
        let y = sy(yv);
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            ml + pw
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>\n",
            ml - 6.0,
            y + 4.0,
            yv
        ));
    }
    let x_ticks = (x_max as usize).clamp(1, 10);
    for i in 0..=x_ticks {
        let xv = x_max * i as f64 / x_ticks as f64;
        let x = sx(xv);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}</text>\n",
            mt + ph + 16.0,
            xv
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        h - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    ));
    // curves and legend
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = mt + 14.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + pw - 130.0,
            ml + pw - 110.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ml + pw - 104.0,
            ly + 4.0,
            curve.label
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)
}

fn curves_to_rows(curves: &[Curve]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for c in curves {
        for &(x, y) in &c.points {
            rows.push(vec![c.label.clone(), format!("{x:.0}"), fmt_f(y)]);
        }
    }
    rows
}

/// The four accuracy panels for one training run: task accuracy by mode,
/// selector accuracy, estimator accuracy on the train range, estimator
/// accuracy on the test range. Each panel is written as `<stem>.svg` +
/// `<stem>.csv`; returns the written file names.
pub fn plot_run_panels(records: &[MetricsRecord], out_dir: &Path) -> io::Result<Vec<String>> {
    assert!(!records.is_empty(), "no records to plot");
    let mut files = Vec::new();
    let epochs: Vec<f64> = records.iter().map(|r| r.epoch as f64).collect();

    let mut emit = |stem: &str, title: &str, curves: Vec<Curve>| -> io::Result<()> {
        let svg = out_dir.join(format!("{stem}.svg"));
        render_line_chart(title, "epoch", "accuracy", &curves, &svg)?;
        let csv = out_dir.join(format!("{stem}.csv"));
        write_csv(&csv, &["curve", "epoch", "accuracy"], &curves_to_rows(&curves))?;
        files.push(format!("{stem}.svg"));
        files.push(format!("{stem}.csv"));
        Ok(())
    };

    // panel a: task accuracy in train / test / inference configurations
    let mut task = vec![Curve {
        label: "train".into(),
        points: epochs.iter().copied().zip(records.iter().map(|r| r.task_accuracy)).collect(),
    }];
    if records.iter().any(|r| r.test_accuracy.is_some()) {
        task.push(Curve {
            label: "test".into(),
            points: records
                .iter()
                .filter_map(|r| r.test_accuracy.map(|a| (r.epoch as f64, a)))
                .collect(),
        });
        task.push(Curve {
            label: "inference".into(),
            points: records
                .iter()
                .filter_map(|r| r.inference_accuracy.map(|a| (r.epoch as f64, a)))
                .collect(),
        });
    }
    emit("task_accuracy", "Task accuracy by mode", task)?;

    // panel b: the three selectors
    let sel = vec![
        ("operation", records.iter().map(|r| r.selector_op).collect::<Vec<_>>()),
        ("column", records.iter().map(|r| r.selector_col).collect()),
        ("argument", records.iter().map(|r| r.selector_arg).collect()),
    ];
    emit(
        "selector_accuracy",
        "Selector accuracy",
        sel.into_iter()
            .map(|(label, ys)| Curve {
                label: label.into(),
                points: epochs.iter().copied().zip(ys).collect(),
            })
            .collect(),
    )?;

    // panels c/d: one curve per op
    for (stem, title, pick) in [
        ("estimator_train_range", "Estimator accuracy, train range", true),
        ("estimator_test_range", "Estimator accuracy, test range", false),
    ] {
        let per_op = if pick { &records[0].estilayer_train } else { &records[0].estilayer_test };
        let curves: Vec<Curve> = per_op
            .iter()
            .map(|(op, _)| Curve {
                label: op.name().into(),
                points: records
                    .iter()
                    .map(|r| {
                        let list = if pick { &r.estilayer_train } else { &r.estilayer_test };
                        let v = list.iter().find(|(o, _)| o == op).map(|(_, v)| *v).unwrap_or(0.0);
                        (r.epoch as f64, v)
                    })
                    .collect(),
            })
            .collect();
        if !curves.is_empty() {
            emit(stem, title, curves)?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::LogicOp;
    use crate::train::LossBreakdown;

    fn record(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            seed: 0,
            epoch,
            split: "train".into(),
            loss: LossBreakdown::default(),
            task_accuracy: 0.1 * epoch as f64,
            selector_op: 0.2,
            selector_col: 0.3,
            selector_arg: 0.4,
            violation_rate: 0.0,
            test_accuracy: Some(0.5),
            inference_accuracy: Some(0.6),
            estilayer_train: LogicOp::ALL.iter().map(|&o| (o, 0.9)).collect(),
            estilayer_test: LogicOp::ALL.iter().map(|&o| (o, 0.4)).collect(),
            wall_secs: 0.0,
        }
    }

    #[test]
    fn panels_emit_expected_curves_and_points() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<MetricsRecord> = (0..5).map(record).collect();
        let files = plot_run_panels(&records, dir.path()).unwrap();
        assert_eq!(files.len(), 8); // 4 panels x (svg + csv)

        let sel_svg = std::fs::read_to_string(dir.path().join("selector_accuracy.svg")).unwrap();
        assert_eq!(sel_svg.matches("<polyline").count(), 3);
        let est_svg = std::fs::read_to_string(dir.path().join("estimator_train_range.svg")).unwrap();
        assert_eq!(est_svg.matches("<polyline").count(), 5);

        // csv row count = plotted points (3 curves x 5 epochs + header)
        let sel_csv = std::fs::read_to_string(dir.path().join("selector_accuracy.csv")).unwrap();
        assert_eq!(sel_csv.lines().count(), 1 + 3 * 5);
        let task_csv = std::fs::read_to_string(dir.path().join("task_accuracy.csv")).unwrap();
        assert_eq!(task_csv.lines().count(), 1 + 3 * 5);
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<MetricsRecord> = (0..3).map(record).collect();
        plot_run_panels(&records, &dir.path().join("a")).unwrap();
        plot_run_panels(&records, &dir.path().join("b")).unwrap();
        for f in ["task_accuracy.svg", "selector_accuracy.csv"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }
}
