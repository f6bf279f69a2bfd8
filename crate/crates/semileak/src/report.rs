//! Report artifacts: CSV tables and self-contained SVG line charts.
//!
//! Charts carry machine-readable extent labels (`data-role` attributes on
//! the axis texts), so downstream checks can confirm a chart agrees with
//! the table it was drawn from without an image decoder.

use std::path::Path;

use crate::error::{data_err, Error, Result};

/// Write bytes through a temp file and rename, so readers never observe a
/// half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_field(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Write a CSV table with a fixed header. Row shape is validated against
/// the header so columns can never drift silently.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Shape(format!(
                "csv row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// One named polyline of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const CHART_W: f64 = 720.0;
const CHART_H: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render series as an SVG line chart. Axis extents appear both as drawn
/// labels and as parseable values in `data-role="x-min|x-max|y-min|y-max"`
/// text nodes, formatted with six decimals.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return data_err("chart without any points");
    }
    if series
        .iter()
        .flat_map(|s| &s.points)
        .any(|&(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::Numeric(format!("chart '{title}' received a non-finite point")));
    }
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
    let (mut x_min, mut x_max) = (fold(&xs, f64::INFINITY, f64::min), fold(&xs, f64::NEG_INFINITY, f64::max));
    let (mut y_min, mut y_max) = (fold(&ys, f64::INFINITY, f64::min), fold(&ys, f64::NEG_INFINITY, f64::max));
    // degenerate extents still need a drawable span
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| CHART_H - MARGIN_B - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        esc(title)
    ));
    // axes
    let x0 = MARGIN_L;
    let y0 = CHART_H - MARGIN_B;
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{}\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        MARGIN_T
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        MARGIN_L + plot_w
    ));
    // extent labels, also the machine-readable contract of this chart
    svg.push_str(&format!(
        "<text data-role=\"x-min\" x=\"{x0}\" y=\"{}\" text-anchor=\"middle\">{:.6}</text>\n",
        y0 + 18.0,
        x_min
    ));
    svg.push_str(&format!(
        "<text data-role=\"x-max\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.6}</text>\n",
        MARGIN_L + plot_w,
        y0 + 18.0,
        x_max
    ));
    svg.push_str(&format!(
        "<text data-role=\"y-min\" x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.6}</text>\n",
        x0 - 6.0,
        y0 + 4.0,
        y_min
    ));
    svg.push_str(&format!(
        "<text data-role=\"y-max\" x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.6}</text>\n",
        x0 - 6.0,
        MARGIN_T + 4.0,
        y_max
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 14.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(y_label)
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> =
                s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            for &(x, y) in &s.points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>\n",
                    px(x),
                    py(y)
                ));
            }
        }
        let ly = MARGIN_T + 16.0 * i as f64 + 8.0;
        let lx = CHART_W - MARGIN_R + 12.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            esc(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Pull an extent value back out of a chart by its `data-role` tag.
pub fn chart_extent(svg: &str, role: &str) -> Result<f64> {
    let tag = format!("data-role=\"{role}\"");
    let at = svg
        .find(&tag)
        .ok_or_else(|| Error::Data(format!("chart has no '{role}' extent label")))?;
    let rest = &svg[at..];
    let open = rest.find('>').ok_or_else(|| Error::Data("malformed chart text".into()))?;
    let close =
        rest.find("</text>").ok_or_else(|| Error::Data("malformed chart text".into()))?;
    rest[open + 1..close]
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Data(format!("chart extent '{role}' is not numeric: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn csv_round_trips_with_escaping() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["name", "value"],
            &[
                vec!["plain".into(), "1.5".into()],
                vec!["with,comma".into(), "quote\"inside".into()],
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "name,value");
        assert_eq!(lines.next().unwrap(), "plain,1.5");
        assert_eq!(lines.next().unwrap(), "\"with,comma\",\"quote\"\"inside\"");
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempdir().unwrap();
        let err = write_csv(
            &dir.path().join("t.csv"),
            &["a", "b"],
            &[vec!["1".into()]],
        );
        assert!(err.is_err());
    }

    #[test]
    fn chart_extents_match_data() {
        let series = vec![
            Series { name: "acc".into(), points: vec![(0.0, 0.25), (10.0, 0.75), (20.0, 0.5)] },
            Series { name: "loss".into(), points: vec![(0.0, 1.5), (20.0, 0.1)] },
        ];
        let svg = line_chart("training", "step", "value", &series).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("acc"));
        assert_eq!(chart_extent(&svg, "x-min").unwrap(), 0.0);
        assert_eq!(chart_extent(&svg, "x-max").unwrap(), 20.0);
        assert_eq!(chart_extent(&svg, "y-min").unwrap(), 0.1);
        assert_eq!(chart_extent(&svg, "y-max").unwrap(), 1.5);
    }

    #[test]
    fn chart_escapes_markup_in_names() {
        let series =
            vec![Series { name: "a<b&c".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] }];
        let svg = line_chart("t<&t", "x", "y", &series).unwrap();
        assert!(svg.contains("a&lt;b&amp;c"));
        assert!(!svg.contains("a<b"));
    }

    #[test]
    fn chart_rejects_empty_or_nan() {
        assert!(line_chart("t", "x", "y", &[]).is_err());
        let bad =
            vec![Series { name: "s".into(), points: vec![(0.0, f64::NAN)] }];
        assert!(line_chart("t", "x", "y", &bad).is_err());
    }

    #[test]
    fn degenerate_extents_still_render() {
        let series = vec![Series { name: "flat".into(), points: vec![(3.0, 0.5), (3.0, 0.5)] }];
        let svg = line_chart("flat", "x", "y", &series).unwrap();
        assert_eq!(chart_extent(&svg, "x-min").unwrap(), 2.5);
        assert_eq!(chart_extent(&svg, "x-max").unwrap(), 3.5);
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1, "temp file left behind");
    }
}
