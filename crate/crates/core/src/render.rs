//! Static SVG figures with CSV sidecars: attention heatmaps, difference
//! heatmaps and per-layer profiles.
//!
//! Output bytes depend only on the inputs. Coordinates are printed with a
//! fixed number of decimals; data values in tooltips and sidecars use Rust's
//! shortest round-trip float formatting.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("label count mismatch: {rows} row labels and {cols} column labels for a {n_rows}x{n_cols} matrix")]
    LabelMismatch {
        rows: usize,
        cols: usize,
        n_rows: usize,
        n_cols: usize,
    },
    #[error("matrix has {got} values, expected {expected}")]
    MatrixSize { got: usize, expected: usize },
    #[error("no series to plot")]
    EmptySeries,
    #[error("series {label:?} has {got} points, expected {expected}")]
    SeriesLength {
        label: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    /// `[0, 1]`, white to dark blue.
    SequentialUnit,
    /// `[-m, m]` with `m = max |entry|` (1 for an all-zero matrix), blue–white–red.
    DivergingSymmetric,
}

type Rgb = (u8, u8, u8);

pub const SEQUENTIAL_STOPS: [Rgb; 2] = [(0xff, 0xff, 0xff), (0x08, 0x30, 0x6b)];
pub const DIVERGING_STOPS: [Rgb; 3] = [(0x21, 0x66, 0xac), (0xf7, 0xf7, 0xf7), (0xb2, 0x18, 0x2b)];
pub const SERIES_COLORS: [&str; 6] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];
const SERIES_DASHES: [&str; 3] = ["", "6 3", "2 2"];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mix = |x: u8, y: u8| (f64::from(x) + (f64::from(y) - f64::from(x)) * t).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c.0, c.1, c.2)
}

#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub matrix: Vec<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub color_scale: ColorScale,
    pub title: String,
}

impl HeatmapSpec {
    fn check(&self) -> Result<(), RenderError> {
        if self.matrix.len() != self.rows * self.cols {
            return Err(RenderError::MatrixSize {
                got: self.matrix.len(),
                expected: self.rows * self.cols,
            });
        }
        if self.row_labels.len() != self.rows || self.col_labels.len() != self.cols {
            return Err(RenderError::LabelMismatch {
                rows: self.row_labels.len(),
                cols: self.col_labels.len(),
                n_rows: self.rows,
                n_cols: self.cols,
            });
        }
        Ok(())
    }

    /// Value range mapped onto the palette.
    pub fn domain(&self) -> (f64, f64) {
        match self.color_scale {
            ColorScale::SequentialUnit => (0.0, 1.0),
            ColorScale::DivergingSymmetric => {
                let m = self.matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let m = if m > 0.0 { m } else { 1.0 };
                (-m, m)
            }
        }
    }

    pub fn color(&self, value: f64) -> String {
        let (lo, hi) = self.domain();
        let t = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
        let c = match self.color_scale {
            ColorScale::SequentialUnit => lerp(SEQUENTIAL_STOPS[0], SEQUENTIAL_STOPS[1], t),
            ColorScale::DivergingSymmetric if t < 0.5 => {
                lerp(DIVERGING_STOPS[0], DIVERGING_STOPS[1], t * 2.0)
            }
            ColorScale::DivergingSymmetric => {
                lerp(DIVERGING_STOPS[1], DIVERGING_STOPS[2], (t - 0.5) * 2.0)
            }
        };
        hex(c)
    }
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

const CELL: f64 = 22.0;
const CHAR_W: f64 = 7.0;

pub fn heatmap_svg(spec: &HeatmapSpec) -> Result<String, RenderError> {
    spec.check()?;
    let label_w = |labels: &[String]| {
        labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64 * CHAR_W + 12.0
    };
    let left = label_w(&spec.row_labels);
    let top = label_w(&spec.col_labels) + 30.0;
    let grid_w = spec.cols as f64 * CELL;
    let grid_h = spec.rows as f64 * CELL;
    let legend_x = left + grid_w + 20.0;
    let legend_h = grid_h.max(120.0);
    let width = legend_x + 90.0;
    let height = top + legend_h + 20.0;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="18" font-size="13">{}</text>"#,
        left,
        xml_escape(&spec.title)
    )
    .unwrap();

    for (c, label) in spec.col_labels.iter().enumerate() {
        let x = left + (c as f64 + 0.5) * CELL + 4.0;
        let y = top - 6.0;
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" transform="rotate(-90 {x:.1} {y:.1})">{}</text>"#,
            xml_escape(label)
        )
        .unwrap();
    }
    for (r, label) in spec.row_labels.iter().enumerate() {
        let y = top + (r as f64 + 0.5) * CELL + 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            xml_escape(label)
        )
        .unwrap();
    }
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let v = spec.matrix[r * spec.cols + c];
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}"><title>{} → {}: {}</title></rect>"#,
                left + c as f64 * CELL,
                top + r as f64 * CELL,
                spec.color(v),
                xml_escape(&spec.row_labels[r]),
                xml_escape(&spec.col_labels[c]),
                v
            )
            .unwrap();
        }
    }

    let (lo, hi) = spec.domain();
    let steps = 24;
    let step_h = legend_h / steps as f64;
    for i in 0..steps {
        // top of the bar is the maximum
        let v = hi - (i as f64 + 0.5) / steps as f64 * (hi - lo);
        writeln!(
            s,
            r#"<rect x="{legend_x:.1}" y="{:.1}" width="14.0" height="{:.1}" fill="{}"/>"#,
            top + i as f64 * step_h,
            step_h + 0.5,
            spec.color(v)
        )
        .unwrap();
    }
    let tick_x = legend_x + 20.0;
    for (frac, v) in [(0.0, hi), (0.5, (hi + lo) / 2.0), (1.0, lo)] {
        writeln!(
            s,
            r#"<text x="{tick_x:.1}" y="{:.1}">{v:.4}</text>"#,
            top + frac * legend_h + 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Sidecar rows `row,row_label,col,col_label,value`.
pub fn heatmap_csv(spec: &HeatmapSpec) -> Result<String, RenderError> {
    spec.check()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "row_label", "col", "col_label", "value"])?;
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            w.write_record([
                r.to_string(),
                spec.row_labels[r].clone(),
                c.to_string(),
                spec.col_labels[c].clone(),
                spec.matrix[r * spec.cols + c].to_string(),
            ])?;
        }
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is utf-8"),
    )
}

pub fn sidecar_path(destination: &Path) -> PathBuf {
    destination.with_extension("csv")
}

/// Writes `destination` (SVG) and the CSV sidecar next to it.
pub fn render_heatmap(spec: &HeatmapSpec, destination: &Path) -> Result<(), RenderError> {
    let svg = heatmap_svg(spec)?;
    let csv = heatmap_csv(spec)?;
    fs::write(destination, svg)?;
    fs::write(sidecar_path(destination), csv)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// One value per layer; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
}

/// Smallest half-height of the y-range.
pub const MIN_Y_EXTENT: f64 = 0.01;

/// Plotted y-range: data range widened to contain `[-0.01, 0.01]`.
pub fn profile_y_range(series: &[Series]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.values.iter().flatten())
        .fold((-MIN_Y_EXTENT, MIN_Y_EXTENT), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    (lo, hi)
}

fn check_series(series: &[Series]) -> Result<usize, RenderError> {
    let first = series.first().ok_or(RenderError::EmptySeries)?;
    let len = first.values.len();
    if len == 0 {
        return Err(RenderError::EmptySeries);
    }
    for s in series {
        if s.values.len() != len {
            return Err(RenderError::SeriesLength {
                label: s.label.clone(),
                got: s.values.len(),
                expected: len,
            });
        }
    }
    Ok(len)
}

pub fn layer_profile_svg(series: &[Series], title: &str) -> Result<String, RenderError> {
    let layers = check_series(series)?;
    let (left, top, plot_w, plot_h) = (70.0, 40.0, 560.0, 300.0);
    let legend_h = 18.0 * series.len() as f64;
    let width = left + plot_w + 30.0;
    let height = top + plot_h + 50.0 + legend_h;
    let (y_lo, y_hi) = profile_y_range(series);
    let x_of = |i: usize| {
        if layers == 1 {
            left + plot_w / 2.0
        } else {
            left + i as f64 * plot_w / (layers - 1) as f64
        }
    };
    let y_of = |v: f64| top + (y_hi - v) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{left:.1}" y="20" font-size="13">{}</text>"#,
        xml_escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r##"<rect x="{left:.1}" y="{:.3}" width="{plot_w:.1}" height="{:.3}" fill="#eeeeee"/>"##,
        y_of(MIN_Y_EXTENT),
        y_of(-MIN_Y_EXTENT) - y_of(MIN_Y_EXTENT)
    )
    .unwrap();
    writeln!(s, r##"<rect x="{left:.1}" y="{top:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#444444"/>"##).unwrap();
    writeln!(
        s,
        r##"<line x1="{left:.1}" y1="{y:.3}" x2="{:.1}" y2="{y:.3}" stroke="#000000" stroke-width="1"/>"##,
        left + plot_w,
        y = y_of(0.0)
    )
    .unwrap();
    for v in [y_hi, MIN_Y_EXTENT, 0.0, -MIN_Y_EXTENT, y_lo] {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.3}" text-anchor="end">{v:.4}</text>"#,
            left - 6.0,
            y_of(v) + 4.0
        )
        .unwrap();
    }
    let tick_every = (layers / 16).max(1);
    for i in (0..layers).step_by(tick_every) {
        writeln!(
            s,
            r#"<text x="{:.3}" y="{:.1}" text-anchor="middle">{i}</text>"#,
            x_of(i),
            top + plot_h + 16.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 32.0
    )
    .unwrap();

    for (n, ser) in series.iter().enumerate() {
        let color = SERIES_COLORS[n % SERIES_COLORS.len()];
        let dash = SERIES_DASHES[(n / SERIES_COLORS.len()) % SERIES_DASHES.len()];
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        // split at undefined layers
        let mut segments: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
        for (i, v) in ser.values.iter().enumerate() {
            match v {
                Some(v) => segments.last_mut().unwrap().push((i, *v)),
                None => segments.push(Vec::new()),
            }
        }
        for seg in segments.iter().filter(|seg| !seg.is_empty()) {
            let points: Vec<String> = seg
                .iter()
                .map(|&(i, v)| format!("{:.3},{:.3}", x_of(i), y_of(v)))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash_attr}/>"#,
                points.join(" ")
            )
            .unwrap();
        }
        let ly = top + plot_h + 48.0 + n as f64 * 18.0;
        writeln!(
            s,
            r#"<line x1="{left:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5"{dash_attr}/>"#,
            left + 24.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + 30.0,
            ly + 4.0,
            xml_escape(&ser.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Sidecar with a `layer` column and one column per series.
pub fn layer_profile_csv(series: &[Series]) -> Result<String, RenderError> {
    let layers = check_series(series)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["layer".to_string()];
    header.extend(series.iter().map(|s| s.label.clone()));
    w.write_record(&header)?;
    for i in 0..layers {
        let mut row = vec![i.to_string()];
        row.extend(
            series
                .iter()
                .map(|s| s.values[i].map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is utf-8"),
    )
}

pub fn render_layer_profile(
    series: &[Series],
    title: &str,
    destination: &Path,
) -> Result<(), RenderError> {
    let svg = layer_profile_svg(series, title)?;
    let csv = layer_profile_csv(series)?;
    fs::write(destination, svg)?;
    fs::write(sidecar_path(destination), csv)?;
    Ok(())
}
