//! Plain-text SVG figures. Output depends only on the input values, so
//! identical data gives identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::{ExperimentError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// One curve, optionally with a shaded `[lower, upper]` band.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

impl Series {
    pub fn new(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            x,
            y,
            band: None,
        }
    }

    pub fn with_band(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.band = Some((lower, upper));
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if n == 0 {
            return Err(ExperimentError::Plot(format!(
                "series {:?} is empty",
                self.label
            )));
        }
        let band_ok = self
            .band
            .as_ref()
            .is_none_or(|(lo, hi)| lo.len() == n && hi.len() == n);
        if self.y.len() != n || !band_ok {
            return Err(ExperimentError::Plot(format!(
                "series {:?} has mismatched lengths",
                self.label
            )));
        }
        Ok(())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let band = self.band.iter().flat_map(|(lo, hi)| lo.iter().chain(hi));
        self.y.iter().chain(band).copied()
    }
}

/// Scalar field sampled on a regular grid, drawn as iso-lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Contours {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// `values[j][i]` at `(x_i, y_j)`.
    pub values: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
}

impl Contours {
    /// Samples `f` on an `nx × ny` grid, with iso-values at equally spaced
    /// quantiles of the samples.
    pub fn sample(
        x_range: (f64, f64),
        y_range: (f64, f64),
        nx: usize,
        ny: usize,
        levels: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let coord =
            |r: (f64, f64), k: usize, n: usize| r.0 + (r.1 - r.0) * k as f64 / (n - 1) as f64;
        let values: Vec<Vec<f64>> = (0..ny)
            .map(|j| {
                let y = coord(y_range, j, ny);
                (0..nx).map(|i| f(coord(x_range, i, nx), y)).collect()
            })
            .collect();
        let mut sorted: Vec<f64> = values
            .iter()
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        sorted.sort_by(f64::total_cmp);
        let mut levels: Vec<f64> = (1..=levels)
            .filter_map(|k| {
                let idx = (sorted.len() * k) / (levels + 1);
                sorted.get(idx).copied()
            })
            .collect();
        levels.dedup();
        Self {
            x_range,
            y_range,
            values,
            levels,
        }
    }

    /// Marching-squares segments for one level, in data coordinates.
    pub fn segments(&self, level: f64) -> Vec<[(f64, f64); 2]> {
        let ny = self.values.len();
        let nx = self.values.first().map_or(0, Vec::len);
        if nx < 2 || ny < 2 {
            return Vec::new();
        }
        let dx = (self.x_range.1 - self.x_range.0) / (nx - 1) as f64;
        let dy = (self.y_range.1 - self.y_range.0) / (ny - 1) as f64;
        let mut out = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                // corners counter-clockwise from bottom-left
                let corners = [
                    (i, j, self.values[j][i]),
                    (i + 1, j, self.values[j][i + 1]),
                    (i + 1, j + 1, self.values[j + 1][i + 1]),
                    (i, j + 1, self.values[j + 1][i]),
                ];
                if corners.iter().any(|c| !c.2.is_finite()) {
                    continue;
                }
                let mut crossings = Vec::with_capacity(4);
                for e in 0..4 {
                    let (i0, j0, v0) = corners[e];
                    let (i1, j1, v1) = corners[(e + 1) % 4];
                    if (v0 < level) != (v1 < level) {
                        let t = (level - v0) / (v1 - v0);
                        let gx = i0 as f64 + t * (i1 as f64 - i0 as f64);
                        let gy = j0 as f64 + t * (j1 as f64 - j0 as f64);
                        crossings.push((self.x_range.0 + gx * dx, self.y_range.0 + gy * dy));
                    }
                }
                // 2 crossings: one segment; 4 (saddle cell): pair consecutively
                for pair in crossings.chunks_exact(2) {
                    out.push([pair[0], pair[1]]);
                }
            }
        }
        out
    }
}

/// A point marker with a legend entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Marker {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub contours: Option<Contours>,
    pub markers: Vec<Marker>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    log_y: bool,
    floor: f64,
}

impl Frame {
    fn ty(&self, v: f64) -> f64 {
        if self.log_y {
            v.max(self.floor).log10()
        } else {
            v
        }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        let v = self.ty(v);
        HEIGHT - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.02 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = 0.5 * lo.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

/// Round tick positions covering `[lo, hi]` at a 1/2/5 spacing.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![lo];
    }
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn points(frame: &Frame, x: &[f64], y: &[f64]) -> String {
    let mut s = String::new();
    for (k, (a, b)) in x.iter().zip(y).enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", frame.px(*a), frame.py(*b));
    }
    s
}

/// Renders the figure: one `<polyline>` per series, one `<polygon>` per
/// band, one `<path>` per contour level.
pub fn render(fig: &Figure) -> Result<String> {
    if fig.series.is_empty() && fig.contours.is_none() {
        return Err(ExperimentError::Plot("nothing to plot".into()));
    }
    for s in &fig.series {
        s.validate()?;
    }
    let all_x = fig.series.iter().flat_map(|s| s.x.iter().copied());
    let all_y: Vec<f64> = fig
        .series
        .iter()
        .flat_map(Series::values)
        .chain(fig.markers.iter().map(|m| m.y))
        .filter(|v| v.is_finite())
        .collect();
    let mut xr = all_x
        .chain(fig.markers.iter().map(|m| m.x))
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    let floor = all_y
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    let transform = |v: f64| if fig.log_y { v.max(floor).log10() } else { v };
    let mut yr = all_y
        .iter()
        .map(|v| transform(*v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if let Some(c) = &fig.contours {
        xr = (xr.0.min(c.x_range.0), xr.1.max(c.x_range.1));
        let (lo, hi) = (transform(c.y_range.0), transform(c.y_range.1));
        yr = (yr.0.min(lo), yr.1.max(hi));
    }
    if !(xr.0.is_finite() && yr.0.is_finite()) {
        return Err(ExperimentError::Plot("no finite data".into()));
    }
    let frame = Frame {
        x: if fig.contours.is_some() {
            xr
        } else {
            padded(xr.0, xr.1)
        },
        y: if fig.contours.is_some() {
            yr
        } else {
            padded(yr.0, yr.1)
        },
        log_y: fig.log_y,
        floor,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        (x0 + x1) / 2.0,
        TOP - 15.0,
        escape(&fig.title)
    );

    // axes and ticks
    let _ = writeln!(
        svg,
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for t in nice_ticks(frame.x.0, frame.x.1, 6) {
        let px = frame.px(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(frame.y.0, frame.y.1, 6) {
        let py =
            HEIGHT - BOTTOM - (t - frame.y.0) / (frame.y.1 - frame.y.0) * (HEIGHT - TOP - BOTTOM);
        let label = if fig.log_y {
            format!("1e{}", fmt_tick(t))
        } else {
            fmt_tick(t)
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            label
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&fig.y_label)
    );

    if let Some(c) = &fig.contours {
        for level in &c.levels {
            let mut d = String::new();
            for [a, b] in c.segments(*level) {
                let _ = write!(
                    d,
                    "M{:.2},{:.2}L{:.2},{:.2}",
                    frame.px(a.0),
                    frame.py(a.1),
                    frame.px(b.0),
                    frame.py(b.1)
                );
            }
            if !d.is_empty() {
                let _ = writeln!(
                    svg,
                    r##"<path class="contour" d="{d}" fill="none" stroke="#bbbbbb" stroke-width="0.8"/>"##
                );
            }
        }
    }

    for (i, s) in fig.series.iter().enumerate() {
        if let Some((lo, hi)) = &s.band {
            let mut pts = points(&frame, &s.x, hi);
            let rx: Vec<f64> = s.x.iter().rev().copied().collect();
            let rl: Vec<f64> = lo.iter().rev().copied().collect();
            pts.push(' ');
            pts.push_str(&points(&frame, &rx, &rl));
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{pts}" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
                color(i)
            );
        }
    }
    for (i, s) in fig.series.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<polyline class="series" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points(&frame, &s.x, &s.y),
            color(i)
        );
    }
    for m in &fig.markers {
        let _ = writeln!(
            svg,
            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="black"/>"#,
            frame.px(m.x),
            frame.py(m.y)
        );
    }

    // legend
    let lx = WIDTH - RIGHT + 15.0;
    let mut ly = TOP + 10.0;
    for (i, s) in fig.series.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            color(i),
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
        ly += 18.0;
    }
    for m in &fig.markers {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{ly:.2}" r="4" fill="black"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 10.0,
            lx + 26.0,
            ly + 4.0,
            escape(&m.label)
        );
        ly += 18.0;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders and writes `fig` to `path`.
pub fn emit_plot(fig: &Figure, path: &Path) -> Result<()> {
    let svg = render(fig)?;
    std::fs::write(path, svg).map_err(|e| ExperimentError::io(path, e))
}
