//! Titration figures: one panel per (outcome, test set), metric against
//! training ratio on a log axis, one line per initialization with CI bars.
//!
//! Each panel is written as SVG (with labels) and as a PNG rasterized here
//! without text, so both are byte-deterministic for a given results table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use echoclr::finetune::ResultRow;
use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 480;
pub const HEIGHT: u32 = 360;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [140, 86, 75],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    Auroc,
    Aupr,
}

impl PlotMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auroc" => Some(Self::Auroc),
            "aupr" => Some(Self::Aupr),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Auroc => "AUROC",
            Self::Aupr => "AUPR",
        }
    }

    fn triple(self, r: &ResultRow) -> [f64; 3] {
        match self {
            Self::Auroc => [r.auroc, r.auroc_lo, r.auroc_hi],
            Self::Aupr => [r.aupr, r.aupr_lo, r.aupr_hi],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub ratio: f64,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub init: String,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub outcome: String,
    pub test_set: String,
    pub metric: PlotMetric,
    pub series: Vec<Series>,
}

/// Group rows into panels; series and points are sorted so output does not
/// depend on row order. Rows with a non-finite metric are skipped.
pub fn panels(rows: &[ResultRow], metric: PlotMetric) -> Vec<Panel> {
    let mut grouped: BTreeMap<(String, String), BTreeMap<String, Vec<Point>>> = BTreeMap::new();
    for r in rows {
        let [value, lo, hi] = metric.triple(r);
        let entry = grouped
            .entry((r.outcome.clone(), r.test_set.clone()))
            .or_default()
            .entry(r.init.clone())
            .or_default();
        if value.is_finite() && r.ratio > 0.0 {
            entry.push(Point {
                ratio: r.ratio,
                value,
                lo: if lo.is_finite() { lo } else { value },
                hi: if hi.is_finite() { hi } else { value },
            });
        }
    }
    grouped
        .into_iter()
        .map(|((outcome, test_set), by_init)| Panel {
            outcome,
            test_set,
            metric,
            series: by_init
                .into_iter()
                .map(|(init, mut points)| {
                    points.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
                    Series { init, points }
                })
                .collect(),
        })
        .collect()
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    ratios: Vec<f64>,
}

impl Frame {
    fn of(panel: &Panel) -> Self {
        let mut ratios: Vec<f64> = panel
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.ratio))
            .collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        let logs: Vec<f64> = ratios.iter().map(|r| r.log10()).collect();
        let (mut x_lo, mut x_hi) = match (logs.first(), logs.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => (-2.0, 0.0),
        };
        if x_hi - x_lo < 1e-9 {
            x_lo -= 0.5;
            x_hi += 0.5;
        }
        let pad = 0.05 * (x_hi - x_lo);
        let lows = panel.series.iter().flat_map(|s| s.points.iter().map(|p| p.lo));
        let y_min = lows.fold(0.5_f64, f64::min);
        let y_lo = (y_min * 10.0).floor() / 10.0;
        Self {
            x_lo: x_lo - pad,
            x_hi: x_hi + pad,
            y_lo: y_lo.max(0.0),
            y_hi: 1.0,
            ratios,
        }
    }

    fn x(&self, ratio: f64) -> f64 {
        LEFT + (ratio.log10() - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH as f64 - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(self.y_lo, self.y_hi);
        HEIGHT as f64 - BOTTOM - (v - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT as f64 - TOP - BOTTOM)
    }

    fn y_ticks(&self) -> Vec<f64> {
        let n = ((self.y_hi - self.y_lo) * 10.0).round() as usize;
        (0..=n).map(|i| self.y_lo + i as f64 * 0.1).collect()
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(panel: &Panel) -> String {
    let f = Frame::of(panel);
    let (x0, x1) = (LEFT, WIDTH as f64 - RIGHT);
    let (y0, y1) = (TOP, HEIGHT as f64 - BOTTOM);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{} / {}</text>\n",
        (x0 + x1) / 2.0,
        escape(&panel.outcome),
        escape(&panel.test_set)
    ));
    for t in f.y_ticks() {
        let y = f.y(t);
        s.push_str(&format!(
            "<line x1=\"{x0:.2}\" y1=\"{y:.2}\" x2=\"{x1:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{t:.1}</text>\n",
            x0 - 6.0,
            y + 4.0
        ));
    }
    for &r in &f.ratios {
        let x = f.x(r);
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y1:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>\n<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            y1 + 4.0,
            y1 + 16.0,
            format_ratio(r)
        ));
    }
    s.push_str(&format!(
        "<polyline points=\"{x0:.2},{y0:.2} {x0:.2},{y1:.2} {x1:.2},{y1:.2}\" fill=\"none\" stroke=\"#000000\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">training ratio</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT as f64 - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        panel.metric.label()
    ));
    for (i, series) in panel.series.iter().enumerate() {
        let color = hex(PALETTE[i % PALETTE.len()]);
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", f.x(p.ratio), f.y(p.value)))
            .collect();
        if pts.len() > 1 {
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                pts.join(" ")
            ));
        }
        for p in &series.points {
            let (x, lo, hi) = (f.x(p.ratio), f.y(p.lo), f.y(p.hi));
            s.push_str(&format!(
                "<path d=\"M{:.2},{hi:.2}H{:.2}M{x:.2},{hi:.2}V{lo:.2}M{:.2},{lo:.2}H{:.2}\" stroke=\"{color}\" fill=\"none\"/>\n<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0,
                f.y(p.value)
            ));
        }
        let ly = TOP + 8.0 + 18.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            x1 + 10.0,
            x1 + 30.0,
            x1 + 36.0,
            ly + 4.0,
            escape(&series.init)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn format_ratio(r: f64) -> String {
    let s = format!("{r:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Canvas(RgbImage);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.0.width() && (y as u32) < self.0.height() {
            self.0.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    /// Bresenham line, optionally thickened by one pixel below and right.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3], thick: bool) {
        let (mut x, mut y) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if thick {
                self.put(x + 1, y, c);
                self.put(x, y + 1, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn dot(&mut self, center: (f64, f64), c: [u8; 3]) {
        let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
        for dy in -3..=3_i64 {
            for dx in -3..=3_i64 {
                if dx * dx + dy * dy <= 9 {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }
}

pub fn render_png(panel: &Panel) -> RgbImage {
    let f = Frame::of(panel);
    let (x0, x1) = (LEFT, WIDTH as f64 - RIGHT);
    let (y0, y1) = (TOP, HEIGHT as f64 - BOTTOM);
    let mut cv = Canvas(RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])));
    for t in f.y_ticks() {
        let y = f.y(t);
        cv.line((x0, y), (x1, y), [221, 221, 221], false);
        cv.line((x0 - 4.0, y), (x0, y), [0, 0, 0], false);
    }
    for &r in &f.ratios {
        let x = f.x(r);
        cv.line((x, y1), (x, y1 + 4.0), [0, 0, 0], false);
    }
    cv.line((x0, y0), (x0, y1), [0, 0, 0], false);
    cv.line((x0, y1), (x1, y1), [0, 0, 0], false);
    for (i, series) in panel.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in series.points.windows(2) {
            cv.line(
                (f.x(w[0].ratio), f.y(w[0].value)),
                (f.x(w[1].ratio), f.y(w[1].value)),
                c,
                true,
            );
        }
        for p in &series.points {
            let x = f.x(p.ratio);
            let (lo, hi) = (f.y(p.lo), f.y(p.hi));
            cv.line((x, hi), (x, lo), c, false);
            cv.line((x - 4.0, hi), (x + 4.0, hi), c, false);
            cv.line((x - 4.0, lo), (x + 4.0, lo), c, false);
            cv.dot((x, f.y(p.value)), c);
        }
        let ly = TOP + 8.0 + 18.0 * i as f64;
        cv.line((x1 + 10.0, ly), (x1 + 30.0, ly), c, true);
    }
    cv.0
}

pub fn file_stem(panel: &Panel) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("titration_{}_{}", clean(&panel.outcome), clean(&panel.test_set))
}

/// Write `<stem>.svg` and `<stem>.png` for every panel; returns the paths.
pub fn write_panels(panels: &[Panel], out_dir: &Path) -> echoclr::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for p in panels {
        let stem = file_stem(p);
        let svg = out_dir.join(format!("{stem}.svg"));
        echoclr::model::write_atomic(&svg, render_svg(p).as_bytes())?;
        let png = out_dir.join(format!("{stem}.png"));
        let mut bytes = Vec::new();
        render_png(p)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| echoclr::Error::Image(e.to_string()))?;
        echoclr::model::write_atomic(&png, &bytes)?;
        written.push(svg);
        written.push(png);
    }
    Ok(written)
}
