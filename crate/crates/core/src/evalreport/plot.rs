//! Line plots as SVG (with labels) and PNG (raster, legend as swatches).
//! Every figure also gets a CSV of exactly the plotted points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::losses::{bsr_term, BsrConfig};

const W: u32 = 720;
const H: u32 = 440;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Read `(x, y)` pairs from a metrics CSV, skipping rows where `y` is empty.
pub fn read_series(path: &Path, x_col: &str, y_col: &str, label: &str) -> Result<Series> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(format!("{name} (in {})", path.display())))
    };
    let (xi, yi) = (find(x_col)?, find(y_col)?);
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (xs, ys) = (&rec[xi], &rec[yi]);
        if ys.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format(path, format!("bad number `{s}`: {e}")))
        };
        points.push((parse(xs)?, parse(ys)?));
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(fig: &Figure) -> Frame {
        let pts = fig.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            if x.is_finite() && y.is_finite() {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        Frame {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let pw = W as f64 - MARGIN_L - MARGIN_R;
        let ph = H as f64 - MARGIN_T - MARGIN_B;
        (
            MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * pw,
            MARGIN_T + (1.0 - (y - self.y0) / (self.y1 - self.y0)) * ph,
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(fig: &Figure) -> String {
    let f = Frame::fit(fig);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (ax0, ay0) = f.px(f.x0, f.y0);
    let (ax1, ay1) = f.px(f.x1, f.y1);
    let _ = writeln!(
        s,
        r#"<rect x="{ax0:.1}" y="{ay1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        ax1 - ax0,
        ay0 - ay1
    );
    for k in 0..=4 {
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let (_, py) = f.px(f.x0, fy);
        let (px, _) = f.px(fx, f.y0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, ax0 - 4.0, py + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{fx:.3}</text>"#, ay0 + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (ax0 + ax1) / 2.0, escape(&fig.title));
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (ax0 + ax1) / 2.0, H as f64 - 10.0, escape(&fig.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(&fig.y_label)
    );
    for (i, series) in fig.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let color = format!("rgb({},{},{})", c[0], c[1], c[2]);
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = f.px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(&series.label),
            pts.join(" ")
        );
        let ly = MARGIN_T + 18.0 * i as f64 + 8.0;
        let lx = W as f64 - MARGIN_R + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&series.label));
    }
    s.push_str("</svg>\n");
    s
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3], thick: i64) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        for dx in -(thick / 2)..=(thick / 2) {
            for dy in -(thick / 2)..=(thick / 2) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                    img.put_pixel(px as u32, py as u32, Rgb(c));
                }
            }
        }
    }
}

pub fn render_png(fig: &Figure) -> RgbImage {
    let f = Frame::fit(fig);
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (ax0, ay0) = f.px(f.x0, f.y0);
    let (ax1, ay1) = f.px(f.x1, f.y1);
    let grey = [200, 200, 200];
    for k in 1..4 {
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let (_, py) = f.px(f.x0, fy);
        draw_line(&mut img, (ax0, py), (ax1, py), grey, 1);
    }
    for (a, b) in [((ax0, ay0), (ax1, ay0)), ((ax0, ay1), (ax1, ay1)), ((ax0, ay0), (ax0, ay1)), ((ax1, ay0), (ax1, ay1))] {
        draw_line(&mut img, a, b, [0, 0, 0], 1);
    }
    for (i, series) in fig.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = series
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| f.px(x, y))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], c, 2);
        }
        if pts.len() == 1 {
            draw_line(&mut img, pts[0], pts[0], c, 4);
        }
        let ly = MARGIN_T + 18.0 * i as f64 + 8.0;
        let lx = W as f64 - MARGIN_R + 12.0;
        draw_line(&mut img, (lx, ly), (lx + 20.0, ly), c, 3);
    }
    img
}

/// Long-format CSV: label, x, y. Numbers use shortest round-trip formatting.
pub fn series_csv(fig: &Figure) -> String {
    let mut s = String::from("label,x,y\n");
    for series in &fig.series {
        for (x, y) in &series.points {
            let _ = writeln!(s, "{},{x},{y}", series.label.replace(',', ";"));
        }
    }
    s
}

/// Write `<stem>.svg`, `<stem>.png` and `<stem>.csv` into `dir`.
pub fn write_figure(fig: &Figure, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&svg, render_svg(fig)).map_err(|e| Error::io(&svg, e))?;
    let png = dir.join(format!("{stem}.png"));
    render_png(fig).save(&png)?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, series_csv(fig)).map_err(|e| Error::io(&csv, e))?;
    Ok(vec![svg, png, csv])
}

/// mAP-vs-epoch curves, one per run. Each run is `(label, metrics.csv)`.
pub fn plot_trends(runs: &[(String, PathBuf)], out_dir: &Path, stem: &str, title: &str) -> Result<Vec<PathBuf>> {
    let mut series = Vec::new();
    for (label, path) in runs {
        let s = read_series(path, "epoch", "target_mAP", label)?;
        if s.points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{} has {} evaluated epochs; need at least 2",
                path.display(),
                s.points.len()
            )));
        }
        series.push(s);
    }
    write_figure(
        &Figure {
            title: title.to_string(),
            x_label: "epoch".into(),
            y_label: "target mAP".into(),
            series,
        },
        out_dir,
        stem,
    )
}

/// Curves of the focal background regularizer over p ∈ (0, 1).
pub fn bsr_curves(settings: &[(f64, f64)], samples: usize) -> Figure {
    let series = settings
        .iter()
        .map(|&(t, gamma)| {
            let cfg = BsrConfig {
                t,
                gamma,
                ..Default::default()
            };
            Series {
                label: format!("t={t} gamma={gamma}"),
                points: (0..=samples)
                    .map(|i| {
                        let p = 0.001 + 0.998 * i as f64 / samples as f64;
                        (p, bsr_term(p, &cfg).0)
                    })
                    .collect(),
            }
        })
        .collect();
    Figure {
        title: "background score regularizer".into(),
        x_label: "background probability p".into(),
        y_label: "loss".into(),
        series,
    }
}
