//! Line charts as SVG and PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult, InPhase};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f64 = 50.0;
const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn of(chart: &Chart) -> Option<Self> {
        let pts: Vec<(f64, f64)> = chart
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if pts.is_empty() {
            return None;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        Some(Self { x0, x1, y0, y1 })
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = WIDTH as f64 - 2.0 * MARGIN;
        let h = HEIGHT as f64 - 2.0 * MARGIN;
        (
            MARGIN + (x - self.x0) / (self.x1 - self.x0) * w,
            HEIGHT as f64 - MARGIN - (y - self.y0) / (self.y1 - self.y0) * h,
        )
    }
}

pub fn render_svg(chart: &Chart) -> CliResult<String> {
    let frame = Frame::of(chart).ok_or_else(|| CliError::new("EmptyPlot", "plot", format!("`{}` has no data", chart.title)))?;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        WIDTH / 2,
        escape(&chart.title)
    );
    let (ax, ay) = frame.map(frame.x0, frame.y0);
    let (bx, by) = frame.map(frame.x1, frame.y1);
    svg += &format!("<polyline fill=\"none\" stroke=\"black\" points=\"{ax:.1},{by:.1} {ax:.1},{ay:.1} {bx:.1},{ay:.1}\"/>\n");
    svg += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (ax + bx) / 2.0,
        HEIGHT as f64 - 12.0,
        escape(&chart.x_label)
    );
    svg += &format!(
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (ay + by) / 2.0,
        (ay + by) / 2.0,
        escape(&chart.y_label)
    );
    for (v, anchor, x, y) in [
        (frame.y0, "end", ax - 4.0, ay),
        (frame.y1, "end", ax - 4.0, by + 4.0),
        (frame.x0, "middle", ax, ay + 14.0),
        (frame.x1, "middle", bx, ay + 14.0),
    ] {
        svg += &format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            tick(v)
        );
    }
    for (i, s) in chart.series.iter().enumerate() {
        let [r, g, b] = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, y);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        svg += &format!("<polyline fill=\"none\" stroke=\"rgb({r},{g},{b})\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" "));
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"rgb({r},{g},{b})\">{}</text>\n",
            bx - 120.0,
            by + 14.0 * (i as f64 + 1.0),
            escape(&s.label)
        );
    }
    svg += "</svg>\n";
    Ok(svg)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
            let (px, py) = (x + dx, y + dy);
            if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Raster version of the chart: axes and series lines, without text.
pub fn render_png(chart: &Chart) -> CliResult<RgbImage> {
    let frame = Frame::of(chart).ok_or_else(|| CliError::new("EmptyPlot", "plot", format!("`{}` has no data", chart.title)))?;
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let origin = frame.map(frame.x0, frame.y0);
    let corner = frame.map(frame.x1, frame.y1);
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, origin, (origin.0, corner.1), black);
    draw_line(&mut img, origin, (corner.0, origin.1), black);
    for (i, s) in chart.series.iter().enumerate() {
        let color = Rgb(COLORS[i % COLORS.len()]);
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| frame.map(x, y))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        if let [p] = pts[..] {
            draw_line(&mut img, p, p, color);
        }
    }
    Ok(img)
}

/// Write `<stem>.svg` and `<stem>.png` under `dir`; returns the file names.
pub fn write_chart(dir: &Path, stem: &str, chart: &Chart) -> CliResult<[String; 2]> {
    std::fs::create_dir_all(dir).in_phase("plot")?;
    let svg = format!("{stem}.svg");
    let png = format!("{stem}.png");
    std::fs::write(dir.join(&svg), render_svg(chart)?).in_phase("plot")?;
    render_png(chart)?
        .save(dir.join(&png))
        .map_err(|e| CliError::new("PlotError", "plot", e.to_string()))?;
    Ok([svg, png])
}
