//! Tiny PNG chart painter: enough to plot a loss curve or a handful of bars
//! without pulling in a plotting stack. Everything is drawn directly into an
//! `RgbImage` — axes, a 5x7 bitmap font for numeric labels, and the series.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN_LEFT: u32 = 70;
const MARGIN_RIGHT: u32 = 20;
const MARGIN_TOP: u32 = 20;
const MARGIN_BOTTOM: u32 = 40;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const SERIES: Rgb<u8> = Rgb([30, 90, 200]);
const BAR: Rgb<u8> = Rgb([70, 130, 80]);

/// 5x7 glyphs for the characters numeric labels can contain. Each byte is a
/// row, low five bits left-to-right.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ' ' => [0x00; 7],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..5u32 {
                    if row & (0x10 >> dx) != 0 {
                        let (px, py) = (cx + dx, y + dy as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, AXIS);
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round();
        let y = (y0 + (y1 - y0) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Frame {
        let (y_min, y_max) = if y_max > y_min {
            (y_min, y_max)
        } else {
            // Flat series: open a unit window around it so division stays sane.
            (y_min - 0.5, y_min + 0.5)
        };
        let (x_min, x_max) = if x_max > x_min { (x_min, x_max) } else { (x_min - 0.5, x_min + 0.5) };
        Frame { x_min, x_max, y_min, y_max }
    }

    fn px(&self, x: f64) -> f64 {
        let plot_w = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
        MARGIN_LEFT as f64 + (x - self.x_min) / (self.x_max - self.x_min) * plot_w
    }

    fn py(&self, y: f64) -> f64 {
        let plot_h = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
        MARGIN_TOP as f64 + (1.0 - (y - self.y_min) / (self.y_max - self.y_min)) * plot_h
    }

    fn paint_axes(&self, img: &mut RgbImage) {
        let x0 = MARGIN_LEFT as f64;
        let x1 = (WIDTH - MARGIN_RIGHT) as f64;
        let y0 = MARGIN_TOP as f64;
        let y1 = (HEIGHT - MARGIN_BOTTOM) as f64;
        draw_line(img, x0, y0, x0, y1, AXIS);
        draw_line(img, x0, y1, x1, y1, AXIS);
        draw_text(img, 4, MARGIN_TOP, &format_tick(self.y_max));
        draw_text(img, 4, HEIGHT - MARGIN_BOTTOM - 7, &format_tick(self.y_min));
        draw_text(img, MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM + 6, &format_tick(self.x_min));
        let right_label = format_tick(self.x_max);
        let label_w = right_label.chars().count() as u32 * 6;
        draw_text(
            img,
            (WIDTH - MARGIN_RIGHT).saturating_sub(label_w),
            HEIGHT - MARGIN_BOTTOM + 6,
            &right_label,
        );
    }
}

/// Polyline through `(x, y)` points, e.g. a loss-per-step curve.
pub fn line_chart(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    if points.is_empty() {
        return img;
    }
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::new(x_min, x_max, y_min, y_max);
    frame.paint_axes(&mut img);
    for pair in points.windows(2) {
        draw_line(
            &mut img,
            frame.px(pair[0].0),
            frame.py(pair[0].1),
            frame.px(pair[1].0),
            frame.py(pair[1].1),
            SERIES,
        );
    }
    img
}

/// Labeled bars, e.g. a metric per depth range. Bars with no value are left
/// empty but keep their slot and label.
pub fn bar_chart(bars: &[(String, Option<f64>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    if bars.is_empty() {
        return img;
    }
    let y_max = bars
        .iter()
        .filter_map(|b| b.1)
        .fold(0.0f64, f64::max);
    let frame = Frame::new(0.0, bars.len() as f64, 0.0, y_max);
    frame.paint_axes(&mut img);
    let slot = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64 / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let left = frame.px(i as f64 + 0.15);
        let right = frame.px(i as f64 + 0.85);
        if let Some(v) = *value {
            let top = frame.py(v);
            let base = frame.py(0.0);
            let mut x = left;
            while x <= right {
                draw_line(&mut img, x, top, x, base, BAR);
                x += 1.0;
            }
        }
        let label_w = label.chars().count() as f64 * 6.0;
        let lx = (MARGIN_LEFT as f64 + slot * (i as f64 + 0.5) - label_w / 2.0).max(0.0);
        draw_text(&mut img, lx as u32, HEIGHT - MARGIN_BOTTOM + 6, label);
    }
    img
}
