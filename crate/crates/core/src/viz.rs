//! Overlay images and metric curve plots.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::rgb_to_image;
use crate::error::{IoContext, Result};
use crate::types::{BinaryMask, ImageFrame, Point};

const PRED_COLOR: Rgb<u8> = Rgb([40, 230, 80]);
const GT_COLOR: Rgb<u8> = Rgb([60, 140, 255]);
const PRED_POINT: Rgb<u8> = Rgb([255, 230, 0]);
const GT_POINT: Rgb<u8> = Rgb([255, 40, 200]);

/// Inner boundary pixels of a mask (4-neighbourhood).
pub fn contour(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask[[r - 1, c]]
                || !mask[[r + 1, c]]
                || !mask[[r, c - 1]]
                || !mask[[r, c + 1]];
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn cross(img: &mut RgbImage, p: Point, arm: i64, color: Rgb<u8>) {
    let (x, y) = (p.x.floor() as i64, p.y.floor() as i64);
    for d in -arm..=arm {
        put(img, x + d, y, color);
        put(img, x, y + d, color);
    }
}

fn ring(img: &mut RgbImage, p: Point, radius: f64, color: Rgb<u8>) {
    let steps = (radius * 8.0).ceil().max(16.0) as usize;
    for i in 0..steps {
        let a = i as f64 / steps as f64 * std::f64::consts::TAU;
        put(
            img,
            (p.x + radius * a.cos()).round() as i64,
            (p.y + radius * a.sin()).round() as i64,
            color,
        );
    }
}

/// Frame with predicted and ground-truth contours and points drawn on top.
pub fn overlay(
    frame: &ImageFrame,
    pred_mask: &BinaryMask,
    gt_mask: Option<&BinaryMask>,
    pred_point: Option<Point>,
    gt_point: Option<Point>,
) -> RgbImage {
    let mut img = rgb_to_image(frame.pixels());
    let arm = (frame.height().min(frame.width()) / 64).max(2) as i64;
    if let Some(g) = gt_mask {
        for (r, c) in contour(g) {
            img.put_pixel(c as u32, r as u32, GT_COLOR);
        }
    }
    for (r, c) in contour(pred_mask) {
        img.put_pixel(c as u32, r as u32, PRED_COLOR);
    }
    if let Some(p) = gt_point {
        ring(&mut img, p, arm as f64 + 1.0, GT_POINT);
    }
    if let Some(p) = pred_point {
        cross(&mut img, p, arm, PRED_POINT);
    }
    img
}

/// One named series for [`line_plot`].
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// SVG line chart of the given series against a shared x axis.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    if !all.is_empty() {
        x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
        y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"##,
            left + pw,
            left - 6.0,
            sy(fy) + 4.0,
            y = sy(fy)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.1}</text>"#,
            sx(fx),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_plot(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    std::fs::write(path, line_plot(title, x_label, series)).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn contour_of_block() {
        let mut m = Array2::from_elem((6, 6), false);
        for r in 1..5 {
            for c in 1..5 {
                m[[r, c]] = true;
            }
        }
        let c = contour(&m);
        assert_eq!(c.len(), 12);
        assert!(!c.contains(&(2, 2)));
    }

    #[test]
    fn overlay_marks_pixels() {
        let frame = ImageFrame::new(Array3::zeros((32, 32, 3)), 0, "c").unwrap();
        let mut m = Array2::from_elem((32, 32), false);
        m[[10, 10]] = true;
        let img = overlay(&frame, &m, None, Some(Point::new(20.0, 20.0)), None);
        assert_eq!(*img.get_pixel(10, 10), PRED_COLOR);
        assert_eq!(*img.get_pixel(20, 20), PRED_POINT);
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 0, 0]));
    }

    #[test]
    fn plot_has_one_polyline_per_series() {
        let s = line_plot(
            "iou",
            "epoch",
            &[
                Series {
                    name: "a".into(),
                    points: vec![(1.0, 0.2), (2.0, 0.4)],
                },
                Series {
                    name: "b".into(),
                    points: vec![(1.0, 0.1)],
                },
            ],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.ends_with("</svg>\n"));
        assert!(line_plot("empty", "x", &[]).contains("<svg"));
    }
}
