//! Minimal PNG charts (no text): axes, polylines and bars on a white canvas.
//! Series colours follow `PALETTE` in order.

use std::path::Path;

use image::{Rgb, RgbImage};
use pfcpgan_core::{Error, Result};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 32;
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([127, 127, 127]),
];
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    line(&mut img, (MARGIN, H - MARGIN), (W - MARGIN, H - MARGIN), AXIS);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, H - MARGIN), AXIS);
    img
}

fn line(img: &mut RgbImage, a: (u32, u32), b: (u32, u32), c: Rgb<u8>) {
    let (mut x, mut y) = (i64::from(a.0), i64::from(a.1));
    let (x1, y1) = (i64::from(b.0), i64::from(b.1));
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
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

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// One polyline per series over a shared auto-scaled frame.
pub fn line_chart(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let all = || series.iter().flat_map(|(_, pts)| pts.iter());
    let (x0, x1) = range(all().map(|p| p.0));
    let (y0, y1) = range(all().map(|p| p.1));
    let span_w = f64::from(W - 2 * MARGIN);
    let span_h = f64::from(H - 2 * MARGIN);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN + ((x - x0) / (x1 - x0) * span_w).round() as u32,
            H - MARGIN - ((y - y0) / (y1 - y0) * span_h).round() as u32,
        )
    };
    let mut img = canvas();
    for (i, (_, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let finite: Vec<_> = pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for w in finite.windows(2) {
            line(&mut img, to_px(*w[0]), to_px(*w[1]), colour);
        }
        if let [only] = finite.as_slice() {
            let (px, py) = to_px(**only);
            img.put_pixel(px, py, colour);
        }
    }
    save(&img, path)
}

/// Bars on a `[0, 1]` scale; missing values leave a gap.
pub fn bar_chart(path: &Path, bars: &[(String, Option<f64>)]) -> Result<()> {
    let mut img = canvas();
    let slot = (W - 2 * MARGIN) / bars.len().max(1) as u32;
    let span_h = f64::from(H - 2 * MARGIN);
    for (i, (_, value)) in bars.iter().enumerate() {
        let Some(v) = value else { continue };
        let h = (v.clamp(0.0, 1.0) * span_h).round() as u32;
        let left = MARGIN + i as u32 * slot + slot / 6;
        let right = MARGIN + (i as u32 + 1) * slot - slot / 6;
        for x in left..right {
            for y in (H - MARGIN - h)..(H - MARGIN) {
                img.put_pixel(x, y, PALETTE[0]);
            }
        }
    }
    save(&img, path)
}
