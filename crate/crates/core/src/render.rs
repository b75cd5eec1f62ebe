//! Static detection rendering: box outlines with a small bitmap label
//! (`class:score`) in a per-class colour.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::decode::DetectionSet;
use crate::error::{Error, Result};

pub const BOX_THICKNESS: i64 = 2;
const GLYPH_W: i64 = 3;
const GLYPH_H: i64 = 5;

/// 3×5 glyphs, one row per byte (low three bits, MSB on the left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => return None,
    })
}

/// Deterministic, well-separated colour for a class id (golden-ratio hue
/// walk).
pub fn class_color(class_id: usize) -> Rgb<u8> {
    let h = (class_id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    Rgb([q(r), q(g), q(b)])
}

/// Label text drawn for a detection.
pub fn label_text(class_id: usize, score: f64) -> String {
    format!("{class_id}:{score:.2}")
}

struct Clip {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

fn put(img: &mut RgbImage, clip: &Clip, x: i64, y: i64, c: Rgb<u8>) {
    if x >= clip.x0 && x < clip.x1 && y >= clip.y0 && y < clip.y1 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Draw detections onto a copy of `image`. Everything drawn for a box stays
/// inside that box's pixel footprint.
pub fn draw_detections(image: &RgbImage, dets: &DetectionSet) -> RgbImage {
    let mut img = image.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    // lowest score first so the best detection ends up on top
    let mut order: Vec<_> = dets.detections.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    for d in order {
        let x0 = (d.bbox.x1.floor() as i64).clamp(0, w);
        let y0 = (d.bbox.y1.floor() as i64).clamp(0, h);
        let x1 = (d.bbox.x2.ceil() as i64).clamp(0, w);
        let y1 = (d.bbox.y2.ceil() as i64).clamp(0, h);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let clip = Clip { x0, y0, x1, y1 };
        let color = class_color(d.class_id);
        for t in 0..BOX_THICKNESS {
            for x in x0..x1 {
                put(&mut img, &clip, x, y0 + t, color);
                put(&mut img, &clip, x, y1 - 1 - t, color);
            }
            for y in y0..y1 {
                put(&mut img, &clip, x0 + t, y, color);
                put(&mut img, &clip, x1 - 1 - t, y, color);
            }
        }
        let text = label_text(d.class_id, d.score);
        let (lx, ly) = (x0 + BOX_THICKNESS, y0 + BOX_THICKNESS);
        let lw = text.chars().count() as i64 * (GLYPH_W + 1) + 1;
        for y in ly..ly + GLYPH_H + 2 {
            for x in lx..lx + lw {
                put(&mut img, &clip, x, y, color);
            }
        }
        let ink = Rgb([0, 0, 0]);
        for (i, ch) in text.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            let gx = lx + 1 + i as i64 * (GLYPH_W + 1);
            for (ry, bits) in rows.iter().enumerate() {
                for cx in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - cx) & 1 == 1 {
                        put(&mut img, &clip, gx + cx, ly + 1 + ry as i64, ink);
                    }
                }
            }
        }
    }
    img
}

/// Render to a PNG file.
pub fn render_detections(image: &RgbImage, dets: &DetectionSet, out_path: &Path) -> Result<()> {
    let img = draw_detections(image, dets);
    img.save_with_format(out_path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out_path, io),
        other => Error::Image(other),
    })
}
