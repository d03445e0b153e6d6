//! Overlay rendering of tracking results.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::mot::{rows_in_frame, MotRow};

/// 3x5 digit glyphs, one row per `u8`, high three bits used.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// A saturated color that is stable per identity.
pub fn id_color(id: u32) -> Rgb<u8> {
    let h = id.wrapping_mul(2_654_435_761) >> 8;
    let hue = (h % 360) as f64;
    let x = 1.0 - ((hue / 60.0) % 2.0 - 1.0).abs();
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn draw_box(img: &mut RgbImage, left: f64, top: f64, width: f64, height: f64, c: Rgb<u8>) {
    let (x0, y0) = (left.round() as i64, top.round() as i64);
    let (x1, y1) = ((left + width).round() as i64 - 1, (top + height).round() as i64 - 1);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Draws `n` in decimal with its top-left corner at `(x, y)`.
pub fn draw_number(img: &mut RgbImage, x: i64, y: i64, n: u32, c: Rgb<u8>) {
    for (i, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x + 4 * i as i64;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, gx + col, y + row as i64, c);
                }
            }
        }
    }
}

/// A copy of `frame` with each row's box and identity drawn on it.
pub fn overlay(frame: &RgbImage, rows: &[MotRow]) -> RgbImage {
    let mut img = frame.clone();
    for r in rows {
        let c = id_color(r.id);
        draw_box(&mut img, r.left, r.top, r.width, r.height, c);
        let label_y = if r.top >= 6.0 { r.top.round() as i64 - 6 } else { (r.top + r.height).round() as i64 + 1 };
        draw_number(&mut img, r.left.round() as i64, label_y, r.id, c);
    }
    img
}

/// Writes one overlay PNG per frame, `000001.png` upwards.
pub fn render_sequence(frames: &[RgbImage], rows: &[MotRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let frame_rows: Vec<MotRow> = rows_in_frame(rows, i as u32 + 1).copied().collect();
        overlay(f, &frame_rows).save(dir.join(format!("{:06}.png", i + 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_size_and_marks_box() {
        let frame = RgbImage::new(40, 30);
        let row = MotRow { frame: 1, id: 7, left: 10.0, top: 12.0, width: 8.0, height: 6.0, conf: 1.0, class: 0, visibility: -1.0 };
        let out = overlay(&frame, &[row]);
        assert_eq!(out.dimensions(), (40, 30));
        let c = id_color(7);
        assert_eq!(*out.get_pixel(10, 12), c);
        assert_eq!(*out.get_pixel(17, 17), c);
        assert_eq!(*out.get_pixel(13, 14), Rgb([0, 0, 0]));
        // Digit 7's top bar sits above the box.
        assert_eq!(*out.get_pixel(10, 6), c);
    }

    #[test]
    fn boxes_off_canvas_are_clipped() {
        let mut img = RgbImage::new(8, 8);
        draw_box(&mut img, -5.0, -5.0, 30.0, 30.0, Rgb([255, 0, 0]));
        draw_number(&mut img, 6, 6, 123, Rgb([0, 255, 0]));
    }

    #[test]
    fn writes_one_image_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![RgbImage::new(33, 21); 3];
        render_sequence(&frames, &[], dir.path()).unwrap();
        for i in 1..=3 {
            let img = image::open(dir.path().join(format!("{i:06}.png"))).unwrap();
            assert_eq!((img.width(), img.height()), (33, 21));
        }
    }
}
