//! Image strips built from decodes.

use sceneslots_core::evaluation::argmax_labels;
use sceneslots_core::inference::Decoded;
use sceneslots_core::{Result, Tensor32};

use crate::ppm::Rgb;

/// Slot colors, indexed by slot and cycled past the end.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn slot_color(slot: usize) -> [u8; 3] {
    PALETTE[slot % PALETTE.len()]
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[C, H, W]` tensor with values in [0, 1] as an RGB tile.
pub fn tile(image: &Tensor32) -> Rgb {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut pixels = Vec::with_capacity(h * w * c);
    for i in 0..h * w {
        for ch in 0..c {
            pixels.push(to_u8(d[ch * h * w + i]));
        }
    }
    Rgb::from_interleaved(w, h, c, &pixels)
}

/// Argmax slot of each pixel painted in the slot's palette color.
pub fn segmentation_tile(masks: &Tensor32) -> Result<Rgb> {
    let s = masks.shape();
    let (h, w) = (s[2], s[3]);
    let labels = argmax_labels(masks)?;
    let mut out = Rgb::new(w, h, [0; 3]);
    for (i, &l) in labels.iter().enumerate() {
        out.set(i % w, i / w, slot_color(l));
    }
    Ok(out)
}

/// Slot `k`'s means weighted by its mask over a white background, framed
/// in the slot color.
pub fn slot_tile(decoded: &Decoded<f32>, k: usize) -> Rgb {
    let s = decoded.means.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let p = h * w;
    let means = &decoded.means.data()[k * c * p..(k + 1) * c * p];
    let mask = &decoded.masks.data()[k * p..(k + 1) * p];
    let data = (0..c * p).map(|i| means[i] * mask[i % p] + 1.0 - mask[i % p]).collect();
    let mut t = tile(&Tensor32::new(vec![c, h, w], data).expect("slot tile shape"));
    t.frame(slot_color(k));
    t
}

/// Tiles side by side with no gaps.
pub fn hstack(tiles: &[Rgb]) -> Rgb {
    let w = tiles.iter().map(|t| t.width).sum();
    let h = tiles.iter().map(|t| t.height).max().unwrap_or(0);
    let mut out = Rgb::new(w, h, [255; 3]);
    let mut x = 0;
    for t in tiles {
        out.blit(t, x, 0);
        x += t.width;
    }
    out
}

/// Rows stacked top to bottom, left aligned.
pub fn vstack(rows: &[Rgb]) -> Rgb {
    let w = rows.iter().map(|t| t.width).max().unwrap_or(0);
    let h = rows.iter().map(|t| t.height).sum();
    let mut out = Rgb::new(w, h, [255; 3]);
    let mut y = 0;
    for r in rows {
        out.blit(r, 0, y);
        y += r.height;
    }
    out
}

/// input | reconstruction | segmentation | one masked reconstruction per
/// slot: `2 + 1 + K` tiles.
pub fn decomposition_strip(image: &Tensor32, decoded: &Decoded<f32>) -> Result<Rgb> {
    let k = decoded.masks.shape()[0];
    let mut tiles = vec![tile(image), tile(&decoded.reconstruction()?), segmentation_tile(&decoded.masks)?];
    tiles.extend((0..k).map(|s| slot_tile(decoded, s)));
    Ok(hstack(&tiles))
}
