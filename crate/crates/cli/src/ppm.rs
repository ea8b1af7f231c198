//! Binary PPM (P6) output and a small RGB canvas for composing figures.

use std::io::Write;
use std::path::Path;

/// An 8-bit RGB image stored row-major as `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    /// Builds an image from `channels`-interleaved pixels; one channel is
    /// replicated to gray.
    pub fn from_interleaved(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Self {
        assert_eq!(pixels.len(), width * height * channels, "pixel buffer size");
        let data = match channels {
            3 => pixels.to_vec(),
            1 => pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            c => panic!("unsupported channel count {c}"),
        };
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Copies `src` with its top-left corner at `(x, y)`, clipping at the
    /// edges.
    pub fn blit(&mut self, src: &Rgb, x: usize, y: usize) {
        for sy in 0..src.height.min(self.height.saturating_sub(y)) {
            for sx in 0..src.width.min(self.width.saturating_sub(x)) {
                self.set(x + sx, y + sy, src.get(sx, sy));
            }
        }
    }

    /// One-pixel frame along the image border.
    pub fn frame(&mut self, c: [u8; 3]) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        for x in 0..self.width {
            self.set(x, 0, c);
            self.set(x, self.height - 1, c);
        }
        for y in 0..self.height {
            self.set(0, y, c);
            self.set(self.width - 1, y, c);
        }
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, factor: usize) -> Rgb {
        let mut out = Rgb::new(self.width * factor, self.height * factor, [0; 3]);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }
}

/// P6 encoding: `"P6\n<W> <H>\n255\n"` followed by the raw rows.
pub fn encode_ppm(image: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_ppm(image: &Rgb, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_ppm(image))?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel() {
        let img = Rgb::new(1, 1, [255; 3]);
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
        assert_eq!(encode_ppm(&img).len(), 14);
    }

    #[test]
    fn gray_is_replicated() {
        let img = Rgb::from_interleaved(2, 1, 1, &[7, 200]);
        assert_eq!(img.data, vec![7, 7, 7, 200, 200, 200]);
    }

    #[test]
    fn blit_clips_and_frame_marks_edges() {
        let mut a = Rgb::new(3, 3, [0; 3]);
        a.blit(&Rgb::new(2, 2, [9; 3]), 2, 2);
        assert_eq!(a.get(2, 2), [9; 3]);
        assert_eq!(a.get(1, 1), [0; 3]);
        let mut b = Rgb::new(3, 3, [0; 3]);
        b.frame([1, 2, 3]);
        assert_eq!(b.get(1, 1), [0; 3]);
        assert_eq!(b.get(0, 2), [1, 2, 3]);
        assert_eq!(Rgb::new(2, 1, [5; 3]).upscale(3).width, 6);
    }
}
