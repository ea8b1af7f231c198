//! Multi-sprite scenes: squares, ellipses and hearts with random scale,
//! position and rotation. Sprites are hard-edged so masks are exact; later
//! sprites occlude earlier ones.

use rand::Rng;

use crate::record::{ObjectFactors, SceneRecord};

pub const SIZE: usize = 64;
/// Sprite half-extent in pixels at scale 1.0.
pub const BASE_RADIUS: f64 = 12.0;
pub const HUES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Square = 0,
    Ellipse = 1,
    Heart = 2,
}

impl SpriteShape {
    pub fn from_id(id: u16) -> Self {
        match id {
            0 => Self::Square,
            1 => Self::Ellipse,
            _ => Self::Heart,
        }
    }

    /// Membership test in normalized sprite coordinates (y grows downwards).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Self::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Self::Ellipse => u * u + (v / 0.6) * (v / 0.6) <= 1.0,
            Self::Heart => {
                let x = 1.15 * u;
                let y = -1.15 * v + 0.12;
                let a = x * x + y * y - 1.0;
                a * a * a - x * x * y * y * y <= 0.0
            }
        }
    }
}

/// Saturated color for hue index `id` (30 degree steps around the hue circle).
pub fn palette(id: u16) -> [u8; 3] {
    let h = f64::from(id % HUES as u16) * (360.0 / HUES as f64) / 60.0;
    let sector = h.floor() as u32;
    let f = h - h.floor();
    let up = (255.0 * f).round() as u8;
    let down = 255 - up;
    match sector {
        0 => [255, up, 0],
        1 => [down, 255, 0],
        2 => [0, 255, up],
        3 => [0, down, 255],
        4 => [up, 0, 255],
        _ => [255, 0, down],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpriteParams {
    pub binarized: bool,
}

impl SpriteParams {
    pub fn channels(&self) -> usize {
        if self.binarized {
            1
        } else {
            3
        }
    }

    pub fn max_objects(&self) -> usize {
        if self.binarized {
            3
        } else {
            5
        }
    }

    fn object_range(&self) -> std::ops::RangeInclusive<usize> {
        if self.binarized {
            2..=3
        } else {
            2..=5
        }
    }
}

/// Renders sprites described by factors over a uniform background.
pub fn render(
    params: &SpriteParams,
    factors: &[ObjectFactors],
    background: [u8; 3],
) -> (Vec<u8>, Vec<Option<u8>>) {
    let c = params.channels();
    let mut image = Vec::with_capacity(SIZE * SIZE * c);
    for _ in 0..SIZE * SIZE {
        image.extend_from_slice(&background[..c]);
    }
    let mut labels = vec![None; SIZE * SIZE];
    for (k, f) in factors.iter().enumerate() {
        let shape = SpriteShape::from_id(f.shape_id);
        let color = if params.binarized {
            [255; 3]
        } else {
            palette(f.color_id)
        };
        let radius = BASE_RADIUS * f64::from(f.scale) / 1000.0;
        let theta = f64::from(f.angle) / 100.0 * std::f64::consts::PI / 180.0;
        let (s, co) = theta.sin_cos();
        let (cx, cy) = (f64::from(f.x) + 0.5, f64::from(f.y) + 0.5);
        for y in 0..SIZE {
            for x in 0..SIZE {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                // inverse rotation into the sprite frame
                let u = (co * dx + s * dy) / radius;
                let v = (-s * dx + co * dy) / radius;
                if shape.contains(u, v) {
                    let p = y * SIZE + x;
                    image[p * c..p * c + c].copy_from_slice(&color[..c]);
                    labels[p] = Some(k as u8);
                }
            }
        }
    }
    (image, labels)
}

pub fn generate_record<R: Rng>(params: &SpriteParams, rng: &mut R) -> SceneRecord {
    let n = rng.random_range(params.object_range());
    let background = if params.binarized {
        [0; 3]
    } else {
        let g = rng.random_range(32..=224u8);
        [g; 3]
    };
    let factors: Vec<ObjectFactors> = (0..n)
        .map(|_| ObjectFactors {
            shape_id: rng.random_range(0..3),
            color_id: if params.binarized {
                0
            } else {
                rng.random_range(0..HUES as u16)
            },
            x: rng.random_range(8..56),
            y: rng.random_range(8..56),
            scale: rng.random_range(500..=1000),
            angle: rng.random_range(0..36000),
        })
        .collect();
    let (image, labels) = render(params, &factors, background);
    SceneRecord::from_labels(
        SIZE,
        SIZE,
        params.channels(),
        params.max_objects(),
        image,
        &labels,
        factors,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_saturated() {
        for id in 0..HUES as u16 {
            let c = palette(id);
            assert!(c.contains(&255), "{c:?}");
            assert!(c.contains(&0), "{c:?}");
        }
        assert_eq!(palette(0), [255, 0, 0]);
        assert_eq!(palette(4), [0, 255, 0]);
        assert_eq!(palette(8), [0, 0, 255]);
    }

    #[test]
    fn shapes_are_nonempty_at_minimum_scale() {
        let p = SpriteParams { binarized: true };
        for shape in 0..3 {
            let f = ObjectFactors {
                shape_id: shape,
                x: 32,
                y: 32,
                scale: 500,
                ..Default::default()
            };
            let (_, labels) = render(&p, &[f], [0; 3]);
            let area = labels.iter().filter(|l| l.is_some()).count();
            assert!(area > 40, "shape {shape} area {area}");
        }
    }

    #[test]
    fn later_sprites_occlude_earlier() {
        let p = SpriteParams { binarized: false };
        let f = ObjectFactors {
            shape_id: 0,
            color_id: 0,
            x: 32,
            y: 32,
            scale: 1000,
            angle: 0,
        };
        let g = ObjectFactors { color_id: 4, ..f };
        let (image, labels) = render(&p, &[f, g], [100; 3]);
        let centre = 32 * SIZE + 32;
        assert_eq!(labels[centre], Some(1));
        assert_eq!(&image[centre * 3..centre * 3 + 3], &palette(4));
    }
}
