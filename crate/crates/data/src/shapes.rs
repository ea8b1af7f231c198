//! Binary 28x28 scenes with three shapes from {triangle up, triangle down,
//! square}. Shapes may overlap; masks hold the visible pixels.

use rand::Rng;

use crate::record::{ObjectFactors, SceneRecord};

pub const SIZE: usize = 28;
pub const SHAPE_SIZE: usize = 9;
pub const OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    TriangleUp = 0,
    TriangleDown = 1,
    Square = 2,
}

impl Shape {
    pub fn from_id(id: u16) -> Self {
        match id {
            0 => Self::TriangleUp,
            1 => Self::TriangleDown,
            _ => Self::Square,
        }
    }

    fn contains(self, row: usize, col: usize) -> bool {
        let mid = (SHAPE_SIZE / 2) as isize;
        let off = (col as isize - mid).abs();
        match self {
            Self::TriangleUp => off <= row as isize / 2,
            Self::TriangleDown => off <= (SHAPE_SIZE - 1 - row) as isize / 2,
            Self::Square => true,
        }
    }
}

/// Renders shapes from factors (`x`/`y` = top-left of the 9x9 box).
pub fn render(factors: &[ObjectFactors]) -> (Vec<u8>, Vec<Option<u8>>) {
    let mut image = vec![0u8; SIZE * SIZE];
    let mut labels = vec![None; SIZE * SIZE];
    for (k, f) in factors.iter().enumerate() {
        let shape = Shape::from_id(f.shape_id);
        for r in 0..SHAPE_SIZE {
            for c in 0..SHAPE_SIZE {
                if shape.contains(r, c) {
                    let p = (f.y as usize + r) * SIZE + f.x as usize + c;
                    image[p] = 255;
                    labels[p] = Some(k as u8);
                }
            }
        }
    }
    (image, labels)
}

pub fn generate_record<R: Rng>(rng: &mut R) -> SceneRecord {
    let factors: Vec<ObjectFactors> = (0..OBJECTS)
        .map(|_| ObjectFactors {
            shape_id: rng.random_range(0..3),
            x: rng.random_range(0..=(SIZE - SHAPE_SIZE) as u16),
            y: rng.random_range(0..=(SIZE - SHAPE_SIZE) as u16),
            scale: 1000,
            ..Default::default()
        })
        .collect();
    let (image, labels) = render(&factors);
    SceneRecord::from_labels(SIZE, SIZE, 1, OBJECTS, image, &labels, factors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangles_point_the_right_way() {
        let up = ObjectFactors {
            shape_id: 0,
            ..Default::default()
        };
        let (img, _) = render(&[up]);
        // apex row has one pixel, base row is full width
        assert_eq!(img[..SIZE].iter().filter(|&&v| v > 0).count(), 1);
        let base = (SHAPE_SIZE - 1) * SIZE;
        assert_eq!(img[base..base + SIZE].iter().filter(|&&v| v > 0).count(), 9);
        let down = ObjectFactors {
            shape_id: 1,
            ..Default::default()
        };
        let (img, _) = render(&[down]);
        assert_eq!(img[..SIZE].iter().filter(|&&v| v > 0).count(), 9);
    }
}
