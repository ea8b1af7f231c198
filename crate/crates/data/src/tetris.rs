//! Tetromino scenes: pieces of four square blocks placed on a block-aligned
//! grid without overlap, on a black background.

use std::collections::BTreeSet;

use rand::Rng;

use crate::record::{ObjectFactors, SceneRecord};
use crate::DataError;

/// Full-saturation piece colors: red, green, blue, cyan, magenta, yellow.
pub const COLORS: [[u8; 3]; 6] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [0, 255, 255],
    [255, 0, 255],
    [255, 255, 0],
];

/// Placement attempts per scene before the whole scene is resampled.
pub const MAX_RETRIES: usize = 1000;
const MAX_SCENE_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TetrisParams {
    pub canvas: usize,
    pub pieces: usize,
    pub block: usize,
}

impl Default for TetrisParams {
    fn default() -> Self {
        Self {
            canvas: 35,
            pieces: 3,
            block: 5,
        }
    }
}

impl TetrisParams {
    pub fn grid(&self) -> usize {
        self.canvas / self.block
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.block == 0 || self.pieces == 0 || self.pieces > usize::from(u8::MAX) {
            return Err(DataError::Generation(format!("invalid tetris params {self:?}")));
        }
        let g = self.grid();
        if g < 2 || self.pieces * 4 > g * g {
            return Err(DataError::Generation(format!(
                "{} pieces do not fit on a {g}x{g} block grid",
                self.pieces
            )));
        }
        Ok(())
    }
}

/// A fixed tetromino: four (row, col) block cells normalized to the origin.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tetromino {
    pub cells: [(u8, u8); 4],
}

impl Tetromino {
    pub fn height(&self) -> usize {
        self.cells.iter().map(|c| c.0).max().unwrap() as usize + 1
    }

    pub fn width(&self) -> usize {
        self.cells.iter().map(|c| c.1).max().unwrap() as usize + 1
    }
}

fn normalize(cells: &BTreeSet<(i32, i32)>) -> BTreeSet<(i32, i32)> {
    let r0 = cells.iter().map(|c| c.0).min().unwrap();
    let c0 = cells.iter().map(|c| c.1).min().unwrap();
    cells.iter().map(|&(r, c)| (r - r0, c - c0)).collect()
}

/// Enumerates every distinct 4-block piece up to translation (rotations and
/// mirror images count as distinct), in sorted order.
pub fn tetromino_variants() -> Vec<Tetromino> {
    let mut frontier: BTreeSet<BTreeSet<(i32, i32)>> = BTreeSet::new();
    frontier.insert(BTreeSet::from([(0, 0)]));
    for _ in 1..4 {
        let mut grown = BTreeSet::new();
        for shape in &frontier {
            for &(r, c) in shape {
                for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                    let cell = (r + dr, c + dc);
                    if !shape.contains(&cell) {
                        let mut s = shape.clone();
                        s.insert(cell);
                        grown.insert(normalize(&s));
                    }
                }
            }
        }
        frontier = grown;
    }
    frontier
        .into_iter()
        .map(|s| {
            let v: Vec<(u8, u8)> = s.into_iter().map(|(r, c)| (r as u8, c as u8)).collect();
            Tetromino {
                cells: [v[0], v[1], v[2], v[3]],
            }
        })
        .collect()
}

/// Renders pieces given as factors (`shape_id` = variant index, `x`/`y` =
/// top-left pixel) into an RGB image and label map. Later pieces win on overlap.
pub fn render(
    params: &TetrisParams,
    variants: &[Tetromino],
    factors: &[ObjectFactors],
) -> (Vec<u8>, Vec<Option<u8>>) {
    let n = params.canvas;
    let mut image = vec![0u8; n * n * 3];
    let mut labels = vec![None; n * n];
    for (k, f) in factors.iter().enumerate() {
        let piece = &variants[f.shape_id as usize];
        let color = COLORS[f.color_id as usize];
        for &(br, bc) in &piece.cells {
            let y0 = f.y as usize + br as usize * params.block;
            let x0 = f.x as usize + bc as usize * params.block;
            for y in y0..y0 + params.block {
                for x in x0..x0 + params.block {
                    let p = y * n + x;
                    image[p * 3..p * 3 + 3].copy_from_slice(&color);
                    labels[p] = Some(k as u8);
                }
            }
        }
    }
    (image, labels)
}

/// Samples one scene.
pub fn generate_record<R: Rng>(
    params: &TetrisParams,
    variants: &[Tetromino],
    rng: &mut R,
) -> Result<SceneRecord, DataError> {
    params.validate()?;
    let g = params.grid();
    for _ in 0..MAX_SCENE_RESAMPLES {
        if let Some(factors) = try_place(params, variants, g, rng) {
            let (image, labels) = render(params, variants, &factors);
            return Ok(SceneRecord::from_labels(
                params.canvas,
                params.canvas,
                3,
                params.pieces,
                image,
                &labels,
                factors,
            ));
        }
    }
    Err(DataError::Generation(format!(
        "could not place {} pieces after {MAX_SCENE_RESAMPLES} scene resamples",
        params.pieces
    )))
}

fn try_place<R: Rng>(
    params: &TetrisParams,
    variants: &[Tetromino],
    g: usize,
    rng: &mut R,
) -> Option<Vec<ObjectFactors>> {
    let mut occupied = vec![false; g * g];
    let mut factors = Vec::with_capacity(params.pieces);
    let mut retries = 0;
    while factors.len() < params.pieces {
        let shape = rng.random_range(0..variants.len());
        let color = rng.random_range(0..COLORS.len());
        let piece = &variants[shape];
        let (ph, pw) = (piece.height(), piece.width());
        if ph > g || pw > g {
            retries += 1;
        } else {
            let row = rng.random_range(0..=g - ph);
            let col = rng.random_range(0..=g - pw);
            let cells: Vec<usize> = piece
                .cells
                .iter()
                .map(|&(r, c)| (row + r as usize) * g + col + c as usize)
                .collect();
            if cells.iter().all(|&c| !occupied[c]) {
                for c in cells {
                    occupied[c] = true;
                }
                factors.push(ObjectFactors {
                    shape_id: shape as u16,
                    color_id: color as u16,
                    x: (col * params.block) as u16,
                    y: (row * params.block) as u16,
                    scale: 1000,
                    angle: 0,
                });
                continue;
            }
            retries += 1;
        }
        if retries >= MAX_RETRIES {
            return None;
        }
    }
    Some(factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::record_rng;

    #[test]
    fn enumeration_finds_all_fixed_tetrominoes() {
        let v = tetromino_variants();
        // I:2, O:1, T:4, S:2, Z:2, J:4, L:4
        assert_eq!(v.len(), 19);
        let bars = v.iter().filter(|t| t.height() == 4 || t.width() == 4).count();
        assert_eq!(bars, 2);
        let squares = v.iter().filter(|t| t.height() == 2 && t.width() == 2).count();
        assert_eq!(squares, 1);
    }

    #[test]
    fn pieces_do_not_overlap_and_cover_expected_area() {
        let p = TetrisParams::default();
        let v = tetromino_variants();
        for i in 0..50 {
            let r = generate_record(&p, &v, &mut record_rng(3, i)).unwrap();
            r.check_partition().unwrap();
            assert_eq!(r.foreground_count(), 300);
            assert_eq!(r.object_count, 3);
        }
    }

    #[test]
    fn impossible_canvas_is_an_error() {
        let p = TetrisParams {
            canvas: 5,
            pieces: 1,
            block: 5,
        };
        assert!(p.validate().is_err());
    }
}
