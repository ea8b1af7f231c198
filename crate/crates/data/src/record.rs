use crate::DataError;

/// Which generator produced a dataset. Stored as a byte in the file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DatasetKind {
    Tetris = 1,
    MultiDsprites = 2,
    MultiDspritesBinarized = 3,
    Shapes = 4,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Tetris,
        DatasetKind::MultiDsprites,
        DatasetKind::MultiDspritesBinarized,
        DatasetKind::Shapes,
    ];

    pub fn from_u8(v: u8) -> Result<Self, DataError> {
        match v {
            1 => Ok(Self::Tetris),
            2 => Ok(Self::MultiDsprites),
            3 => Ok(Self::MultiDspritesBinarized),
            4 => Ok(Self::Shapes),
            other => Err(DataError::InvalidKind(other)),
        }
    }

    /// Command-line name of the kind.
    pub fn name(self) -> &'static str {
        match self {
            Self::Tetris => "tetris",
            Self::MultiDsprites => "multi-dsprites",
            Self::MultiDspritesBinarized => "multi-dsprites-bin",
            Self::Shapes => "shapes",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth factors of one object. Unused fields are 0.
///
/// `x`/`y` are pixel coordinates (top-left of the bounding box for block and
/// binary shapes, center for sprites), `scale` is in per-mille and `angle` in
/// centidegrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ObjectFactors {
    pub shape_id: u16,
    pub color_id: u16,
    pub x: u16,
    pub y: u16,
    pub scale: u16,
    pub angle: u16,
}

impl ObjectFactors {
    pub fn to_array(self) -> [u16; 6] {
        [self.shape_id, self.color_id, self.x, self.y, self.scale, self.angle]
    }

    pub fn from_array(a: [u16; 6]) -> Self {
        Self {
            shape_id: a[0],
            color_id: a[1],
            x: a[2],
            y: a[3],
            scale: a[4],
            angle: a[5],
        }
    }
}

/// One scene: image, visible-pixel object masks, background mask and factors.
///
/// Layouts: `image` is `[H, W, C]`, `masks` is `[max_objects, H, W]` and
/// `background` is `[H, W]`; mask bytes are 0 or 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneRecord {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_objects: usize,
    pub image: Vec<u8>,
    pub object_count: u8,
    pub masks: Vec<u8>,
    pub background: Vec<u8>,
    pub factors: Vec<ObjectFactors>,
}

impl SceneRecord {
    /// Builds a record from a per-pixel label map (`None` = background).
    pub fn from_labels(
        height: usize,
        width: usize,
        channels: usize,
        max_objects: usize,
        image: Vec<u8>,
        labels: &[Option<u8>],
        factors: Vec<ObjectFactors>,
    ) -> Self {
        let pixels = height * width;
        let mut masks = vec![0u8; max_objects * pixels];
        let mut background = vec![0u8; pixels];
        for (p, label) in labels.iter().enumerate() {
            match label {
                Some(k) => masks[*k as usize * pixels + p] = 255,
                None => background[p] = 255,
            }
        }
        let object_count = factors.len() as u8;
        let mut factors = factors;
        factors.resize(max_objects, ObjectFactors::default());
        Self {
            height,
            width,
            channels,
            max_objects,
            image,
            object_count,
            masks,
            background,
            factors,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self, object: usize) -> &[u8] {
        let p = self.pixels();
        &self.masks[object * p..(object + 1) * p]
    }

    /// Object index covering each pixel, `None` for background.
    pub fn labels(&self) -> Vec<Option<u8>> {
        let p = self.pixels();
        (0..p)
            .map(|i| {
                (0..self.max_objects)
                    .find(|&k| self.masks[k * p + i] != 0)
                    .map(|k| k as u8)
            })
            .collect()
    }

    /// Number of pixels covered by any object.
    pub fn foreground_count(&self) -> usize {
        self.background.iter().filter(|&&b| b == 0).count()
    }

    /// Checks that object masks are disjoint and, with the background mask,
    /// cover every pixel exactly once.
    pub fn check_partition(&self) -> Result<(), String> {
        let p = self.pixels();
        for i in 0..p {
            let mut cover = usize::from(self.background[i] != 0);
            for k in 0..self.max_objects {
                let v = self.masks[k * p + i];
                if v != 0 && v != 255 {
                    return Err(format!("mask {k} has non-binary value {v} at pixel {i}"));
                }
                if v != 0 {
                    if k >= self.object_count as usize {
                        return Err(format!("unused mask slot {k} is non-empty"));
                    }
                    cover += 1;
                }
            }
            if cover != 1 {
                return Err(format!("pixel {i} covered {cover} times"));
            }
        }
        Ok(())
    }

    /// Image as `[C, H, W]` reals in [0, 1].
    pub fn image_chw<T: From<f32>>(&self) -> Vec<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = self.image[(y * w + x) * c + ch];
                    out.push(T::from(f32::from(v) / 255.0));
                }
            }
        }
        out
    }
}
