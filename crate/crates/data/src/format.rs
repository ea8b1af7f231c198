//! Binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header:  "MOBD" | version u32 | kind u8 | H u16 | W u16 | C u16
//!          | max_objects u8 | record_count u64 | seed u64
//! record:  image H*W*C bytes | object_count u8 | masks max_objects*H*W bytes
//!          | background H*W bytes | factors max_objects * 6 * u16
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::record::{DatasetKind, ObjectFactors, SceneRecord};
use crate::DataError;

pub const MAGIC: [u8; 4] = *b"MOBD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 1 + 2 + 2 + 2 + 1 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub kind: DatasetKind,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub max_objects: u8,
    pub record_count: u64,
    pub seed: u64,
}

impl DatasetHeader {
    /// Size in bytes of one serialized record.
    pub fn record_len(&self) -> u64 {
        let p = u64::from(self.height) * u64::from(self.width);
        let m = u64::from(self.max_objects);
        p * u64::from(self.channels) + 1 + m * p + p + m * 12
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN as usize);
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.kind as u8);
        b.extend_from_slice(&self.height.to_le_bytes());
        b.extend_from_slice(&self.width.to_le_bytes());
        b.extend_from_slice(&self.channels.to_le_bytes());
        b.push(self.max_objects);
        b.extend_from_slice(&self.record_count.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self, DataError> {
        if b[0..4] != MAGIC {
            return Err(DataError::BadMagic([b[0], b[1], b[2], b[3]]));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        Ok(Self {
            kind: DatasetKind::from_u8(b[8])?,
            height: u16::from_le_bytes([b[9], b[10]]),
            width: u16::from_le_bytes([b[11], b[12]]),
            channels: u16::from_le_bytes([b[13], b[14]]),
            max_objects: b[15],
            record_count: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            seed: u64::from_le_bytes(b[24..32].try_into().unwrap()),
        })
    }

    fn check_record(&self, r: &SceneRecord) -> Result<(), DataError> {
        let expected = (
            usize::from(self.height),
            usize::from(self.width),
            usize::from(self.channels),
            usize::from(self.max_objects),
        );
        let got = (r.height, r.width, r.channels, r.max_objects);
        if expected != got
            || r.image.len() != r.height * r.width * r.channels
            || r.masks.len() != r.max_objects * r.pixels()
            || r.background.len() != r.pixels()
            || r.factors.len() != r.max_objects
        {
            return Err(DataError::RecordShape {
                expected: format!("{expected:?}"),
                got: format!("{got:?}"),
            });
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Streaming writer. The record count in the header is patched on `finish`.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: DatasetHeader,
    written: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self, DataError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.to_bytes()).map_err(io_err(&path))?;
        Ok(Self {
            path,
            out,
            header,
            written: 0,
        })
    }

    pub fn push(&mut self, r: &SceneRecord) -> Result<(), DataError> {
        self.header.check_record(r)?;
        let w = &mut self.out;
        let path = &self.path;
        w.write_all(&r.image).map_err(io_err(path))?;
        w.write_all(&[r.object_count]).map_err(io_err(path))?;
        w.write_all(&r.masks).map_err(io_err(path))?;
        w.write_all(&r.background).map_err(io_err(path))?;
        let mut fb = Vec::with_capacity(r.factors.len() * 12);
        for f in &r.factors {
            for v in f.to_array() {
                fb.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&fb).map_err(io_err(path))?;
        self.written += 1;
        Ok(())
    }

    /// Flushes, patches the header's record count and returns the final header.
    pub fn finish(mut self) -> Result<DatasetHeader, DataError> {
        self.header.record_count = self.written;
        let path = self.path.clone();
        self.out.flush().map_err(io_err(&path))?;
        let mut file = self.out.into_inner().map_err(|e| DataError::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        file.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
        file.write_all(&self.header.to_bytes()).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        Ok(self.header)
    }
}

/// Writes `records` to `path`. The header's `record_count` is set from the slice.
pub fn save_dataset(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    records: &[SceneRecord],
) -> Result<DatasetHeader, DataError> {
    let mut w = DatasetWriter::create(path, *header)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Streaming reader; iterates records without loading the whole file.
#[derive(Debug)]
pub struct DatasetReader {
    path: PathBuf,
    input: BufReader<File>,
    header: DatasetHeader,
    next: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(io_err(&path))?;
        let file_len = file.metadata().map_err(io_err(&path))?.len();
        let mut input = BufReader::new(file);
        let mut hb = [0u8; HEADER_LEN as usize];
        read_exact_at(&mut input, &mut hb, 0, &path)?;
        let header = DatasetHeader::from_bytes(&hb)?;
        let expected = HEADER_LEN + header.record_len() * header.record_count;
        if file_len < expected {
            // Locate the first record that does not fit for the diagnostic.
            let complete = (file_len - HEADER_LEN) / header.record_len().max(1);
            return Err(DataError::Truncated {
                path,
                offset: HEADER_LEN + complete * header.record_len(),
                record: complete,
                file_len,
            });
        }
        if file_len != expected {
            return Err(DataError::SizeMismatch {
                path,
                expected,
                actual: file_len,
            });
        }
        Ok(Self {
            path,
            input,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    /// Repositions the stream at record `index`.
    pub fn seek_record(&mut self, index: u64) -> Result<(), DataError> {
        if index > self.header.record_count {
            return Err(DataError::IndexOutOfRange {
                index,
                count: self.header.record_count,
            });
        }
        let off = HEADER_LEN + index * self.header.record_len();
        self.input
            .seek(SeekFrom::Start(off))
            .map_err(io_err(&self.path))?;
        self.next = index;
        Ok(())
    }

    fn read_record(&mut self) -> Result<SceneRecord, DataError> {
        let h = &self.header;
        let (height, width, channels, max_objects) = (
            usize::from(h.height),
            usize::from(h.width),
            usize::from(h.channels),
            usize::from(h.max_objects),
        );
        let p = height * width;
        let mut buf = vec![0u8; h.record_len() as usize];
        let offset = HEADER_LEN + self.next * h.record_len();
        read_exact_at(&mut self.input, &mut buf, offset, &self.path)?;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &buf[at..at + n];
            at += n;
            s.to_vec()
        };
        let image = take(p * channels);
        let object_count = take(1)[0];
        let masks = take(max_objects * p);
        let background = take(p);
        let fbytes = take(max_objects * 12);
        let factors = fbytes
            .chunks_exact(12)
            .map(|c| {
                let mut a = [0u16; 6];
                for (i, v) in a.iter_mut().enumerate() {
                    *v = u16::from_le_bytes([c[2 * i], c[2 * i + 1]]);
                }
                ObjectFactors::from_array(a)
            })
            .collect();
        self.next += 1;
        Ok(SceneRecord {
            height,
            width,
            channels,
            max_objects,
            image,
            object_count,
            masks,
            background,
            factors,
        })
    }
}

fn read_exact_at(
    input: &mut impl Read,
    buf: &mut [u8],
    offset: u64,
    path: &Path,
) -> Result<(), DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(DataError::Truncated {
                    path: path.to_path_buf(),
                    offset: offset + filled as u64,
                    record: u64::MAX,
                    file_len: offset + filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(DataError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
    }
    Ok(())
}

impl Iterator for DatasetReader {
    type Item = Result<SceneRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.record_count {
            return None;
        }
        Some(self.read_record())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.header.record_count - self.next) as usize;
        (left, Some(left))
    }
}

/// Reads the whole dataset into memory.
pub fn load_dataset(
    path: impl AsRef<Path>,
) -> Result<(DatasetHeader, Vec<SceneRecord>), DataError> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::ObjectFactors;

    fn tiny_header() -> DatasetHeader {
        DatasetHeader {
            kind: DatasetKind::Shapes,
            height: 2,
            width: 3,
            channels: 1,
            max_objects: 2,
            record_count: 0,
            seed: 9,
        }
    }

    fn tiny_record(v: u8) -> SceneRecord {
        SceneRecord::from_labels(
            2,
            3,
            1,
            2,
            vec![v; 6],
            &[Some(0), Some(0), None, Some(1), None, None],
            vec![
                ObjectFactors {
                    shape_id: 1,
                    x: 300,
                    ..Default::default()
                },
                ObjectFactors {
                    angle: 35999,
                    ..Default::default()
                },
            ],
        )
    }

    #[test]
    fn header_has_fixed_size() {
        assert_eq!(tiny_header().to_bytes().len() as u64, HEADER_LEN);
        assert_eq!(tiny_header().record_len(), 6 + 1 + 12 + 6 + 24);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &tiny_header(), &[tiny_record(1), tiny_record(2)]).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 5).unwrap();
        match DatasetReader::open(&path) {
            Err(DataError::Truncated { offset, record, .. }) => {
                assert_eq!(record, 1);
                assert_eq!(offset, HEADER_LEN + tiny_header().record_len());
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &tiny_header(), &[tiny_record(1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DatasetReader::open(&path),
            Err(DataError::UnsupportedVersion(7))
        ));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DatasetReader::open(&path),
            Err(DataError::BadMagic(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &tiny_header(), &[tiny_record(1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DatasetReader::open(&path),
            Err(DataError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn seek_reads_requested_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let recs: Vec<_> = (0..4).map(tiny_record).collect();
        save_dataset(&path, &tiny_header(), &recs).unwrap();
        let mut r = DatasetReader::open(&path).unwrap();
        r.seek_record(2).unwrap();
        assert_eq!(r.next().unwrap().unwrap(), recs[2]);
        assert_eq!(r.next().unwrap().unwrap(), recs[3]);
        assert!(r.next().is_none());
    }

    #[test]
    fn mismatched_record_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d.bin"), tiny_header()).unwrap();
        let mut r = tiny_record(0);
        r.channels = 3;
        assert!(matches!(w.push(&r), Err(DataError::RecordShape { .. })));
    }
}
