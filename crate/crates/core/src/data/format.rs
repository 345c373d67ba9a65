//! The AFSV1 dataset file, all integers little-endian:
//!
//! ```text
//! magic    5 bytes  "AFSV1"
//! version  u8       1
//! u32 × 6           n, T, c, h, w, K
//! u16 × n           labels
//! u8 × n·T·c·h·w    pixels, sample-major, then frame, channel, row, column
//! ```

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use super::{Dataset, VideoBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AFSV_MAGIC: &[u8; 5] = b"AFSV1";
pub const AFSV_VERSION: u8 = 1;
/// Magic, version and the six dimension fields.
pub const HEADER_LEN: usize = 5 + 1 + 6 * 4;

pub(super) fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * ds.len() + ds.pixels.len());
    out.extend_from_slice(AFSV_MAGIC);
    out.push(AFSV_VERSION);
    for v in [ds.len(), ds.frames, ds.channels, ds.height, ds.width, ds.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug)]
struct Header {
    n: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < AFSV_MAGIC.len() || &bytes[..5] != AFSV_MAGIC {
            return Err(format_err(0, "bad magic, not an AFSV1 dataset"));
        }
        if bytes.len() < 6 {
            return Err(format_err(bytes.len(), "truncated header: missing version"));
        }
        if bytes[5] != AFSV_VERSION {
            return Err(format_err(5, format!("unsupported version {}", bytes[5])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len(), "truncated header"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let h = Header {
            n: field(0),
            frames: field(1),
            channels: field(2),
            height: field(3),
            width: field(4),
            classes: field(5),
        };
        if [h.frames, h.channels, h.height, h.width, h.classes].contains(&0) {
            return Err(format_err(10, "zero dimension in header"));
        }
        Ok(h)
    }

    fn clip_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    fn labels_end(&self) -> usize {
        HEADER_LEN + 2 * self.n
    }

    fn total_len(&self) -> u64 {
        self.labels_end() as u64 + self.n as u64 * self.clip_len() as u64
    }

    fn parse_labels(&self, raw: &[u8]) -> Result<Vec<u16>> {
        let labels: Vec<u16> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(i) = labels.iter().position(|&l| l as usize >= self.classes) {
            return Err(format_err(
                HEADER_LEN + 2 * i,
                format!("label {} of sample {i} outside {} classes", labels[i], self.classes),
            ));
        }
        Ok(labels)
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<Dataset> {
    let h = Header::parse(bytes)?;
    if (bytes.len() as u64) < h.total_len() {
        return Err(format_err(
            bytes.len(),
            format!("truncated file: {} bytes, expected {}", bytes.len(), h.total_len()),
        ));
    }
    if bytes.len() as u64 > h.total_len() {
        return Err(format_err(h.total_len() as usize, "trailing bytes after the pixel payload"));
    }
    let labels = h.parse_labels(&bytes[HEADER_LEN..h.labels_end()])?;
    Ok(Dataset {
        frames: h.frames,
        channels: h.channels,
        height: h.height,
        width: h.width,
        num_classes: h.classes,
        labels,
        pixels: bytes[h.labels_end()..].to_vec(),
    })
}

/// Streams fixed-size batches from an AFSV1 file. The file length is
/// checked against the header on open, and a short read is reported as an
/// error naming its offset; a partial batch is never yielded.
pub struct DatasetReader {
    path: PathBuf,
    input: BufReader<File>,
    header: Header,
    labels: Vec<u16>,
    batch_size: usize,
    next: usize,
    offset: usize,
    failed: bool,
}

impl DatasetReader {
    pub fn open(path: &Path, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut input = BufReader::new(file);
        let mut head = vec![0u8; HEADER_LEN.min(len as usize)];
        input.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        let header = Header::parse(&head)?;
        if len != header.total_len() {
            return Err(format_err(
                len.min(header.total_len()) as usize,
                format!("file is {len} bytes, header implies {}", header.total_len()),
            ));
        }
        let mut raw = vec![0u8; 2 * header.n];
        input.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let labels = header.parse_labels(&raw)?;
        Ok(DatasetReader {
            path: path.to_path_buf(),
            input,
            labels,
            offset: header.labels_end(),
            header,
            batch_size,
            next: 0,
            failed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.header.n
    }

    pub fn is_empty(&self) -> bool {
        self.header.n == 0
    }

    pub fn num_classes(&self) -> usize {
        self.header.classes
    }

    /// `[T, c, h, w]` of every clip.
    pub fn clip_shape(&self) -> [usize; 4] {
        let h = &self.header;
        [h.frames, h.channels, h.height, h.width]
    }
}

impl Iterator for DatasetReader {
    type Item = Result<VideoBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.header.n {
            return None;
        }
        let count = self.batch_size.min(self.header.n - self.next);
        let len = self.header.clip_len();
        let mut raw = vec![0u8; count * len];
        let mut filled = 0;
        while filled < raw.len() {
            match self.input.read(&mut raw[filled..]) {
                Ok(0) => {
                    self.failed = true;
                    return Some(Err(format_err(
                        self.offset + filled,
                        format!("{}: unexpected end of file inside a batch", self.path.display()),
                    )));
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            }
        }
        let h = &self.header;
        let clips = Tensor::new(
            &[count, h.frames, h.channels, h.height, h.width],
            raw.iter().map(|&p| p as f64 / 255.0).collect(),
        );
        let labels = self.labels[self.next..self.next + count].iter().map(|&l| l as usize).collect();
        self.next += count;
        self.offset += count * len;
        Some(clips.map(|clips| VideoBatch { clips, labels }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, MotionClass, SynthMotionSpec};

    fn spec(n: usize) -> SynthMotionSpec {
        SynthMotionSpec {
            n_samples: n,
            classes: vec![MotionClass::Left, MotionClass::Right],
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn payload_size_follows_the_layout() {
        let ds = generate(&spec(100)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 100 * 2 + 100 * 8 * 1024);
        assert_eq!(&bytes[..5], b"AFSV1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 100);
        assert_eq!(u32::from_le_bytes(bytes[26..30].try_into().unwrap()), 2);
    }

    #[test]
    fn decode_encode_round_trip() {
        let ds = generate(&spec(10)).unwrap();
        let bytes = ds.to_bytes();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_headers_name_the_offset() {
        let bytes = generate(&spec(4)).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 5, .. })));
        let cut = bytes.len() - 100;
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { offset, .. }) if offset as usize == cut));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 2] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset, .. }) if offset as usize == HEADER_LEN + 2));
    }

    #[test]
    fn streaming_reader_yields_the_same_batches() {
        let ds = generate(&spec(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.afsv");
        ds.save(&path).unwrap();
        let reader = DatasetReader::open(&path, 4).unwrap();
        assert_eq!(reader.len(), 10);
        let batches: Vec<VideoBatch> = reader.map(|b| b.unwrap()).collect();
        assert_eq!(batches.iter().map(VideoBatch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches[1], ds.batch(&[4, 5, 6, 7]));
    }

    #[test]
    fn truncated_file_yields_no_batch() {
        let bytes = generate(&spec(6)).unwrap().to_bytes();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.afsv");
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = DatasetReader::open(&path, 2).err().expect("truncation detected");
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
