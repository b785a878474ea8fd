//! OMMV sample files and the plain-text dataset manifest.
//!
//! Layout (little-endian): `"OMMV"`, version `u16 = 1`, `f, h, w: u32`, rgb
//! `f·h·w·3` bytes, depth `f·h·w` u16, seg `f·h·w` bytes, edges as one bit
//! per pixel (MSB first) with every row padded to a byte boundary, caption
//! length `u8` followed by the token ids.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::scene::MultiModalVideo;

pub const MAGIC: &[u8; 4] = b"OMMV";
pub const VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("dimension inconsistency: {0}")]
    Dimensions(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_sample(v: &MultiModalVideo) -> Result<Vec<u8>, DatasetError> {
    let n = v.pixels();
    if v.rgb.len() != n * 3
        || v.depth.len() != n
        || v.seg.len() != n
        || v.edges.len() != n
        || v.caption.len() > u8::MAX as usize
    {
        return Err(DatasetError::Dimensions(format!(
            "plane lengths do not match {}x{}x{}",
            v.frames, v.height, v.width
        )));
    }
    let row_bytes = v.width.div_ceil(8);
    let mut out = Vec::with_capacity(22 + n * 6 + v.caption.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [v.frames, v.height, v.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&v.rgb);
    for q in &v.depth {
        out.extend_from_slice(&q.to_le_bytes());
    }
    out.extend_from_slice(&v.seg);
    for row in v.edges.chunks_exact(v.width) {
        let mut bytes = vec![0u8; row_bytes];
        for (x, &e) in row.iter().enumerate() {
            if e != 0 {
                bytes[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out.push(v.caption.len() as u8);
    out.extend_from_slice(&v.caption);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_sample(buf: &[u8]) -> Result<MultiModalVideo, DatasetError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let (f, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    if f == 0 || h == 0 || w == 0 {
        return Err(DatasetError::Dimensions(format!("zero extent {f}x{h}x{w}")));
    }
    let n = f
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|&n| n <= buf.len())
        .ok_or_else(|| DatasetError::Dimensions(format!("{f}x{h}x{w} exceeds file size")))?;
    let rgb = r.take(n * 3)?.to_vec();
    let depth = r
        .take(n * 2)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let seg = r.take(n)?.to_vec();
    let row_bytes = w.div_ceil(8);
    let packed = r.take(row_bytes * f * h)?;
    let mut edges = Vec::with_capacity(n);
    for row in packed.chunks_exact(row_bytes) {
        edges.extend((0..w).map(|x| ((row[x / 8] << (x % 8)) & 0x80 != 0) as u8));
    }
    let clen = r.take(1)?[0] as usize;
    let caption = r.take(clen)?.to_vec();
    if r.pos != buf.len() {
        return Err(DatasetError::Dimensions(format!(
            "{} trailing bytes after caption",
            buf.len() - r.pos
        )));
    }
    Ok(MultiModalVideo {
        frames: f,
        height: h,
        width: w,
        rgb,
        depth,
        seg,
        edges,
        caption,
    })
}

pub fn write_sample(path: &Path, v: &MultiModalVideo) -> Result<(), DatasetError> {
    fs::write(path, encode_sample(v)?).map_err(io_err(path))
}

pub fn read_sample(path: &Path) -> Result<MultiModalVideo, DatasetError> {
    decode_sample(&fs::read(path).map_err(io_err(path))?)
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.ommv")
}

/// Writes `samples` (seed, video) as numbered OMMV files plus a manifest of
/// `filename seed` lines. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[(u64, MultiModalVideo)]) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, (seed, v)) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        write_sample(&dir.join(&name), v)?;
        manifest.push_str(&format!("{name} {seed}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

/// Parses the manifest into `(filename, seed)` entries.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, u64)>, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next().map(str::parse::<u64>), parts.next()) {
                (Some(name), Some(Ok(seed)), None) => Ok((name.to_string(), seed)),
                _ => Err(DatasetError::Manifest(format!("line {}: {line:?}", i + 1))),
            }
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<(u64, MultiModalVideo)>, DatasetError> {
    read_manifest(dir)?
        .into_iter()
        .map(|(name, seed)| Ok((seed, read_sample(&dir.join(name))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render, sample_scene, DatasetConfig};

    fn sample() -> MultiModalVideo {
        render(&sample_scene(3, &DatasetConfig::default()).unwrap())
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode_sample(&sample()).unwrap();
        b[0] = b'X';
        let err = decode_sample(&b).unwrap_err();
        assert!(matches!(err, DatasetError::BadMagic(_)));
        assert!(err.to_string().contains("bad magic"));
        let mut b = encode_sample(&sample()).unwrap();
        b[4] = 2;
        assert!(matches!(decode_sample(&b), Err(DatasetError::BadVersion(2))));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let b = encode_sample(&sample()).unwrap();
        assert!(matches!(
            decode_sample(&b[..b.len() - 1]),
            Err(DatasetError::Truncated { .. })
        ));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode_sample(&long), Err(DatasetError::Dimensions(_))));
        let mut huge = b;
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_sample(&huge), Err(DatasetError::Dimensions(_))));
    }

    #[test]
    fn odd_width_edges_pad_rows() {
        let v = MultiModalVideo {
            frames: 1,
            height: 2,
            width: 11,
            rgb: vec![7; 66],
            depth: vec![9; 22],
            seg: vec![0; 22],
            edges: (0..22).map(|i| (i % 3 == 0) as u8).collect(),
            caption: vec![1, 9, 16],
        };
        let b = encode_sample(&v).unwrap();
        assert_eq!(b.len(), 18 + 66 + 44 + 22 + 2 * 2 + 1 + 3);
        assert_eq!(decode_sample(&b).unwrap(), v);
    }
}
