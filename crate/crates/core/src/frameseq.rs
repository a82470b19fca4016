//! FrameSeq: the codec-free media format detectors consume.
//!
//! A FrameSeq is a directory (or a zip of one) holding `meta.json`
//! (`{width, height, frame_count, fps}`) and `frames/%06d.ppm`, each frame a
//! binary P6 PPM with maxval 255.

use std::fs;
use std::io::{Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Upper bound on frames accepted from an untrusted archive.
pub const MAX_FRAMES: u32 = 100_000;
/// Upper bound on total decoded bytes accepted from an untrusted archive.
pub const MAX_DECODED_BYTES: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum FrameSeqError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("meta.json: {0}")]
    Meta(String),
    #[error("bad-frame: {0}")]
    BadFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSeqMeta {
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub fps: f64,
}

impl FrameSeqMeta {
    fn validate(&self) -> Result<(), FrameSeqError> {
        if self.width == 0 || self.height == 0 {
            return Err(FrameSeqError::Meta("width and height must be positive".into()));
        }
        if self.frame_count == 0 || self.frame_count > MAX_FRAMES {
            return Err(FrameSeqError::Meta(format!(
                "frame_count must be in 1..={MAX_FRAMES}"
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(FrameSeqError::Meta("fps must be positive".into()));
        }
        let decoded = self.frame_count as u64 * self.width as u64 * self.height as u64 * 3;
        if decoded > MAX_DECODED_BYTES {
            return Err(FrameSeqError::Meta("decoded size too large".into()));
        }
        Ok(())
    }
}

/// An 8-bit RGB frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn uniform(width: u32, height: u32, level: u8) -> Self {
        Frame {
            width,
            height,
            rgb: vec![level; (width * height * 3) as usize],
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn parse_ppm(data: &[u8]) -> Result<Frame, FrameSeqError> {
        let bad = |m: &str| FrameSeqError::BadFrame(m.to_string());
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            loop {
                match data.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while data.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while data.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            fields.push(&data[start..pos]);
        }
        if fields[0] != b"P6" {
            return Err(bad("not a binary P6 PPM"));
        }
        let num = |f: &[u8]| -> Result<u32, FrameSeqError> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad header number"))
        };
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        if width == 0 || height == 0 {
            return Err(bad("empty frame"));
        }
        // exactly one whitespace byte separates the header from the raster
        if !data.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("truncated header"));
        }
        pos += 1;
        let need = width as usize * height as usize * 3;
        let raster = &data[pos..];
        if raster.len() != need {
            return Err(bad(&format!(
                "raster has {} bytes, expected {need}",
                raster.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            rgb: raster.to_vec(),
        })
    }

    /// Mean Rec.601 luma over all pixels, scaled to [0, 1].
    pub fn mean_luma(&self) -> f64 {
        let pixels = self.rgb.len() / 3;
        if pixels == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .sum();
        (sum / pixels as f64 / 255.0).clamp(0.0, 1.0)
    }
}

pub fn frame_name(index: u32) -> String {
    format!("frames/{index:06}.ppm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Black,
    White,
    /// Uniform frames whose level rises linearly from 0 to 255 across the
    /// sequence; strictly increasing for up to 256 frames.
    Gradient,
}

impl std::str::FromStr for Pattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "black" => Ok(Pattern::Black),
            "white" => Ok(Pattern::White),
            "gradient" => Ok(Pattern::Gradient),
            other => Err(format!("unknown pattern `{other}` (black|white|gradient)")),
        }
    }
}

pub fn generate(frames: u32, pattern: Pattern, width: u32, height: u32) -> Vec<Frame> {
    (0..frames)
        .map(|i| {
            let level = match pattern {
                Pattern::Black => 0,
                Pattern::White => 255,
                Pattern::Gradient if frames == 1 => 0,
                Pattern::Gradient => ((255 * i as u64) / (frames as u64 - 1)) as u8,
            };
            Frame::uniform(width, height, level)
        })
        .collect()
}

/// Serializes frames as a FrameSeq zip with fixed timestamps and entry order.
pub fn write_zip(frames: &[Frame], fps: f64) -> Result<Vec<u8>, FrameSeqError> {
    let first = frames
        .first()
        .ok_or_else(|| FrameSeqError::Meta("need at least one frame".into()))?;
    let meta = FrameSeqMeta {
        width: first.width,
        height: first.height,
        frame_count: frames.len() as u32,
        fps,
    };
    let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default());
    zw.start_file("meta.json", opts)?;
    zw.write_all(&serde_json::to_vec(&meta).expect("meta serializes"))?;
    for (i, f) in frames.iter().enumerate() {
        zw.start_file(frame_name(i as u32), opts)?;
        zw.write_all(&f.encode_ppm())?;
    }
    Ok(zw.finish()?.into_inner())
}

/// Reads `meta.json` out of a zip without extracting frames. `Ok(None)` when
/// the bytes are not a zip at all.
pub fn sniff_zip<R: Read + Seek>(reader: R) -> Result<Option<FrameSeqMeta>, FrameSeqError> {
    let mut archive = match zip::ZipArchive::new(reader) {
        Ok(a) => a,
        Err(zip::result::ZipError::InvalidArchive(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let meta = read_meta_entry(&mut archive)?;
    meta.validate()?;
    Ok(Some(meta))
}

fn read_meta_entry<R: Read + Seek>(
    archive: &mut zip::ZipArchive<R>,
) -> Result<FrameSeqMeta, FrameSeqError> {
    let entry = archive
        .by_name("meta.json")
        .map_err(|_| FrameSeqError::Meta("missing meta.json".into()))?;
    let mut buf = Vec::new();
    entry.take(64 * 1024).read_to_end(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| FrameSeqError::Meta(e.to_string()))
}

/// An extracted, validated FrameSeq directory.
#[derive(Debug, Clone)]
pub struct FrameSeqDir {
    pub root: PathBuf,
    pub meta: FrameSeqMeta,
}

impl FrameSeqDir {
    pub fn open(root: &Path) -> Result<Self, FrameSeqError> {
        let meta: FrameSeqMeta = serde_json::from_slice(&fs::read(root.join("meta.json"))?)
            .map_err(|e| FrameSeqError::Meta(e.to_string()))?;
        meta.validate()?;
        for i in 0..meta.frame_count {
            let p = root.join(frame_name(i));
            if !p.is_file() {
                return Err(FrameSeqError::BadFrame(format!("missing {}", frame_name(i))));
            }
        }
        Ok(FrameSeqDir {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn frame_path(&self, index: u32) -> PathBuf {
        self.root.join(frame_name(index))
    }

    pub fn frame_paths(&self) -> Vec<PathBuf> {
        (0..self.meta.frame_count).map(|i| self.frame_path(i)).collect()
    }

    pub fn read_frame(&self, index: u32) -> Result<Frame, FrameSeqError> {
        let frame = Frame::parse_ppm(&fs::read(self.frame_path(index))?)?;
        if frame.width != self.meta.width || frame.height != self.meta.height {
            return Err(FrameSeqError::BadFrame(format!(
                "{} has size {}x{}, meta says {}x{}",
                frame_name(index),
                frame.width,
                frame.height,
                self.meta.width,
                self.meta.height
            )));
        }
        Ok(frame)
    }
}

/// Writes frames as a FrameSeq directory.
pub fn write_dir(root: &Path, frames: &[Frame], fps: f64) -> Result<FrameSeqDir, FrameSeqError> {
    let first = frames
        .first()
        .ok_or_else(|| FrameSeqError::Meta("need at least one frame".into()))?;
    let meta = FrameSeqMeta {
        width: first.width,
        height: first.height,
        frame_count: frames.len() as u32,
        fps,
    };
    fs::create_dir_all(root.join("frames"))?;
    fs::write(root.join("meta.json"), serde_json::to_vec(&meta).expect("meta serializes"))?;
    for (i, f) in frames.iter().enumerate() {
        fs::write(root.join(frame_name(i as u32)), f.encode_ppm())?;
    }
    FrameSeqDir::open(root)
}

/// Extracts a FrameSeq zip into `dest`, validating every frame against the
/// metadata. Only `meta.json` and the expected frame names are extracted.
pub fn extract_zip(zip_path: &Path, dest: &Path) -> Result<FrameSeqDir, FrameSeqError> {
    let mut archive = zip::ZipArchive::new(fs::File::open(zip_path)?)?;
    let meta = read_meta_entry(&mut archive)?;
    meta.validate()?;
    let frame_bytes = 15 + 2 * 10 + meta.width as u64 * meta.height as u64 * 3;
    fs::create_dir_all(dest.join("frames"))?;
    fs::write(dest.join("meta.json"), serde_json::to_vec(&meta).expect("meta serializes"))?;
    for i in 0..meta.frame_count {
        let name = frame_name(i);
        let entry = archive
            .by_name(&name)
            .map_err(|_| FrameSeqError::BadFrame(format!("missing {name}")))?;
        let mut buf = Vec::new();
        entry.take(frame_bytes + 1).read_to_end(&mut buf)?;
        let frame = Frame::parse_ppm(&buf)?;
        if frame.width != meta.width || frame.height != meta.height {
            return Err(FrameSeqError::BadFrame(format!("{name} does not match meta size")));
        }
        fs::write(dest.join(&name), &buf)?;
    }
    Ok(FrameSeqDir {
        root: dest.to_path_buf(),
        meta,
    })
}
