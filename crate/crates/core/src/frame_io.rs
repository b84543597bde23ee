//! Detector frames, peak records, and their on-disk formats.
//!
//! Frames are stored in the `BFRM` container: the four magic bytes, then
//! little-endian `u32` fields `version, width, height, n_frames`, then each
//! raster as row-major little-endian `f32`. Peak lists are CSV with the header
//! `frame,center_y,center_z,amplitude,source`.
//!
//! Coordinates follow one convention everywhere: `y` is the column axis, `z`
//! is the row axis, and pixel `(row, col)` has its center at `(y, z) = (col, row)`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = *b"BFRM";
pub const FRAME_VERSION: u32 = 1;
pub const FRAME_HEADER_LEN: usize = 20;

pub const PEAK_CSV_HEADER: [&str; 5] = ["frame", "center_y", "center_z", "amplitude", "source"];

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"BFRM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported frame file version {0} (expected {FRAME_VERSION})")]
    VersionMismatch(u32),
    #[error("file truncated inside the header")]
    TruncatedHeader,
    #[error("file truncated inside frame {frame}")]
    Truncated { frame: usize },
    #[error("frame {index} is {width}x{height}, stack is {expected_width}x{expected_height}")]
    InconsistentDims {
        index: usize,
        width: usize,
        height: usize,
        expected_width: usize,
        expected_height: usize,
    },
    #[error("frame has {len} counts, expected {width}x{height}")]
    CountMismatch { len: usize, width: usize, height: usize },
    #[error("frame dimensions must be at least 1x1")]
    EmptyFrame,
    #[error("malformed peak row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One detector image: photon counts, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<f32>,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, counts: Vec<f32>, frame_index: usize) -> Result<Self, FrameIoError> {
        if width == 0 || height == 0 {
            return Err(FrameIoError::EmptyFrame);
        }
        if counts.len() != width * height {
            return Err(FrameIoError::CountMismatch { len: counts.len(), width, height });
        }
        Ok(Self { width, height, counts, frame_index })
    }

    pub fn filled(width: usize, height: usize, value: f32, frame_index: usize) -> Self {
        assert!(width > 0 && height > 0, "frame must be non-empty");
        Self { width, height, counts: vec![value; width * height], frame_index }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.counts[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.counts[row * self.width + col] = value;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.counts
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// An ordered sequence of equally sized frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameStack {
    pub frames: Vec<Frame>,
}

impl FrameStack {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` shared by every frame, `None` for an empty stack.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }

    fn check_dims(&self) -> Result<(usize, usize), FrameIoError> {
        let Some((w, h)) = self.dims() else {
            return Ok((0, 0));
        };
        for (index, f) in self.frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(FrameIoError::InconsistentDims {
                    index,
                    width: f.width,
                    height: f.height,
                    expected_width: w,
                    expected_height: h,
                });
            }
            if f.counts.len() != w * h {
                return Err(FrameIoError::CountMismatch { len: f.counts.len(), width: w, height: h });
            }
        }
        Ok((w, h))
    }
}

/// Which method produced a peak position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeakSource {
    GroundTruth,
    VoigtFit,
    BraggNN,
    Maxima,
}

impl PeakSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PeakSource::GroundTruth => "ground_truth",
            PeakSource::VoigtFit => "voigt_fit",
            PeakSource::BraggNN => "braggnn",
            PeakSource::Maxima => "maxima",
        }
    }
}

impl fmt::Display for PeakSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeakSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ground_truth" => Ok(PeakSource::GroundTruth),
            "voigt_fit" => Ok(PeakSource::VoigtFit),
            "braggnn" => Ok(PeakSource::BraggNN),
            "maxima" => Ok(PeakSource::Maxima),
            other => Err(format!("unknown peak source {other:?}")),
        }
    }
}

/// A located (or ground-truth) peak center in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakRecord {
    pub frame_index: usize,
    pub center_y: f64,
    pub center_z: f64,
    pub amplitude: f64,
    pub source: PeakSource,
}

pub fn write_frames_to<W: Write>(stack: &FrameStack, mut out: W) -> Result<(), FrameIoError> {
    let (w, h) = stack.check_dims()?;
    let mut header = Vec::with_capacity(FRAME_HEADER_LEN);
    header.extend_from_slice(&FRAME_MAGIC);
    for field in [FRAME_VERSION, w as u32, h as u32, stack.len() as u32] {
        header.extend_from_slice(&field.to_le_bytes());
    }
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(w * h * 4);
    for frame in &stack.frames {
        buf.clear();
        for v in &frame.counts {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_frames(stack: &FrameStack, path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let file = File::create(path)?;
    write_frames_to(stack, BufWriter::new(file))
}

/// Reads exactly `buf.len()` bytes, returning `false` on a short read.
fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub fn read_frames_from<R: Read>(mut input: R) -> Result<FrameStack, FrameIoError> {
    let mut magic = [0u8; 4];
    if !read_full(&mut input, &mut magic)? {
        return Err(FrameIoError::TruncatedHeader);
    }
    if magic != FRAME_MAGIC {
        return Err(FrameIoError::BadMagic(magic));
    }
    let mut fields = [0u8; 16];
    if !read_full(&mut input, &mut fields)? {
        return Err(FrameIoError::TruncatedHeader);
    }
    let field = |i: usize| u32::from_le_bytes(fields[i * 4..i * 4 + 4].try_into().unwrap());
    let (version, width, height, n_frames) = (field(0), field(1) as usize, field(2) as usize, field(3) as usize);
    if version != FRAME_VERSION {
        return Err(FrameIoError::VersionMismatch(version));
    }
    if n_frames > 0 && (width == 0 || height == 0) {
        return Err(FrameIoError::EmptyFrame);
    }
    let mut raw = vec![0u8; width * height * 4];
    let mut frames = Vec::with_capacity(n_frames.min(4096));
    for frame_index in 0..n_frames {
        if !read_full(&mut input, &mut raw)? {
            return Err(FrameIoError::Truncated { frame: frame_index });
        }
        let counts = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        frames.push(Frame { width, height, counts, frame_index });
    }
    Ok(FrameStack { frames })
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<FrameStack, FrameIoError> {
    let file = File::open(path)?;
    read_frames_from(BufReader::new(file))
}

pub fn write_peaks_to<W: Write>(peaks: &[PeakRecord], out: W) -> Result<(), FrameIoError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(PEAK_CSV_HEADER)?;
    for p in peaks {
        wtr.write_record([
            p.frame_index.to_string(),
            format!("{:.8}", p.center_y),
            format!("{:.8}", p.center_z),
            format!("{:.6}", p.amplitude),
            p.source.as_str().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_peaks(peaks: &[PeakRecord], path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    write_peaks_to(peaks, BufWriter::new(File::create(path)?))
}

pub fn read_peaks_from<R: Read>(input: R) -> Result<Vec<PeakRecord>, FrameIoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(PEAK_CSV_HEADER.iter().copied()) {
        return Err(FrameIoError::MalformedRow { line: 1, reason: format!("unexpected header {header:?}") });
    }
    let mut peaks = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| FrameIoError::MalformedRow { line, reason };
        if record.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", record.len())));
        }
        let num = |i: usize| -> Result<f64, FrameIoError> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", PEAK_CSV_HEADER[i])))
        };
        peaks.push(PeakRecord {
            frame_index: record[0].trim().parse().map_err(|e| bad(format!("field frame: {e}")))?,
            center_y: num(1)?,
            center_z: num(2)?,
            amplitude: num(3)?,
            source: record[4].trim().parse().map_err(bad)?,
        });
    }
    Ok(peaks)
}

pub fn read_peaks(path: impl AsRef<Path>) -> Result<Vec<PeakRecord>, FrameIoError> {
    read_peaks_from(BufReader::new(File::open(path)?))
}
