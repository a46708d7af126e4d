//! Binary frame-stream format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CTCA"
//! 4       2     format version (u16, = 1)
//! 6       2     V*, log-posterior row length (u16)
//! 8       2     D, embedding length (u16)
//! 10      4     T, frame count (u32)
//! 14      4     frame rate in Hz (f32, metadata only)
//! 18      ...   T records of V* f32 log-posteriors then D f32 embedding values
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CTCA";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 18;
pub const DEFAULT_FRAME_RATE_HZ: f32 = 100.0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"CTCA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file is {actual} bytes, header implies {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("stream ended after {read} of {expected} frames")]
    Truncated { read: u32, expected: u32 },
    #[error("trailing bytes after the last frame")]
    TrailingBytes,
    #[error("wrote {written} frames, header declares {declared}")]
    FrameCountMismatch { written: u32, declared: u32 },
    #[error("{what} has length {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} = {value} does not fit the header field")]
    TooLarge { what: &'static str, value: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub vocab_len: u16,
    pub dim: u16,
    pub frames: u32,
    pub frame_rate_hz: f32,
}

impl StreamHeader {
    pub fn new(vocab_len: usize, dim: usize, frames: usize) -> Result<Self, FormatError> {
        let vocab_len = u16::try_from(vocab_len).map_err(|_| FormatError::TooLarge {
            what: "V*",
            value: vocab_len,
        })?;
        let dim = u16::try_from(dim).map_err(|_| FormatError::TooLarge { what: "D", value: dim })?;
        let frames = u32::try_from(frames).map_err(|_| FormatError::TooLarge { what: "T", value: frames })?;
        Ok(Self {
            vocab_len,
            dim,
            frames,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        })
    }

    /// Floats per frame record.
    pub fn record_floats(&self) -> usize {
        self.vocab_len as usize + self.dim as usize
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.frames as u64 * self.record_floats() as u64 * 4
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u16::<LittleEndian>(self.vocab_len)?;
        w.write_u16::<LittleEndian>(self.dim)?;
        w.write_u32::<LittleEndian>(self.frames)?;
        w.write_f32::<LittleEndian>(self.frame_rate_hz)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::BadVersion(version));
        }
        Ok(Self {
            vocab_len: r.read_u16::<LittleEndian>()?,
            dim: r.read_u16::<LittleEndian>()?,
            frames: r.read_u32::<LittleEndian>()?,
            frame_rate_hz: r.read_f32::<LittleEndian>()?,
        })
    }
}

/// Frame-at-a-time reader; holds one record in memory.
pub struct StreamReader<R> {
    inner: R,
    header: StreamHeader,
    read: u32,
    buf: Vec<u8>,
}

impl StreamReader<BufReader<File>> {
    /// Opens a file and checks its length against the header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let file = File::open(path)?;
        let actual = file.metadata()?.len();
        let reader = Self::new(BufReader::new(file))?;
        let expected = reader.header.file_len();
        if actual != expected {
            return Err(FormatError::LengthMismatch { expected, actual });
        }
        Ok(reader)
    }
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self, FormatError> {
        let header = StreamHeader::read_from(&mut inner)?;
        let buf = vec![0u8; header.record_floats() * 4];
        Ok(Self {
            inner,
            header,
            read: 0,
            buf,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn frames_read(&self) -> u32 {
        self.read
    }

    fn check_buffers(&self, lp_len: usize, emb_len: usize) -> Result<(), FormatError> {
        let (v, d) = (self.header.vocab_len as usize, self.header.dim as usize);
        if lp_len != v {
            return Err(FormatError::DimensionMismatch {
                what: "log-posterior buffer",
                expected: v,
                actual: lp_len,
            });
        }
        if emb_len != d {
            return Err(FormatError::DimensionMismatch {
                what: "embedding buffer",
                expected: d,
                actual: emb_len,
            });
        }
        Ok(())
    }

    /// Loads the next record into `buf`; `Ok(false)` after the last frame.
    fn read_record(&mut self) -> Result<bool, FormatError> {
        if self.read == self.header.frames {
            return Ok(false);
        }
        self.inner.read_exact(&mut self.buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FormatError::Truncated {
                    read: self.read,
                    expected: self.header.frames,
                }
            } else {
                FormatError::Io(e)
            }
        })?;
        self.read += 1;
        Ok(true)
    }

    /// Reads the next record into the given buffers; `Ok(false)` after the last frame.
    pub fn next_frame(&mut self, log_posteriors: &mut [f64], embedding: &mut [f64]) -> Result<bool, FormatError> {
        self.check_buffers(log_posteriors.len(), embedding.len())?;
        if !self.read_record()? {
            return Ok(false);
        }
        let v = log_posteriors.len();
        for (i, x) in log_posteriors.iter_mut().enumerate() {
            *x = LittleEndian::read_f32(&self.buf[4 * i..]) as f64;
        }
        for (i, x) in embedding.iter_mut().enumerate() {
            *x = LittleEndian::read_f32(&self.buf[4 * (v + i)..]) as f64;
        }
        Ok(true)
    }

    /// As [`next_frame`](Self::next_frame), keeping the stored `f32` values.
    pub fn next_frame_f32(&mut self, log_posteriors: &mut [f32], embedding: &mut [f32]) -> Result<bool, FormatError> {
        self.check_buffers(log_posteriors.len(), embedding.len())?;
        if !self.read_record()? {
            return Ok(false);
        }
        let v = log_posteriors.len();
        LittleEndian::read_f32_into(&self.buf[..4 * v], log_posteriors);
        LittleEndian::read_f32_into(&self.buf[4 * v..], embedding);
        Ok(true)
    }

    /// Checks that every declared frame was read and nothing follows.
    pub fn finish(mut self) -> Result<(), FormatError> {
        if self.read != self.header.frames {
            return Err(FormatError::Truncated {
                read: self.read,
                expected: self.header.frames,
            });
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::TrailingBytes),
        }
    }
}

pub struct StreamWriter<W: Write> {
    inner: W,
    header: StreamHeader,
    written: u32,
}

impl StreamWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: StreamHeader) -> Result<Self, FormatError> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, header: StreamHeader) -> Result<Self, FormatError> {
        header.write_to(&mut inner)?;
        Ok(Self { inner, header, written: 0 })
    }

    pub fn write_frame(&mut self, log_posteriors: &[f32], embedding: &[f32]) -> Result<(), FormatError> {
        if log_posteriors.len() != self.header.vocab_len as usize {
            return Err(FormatError::DimensionMismatch {
                what: "log-posterior row",
                expected: self.header.vocab_len as usize,
                actual: log_posteriors.len(),
            });
        }
        if embedding.len() != self.header.dim as usize {
            return Err(FormatError::DimensionMismatch {
                what: "embedding",
                expected: self.header.dim as usize,
                actual: embedding.len(),
            });
        }
        if self.written == self.header.frames {
            return Err(FormatError::FrameCountMismatch {
                written: self.written + 1,
                declared: self.header.frames,
            });
        }
        for &x in log_posteriors.iter().chain(embedding) {
            self.inner.write_f32::<LittleEndian>(x)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, FormatError> {
        if self.written != self.header.frames {
            return Err(FormatError::FrameCountMismatch {
                written: self.written,
                declared: self.header.frames,
            });
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// A whole stream held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFile {
    pub header: StreamHeader,
    /// `T x V*`, row-major.
    pub log_posteriors: Vec<f32>,
    /// `T x D`, row-major.
    pub embeddings: Vec<f32>,
}

impl StreamFile {
    pub fn frames(&self) -> usize {
        self.header.frames as usize
    }

    pub fn log_posterior_row(&self, t: usize) -> &[f32] {
        let v = self.header.vocab_len as usize;
        &self.log_posteriors[t * v..(t + 1) * v]
    }

    pub fn embedding_row(&self, t: usize) -> &[f32] {
        let d = self.header.dim as usize;
        &self.embeddings[t * d..(t + 1) * d]
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<W, FormatError> {
        let mut writer = StreamWriter::new(w, self.header)?;
        for t in 0..self.frames() {
            writer.write_frame(self.log_posterior_row(t), self.embedding_row(t))?;
        }
        writer.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.header.file_len() as usize);
        self.write_to(&mut buf).expect("in-memory stream is self-consistent");
        buf
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self, FormatError> {
        let mut reader = StreamReader::new(r)?;
        let h = *reader.header();
        let (v, d) = (h.vocab_len as usize, h.dim as usize);
        let mut log_posteriors = Vec::with_capacity(h.frames as usize * v);
        let mut embeddings = Vec::with_capacity(h.frames as usize * d);
        let mut lp = vec![0.0f32; v];
        let mut emb = vec![0.0f32; d];
        while reader.next_frame_f32(&mut lp, &mut emb)? {
            log_posteriors.extend_from_slice(&lp);
            embeddings.extend_from_slice(&emb);
        }
        reader.finish()?;
        Ok(Self {
            header: h,
            log_posteriors,
            embeddings,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        Self::from_reader(bytes)
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let file = File::open(path)?;
        let actual = file.metadata()?.len();
        let s = Self::from_reader(BufReader::new(file))?;
        if s.header.file_len() != actual {
            return Err(FormatError::LengthMismatch {
                expected: s.header.file_len(),
                actual,
            });
        }
        Ok(s)
    }
}
