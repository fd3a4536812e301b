//! Binary PGM (P5) encoding and decoding. Images travel as 8-bit grayscale;
//! segmentation masks reuse the container with a small maxval and raw class
//! indices as samples. Decode errors carry the byte offset of the problem.

use crate::error::{Error, Result};
use crate::image::Image;

/// A decoded P5 raster. Samples are row-major, one per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

/// Serializes samples as P5: one byte per sample when `maxval <= 255`, two
/// big-endian bytes otherwise.
pub fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || samples.len() != width * height {
        return Err(Error::Dimension {
            op: "encode_pgm",
            lhs: vec![width, height],
            rhs: vec![samples.len()],
        });
    }
    if maxval == 0 {
        return Err(Error::Usage("pgm maxval must be positive".into()));
    }
    if let Some(&bad) = samples.iter().find(|&&s| s > maxval) {
        return Err(Error::Usage(format!(
            "pgm sample {bad} exceeds maxval {maxval}"
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval <= 255 {
        out.extend(samples.iter().map(|&s| s as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            what: what.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn read_int(&mut self, what: &str) -> Result<u64> {
        self.skip_separators();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(format!("expected {what} digits")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse::<u64>()
            .map_err(|_| Error::Format {
                offset: start,
                what: format!("{what} out of range"),
            })
    }
}

/// Parses a P5 raster. Header fields may be separated by any whitespace or
/// comments; exactly one whitespace byte separates the maxval from the
/// payload, and the payload must end the input.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(cur.fail("expected P5 magic"));
    }
    cur.pos = 2;
    let width = cur.read_int("width")? as usize;
    let height = cur.read_int("height")? as usize;
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image extent"));
    }
    let maxval = cur.read_int("maxval")?;
    if maxval == 0 || maxval > 65_535 {
        return Err(cur.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    let maxval = maxval as u16;
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.fail("expected single whitespace before payload")),
    }
    let per_sample = if maxval <= 255 { 1 } else { 2 };
    let need = width * height * per_sample;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(cur.fail(format!("payload needs {need} bytes, found {have}")));
    }
    if have > need {
        return Err(Error::Format {
            offset: cur.pos + need,
            what: format!("{} trailing bytes after payload", have - need),
        });
    }
    let payload = &bytes[cur.pos..];
    let samples: Vec<u16> = if per_sample == 1 {
        payload.iter().map(|&b| u16::from(b)).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(at) = samples.iter().position(|&s| s > maxval) {
        return Err(Error::Format {
            offset: cur.pos + at * per_sample,
            what: format!("sample {} exceeds maxval {maxval}", samples[at]),
        });
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        samples,
    })
}

/// Quantizes `[0, 1]` samples to 8-bit and serializes as P5.
pub fn image_to_pgm(img: &Image) -> Vec<u8> {
    let samples: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    encode_pgm(img.width(), img.height(), 255, &samples).expect("image extents are valid")
}

/// Decodes a P5 raster into `[0, 1]` by dividing by its maxval.
pub fn pgm_to_image(bytes: &[u8]) -> Result<Image> {
    let pgm = decode_pgm(bytes)?;
    let scale = 1.0 / f64::from(pgm.maxval);
    let data = pgm.samples.iter().map(|&s| f64::from(s) * scale).collect();
    Image::new(pgm.width, pgm.height, data)
}
