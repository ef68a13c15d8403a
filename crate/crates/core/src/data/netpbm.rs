//! Binary PGM (P5) and PPM (P6) with maxval = K-1: header-trivial,
//! lossless, bit-exact round trips.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Lexer<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<(usize, &'a [u8])> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, "unexpected end of header"));
        }
        Ok((start, &self.bytes[start..self.pos]))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (off, tok) = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(off, format!("bad {what}")))
    }
}

/// Read a binary PGM/PPM. When `expected_levels` is given, the file's
/// maxval must equal levels - 1.
pub fn read_image(path: &Path, expected_levels: Option<usize>) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_image_bytes(&bytes, expected_levels)
}

pub fn read_image_bytes(bytes: &[u8], expected_levels: Option<usize>) -> Result<Image> {
    let mut lx = Lexer { bytes, pos: 0 };
    let (off, magic) = lx.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(parse_err(off, "not a binary PGM (P5) or PPM (P6)")),
    };
    let width = lx.number("width")?;
    let height = lx.number("height")?;
    let maxval_off = lx.pos;
    let maxval = lx.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(
            maxval_off,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if let Some(levels) = expected_levels {
        if maxval + 1 != levels {
            return Err(parse_err(
                maxval_off,
                format!("maxval {maxval} does not match configured {levels} levels"),
            ));
        }
    }
    // Exactly one whitespace byte separates the header from the raster.
    if lx.pos >= bytes.len() || !bytes[lx.pos].is_ascii_whitespace() {
        return Err(parse_err(lx.pos, "missing raster separator"));
    }
    lx.pos += 1;
    let need = width * height * channels;
    let raster = &bytes[lx.pos..];
    if raster.len() < need {
        return Err(parse_err(
            lx.pos + raster.len(),
            format!("truncated raster: wanted {need} bytes, file ends"),
        ));
    }
    // Raster is row-major interleaved; Image stores planar [C, H, W].
    let mut img = Image::zeros(channels, height, width);
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let v = raster[(r * width + c) * channels + ch] as u16;
                if v as usize > maxval {
                    return Err(parse_err(
                        lx.pos + (r * width + c) * channels + ch,
                        format!("sample {v} exceeds maxval {maxval}"),
                    ));
                }
                img.set(ch, r, c, v);
            }
        }
    }
    Ok(img)
}

/// Write a binary PGM (C=1) or PPM (C=3) with maxval = levels - 1.
pub fn write_image(path: &Path, img: &Image, levels: usize) -> Result<()> {
    let bytes = write_image_bytes(img, levels)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_image_bytes(img: &Image, levels: usize) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::dim(format!("netpbm wants 1 or 3 channels, got {c}"))),
    };
    if !(2..=256).contains(&levels) {
        return Err(Error::dim(format!(
            "netpbm supports 2..=256 levels, got {levels}"
        )));
    }
    let maxval = levels - 1;
    if let Some(&v) = img.data().iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Index(format!("sample {v} exceeds maxval {maxval}")));
    }
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                out.push(img.at(ch, r, c) as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng;

    #[test]
    fn two_by_two_pgm_example() {
        let bytes = b"P5\n2 2\n3\n\x00\x01\x02\x03";
        let img = read_image_bytes(bytes, Some(4)).unwrap();
        assert_eq!(img.data(), &[0, 1, 2, 3]);
        assert_eq!((img.height, img.width), (2, 2));
    }

    #[test]
    fn maxval_mismatch_is_rejected() {
        let bytes = b"P5\n1 1\n3\n\x00";
        let err = read_image_bytes(bytes, Some(16)).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn truncated_raster_names_the_byte_offset() {
        let bytes = b"P5\n2 2\n255\n\x00\x01";
        let err = read_image_bytes(bytes, None).unwrap_err();
        match err {
            Error::Parse { offset, ref msg } => {
                assert_eq!(offset, bytes.len());
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n1 1\n1\n\x01";
        let img = read_image_bytes(bytes, Some(2)).unwrap();
        assert_eq!(img.data(), &[1]);
    }

    proptest! {
        #[test]
        fn prop_round_trip_is_identity(seed in 0u64..200) {
            for (channels, levels) in [(1usize, 2usize), (1, 4), (3, 16), (3, 256)] {
                let mut img = Image::zeros(channels, 8, 8);
                for i in 0..img.data().len() {
                    img.data_mut()[i] =
                        (rng::stream_u64(seed, &[channels as u64, levels as u64, i as u64])
                            % levels as u64) as u16;
                }
                let bytes = write_image_bytes(&img, levels).unwrap();
                let back = read_image_bytes(&bytes, Some(levels)).unwrap();
                prop_assert_eq!(back, img);
            }
        }
    }
}
