//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ftns::{read_bytes, write_bytes};

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "PNM",
        reason: reason.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("non-numeric header field"))
}

/// Decodes P5/P6 bytes into `(width, height, channels, samples)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(bad(format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Ok((width, height, channels, bytes[pos..pos + n].to_vec()))
}

pub fn encode(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn write(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<()> {
    write_bytes(path.as_ref(), &encode(width, height, channels, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_comment() {
        let px = vec![1u8, 2, 3, 4, 5, 6];
        let mut b = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        b.extend_from_slice(&px);
        assert_eq!(decode(&b).unwrap(), (2, 1, 3, px.clone()));
        assert_eq!(decode(&encode(2, 1, 3, &px)).unwrap(), (2, 1, 3, px));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
