//! Binary (P5) PGM images, 8-bit grayscale.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Data(format!(
            "pgm write: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = std::fs::read(path)?;
    parse_pgm(&buf).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

/// Parses an in-memory P5 PGM; errors carry no file context.
pub fn parse_pgm(buf: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    // header tokens may be separated by whitespace and '#' comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < buf.len() {
            match buf[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header number out of range".to_string())?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err("only maxval 255 is supported".into());
    }
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| "image dimensions overflow".to_string())?;
    if buf.len() - pos != need {
        return Err("raster size does not match header".into());
    }
    Ok((width, height, buf[pos..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn rejects_wrong_pixel_count_on_write() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("t.pgm"), 4, 3, &[0u8; 5]).is_err());
    }

    #[test]
    fn rejects_ascii_pgm_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p2 = dir.path().join("a.pgm");
        std::fs::write(&p2, b"P2\n2 2\n255\n0 1 2 3\n").unwrap();
        assert!(read_pgm(&p2).is_err());

        let trunc = dir.path().join("b.pgm");
        std::fs::write(&trunc, b"P5\n2 2\n255\nab").unwrap();
        assert!(read_pgm(&trunc).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\nxy").unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, b"xy");
    }
}
