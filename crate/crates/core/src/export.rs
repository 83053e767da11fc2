//! Image export as 16-bit binary graymaps and CSV grids.

use std::path::Path;

use thiserror::Error;

use crate::field::{FieldError, FieldImage};
use crate::tensor::checkpoint::write_atomic;

pub const PGM_MAX: u16 = 65535;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("malformed graymap: {0}")]
    Pgm(String),
    #[error("malformed image CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * f64::from(PGM_MAX)).round() as u16
}

/// `P5` graymap with maxval 65535; samples are big-endian, row-major.
pub fn encode_pgm(image: &FieldImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), PGM_MAX).into_bytes();
    out.reserve(image.values().len() * 2);
    for &v in image.values() {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, ExportError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ExportError::Pgm("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ExportError::Pgm("non-ASCII header".into()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FieldImage, ExportError> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P5" {
        return Err(ExportError::Pgm("magic is not P5".into()));
    }
    let mut num = |what: &str| -> Result<usize, ExportError> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| ExportError::Pgm(format!("bad {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != usize::from(PGM_MAX) {
        return Err(ExportError::Pgm(format!("maxval {maxval}, expected {PGM_MAX}")));
    }
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != width * height * 2 {
        return Err(ExportError::Pgm(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            width * height * 2
        )));
    }
    let values = payload
        .chunks_exact(2)
        .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / f64::from(PGM_MAX))
        .collect();
    Ok(FieldImage::new(height, width, values)?)
}

/// One CSV line per image row, no header.
pub fn encode_csv(image: &FieldImage) -> String {
    let mut s = String::with_capacity(image.values().len() * 12);
    for r in 0..image.height() {
        let row: Vec<String> = image.row(r).iter().map(|v| format!("{v:.9}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_csv_row(line: &str) -> Result<Vec<f64>, ExportError> {
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| ExportError::Csv(format!("not a number: {:?}", t.trim())))
        })
        .collect()
}

pub fn decode_csv(text: &str) -> Result<FieldImage, ExportError> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_csv_row)
        .collect::<Result<Vec<_>, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(ExportError::Csv(format!("row {bad} is ragged")));
    }
    Ok(FieldImage::new(rows.len(), width, rows.concat())?)
}

/// Writes `<stem>.pgm` and `<stem>.csv` side by side.
pub fn export_image(image: &FieldImage, pgm: &Path, csv: &Path) -> Result<(), ExportError> {
    write_atomic(pgm, &encode_pgm(image))?;
    write_atomic(csv, encode_csv(image).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_has_zero_payload() {
        let bytes = encode_pgm(&FieldImage::zeros(3, 4));
        let header = b"P5\n4 3\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 24);
    }

    #[test]
    fn max_pixel_is_65535() {
        let img = FieldImage::new(1, 2, vec![1.0, 0.5]).unwrap();
        let bytes = encode_pgm(&img);
        let n = bytes.len();
        assert_eq!(u16::from_be_bytes([bytes[n - 4], bytes[n - 3]]), 65535);
        assert_eq!(u16::from_be_bytes([bytes[n - 2], bytes[n - 1]]), 32768);
    }

    #[test]
    fn pgm_and_csv_roundtrip() {
        let values: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let img = FieldImage::new(5, 7, values).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        let csv = decode_csv(&encode_csv(&img)).unwrap();
        for (a, b) in img.values().iter().zip(csv.values()) {
            assert!((a - b).abs() <= 5e-10);
        }
        assert!(decode_pgm(b"P2\n1 1\n65535\n").is_err());
        assert!(decode_csv("0.1,0.2\n0.3\n").is_err());
    }
}
