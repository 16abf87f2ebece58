//! Binary PGM (P5) / PPM (P6) read and write, maxval 255, plus the
//! color-coded change-map renderer.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, ImageError> {
    Err(ImageError::Format(msg.into()))
}

/// Grayscale (1 channel) or RGB (3 channels) 8-bit image, row-major,
/// channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Image {
        assert!(channels == 1 || channels == 3);
        Image {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }
}

/// Read one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<u64, ImageError> {
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
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return format_err("expected integer in header");
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse::<u64>()
        .map_err(|_| ImageError::Format("header integer overflow".into()))
}

pub fn read(path: &Path) -> Result<Image, ImageError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 {
        return format_err("truncated file");
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return format_err(format!("unsupported magic in {}", path.display())),
    };
    let mut pos = 2;
    let width = next_token(&bytes, &mut pos)? as usize;
    let height = next_token(&bytes, &mut pos)? as usize;
    let maxval = next_token(&bytes, &mut pos)?;
    if maxval != 255 {
        return format_err(format!("unsupported maxval {maxval} (want 255)"));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return format_err("missing raster separator");
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos < need {
        return format_err(format!(
            "raster too short: have {}, need {need}",
            bytes.len() - pos
        ));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write(path: &Path, img: &Image) -> Result<(), ImageError> {
    assert_eq!(img.data.len(), img.width * img.height * img.channels);
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

/// Normalize a mask image (any nonzero byte counts as "changed") to 0/1.
pub fn to_binary_mask(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 1, "masks must be grayscale");
    img.data.iter().map(|&v| (v > 127) as u8).collect()
}

/// Color-coded qualitative change map: TP white, FP red, FN green, TN black.
pub fn change_map(pred: &[u8], truth: &[u8], width: usize, height: usize) -> Image {
    assert_eq!(pred.len(), width * height);
    assert_eq!(truth.len(), width * height);
    let mut img = Image::new(width, height, 3);
    for i in 0..pred.len() {
        let rgb: [u8; 3] = match (pred[i], truth[i]) {
            (1, 1) => [255, 255, 255],
            (1, 0) => [255, 0, 0],
            (0, 1) => [0, 255, 0],
            _ => [0, 0, 0],
        };
        img.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }
    img
}
