//! Raster images and binary PNM (PGM P5 / PPM P6) reading and writing,
//! maxval 255, pixel values scaled to [0, 1].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An image with pixel values in [0, 1], stored row-major with channels
/// innermost. Grayscale (1 channel) or RGB (3 channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!(
                "pixel buffer of {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean squared error between two images of identical shape.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes)
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_header_token(bytes, &mut pos)
        .ok_or_else(|| Error::Image("missing magic".to_string()))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Image(format!("unsupported magic {other:?}"))),
    };
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(Error::Image(format!(
            "payload truncated: need {} bytes, found {}",
            expected,
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(width, height, channels, data)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_pnm(img))?;
    Ok(())
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

fn next_header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    // Skip whitespace and '#' comments.
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
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_header_token(bytes, pos)
        .ok_or_else(|| Error::Image(format!("missing {what} in header")))?;
    tok.parse()
        .map_err(|_| Error::Image(format!("bad {what} {tok:?}")))
}
