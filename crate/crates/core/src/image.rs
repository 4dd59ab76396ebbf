//! Float images and their on-disk encodings (8-bit PNG, 32-bit PFM).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error(transparent)]
    Codec(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major, channel-interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::ShapeMismatch(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean over `factor × factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Image {
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c) as f64;
                        }
                    }
                    out.set(x, y, c, (acc * norm) as f32);
                }
            }
        }
        out
    }

    /// Quantizes to 8 bits and back, exactly what a PNG round trip produces.
    pub fn quantized_u8(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(ImageError::ShapeMismatch(format!("cannot write {c} channels as PNG"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// 16-bit grayscale PNG of a single-channel image scaled by `1/max_value`.
    pub fn write_png16(&self, path: &Path, max_value: f32) -> Result<(), ImageError> {
        if self.channels != 1 {
            return Err(ImageError::ShapeMismatch("16-bit PNG needs one channel".into()));
        }
        let scale = if max_value > 0.0 { 1.0 / max_value } else { 1.0 };
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                let v = (self.get(x as usize, y as usize, 0) * scale).clamp(0.0, 1.0);
                image::Luma([(v * 65535.0).round() as u16])
            },
        );
        buf.save(path)?;
        Ok(())
    }

    /// Reads an 8-bit PNG into `[0, 1]` floats.
    pub fn read_png(path: &Path) -> Result<Image, ImageError> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img {
            image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
            image::DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        Ok(Image {
            width: w,
            height: h,
            channels,
            data: raw.into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }

    /// Little-endian PFM, scanlines bottom-up.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(ImageError::ShapeMismatch(format!("cannot write {c} channels as PFM"))),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Image, ImageError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (width, height, channels, little_endian) = read_pfm_header(&mut r)?;
        let row = width * channels;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != row * height * 4 {
            return Err(ImageError::Pfm(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                row * height * 4
            )));
        }
        let mut data = vec![0f32; row * height];
        for (i, b) in payload.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_token(r: &mut impl BufRead) -> Result<String, ImageError> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    String::from_utf8(tok).map_err(|_| ImageError::Pfm("non-ascii header".into()))
}

fn read_pfm_header(r: &mut impl BufRead) -> Result<(usize, usize, usize, bool), ImageError> {
    let channels = match read_token(r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(ImageError::Pfm(format!("bad tag `{other}`"))),
    };
    let parse = |s: String| s.parse::<usize>().map_err(|_| ImageError::Pfm(format!("bad dimension `{s}`")));
    let width = parse(read_token(r)?)?;
    let height = parse(read_token(r)?)?;
    let scale_tok = read_token(r)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| ImageError::Pfm(format!("bad scale `{scale_tok}`")))?;
    Ok((width, height, channels, scale < 0.0))
}

/// Reads only the dimensions of a PFM file.
pub fn pfm_dimensions(path: &Path) -> Result<(usize, usize), ImageError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (w, h, _, _) = read_pfm_header(&mut r)?;
    Ok((w, h))
}

/// Four-channel `(r, g, b, τ)` image with per-channel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbtImage {
    pub pixels: Image,
    pub valid: [bool; 4],
}

impl RgbtImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            pixels: Image::new(width, height, 4),
            valid: [false; 4],
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn rgb(&self) -> Image {
        let mut out = Image::new(self.width(), self.height(), 3);
        for (o, p) in out.data.chunks_exact_mut(3).zip(self.pixels.data.chunks_exact(4)) {
            o.copy_from_slice(&p[..3]);
        }
        out
    }

    pub fn thermal(&self) -> Image {
        self.pixels.channel(3)
    }

    pub fn box_downsample(&self, factor: usize) -> RgbtImage {
        RgbtImage {
            pixels: self.pixels.box_downsample(factor),
            valid: self.valid,
        }
    }
}
