//! Linear raw images and the portable float map (PFM) codec.
//!
//! Pixels are stored row-major, top row first, as black-level-subtracted
//! linear RGB. The mask marks pixels that participate in statistics; masked
//! out pixels (calibration charts, saturated regions) are carried along but
//! ignored by every consumer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

impl RawImage {
    /// Builds an image with every pixel masked in.
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels
            .iter()
            .find(|p| p.iter().any(|c| !c.is_finite() || *c < 0.0))
        {
            return Err(Error::Domain(format!(
                "raw pixels must be finite and non-negative, found {p:?}"
            )));
        }
        Ok(Self {
            width,
            height,
            mask: vec![true; pixels.len()],
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    /// A `width`x`height` image filled with a single color.
    pub fn uniform(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, image has {} pixels",
                mask.len(),
                self.pixels.len()
            )));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn is_masked_in(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Masked-in pixels, in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.pixels
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
    }

    /// Multiplies each channel by its gain. Gains must be non-negative.
    pub fn scale_channels(&self, gains: [f64; 3]) -> Result<Self> {
        let pixels = self
            .pixels
            .iter()
            .map(|p| [p[0] * gains[0], p[1] * gains[1], p[2] * gains[2]])
            .collect();
        Self::new(self.width, self.height, pixels)?.with_mask(self.mask.clone())
    }

    /// Applies `f` to every pixel, keeping the mask.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let pixels = self.pixels.iter().map(|&p| f(p)).collect();
        Self::new(self.width, self.height, pixels)?.with_mask(self.mask.clone())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + width]);
            mask.extend_from_slice(&self.mask[row + x0..row + x0 + width]);
        }
        Self::new(width, height, pixels)?.with_mask(mask)
    }

    /// Area-weighted (box filter) resampling to `width`x`height`.
    ///
    /// An output pixel is masked in only if every source pixel overlapping it
    /// is masked in.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::Shape("resize target must be non-empty".into()));
        }
        let xs = box_weights(self.width, width);
        let ys = box_weights(self.height, height);
        let mut pixels = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for wy in &ys {
            for wx in &xs {
                let mut acc = [0.0; 3];
                let mut total = 0.0;
                let mut valid = true;
                for &(sy, fy) in wy {
                    for &(sx, fx) in wx {
                        let w = fy * fx;
                        let p = self.pixel(sx, sy);
                        valid &= self.is_masked_in(sx, sy);
                        for c in 0..3 {
                            acc[c] += w * p[c];
                        }
                        total += w;
                    }
                }
                pixels.push([acc[0] / total, acc[1] / total, acc[2] / total]);
                mask.push(valid);
            }
        }
        Self::new(width, height, pixels)?.with_mask(mask)
    }

    /// Reads a 3-channel PFM file, with an optional single-channel mask PFM
    /// where values above one half mark participating pixels.
    pub fn load(path: &Path, mask_path: Option<&Path>) -> Result<Self> {
        let map = FloatMap::read(path)?;
        if map.channels != 3 {
            return Err(Error::format(
                path.display().to_string(),
                "expected a 3-channel (PF) float map",
            ));
        }
        let mut negatives = 0usize;
        let pixels: Vec<[f64; 3]> = map
            .data
            .chunks_exact(3)
            .map(|c| {
                let mut p = [c[0] as f64, c[1] as f64, c[2] as f64];
                for v in &mut p {
                    if *v < 0.0 {
                        negatives += 1;
                        *v = 0.0;
                    }
                }
                p
            })
            .collect();
        if negatives > 0 {
            log::debug!("{}: clamped {negatives} negative samples to zero", path.display());
        }
        let image = Self::new(map.width, map.height, pixels)?;
        match mask_path {
            None => Ok(image),
            Some(mp) => {
                let mask = FloatMap::read(mp)?;
                if mask.channels != 1 || mask.width != map.width || mask.height != map.height {
                    return Err(Error::format(
                        mp.display().to_string(),
                        "mask must be a single-channel float map matching the image size",
                    ));
                }
                image.with_mask(mask.data.iter().map(|&v| v > 0.5).collect())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self
            .pixels
            .iter()
            .flat_map(|p| p.iter().map(|&v| v as f32))
            .collect();
        FloatMap {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
        .write(path)
    }

    pub fn save_mask(&self, path: &Path) -> Result<()> {
        FloatMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
        .write(path)
    }
}

/// For each output cell, the overlapping source indices and overlap fractions.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let a = i as f64 * scale;
            let b = (i + 1) as f64 * scale;
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let lo = a.max(s as f64);
                    let hi = b.min((s + 1) as f64);
                    (hi > lo).then_some((s, hi - lo))
                })
                .collect()
        })
        .collect()
}

/// Raw contents of a PFM file: row-major, top row first, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    /// Single-channel map from row-major `f64` values.
    pub fn gray(width: usize, height: usize, values: &[f64]) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
            .map_err(|e| match e {
                Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
    }

    pub fn read_from<R: BufRead>(reader: &mut R) -> Result<Self> {
        let bad = |msg: &str| Error::format("float map", msg);
        let io = |e| Error::io("<stream>", e);
        let mut header = Vec::new();
        // Three whitespace-separated header lines: kind, dimensions, scale.
        while header.len() < 3 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(io)? == 0 {
                return Err(bad("truncated header"));
            }
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            header.push(line.to_owned());
        }
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(bad(&format!("unknown magic `{other}`"))),
        };
        let dims: Vec<usize> = header[1]
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad dimensions")))
            .collect::<Result<_>>()?;
        let [width, height] = dims[..] else {
            return Err(bad("expected `width height`"));
        };
        let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 {
            return Err(bad("scale must be non-zero"));
        }
        let little = scale < 0.0;
        let count = width * height * channels;
        let mut raw = vec![0u8; count * 4];
        reader
            .read_exact(&mut raw)
            .map_err(|_| bad("truncated payload"))?;
        let mut data = vec![0f32; count];
        let row = width * channels;
        // PFM stores the bottom row first.
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let magic = if self.channels == 3 { "PF" } else { "Pf" };
        write!(w, "{magic}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_and_mismatched() {
        assert!(RawImage::new(2, 1, vec![[0.1, 0.2, 0.3]]).is_err());
        assert!(RawImage::new(1, 1, vec![[-0.1, 0.2, 0.3]]).is_err());
        let img = RawImage::uniform(2, 2, [1.0, 1.0, 1.0]).unwrap();
        assert!(img.with_mask(vec![true; 3]).is_err());
    }

    #[test]
    fn pfm_round_trip_preserves_orientation() {
        let img = RawImage::from_fn(3, 2, |x, y| [x as f64, y as f64, 0.5]).unwrap();
        let mut buf = Vec::new();
        FloatMap {
            width: 3,
            height: 2,
            channels: 3,
            data: img.pixels().iter().flat_map(|p| p.map(|v| v as f32)).collect(),
        }
        .write_to(&mut buf)
        .unwrap();
        assert!(buf.starts_with(b"PF\n3 2\n-1.0\n"));
        let back = FloatMap::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back.data[0..3], [0.0, 0.0, 0.5]);
        assert_eq!(back.data[3 * 3..3 * 3 + 3], [0.0, 1.0, 0.5]);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let bytes = b"Pf\n2 2\n-1.0\n\0\0\0\0";
        assert!(matches!(
            FloatMap::read_from(&mut &bytes[..]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn box_resize_preserves_constant_and_mean() {
        let img = RawImage::uniform(8, 6, [0.2, 0.4, 0.6]).unwrap();
        let small = img.resize(3, 2).unwrap();
        for p in small.pixels() {
            assert!((p[0] - 0.2).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
        }
        let ramp = RawImage::from_fn(4, 1, |x, _| [x as f64; 3]).unwrap();
        let half = ramp.resize(2, 1).unwrap();
        assert_eq!(half.pixels()[0][0], 0.5);
        assert_eq!(half.pixels()[1][0], 2.5);
    }

    #[test]
    fn resized_mask_is_conservative() {
        let mut mask = vec![true; 16];
        mask[0] = false;
        let img = RawImage::uniform(4, 4, [1.0; 3]).unwrap().with_mask(mask).unwrap();
        let small = img.resize(2, 2).unwrap();
        assert_eq!(small.mask(), &[false, true, true, true]);
    }

    #[test]
    fn crop_extracts_window() {
        let img = RawImage::from_fn(4, 3, |x, y| [x as f64, y as f64, 1.0]).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), [1.0, 1.0, 1.0]);
        assert_eq!(c.pixel(1, 1), [2.0, 2.0, 1.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
