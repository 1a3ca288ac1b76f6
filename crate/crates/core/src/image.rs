//! Float RGB images.
//!
//! Data is row-major, channel-interleaved: value `(x, y, c)` lives at
//! `(y * width + x) * 3 + c`. All values lie in `[0, 1]`.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(Error::Dimension {
                what: "image data",
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::validation(format!("image value {} at {i} outside [0, 1]", data[i])));
        }
        Ok(Image { width, height, data })
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_vec_clamped(width: u32, height: u32, mut data: Vec<T>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) };
        }
        Image::from_vec(width, height, data)
    }

    pub fn filled(width: u32, height: u32, rgb: [T; 3]) -> Result<Self> {
        let data = (0..width as usize * height as usize).flat_map(|_| rgb).collect();
        Image::from_vec(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [T; 3] {
        let i = (y as usize * self.width as usize + x as usize) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: crate::scalar::convert_slice(&self.data),
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Image<T> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let (sw, sh) = (self.width as usize, self.height as usize);
        let fx = sw as f64 / width as f64;
        let fy = sh as f64 / height as f64;
        let mut out = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in 0..height as usize {
            let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let ty = T::lit(sy - y0 as f64);
            for x in 0..width as usize {
                let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let tx = T::lit(sx - x0 as f64);
                for c in 0..CHANNELS {
                    let at = |xx: usize, yy: usize| self.data[(yy * sw + xx) * CHANNELS + c];
                    let top = at(x0, y0) * (T::one() - tx) + at(x1, y0) * tx;
                    let bot = at(x0, y1) * (T::one() - tx) + at(x1, y1) * tx;
                    out.push(top * (T::one() - ty) + bot * ty);
                }
            }
        }
        Image {
            width,
            height,
            data: out,
        }
    }

    /// Quantizes to 8-bit RGB with round-to-nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Image::from_vec(width, height, data)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.to_rgb8()).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Width and height from the PNG header, without decoding pixels.
    pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
        let reader = png::Decoder::new(std::io::Cursor::new(bytes))
            .read_info()
            .map_err(|e| Error::Png(e.to_string()))?;
        let info = reader.info();
        Ok((info.width, info.height))
    }

    /// Decodes 8-bit RGB or RGBA PNG data (alpha is dropped).
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let px = info.width as usize * info.height as usize;
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf[..px * 3].to_vec(),
            png::ColorType::Rgba => buf[..px * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf[..px].iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf[..px * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        Image::from_rgb8(info.width, info.height, &rgb)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Image::decode_png(&bytes)
    }

    /// Lossless float storage: `u32 width, u32 height` (little endian)
    /// followed by `f32` little-endian values in the in-memory layout.
    pub fn save_raw_f32(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(&path, e));
        write(&self.width.to_le_bytes())?;
        write(&self.height.to_le_bytes())?;
        for v in &self.data {
            write(&(v.as_f64() as f32).to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load_raw_f32(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        if bytes.len() < 8 {
            return Err(Error::validation("raw image: truncated header"));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Image::from_vec(width, height, data)
    }

    /// Loads `.png` through the 8-bit path and anything else as raw f32.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match path.as_ref().extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => Image::load_png(path),
            _ => Image::load_raw_f32(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::<f64>::from_vec(1, 1, vec![0.0, 1.2, 0.5]).is_err());
        assert!(Image::<f64>::from_vec(1, 1, vec![0.0, 0.5]).is_err());
        let img = Image::<f64>::from_vec_clamped(1, 1, vec![-0.1, 1.2, f64::NAN]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::from_vec(4, 3, data).unwrap();
        let back = Image::<f64>::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_header_dimensions() {
        let img = Image::<f64>::filled(7, 3, [0.2, 0.4, 0.6]).unwrap();
        let bytes = img.encode_png().unwrap();
        assert_eq!(Image::<f64>::png_dimensions(&bytes).unwrap(), (7, 3));
        assert!(Image::<f64>::png_dimensions(b"not a png").is_err());
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.rgbf");
        let img = Image::<f32>::from_vec(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        img.save_raw_f32(&p).unwrap();
        assert_eq!(Image::<f32>::load(&p).unwrap(), img);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let img = Image::<f64>::filled(7, 5, [0.2, 0.4, 0.6]).unwrap();
        let r = img.resize_bilinear(16, 16);
        for p in r.data().chunks(3) {
            assert!((p[0] - 0.2).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
        }
    }
}
