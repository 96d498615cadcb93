//! Single-channel images in [0, 1] and their PNG forms.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width` intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, data: vec![value; height * width] }
    }

    /// Decodes 8-bit levels, `v / 255`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Clamps to [0, 1] and rounds to the nearest 8-bit level.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// The image as it will read back from an 8-bit PNG.
    pub fn quantized(&self) -> Image {
        Image::from_u8(self.height, self.width, &self.to_u8()).expect("same shape")
    }

    /// Places images side by side with `gap` columns of `fill` between them.
    pub fn hstack(items: &[&Image], gap: usize, fill: f64) -> Result<Image> {
        let first = items.first().ok_or_else(|| Error::invalid("hstack of zero images"))?;
        let h = first.height;
        if let Some(bad) = items.iter().find(|im| im.height != h) {
            return Err(Error::shape("hstack", &[h], &[bad.height]));
        }
        let w = items.iter().map(|im| im.width).sum::<usize>() + gap * (items.len() - 1);
        let mut out = Image::filled(h, w, fill);
        let mut x0 = 0;
        for im in items {
            for r in 0..h {
                out.data[r * w + x0..r * w + x0 + im.width].copy_from_slice(&im.data[r * im.width..(r + 1) * im.width]);
            }
            x0 += im.width + gap;
        }
        Ok(out)
    }

    /// Stacks images top to bottom with `gap` rows of `fill` between them.
    pub fn vstack(items: &[&Image], gap: usize, fill: f64) -> Result<Image> {
        let first = items.first().ok_or_else(|| Error::invalid("vstack of zero images"))?;
        let w = first.width;
        if let Some(bad) = items.iter().find(|im| im.width != w) {
            return Err(Error::shape("vstack", &[w], &[bad.width]));
        }
        let mut data = Vec::new();
        for (i, im) in items.iter().enumerate() {
            if i > 0 {
                data.extend(std::iter::repeat_n(fill, gap * w));
            }
            data.extend_from_slice(&im.data);
        }
        let h = data.len() / w;
        Image::new(h, w, data)
    }
}

/// Five-anchor blue → teal → green → yellow colormap used for RGB export.
pub fn colormap(v: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 5] =
        [[0.05, 0.03, 0.35], [0.20, 0.35, 0.60], [0.15, 0.60, 0.55], [0.45, 0.80, 0.30], [0.99, 0.91, 0.15]];
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let y = ANCHORS[i][c] * (1.0 - f) + ANCHORS[i + 1][c] * f;
        out[c] = (y * 255.0).round() as u8;
    }
    out
}

fn encoder(path: &Path, w: BufWriter<File>, width: usize, height: usize, color: png::ColorType) -> Result<png::Writer<BufWriter<File>>> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, image: &Image) -> Result<()> {
    let mut w = encoder(path, create(path)?, image.width, image.height, png::ColorType::Grayscale)?;
    w.write_image_data(&image.to_u8()).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Writes an 8-bit RGB PNG through [`colormap`].
pub fn write_color_png(path: &Path, image: &Image) -> Result<()> {
    let rgb: Vec<u8> = image.data.iter().flat_map(|&v| colormap(v)).collect();
    let mut w = encoder(path, create(path)?, image.width, image.height, png::ColorType::Rgb)?;
    w.write_image_data(&rgb).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit PNG as intensities; colour inputs are averaged over channels.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    // Alpha, when present, is ignored.
    let colour = match info.color_type {
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgba => 3,
        _ => channels,
    };
    let data = bytes
        .chunks_exact(channels)
        .map(|px| px[..colour].iter().map(|&b| b as f64).sum::<f64>() / (255.0 * colour as f64))
        .collect();
    Image::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 4, (0..12).map(|i| i as f64 * 20.0 / 255.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        write_gray_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), (3, 4));
        assert_eq!(back.to_u8(), img.to_u8());

        let q = dir.path().join("c.png");
        write_color_png(&q, &img).unwrap();
        assert_eq!(read_png(&q).unwrap().shape(), (3, 4));
    }

    #[test]
    fn stacking() {
        let a = Image::filled(2, 2, 0.0);
        let b = Image::filled(2, 3, 1.0);
        let s = Image::hstack(&[&a, &b], 1, 0.5).unwrap();
        assert_eq!(s.shape(), (2, 6));
        assert_eq!(s.get(1, 2), 0.5);
        assert_eq!(s.get(0, 5), 1.0);
        assert!(Image::vstack(&[&a, &b], 0, 0.0).is_err());
        assert_eq!(Image::vstack(&[&a, &a], 2, 0.0).unwrap().shape(), (6, 2));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [13, 8, 89]);
        assert_eq!(colormap(1.0), [252, 232, 38]);
        assert_eq!(colormap(-3.0), colormap(0.0));
    }
}
