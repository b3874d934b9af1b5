//! Flow colour coding and PNG panel grids.
//!
//! Hue is the flow angle, saturation the magnitude divided by the panel's
//! largest magnitude, value is 1.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use d3d_core::tvl1::FlowField;
use d3d_core::{Error, Result, Tensor};

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Image {
        Image {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        let mut out = Image::filled(width, height, [0; 3]);
        for y in 0..height {
            for x in 0..width {
                out.pixels[y * width + x] = self.get(x * self.width / width, y * self.height / height);
            }
        }
        out
    }

    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.pixels[(y0 + y) * self.width + x0 + x] = src.get(x, y);
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Format { what: "png", msg: e.to_string() };
        let mut w = enc.write_header().map_err(png_err)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&bytes).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// HSV with `h` in degrees and `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_byte(r + m), to_byte(g + m), to_byte(b + m)]
}

/// Colour-codes one flow field.
pub fn flow_image(flow: &FlowField) -> Image {
    let (h, w) = (flow.height(), flow.width());
    let (u, v) = (flow.u.data(), flow.v.data());
    let peak = u.iter().zip(v).map(|(a, b)| a.hypot(*b)).fold(0.0f32, f32::max);
    let pixels = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| {
            let mag = a.hypot(b);
            let sat = if peak > 0.0 { mag / peak } else { 0.0 };
            hsv_to_rgb(b.atan2(a).to_degrees(), sat, 1.0)
        })
        .collect();
    Image { width: w, height: h, pixels }
}

/// Frame `t` of an RGB clip `[3, T, H, W]` with values in `[0, 1]`.
pub fn rgb_frame(clip: &Tensor, t: usize) -> Result<Image> {
    let [_, nt, h, w] = clip.dims4("rgb_frame")?;
    if t >= nt {
        return Err(Error::Invalid { op: "rgb_frame", msg: format!("frame {t} of {nt}") });
    }
    let plane = h * w;
    let d = clip.data();
    let pixels = (0..plane)
        .map(|i| [0, 1, 2].map(|c| to_byte(d[(c * nt + t) * plane + i])))
        .collect();
    Ok(Image { width: w, height: h, pixels })
}

/// Panels laid left to right at a common size with a white gutter; rows top to bottom.
pub fn grid(rows: &[Vec<Image>], cell: usize, gutter: usize) -> Image {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * cell + (cols + 1) * gutter;
    let height = rows.len() * cell + (rows.len() + 1) * gutter;
    let mut out = Image::filled(width, height, [255; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let x = gutter + c * (cell + gutter);
            let y = gutter + r * (cell + gutter);
            out.blit(&panel.resized(cell, cell), x, y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_follows_angle_and_saturation_magnitude() {
        let u = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let img = flow_image(&FlowField::new(u, v).unwrap());
        assert_eq!(img.get(0, 0), [255, 0, 0]);
        assert_eq!(img.get(1, 0), [255, 255, 255]);
        assert_eq!(img.get(2, 0), [255, 128, 128]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
    }

    #[test]
    fn png_has_signature_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let panel = Image::filled(2, 2, [10, 20, 30]);
        let g = grid(&[vec![panel.clone(), panel]], 8, 2);
        assert_eq!((g.width, g.height), (22, 12));
        assert_eq!(g.get(0, 0), [255; 3]);
        assert_eq!(g.get(2, 2), [10, 20, 30]);
        g.write_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert_eq!(u32::from_be_bytes(bytes[16..20].try_into().unwrap()), 22);
    }
}
