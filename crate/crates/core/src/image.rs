//! RGB images: binary PPM (P6) and the raw tensor container.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::checkpoint;

/// Height × width × RGB, channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported PPM magic {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM number {s:?}"));
        let (w, h, maxv) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxv != 255 {
            return Err(format!("only 8-bit PPM supported (maxval {maxv})"));
        }
        // single whitespace byte separates header from raster
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(format!("PPM raster truncated: need {need} bytes"));
        }
        Image::from_rgb8(h, w, &bytes[pos..pos + need]).map_err(|e| e.to_string())
    }

    /// Reads a `.ppm` file or a tensor container (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.starts_with(b"P6") {
            return Image::decode_ppm(&bytes).map_err(err);
        }
        let t = checkpoint::decode_tensor_file(&bytes).map_err(|e| err(e.to_string()))?;
        match t.shape() {
            [h, w, 3] => Image::new(*h, *w, t.into_data()).map_err(|e| err(e.to_string())),
            s => Err(err(format!("expected [H, W, 3] tensor, got {s:?}"))),
        }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone()).expect("consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(8, 8, &bytes).unwrap();
        let back = Image::decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn ppm_with_comment() {
        let mut data = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        data.extend([255, 0, 0]);
        let img = Image::decode_ppm(&data).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_ppm_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\nabc").unwrap();
        let e = Image::load(&p).unwrap_err().to_string();
        assert!(e.contains("bad.ppm"), "{e}");
    }

    #[test]
    fn tensor_container_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.esnt");
        let img = Image::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        std::fs::write(&p, checkpoint::encode_tensor_file("image", &img.to_tensor())).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
