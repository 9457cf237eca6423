//! RGB image tensors and conversion to and from encoded rasters.

use std::io::Cursor;
use std::ops::Deref;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageDecoder, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declared value range of every [`ImageTensor`].
pub const IMAGE_RANGE: (f32, f32) = (0.0, 1.0);

/// A 3-channel image with values in [`IMAGE_RANGE`], stored planar (C×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    /// Wraps a 3-channel tensor, clamping into the image range.
    pub fn new(tensor: Tensor<f32>) -> Self {
        assert_eq!(tensor.channels(), 3, "image tensors have 3 channels");
        let (lo, hi) = IMAGE_RANGE;
        Self(tensor.map(|v| v.clamp(lo, hi)))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        Self::new(Tensor::from_fn(3, height, width, |c, y, x| f(y, x, c)))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// Pixel access in H×W×3 order.
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.at(c, y, x)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let t = Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        Self(t)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.0.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = decode_oriented(&bytes).map_err(|source| Error::Image { what: path.display().to_string(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { what: path.display().to_string(), source })
    }

    /// Resize to exactly `height × width`, ignoring aspect ratio.
    pub fn resize_exact(&self, height: usize, width: usize) -> Self {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let img = DynamicImage::ImageRgb8(self.to_rgb8()).resize_exact(width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&img.to_rgb8())
    }

    /// Scale to cover `height × width` and center-crop the overflow.
    pub fn resize_to_fill(&self, height: usize, width: usize) -> Self {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let img = DynamicImage::ImageRgb8(self.to_rgb8()).resize_to_fill(width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Self {
        Self(self.0.crop(y, x, height, width))
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = self.dims();
        Self(Tensor::from_fn(3, h, w, |c, y, x| self.0.at(c, y, w - 1 - x)))
    }

    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Self {
        let (h, w) = self.dims();
        Self(Tensor::from_fn(3, w, h, |c, y, x| self.0.at(c, h - 1 - x, y)))
    }
}

impl Deref for ImageTensor {
    type Target = Tensor<f32>;

    fn deref(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Decode PNG or JPEG bytes, applying any EXIF orientation tag.
pub fn decode_oriented(bytes: &[u8]) -> std::result::Result<DynamicImage, image::ImageError> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    let mut decoder = reader.into_decoder()?;
    let orientation = decoder.orientation()?;
    let mut img = DynamicImage::from_decoder(decoder)?;
    img.apply_orientation(orientation);
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Jpeg,
    Png,
}

impl Encoding {
    pub fn mime(self) -> &'static str {
        match self {
            Encoding::Jpeg => "image/jpeg",
            Encoding::Png => "image/png",
        }
    }
}

pub fn encode(img: &ImageTensor, encoding: Encoding, jpeg_quality: u8) -> std::result::Result<Vec<u8>, image::ImageError> {
    let rgb = img.to_rgb8();
    let mut out = Vec::new();
    match encoding {
        Encoding::Png => {
            rgb.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
        }
        Encoding::Jpeg => {
            let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, jpeg_quality);
            rgb.write_with_encoder(enc)?;
        }
    }
    Ok(out)
}

/// Grid of equally sized images, `columns` per row, on a white background.
pub fn tile(images: &[ImageTensor], columns: usize) -> ImageTensor {
    assert!(!images.is_empty() && columns > 0);
    let (h, w) = images[0].dims();
    let rows = images.len().div_ceil(columns);
    let mut t = Tensor::filled(3, rows * h, columns * w, 1.0f32);
    for (i, img) in images.iter().enumerate() {
        let img = img.resize_exact(h, w);
        let (oy, ox) = ((i / columns) * h, (i % columns) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    *t.at_mut(c, oy + y, ox + x) = img.at(c, y, x);
                }
            }
        }
    }
    ImageTensor(t)
}
