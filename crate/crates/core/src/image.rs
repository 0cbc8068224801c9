//! RGB images in [0, 1] and their conversion to network tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An RGB image stored row-major, channel-last, with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", height * width * 3),
                got: format!("{}", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Number of source dimensions m = H * W * 3.
    pub fn source_dims(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + ch]
    }

    /// Decodes PNG/JPEG. Grayscale is replicated to three channels and any
    /// alpha channel is dropped (not composited).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect();
        Ok(ImageTensor {
            height: h as usize,
            width: w as usize,
            pixels,
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::InvalidArgument("image buffer size".into()))?;
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Ok(ImageTensor {
            height,
            width,
            pixels,
        })
    }

    /// Largest centred crop whose sides are multiples of `multiple`.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<Self> {
        let h = self.height / multiple * multiple;
        let w = self.width / multiple * multiple;
        if h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} is smaller than {multiple}",
                self.height, self.width
            )));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// (1, 3, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Stacks images of identical size into a (B, 3, H, W) batch.
    pub fn batch_to_tensor(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Converts one (3, H, W) or (1, 3, H, W) tensor back, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 {
            t.squeeze(0)?
        } else {
            t.clone()
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 channels".into(),
                got: format!("{c}"),
            });
        }
        let pixels: Vec<f32> = t
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(ImageTensor {
            height: h,
            width: w,
            pixels,
        })
    }
}
