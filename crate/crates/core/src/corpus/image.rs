use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square RGB image with values in [0, 1], stored row-major HWC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub pixels: Vec<f32>,
    pub resolution: (usize, usize),
    pub spec_seed: u64,
}

impl ImageSample {
    pub fn new(pixels: Vec<f32>, resolution: usize, spec_seed: u64) -> Result<Self> {
        if pixels.len() != resolution * resolution * 3 {
            return Err(Error::ShapeError(format!(
                "{} values for a {resolution}x{resolution} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            resolution: (resolution, resolution),
            spec_seed,
        })
    }

    pub fn constant(value: f32, resolution: usize, spec_seed: u64) -> Self {
        Self {
            pixels: vec![value; resolution * resolution * 3],
            resolution: (resolution, resolution),
            spec_seed,
        }
    }

    pub fn size(&self) -> usize {
        self.resolution.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.resolution.1 + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mean(&self) -> f32 {
        self.pixels.iter().sum::<f32>() / self.pixels.len() as f32
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(bytes: &[u8], resolution: usize, spec_seed: u64) -> Result<Self> {
        Self::new(bytes.iter().map(|b| *b as f32 / 255.0).collect(), resolution, spec_seed)
    }

    /// (3, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w) = self.resolution;
        let t = Tensor::from_vec(self.pixels.clone(), (h, w, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .contiguous()?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageSample::to_tensor`]; values are clipped to [0, 1].
    pub fn from_tensor(t: &Tensor, spec_seed: u64) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 || h != w {
            return Err(Error::ShapeError(format!("expected (3, H, H) image tensor, got {:?}", t.dims())));
        }
        let pixels = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(pixels, h, spec_seed)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.resolution;
        let buf = image::RgbImage::from_raw(w as u32, h as u32, self.to_rgb8())
            .ok_or_else(|| Error::ShapeError("pixel buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path, spec_seed: u64) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::ShapeError(format!("{} is not square", path.display())));
        }
        Self::from_rgb8(img.as_raw(), h as usize, spec_seed)
    }
}

/// Stack images into an (N, 3, H, W) batch.
pub fn batch_tensor(images: &[&ImageSample], dtype: DType) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ts = images
        .iter()
        .map(|img| img.to_tensor(dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Box-filter mean pooling by an integer `factor`.
pub fn downsample(img: &ImageSample, factor: usize) -> Result<ImageSample> {
    let (h, w) = img.resolution;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidFactor {
            factor,
            resolution: h,
        });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    let mut out = vec![0f32; oh * ow * 3];
    for i in 0..h {
        for j in 0..w {
            let src = (i * w + j) * 3;
            let dst = ((i / factor) * ow + j / factor) * 3;
            for c in 0..3 {
                out[dst + c] += img.pixels[src + c];
            }
        }
    }
    for v in &mut out {
        *v = (*v / norm).clamp(0.0, 1.0);
    }
    Ok(ImageSample {
        pixels: out,
        resolution: (oh, ow),
        spec_seed: img.spec_seed,
    })
}

/// Downsample `img` to `resolution` if it is an integer multiple of it.
pub fn fit_resolution(img: &ImageSample, resolution: usize) -> Result<ImageSample> {
    let size = img.size();
    if size == resolution {
        return Ok(img.clone());
    }
    if resolution == 0 || size % resolution != 0 {
        return Err(Error::InvalidResolution(size));
    }
    downsample(img, size / resolution)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &ImageSample, b: &ImageSample) -> f64 {
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
