//! The image currency shared by every module: a `channels × height × width`
//! array of reals in `[-1, 1]` with white background at `+1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GlyphImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// The all-white 3-channel image used as the null condition.
    pub fn white(resolution: usize) -> Self {
        Self::filled(3, resolution, resolution, 1.0)
    }

    /// Replicates a single grayscale plane into three identical channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::shape(format!(
                "gray plane has {} values, expected {height}x{width}",
                gray.len()
            )));
        }
        let mut data = Vec::with_capacity(3 * gray.len());
        for _ in 0..3 {
            data.extend_from_slice(gray);
        }
        Ok(Self {
            channels: 3,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp(&self) -> Self {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    /// Stacks same-shaped images into a `B × C × H × W` tensor.
    pub fn stack(images: &[&GlyphImage], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty image list"))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    img.dims(),
                    dims
                )));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), dims.0, dims.1, dims.2), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn unstack(t: &Tensor) -> Result<Vec<Self>> {
        let (b, _, _, _) = t.dims4()?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    /// Channel 0 quantized to 8 bits: `-1 → 0`, `+1 → 255`.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        self.channel(0).iter().map(|&v| value_to_u8(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_png(path, self.width, self.height, &self.to_gray_u8())
    }

    /// Loads an 8-bit grayscale PNG, resizing to `resolution` when needed.
    pub fn load_png(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane: Vec<f32> = img.as_raw().iter().map(|&v| u8_to_value(v)).collect();
        let plane = if (h, w) == (resolution, resolution) {
            plane
        } else {
            resize_bilinear(&plane, h, w, resolution, resolution)
        };
        Self::from_gray(resolution, resolution, &plane)
    }
}

/// `v → 1 − 2·(255 − v)/255`, so white maps to `+1` and black to `-1`.
pub fn u8_to_value(v: u8) -> f32 {
    1.0 - 2.0 * (255.0 - v as f32) / 255.0
}

pub fn value_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    image::save_buffer(
        path,
        pixels,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `(columns, rows)` of a contact sheet for `n` tiles: `⌈√n⌉` columns.
pub fn grid_layout(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let mut cols = (n as f64).sqrt().floor() as usize;
    while cols * cols < n {
        cols += 1;
    }
    (cols, n.div_ceil(cols))
}

/// Tiles same-size images row-major into one grayscale PNG; unused cells are white.
pub fn save_contact_sheet(images: &[GlyphImage], path: &Path) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::config("contact sheet needs at least one image"))?;
    let (th, tw) = (first.height, first.width);
    if images.iter().any(|im| (im.height, im.width) != (th, tw)) {
        return Err(Error::shape("contact sheet tiles must share one size"));
    }
    let (cols, rows) = grid_layout(images.len());
    let (w, h) = (cols * tw, rows * th);
    let mut pixels = vec![255u8; w * h];
    for (i, im) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for (y, row) in im.to_gray_u8().chunks(tw).enumerate() {
            let start = (r * th + y) * w + c * tw;
            pixels[start..start + tw].copy_from_slice(row);
        }
    }
    save_gray_png(path, w, h, &pixels)?;
    Ok((cols, rows))
}

/// Width and height of an image file without decoding its pixels.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((w as usize, h as usize))
}

/// Bilinear resampling with half-pixel centers; same-size resampling is the identity.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let sy = sh as f32 / dh as f32;
    let sx = sw as f32 / dw as f32;
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}
