//! Core raster type and the pixel-level operations everything else builds on:
//! exact cyclic shifting, deterministic resampling, PSNR/SSIM metrics and
//! 8/16-bit PNG I/O.
//!
//! Images are height x width x channels rasters of `f64` values with a nominal
//! range of `[0, 1]`, stored interleaved (HWC). All operations here are pure
//! functions on immutable inputs.

use std::path::Path;

use thiserror::Error;

/// Errors from raster operations and PNG I/O.
#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {height}x{width}x{channels}")]
    InvalidDimensions {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {got} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("dimensions must be even for half-size resize, got {0}x{1}")]
    OddDimension(usize, usize),
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    WindowTooLarge(usize, usize, usize),
    #[error("unsupported PNG pixel layout: {0}")]
    UnsupportedPng(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png codec error: {0}")]
    Png(#[from] image::ImageError),
}

/// H x W x C raster, values nominally in `[0, 1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Cyclic shift offset in rows (`p`) and columns (`q`). Any sign is allowed;
/// offsets are reduced modulo the image dimensions before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShiftOffset {
    pub p: i64,
    pub q: i64,
}

impl ShiftOffset {
    pub fn new(p: i64, q: i64) -> Self {
        Self { p, q }
    }

    /// Reduce to canonical non-negative offsets for an `h` x `w` image.
    pub fn normalized(self, h: usize, w: usize) -> (usize, usize) {
        (
            self.p.rem_euclid(h as i64) as usize,
            self.q.rem_euclid(w as i64) as usize,
        )
    }
}

impl Image {
    /// Create an image from interleaved HWC data.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ImagingError::InvalidDimensions {
                height,
                width,
                channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(ImagingError::DataLength {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::constant(height, width, channels, 0.0)
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + ch] = value;
    }

    /// Elementwise map into a new image.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamp every value into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Exact (bitwise) equality of shape and data.
    pub fn bit_eq(&self, other: &Image) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn same_shape(&self, other: &Image) -> Result<(), ImagingError> {
        if self.shape() != other.shape() {
            return Err(ImagingError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Shift an image cyclically by `p` rows and `q` columns.
///
/// Output pixel `(i, j)` is input pixel `((i - p) mod H, (j - q) mod W)`;
/// values are moved exactly, with no interpolation.
pub fn cyclic_shift(img: &Image, p: i64, q: i64) -> Image {
    let (h, w, c) = img.shape();
    let (p, q) = ShiftOffset::new(p, q).normalized(h, w);
    if p == 0 && q == 0 {
        return img.clone();
    }
    let mut out = vec![0.0; img.data.len()];
    let row_len = w * c;
    for i in 0..h {
        let src_i = (i + h - p) % h;
        let src_row = &img.data[src_i * row_len..(src_i + 1) * row_len];
        let dst_row = &mut out[i * row_len..(i + 1) * row_len];
        // Split the source row at the wrap point instead of per-pixel modulo.
        let split = (w - q) * c;
        dst_row[q * c..].copy_from_slice(&src_row[..split]);
        dst_row[..q * c].copy_from_slice(&src_row[split..]);
    }
    Image {
        height: h,
        width: w,
        channels: c,
        data: out,
    }
}

/// Downsample to half size by averaging each 2x2 block (area interpolation).
/// Exactly mean-preserving; requires even dimensions.
pub fn resize_half(img: &Image) -> Result<Image, ImagingError> {
    let (h, w, c) = img.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ImagingError::OddDimension(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let s = img.get(2 * y, 2 * x, ch)
                    + img.get(2 * y, 2 * x + 1, ch)
                    + img.get(2 * y + 1, 2 * x, ch)
                    + img.get(2 * y + 1, 2 * x + 1, ch);
                out[(y * ow + x) * c + ch] = s * 0.25;
            }
        }
    }
    Ok(Image {
        height: oh,
        width: ow,
        channels: c,
        data: out,
    })
}

/// Source coordinate and lerp weight for one output index of a 2x bilinear
/// upsample with the half-pixel (corner-aligned-off) convention.
#[inline]
pub(crate) fn bilinear2x_taps(o: usize, len: usize) -> (usize, usize, f64) {
    let pos = (o as f64 + 0.5) / 2.0 - 0.5;
    let floor = pos.floor();
    let t = pos - floor;
    let i0 = (floor.max(0.0) as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    // For pos < 0 both taps clamp to index 0; fold the weight accordingly.
    if floor < 0.0 {
        (i0, i0, 0.0)
    } else {
        (i0, i1, t)
    }
}

/// Upsample to double size by bilinear interpolation, treating each input
/// pixel as a cell center and clamping at the borders.
pub fn resize_double(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        let (y0, y1, ty) = bilinear2x_taps(y, h);
        for x in 0..ow {
            let (x0, x1, tx) = bilinear2x_taps(x, w);
            for ch in 0..c {
                let v00 = img.get(y0, x0, ch);
                let v01 = img.get(y0, x1, ch);
                let v10 = img.get(y1, x0, ch);
                let v11 = img.get(y1, x1, ch);
                let top = v00 + tx * (v01 - v00);
                let bot = v10 + tx * (v11 - v10);
                out[(y * ow + x) * c + ch] = top + ty * (bot - top);
            }
        }
    }
    Image {
        height: oh,
        width: ow,
        channels: c,
        data: out,
    }
}

/// Peak signal-to-noise ratio in decibels; `f64::INFINITY` when the images
/// are identical. Values are clamped to `[0, 1]` before comparison and the
/// MSE runs over all pixels and channels.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64, ImagingError> {
    a.same_shape(b)?;
    let mut se = 0.0;
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let d = va.clamp(0.0, 1.0) - vb.clamp(0.0, 1.0);
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((peak * peak) / mse).log10())
}

/// SSIM window size (11 x 11 Gaussian, sigma 1.5) per the standard definition.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter over valid positions: `h x w` -> `(h-10) x (w-10)`.
fn gauss_filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    // Rows first.
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over a sliding 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1.0), channels averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    a.same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ImagingError::WindowTooLarge(h, w, SSIM_WINDOW));
    }
    let k = ssim_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let mut pa = vec![0.0; h * w];
        let mut pb = vec![0.0; h * w];
        let mut paa = vec![0.0; h * w];
        let mut pbb = vec![0.0; h * w];
        let mut pab = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let va = a.get(y, x, ch).clamp(0.0, 1.0);
                let vb = b.get(y, x, ch).clamp(0.0, 1.0);
                let i = y * w + x;
                pa[i] = va;
                pb[i] = vb;
                paa[i] = va * va;
                pbb[i] = vb * vb;
                pab[i] = va * vb;
            }
        }
        let mu_a = gauss_filter_valid(&pa, h, w, &k);
        let mu_b = gauss_filter_valid(&pb, h, w, &k);
        let e_aa = gauss_filter_valid(&paa, h, w, &k);
        let e_bb = gauss_filter_valid(&pbb, h, w, &k);
        let e_ab = gauss_filter_valid(&pab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            acc += s;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Render a PSNR value the way reports expect: "Inf" for identical images,
/// otherwise two decimals.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "Inf".to_string()
    } else {
        format!("{db:.2}")
    }
}

/// Render an SSIM score with three decimals.
pub fn format_ssim(s: f64) -> String {
    format!("{s:.3}")
}

/// Reflect-pad on the bottom/right up to the next multiple of `m`.
/// Returns the padded image and the original (height, width) for cropping back.
pub fn pad_reflect_to_multiple(img: &Image, m: usize) -> (Image, usize, usize) {
    let (h, w, c) = img.shape();
    let nh = h.div_ceil(m) * m;
    let nw = w.div_ceil(m) * m;
    if nh == h && nw == w {
        return (img.clone(), h, w);
    }
    let reflect = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else {
            // Mirror about the last pixel without repeating it: len-2, len-3, ...
            let over = i - len + 1;
            len.saturating_sub(1 + over).min(len - 1)
        }
    };
    let mut out = Image::zeros(nh, nw, c);
    for y in 0..nh {
        let sy = reflect(y, h);
        for x in 0..nw {
            let sx = reflect(x, w);
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    (out, h, w)
}

/// Crop the top-left `h x w` region.
pub fn crop(img: &Image, h: usize, w: usize) -> Image {
    assert!(h <= img.height() && w <= img.width());
    let c = img.channels();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, img.get(y, x, ch));
            }
        }
    }
    out
}

/// PNG sample depth for writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngDepth {
    Bits8,
    Bits16,
}

/// Read an 8- or 16-bit PNG into `[0, 1]` by dividing by `2^bits - 1`.
/// Alpha channels are dropped; grayscale stays single-channel.
pub fn read_png(path: &Path) -> Result<Image, ImagingError> {
    use image::DynamicImage::*;
    let dynimg = image::ImageReader::open(path)?.decode()?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match dynimg {
        ImageLuma8(buf) => (1, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        ImageLuma16(buf) => (
            1,
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        ImageRgb8(buf) => (3, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        ImageRgb16(buf) => (
            3,
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        ImageLumaA8(buf) => (
            1,
            buf.into_raw()
                .chunks_exact(2)
                .map(|px| px[0] as f64 / 255.0)
                .collect(),
        ),
        ImageRgba8(buf) => (
            3,
            buf.into_raw()
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&v| v as f64 / 255.0))
                .collect(),
        ),
        ImageRgba16(buf) => (
            3,
            buf.into_raw()
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&v| v as f64 / 65535.0))
                .collect(),
        ),
        other => {
            return Err(ImagingError::UnsupportedPng(format!("{:?}", other.color())));
        }
    };
    Image::new(h, w, channels, data)
}

/// Write a PNG at the requested depth; values are clamped to `[0, 1]` and
/// quantized with round-to-nearest.
pub fn write_png(path: &Path, img: &Image, depth: PngDepth) -> Result<(), ImagingError> {
    let (h, w, c) = img.shape();
    match depth {
        PngDepth::Bits8 => {
            let raw: Vec<u8> = img
                .as_slice()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            match c {
                1 => image::GrayImage::from_raw(w as u32, h as u32, raw)
                    .expect("sized buffer")
                    .save(path)?,
                _ => image::RgbImage::from_raw(w as u32, h as u32, raw)
                    .expect("sized buffer")
                    .save(path)?,
            }
        }
        PngDepth::Bits16 => {
            let raw: Vec<u16> = img
                .as_slice()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            match c {
                1 => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
                    .expect("sized buffer")
                    .save(path)?,
                _ => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
                    .expect("sized buffer")
                    .save(path)?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img_2x2(a: f64, b: f64, c: f64, d: f64) -> Image {
        Image::new(2, 2, 1, vec![a, b, c, d]).unwrap()
    }

    fn seeded(h: usize, w: usize, c: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn shift_identity() {
        let img = seeded(8, 6, 3, 1);
        assert!(cyclic_shift(&img, 0, 0).bit_eq(&img));
    }

    #[test]
    fn shift_rows_by_one() {
        let img = img_2x2(1.0, 2.0, 3.0, 4.0);
        let shifted = cyclic_shift(&img, 1, 0);
        assert_eq!(shifted.as_slice(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn shift_round_trip() {
        let img = seeded(16, 16, 3, 2);
        let back = cyclic_shift(&cyclic_shift(&img, 5, 11), -5, -11);
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn shift_negative_offsets_wrap() {
        let img = seeded(7, 9, 1, 3);
        assert!(cyclic_shift(&img, -3, -4).bit_eq(&cyclic_shift(&img, 4, 5)));
        assert!(cyclic_shift(&img, 7 * 5, 9 * 3).bit_eq(&img));
    }

    #[test]
    fn resize_half_constant() {
        let img = Image::constant(4, 4, 3, 0.7);
        let half = resize_half(&img).unwrap();
        assert_eq!(half.shape(), (2, 2, 3));
        assert!(half.as_slice().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn resize_half_block_mean() {
        let img = img_2x2(0.0, 1.0, 1.0, 0.0);
        let half = resize_half(&img).unwrap();
        assert_eq!(half.as_slice(), &[0.5]);
    }

    #[test]
    fn resize_half_twice_shape() {
        let img = seeded(64, 64, 3, 4);
        let q = resize_half(&resize_half(&img).unwrap()).unwrap();
        assert_eq!(q.shape(), (16, 16, 3));
    }

    #[test]
    fn resize_half_rejects_odd() {
        let img = Image::zeros(3, 4, 1);
        assert!(matches!(
            resize_half(&img),
            Err(ImagingError::OddDimension(3, 4))
        ));
    }

    #[test]
    fn resize_double_constant() {
        let img = Image::constant(3, 5, 3, 0.42);
        let up = resize_double(&img);
        assert_eq!(up.shape(), (6, 10, 3));
        assert!(up.as_slice().iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn resize_double_single_pixel() {
        let img = Image::new(1, 1, 1, vec![0.3]).unwrap();
        let up = resize_double(&img);
        assert_eq!(up.shape(), (2, 2, 1));
        assert!(up.as_slice().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn resize_double_row_weights() {
        // Hand-evaluated taps for the half-pixel convention on [0, 1].
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = resize_double(&img);
        let row: Vec<f64> = (0..4).map(|x| up.get(0, x, 0)).collect();
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (got, want) in row.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn psnr_identical_is_inf() {
        let img = seeded(8, 8, 3, 5);
        assert!(psnr(&img, &img, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_quarter_mse() {
        let a = Image::zeros(8, 8, 3);
        let b = Image::constant(8, 8, 3, 0.5);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 6.0206).abs() < 1e-3, "{db}");
    }

    #[test]
    fn psnr_full_scale_error() {
        let a = Image::zeros(8, 8, 3);
        let b = Image::constant(8, 8, 3, 1.0);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!(db.abs() < 1e-12, "{db}");
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Image::zeros(8, 8, 3);
        let b = Image::zeros(8, 9, 3);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let img = seeded(16, 16, 3, 6);
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Zero variance: only the luminance and contrast constants survive.
        let a = Image::constant(16, 16, 3, 0.3);
        let b = Image::constant(16, 16, 3, 0.7);
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let expected = ((2.0 * 0.3 * 0.7 + c1) * c2) / ((0.09 + 0.49 + c1) * c2);
        let s = ssim(&a, &b).unwrap();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn ssim_inverted_pattern_is_negative() {
        // Checkerboard around 0.5: x and 1-x anticorrelate in every window.
        let mut img = Image::zeros(16, 16, 1);
        for y in 0..16 {
            for x in 0..16 {
                img.set(y, x, 0, if (x + y) % 2 == 0 { 0.1 } else { 0.9 });
            }
        }
        let inv = img.map(|v| 1.0 - v);
        let s = ssim(&img, &inv).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = Image::zeros(10, 16, 1);
        assert!(matches!(
            ssim(&img, &img),
            Err(ImagingError::WindowTooLarge(10, 16, 11))
        ));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        use rand::{Rng, SeedableRng};
        let base = seeded(32, 32, 3, 7);
        let mut prev = f64::INFINITY;
        for (i, amp) in [0.05, 0.1, 0.2].iter().enumerate() {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(100 + i as u64);
            let noisy = base.map(|v| (v + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            let db = psnr(&base, &noisy, 1.0).unwrap();
            assert!(db < prev, "noise {amp}: {db} !< {prev}");
            prev = db;
        }
    }

    #[test]
    fn pad_reflect_and_crop_round_trip() {
        let img = seeded(30, 45, 3, 8);
        let (padded, h, w) = pad_reflect_to_multiple(&img, 16);
        assert_eq!(padded.shape(), (32, 48, 3));
        assert!(crop(&padded, h, w).bit_eq(&img));
        // Reflection mirrors without repeating the border pixel.
        assert_eq!(padded.get(30, 0, 0), img.get(28, 0, 0));
        assert_eq!(padded.get(0, 45, 1), img.get(0, 43, 1));
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = seeded(20, 24, 3, 9);
        write_png(&path, &img, PngDepth::Bits8).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_round_trip_16bit_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img16.png");
        let img = seeded(12, 12, 1, 10);
        write_png(&path, &img, PngDepth::Bits16).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn format_helpers() {
        assert_eq!(format_psnr(f64::INFINITY), "Inf");
        assert_eq!(format_psnr(21.1534), "21.15");
        assert_eq!(format_ssim(1.0), "1.000");
        assert_eq!(format_ssim(0.7666), "0.767");
    }

    proptest! {
        #[test]
        fn prop_shift_group_law(
            seed in 0u64..1000,
            p1 in -40i64..40, q1 in -40i64..40,
            p2 in -40i64..40, q2 in -40i64..40,
        ) {
            let img = seeded(12, 10, 3, seed);
            let a = cyclic_shift(&cyclic_shift(&img, p1, q1), p2, q2);
            let b = cyclic_shift(&img, p1 + p2, q1 + q2);
            prop_assert!(a.bit_eq(&b));
        }

        #[test]
        fn prop_shift_preserves_values(seed in 0u64..1000, p in -40i64..40, q in -40i64..40) {
            let img = seeded(9, 11, 1, seed);
            let shifted = cyclic_shift(&img, p, q);
            let mut a: Vec<u64> = img.as_slice().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = shifted.as_slice().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prop_resize_half_preserves_mean(seed in 0u64..1000) {
            let img = seeded(16, 16, 3, seed);
            let half = resize_half(&img).unwrap();
            prop_assert!((img.mean() - half.mean()).abs() < 1e-12);
        }

        #[test]
        fn prop_metric_symmetry(sa in 0u64..500, sb in 500u64..1000) {
            let a = seeded(16, 16, 3, sa);
            let b = seeded(16, 16, 3, sb);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let sab = ssim(&a, &b).unwrap();
            let sba = ssim(&b, &a).unwrap();
            prop_assert!((sab - sba).abs() < 1e-12);
        }
    }
}
