//! Image and mask IO, sRGB → CIE Lab conversion, XYLab pixel features and
//! boundary overlays.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image not found: {0}")]
    Missing(PathBuf),
    #[error("unsupported image format in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("corrupt image stream in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// Overlay color for drawn boundaries.
pub const BOUNDARY_COLOR: [u8; 3] = [0, 255, 0];

/// Mask files binarize at this gray level.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB bytes.
    pub data: Vec<u8>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(ImageError::Dimensions(format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[n×3]` tensor of channel values scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(vec![self.pixel_count(), 3], data).expect("image extents are positive")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    /// One entry per pixel, each 0 or 1.
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(ImageError::Dimensions(format!(
                "{} entries for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImageError::Dimensions("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.data.len() as f64
    }

    pub fn matches(&self, img: &ImageRGB) -> bool {
        self.height == img.height && self.width == img.width
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.data.len(), 1], data).expect("mask extents are positive")
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, ImageError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::Missing(path.to_path_buf()),
        _ => ImageError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn decode(path: &Path) -> Result<image::DynamicImage, ImageError> {
    let bytes = read_bytes(path)?;
    let format = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        ImageFormat::Pnm
    } else {
        return Err(ImageError::Unsupported {
            path: path.to_path_buf(),
            detail: "expected PNG or PGM".into(),
        });
    };
    image::load_from_memory_with_format(&bytes, format).map_err(|e| match e {
        image::ImageError::Unsupported(u) => ImageError::Unsupported {
            path: path.to_path_buf(),
            detail: u.to_string(),
        },
        other => ImageError::Corrupt {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

/// Reads an 8-bit PNG (RGB, RGBA or gray) or a binary PGM. Gray inputs are
/// replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB, ImageError> {
    let img = decode(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageRGB::new(h as usize, w as usize, img.into_raw())
}

/// Reads a mask image and binarizes it at [`MASK_THRESHOLD`].
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask, ImageError> {
    let img = decode(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| (v >= MASK_THRESHOLD) as u8).collect();
    BinaryMask::new(h as usize, w as usize, data)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_write_err(path: &Path, e: image::ImageError) -> ImageError {
    match e {
        image::ImageError::IoError(source) => ImageError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ImageError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    }
}

pub fn save_png(img: &ImageRGB, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| ImageError::Dimensions("RGB buffer size".into()))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_write_err(path, e))
}

/// Writes an 8-bit grayscale PNG.
pub fn save_gray_png(
    height: usize,
    width: usize,
    values: &[u8],
    path: impl AsRef<Path>,
) -> Result<(), ImageError> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| ImageError::Dimensions("gray buffer size".into()))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_write_err(path, e))
}

pub fn save_mask_png(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    save_gray_png(mask.height, mask.width, &bytes, path)
}

/// Writes a label map as a 16-bit binary PGM (`P5`, maxval 65535, big-endian).
pub fn save_label_pgm16(
    height: usize,
    width: usize,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<(), ImageError> {
    let path = path.as_ref();
    if labels.len() != height * width {
        return Err(ImageError::Dimensions(format!(
            "{} labels for {height}x{width}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > u16::MAX as usize) {
        return Err(ImageError::Dimensions(format!("label {l} exceeds 16 bits")));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&(l as u16).to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Reads back a 16-bit PGM written by [`save_label_pgm16`].
pub fn load_label_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<usize>), ImageError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let corrupt = |detail: &str| ImageError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(ImageError::Unsupported {
            path: path.to_path_buf(),
            detail: "expected 16-bit P5".into(),
        });
    }
    let width: usize = fields[1].parse().map_err(|_| corrupt("width"))?;
    let height: usize = fields[2].parse().map_err(|_| corrupt("height"))?;
    let body = bytes.get(pos..).ok_or_else(|| corrupt("missing body"))?;
    if body.len() != 2 * width * height {
        return Err(corrupt("body length"));
    }
    let labels = body
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
        .collect();
    Ok((height, width, labels))
}

const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// One sRGB pixel to CIE Lab (D65).
pub fn srgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / WHITE_D65[0]);
    let fy = lab_f(y / WHITE_D65[1]);
    let fz = lab_f(z / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts every pixel to Lab; returns an `[n×3]` tensor of (L, a, b).
pub fn rgb_to_lab(img: &ImageRGB) -> Tensor {
    let mut data = Vec::with_capacity(img.pixel_count() * 3);
    for px in img.data.chunks(3) {
        data.extend(srgb_pixel_to_lab([px[0], px[1], px[2]]));
    }
    Tensor::new(vec![img.pixel_count(), 3], data).expect("image extents are positive")
}

/// Per-pixel scaled (X, Y, L, a, b) features.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub pos_scale: f64,
    /// `[n×5]`; row `p` is pixel `(p / width, p % width)`.
    pub matrix: Tensor,
}

impl PixelFeatures {
    pub fn n(&self) -> usize {
        self.height * self.width
    }
}

/// Normalized position `i / (extent − 1)`, with a single-pixel extent mapping to 0.
fn unit_position(i: usize, extent: usize) -> f64 {
    if extent > 1 {
        i as f64 / (extent - 1) as f64
    } else {
        0.0
    }
}

/// Assembles XYLab features: positions in `[0, pos_scale]`, Lab divided by 100.
pub fn build_xylab(img: &ImageRGB, pos_scale: f64) -> Result<PixelFeatures, ImageError> {
    if !(pos_scale > 0.0 && pos_scale.is_finite()) {
        return Err(ImageError::Dimensions(format!(
            "pos_scale must be positive, got {pos_scale}"
        )));
    }
    let lab = rgb_to_lab(img);
    let mut data = Vec::with_capacity(img.pixel_count() * 5);
    for p in 0..img.pixel_count() {
        let (row, col) = (p / img.width, p % img.width);
        data.push(pos_scale * unit_position(col, img.width));
        data.push(pos_scale * unit_position(row, img.height));
        data.extend(lab.row(p).iter().map(|v| v / 100.0));
    }
    Ok(PixelFeatures {
        height: img.height,
        width: img.width,
        pos_scale,
        matrix: Tensor::new(vec![img.pixel_count(), 5], data).expect("positive extents"),
    })
}

/// What [`save_overlay`] outlines.
#[derive(Clone, Copy, Debug)]
pub enum Overlay<'a> {
    /// Foreground pixels touching background or the image border.
    Mask(&'a BinaryMask),
    /// Pixels with a 4-neighbor carrying a different label.
    Labels(&'a [usize]),
}

/// Boundary indicator per pixel for an overlay source.
pub fn boundary_map(height: usize, width: usize, overlay: Overlay<'_>) -> Result<Vec<bool>, ImageError> {
    let n = height * width;
    let (labels, outside): (Vec<usize>, Option<usize>) = match overlay {
        Overlay::Mask(m) => {
            if m.height != height || m.width != width {
                return Err(ImageError::Dimensions(format!(
                    "mask {}x{} vs image {height}x{width}",
                    m.height, m.width
                )));
            }
            (m.data.iter().map(|&v| v as usize).collect(), Some(0))
        }
        Overlay::Labels(l) => {
            if l.len() != n {
                return Err(ImageError::Dimensions(format!(
                    "{} labels vs image {height}x{width}",
                    l.len()
                )));
            }
            (l.to_vec(), None)
        }
    };
    let mut out = vec![false; n];
    for r in 0..height {
        for c in 0..width {
            let here = labels[r * width + c];
            if outside == Some(here) {
                continue;
            }
            let neighbors = [
                (r as isize - 1, c as isize),
                (r as isize + 1, c as isize),
                (r as isize, c as isize - 1),
                (r as isize, c as isize + 1),
            ];
            out[r * width + c] = neighbors.iter().any(|&(nr, nc)| {
                if nr < 0 || nc < 0 || nr as usize >= height || nc as usize >= width {
                    outside.is_some()
                } else {
                    labels[nr as usize * width + nc as usize] != here
                }
            });
        }
    }
    Ok(out)
}

/// Copy of `img` with boundary pixels painted [`BOUNDARY_COLOR`].
pub fn draw_overlay(img: &ImageRGB, overlay: Overlay<'_>) -> Result<ImageRGB, ImageError> {
    let boundary = boundary_map(img.height, img.width, overlay)?;
    let mut out = img.clone();
    for (p, &b) in boundary.iter().enumerate() {
        if b {
            out.set_pixel(p / img.width, p % img.width, BOUNDARY_COLOR);
        }
    }
    Ok(out)
}

pub fn save_overlay(img: &ImageRGB, overlay: Overlay<'_>, path: impl AsRef<Path>) -> Result<(), ImageError> {
    save_png(&draw_overlay(img, overlay)?, path)
}

/// One image/mask pair of a dataset directory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: ImageRGB,
    pub mask: BinaryMask,
}

/// Loads `<root>/images/*.png` paired with `<root>/masks/*.png` by file stem,
/// sorted by name.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sample>, ImageError> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let entries = fs::read_dir(&images_dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::Missing(images_dir.clone()),
        _ => ImageError::Io {
            path: images_dir.clone(),
            source: e,
        },
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(&images_dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = load_image(images_dir.join(format!("{stem}.png")))?;
        let mask = load_mask(masks_dir.join(format!("{stem}.png")))?;
        if !mask.matches(&image) {
            return Err(ImageError::Dimensions(format!(
                "{stem}: mask {}x{} vs image {}x{}",
                mask.height, mask.width, image.height, image.width
            )));
        }
        samples.push(Sample {
            name: stem,
            image,
            mask,
        });
    }
    Ok(samples)
}

pub fn save_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<(), ImageError> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for s in samples {
        save_png(&s.image, root.join("images").join(format!("{}.png", s.name)))?;
        save_mask_png(&s.mask, root.join("masks").join(format!("{}.png", s.name)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_lab() {
        let [l, a, b] = srgb_pixel_to_lab([255, 255, 255]);
        assert!((l - 100.0).abs() < 1e-4, "{l}");
        assert!(a.abs() <= 0.01 && b.abs() <= 0.01, "{a} {b}");
        assert_eq!(srgb_pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn xylab_single_pixel() {
        let img = ImageRGB::filled(1, 1, [10, 20, 30]);
        let f = build_xylab(&img, 1.0).unwrap();
        assert_eq!(f.matrix.shape(), &[1, 5]);
        assert_eq!(&f.matrix.row(0)[..2], &[0.0, 0.0]);
    }

    #[test]
    fn xylab_white_2x2() {
        let img = ImageRGB::filled(2, 2, [255, 255, 255]);
        let f = build_xylab(&img, 1.0).unwrap();
        let expect_xy = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        for (p, xy) in expect_xy.iter().enumerate() {
            assert_eq!(&f.matrix.row(p)[..2], xy);
            assert!((f.matrix.get(p, 2) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn xylab_rejects_bad_scale() {
        let img = ImageRGB::filled(2, 2, [0, 0, 0]);
        assert!(build_xylab(&img, 0.0).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn empty_mask_has_no_boundary() {
        let img = ImageRGB::filled(4, 5, [9, 9, 9]);
        let mask = BinaryMask::zeros(4, 5);
        assert_eq!(draw_overlay(&img, Overlay::Mask(&mask)).unwrap(), img);
    }

    #[test]
    fn full_mask_outlines_border() {
        let mask = BinaryMask::new(4, 5, vec![1; 20]).unwrap();
        let b = boundary_map(4, 5, Overlay::Mask(&mask)).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let border = r == 0 || c == 0 || r == 3 || c == 4;
                assert_eq!(b[r * 5 + c], border);
            }
        }
    }

    #[test]
    fn uniform_labels_have_no_boundary() {
        let b = boundary_map(3, 3, Overlay::Labels(&[7; 9])).unwrap();
        assert!(b.iter().all(|&x| !x));
    }
}
