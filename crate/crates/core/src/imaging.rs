//! Pixel work: loading source images, region crops, translucent mark
//! overlays and lossless encoding of the result.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgba, RgbaImage};

use crate::geometry::BBox;
use crate::model::ImageRecord;
use crate::providers::ImagePayload;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("cannot read image {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("image {path} is {actual_w}x{actual_h} but annotations say {expected_w}x{expected_h}")]
    SizeMismatch {
        path: PathBuf,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("mask {mask_ref}: {message}")]
    Mask { mask_ref: String, message: String },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

/// Resolves relative `file_path`s in image records against a root directory.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, file_path: &str) -> PathBuf {
        let p = Path::new(file_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads the record's image as RGBA and checks its size.
    pub fn load(&self, record: &ImageRecord) -> Result<RgbaImage, ImagingError> {
        let path = self.resolve(&record.file_path);
        let img = image::open(&path)
            .map_err(|e| ImagingError::Unreadable {
                path: path.clone(),
                message: e.to_string(),
            })?
            .into_rgba8();
        if img.width() != record.width || img.height() != record.height {
            return Err(ImagingError::SizeMismatch {
                path,
                expected_w: record.width,
                expected_h: record.height,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        Ok(img)
    }

    /// Loads a binary mask. `path#id` selects one segment of a panoptic PNG
    /// (id = R + 256 G + 65536 B); a bare path is read as grayscale with
    /// non-zero pixels inside.
    pub fn load_mask(&self, mask_ref: &str, width: u32, height: u32) -> Result<GrayImage, ImagingError> {
        let err = |message: String| ImagingError::Mask {
            mask_ref: mask_ref.to_string(),
            message,
        };
        let (file, segment) = match mask_ref.rsplit_once('#') {
            Some((f, id)) => (f, Some(id.parse::<u32>().map_err(|_| err(format!("bad segment id '{id}'")))?)),
            None => (mask_ref, None),
        };
        let img = image::open(self.resolve(file)).map_err(|e| err(e.to_string()))?;
        if img.width() != width || img.height() != height {
            return Err(err(format!(
                "mask is {}x{}, image is {width}x{height}",
                img.width(),
                img.height()
            )));
        }
        let mask = match segment {
            Some(id) => {
                let rgb = img.into_rgb8();
                GrayImage::from_fn(width, height, |x, y| {
                    let p = rgb.get_pixel(x, y).0;
                    let v = p[0] as u32 + 256 * p[1] as u32 + 65536 * p[2] as u32;
                    Luma([if v == id { 255 } else { 0 }])
                })
            }
            None => {
                let g = img.into_luma8();
                GrayImage::from_fn(width, height, |x, y| Luma([if g.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }]))
            }
        };
        Ok(mask)
    }
}

/// Copies out the pixels covered by `region`.
pub fn crop(img: &RgbaImage, region: &BBox<f64>) -> RgbaImage {
    let (x, y, w, h) = region.pixel_rect(img.width(), img.height());
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

fn blend(px: &mut Rgba<u8>, color: [u8; 3], alpha: f32) {
    for c in 0..3 {
        let v = px.0[c] as f32 * (1.0 - alpha) + color[c] as f32 * alpha;
        px.0[c] = v.round().clamp(0.0, 255.0) as u8;
    }
}

/// Alpha-blends `color` over every pixel inside the box.
pub fn fill_box(img: &mut RgbaImage, region: &BBox<f64>, color: [u8; 3], alpha: f32) {
    let (x0, y0, w, h) = region.pixel_rect(img.width(), img.height());
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            blend(img.get_pixel_mut(x, y), color, alpha);
        }
    }
}

/// Alpha-blends `color` over the mask's non-zero pixels.
pub fn fill_mask(img: &mut RgbaImage, mask: &GrayImage, color: [u8; 3], alpha: f32) {
    for (x, y, m) in mask.enumerate_pixels() {
        if m.0[0] > 0 && x < img.width() && y < img.height() {
            blend(img.get_pixel_mut(x, y), color, alpha);
        }
    }
}

pub fn encode_png(img: &RgbaImage) -> Result<ImagePayload, ImagingError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(ImagePayload::from_encoded(buf.into_inner()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_fill() {
        let mut img = RgbaImage::from_pixel(10, 8, Rgba([100, 100, 100, 255]));
        let b: BBox<f64> = [2.0, 1.0, 3.0, 2.0].into();
        fill_box(&mut img, &b, [0, 0, 255], 0.5);
        assert_eq!(img.get_pixel(2, 1).0, [50, 50, 178, 255]);
        assert_eq!(img.get_pixel(5, 1).0, [100, 100, 100, 255]);
        let c = crop(&img, &b);
        assert_eq!(c.dimensions(), (3, 2));
    }

    #[test]
    fn png_is_deterministic() {
        let img = RgbaImage::from_fn(16, 16, |x, y| Rgba([x as u8 * 10, y as u8 * 10, 7, 255]));
        let a = encode_png(&img).unwrap();
        let b = encode_png(&img).unwrap();
        assert_eq!(a.digest(), b.digest());
        let back = image::load_from_memory(a.bytes()).unwrap().into_rgba8();
        assert_eq!(back, img);
    }

    #[test]
    fn panoptic_segment_mask() {
        let dir = tempfile::tempdir().unwrap();
        let seg = image::RgbImage::from_fn(4, 4, |x, _| if x < 2 { image::Rgb([1, 1, 0]) } else { image::Rgb([9, 0, 0]) });
        seg.save(dir.path().join("pan.png")).unwrap();
        let store = ImageStore::new(dir.path());
        let m = store.load_mask("pan.png#257", 4, 4).unwrap();
        assert_eq!(m.get_pixel(0, 0).0[0], 255);
        assert_eq!(m.get_pixel(3, 0).0[0], 0);
        assert!(store.load_mask("pan.png#x", 4, 4).is_err());
        assert!(store.load_mask("pan.png", 5, 4).is_err());
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        RgbaImage::new(5, 5).save(dir.path().join("a.png")).unwrap();
        let rec = ImageRecord {
            image_id: "a".into(),
            width: 6,
            height: 5,
            file_path: "a.png".into(),
            objects: vec![],
            relations: vec![],
        };
        let store = ImageStore::new(dir.path());
        assert!(matches!(store.load(&rec), Err(ImagingError::SizeMismatch { .. })));
        let missing = ImageRecord { file_path: "nope.png".into(), ..rec };
        assert!(matches!(store.load(&missing), Err(ImagingError::Unreadable { .. })));
    }
}
