//! Screenshot loading with longest-side downscaling.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader};

use crate::backend::Part;
use crate::trajectory::ScreenshotRef;

pub const DEFAULT_MAX_DIM: u32 = 1280;

#[derive(Debug, Clone)]
pub struct ImageLoader {
    base_dir: PathBuf,
    max_dim: u32,
}

impl ImageLoader {
    pub fn new(base_dir: impl Into<PathBuf>, max_dim: u32) -> Self {
        Self {
            base_dir: base_dir.into(),
            max_dim: max_dim.max(1),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Loads a screenshot as a request part. `None` when the file cannot be
    /// read; callers substitute a textual placeholder.
    pub fn load(&self, r: &ScreenshotRef) -> Option<Part> {
        let path = r.resolve(&self.base_dir);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                tracing::debug!("screenshot {} unavailable: {e}", path.display());
                return None;
            }
        };
        Some(self.prepare(&path, bytes))
    }

    fn prepare(&self, path: &Path, bytes: Vec<u8>) -> Part {
        let format = image::guess_format(&bytes)
            .ok()
            .or_else(|| ImageFormat::from_path(path).ok());
        let media_type = format
            .map(|f| f.to_mime_type().to_owned())
            .unwrap_or_else(|| "application/octet-stream".to_owned());

        let decoded = ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .ok()
            .and_then(|r| r.decode().ok());
        let Some(img) = decoded else {
            return Part::Image { media_type, bytes };
        };
        if img.width().max(img.height()) <= self.max_dim {
            return Part::Image { media_type, bytes };
        }
        let small = img.resize(
            self.max_dim,
            self.max_dim,
            image::imageops::FilterType::Triangle,
        );
        let mut out = Cursor::new(Vec::new());
        match small.write_to(&mut out, ImageFormat::Png) {
            Ok(()) => Part::Image {
                media_type: "image/png".to_owned(),
                bytes: out.into_inner(),
            },
            Err(e) => {
                tracing::warn!("cannot re-encode {}: {e}", path.display());
                Part::Image { media_type, bytes }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{DynamicImage, GenericImageView, RgbImage};

    fn png(w: u32, h: u32) -> Vec<u8> {
        let img = DynamicImage::ImageRgb8(RgbImage::new(w, h));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn downscales_longest_side() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("big.png"), png(400, 100)).unwrap();
        let loader = ImageLoader::new(dir.path(), 200);
        let Some(Part::Image { media_type, bytes }) = loader.load(&ScreenshotRef("big.png".into())) else {
            panic!("expected image");
        };
        assert_eq!(media_type, "image/png");
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!(img.dimensions(), (200, 50));
    }

    #[test]
    fn small_images_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let raw = png(10, 10);
        std::fs::write(dir.path().join("s.png"), &raw).unwrap();
        let loader = ImageLoader::new(dir.path(), DEFAULT_MAX_DIM);
        assert_eq!(
            loader.load(&ScreenshotRef("s.png".into())),
            Some(Part::Image { media_type: "image/png".into(), bytes: raw })
        );
    }

    #[test]
    fn missing_and_undecodable() {
        let dir = tempfile::tempdir().unwrap();
        let loader = ImageLoader::new(dir.path(), DEFAULT_MAX_DIM);
        assert!(loader.load(&ScreenshotRef("nope.png".into())).is_none());
        std::fs::write(dir.path().join("x.bin"), b"not an image").unwrap();
        assert!(matches!(loader.load(&ScreenshotRef("x.bin".into())), Some(Part::Image { .. })));
    }
}
