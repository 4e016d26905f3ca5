//! Per-entity localized views of a generated image.
//!
//! An entity mask comes from a [`SegmentationBackend`]; the view is then
//! produced by one of six [`Strategy`] options. The default pipeline blurs
//! everything outside the mask, crops around the mask with a margin and fits
//! the crop back into the original resolution on a white canvas.

mod mask;
mod ops;
mod segment;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use mask::{BBox, Bitmap, Mask, RleMask};
pub use ops::{
    blur_outside, blur_radius_for, bounding_box, crop_resize, fitted_size, gaussian_blur, gaussian_kernel,
    mask_outside, BLACK, WHITE,
};
pub use segment::{
    segment, FullFrameSegmenter, HttpSegmenter, MaskCandidate, SegmentError, SegmentRequest, SegmentResponse,
    SegmentationBackend, StaticSegmenter, WireCandidate,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("mask is {found:?} but image is {expected:?} (width, height)")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("box {bbox:?} does not fit a {width}x{height} image")]
    BBoxOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("target size must be non-zero")]
    EmptyTarget,
    #[error("malformed mask encoding: {0}")]
    BadEncoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Mask,
    Blur,
    Crop,
    MaskCrop,
    #[default]
    BlurCrop,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::None, Strategy::Mask, Strategy::Blur, Strategy::Crop, Strategy::MaskCrop, Strategy::BlurCrop];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Mask => "mask",
            Strategy::Blur => "blur",
            Strategy::Crop => "crop",
            Strategy::MaskCrop => "mask_crop",
            Strategy::BlurCrop => "blur_crop",
        }
    }

    pub fn crops(self) -> bool {
        matches!(self, Strategy::Crop | Strategy::MaskCrop | Strategy::BlurCrop)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown localization strategy `{0}` (expected one of none, mask, blur, crop, mask_crop, blur_crop)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| UnknownStrategy(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    pub margin_fraction: f64,
    pub blur_radius_fraction: f64,
    /// Output `(height, width)` for cropping strategies; `None` keeps the
    /// source resolution.
    pub target: Option<(u32, u32)>,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        LocalizeParams { margin_fraction: 0.1, blur_radius_fraction: 0.05, target: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedView {
    pub pixels: RgbImage,
    pub strategy: Strategy,
    pub source_mask: Option<Mask>,
    pub bbox: Option<BBox>,
    pub fallback_used: bool,
}

/// Audit record written next to a persisted view.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewSidecar {
    pub strategy: Strategy,
    pub bbox: Option<BBox>,
    pub fallback_used: bool,
    pub mask_confidence: Option<f64>,
}

impl LocalizedView {
    pub fn unlocalized(image: &RgbImage) -> Self {
        LocalizedView { pixels: image.clone(), strategy: Strategy::None, source_mask: None, bbox: None, fallback_used: false }
    }

    pub fn sidecar(&self) -> ViewSidecar {
        ViewSidecar {
            strategy: self.strategy,
            bbox: self.bbox,
            fallback_used: self.fallback_used,
            mask_confidence: self.source_mask.as_ref().map(|m| m.confidence),
        }
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        self.pixels
            .save_with_format(dir.join(format!("{stem}.png")), image::ImageFormat::Png)
            .map_err(std::io::Error::other)?;
        let json = serde_json::to_vec_pretty(&self.sidecar()).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("{stem}.json")), json)
    }
}

/// Applies `strategy` to `image` using `mask`.
///
/// An empty mask under any strategy other than `none` falls back to the raw
/// image, reported as strategy `none` with `fallback_used` set.
pub fn localize(
    image: &RgbImage,
    mask: &Mask,
    strategy: Strategy,
    params: &LocalizeParams,
) -> Result<LocalizedView, GeometryError> {
    let (w, h) = image.dimensions();
    if (mask.width(), mask.height()) != (w, h) {
        return Err(GeometryError::DimensionMismatch { expected: (w, h), found: (mask.width(), mask.height()) });
    }
    if strategy == Strategy::None {
        return Ok(LocalizedView { source_mask: Some(mask.clone()), ..LocalizedView::unlocalized(image) });
    }
    if mask.is_empty() {
        return Ok(LocalizedView {
            pixels: image.clone(),
            strategy: Strategy::None,
            source_mask: Some(mask.clone()),
            bbox: None,
            fallback_used: true,
        });
    }

    let radius = blur_radius_for(w, h, params.blur_radius_fraction);
    let composite = match strategy {
        Strategy::Mask | Strategy::MaskCrop => mask_outside(image, mask)?,
        Strategy::Blur | Strategy::BlurCrop => blur_outside(image, mask, radius)?,
        Strategy::Crop => image.clone(),
        Strategy::None => unreachable!("handled above"),
    };

    let (pixels, bbox) = if strategy.crops() {
        let bbox = bounding_box(mask, params.margin_fraction)?;
        let (th, tw) = params.target.unwrap_or((h, w));
        (crop_resize(&composite, bbox, th, tw)?, Some(bbox))
    } else {
        (composite, None)
    };

    Ok(LocalizedView { pixels, strategy, source_mask: Some(mask.clone()), bbox, fallback_used: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 31 + y * 7) as u8, (x * y + 3) as u8, (x + 2 * y) as u8]))
    }

    #[test]
    fn none_strategy_is_identity() {
        let img = noisy(20, 16);
        let view = localize(&img, &Mask::full(20, 16, "shirt"), Strategy::None, &LocalizeParams::default()).unwrap();
        assert_eq!(view.pixels, img);
        assert!(!view.fallback_used);
        assert_eq!(view.strategy, Strategy::None);
    }

    #[test]
    fn blur_crop_full_mask_equals_crop_resize() {
        let img = noisy(20, 16);
        let mask = Mask::full(20, 16, "shirt");
        let params = LocalizeParams::default();
        let view = localize(&img, &mask, Strategy::BlurCrop, &params).unwrap();
        let bbox = bounding_box(&mask, params.margin_fraction).unwrap();
        assert_eq!(view.pixels, crop_resize(&img, bbox, 16, 20).unwrap());
        assert_eq!(view.pixels, img);
        assert_eq!(view.bbox, Some(bbox));
    }

    #[test]
    fn empty_mask_falls_back() {
        let img = noisy(20, 16);
        let view =
            localize(&img, &Mask::not_found(20, 16, "shirt"), Strategy::BlurCrop, &LocalizeParams::default()).unwrap();
        assert_eq!(view.pixels, img);
        assert!(view.fallback_used);
        assert_eq!(view.strategy, Strategy::None);
        assert_eq!(view.bbox, None);
    }

    #[test]
    fn mask_strategy_blacks_out_background() {
        let img = noisy(10, 10);
        let mask = Mask::new(Bitmap::from_fn(10, 10, |x, _| x < 5), 0.8, "shirt");
        let view = localize(&img, &mask, Strategy::Mask, &LocalizeParams::default()).unwrap();
        for (x, y, p) in view.pixels.enumerate_pixels() {
            if x < 5 {
                assert_eq!(p, img.get_pixel(x, y));
            } else {
                assert_eq!(*p, BLACK);
            }
        }
        assert_eq!(view.sidecar().mask_confidence, Some(0.8));
    }

    #[test]
    fn every_cropping_strategy_keeps_target_size_and_box() {
        let img = noisy(40, 30);
        let mask = Mask::new(Bitmap::from_fn(40, 30, |x, y| (5..15).contains(&x) && (8..20).contains(&y)), 1.0, "s");
        let params = LocalizeParams { target: Some((64, 48)), ..Default::default() };
        for strategy in Strategy::ALL {
            let view = localize(&img, &mask, strategy, &params).unwrap();
            assert_eq!(view.strategy, strategy);
            assert_eq!(view.bbox.is_some(), strategy.crops());
            if strategy.crops() {
                assert_eq!(view.pixels.dimensions(), (48, 64));
            } else {
                assert_eq!(view.pixels.dimensions(), (40, 30));
            }
        }
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("blurry".parse::<Strategy>().is_err());
    }

    #[test]
    fn save_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = noisy(12, 12);
        let mask = Mask::new(Bitmap::from_fn(12, 12, |x, y| x > 2 && y > 2), 0.7, "shirt");
        let view = localize(&img, &mask, Strategy::BlurCrop, &LocalizeParams::default()).unwrap();
        view.save(dir.path(), "item-0-shirt").unwrap();
        let sidecar: ViewSidecar =
            serde_json::from_slice(&std::fs::read(dir.path().join("item-0-shirt.json")).unwrap()).unwrap();
        assert_eq!(sidecar, view.sidecar());
        let png = image::open(dir.path().join("item-0-shirt.png")).unwrap().to_rgb8();
        assert_eq!(png, view.pixels);
    }
}
