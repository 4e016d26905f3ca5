use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use super::mask::{BBox, Mask};
use super::GeometryError;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

fn check_dims(image: &RgbImage, mask: &Mask) -> Result<(), GeometryError> {
    if image.dimensions() != (mask.width(), mask.height()) {
        return Err(GeometryError::DimensionMismatch {
            expected: image.dimensions(),
            found: (mask.width(), mask.height()),
        });
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps for half-width `radius` (sigma = radius / 2).
pub fn gaussian_kernel(radius: u32) -> Vec<f32> {
    let sigma = (radius as f32 / 2.0).max(0.5);
    let r = radius as i64;
    let mut taps: Vec<f32> = (-r..=r)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with clamp-to-edge borders.
///
/// The intermediate pass is kept in `f32` and rounded once at the end.
pub fn gaussian_blur(image: &RgbImage, radius: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    if radius == 0 || w == 0 || h == 0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(radius);
    let r = radius as i64;
    let (wi, hi) = (w as i64, h as i64);

    let mut horizontal = vec![[0f32; 3]; (w as usize) * (h as usize)];
    for y in 0..h {
        for x in 0..wi {
            let mut acc = [0f32; 3];
            for (k, tap) in kernel.iter().enumerate() {
                let sx = (x + k as i64 - r).clamp(0, wi - 1) as u32;
                let p = image.get_pixel(sx, y).0;
                for c in 0..3 {
                    acc[c] += tap * p[c] as f32;
                }
            }
            horizontal[(y as usize) * (w as usize) + x as usize] = acc;
        }
    }

    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0f32; 3];
        for (k, tap) in kernel.iter().enumerate() {
            let sy = (y as i64 + k as i64 - r).clamp(0, hi - 1) as usize;
            let p = horizontal[sy * (w as usize) + x as usize];
            for c in 0..3 {
                acc[c] += tap * p[c];
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// Blur radius in pixels for a `fraction` of the shorter image side, never below 3.
pub fn blur_radius_for(width: u32, height: u32, fraction: f64) -> u32 {
    ((width.min(height) as f64 * fraction).round() as u32).max(3)
}

/// `M * x + (1 - M) * blur(x)`: pixels under the mask are copied verbatim.
pub fn blur_outside(image: &RgbImage, mask: &Mask, blur_radius: u32) -> Result<RgbImage, GeometryError> {
    check_dims(image, mask)?;
    if mask.bitmap.is_full() {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, blur_radius);
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.bitmap.get(x, y) {
            *image.get_pixel(x, y)
        } else {
            *blurred.get_pixel(x, y)
        }
    }))
}

/// Blacks out every pixel outside the mask.
pub fn mask_outside(image: &RgbImage, mask: &Mask) -> Result<RgbImage, GeometryError> {
    check_dims(image, mask)?;
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.bitmap.get(x, y) {
            *image.get_pixel(x, y)
        } else {
            BLACK
        }
    }))
}

/// Tightest box around the mask, grown by `margin_fraction` of its height
/// (top and bottom) and width (left and right), clamped to the image.
pub fn bounding_box(mask: &Mask, margin_fraction: f64) -> Result<BBox, GeometryError> {
    let bm = &mask.bitmap;
    let (mut top, mut left, mut bottom, mut right) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for y in 0..bm.height() {
        for x in 0..bm.width() {
            if bm.get(x, y) {
                top = top.min(y);
                bottom = bottom.max(y + 1);
                left = left.min(x);
                right = right.max(x + 1);
            }
        }
    }
    if top == u32::MAX {
        return Err(GeometryError::EmptyMask);
    }
    let dy = (margin_fraction * (bottom - top) as f64).round() as u32;
    let dx = (margin_fraction * (right - left) as f64).round() as u32;
    Ok(BBox {
        top: top.saturating_sub(dy),
        left: left.saturating_sub(dx),
        bottom: (bottom + dy).min(bm.height()),
        right: (right + dx).min(bm.width()),
    })
}

/// Crops to `bbox`, scales the crop to fit inside `target_h x target_w`
/// keeping its aspect ratio, and centres it on a white canvas of exactly the
/// target size.
pub fn crop_resize(image: &RgbImage, bbox: BBox, target_h: u32, target_w: u32) -> Result<RgbImage, GeometryError> {
    if !bbox.is_valid_for(image.width(), image.height()) {
        return Err(GeometryError::BBoxOutOfBounds { bbox, width: image.width(), height: image.height() });
    }
    if target_h == 0 || target_w == 0 {
        return Err(GeometryError::EmptyTarget);
    }
    let crop = imageops::crop_imm(image, bbox.left, bbox.top, bbox.width(), bbox.height()).to_image();
    let (ch, cw) = (bbox.height(), bbox.width());
    if (ch, cw) == (target_h, target_w) {
        return Ok(crop);
    }

    let (sh, sw) = fitted_size(ch, cw, target_h, target_w);
    let scaled = if (sh, sw) == (ch, cw) { crop } else { imageops::resize(&crop, sw, sh, FilterType::Triangle) };

    let mut canvas = RgbImage::from_pixel(target_w, target_h, WHITE);
    let (off_y, off_x) = ((target_h - sh) / 2, (target_w - sw) / 2);
    imageops::replace(&mut canvas, &scaled, off_x as i64, off_y as i64);
    Ok(canvas)
}

/// Size `(h, w)` of a `ch x cw` region scaled to fit inside the target.
pub fn fitted_size(ch: u32, cw: u32, target_h: u32, target_w: u32) -> (u32, u32) {
    let scale = (target_h as f64 / ch as f64).min(target_w as f64 / cw as f64);
    let sh = ((ch as f64 * scale).round() as u32).clamp(1, target_h);
    let sw = ((cw as f64 * scale).round() as u32).clamp(1, target_w);
    (sh, sw)
}

#[cfg(test)]
mod tests {
    use super::super::mask::Bitmap;
    use super::*;

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 37 + y * 11) as u8, (x * y) as u8, (x ^ y) as u8 * 3]))
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn brute_blur(image: &RgbImage, radius: u32) -> RgbImage {
        let k = gaussian_kernel(radius);
        let r = radius as i64;
        let (w, h) = (image.width() as i64, image.height() as i64);
        RgbImage::from_fn(image.width(), image.height(), |x, y| {
            let mut acc = [0f64; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as i64 + dx).clamp(0, w - 1) as u32;
                    let sy = (y as i64 + dy).clamp(0, h - 1) as u32;
                    let wgt = k[(dx + r) as usize] as f64 * k[(dy + r) as usize] as f64;
                    let p = image.get_pixel(sx, sy).0;
                    for c in 0..3 {
                        acc[c] += wgt * p[c] as f64;
                    }
                }
            }
            Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }

    #[test]
    fn separable_blur_matches_brute_force() {
        let img = noisy(17, 13);
        let fast = gaussian_blur(&img, 3);
        let slow = brute_blur(&img, 3);
        for (a, b) in fast.pixels().zip(slow.pixels()) {
            for c in 0..3 {
                assert!((a[c] as i16 - b[c] as i16).abs() <= 1, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn constant_image_is_blur_invariant() {
        for value in [0u8, 1, 37, 128, 254, 255] {
            let img = RgbImage::from_pixel(20, 15, Rgb([value, 255 - value, value / 2]));
            assert_eq!(brute_blur(&img, 4), img);
            let half = Mask::new(Bitmap::from_fn(20, 15, |x, _| x < 10), 1.0, "shirt");
            assert_eq!(blur_outside(&img, &half, 4).unwrap(), img);
        }
    }

    #[test]
    fn blur_outside_full_and_empty_masks() {
        let img = noisy(16, 16);
        let full = Mask::full(16, 16, "shirt");
        assert_eq!(blur_outside(&img, &full, 3).unwrap(), img);
        let empty = Mask::not_found(16, 16, "shirt");
        assert_eq!(blur_outside(&img, &empty, 3).unwrap(), gaussian_blur(&img, 3));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = noisy(8, 8);
        let mask = Mask::full(8, 7, "shirt");
        assert!(matches!(blur_outside(&img, &mask, 3), Err(GeometryError::DimensionMismatch { .. })));
        assert!(matches!(mask_outside(&img, &mask), Err(GeometryError::DimensionMismatch { .. })));
    }

    #[test]
    fn bbox_examples() {
        let single = Mask::new(Bitmap::from_fn(40, 40, |x, y| (x, y) == (10, 10)), 1.0, "s");
        assert_eq!(bounding_box(&single, 0.0).unwrap(), BBox::new(10, 10, 11, 11));

        let block = Mask::new(
            Bitmap::from_fn(50, 40, |x, y| (10..20).contains(&y) && (10..30).contains(&x)),
            1.0,
            "s",
        );
        assert_eq!(bounding_box(&block, 0.1).unwrap(), BBox::new(9, 8, 21, 32));

        let corner = Mask::new(Bitmap::from_fn(30, 20, |x, y| x < 10 && y < 8), 1.0, "s");
        let b = bounding_box(&corner, 0.5).unwrap();
        assert_eq!((b.top, b.left), (0, 0));
        assert_eq!((b.bottom, b.right), (12, 15));

        assert!(matches!(bounding_box(&Mask::not_found(4, 4, "s"), 0.1), Err(GeometryError::EmptyMask)));
    }

    #[test]
    fn crop_resize_identity() {
        let img = noisy(24, 18);
        let out = crop_resize(&img, BBox::new(0, 0, 18, 24), 18, 24).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_resize_pads_short_axis_white() {
        let img = RgbImage::from_pixel(60, 120, Rgb([10, 200, 30]));
        // 100 rows x 50 columns crop into 200x200.
        let out = crop_resize(&img, BBox::new(5, 5, 105, 55), 200, 200).unwrap();
        assert_eq!(out.dimensions(), (200, 200));
        for (x, y, p) in out.enumerate_pixels() {
            if (50..150).contains(&x) {
                assert_eq!(*p, Rgb([10, 200, 30]), "content at ({x},{y})");
            } else {
                assert_eq!(*p, WHITE, "padding at ({x},{y})");
            }
        }
    }

    #[test]
    fn crop_resize_single_pixel() {
        let img = noisy(10, 10);
        let colour = *img.get_pixel(3, 4);
        let out = crop_resize(&img, BBox::new(4, 3, 5, 4), 200, 200).unwrap();
        assert_eq!(out.dimensions(), (200, 200));
        assert!(out.pixels().all(|p| *p == colour));

        let wide = crop_resize(&img, BBox::new(4, 3, 5, 4), 100, 200).unwrap();
        assert_eq!(wide.dimensions(), (200, 100));
        assert_eq!(*wide.get_pixel(0, 50), WHITE);
        assert_eq!(*wide.get_pixel(100, 50), colour);
    }

    #[test]
    fn crop_resize_rejects_bad_box() {
        let img = noisy(10, 10);
        assert!(crop_resize(&img, BBox::new(0, 0, 11, 5), 10, 10).is_err());
        assert!(crop_resize(&img, BBox::new(3, 0, 3, 5), 10, 10).is_err());
    }

    #[test]
    fn radius_floor() {
        assert_eq!(blur_radius_for(20, 40, 0.05), 3);
        assert_eq!(blur_radius_for(1024, 768, 0.05), 38);
    }
}
