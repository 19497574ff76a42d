use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;

use crate::scene::ColorImage;

pub const JPEG_MEDIA_TYPE: &str = "image/jpeg";

/// Resizes to `target_height`, preserving aspect ratio (width rounded to the
/// nearest integer, at least 1) with bilinear sampling. Images already at the
/// target height are returned unchanged.
pub fn resize_image(image: &ColorImage, target_height: u32) -> ColorImage {
    assert!(image.width > 0 && image.height > 0, "cannot resize an empty image");
    assert!(target_height > 0, "target height must be positive");
    if image.height == target_height {
        return image.clone();
    }
    let scale = target_height as f64 / image.height as f64;
    let width = ((image.width as f64 * scale).round() as u32).max(1);
    resize_bilinear(image, width, target_height)
}

fn sample_axis(dst: u32, dst_len: u32, src_len: u32) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len as usize - 1);
    (i0, i1, s - i0 as f64)
}

pub fn resize_bilinear(image: &ColorImage, width: u32, height: u32) -> ColorImage {
    let xs: Vec<_> = (0..width).map(|x| sample_axis(x, width, image.width)).collect();
    let src_w = image.width as usize;
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        let (y0, y1, fy) = sample_axis(y, height, image.height);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |x: usize, y: usize| image.data[(y * src_w + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ColorImage::new(width, height, data)
}

pub fn encode_jpeg(image: &ColorImage, quality: u8) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality).encode(
        &image.data,
        image.width,
        image.height,
        ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}
