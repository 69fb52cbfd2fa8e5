//! PNG image I/O and reflect padding. Images are (H, W, 3) arrays of f32
//! in [0,1].

use crate::error::{DehazeError, Result};
use ndarray::Array3;
use std::path::Path;

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(DehazeError::Shape {
            expected: "(H, W, 3)".into(),
            got: format!("{:?}", img.shape()),
        });
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(img[(y, x, 0)]),
                to_u8(img[(y, x, 1)]),
                to_u8(img[(y, x, 2)]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Symmetric reflection of an index into [0, len).
fn mirror(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * len;
    let m = i % period;
    if m < len {
        m
    } else {
        period - 1 - m
    }
}

/// Reflect-pad bottom/right to the next multiple of `mult` on each axis.
/// Returns the padded image and the original (h, w) for `crop_to`.
pub fn pad_reflect(img: &Array3<f32>, mult: usize) -> (Array3<f32>, (usize, usize)) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ph = h.div_ceil(mult) * mult;
    let pw = w.div_ceil(mult) * mult;
    if ph == h && pw == w {
        return (img.clone(), (h, w));
    }
    let mut out = Array3::<f32>::zeros((ph, pw, 3));
    for y in 0..ph {
        let sy = mirror(y, h);
        for x in 0..pw {
            let sx = mirror(x, w);
            for c in 0..3 {
                out[(y, x, c)] = img[(sy, sx, c)];
            }
        }
    }
    (out, (h, w))
}

/// Inverse of `pad_reflect`: crop back to the original dimensions.
pub fn crop_to(img: &Array3<f32>, dims: (usize, usize)) -> Array3<f32> {
    img.slice(ndarray::s![..dims.0, ..dims.1, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) % 97) as f32 / 96.0
        })
    }

    #[test]
    fn pad_noop_on_multiple() {
        let img = ramp(64, 64);
        let (p, dims) = pad_reflect(&img, 4);
        assert_eq!(p.shape(), &[64, 64, 3]);
        assert_eq!(dims, (64, 64));
    }

    #[test]
    fn pad_and_crop_restores() {
        let img = ramp(63, 61);
        let (p, dims) = pad_reflect(&img, 4);
        assert_eq!(p.shape(), &[64, 64, 3]);
        assert_eq!(crop_to(&p, dims), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ramp(9, 13);
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }
}
