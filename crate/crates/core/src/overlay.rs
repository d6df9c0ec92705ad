//! PNG slice overlays: the image slice in gray with the mask outline in red.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{check_dims, BinaryMask, Volume3D};

pub const OUTLINE: [u8; 3] = [255, 0, 0];

/// Encodes slice `z` as an RGB PNG. Gray levels span the volume's min–max;
/// masked voxels with a 4-neighbor outside the mask (or on the slice edge)
/// are drawn in [`OUTLINE`].
pub fn render_overlay_png(image: &Volume3D, mask: &BinaryMask, z: usize) -> Result<Vec<u8>> {
    check_dims(image.dims(), mask.dims())?;
    let d = image.dims();
    if z >= d.nz {
        return Err(Error::domain(format!("slice {z} outside 0..{}", d.nz)));
    }
    let (lo, hi) = image.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < d.nx && (y as usize) < d.ny && mask.get(x as usize, y as usize, z)
    };
    let mut rgb = Vec::with_capacity(d.slice_len() * 3);
    for y in 0..d.ny {
        for x in 0..d.nx {
            let (xi, yi) = (x as i64, y as i64);
            let edge = inside(xi, yi)
                && !(inside(xi - 1, yi) && inside(xi + 1, yi) && inside(xi, yi - 1) && inside(xi, yi + 1));
            if edge {
                rgb.extend_from_slice(&OUTLINE);
            } else {
                let g = ((image.get(x, y, z) - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                rgb.extend_from_slice(&[g, g, g]);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, d.nx as u32, d.ny as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&rgb)?;
    }
    Ok(out)
}

pub fn render_overlay(image: &Volume3D, mask: &BinaryMask, z: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = render_overlay_png(image, mask, z)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.width, info.height, buf)
    }

    fn ramp() -> Volume3D {
        Volume3D::from_fn(Dims::new(6, 5, 2).unwrap(), |x, y, z| (x + 6 * y + 30 * z) as f64).unwrap()
    }

    #[test]
    fn empty_mask_is_gray() {
        let img = ramp();
        let (w, h, px) = decode(&render_overlay_png(&img, &BinaryMask::empty(img.dims()), 0).unwrap());
        assert_eq!((w, h), (6, 5));
        assert!(px.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(&px[0..3], &[0, 0, 0]);
    }

    #[test]
    fn full_mask_rings_the_border() {
        let img = ramp();
        let (_, _, px) = decode(&render_overlay_png(&img, &BinaryMask::full(img.dims()), 1).unwrap());
        for y in 0..5 {
            for x in 0..6 {
                let p = &px[3 * (x + 6 * y)..3 * (x + 6 * y) + 3];
                let border = x == 0 || y == 0 || x == 5 || y == 4;
                assert_eq!(p == OUTLINE, border, "({x},{y})");
            }
        }
    }

    #[test]
    fn deterministic_and_range_checked() {
        let img = ramp();
        let m = BinaryMask::from_fn(img.dims(), |x, y, _| x > 1 && y > 1);
        assert_eq!(
            render_overlay_png(&img, &m, 0).unwrap(),
            render_overlay_png(&img, &m, 0).unwrap()
        );
        assert!(render_overlay_png(&img, &m, 2).is_err());
    }
}
