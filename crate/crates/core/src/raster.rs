//! 8-bit images <-> latent grids. Pixel values map affinely from `[0, 255]` to
//! `[-1, 1]` (the identity codec used at desk scale).

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Result, SowError};
use crate::grid::LatentGrid;

pub fn pixel_to_latent(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn latent_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Channel midpoint, the "gray" background value.
pub const GRAY: f64 = 0.0;

/// 3 channels for RGB images, 1 for grayscale.
pub fn image_to_latent(img: &DynamicImage) -> LatentGrid {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let values = g.pixels().map(|p| pixel_to_latent(p.0[0])).collect();
            LatentGrid::from_vec(1, h as usize, w as usize, values).expect("sized from image")
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut out = LatentGrid::zeros(3, h, w);
            let arr = out.array_mut();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    arr[[c, y as usize, x as usize]] = pixel_to_latent(p.0[c]);
                }
            }
            out
        }
    }
}

pub fn latent_to_image(latent: &LatentGrid) -> Result<DynamicImage> {
    let (c, h, w) = latent.shape();
    let arr = latent.array();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([latent_to_pixel(arr[[0, y as usize, x as usize]])])
        }))),
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                latent_to_pixel(arr[[0, y, x]]),
                latent_to_pixel(arr[[1, y, x]]),
                latent_to_pixel(arr[[2, y, x]]),
            ])
        }))),
        _ => Err(SowError::invalid(format!(
            "cannot render a {c}-channel latent as an image"
        ))),
    }
}

pub fn load_latent(path: &Path) -> Result<LatentGrid> {
    Ok(image_to_latent(&image::open(path)?))
}

/// Loads an image and resamples it to `width x height` (nearest neighbour).
pub fn load_latent_resized(path: &Path, width: usize, height: usize) -> Result<LatentGrid> {
    let img = image::open(path)?.resize_exact(
        width as u32,
        height as u32,
        image::imageops::FilterType::Nearest,
    );
    Ok(image_to_latent(&img))
}

/// Nearest-neighbour resample of every channel to `height x width`.
pub fn resample_nearest(latent: &LatentGrid, height: usize, width: usize) -> Result<LatentGrid> {
    let (c, h, w) = latent.shape();
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(SowError::invalid("cannot resample to or from an empty grid"));
    }
    let src = latent.array();
    Ok(LatentGrid::from_array(ndarray::Array3::from_shape_fn((c, height, width), |(ch, r, col)| {
        src[[ch, r * h / height, col * w / width]]
    })))
}

/// Format follows the extension (`.png`, `.pgm`, `.ppm`, `.pnm`).
pub fn save_latent(latent: &LatentGrid, path: &Path) -> Result<()> {
    latent_to_image(latent)?.save(path)?;
    Ok(())
}

pub fn encode_png(latent: &LatentGrid) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    latent_to_image(latent)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Tiles equally sized latents into one row-major grid image with `cols` columns.
pub fn tile(latents: &[LatentGrid], cols: usize) -> Result<LatentGrid> {
    let first = latents
        .first()
        .ok_or_else(|| SowError::invalid("nothing to tile"))?;
    let (c, h, w) = first.shape();
    let cols = cols.max(1).min(latents.len());
    let rows = latents.len().div_ceil(cols);
    let mut out = LatentGrid::filled(c, rows * h, cols * w, -1.0);
    for (i, l) in latents.iter().enumerate() {
        first.ensure_same_shape(l, "tile")?;
        let region = crate::grid::RegionBox::new((i % cols) * w, (i / cols) * h, w, h);
        out.paste(&region, l)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(latent_to_pixel(pixel_to_latent(p)), p);
        }
        assert_eq!(latent_to_pixel(7.0), 255);
        assert_eq!(latent_to_pixel(-7.0), 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..3 * 2 * 4).map(|i| pixel_to_latent((i * 10) as u8)).collect();
        let l = LatentGrid::from_vec(3, 2, 4, values).unwrap();
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("a.{ext}"));
            save_latent(&l, &p).unwrap();
            assert_eq!(load_latent(&p).unwrap(), l);
        }
        let g = LatentGrid::filled(1, 3, 3, pixel_to_latent(200));
        let p = dir.path().join("g.pgm");
        save_latent(&g, &p).unwrap();
        assert_eq!(load_latent(&p).unwrap(), g);
        assert_eq!(&encode_png(&g).unwrap()[1..4], b"PNG");
    }

    #[test]
    fn nearest_resample() {
        let l = LatentGrid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resample_nearest(&l, 4, 4).unwrap();
        assert_eq!(up.array()[[0, 0, 1]], 1.0);
        assert_eq!(up.array()[[0, 3, 3]], 4.0);
        assert_eq!(resample_nearest(&up, 2, 2).unwrap(), l);
        assert!(resample_nearest(&l, 0, 2).is_err());
    }

    #[test]
    fn tile_layout() {
        let a = LatentGrid::filled(1, 2, 2, 0.5);
        let b = LatentGrid::filled(1, 2, 2, -0.5);
        let t = tile(&[a.clone(), b, a], 2).unwrap();
        assert_eq!(t.shape(), (1, 4, 4));
        assert_eq!(t.array()[[0, 0, 0]], 0.5);
        assert_eq!(t.array()[[0, 0, 2]], -0.5);
        assert_eq!(t.array()[[0, 2, 2]], -1.0);
    }
}
