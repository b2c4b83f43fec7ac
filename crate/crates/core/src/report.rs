//! Optional rendered outputs: side-by-side comparison grids and layer
//! intensity profile plots, written as 8-bit PNGs.

use std::path::Path;

use ndarray::Array2;

use crate::bscan::{save_image, BScan, BitDepth, ScanKind};
use crate::error::{Error, Result};

/// Horizontal (noisy | processed | clean) strip with thin separators.
pub fn comparison_grid(noisy: &BScan, processed: &BScan, clean: &BScan) -> Result<BScan> {
    let dims = noisy.pixels.dim();
    if processed.pixels.dim() != dims || clean.pixels.dim() != dims {
        return Err(Error::Argument("comparison grid needs same-size scans".into()));
    }
    let (h, w) = dims;
    let sep = 2usize;
    let mut out = Array2::from_elem((h, w * 3 + sep * 2), 1.0f32);
    for (slot, img) in [noisy, processed, clean].iter().enumerate() {
        let offset = slot * (w + sep);
        for r in 0..h {
            for c in 0..w {
                out[[r, offset + c]] = img.pixels[[r, c]];
            }
        }
    }
    BScan::new(out, format!("{}_grid", noisy.id), ScanKind::Processed)
}

/// Renders one or more profiles as polylines on a white canvas. Profiles are
/// drawn darkest first; values are auto-scaled to the joint range.
pub fn lpi_plot(profiles: &[(String, Vec<f64>)], height: usize) -> Result<Array2<u8>> {
    let width = profiles.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    if width == 0 || height < 16 {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, p) in profiles {
        for &v in p {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let margin = 4usize;
    let mut canvas = Array2::from_elem((height, width), 255u8);
    let shades: [u8; 4] = [0, 90, 150, 200];
    for (i, (_, profile)) in profiles.iter().enumerate() {
        let shade = shades[i % shades.len()];
        let mut prev: Option<usize> = None;
        for (c, &v) in profile.iter().enumerate() {
            let t = (v - lo) / (hi - lo);
            let r = margin + ((1.0 - t) * (height - 2 * margin - 1) as f64).round() as usize;
            if let Some(pr) = prev {
                let (a, b) = if pr <= r { (pr, r) } else { (r, pr) };
                for rr in a..=b {
                    canvas[[rr, c]] = shade;
                }
            } else {
                canvas[[r, c]] = shade;
            }
            prev = Some(r);
        }
    }
    Ok(canvas)
}

pub fn save_gray8(canvas: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = canvas.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in canvas.indexed_iter() {
        buf.put_pixel(c as u32, r as u32, image::Luma([v]));
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

pub fn save_grid(grid: &BScan, path: &Path) -> Result<()> {
    save_image(grid, path, BitDepth::Eight)
}
