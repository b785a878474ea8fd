//! PNG grids and the low-resolution rgb used by super-resolution.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};
use mmvd_core::modality::PALETTE;
use mmvd_core::scene::MultiModalVideo;
use mmvd_core::Modality;

/// One row of frames, left to right.
pub fn modality_grid(v: &MultiModalVideo, m: Modality) -> RgbImage {
    let (f, h, w) = (v.frames, v.height, v.width);
    RgbImage::from_fn((f * w) as u32, h as u32, |x, y| {
        let (t, x, y) = (x as usize / w, x as usize % w, y as usize);
        let i = (t * h + y) * w + x;
        match m {
            Modality::Rgb => Rgb([v.rgb[3 * i], v.rgb[3 * i + 1], v.rgb[3 * i + 2]]),
            Modality::Depth => {
                let g = (v.depth[i] >> 8) as u8;
                Rgb([g, g, g])
            }
            Modality::Seg => {
                let c = PALETTE[(v.seg[i] as usize).min(PALETTE.len() - 1)];
                Rgb(c.map(|c| (c * 255.0).round() as u8))
            }
            Modality::Edges => {
                let g = if v.edges[i] != 0 { 255 } else { 0 };
                Rgb([g, g, g])
            }
        }
    })
}

/// Writes `<stem>_<modality>.png` for every modality.
pub fn save_grids(v: &MultiModalVideo, stem: &Path) -> image::ImageResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for m in Modality::ALL {
        let name = format!(
            "{}_{}.png",
            stem.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
            m.name()
        );
        let path = stem.with_file_name(name);
        modality_grid(v, m).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Box-averages every frame of an `(f, h, w, 3)` plane by `factor`.
pub fn downsample(rgb: &[f32], f: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (lh, lw) = (h / factor, w / factor);
    let mut out = vec![0.0f32; f * lh * lw * 3];
    let norm = 1.0 / (factor * factor) as f32;
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                let src = ((t * h + y) * w + x) * 3;
                let dst = ((t * lh + y / factor) * lw + x / factor) * 3;
                for c in 0..3 {
                    out[dst + c] += rgb[src + c] * norm;
                }
            }
        }
    }
    out
}

/// Bicubic (Catmull-Rom) upsampling of every frame, clamped to [0, 1].
pub fn upsample_bicubic(rgb: &[f32], f: usize, lh: usize, lw: usize, factor: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(f * lh * lw * factor * factor * 3);
    for frame in rgb.chunks_exact(lh * lw * 3) {
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(lw as u32, lh as u32, frame.to_vec()).expect("frame size");
        let up = imageops::resize(&img, (lw * factor) as u32, (lh * factor) as u32, FilterType::CatmullRom);
        out.extend(up.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    out
}

/// `factor`-times downsampled then bicubic-upsampled rgb of `v`, in [0, 1].
pub fn lowres_rgb(v: &MultiModalVideo, factor: usize) -> Vec<f32> {
    let (f, h, w) = (v.frames, v.height, v.width);
    let low = downsample(&v.rgb_f32(), f, h, w, factor);
    upsample_bicubic(&low, f, h / factor, w / factor, factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frames_survive_resampling() {
        let rgb = vec![0.25f32; 2 * 8 * 8 * 3];
        let low = downsample(&rgb, 2, 8, 8, 4);
        assert_eq!(low.len(), 2 * 2 * 2 * 3);
        assert!(low.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let up = upsample_bicubic(&low, 2, 2, 2, 4);
        assert_eq!(up.len(), rgb.len());
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-5));
    }
}
