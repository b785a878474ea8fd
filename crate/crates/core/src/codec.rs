//! Lossless latent codec: color-space encodings of each modality plus a
//! space-time-to-channel patchify with factors `(fh, fw, ft)`.
//!
//! Pixel `(t, y, x, c)` lands at latent cell `(t / ft, y / fh, x / fw)` and
//! channel `c·(ft·fh·fw) + (t % ft)·(fh·fw) + (y % fh)·fw + (x % fw)`, with
//! values mapped `v -> 2v - 1`.

use crate::modality::{Modality, PALETTE};
use crate::scene::{quantize_unit_u16, quantize_unit_u8, MultiModalVideo};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("{axis} extent {extent} is not divisible by codec factor {factor}")]
    Indivisible {
        axis: &'static str,
        extent: usize,
        factor: usize,
    },
    #[error("codec factors must be >= 1, got {0:?}")]
    BadFactors(CodecConfig),
    #[error("expected shape {expected:?}, got {got:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("segmentation id {0} outside the palette")]
    SegId(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub fh: usize,
    pub fw: usize,
    pub ft: usize,
}

impl CodecConfig {
    pub const PAPER: CodecConfig = CodecConfig { fh: 8, fw: 8, ft: 4 };
    pub const TOY: CodecConfig = CodecConfig { fh: 4, fw: 4, ft: 2 };

    /// Latent channels per modality.
    pub fn channels(&self) -> usize {
        3 * self.fh * self.fw * self.ft
    }

    pub fn check_dims(&self, f: usize, h: usize, w: usize) -> Result<(), CodecError> {
        if self.fh == 0 || self.fw == 0 || self.ft == 0 {
            return Err(CodecError::BadFactors(*self));
        }
        for (axis, extent, factor) in [
            ("frames", f, self.ft),
            ("height", h, self.fh),
            ("width", w, self.fw),
        ] {
            if extent == 0 || extent % factor != 0 {
                return Err(CodecError::Indivisible {
                    axis,
                    extent,
                    factor,
                });
            }
        }
        Ok(())
    }

    /// `(F, H, W, C)` for a pixel video of `(f, h, w)`.
    pub fn latent_shape(&self, f: usize, h: usize, w: usize) -> [usize; 4] {
        [f / self.ft, h / self.fh, w / self.fw, self.channels()]
    }
}

/// Patchifies a `(f, h, w, 3)` color video in `[0, 1]` into `(F, H, W, C)`.
pub fn encode<T: Scalar>(video: &Tensor<T>, cfg: &CodecConfig) -> Result<Tensor<T>, CodecError> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(CodecError::Shape {
            expected: vec![0, 0, 0, 3],
            got: s.to_vec(),
        });
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    cfg.check_dims(f, h, w)?;
    let [lf, lh, lw, c] = cfg.latent_shape(f, h, w);
    let block = cfg.ft * cfg.fh * cfg.fw;
    let mut out = vec![T::zero(); lf * lh * lw * c];
    let two = T::of(2.0);
    for (p, &v) in video.data().iter().enumerate() {
        let ch = p % 3;
        let x = (p / 3) % w;
        let y = (p / (3 * w)) % h;
        let t = p / (3 * w * h);
        let cell = ((t / cfg.ft) * lh + y / cfg.fh) * lw + x / cfg.fw;
        let k = ch * block + (t % cfg.ft) * cfg.fh * cfg.fw + (y % cfg.fh) * cfg.fw + x % cfg.fw;
        out[cell * c + k] = two * v - T::one();
    }
    Ok(Tensor::new(&[lf, lh, lw, c], out).expect("sized above"))
}

/// Exact inverse of [`encode`].
pub fn decode<T: Scalar>(latent: &Tensor<T>, cfg: &CodecConfig) -> Result<Tensor<T>, CodecError> {
    let s = latent.shape();
    if s.len() != 4 || s[3] != cfg.channels() {
        return Err(CodecError::Shape {
            expected: vec![0, 0, 0, cfg.channels()],
            got: s.to_vec(),
        });
    }
    let (lh, lw, c) = (s[1], s[2], s[3]);
    let (f, h, w) = (s[0] * cfg.ft, lh * cfg.fh, lw * cfg.fw);
    let block = cfg.ft * cfg.fh * cfg.fw;
    let mut out = vec![T::zero(); f * h * w * 3];
    let half = T::of(0.5);
    for (p, o) in out.iter_mut().enumerate() {
        let ch = p % 3;
        let x = (p / 3) % w;
        let y = (p / (3 * w)) % h;
        let t = p / (3 * w * h);
        let cell = ((t / cfg.ft) * lh + y / cfg.fh) * lw + x / cfg.fw;
        let k = ch * block + (t % cfg.ft) * cfg.fh * cfg.fw + (y % cfg.fh) * cfg.fw + x % cfg.fw;
        *o = (latent.data()[cell * c + k] + T::one()) * half;
    }
    Ok(Tensor::new(&[f, h, w, 3], out).expect("sized above"))
}

/// A single modality plane decoded out of color space.
#[derive(Clone, Debug, PartialEq)]
pub enum Plane {
    /// `(f, h, w, 3)` in `[0, 1]`
    Rgb(Vec<f32>),
    /// `(f, h, w)` in `[0, 1]`
    Depth(Vec<f32>),
    Seg(Vec<u8>),
    Edges(Vec<u8>),
}

/// Color-space view of one modality of `video`, shape `(f, h, w, 3)`.
pub fn to_color<T: Scalar>(video: &MultiModalVideo, m: Modality) -> Result<Tensor<T>, CodecError> {
    let shape = [video.frames, video.height, video.width, 3];
    let rep = |vals: &mut dyn Iterator<Item = T>| -> Vec<T> {
        vals.flat_map(|v| [v, v, v]).collect()
    };
    let data = match m {
        Modality::Rgb => video
            .rgb
            .iter()
            .map(|&b| T::of(b as f64 / 255.0))
            .collect(),
        Modality::Depth => rep(&mut video.depth.iter().map(|&q| T::of(q as f64 / 65535.0))),
        Modality::Edges => rep(&mut video.edges.iter().map(|&e| T::of((e != 0) as u8 as f64))),
        Modality::Seg => {
            let mut d = Vec::with_capacity(video.seg.len() * 3);
            for &id in &video.seg {
                let c = PALETTE.get(id as usize).ok_or(CodecError::SegId(id))?;
                d.extend(c.iter().map(|&v| T::of(v as f64)));
            }
            d
        }
    };
    Ok(Tensor::new(&shape, data).expect("sized above"))
}

/// Nearest palette id by squared distance; ties go to the lowest id.
pub fn nearest_palette(rgb: [f32; 3]) -> u8 {
    let mut best = (f32::INFINITY, 0u8);
    for (id, c) in PALETTE.iter().enumerate() {
        let d: f32 = (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum();
        if d < best.0 {
            best = (d, id as u8);
        }
    }
    best.1
}

/// Interprets a color-space video as modality `m`; values are clamped to
/// `[0, 1]` first so the mapping is total.
pub fn from_color<T: Scalar>(color: &Tensor<T>, m: Modality) -> Plane {
    let unit = |v: T| v.as_f64().clamp(0.0, 1.0) as f32;
    let px = color
        .data()
        .chunks_exact(3)
        .map(|c| [unit(c[0]), unit(c[1]), unit(c[2])]);
    match m {
        Modality::Rgb => Plane::Rgb(px.flatten().collect()),
        Modality::Depth => Plane::Depth(px.map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()),
        Modality::Seg => Plane::Seg(px.map(nearest_palette).collect()),
        Modality::Edges => Plane::Edges(
            px.map(|c| ((c[0] + c[1] + c[2]) / 3.0 >= 0.5) as u8)
                .collect(),
        ),
    }
}

/// Encodes every modality of `video`, in [`Modality::ALL`] order.
pub fn encode_video<T: Scalar>(
    video: &MultiModalVideo,
    cfg: &CodecConfig,
) -> Result<Vec<Tensor<T>>, CodecError> {
    Modality::ALL
        .iter()
        .map(|&m| encode(&to_color::<T>(video, m)?, cfg))
        .collect()
}

/// Decodes four latents back into a [`MultiModalVideo`], quantizing onto the
/// storage grids. Edges are taken from the decoded edge plane as is.
pub fn decode_video<T: Scalar>(
    latents: &[Tensor<T>],
    cfg: &CodecConfig,
    caption: Vec<u8>,
) -> Result<MultiModalVideo, CodecError> {
    let mut planes = Vec::with_capacity(4);
    for (l, &m) in latents.iter().zip(Modality::ALL.iter()) {
        planes.push(from_color(&decode(l, cfg)?, m));
    }
    let s = latents[0].shape();
    let (f, h, w) = (s[0] * cfg.ft, s[1] * cfg.fh, s[2] * cfg.fw);
    let mut it = planes.into_iter();
    let (Some(Plane::Rgb(rgb)), Some(Plane::Depth(depth)), Some(Plane::Seg(seg)), Some(Plane::Edges(edges))) =
        (it.next(), it.next(), it.next(), it.next())
    else {
        unreachable!("planes follow Modality::ALL order")
    };
    Ok(MultiModalVideo {
        frames: f,
        height: h,
        width: w,
        rgb: rgb.iter().map(|&v| quantize_unit_u8(v as f64)).collect(),
        depth: depth.iter().map(|&v| quantize_unit_u16(v as f64)).collect(),
        seg,
        edges,
        caption,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_formula_two_by_two() {
        let cfg = CodecConfig { fh: 2, fw: 2, ft: 1 };
        // one frame, 2x2, channel 0 carries [[1,2],[3,4]] (scaled into [0,1])
        let vals = [1.0, 2.0, 3.0, 4.0];
        let mut data = vec![0.0f64; 12];
        for (i, v) in vals.iter().enumerate() {
            data[i * 3] = v / 8.0;
        }
        let video = Tensor::new(&[1, 2, 2, 3], data).unwrap();
        let lat = encode(&video, &cfg).unwrap();
        assert_eq!(lat.shape(), &[1, 1, 1, 12]);
        let pre_affine: Vec<f64> = lat.data()[..4].iter().map(|z| (z + 1.0) / 2.0 * 8.0).collect();
        assert_eq!(pre_affine, vals);
    }

    #[test]
    fn paper_geometry_channels() {
        let cfg = CodecConfig::PAPER;
        assert_eq!(cfg.channels(), 768);
        let video = Tensor::<f32>::zeros(&[4, 8, 8, 3]);
        assert_eq!(encode(&video, &cfg).unwrap().shape(), &[1, 1, 1, 768]);
    }

    #[test]
    fn non_divisible_axis_named() {
        let video = Tensor::<f32>::zeros(&[3, 8, 8, 3]);
        let err = encode(&video, &CodecConfig::TOY).unwrap_err();
        assert_eq!(
            err,
            CodecError::Indivisible {
                axis: "frames",
                extent: 3,
                factor: 2
            }
        );
    }

    #[test]
    fn color_rules() {
        let c = |v: [f32; 3]| Tensor::<f32>::new(&[1, 1, 1, 3], v.to_vec()).unwrap();
        assert_eq!(from_color(&c([0.3; 3]), Modality::Depth), Plane::Depth(vec![0.3]));
        assert_eq!(from_color(&c([1.0, 0.5, 0.0]), Modality::Seg), Plane::Seg(vec![7]));
        assert_eq!(from_color(&c([0.49; 3]), Modality::Edges), Plane::Edges(vec![0]));
        assert_eq!(from_color(&c([0.51; 3]), Modality::Edges), Plane::Edges(vec![1]));
        // equidistant from black and blue: lowest id wins
        assert_eq!(nearest_palette([0.0, 0.0, 0.5]), 0);
    }

    #[test]
    fn to_color_rules() {
        let v = MultiModalVideo {
            frames: 1,
            height: 1,
            width: 3,
            rgb: vec![0; 9],
            depth: vec![quantize_unit_u16(0.3), 0, 65535],
            seg: vec![0, 3, 9],
            edges: vec![1, 0, 1],
            caption: vec![],
        };
        let d = to_color::<f64>(&v, Modality::Depth).unwrap();
        assert!((d.data()[0] - 0.3).abs() < 1e-5);
        assert_eq!(d.data()[0], d.data()[2]);
        let e = to_color::<f32>(&v, Modality::Edges).unwrap();
        assert_eq!(&e.data()[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(to_color::<f32>(&v, Modality::Seg), Err(CodecError::SegId(9)));
        let mut ok = v.clone();
        ok.seg[2] = 0;
        let s = to_color::<f32>(&ok, Modality::Seg).unwrap();
        assert_eq!(&s.data()[..6], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
