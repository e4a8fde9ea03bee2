//! Lossy JPEG-style transform round trip (no entropy coding).

use serde::{Deserialize, Serialize};

use super::dct::{dct2_block, for_each_block, idct2_block};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard luminance quantization table (quality 50), row-major.
pub const LUMA_Q50: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table (quality 50), row-major.
pub const CHROMA_Q50: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegConfig {
    pub quality: u8,
}

impl Default for JpegConfig {
    fn default() -> Self {
        JpegConfig { quality: 75 }
    }
}

impl JpegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!("JPEG quality {} outside [1, 100]", self.quality)));
        }
        Ok(())
    }
}

/// Base table scaled for `quality` the libjpeg way.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    std::array::from_fn(|i| ((base[i] as u32 * scale + 50) / 100).clamp(1, 255) as u16)
}

/// Pad an `h x w` plane to `ph x pw` by repeating the last row/column.
fn pad_edge(plane: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            out[y * pw + x] = plane[sy * w + x.min(w - 1)];
        }
    }
    out
}

fn crop(plane: &[f64], pw: usize, h: usize, w: usize) -> Vec<f64> {
    (0..h).flat_map(|y| plane[y * pw..y * pw + w].iter().copied()).collect()
}

fn round_up8(v: usize) -> usize {
    v.div_ceil(8) * 8
}

/// Quantize/dequantize every block of a [0, 255] plane.
fn code_plane(plane: &[f64], h: usize, w: usize, table: &[u16; 64]) -> Vec<f64> {
    let (ph, pw) = (round_up8(h), round_up8(w));
    let mut p = pad_edge(plane, h, w, ph, pw);
    for_each_block(&mut p, ph, pw, |block| {
        for v in block.iter_mut() {
            *v -= 128.0;
        }
        let mut c = dct2_block(block);
        for (v, &q) in c.iter_mut().zip(table) {
            *v = (*v / q as f64).round() * q as f64;
        }
        *block = idct2_block(&c);
        for v in block.iter_mut() {
            *v += 128.0;
        }
    });
    crop(&p, pw, h, w)
}

/// 2x2 box average of a plane padded to even sides.
fn subsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (eh, ew) = (h.div_ceil(2) * 2, w.div_ceil(2) * 2);
    let p = pad_edge(plane, h, w, eh, ew);
    let (sh, sw) = (eh / 2, ew / 2);
    let mut out = vec![0.0; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            let i = 2 * y * ew + 2 * x;
            out[y * sw + x] = (p[i] + p[i + 1] + p[i + ew] + p[i + ew + 1]) / 4.0;
        }
    }
    (out, sh, sw)
}

fn upsample(plane: &[f64], sw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = plane[(y / 2) * sw + x / 2];
        }
    }
    out
}

/// Compress and decompress an `H x W x C` image in [0, 1] (C = 1 or 3).
/// Colour images go through YCbCr with 4:2:0 chroma subsampling.
pub fn jpeg_roundtrip(x: &Tensor<f32>, cfg: &JpegConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (h, w, c) = match x.shape() {
        [h, w, c] if *h > 0 && *w > 0 => (*h, *w, *c),
        s => return Err(Error::invalid(format!("JPEG round trip expects H x W x C, got {s:?}"))),
    };
    let plane = |ch: usize| -> Vec<f64> { x.data().iter().skip(ch).step_by(c).map(|&v| v as f64 * 255.0).collect() };
    let luma = scaled_table(&LUMA_Q50, cfg.quality);
    let planes: Vec<Vec<f64>> = match c {
        1 => vec![code_plane(&plane(0), h, w, &luma)],
        3 => {
            let (r, g, b) = (plane(0), plane(1), plane(2));
            let n = h * w;
            let mut yy = vec![0.0; n];
            let mut cb = vec![0.0; n];
            let mut cr = vec![0.0; n];
            for i in 0..n {
                yy[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
                cb[i] = -0.168736 * r[i] - 0.331264 * g[i] + 0.5 * b[i] + 128.0;
                cr[i] = 0.5 * r[i] - 0.418688 * g[i] - 0.081312 * b[i] + 128.0;
            }
            let chroma = scaled_table(&CHROMA_Q50, cfg.quality);
            let yy = code_plane(&yy, h, w, &luma);
            let mut cc = [cb, cr].map(|p| {
                let (s, sh, sw) = subsample(&p, h, w);
                upsample(&code_plane(&s, sh, sw, &chroma), sw, h, w)
            });
            let [cb, cr] = &mut cc;
            let mut rgb = vec![vec![0.0; n]; 3];
            for i in 0..n {
                let (y, u, v) = (yy[i], cb[i] - 128.0, cr[i] - 128.0);
                rgb[0][i] = y + 1.402 * v;
                rgb[1][i] = y - 0.344136 * u - 0.714136 * v;
                rgb[2][i] = y + 1.772 * u;
            }
            rgb
        }
        _ => return Err(Error::invalid(format!("JPEG round trip supports 1 or 3 channels, got {c}"))),
    };
    let mut out = vec![0.0f32; h * w * c];
    for (ch, p) in planes.iter().enumerate() {
        for (i, &v) in p.iter().enumerate() {
            out[i * c + ch] = (v.clamp(0.0, 255.0) / 255.0) as f32;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
