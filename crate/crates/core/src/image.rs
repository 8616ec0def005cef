//! Image helpers over interleaved-RGB matrices.
//!
//! An image is a [`Matrix`] of shape H x (W*3): row y holds pixels
//! (y,0..W) with channels interleaved, values in [0, 1]. All routines
//! here are pure and deterministic.

use crate::matrix::Matrix;

/// Mean subtracted from each channel before the backbone.
pub const PIXEL_MEAN: f64 = 0.5;
/// Divisor applied to each channel before the backbone.
pub const PIXEL_STD: f64 = 0.5;

/// Pixel width of an image matrix.
pub fn width(img: &Matrix) -> usize {
    debug_assert_eq!(img.cols() % 3, 0);
    img.cols() / 3
}

/// Bilinear resampling with half-pixel centers: destination pixel x maps to
/// source coordinate (x + 0.5) * (src / dst) - 0.5, clamped to the edges.
pub fn bilinear_resize(src: &Matrix, out_h: usize, out_w: usize) -> Matrix {
    assert!(out_h > 0 && out_w > 0, "empty resize target");
    let (src_h, src_w) = (src.rows(), width(src));
    let scale_y = src_h as f64 / out_h as f64;
    let scale_x = src_w as f64 / out_w as f64;
    let mut out = Matrix::zeros(out_h, out_w * 3);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        let (r0, r1) = (src.row(y0), src.row(y1));
        let dst = out.row_mut(y);
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let top = r0[x0 * 3 + c] * (1.0 - fx) + r0[x1 * 3 + c] * fx;
                let bot = r1[x0 * 3 + c] * (1.0 - fx) + r1[x1 * 3 + c] * fx;
                dst[x * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Mirror left-right.
pub fn flip_horizontal(img: &Matrix) -> Matrix {
    let w = width(img);
    let mut out = Matrix::zeros(img.rows(), img.cols());
    for y in 0..img.rows() {
        let src = img.row(y);
        let dst = out.row_mut(y);
        for x in 0..w {
            let m = w - 1 - x;
            dst[x * 3..x * 3 + 3].copy_from_slice(&src[m * 3..m * 3 + 3]);
        }
    }
    out
}

/// Zero-pad by `pad` pixels on every side, then crop back to the original
/// size with the crop window's top-left at (top, left) in padded coordinates.
/// `top` and `left` must not exceed 2*pad.
pub fn pad_crop(img: &Matrix, pad: usize, top: usize, left: usize) -> Matrix {
    assert!(top <= 2 * pad && left <= 2 * pad, "crop window outside padded image");
    let (h, w) = (img.rows(), width(img));
    let mut out = Matrix::zeros(h, w * 3);
    for y in 0..h {
        // position of this output row in the padded image, then back in source coords
        let py = y + top;
        if py < pad || py >= pad + h {
            continue;
        }
        let src = img.row(py - pad);
        let dst = out.row_mut(y);
        for x in 0..w {
            let px = x + left;
            if px < pad || px >= pad + w {
                continue;
            }
            let sx = px - pad;
            dst[x * 3..x * 3 + 3].copy_from_slice(&src[sx * 3..sx * 3 + 3]);
        }
    }
    out
}

/// Copy a rectangle out of an image.
pub fn crop(img: &Matrix, top: usize, left: usize, h: usize, w: usize) -> Matrix {
    assert!(top + h <= img.rows() && left + w <= width(img), "crop out of bounds");
    let mut out = Matrix::zeros(h, w * 3);
    for y in 0..h {
        out.row_mut(y).copy_from_slice(&img.row(top + y)[left * 3..(left + w) * 3]);
    }
    out
}
