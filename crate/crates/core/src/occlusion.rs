//! Artificial occlusion synthesis.
//!
//! An occluder is a corner crop of the image itself ("background carrier"),
//! resized to a sampled geometry and pasted at a random position. Alongside
//! the occluded image we produce a binary pixel mask and a fractional
//! per-patch coverage vector aligned with the backbone's token order — the
//! weights the disturbance loss uses.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone::PatchGrid;
use crate::fmath;
use crate::image;
use crate::matrix::Matrix;
use crate::{Error, Result, Rng};

/// Sampled shape and placement of one occluder.
///
/// `height`/`width` are the occluder's size before boundary clipping:
/// with image area `s = H*W`, target area `s_o = area_ratio * s`, and
/// aspect `r`, they are `round(sqrt(s_o * r))` and `round(sqrt(s_o / r))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderGeometry {
    pub area_ratio: f64,
    pub aspect: f64,
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

/// A training pair: the intact image, its occluded twin, the binary pixel
/// mask of the pasted region, and per-patch coverage fractions.
pub struct OccludedPair {
    pub holistic: Matrix,
    pub occluded: Matrix,
    /// H x W; 1.0 where the occluder landed, 0.0 elsewhere.
    pub pixel_mask: Matrix,
    /// Per patch token, the fraction of its pixels with mask 1; length N.
    pub patch_mask: Vec<f64>,
}

/// Sampling range for the occluder's area as a fraction of the image.
pub const AREA_RATIO_RANGE: (f64, f64) = (0.1, 0.5);
/// Sampling range for the occluder's height/width aspect.
pub const ASPECT_RANGE: (f64, f64) = (0.3, 3.3);

/// Crop one quarter-size corner (H/4 x W/4), the corner chosen uniformly.
/// Draw order: one integer in 0..4 (top-left, top-right, bottom-left,
/// bottom-right).
pub fn crop_corner_background(img: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    let (h, w) = (img.rows(), image::width(img));
    if h < 8 || w < 8 {
        return Err(Error::Data(format!(
            "image {h}x{w} too small for a corner crop (need at least 8x8)"
        )));
    }
    let (ch, cw) = (h / 4, w / 4);
    let corner = rng.gen_range(0..4u32);
    let top = if corner & 2 == 0 { 0 } else { h - ch };
    let left = if corner & 1 == 0 { 0 } else { w - cw };
    Ok(image::crop(img, top, left, ch, cw))
}

/// Sample an occluder for an H x W image. Draw order: area ratio, aspect,
/// top, left; the top-left corner is uniform over the image so pastes near
/// the border get clipped.
pub fn sample_occluder_geometry(h: usize, w: usize, rng: &mut Rng) -> Result<OccluderGeometry> {
    if h < 16 || w < 16 {
        return Err(Error::Data(format!("image {h}x{w} too small to occlude (need 16x16)")));
    }
    let area_ratio = rng.gen_range(AREA_RATIO_RANGE.0..AREA_RATIO_RANGE.1);
    let aspect = rng.gen_range(ASPECT_RANGE.0..ASPECT_RANGE.1);
    let geom = geometry_from(h, w, area_ratio, aspect, rng.gen_range(0..h), rng.gen_range(0..w));
    Ok(geom)
}

/// Deterministic geometry arithmetic, separated so tests can pin the draws.
pub fn geometry_from(h: usize, w: usize, area_ratio: f64, aspect: f64, top: usize, left: usize) -> OccluderGeometry {
    let target_area = area_ratio * (h * w) as f64;
    OccluderGeometry {
        area_ratio,
        aspect,
        height: fmath::round(fmath::sqrt(target_area * aspect)) as usize,
        width: fmath::round(fmath::sqrt(target_area / aspect)) as usize,
        top,
        left,
    }
}

/// Resize `patch` to the sampled geometry and paste it over a copy of
/// `holistic`, clipping at the image borders. When `canvas` is given its
/// values are added inside the pasted region and the result is clamped to
/// [0, 1] — the same arithmetic the training graph applies.
pub fn apply_occlusion(
    holistic: &Matrix,
    patch: &Matrix,
    geom: &OccluderGeometry,
    grid: PatchGrid,
    canvas: Option<&Matrix>,
) -> Result<OccludedPair> {
    let (h, w) = (holistic.rows(), image::width(holistic));
    if geom.top >= h || geom.left >= w {
        return Err(Error::Data(format!(
            "occluder at ({}, {}) lies outside a {h}x{w} image",
            geom.top, geom.left
        )));
    }
    if geom.height == 0 || geom.width == 0 || patch.is_empty() {
        return Err(Error::Data("empty occluder".into()));
    }
    if let Some(c) = canvas {
        if c.shape() != holistic.shape() {
            return Err(Error::Shape(format!(
                "canvas {}x{} does not match image {}x{}",
                c.rows(),
                c.cols(),
                holistic.rows(),
                holistic.cols()
            )));
        }
    }
    let resized = image::bilinear_resize(patch, geom.height, geom.width);
    let paste_h = geom.height.min(h - geom.top);
    let paste_w = geom.width.min(w - geom.left);
    let mut occluded = holistic.clone();
    let mut pixel_mask = Matrix::zeros(h, w);
    for y in 0..paste_h {
        let dst = occluded.row_mut(geom.top + y);
        let src = resized.row(y);
        dst[geom.left * 3..(geom.left + paste_w) * 3].copy_from_slice(&src[..paste_w * 3]);
        pixel_mask.row_mut(geom.top + y)[geom.left..geom.left + paste_w].fill(1.0);
    }
    if let Some(c) = canvas {
        for y in geom.top..geom.top + paste_h {
            let dst = occluded.row_mut(y);
            let add = c.row(y);
            for x in geom.left..geom.left + paste_w {
                for ch in 0..3 {
                    let i = x * 3 + ch;
                    dst[i] = (dst[i] + add[i]).clamp(0.0, 1.0);
                }
            }
        }
    }
    let patch_mask = patch_coverage(&pixel_mask, grid);
    Ok(OccludedPair { holistic: holistic.clone(), occluded, pixel_mask, patch_mask })
}

/// Per grid window, the fraction of its pixels with mask 1, in token order.
pub fn patch_coverage(pixel_mask: &Matrix, grid: PatchGrid) -> Vec<f64> {
    let p = grid.patch;
    let mut out = Vec::with_capacity(grid.len());
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            let mut count = 0.0;
            for y in 0..p {
                let row = pixel_mask.row(gy * grid.stride + y);
                for x in 0..p {
                    count += row[gx * grid.stride + x];
                }
            }
            out.push(count / (p * p) as f64);
        }
    }
    out
}

/// Expand an H x W pixel mask to per-element weights of an H x (W*3) image
/// matrix (each pixel's weight repeated for its three channels).
pub fn mask_elements(pixel_mask: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixel_mask.len() * 3);
    for y in 0..pixel_mask.rows() {
        for &m in pixel_mask.row(y) {
            out.extend_from_slice(&[m, m, m]);
        }
    }
    out
}

/// Full pipeline: corner crop, geometry sample, paste. Draw order: the
/// corner first, then the geometry.
pub fn synthesize(
    holistic: &Matrix,
    grid: PatchGrid,
    canvas: Option<&Matrix>,
    rng: &mut Rng,
) -> Result<OccludedPair> {
    let patch = crop_corner_background(holistic, rng)?;
    let geom = sample_occluder_geometry(holistic.rows(), image::width(holistic), rng)?;
    apply_occlusion(holistic, &patch, &geom, grid, canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::compute_patch_grid;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    fn rand_image(h: usize, w: usize, r: &mut crate::Rng) -> Matrix {
        Matrix::from_fn(h, w * 3, |_, _| r.gen_range(0.0..1.0))
    }

    #[test]
    fn corner_crop_is_quarter_size_and_touches_a_corner() {
        let mut r = rng(0);
        let img = rand_image(256, 128, &mut r);
        let mut seen = [false; 4];
        for seed in 0..32 {
            let mut cr = rng(seed);
            let crop = crop_corner_background(&img, &mut cr).unwrap();
            assert_eq!((crop.rows(), image::width(&crop)), (64, 32));
            let corners = [
                image::crop(&img, 0, 0, 64, 32),
                image::crop(&img, 0, 96, 64, 32),
                image::crop(&img, 192, 0, 64, 32),
                image::crop(&img, 192, 96, 64, 32),
            ];
            let hit = corners.iter().position(|c| c.data() == crop.data());
            seen[hit.expect("crop must equal one corner")] = true;
        }
        assert!(seen.iter().all(|&s| s), "all four corners reachable");
    }

    #[test]
    fn corner_crop_is_seed_deterministic() {
        let mut r = rng(1);
        let img = rand_image(64, 32, &mut r);
        let a = crop_corner_background(&img, &mut rng(42)).unwrap();
        let b = crop_corner_background(&img, &mut rng(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corner_crop_rejects_tiny_images() {
        let img = Matrix::zeros(4, 12);
        assert!(crop_corner_background(&img, &mut rng(0)).is_err());
    }

    #[test]
    fn geometry_matches_worked_examples() {
        // r_o=0.1, r_s=1.0 on 256x128: target area 3276.8, sides round(57.24)
        let g = geometry_from(256, 128, 0.1, 1.0, 0, 0);
        assert_eq!((g.height, g.width), (57, 57));
        // r_o=0.5, r_s=3.3: round(sqrt(16384*3.3))=233, round(sqrt(16384/3.3))=70
        let g = geometry_from(256, 128, 0.5, 3.3, 0, 0);
        assert_eq!((g.height, g.width), (233, 70));
    }

    #[test]
    fn geometry_brute_force_recompute() {
        let mut r = rng(2);
        for _ in 0..200 {
            let ro = r.gen_range(0.1..0.5);
            let rs = r.gen_range(0.3..3.3);
            let g = geometry_from(64, 32, ro, rs, 0, 0);
            let s_o = ro * 64.0 * 32.0;
            assert_eq!(g.height as f64, fmath::round(fmath::sqrt(s_o * rs)));
            assert_eq!(g.width as f64, fmath::round(fmath::sqrt(s_o / rs)));
        }
    }

    #[test]
    fn sampled_ranges_stay_in_bounds() {
        let mut r = rng(3);
        for _ in 0..10_000 {
            let g = sample_occluder_geometry(64, 32, &mut r).unwrap();
            assert!((0.1..=0.5).contains(&g.area_ratio));
            assert!((0.3..=3.3).contains(&g.aspect));
            assert!(g.top < 64 && g.left < 32);
        }
    }

    #[test]
    fn pre_clip_area_within_rounding_tolerance() {
        // rounding each side to an integer moves the product by at most
        // 0.5*(a + b) + 0.25 where a, b are the exact real-valued sides
        let mut r = rng(4);
        for (h, w) in [(64usize, 32usize), (256, 128)] {
            for _ in 0..2_000 {
                let g = sample_occluder_geometry(h, w, &mut r).unwrap();
                let s_o = g.area_ratio * (h * w) as f64;
                let a = fmath::sqrt(s_o * g.aspect);
                let b = fmath::sqrt(s_o / g.aspect);
                let bound = 0.5 * (a + b) + 0.25;
                let area = (g.height * g.width) as f64;
                assert!(
                    (area - s_o).abs() <= bound + 1e-9,
                    "area {area} vs target {s_o} (bound {bound}) at {h}x{w}"
                );
            }
        }
    }

    #[test]
    fn tiny_images_rejected_for_sampling() {
        assert!(sample_occluder_geometry(8, 32, &mut rng(0)).is_err());
    }

    #[test]
    fn zero_canvas_matches_plain_paste_bit_exact() {
        let mut r = rng(5);
        let img = rand_image(64, 32, &mut r);
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let patch = crop_corner_background(&img, &mut r).unwrap();
        let geom = sample_occluder_geometry(64, 32, &mut r).unwrap();
        let plain = apply_occlusion(&img, &patch, &geom, grid, None).unwrap();
        let zeros = Matrix::zeros(64, 96);
        let with = apply_occlusion(&img, &patch, &geom, grid, Some(&zeros)).unwrap();
        assert_eq!(plain.occluded.data(), with.occluded.data());
    }

    #[test]
    fn pixels_outside_mask_unchanged_bit_exact() {
        let mut r = rng(6);
        let img = rand_image(64, 32, &mut r);
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let mut canvas = Matrix::from_fn(64, 96, |_, _| r.gen_range(-1.0..1.0));
        canvas.data_mut()[0] = 0.9;
        let pair = synthesize(&img, grid, Some(&canvas), &mut r).unwrap();
        for y in 0..64 {
            for x in 0..32 {
                if pair.pixel_mask.get(y, x) == 0.0 {
                    for c in 0..3 {
                        assert_eq!(pair.occluded.get(y, x * 3 + c), img.get(y, x * 3 + c));
                    }
                }
            }
        }
    }

    #[test]
    fn canvas_values_clamped_inside_mask() {
        let mut r = rng(7);
        let img = rand_image(64, 32, &mut r);
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let canvas = Matrix::from_fn(64, 96, |_, _| 5.0);
        let pair = synthesize(&img, grid, Some(&canvas), &mut r).unwrap();
        for y in 0..64 {
            for x in 0..32 {
                if pair.pixel_mask.get(y, x) == 1.0 {
                    for c in 0..3 {
                        assert_eq!(pair.occluded.get(y, x * 3 + c), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_of_one_exact_cell() {
        // paste covering exactly grid cell (1,1) of a 16x16-patch grid
        let img = Matrix::from_fn(256, 384, |_, _| 0.5);
        let grid = compute_patch_grid(256, 128, 16, 16).unwrap();
        let patch = Matrix::from_fn(4, 12, |_, _| 0.0);
        let geom = OccluderGeometry { area_ratio: 0.0, aspect: 1.0, height: 16, width: 16, top: 16, left: 16 };
        let pair = apply_occlusion(&img, &patch, &geom, grid, None).unwrap();
        // brute-force oracle: count masked pixels per window
        for (j, &frac) in pair.patch_mask.iter().enumerate() {
            let (gy, gx) = (j / grid.w, j % grid.w);
            let mut count = 0usize;
            for y in 0..16 {
                for x in 0..16 {
                    if pair.pixel_mask.get(gy * 16 + y, gx * 16 + x) == 1.0 {
                        count += 1;
                    }
                }
            }
            assert_eq!(frac, count as f64 / 256.0);
            let want = if j == grid.w + 1 { 1.0 } else { 0.0 };
            assert_eq!(frac, want, "cell {j}");
        }
    }

    #[test]
    fn coverage_is_linear_over_disjoint_masks() {
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let mut r = rng(8);
        for _ in 0..50 {
            let mut m1 = Matrix::zeros(64, 32);
            let mut m2 = Matrix::zeros(64, 32);
            let mut union = Matrix::zeros(64, 32);
            for i in 0..(64 * 32) {
                match r.gen_range(0..4u32) {
                    0 => {
                        m1.data_mut()[i] = 1.0;
                        union.data_mut()[i] = 1.0;
                    }
                    1 => {
                        m2.data_mut()[i] = 1.0;
                        union.data_mut()[i] = 1.0;
                    }
                    _ => {}
                }
            }
            let c1 = patch_coverage(&m1, grid);
            let c2 = patch_coverage(&m2, grid);
            let cu = patch_coverage(&union, grid);
            for j in 0..cu.len() {
                assert!((cu[j] - (c1[j] + c2[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitioning_grid_preserves_mask_mass_exactly() {
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let mut r = rng(9);
        for _ in 0..50 {
            let img = rand_image(64, 32, &mut r);
            let pair = synthesize(&img, grid, None, &mut r).unwrap();
            let mask_sum: f64 = pair.pixel_mask.iter().sum();
            let cover_sum: f64 = pair.patch_mask.iter().sum();
            assert_eq!(cover_sum * 64.0, mask_sum);
        }
    }

    #[test]
    fn achieved_area_never_exceeds_sampled_ratio_with_tolerance() {
        // clipping can only shrink the paste, so the covered fraction is
        // bounded above by the pre-clip area and its side-rounding slack
        let mut r = rng(10);
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        for _ in 0..500 {
            let img = rand_image(64, 32, &mut r);
            let patch = crop_corner_background(&img, &mut r).unwrap();
            let geom = sample_occluder_geometry(64, 32, &mut r).unwrap();
            let pair = apply_occlusion(&img, &patch, &geom, grid, None).unwrap();
            let achieved: f64 = pair.pixel_mask.iter().sum::<f64>();
            let s_o = geom.area_ratio * (64.0 * 32.0);
            let a = fmath::sqrt(s_o * geom.aspect);
            let b = fmath::sqrt(s_o / geom.aspect);
            let bound = s_o + 0.5 * (a + b) + 0.25;
            assert!(achieved <= bound + 1e-9, "covered {achieved} vs bound {bound}");
            assert_eq!(achieved, (geom.height.min(64 - geom.top) * geom.width.min(32 - geom.left)) as f64);
        }
    }

    #[test]
    fn out_of_image_geometry_rejected() {
        let img = Matrix::zeros(64, 96);
        let grid = compute_patch_grid(64, 32, 8, 8).unwrap();
        let patch = Matrix::from_fn(4, 12, |_, _| 0.1);
        let geom = OccluderGeometry { area_ratio: 0.1, aspect: 1.0, height: 8, width: 8, top: 64, left: 0 };
        assert!(apply_occlusion(&img, &patch, &geom, grid, None).is_err());
    }

    #[test]
    fn mask_elements_replicates_channels() {
        let mut m = Matrix::zeros(2, 3);
        m.set(0, 1, 1.0);
        m.set(1, 2, 1.0);
        let e = mask_elements(&m);
        assert_eq!(e.len(), 18);
        assert_eq!(&e[3..6], &[1.0, 1.0, 1.0]);
        assert_eq!(&e[15..18], &[1.0, 1.0, 1.0]);
        assert_eq!(e.iter().sum::<f64>(), 6.0);
    }
}
