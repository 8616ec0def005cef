//! Static visualization exports: per-image attention heatmap overlays, an
//! embedding table for external 2-D projection, and the noise canvas as an
//! inspectable image.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use adp_core::backbone::Backbone;
use adp_core::data::ImageRecord;
use adp_core::graph::Graph;
use adp_core::image as core_image;
use adp_core::matrix::Matrix;
use adp_core::params::Params;
use anyhow::Result;

use crate::ingest::save_image;

/// Class-token attention over patches, averaged across the heads of the
/// final block, upsampled to pixel resolution and normalized to [0,1].
pub fn attention_map(backbone: &Backbone, params: &Params, image: &Matrix) -> Result<Matrix> {
    let cfg = backbone.config();
    let grid = backbone.grid();
    let mut g = Graph::new();
    let vars = params.bind_const(&mut g);
    let input = g.constant(image.clone());
    let pass = backbone.forward(&mut g, &vars, input);

    // Trace rows are indexed block-major; keep only the last block.
    let heads = cfg.heads;
    let first = (cfg.blocks - 1) * heads;
    let mut patch_mass = vec![0.0f64; grid.len()];
    for h in 0..heads {
        let row = g.value(pass.trace[first + h]);
        // Entry 0 attends to the class token itself; entries 1.. are patches.
        for (i, mass) in patch_mass.iter_mut().enumerate() {
            *mass += row.get(0, i + 1) / heads as f64;
        }
    }

    // Paint the patch grid as a grayscale image so the shared bilinear
    // resizer can upsample it, then normalize to [0,1].
    let mut small = Matrix::zeros(grid.h, grid.w * 3);
    for r in 0..grid.h {
        for c in 0..grid.w {
            let v = patch_mass[r * grid.w + c];
            for ch in 0..3 {
                small.row_mut(r)[c * 3 + ch] = v;
            }
        }
    }
    let big = core_image::bilinear_resize(&small, cfg.image_h, cfg.image_w);
    let mut heat = Matrix::zeros(cfg.image_h, cfg.image_w);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..cfg.image_h {
        for c in 0..cfg.image_w {
            let v = big.get(r, c * 3);
            lo = lo.min(v);
            hi = hi.max(v);
            heat.row_mut(r)[c] = v;
        }
    }
    let span = hi - lo;
    if span > 0.0 {
        for v in heat.data_mut().iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        // Uniform attention: a flat mid-level map rather than division by 0.
        for v in heat.data_mut().iter_mut() {
            *v = 0.5;
        }
    }
    Ok(heat)
}

/// Blue-to-red colormap blended over the source image.
pub fn overlay(image: &Matrix, heat: &Matrix) -> Matrix {
    let h = image.rows();
    let w = image.cols() / 3;
    let mut out = Matrix::zeros(h, w * 3);
    for r in 0..h {
        for c in 0..w {
            let v = heat.get(r, c).clamp(0.0, 1.0);
            let color = [v, 0.15 * (1.0 - (2.0 * v - 1.0).abs()), 1.0 - v];
            for (ch, &tint) in color.iter().enumerate() {
                let src = image.get(r, c * 3 + ch);
                out.row_mut(r)[c * 3 + ch] = 0.45 * src + 0.55 * tint;
            }
        }
    }
    out
}

pub fn write_heatmap(
    path: &Path,
    backbone: &Backbone,
    params: &Params,
    image: &Matrix,
) -> Result<()> {
    let heat = attention_map(backbone, params, image)?;
    save_image(path, &overlay(image, &heat))
}

/// Tab-separated embedding export: header then one row per image with its
/// label columns and the feature vector, ready for external projection.
pub fn write_embeddings(path: &Path, records: &[ImageRecord], features: &Matrix) -> Result<()> {
    assert_eq!(records.len(), features.rows(), "one feature row per record");
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "pid\tcamid")?;
    for d in 0..features.cols() {
        write!(out, "\tf{d}")?;
    }
    writeln!(out)?;
    for (i, rec) in records.iter().enumerate() {
        write!(out, "{}\t{}", rec.pid, rec.camid)?;
        for d in 0..features.cols() {
            write!(out, "\t{}", features.get(i, d))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// The canvas lives in [-1,1]; shift to [0,1] for viewing.
pub fn write_canvas(path: &Path, canvas_values: &Matrix) -> Result<()> {
    let mut img = canvas_values.clone();
    for v in img.data_mut().iter_mut() {
        *v = (*v + 1.0) / 2.0;
    }
    save_image(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adp_core::backbone::BackboneConfig;
    use adp_core::Rng;
    use rand::SeedableRng as _;

    fn tiny_backbone() -> (Backbone, Params) {
        let cfg = BackboneConfig {
            image_h: 32,
            image_w: 16,
            patch: 8,
            stride: 8,
            blocks: 2,
            heads: 2,
            dim: 16,
            mlp_ratio: 2,
            ln_eps: 1e-6,
        };
        let mut rng = Rng::seed_from_u64(0);
        let mut params = Params::new();
        let backbone = Backbone::init(cfg, &mut params, &mut rng).unwrap();
        (backbone, params)
    }

    #[test]
    fn heatmap_is_normalized_and_image_shaped() {
        let (backbone, params) = tiny_backbone();
        let img = Matrix::from_fn(32, 48, |r, c| ((r * 31 + c * 17) % 97) as f64 / 97.0);
        let heat = attention_map(&backbone, &params, &img).unwrap();
        assert_eq!(heat.shape(), (32, 16));
        let lo = heat.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.0 && hi <= 1.0, "heatmap range [{lo}, {hi}]");
        assert!((lo - 0.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "normalized endpoints");
    }

    #[test]
    fn embedding_export_has_one_row_per_image() {
        use adp_core::data::Split;
        let records: Vec<ImageRecord> = (0..3)
            .map(|i| ImageRecord {
                image: Matrix::zeros(4, 12),
                pid: i,
                camid: 1,
                split: Split::Query,
            })
            .collect();
        let feats = Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.tsv");
        write_embeddings(&path, &records, &feats).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header plus one row per image");
        assert!(lines[0].starts_with("pid\tcamid\tf0"));
        assert!(lines[1].ends_with("\t4"));
    }

    #[test]
    fn files_are_written() {
        let (backbone, params) = tiny_backbone();
        let img = Matrix::from_fn(32, 48, |r, c| ((r + c) % 13) as f64 / 13.0);
        let dir = tempfile::tempdir().unwrap();
        let hm = dir.path().join("x_attn.png");
        write_heatmap(&hm, &backbone, &params, &img).unwrap();
        assert!(hm.is_file());
        let cv = dir.path().join("canvas.png");
        write_canvas(&cv, &Matrix::from_fn(32, 48, |_, _| 0.25)).unwrap();
        assert!(cv.is_file());
    }
}
