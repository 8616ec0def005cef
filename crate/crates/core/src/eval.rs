//! Retrieval evaluation: feature extraction, distance matrices, CMC and mAP.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::Backbone;
use crate::data::ImageRecord;
use crate::fmath;
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::params::Params;
use crate::{Error, Result};

/// CMC curve, mean average precision, and how many queries actually counted.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Average precision per query, in query order; `None` where the query
    /// was skipped for lack of a valid positive.
    pub per_query_ap: Vec<Option<f64>>,
    /// `cmc[k]` is the fraction of evaluated queries with a correct match at
    /// rank `k + 1` or better.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Run every record through the backbone (no gradients) and return one
/// L2-normalized feature per row.
pub fn extract_features(
    backbone: &Backbone,
    params: &Params,
    records: &[ImageRecord],
) -> Result<Matrix> {
    let cfg = backbone.config();
    let dim = cfg.dim;
    let mut out = Matrix::zeros(records.len(), dim);
    for (i, rec) in records.iter().enumerate() {
        if rec.image.shape() != (cfg.image_h, cfg.image_w * 3) {
            return Err(Error::Shape(format!(
                "record {i} is {}x{} but the backbone expects {}x{}",
                rec.image.rows(),
                rec.image.cols(),
                cfg.image_h,
                cfg.image_w * 3
            )));
        }
        let mut g = Graph::new();
        let vars = params.bind_const(&mut g);
        let image = g.constant(rec.image.clone());
        let pass = backbone.forward(&mut g, &vars, image);
        let feat = g.value(pass.feature);
        if !feat.all_finite() {
            return Err(Error::NonFinite(format!("feature for record {i}")));
        }
        let norm = fmath::sqrt(feat.iter().map(|&v| v * v).sum::<f64>());
        if norm == 0.0 {
            return Err(Error::Data(format!("record {i} produced an all-zero feature")));
        }
        for (dst, &src) in out.row_mut(i).iter_mut().zip(feat.iter()) {
            *dst = src / norm;
        }
    }
    Ok(out)
}

/// Squared Euclidean distances between every query row and every gallery row.
pub fn distance_matrix(query: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if query.cols() != gallery.cols() {
        return Err(Error::Shape(format!(
            "query features have {} dims, gallery has {}",
            query.cols(),
            gallery.cols()
        )));
    }
    let mut d = Matrix::zeros(query.rows(), gallery.rows());
    for i in 0..query.rows() {
        let qi = query.row(i);
        let row = d.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let gj = gallery.row(j);
            let mut acc = 0.0;
            for k in 0..qi.len() {
                let diff = qi[k] - gj[k];
                acc += diff * diff;
            }
            *slot = acc;
        }
    }
    Ok(d)
}

/// Compute CMC@1..=max_rank and mAP under the standard cross-camera protocol:
/// gallery entries sharing both the query's identity and camera are ignored,
/// and queries left without any positive are skipped (but counted).
pub fn cmc_map(
    dist: &Matrix,
    query_pids: &[usize],
    query_camids: &[usize],
    gallery_pids: &[usize],
    gallery_camids: &[usize],
    max_rank: usize,
) -> Result<RankingResult> {
    let (nq, ng) = dist.shape();
    if query_pids.len() != nq || query_camids.len() != nq {
        return Err(Error::Shape(format!(
            "distance matrix has {nq} queries but {} pids / {} camids given",
            query_pids.len(),
            query_camids.len()
        )));
    }
    if gallery_pids.len() != ng || gallery_camids.len() != ng {
        return Err(Error::Shape(format!(
            "distance matrix has {ng} gallery entries but {} pids / {} camids given",
            gallery_pids.len(),
            gallery_camids.len()
        )));
    }
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }

    let mut cmc_hits = alloc::vec![0usize; max_rank];
    let mut per_query_ap = Vec::with_capacity(nq);
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let row = dist.row(q);
        order.clear();
        order.extend(0..ng);
        // stable under distance ties: break by gallery index
        order.sort_unstable_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));

        let mut hits = 0usize;
        let mut rank = 0usize; // position within the filtered ranking, 0-based
        let mut ap = 0.0;
        let mut first_hit: Option<usize> = None;
        for &j in &order {
            if gallery_pids[j] == query_pids[q] && gallery_camids[j] == query_camids[q] {
                continue;
            }
            if gallery_pids[j] == query_pids[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank);
                }
            }
            rank += 1;
        }
        match first_hit {
            None => {
                skipped += 1;
                per_query_ap.push(None);
            }
            Some(first) => {
                evaluated += 1;
                let query_ap = ap / hits as f64;
                ap_sum += query_ap;
                per_query_ap.push(Some(query_ap));
                for slot in cmc_hits.iter_mut().skip(first.min(max_rank)) {
                    *slot += 1;
                }
            }
        }
    }

    if evaluated == 0 {
        return Err(Error::Data(
            "no query has a valid cross-camera positive; nothing to evaluate".into(),
        ));
    }
    let n = evaluated as f64;
    Ok(RankingResult {
        per_query_ap,
        cmc: cmc_hits.into_iter().map(|h| h as f64 / n).collect(),
        map: ap_sum / n,
        evaluated,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::Split;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    #[test]
    fn average_precision_worked_example() {
        // relevance down the ranking: hit, miss, hit -> AP = (1/1 + 2/3) / 2 = 5/6
        let dist = Matrix::from_vec(1, 3, alloc::vec![0.1, 0.2, 0.3]);
        let res = cmc_map(&dist, &[1], &[1], &[1, 2, 1], &[2, 2, 2], 3).unwrap();
        assert!((res.map - 5.0 / 6.0).abs() < 1e-15, "map = {}", res.map);
        assert_eq!(res.cmc, alloc::vec![1.0, 1.0, 1.0]);
        assert_eq!((res.evaluated, res.skipped), (1, 0));
        assert_eq!(res.per_query_ap.len(), 1);
        assert!((res.per_query_ap[0].unwrap() - res.map).abs() < 1e-15);
    }

    #[test]
    fn same_identity_same_camera_entries_are_ignored() {
        // nearest gallery entry is the query's own camera-1 shot; it must not count
        let dist = Matrix::from_vec(1, 3, alloc::vec![0.01, 0.05, 0.10]);
        let res = cmc_map(&dist, &[1], &[1], &[1, 2, 1], &[1, 2, 2], 2).unwrap();
        assert_eq!(res.cmc[0], 0.0, "rank-1 must go to the impostor");
        assert_eq!(res.cmc[1], 1.0);
        assert!((res.map - 0.5).abs() < 1e-15);
    }

    #[test]
    fn queries_without_positives_are_skipped_and_counted() {
        let dist = Matrix::from_vec(2, 2, alloc::vec![0.1, 0.2, 0.2, 0.1]);
        // query 0 (pid 9) has no pid-9 gallery entry at another camera
        let res = cmc_map(&dist, &[9, 1], &[1, 1], &[9, 1], &[1, 2], 2).unwrap();
        assert_eq!((res.evaluated, res.skipped), (1, 1));
        assert_eq!(res.cmc[0], 1.0);
        assert_eq!(res.per_query_ap, alloc::vec![None, Some(1.0)]);
    }

    #[test]
    fn all_queries_invalid_is_an_error() {
        let dist = Matrix::from_vec(1, 1, alloc::vec![0.5]);
        assert!(cmc_map(&dist, &[1], &[1], &[1], &[1], 1).is_err());
        assert!(cmc_map(&dist, &[1], &[1], &[2], &[2], 1).is_err());
    }

    #[test]
    fn tied_distances_rank_by_gallery_index() {
        let dist = Matrix::from_vec(1, 3, alloc::vec![0.5, 0.5, 0.5]);
        // all tied: order is gallery index 0,1,2 -> positive sits at rank 2
        let res = cmc_map(&dist, &[1], &[1], &[2, 3, 1], &[2, 2, 2], 3).unwrap();
        assert_eq!(res.cmc, alloc::vec![0.0, 0.0, 1.0]);
        assert!((res.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_and_rank_validation() {
        let dist = Matrix::from_vec(1, 2, alloc::vec![0.1, 0.2]);
        assert!(cmc_map(&dist, &[1, 2], &[1, 1], &[1, 2], &[2, 2], 2).is_err());
        assert!(cmc_map(&dist, &[1], &[1], &[1], &[2], 2).is_err());
        assert!(cmc_map(&dist, &[1], &[1], &[1, 2], &[2, 2], 0).is_err());
    }

    #[test]
    fn ranking_is_invariant_to_monotone_distance_transforms() {
        let mut r = rng(31);
        let nq = 10;
        let ng = 25;
        let dist = Matrix::from_fn(nq, ng, |_, _| r.gen_range(0.0..4.0));
        let warped = Matrix::from_fn(nq, ng, |i, j| 3.0 * dist.get(i, j) + 7.0);
        let q_pids: Vec<usize> = (0..nq).map(|i| i % 5 + 1).collect();
        let q_cams: Vec<usize> = alloc::vec![1; nq];
        let g_pids: Vec<usize> = (0..ng).map(|j| j % 6 + 1).collect();
        let g_cams: Vec<usize> = (0..ng).map(|j| 1 + (j % 3 == 0) as usize).collect();
        let a = cmc_map(&dist, &q_pids, &q_cams, &g_pids, &g_cams, 10).unwrap();
        let b = cmc_map(&warped, &q_pids, &q_cams, &g_pids, &g_cams, 10).unwrap();
        assert_eq!(a, b);
    }

    /// Independent reimplementation used as the randomized oracle: builds the
    /// filtered ranking as (distance, index) pairs and integrates precision
    /// over a relevance mask, the textbook way.
    fn brute_cmc_map(
        dist: &Matrix,
        q_pids: &[usize],
        q_cams: &[usize],
        g_pids: &[usize],
        g_cams: &[usize],
        max_rank: usize,
    ) -> (Vec<f64>, f64, usize, usize) {
        let mut cmc = alloc::vec![0.0; max_rank];
        let mut ap_sum = 0.0;
        let mut evaluated = 0;
        let mut skipped = 0;
        for q in 0..dist.rows() {
            let mut ranked: Vec<(f64, usize)> =
                (0..dist.cols()).map(|j| (dist.get(q, j), j)).collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let relevance: Vec<bool> = ranked
                .iter()
                .filter(|&&(_, j)| !(g_pids[j] == q_pids[q] && g_cams[j] == q_cams[q]))
                .map(|&(_, j)| g_pids[j] == q_pids[q])
                .collect();
            let total: usize = relevance.iter().filter(|&&x| x).count();
            if total == 0 {
                skipped += 1;
                continue;
            }
            evaluated += 1;
            let mut seen = 0;
            let mut ap = 0.0;
            for (pos, &rel) in relevance.iter().enumerate() {
                if rel {
                    seen += 1;
                    ap += seen as f64 / (pos + 1) as f64;
                    if seen == 1 {
                        for slot in cmc.iter_mut().skip(pos.min(max_rank)) {
                            *slot += 1.0;
                        }
                    }
                }
            }
            ap_sum += ap / total as f64;
        }
        for slot in cmc.iter_mut() {
            *slot /= evaluated as f64;
        }
        (cmc, ap_sum / evaluated as f64, evaluated, skipped)
    }

    #[test]
    fn randomized_protocol_matches_brute_force() {
        let mut r = rng(77);
        for trial in 0..50 {
            let nq = r.gen_range(3..12);
            let ng = r.gen_range(5..30);
            let dist = Matrix::from_fn(nq, ng, |_, _| r.gen_range(0.0..2.0));
            let q_pids: Vec<usize> = (0..nq).map(|_| r.gen_range(1..5)).collect();
            let q_cams: Vec<usize> = (0..nq).map(|_| r.gen_range(1..3)).collect();
            let g_pids: Vec<usize> = (0..ng).map(|_| r.gen_range(1..5)).collect();
            let g_cams: Vec<usize> = (0..ng).map(|_| r.gen_range(1..3)).collect();
            let got = match cmc_map(&dist, &q_pids, &q_cams, &g_pids, &g_cams, 5) {
                Ok(res) => res,
                Err(_) => continue, // every query invalid in this draw
            };
            let (cmc, map, evaluated, skipped) =
                brute_cmc_map(&dist, &q_pids, &q_cams, &g_pids, &g_cams, 5);
            assert_eq!((got.evaluated, got.skipped), (evaluated, skipped), "trial {trial}");
            assert!((got.map - map).abs() < 1e-9, "trial {trial}: {} vs {map}", got.map);
            for (a, b) in got.cmc.iter().zip(&cmc) {
                assert!((a - b).abs() < 1e-9, "trial {trial}");
            }
        }
    }

    #[test]
    fn distance_matrix_matches_hand_computation() {
        let q = Matrix::from_vec(2, 2, alloc::vec![0.0, 0.0, 1.0, 2.0]);
        let g = Matrix::from_vec(2, 2, alloc::vec![3.0, 4.0, 1.0, 2.0]);
        let d = distance_matrix(&q, &g).unwrap();
        assert_eq!(d.data(), &[25.0, 5.0, 8.0, 0.0]);
        let bad = Matrix::zeros(2, 3);
        assert!(distance_matrix(&q, &bad).is_err());
    }

    #[test]
    fn distance_matrix_agrees_with_pairwise_helper() {
        let mut r = rng(5);
        let m = Matrix::from_fn(6, 4, |_, _| r.gen_range(-1.0..1.0));
        let d = distance_matrix(&m, &m).unwrap();
        let flat = crate::graph::pairwise_sq_dist(&m);
        for i in 0..6 {
            for j in 0..6 {
                assert!((d.get(i, j) - flat[i * 6 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extracted_features_are_unit_norm_and_deterministic() {
        let cfg = BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch: 8,
            stride: 8,
            blocks: 1,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            ln_eps: 1e-6,
        };
        let mut r = rng(9);
        let mut params = Params::new();
        let backbone = Backbone::init(cfg, &mut params, &mut r).unwrap();
        let records: Vec<ImageRecord> = (0..3)
            .map(|i| ImageRecord {
                image: Matrix::from_fn(16, 48, |y, x| {
                    fract_like(y as f64 * 0.21 + x as f64 * 0.37 + i as f64 * 0.5)
                }),
                pid: i + 1,
                camid: 1,
                split: Split::Query,
            })
            .collect();
        let a = extract_features(&backbone, &params, &records).unwrap();
        let b = extract_features(&backbone, &params, &records).unwrap();
        assert_eq!(a.data(), b.data(), "extraction is deterministic");
        for i in 0..3 {
            let norm: f64 = a.row(i).iter().map(|&v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12, "row {i} norm {norm}");
        }
        // shape mismatch is rejected
        let bad = [ImageRecord {
            image: Matrix::zeros(8, 24),
            pid: 1,
            camid: 1,
            split: Split::Query,
        }];
        assert!(extract_features(&backbone, &params, &bad).is_err());
    }

    fn fract_like(x: f64) -> f64 {
        x - crate::fmath::floor(x)
    }
}
