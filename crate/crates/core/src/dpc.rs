//! Dual-path constraint losses.
//!
//! Holistic path: plain cross-entropy against an unnormalized classifier
//! plus batch-hard triplet. Occluded path: angular-margin cross-entropy
//! against a normalized classifier plus batch-hard triplet. Across paths: a
//! global triplet on the concatenated features and an interaction loss that
//! pulls occluded features toward a gradient-isolated copy of the holistic
//! prototypes. The total is their sum with the interaction term weighted.

use alloc::format;
use alloc::vec::Vec;

use crate::fmath;
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Loss hyper-parameters; defaults follow the training recipe
/// (triplet margin 0.3, angular margin 0.3 at scale 30, interaction
/// weight 0.1).
#[derive(Debug, Clone, PartialEq)]
pub struct DpcConfig {
    pub triplet_margin: f64,
    pub angular_margin: f64,
    pub angular_scale: f64,
    pub lambda: f64,
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self { triplet_margin: 0.3, angular_margin: 0.3, angular_scale: 30.0, lambda: 0.1 }
    }
}

/// Scalar values of one step's losses, for logging and checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub id_h: f64,
    pub tri_h: f64,
    pub id_o: f64,
    pub tri_o: f64,
    pub tri_global: f64,
    pub itr: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_labels(rows: usize, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} feature rows with {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn check_pk(labels: &[usize]) -> Result<()> {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data("triplet mining needs at least two identities".into()));
    }
    for &y in &distinct {
        if labels.iter().filter(|&&l| l == y).count() < 2 {
            return Err(Error::Data(format!(
                "triplet mining needs every identity at least twice; {y} appears once"
            )));
        }
    }
    Ok(())
}

/// Cross-entropy of `feats @ head^T` against `labels`; `head` is the
/// unnormalized holistic classifier, one row per class.
pub fn id_loss_holistic(g: &mut Graph, feats: Var, labels: &[usize], head: Var) -> Result<Var> {
    let (b, d) = g.value(feats).shape();
    let (c, dw) = g.value(head).shape();
    if d != dw {
        return Err(Error::Shape(format!("features dim {d} vs classifier dim {dw}")));
    }
    check_labels(b, labels, c)?;
    let logits = g.matmul_nt(feats, head);
    Ok(g.cross_entropy_mean(logits, labels))
}

/// Batch-hard triplet with squared Euclidean distances and hinge `margin`.
pub fn triplet_loss(g: &mut Graph, feats: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let b = g.value(feats).rows();
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} feature rows with {} labels", labels.len())));
    }
    check_pk(labels)?;
    Ok(g.batch_hard_triplet(feats, labels, margin))
}

/// Angular-margin cross-entropy on L2-normalized features and prototypes:
/// the true-class logit is `scale*cos(theta + margin)`, others
/// `scale*cos(theta)`.
pub fn id_loss_occluded(
    g: &mut Graph,
    feats: Var,
    labels: &[usize],
    head: Var,
    margin: f64,
    scale: f64,
) -> Result<Var> {
    if !(0.0..core::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::Config(format!("angular margin {margin} outside [0, pi/2)")));
    }
    if scale <= 0.0 {
        return Err(Error::Config(format!("angular scale {scale} must be positive")));
    }
    let (b, d) = g.value(feats).shape();
    let (c, dw) = g.value(head).shape();
    if d != dw {
        return Err(Error::Shape(format!("features dim {d} vs classifier dim {dw}")));
    }
    check_labels(b, labels, c)?;
    for i in 0..b {
        if g.value(feats).row(i).iter().all(|&x| x == 0.0) {
            return Err(Error::Data(format!("feature row {i} has zero norm")));
        }
    }
    for j in 0..c {
        if g.value(head).row(j).iter().all(|&x| x == 0.0) {
            return Err(Error::Data(format!("classifier row {j} has zero norm")));
        }
    }
    Ok(g.angular_margin_loss(feats, head, labels, margin, scale))
}

/// Cross-entropy of occluded features against a value copy of the holistic
/// classifier. The copy enters the graph as a constant, so no gradient ever
/// reaches the holistic head through this loss.
pub fn interaction_loss(g: &mut Graph, occ_feats: Var, labels: &[usize], holistic_head: &Matrix) -> Result<Var> {
    let (b, d) = g.value(occ_feats).shape();
    if d != holistic_head.cols() {
        return Err(Error::Shape(format!(
            "features dim {d} vs cloned classifier dim {}",
            holistic_head.cols()
        )));
    }
    check_labels(b, labels, holistic_head.rows())?;
    let frozen = g.constant(holistic_head.clone());
    let logits = g.matmul_nt(occ_feats, frozen);
    Ok(g.cross_entropy_mean(logits, labels))
}

/// Batch-hard triplet over the concatenated holistic+occluded features with
/// duplicated labels, so positives and negatives may cross paths.
pub fn global_triplet(g: &mut Graph, h_feats: Var, o_feats: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (bh, dh) = g.value(h_feats).shape();
    let (bo, do_) = g.value(o_feats).shape();
    if bh != bo || dh != do_ {
        return Err(Error::Shape(format!(
            "holistic {bh}x{dh} and occluded {bo}x{do_} batches do not pair up"
        )));
    }
    if labels.len() != bh {
        return Err(Error::Shape(format!("{bh} feature pairs with {} labels", labels.len())));
    }
    check_pk(labels)?;
    let mut both = Vec::with_capacity(2 * bh);
    both.extend_from_slice(labels);
    both.extend_from_slice(labels);
    let cat = g.concat_rows(&[h_feats, o_feats]);
    Ok(g.batch_hard_triplet(cat, &both, margin))
}

/// The six scalar graph nodes of one step's objective, named so that call
/// sites cannot silently transpose same-typed terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub id_h: Var,
    pub tri_h: Var,
    pub id_o: Var,
    pub tri_o: Var,
    pub tri_global: Var,
    pub itr: Var,
}

/// Combine the six terms: total = id_h + tri_h + id_o + tri_o + tri_global
/// + lambda*itr. Errors if any component is non-finite, naming it.
pub fn total_loss(g: &mut Graph, terms: LossTerms, lambda: f64) -> Result<(Var, LossBundle)> {
    let LossTerms { id_h, tri_h, id_o, tri_o, tri_global, itr } = terms;
    let named = [
        ("id_h", id_h),
        ("tri_h", tri_h),
        ("id_o", id_o),
        ("tri_o", tri_o),
        ("tri_global", tri_global),
        ("itr", itr),
    ];
    for (name, v) in named {
        if !g.value(v).item().is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let total = g.sum_scaled(&[
        (id_h, 1.0),
        (tri_h, 1.0),
        (id_o, 1.0),
        (tri_o, 1.0),
        (tri_global, 1.0),
        (itr, lambda),
    ]);
    let bundle = LossBundle {
        id_h: g.value(id_h).item(),
        tri_h: g.value(tri_h).item(),
        id_o: g.value(id_o).item(),
        tri_o: g.value(tri_o).item(),
        tri_global: g.value(tri_global).item(),
        itr: g.value(itr).item(),
        lambda,
        total: g.value(total).item(),
    };
    Ok((total, bundle))
}

/// L2-normalize every row of a feature matrix (used at inference).
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let norm = fmath::sqrt(out.row(r).iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            for x in out.row_mut(r).iter_mut() {
                *x /= norm;
            }
        }
    }
    out
}
