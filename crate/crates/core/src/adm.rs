//! Attention disturbance mask: a learnable noise canvas that rides on the
//! pasted occluder and is trained by gradient ascent to pull class-token
//! attention onto the occluded patches.
//!
//! The canvas never updates the backbone: its loss is computed on the
//! attention trace, its gradient is harvested separately, and its optimizer
//! touches only the canvas values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::optim::MOMENTUM;
use crate::{Error, Result, Rng};

/// Canvas values start uniform in this range.
pub const INIT_RANGE: f64 = 0.1;

/// The learnable noise canvas and its private optimizer state.
///
/// `values` has the image's matrix shape (H x W*3) and is projected to
/// [-1, 1] after every update. `step_size` is the absolute rate for the next
/// ascent step; the trainer refreshes it from the schedule each iteration.
#[derive(Debug, Clone)]
pub struct NoiseCanvas {
    pub values: Matrix,
    pub momentum: Matrix,
    pub step_size: f64,
}

impl NoiseCanvas {
    /// Uniform init in [-INIT_RANGE, INIT_RANGE], zero momentum.
    pub fn init(height: usize, width: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let values = Matrix::from_fn(height, width * 3, |_, _| rng.gen_range(-INIT_RANGE..INIT_RANGE));
        let momentum = Matrix::zeros(height, width * 3);
        Self { values, momentum, step_size: 0.0 }
    }

    /// Rebuild from checkpointed state.
    pub fn from_parts(values: Matrix, momentum: Matrix, step_size: f64) -> Result<Self> {
        if values.shape() != momentum.shape() {
            return Err(Error::Shape(format!(
                "canvas {}x{} with momentum {}x{}",
                values.rows(),
                values.cols(),
                momentum.rows(),
                momentum.cols()
            )));
        }
        Ok(Self { values, momentum, step_size })
    }
}

/// Disturbance loss of one forward pass: mean over blocks and heads of the
/// class-token attention mass on occluded patches, `<a[1..], patch_mask>`.
/// The class token's self-attention entry carries weight zero. Returns a
/// scalar node in [0, 1].
pub fn disturbance_loss(g: &mut Graph, trace: &[Var], patch_mask: &[f64]) -> Result<Var> {
    if trace.is_empty() {
        return Err(Error::Shape("empty attention trace".into()));
    }
    let want = patch_mask.len() + 1;
    let mut weights = vec![0.0; want];
    weights[1..].copy_from_slice(patch_mask);
    let mut terms = Vec::with_capacity(trace.len());
    let k = 1.0 / trace.len() as f64;
    for &row in trace {
        let got = g.value(row).len();
        if got != want {
            return Err(Error::Shape(format!(
                "attention row has {got} entries but the patch mask implies {want}"
            )));
        }
        let dot = g.dot_const(row, &weights);
        terms.push((dot, k));
    }
    Ok(g.sum_scaled(&terms))
}

/// One ascent step: v = mu*v + grad, canvas += step_size*v, then project to
/// [-1, 1]. The gradient must be d(loss)/d(canvas) of the disturbance loss;
/// moving *with* it increases the loss.
pub fn adm_step(canvas: &mut NoiseCanvas, grad: &Matrix) -> Result<()> {
    if grad.shape() != canvas.values.shape() {
        return Err(Error::Shape(format!(
            "gradient {}x{} for canvas {}x{}",
            grad.rows(),
            grad.cols(),
            canvas.values.rows(),
            canvas.values.cols()
        )));
    }
    let lr = canvas.step_size;
    for ((v, x), &gx) in canvas
        .momentum
        .data_mut()
        .iter_mut()
        .zip(canvas.values.data_mut().iter_mut())
        .zip(grad.data().iter())
    {
        *v = MOMENTUM * *v + gx;
        *x = (*x + lr * *v).clamp(-1.0, 1.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{compute_patch_grid, Backbone, BackboneConfig};
    use crate::occlusion;
    use crate::params::Params;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    #[test]
    fn uniform_attention_closed_form() {
        // rows uniform over N+1 tokens; mask marks k full patches of N=8
        let n = 8usize;
        let mut g = Graph::new();
        let row = Matrix::from_fn(1, n + 1, |_, _| 1.0 / (n + 1) as f64);
        let rows: alloc::vec::Vec<_> = (0..6).map(|_| g.constant(row.clone())).collect();
        let mut mask = vec![0.0; n];
        mask[2] = 1.0;
        mask[5] = 1.0;
        mask[7] = 1.0;
        let loss = disturbance_loss(&mut g, &rows, &mask).unwrap();
        let want = 3.0 / (n + 1) as f64;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_gives_zero_and_full_mask_at_most_one() {
        let n = 8usize;
        let mut g = Graph::new();
        let mut r = rng(0);
        let rows: alloc::vec::Vec<_> = (0..4)
            .map(|_| {
                let mut m = Matrix::from_fn(1, n + 1, |_, _| r.gen_range(0.0..1.0));
                let s: f64 = m.iter().sum();
                m.data_mut().iter_mut().for_each(|x| *x /= s);
                g.constant(m)
            })
            .collect();
        let zeros = vec![0.0; n];
        let loss = disturbance_loss(&mut g, &rows, &zeros).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let ones = vec![1.0; n];
        let loss = disturbance_loss(&mut g, &rows, &ones).unwrap();
        let v = g.value(loss).item();
        assert!(v > 0.0 && v <= 1.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut g = Graph::new();
        let row = g.constant(Matrix::from_fn(1, 9, |_, _| 1.0 / 9.0));
        assert!(disturbance_loss(&mut g, &[row], &[0.0; 12]).is_err());
        assert!(disturbance_loss(&mut g, &[], &[0.0; 8]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_canvas_unchanged() {
        let mut c = NoiseCanvas::init(8, 4, &mut rng(1));
        c.step_size = 0.5;
        let before = c.values.clone();
        adm_step(&mut c, &Matrix::zeros(8, 12)).unwrap();
        assert_eq!(before.data(), c.values.data());
    }

    #[test]
    fn update_projects_into_unit_box() {
        let mut c = NoiseCanvas::init(4, 4, &mut rng(2));
        c.step_size = 100.0;
        let grad = Matrix::from_fn(4, 12, |_, _| 1.0);
        adm_step(&mut c, &grad).unwrap();
        assert!(c.values.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(c.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gradient_shape_mismatch_rejected() {
        let mut c = NoiseCanvas::init(4, 4, &mut rng(3));
        assert!(adm_step(&mut c, &Matrix::zeros(3, 12)).is_err());
    }

    #[test]
    fn from_parts_validates_shapes() {
        assert!(NoiseCanvas::from_parts(Matrix::zeros(4, 12), Matrix::zeros(4, 12), 0.1).is_ok());
        assert!(NoiseCanvas::from_parts(Matrix::zeros(4, 12), Matrix::zeros(2, 12), 0.1).is_err());
    }

    /// Core oracle: a single ascent step on a frozen tiny backbone increases
    /// the disturbance loss in at least 95 of 100 seeded trials.
    #[test]
    fn single_step_ascent_on_frozen_backbone() {
        let cfg = BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch: 8,
            stride: 8,
            blocks: 2,
            heads: 2,
            dim: 16,
            mlp_ratio: 2,
            ln_eps: 1e-6,
        };
        let grid = compute_patch_grid(16, 16, 8, 8).unwrap();
        let mut increases = 0;
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let mut params = Params::new();
            let bb = Backbone::init(cfg.clone(), &mut params, &mut r).unwrap();
            let img = Matrix::from_fn(16, 48, |_, _| r.gen_range(0.0..1.0));
            let pair = occlusion::synthesize(&img, grid, None, &mut r).unwrap();
            let mask_elems = occlusion::mask_elements(&pair.pixel_mask);
            let mut canvas = NoiseCanvas::init(16, 16, &mut r);
            canvas.step_size = 5e-3;

            let eval = |canvas_m: &Matrix, want_grad: bool| -> (f64, Option<Matrix>) {
                let mut g = Graph::new();
                let vars = params.bind_const(&mut g);
                let cv = if want_grad { g.leaf(canvas_m.clone()) } else { g.constant(canvas_m.clone()) };
                let occ = g.masked_add_clamp(cv, pair.occluded.clone(), &mask_elems, 0.0, 1.0);
                let fwd = bb.forward(&mut g, &vars, occ);
                let loss = disturbance_loss(&mut g, &fwd.trace, &pair.patch_mask).unwrap();
                let v = g.value(loss).item();
                if want_grad {
                    g.backward(loss);
                    (v, g.take_grad(cv))
                } else {
                    (v, None)
                }
            };

            let (before, grad) = eval(&canvas.values.clone(), true);
            adm_step(&mut canvas, &grad.unwrap()).unwrap();
            let (after, _) = eval(&canvas.values.clone(), false);
            if after > before {
                increases += 1;
            }
        }
        assert!(increases >= 95, "loss increased in only {increases}/100 trials");
    }
}
