//! The training loop: augmentation, occlusion strategies, the dual-path
//! step graph, gradient-isolated canvas updates, and resumable state.
//!
//! Determinism contract: every stochastic choice comes from one seeded
//! generator in a fixed order — the batch plan first, then per image a flip
//! draw, crop offsets, and the strategy's occlusion draws — so two
//! single-threaded runs from the same seed produce identical parameter,
//! canvas, and metric streams. Both forward paths of a step read the same
//! bound parameter leaves, which is what makes the parameter-sharing
//! invariant structural rather than checked.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng as _};

use crate::adm::{self, NoiseCanvas};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{ImageRecord, PkSampler};
use crate::dpc::{self, DpcConfig, LossBundle};
use crate::graph::{Graph, Var};
use crate::image;
use crate::matrix::Matrix;
use crate::occlusion;
use crate::optim::{self, SgdMomentum};
use crate::params::{ParamId, Params};
use crate::{Error, Result, Rng};

/// Guard for unit-normalizing features before the metric losses; backbone
/// features carry a layer-norm-fixed magnitude, so this never engages in
/// practice.
const FEATURE_NORM_EPS: f64 = 1e-12;

/// How occluded twins are produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// No synthetic occlusion; the occluded path sees the holistic image.
    None,
    /// Overwrite a sampled rectangle with the per-channel image mean.
    RandomErase,
    /// Paste a resized background corner crop.
    Background,
    /// Background paste plus the adversarially trained noise canvas.
    Adm,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::RandomErase => "random_erase",
            Strategy::Background => "background",
            Strategy::Adm => "adm",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Strategy::None),
            "random_erase" => Ok(Strategy::RandomErase),
            "background" => Ok(Strategy::Background),
            "adm" => Ok(Strategy::Adm),
            other => Err(Error::Config(format!(
                "unknown occlusion strategy '{other}' (expected adm, background, random_erase or none)"
            ))),
        }
    }
}

/// When the canvas ascent step runs relative to the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmUpdate {
    /// Capture the canvas gradient from the main step graph and apply the
    /// ascent step after the parameter update (default; one graph per step).
    After,
    /// Recompute the disturbance loss against frozen parameters and move the
    /// canvas first, so the parameter update sees the updated canvas.
    Before,
}

/// Full training recipe. `full` carries the full-scale defaults; `desk`
/// swaps in the small backbone and proportionally smaller padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub loss: DpcConfig,
    pub strategy: Strategy,
    /// Train both paths with the full loss set; when false only the
    /// identity + triplet pair on a single path is used (the ablation
    /// baseline), with occlusion strategies acting as plain augmentation.
    pub dual_path: bool,
    pub adm_update: AdmUpdate,
    pub base_lr: f64,
    pub momentum: f64,
    /// Canvas step size as a multiple of the current learning rate.
    pub adm_lr_multiplier: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub epochs: usize,
    /// Zero-pad border before random cropping back to size; 0 disables.
    pub pad: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale recipe: 256x128 inputs through the 12-block backbone,
    /// batches of 16 identities x 4 instances, SGD momentum 0.9 from rate
    /// 0.004 with cosine decay, triplet margin 0.3, angular margin 0.3 at
    /// scale 30, interaction weight 0.1.
    pub fn full(epochs: usize, seed: u64) -> Self {
        Self {
            backbone: BackboneConfig::full(),
            loss: DpcConfig::default(),
            strategy: Strategy::Adm,
            dual_path: true,
            adm_update: AdmUpdate::After,
            base_lr: 0.004,
            momentum: 0.9,
            adm_lr_multiplier: 10.0,
            batch_p: 16,
            batch_k: 4,
            epochs,
            pad: 10,
            flip_prob: 0.5,
            seed,
        }
    }

    /// Desk-scale profile: the same recipe on 64x32 inputs and the small
    /// backbone, padding scaled down with the image, 30 epochs.
    pub fn desk(seed: u64) -> Self {
        Self { backbone: BackboneConfig::desk(), pad: 2, ..Self::full(30, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base learning rate {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.adm_lr_multiplier >= 0.0 && self.adm_lr_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "canvas rate multiplier {} must be non-negative",
                self.adm_lr_multiplier
            )));
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config(format!(
                "batch needs at least 2 identities x 2 instances for hard mining, got {}x{}",
                self.batch_p, self.batch_k
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&self.loss.angular_margin) {
            return Err(Error::Config(format!(
                "angular margin {} outside [0, pi/2)",
                self.loss.angular_margin
            )));
        }
        if self.loss.angular_scale <= 0.0 {
            return Err(Error::Config(format!(
                "angular scale {} must be positive",
                self.loss.angular_scale
            )));
        }
        if self.loss.triplet_margin < 0.0 || self.loss.lambda < 0.0 {
            return Err(Error::Config("triplet margin and interaction weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything logged per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub l_adm: f64,
}

/// A complete, restorable snapshot of the mutable training state.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: Params,
    pub opt_buffers: Vec<Matrix>,
    pub canvas: NoiseCanvas,
    pub rng_word_pos: u128,
    pub sampler_deck: Vec<usize>,
    pub sampler_pos: usize,
    pub epoch: usize,
    pub iteration: u64,
}

/// Owns the model, both classifier heads, the optimizer, the noise canvas,
/// the batch sampler and the RNG; advances them one step at a time.
pub struct Trainer {
    cfg: TrainConfig,
    backbone: Backbone,
    params: Params,
    head_h: ParamId,
    head_o: ParamId,
    opt: SgdMomentum,
    canvas: NoiseCanvas,
    sampler: PkSampler,
    rng: Rng,
    records: Vec<ImageRecord>,
    pid_to_class: BTreeMap<usize, usize>,
    steps_per_epoch: usize,
    epoch: usize,
    iteration: u64,
}

/// Per-image inputs assembled before the step graph is built.
struct PreparedImage {
    holistic: Matrix,
    occluded: Option<Matrix>,
    patch_mask: Option<Vec<f64>>,
    mask_elems: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, records: Vec<ImageRecord>) -> Result<Self> {
        cfg.validate()?;
        let pid_to_class = check_records(&cfg, &records)?;
        if pid_to_class.len() < cfg.batch_p {
            return Err(Error::Data(format!(
                "{} identities cannot fill batches of {} identities",
                pid_to_class.len(),
                cfg.batch_p
            )));
        }
        let classes = pid_to_class.len();
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut params = Params::new();
        let backbone = Backbone::init(cfg.backbone.clone(), &mut params, &mut rng)?;
        let d = cfg.backbone.dim;
        let head_std = crate::backbone::INIT_STD;
        let head_h = params.add_normal("head.holistic", classes, d, head_std, &mut rng);
        let head_o = params.add_normal("head.occluded", classes, d, head_std, &mut rng);
        let mut canvas = NoiseCanvas::init(cfg.backbone.image_h, cfg.backbone.image_w, &mut rng);
        canvas.step_size = cfg.base_lr * cfg.adm_lr_multiplier;
        let opt = SgdMomentum::new(&params, cfg.momentum);
        let sampler = PkSampler::new(&records)?;
        let steps_per_epoch = (records.len() / (cfg.batch_p * cfg.batch_k)).max(1);
        Ok(Self {
            cfg,
            backbone,
            params,
            head_h,
            head_o,
            opt,
            canvas,
            sampler,
            rng,
            records,
            pid_to_class,
            steps_per_epoch,
            epoch: 0,
            iteration: 0,
        })
    }

    /// Rebuild a trainer from a snapshot; the config and records must match
    /// the ones the snapshot was taken with.
    pub fn restore(cfg: TrainConfig, records: Vec<ImageRecord>, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        let pid_to_class = check_records(&cfg, &records)?;
        let classes = pid_to_class.len();
        let backbone = Backbone::from_params(cfg.backbone.clone(), &state.params)?;
        let head_h = state
            .params
            .find("head.holistic")
            .ok_or_else(|| Error::Config("snapshot has no holistic classifier head".into()))?;
        let head_o = state
            .params
            .find("head.occluded")
            .ok_or_else(|| Error::Config("snapshot has no occluded classifier head".into()))?;
        for id in [head_h, head_o] {
            let got = state.params.get(id).shape();
            if got != (classes, cfg.backbone.dim) {
                return Err(Error::Shape(format!(
                    "classifier head is {}x{} but the data has {classes} identities at dim {}",
                    got.0, got.1, cfg.backbone.dim
                )));
            }
        }
        if state.canvas.values.shape() != (cfg.backbone.image_h, cfg.backbone.image_w * 3) {
            return Err(Error::Shape(format!(
                "canvas {}x{} does not match {}x{} images",
                state.canvas.values.rows(),
                state.canvas.values.cols(),
                cfg.backbone.image_h,
                cfg.backbone.image_w * 3
            )));
        }
        let opt = SgdMomentum::from_buffers(&state.params, cfg.momentum, state.opt_buffers)?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(state.rng_word_pos);
        let mut sampler = PkSampler::new(&records)?;
        sampler.restore_state(state.sampler_deck, state.sampler_pos)?;
        let steps_per_epoch = (records.len() / (cfg.batch_p * cfg.batch_k)).max(1);
        Ok(Self {
            cfg,
            backbone,
            params: state.params,
            head_h,
            head_o,
            opt,
            canvas: state.canvas,
            sampler,
            rng,
            records,
            pid_to_class,
            steps_per_epoch,
            epoch: state.epoch,
            iteration: state.iteration,
        })
    }

    /// Snapshot everything needed to resume bit-exactly.
    pub fn state(&self) -> TrainerState {
        let (sampler_deck, sampler_pos) = self.sampler.state();
        TrainerState {
            params: self.params.clone(),
            opt_buffers: self.opt.buffers().to_vec(),
            canvas: self.canvas.clone(),
            rng_word_pos: self.rng.get_word_pos(),
            sampler_deck,
            sampler_pos,
            epoch: self.epoch,
            iteration: self.iteration,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn canvas(&self) -> &NoiseCanvas {
        &self.canvas
    }

    pub fn num_classes(&self) -> usize {
        self.pid_to_class.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Run one epoch worth of steps; the learning rate follows the cosine
    /// schedule evaluated at the current epoch.
    pub fn train_epoch(&mut self) -> Result<Vec<StepMetrics>> {
        if self.epoch >= self.cfg.epochs {
            return Err(Error::Config(format!(
                "all {} configured epochs already trained",
                self.cfg.epochs
            )));
        }
        let mut out = Vec::with_capacity(self.steps_per_epoch);
        for _ in 0..self.steps_per_epoch {
            out.push(self.step()?);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// One optimization step over one PK batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        // a corrupted checkpoint or a diverged update surfaces here by name
        for (name, m) in self.params.iter() {
            if !m.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        if !self.canvas.values.all_finite() {
            return Err(Error::NonFinite("noise canvas".into()));
        }

        let lr = optim::cosine_lr(self.cfg.base_lr, self.epoch, self.cfg.epochs);
        self.canvas.step_size = lr * self.cfg.adm_lr_multiplier;

        let plan = self.sampler.next_plan(self.cfg.batch_p, self.cfg.batch_k, &mut self.rng)?;
        let labels: Vec<usize> = plan
            .indices
            .iter()
            .map(|&i| self.pid_to_class[&self.records[i].pid])
            .collect();
        let prepared = self.prepare_batch(&plan.indices)?;

        if self.cfg.strategy == Strategy::Adm && self.cfg.adm_update == AdmUpdate::Before {
            self.update_canvas_frozen(&prepared)?;
        }

        // One graph for the whole step: every forward shares the same
        // parameter leaves, and the canvas (when present) is a separate leaf
        // whose disturbance gradient is captured before the main backward.
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let canvas_var = (self.cfg.strategy == Strategy::Adm)
            .then(|| g.leaf(self.canvas.values.clone()));

        let mut h_rows = Vec::with_capacity(prepared.len());
        let mut o_rows = Vec::with_capacity(prepared.len());
        let mut adm_terms: Vec<Var> = Vec::new();
        for p in &prepared {
            let occ_var = match (&p.occluded, canvas_var) {
                (Some(base), Some(cv)) => Some(g.masked_add_clamp(
                    cv,
                    base.clone(),
                    p.mask_elems.as_deref().expect("adm twin carries a mask"),
                    0.0,
                    1.0,
                )),
                (Some(base), None) => Some(g.constant(base.clone())),
                (None, _) => None,
            };
            if self.cfg.dual_path {
                let hvar = g.constant(p.holistic.clone());
                let hpass = self.backbone.forward(&mut g, &vars, hvar);
                h_rows.push(hpass.feature);
                // strategy `none`: the occluded path receives the holistic image
                let ovar = occ_var.unwrap_or_else(|| g.constant(p.holistic.clone()));
                let opass = self.backbone.forward(&mut g, &vars, ovar);
                if let Some(mask) = &p.patch_mask {
                    adm_terms.push(adm::disturbance_loss(&mut g, &opass.trace, mask)?);
                }
                o_rows.push(opass.feature);
            } else {
                // single path: occlusion strategies act as plain augmentation
                let var = occ_var.unwrap_or_else(|| g.constant(p.holistic.clone()));
                let pass = self.backbone.forward(&mut g, &vars, var);
                if let Some(mask) = &p.patch_mask {
                    adm_terms.push(adm::disturbance_loss(&mut g, &pass.trace, mask)?);
                }
                h_rows.push(pass.feature);
            }
        }

        let h_feats = g.concat_rows(&h_rows);
        // The triplet losses act on the unit sphere — the space retrieval
        // ranks in — so the margin keeps a fixed geometric meaning instead
        // of competing with the layer-norm-pinned feature magnitude.
        let h_unit = g.normalize_rows(h_feats, FEATURE_NORM_EPS);
        let id_h = dpc::id_loss_holistic(&mut g, h_feats, &labels, vars[self.head_h.index()])?;
        let tri_h = dpc::triplet_loss(&mut g, h_unit, &labels, self.cfg.loss.triplet_margin)?;
        let (total, bundle) = if self.cfg.dual_path {
            let o_feats = g.concat_rows(&o_rows);
            let o_unit = g.normalize_rows(o_feats, FEATURE_NORM_EPS);
            let id_o = dpc::id_loss_occluded(
                &mut g,
                o_feats,
                &labels,
                vars[self.head_o.index()],
                self.cfg.loss.angular_margin,
                self.cfg.loss.angular_scale,
            )?;
            let tri_o = dpc::triplet_loss(&mut g, o_unit, &labels, self.cfg.loss.triplet_margin)?;
            let tri_global =
                dpc::global_triplet(&mut g, h_unit, o_unit, &labels, self.cfg.loss.triplet_margin)?;
            let head_copy = self.params.get(self.head_h).clone();
            let itr = dpc::interaction_loss(&mut g, o_feats, &labels, &head_copy)?;
            let terms = dpc::LossTerms { id_h, tri_h, id_o, tri_o, tri_global, itr };
            dpc::total_loss(&mut g, terms, self.cfg.loss.lambda)?
        } else {
            for (name, v) in [("id_h", id_h), ("tri_h", tri_h)] {
                if !g.value(v).item().is_finite() {
                    return Err(Error::NonFinite(format!("loss term {name}")));
                }
            }
            let total = g.sum_scaled(&[(id_h, 1.0), (tri_h, 1.0)]);
            let bundle = LossBundle {
                id_h: g.value(id_h).item(),
                tri_h: g.value(tri_h).item(),
                id_o: 0.0,
                tri_o: 0.0,
                tri_global: 0.0,
                itr: 0.0,
                lambda: self.cfg.loss.lambda,
                total: g.value(total).item(),
            };
            (total, bundle)
        };

        // disturbance loss: captured from the same traces, its canvas
        // gradient is taken and cleared before the main backward so the
        // parameter update never sees it
        let mut l_adm_value = 0.0;
        let mut canvas_grad: Option<Matrix> = None;
        if let Some(cv) = canvas_var {
            let weight = 1.0 / adm_terms.len() as f64;
            let terms: Vec<(Var, f64)> = adm_terms.iter().map(|&t| (t, weight)).collect();
            let l_adm = g.sum_scaled(&terms);
            l_adm_value = g.value(l_adm).item();
            if !l_adm_value.is_finite() {
                return Err(Error::NonFinite("disturbance loss".into()));
            }
            if self.cfg.adm_update == AdmUpdate::After {
                g.backward(l_adm);
                canvas_grad = g.take_grad(cv);
                g.zero_grads();
            }
        }

        g.backward(total);
        let mut grads = Vec::with_capacity(self.params.len());
        for (i, var) in vars.iter().enumerate() {
            let (r, c) = self.params.values()[i].shape();
            let gm = g.take_grad(*var).unwrap_or_else(|| Matrix::zeros(r, c));
            if !gm.all_finite() {
                let name = self.params.iter().nth(i).map(|(n, _)| n).unwrap_or("?");
                return Err(Error::NonFinite(format!("gradient for {name}")));
            }
            grads.push(gm);
        }
        self.opt.step(&mut self.params, &grads, lr)?;

        if let Some(cg) = canvas_grad {
            if !cg.all_finite() {
                return Err(Error::NonFinite("canvas gradient".into()));
            }
            adm::adm_step(&mut self.canvas, &cg)?;
        }

        self.iteration += 1;
        Ok(StepMetrics { iteration: self.iteration, epoch: self.epoch, lr, losses: bundle, l_adm: l_adm_value })
    }

    /// Flip, pad-crop, and synthesize the strategy's occluded twin for every
    /// batch image, consuming RNG draws in index order.
    fn prepare_batch(&mut self, indices: &[usize]) -> Result<Vec<PreparedImage>> {
        let grid = self.backbone.grid();
        let mut out = Vec::with_capacity(indices.len());
        for &idx in indices {
            let rec = &self.records[idx];
            let flip: f64 = self.rng.gen_range(0.0..1.0);
            let mut img = if flip < self.cfg.flip_prob {
                image::flip_horizontal(&rec.image)
            } else {
                rec.image.clone()
            };
            if self.cfg.pad > 0 {
                let top = self.rng.gen_range(0..=2 * self.cfg.pad);
                let left = self.rng.gen_range(0..=2 * self.cfg.pad);
                img = image::pad_crop(&img, self.cfg.pad, top, left);
            }
            let prepared = match self.cfg.strategy {
                Strategy::None => PreparedImage {
                    holistic: img,
                    occluded: None,
                    patch_mask: None,
                    mask_elems: None,
                },
                Strategy::RandomErase => {
                    let erased = random_erase(&img, &mut self.rng)?;
                    PreparedImage {
                        holistic: img,
                        occluded: Some(erased),
                        patch_mask: None,
                        mask_elems: None,
                    }
                }
                Strategy::Background => {
                    let pair = occlusion::synthesize(&img, grid, None, &mut self.rng)?;
                    PreparedImage {
                        holistic: img,
                        occluded: Some(pair.occluded),
                        patch_mask: None,
                        mask_elems: None,
                    }
                }
                Strategy::Adm => {
                    let pair = occlusion::synthesize(&img, grid, None, &mut self.rng)?;
                    let mask_elems = occlusion::mask_elements(&pair.pixel_mask);
                    PreparedImage {
                        holistic: img,
                        occluded: Some(pair.occluded),
                        patch_mask: Some(pair.patch_mask),
                        mask_elems: Some(mask_elems),
                    }
                }
            };
            out.push(prepared);
        }
        Ok(out)
    }

    /// The `Before` update order: disturbance loss against frozen parameters
    /// on a throwaway graph, canvas ascent applied immediately.
    fn update_canvas_frozen(&mut self, prepared: &[PreparedImage]) -> Result<()> {
        let mut g = Graph::new();
        let vars = self.params.bind_const(&mut g);
        let canvas_var = g.leaf(self.canvas.values.clone());
        let mut terms = Vec::new();
        for p in prepared {
            let (base, mask_elems, patch_mask) = match (&p.occluded, &p.mask_elems, &p.patch_mask) {
                (Some(b), Some(m), Some(pm)) => (b, m, pm),
                _ => continue,
            };
            let occ = g.masked_add_clamp(canvas_var, base.clone(), mask_elems, 0.0, 1.0);
            let pass = self.backbone.forward(&mut g, &vars, occ);
            terms.push(adm::disturbance_loss(&mut g, &pass.trace, patch_mask)?);
        }
        if terms.is_empty() {
            return Ok(());
        }
        let weight = 1.0 / terms.len() as f64;
        let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, weight)).collect();
        let l_adm = g.sum_scaled(&weighted);
        if !g.value(l_adm).item().is_finite() {
            return Err(Error::NonFinite("disturbance loss".into()));
        }
        g.backward(l_adm);
        let grad = g
            .take_grad(canvas_var)
            .unwrap_or_else(|| Matrix::zeros(self.canvas.values.rows(), self.canvas.values.cols()));
        if !grad.all_finite() {
            return Err(Error::NonFinite("canvas gradient".into()));
        }
        adm::adm_step(&mut self.canvas, &grad)
    }
}

fn check_records(cfg: &TrainConfig, records: &[ImageRecord]) -> Result<BTreeMap<usize, usize>> {
    if records.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let want = (cfg.backbone.image_h, cfg.backbone.image_w * 3);
    for (i, r) in records.iter().enumerate() {
        if r.image.shape() != want {
            return Err(Error::Shape(format!(
                "training record {i} is {}x{} but the config expects {}x{}",
                r.image.rows(),
                r.image.cols(),
                want.0,
                want.1
            )));
        }
    }
    let mut pids: Vec<usize> = records.iter().map(|r| r.pid).collect();
    pids.sort_unstable();
    pids.dedup();
    Ok(pids.into_iter().enumerate().map(|(i, pid)| (pid, i)).collect())
}

/// Random-erasing augmentation: overwrite a sampled rectangle (same area and
/// aspect ranges as the occluder sampler) with the per-channel image mean.
pub fn random_erase(img: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    let (h, w) = (img.rows(), image::width(img));
    let geom = occlusion::sample_occluder_geometry(h, w, rng)?;
    let mut mean = [0.0f64; 3];
    for y in 0..h {
        let row = img.row(y);
        for x in 0..w {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += row[x * 3 + c];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= (h * w) as f64;
    }
    let mut out = img.clone();
    for y in geom.top..(geom.top + geom.height).min(h) {
        let row = out.row_mut(y);
        for x in geom.left..(geom.left + geom.width).min(w) {
            for (c, m) in mean.iter().enumerate() {
                row[x * 3 + c] = *m;
            }
        }
    }
    Ok(out)
}
