//! Records, identity-balanced batch sampling, and the synthetic dataset.
//!
//! The synthetic generator draws a distinct stick figure per identity —
//! torso, legs and head in identity-specific colors on a camera-specific
//! background — and occludes the query split with striped dark rectangles, a
//! family deliberately disjoint from the background-patch occluders used at
//! training time. Everything is a pure function of the seed.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::fmath;
use crate::matrix::Matrix;
use crate::occlusion;
use crate::{Error, Result, Rng};

/// Which protocol role a record plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One labeled image: pixels in [0,1], person identity, camera identity.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// H x (W*3) interleaved RGB.
    pub image: Matrix,
    pub pid: usize,
    pub camid: usize,
    pub split: Split,
}

/// An identity-balanced batch: P distinct identities, K instances each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub num_identities: usize,
    pub instances_per_identity: usize,
}

/// Stateful PK sampler that cycles through a shuffled identity deck so every
/// identity is visited once before any repeats.
pub struct PkSampler {
    pids: Vec<usize>,
    by_pid: Vec<Vec<usize>>,
    deck: Vec<usize>,
    pos: usize,
}

impl PkSampler {
    pub fn new(records: &[ImageRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot sample from an empty record list".into()));
        }
        let mut pids: Vec<usize> = records.iter().map(|r| r.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        let mut by_pid = alloc::vec![Vec::new(); pids.len()];
        for (i, r) in records.iter().enumerate() {
            let slot = pids.binary_search(&r.pid).expect("pid collected above");
            by_pid[slot].push(i);
        }
        let deck: Vec<usize> = (0..pids.len()).collect();
        // pos at the end forces a shuffle before the first plan
        let pos = deck.len();
        Ok(Self { pids, by_pid, deck, pos })
    }

    pub fn num_identities(&self) -> usize {
        self.pids.len()
    }

    /// Deck order and cursor, for checkpointing.
    pub fn state(&self) -> (Vec<usize>, usize) {
        (self.deck.clone(), self.pos)
    }

    pub fn restore_state(&mut self, deck: Vec<usize>, pos: usize) -> Result<()> {
        let mut sorted = deck.clone();
        sorted.sort_unstable();
        if sorted != (0..self.pids.len()).collect::<Vec<_>>() || pos > deck.len() {
            return Err(Error::Data("sampler state does not match the dataset".into()));
        }
        self.deck = deck;
        self.pos = pos;
        Ok(())
    }

    /// Next batch of `p` identities with `k` instances each. Identities with
    /// fewer than `k` images are upsampled with replacement.
    pub fn next_plan(&mut self, p: usize, k: usize, rng: &mut Rng) -> Result<BatchPlan> {
        if p == 0 || k == 0 {
            return Err(Error::Config("batch needs p >= 1 and k >= 1".into()));
        }
        if self.pids.len() < p {
            return Err(Error::Data(format!(
                "{} identities available but the batch wants {p}",
                self.pids.len()
            )));
        }
        if self.pos + p > self.deck.len() {
            shuffle(&mut self.deck, rng);
            self.pos = 0;
        }
        let chosen = &self.deck[self.pos..self.pos + p];
        let mut indices = Vec::with_capacity(p * k);
        for &slot in chosen {
            let pool = &self.by_pid[slot];
            if pool.len() >= k {
                // partial Fisher-Yates over a scratch copy: k distinct picks
                let mut scratch: Vec<usize> = pool.clone();
                for i in 0..k {
                    let j = rng.gen_range(i..scratch.len());
                    scratch.swap(i, j);
                    indices.push(scratch[i]);
                }
            } else {
                for _ in 0..k {
                    indices.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
        }
        self.pos += p;
        Ok(BatchPlan { indices, num_identities: p, instances_per_identity: k })
    }
}

fn shuffle(xs: &mut [usize], rng: &mut Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// The three splits of a generated dataset.
pub struct SyntheticDataset {
    pub train: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
}

/// Queries and galleries generated per identity.
pub const EVAL_IMAGES_PER_ID: usize = 2;

/// Generate a deterministic synthetic dataset: `per_id` training images per
/// identity across two cameras, plus 2 occluded queries (camera 1) and 2
/// holistic gallery images (camera 2) per identity.
pub fn make_synthetic_dataset(
    num_ids: usize,
    per_id: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<SyntheticDataset> {
    let (h, w) = size;
    if num_ids < 2 {
        return Err(Error::Config(format!("need at least 2 identities, got {num_ids}")));
    }
    if per_id < 4 {
        return Err(Error::Config(format!("need at least 4 images per identity, got {per_id}")));
    }
    if h < 32 || w < 16 {
        return Err(Error::Config(format!("image size {h}x{w} too small (need 32x16)")));
    }
    use rand::SeedableRng as _;
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = SyntheticDataset { train: Vec::new(), query: Vec::new(), gallery: Vec::new() };
    for id in 0..num_ids {
        let sig = FigureSignature::draw(id, num_ids, &mut rng);
        for i in 0..per_id {
            let camid = 1 + (i % 2);
            let image = render_person(h, w, &sig, camid, &mut rng);
            out.train.push(ImageRecord { image, pid: id + 1, camid, split: Split::Train });
        }
        for _ in 0..EVAL_IMAGES_PER_ID {
            let holistic = render_person(h, w, &sig, 1, &mut rng);
            let image = occlude_query(&holistic, &mut rng);
            out.query.push(ImageRecord { image, pid: id + 1, camid: 1, split: Split::Query });
        }
        for _ in 0..EVAL_IMAGES_PER_ID {
            let image = render_person(h, w, &sig, 2, &mut rng);
            out.gallery.push(ImageRecord { image, pid: id + 1, camid: 2, split: Split::Gallery });
        }
    }
    Ok(out)
}

/// Identity-specific colors and proportions. Torso hues are evenly spaced
/// around the color wheel so identities stay separable at any count.
struct FigureSignature {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    torso_half_width: f64,
    head_radius: f64,
    leg_width: f64,
}

impl FigureSignature {
    fn draw(id: usize, num_ids: usize, rng: &mut Rng) -> Self {
        let torso_hue = (id as f64 + 0.5) / num_ids as f64;
        let leg_hue = fract(torso_hue + 0.381 + rng.gen_range(-0.05..0.05));
        let sat = rng.gen_range(0.75..0.95);
        let val = rng.gen_range(0.75..0.95);
        let skin = rng.gen_range(0.9..1.1);
        Self {
            head: [0.80 * skin, 0.65 * skin, 0.55 * skin],
            torso: hsv_to_rgb(torso_hue, sat, val),
            legs: hsv_to_rgb(leg_hue, rng.gen_range(0.6..0.9), rng.gen_range(0.55..0.85)),
            torso_half_width: rng.gen_range(0.20..0.28),
            head_radius: rng.gen_range(0.11..0.15),
            leg_width: rng.gen_range(0.09..0.13),
        }
    }
}

fn fract(x: f64) -> f64 {
    let f = x - fmath::floor(x);
    if f < 0.0 {
        f + 1.0
    } else {
        f
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = fract(h) * 6.0;
    let i = h6 as usize % 6;
    let f = h6 - fmath::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Camera-specific background base colors.
fn camera_background(camid: usize) -> [f64; 3] {
    if camid == 1 {
        [0.55, 0.60, 0.66]
    } else {
        [0.66, 0.60, 0.52]
    }
}

/// Draw one image of the figure: background with gradient and noise, then
/// head, torso and legs, all jittered in position and brightness.
fn render_person(h: usize, w: usize, sig: &FigureSignature, camid: usize, rng: &mut Rng) -> Matrix {
    let dx = rng.gen_range(-2..=2i64) as f64;
    let dy = rng.gen_range(-1..=1i64) as f64;
    let brightness = rng.gen_range(0.88..1.12);
    let bg = camera_background(camid);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let slope = rng.gen_range(-0.08..0.08);

    let hf = h as f64;
    let wf = w as f64;
    let cx = wf / 2.0 + dx;
    let head_cy = 0.16 * hf + dy;
    let head_rx = sig.head_radius * wf;
    let head_ry = 1.25 * head_rx;
    let torso_top = 0.26 * hf + dy;
    let torso_bot = 0.58 * hf + dy;
    let torso_hw = sig.torso_half_width * wf;
    let leg_top = torso_bot;
    let leg_bot = 0.94 * hf + dy;
    let leg_w = sig.leg_width * wf;
    let leg_gap = 0.06 * wf;

    let mut img = Matrix::zeros(h, w * 3);
    for y in 0..h {
        let yf = y as f64;
        let grad = slope * (yf / hf - 0.5);
        let row = img.row_mut(y);
        for x in 0..w {
            let xf = x as f64;
            let color: &[f64; 3] = if torso_top <= yf && yf < torso_bot && (xf - cx).abs() <= torso_hw {
                &sig.torso
            } else if leg_top <= yf
                && yf < leg_bot
                && ((xf - (cx - leg_gap / 2.0 - leg_w / 2.0)).abs() <= leg_w / 2.0
                    || (xf - (cx + leg_gap / 2.0 + leg_w / 2.0)).abs() <= leg_w / 2.0)
            {
                &sig.legs
            } else {
                let ey = (yf - head_cy) / head_ry;
                let ex = (xf - cx) / head_rx;
                if ex * ex + ey * ey <= 1.0 {
                    &sig.head
                } else {
                    &bg
                }
            };
            let is_bg = core::ptr::eq(color, &bg);
            for c in 0..3 {
                let base = if is_bg { bg[c] + tint[c] + grad } else { color[c] * brightness };
                row[x * 3 + c] = base.clamp(0.0, 1.0);
            }
        }
    }
    // low-amplitude pixel noise, camera-independent
    for v in img.data_mut().iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    img
}

/// Paste a dark striped rectangle over a query image — an occluder family
/// the training pipeline never produces.
fn occlude_query(img: &Matrix, rng: &mut Rng) -> Matrix {
    let (h, w) = (img.rows(), img.cols() / 3);
    let area = rng.gen_range(0.15..0.30);
    let aspect = rng.gen_range(0.5..2.5);
    let geom = occlusion::geometry_from(h, w, area, aspect, 0, 0);
    let top = rng.gen_range((0.15 * h as f64) as usize..(0.45 * h as f64) as usize);
    let left = rng.gen_range(0..w);
    let c1: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let c2: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let mut out = img.clone();
    for y in top..(top + geom.height).min(h) {
        let stripe = if (y - top) / 2 % 2 == 0 { &c1 } else { &c2 };
        let row = out.row_mut(y);
        for x in left..(left + geom.width).min(w) {
            for c in 0..3 {
                row[x * 3 + c] = stripe[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    fn toy_records(pids: &[usize], images_each: usize) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        for &pid in pids {
            for _ in 0..images_each {
                out.push(ImageRecord {
                    image: Matrix::zeros(4, 12),
                    pid,
                    camid: 1,
                    split: Split::Train,
                });
            }
        }
        out
    }

    #[test]
    fn plans_satisfy_pk_multiset_property() {
        let records = toy_records(&[3, 1, 4, 9, 7, 12], 5);
        let mut s = PkSampler::new(&records).unwrap();
        let mut r = rng(0);
        for _ in 0..200 {
            let plan = s.next_plan(4, 3, &mut r).unwrap();
            assert_eq!(plan.indices.len(), 12);
            let mut counts: alloc::collections::BTreeMap<usize, usize> = Default::default();
            for &i in &plan.indices {
                *counts.entry(records[i].pid).or_default() += 1;
            }
            assert_eq!(counts.len(), 4, "4 distinct pids");
            assert!(counts.values().all(|&c| c == 3), "each pid exactly 3 times");
        }
    }

    #[test]
    fn deck_cycles_through_all_identities_before_repeating() {
        let records = toy_records(&(1..=16).collect::<Vec<_>>(), 4);
        let mut s = PkSampler::new(&records).unwrap();
        let mut r = rng(1);
        for _round in 0..5 {
            let mut seen = alloc::collections::BTreeSet::new();
            for _ in 0..4 {
                let plan = s.next_plan(4, 2, &mut r).unwrap();
                for &i in &plan.indices {
                    seen.insert(records[i].pid);
                }
            }
            assert_eq!(seen.len(), 16, "four plans of four identities cover all 16");
        }
    }

    #[test]
    fn scarce_identity_upsampled_with_replacement() {
        let mut records = toy_records(&[1], 2);
        records.extend(toy_records(&[2], 6));
        let mut s = PkSampler::new(&records).unwrap();
        let mut r = rng(2);
        let plan = s.next_plan(2, 4, &mut r).unwrap();
        let ones: Vec<usize> = plan.indices.iter().copied().filter(|&i| records[i].pid == 1).collect();
        assert_eq!(ones.len(), 4);
        assert!(ones.iter().all(|&i| i < 2), "only the two real images of pid 1");
    }

    #[test]
    fn p2_k1_on_two_identities() {
        let records = toy_records(&[5, 8], 3);
        let mut s = PkSampler::new(&records).unwrap();
        let plan = s.next_plan(2, 1, &mut rng(3)).unwrap();
        let pids: alloc::collections::BTreeSet<usize> =
            plan.indices.iter().map(|&i| records[i].pid).collect();
        assert_eq!(pids.len(), 2);
    }

    #[test]
    fn too_few_identities_rejected() {
        let records = toy_records(&[1, 2], 4);
        let mut s = PkSampler::new(&records).unwrap();
        assert!(s.next_plan(3, 2, &mut rng(4)).is_err());
    }

    #[test]
    fn sampler_state_round_trip_resumes_identically() {
        let records = toy_records(&(1..=8).collect::<Vec<_>>(), 4);
        let mut a = PkSampler::new(&records).unwrap();
        let mut ra = rng(5);
        a.next_plan(4, 2, &mut ra).unwrap();
        let (deck, pos) = a.state();
        let word_pos = ra.get_word_pos();

        let mut b = PkSampler::new(&records).unwrap();
        b.restore_state(deck, pos).unwrap();
        let mut rb = rng(5);
        rb.set_word_pos(word_pos);
        for _ in 0..6 {
            assert_eq!(
                a.next_plan(4, 2, &mut ra).unwrap(),
                b.next_plan(4, 2, &mut rb).unwrap()
            );
        }
    }

    #[test]
    fn bad_sampler_state_rejected() {
        let records = toy_records(&[1, 2, 3], 4);
        let mut s = PkSampler::new(&records).unwrap();
        assert!(s.restore_state(alloc::vec![0, 0, 1], 0).is_err());
        assert!(s.restore_state(alloc::vec![0, 1, 2], 9).is_err());
    }

    #[test]
    fn synthetic_dataset_is_bit_deterministic() {
        let a = make_synthetic_dataset(4, 4, (64, 32), 7).unwrap();
        let b = make_synthetic_dataset(4, 4, (64, 32), 7).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!((x.pid, x.camid), (y.pid, y.camid));
        }
        for (x, y) in a.query.iter().zip(&b.query) {
            assert_eq!(x.image.data(), y.image.data());
        }
        for (x, y) in a.gallery.iter().zip(&b.gallery) {
            assert_eq!(x.image.data(), y.image.data());
        }
    }

    #[test]
    fn synthetic_dataset_is_seed_sensitive() {
        let a = make_synthetic_dataset(4, 4, (64, 32), 7).unwrap();
        let b = make_synthetic_dataset(4, 4, (64, 32), 8).unwrap();
        assert_ne!(a.train[0].image.data(), b.train[0].image.data());
    }

    #[test]
    fn synthetic_dataset_rejects_bad_arguments() {
        assert!(make_synthetic_dataset(1, 4, (64, 32), 0).is_err());
        assert!(make_synthetic_dataset(4, 2, (64, 32), 0).is_err());
        assert!(make_synthetic_dataset(4, 4, (8, 8), 0).is_err());
    }

    #[test]
    fn synthetic_dataset_structure() {
        let d = make_synthetic_dataset(6, 5, (64, 32), 3).unwrap();
        assert_eq!(d.train.len(), 30);
        assert_eq!(d.query.len(), 12);
        assert_eq!(d.gallery.len(), 12);
        assert!(d.train.iter().all(|r| r.split == Split::Train));
        assert!(d.query.iter().all(|r| r.camid == 1 && r.split == Split::Query));
        assert!(d.gallery.iter().all(|r| r.camid == 2 && r.split == Split::Gallery));
        for r in d.train.iter().chain(&d.query).chain(&d.gallery) {
            assert_eq!(r.image.shape(), (64, 96));
            assert!(r.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(r.pid >= 1 && r.pid <= 6);
        }
        // every query has a cross-camera gallery match
        for q in &d.query {
            assert!(d.gallery.iter().any(|g| g.pid == q.pid && g.camid != q.camid));
        }
    }

    #[test]
    fn identities_are_visually_distinct() {
        // mean torso-region color should differ across identities
        let d = make_synthetic_dataset(8, 4, (64, 32), 11).unwrap();
        let torso_mean = |img: &Matrix| -> [f64; 3] {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for y in 20..35 {
                for x in 12..20 {
                    for c in 0..3 {
                        acc[c] += img.get(y, x * 3 + c);
                    }
                    n += 1.0;
                }
            }
            acc.map(|a| a / n)
        };
        let means: Vec<[f64; 3]> = (0..8).map(|i| torso_mean(&d.train[i * 4].image)).collect();
        for i in 0..8 {
            for j in (i + 1)..8 {
                let dist: f64 = (0..3).map(|c| (means[i][c] - means[j][c]).abs()).sum();
                assert!(dist > 0.08, "identities {i} and {j} look alike ({dist})");
            }
        }
    }
}
