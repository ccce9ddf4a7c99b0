//! Weakly supervised objective: masked cross-entropy on high-quality pixels
//! plus a similarity regularizer in the fused feature space.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::IGNORE;
use crate::nn::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Hinge on the dissimilarity term, in nats.
    pub margin: f64,
    pub supervised_weight: f64,
    /// Anchors per patch.
    pub anchors: usize,
    /// Candidate pool per patch.
    pub pool: usize,
    /// Lower clamp before logarithms.
    pub epsilon: f64,
    /// Reduction over pixels and anchors; only "mean" is implemented.
    pub reduction: String,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            margin: 1.0,
            supervised_weight: 1.0,
            anchors: 256,
            pool: 2048,
            epsilon: 1e-8,
            reduction: "mean".into(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.margin, self.supervised_weight];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights and margin must be finite and non-negative".into()));
        }
        if self.anchors == 0 || self.pool == 0 {
            return Err(Error::Config("anchors and pool must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if self.reduction != "mean" {
            return Err(Error::Config(format!("unsupported reduction {:?}", self.reduction)));
        }
        Ok(())
    }

    pub fn unsupervised_enabled(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0
    }
}

const PROB_FLOOR: f64 = 1e-12;

/// `max(v, floor)` that keeps NaN visible.
fn floor_at(v: f64, floor: f64) -> f64 {
    if v < floor { floor } else { v }
}

/// Mean of −ln P(label) over pixels with mask 1 and a non-ignore label.
/// `probs` is [1, K, H, W]. Returns the loss and the number of contributing
/// pixels; with none the loss is exactly 0.
pub fn supervised_loss(tape: &mut Tape, probs: Var, labels: &[u8], mask: &[u8]) -> Result<(Var, usize)> {
    let (_, k, h, w) = tape.value(probs).dims4();
    let plane = h * w;
    if labels.len() != plane || mask.len() != plane {
        return Err(Error::Shape(format!("labels/mask of {} / {} pixels for a {h}x{w} map", labels.len(), mask.len())));
    }
    let picks: Vec<(usize, usize)> = labels
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (&l, &m))| m == 1 && l != IGNORE)
        .map(|(p, (&l, _))| (p, l as usize))
        .collect();
    if let Some(&(_, l)) = picks.iter().find(|(_, l)| *l >= k) {
        return Err(Error::InvalidParameter(format!("label {l} out of range for {k} classes")));
    }
    let n = picks.len();
    let pd = tape.value(probs).data();
    let total: f64 = picks.iter().map(|&(p, l)| -floor_at(pd[l * plane + p], PROB_FLOOR).ln()).sum();
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    let var = tape.custom(&[probs], Tensor::scalar(value), Box::new(CrossEntropy { picks, plane }));
    Ok((var, n))
}

struct CrossEntropy {
    picks: Vec<(usize, usize)>,
    plane: usize,
}

impl CustomOp for CrossEntropy {
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let mut d = Tensor::zeros(p.shape());
        if !self.picks.is_empty() {
            let scale = g.item() / self.picks.len() as f64;
            for &(pix, l) in &self.picks {
                let i = l * self.plane + pix;
                let v = p.data()[i];
                if v > PROB_FLOOR {
                    d.data_mut()[i] -= scale / v;
                }
            }
        }
        vec![Some(d)]
    }
}

/// Sørensen–Dice similarity of two non-negative vectors.
pub fn dice_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa + bb == 0.0 { 1.0 } else { 2.0 * ab / (aa + bb) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub anchor: usize,
    pub similar: usize,
    pub dissimilar: usize,
    pub neighbor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<usize>,
    pub pool: Vec<usize>,
    pub matches: Vec<Match>,
}

/// Draws `k` anchors and `m` pool pixels, each uniformly without
/// replacement, from `h·w` pixels.
pub fn sample_anchors(pixels: usize, k: usize, m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = sample(&mut rng, pixels, k.min(pixels)).into_vec();
    let pool = sample(&mut rng, pixels, m.min(pixels)).into_vec();
    (anchors, pool)
}

/// Pixel-major copy of a [1, D, H, W] feature tensor with squared norms.
struct Features {
    rows: Vec<f64>,
    sq: Vec<f64>,
    d: usize,
}

impl Features {
    fn new(z: &Tensor) -> Self {
        let (_, d, h, w) = z.dims4();
        let plane = h * w;
        let mut rows = vec![0.0; plane * d];
        for c in 0..d {
            for (p, &v) in z.data()[c * plane..(c + 1) * plane].iter().enumerate() {
                rows[p * d + c] = v;
            }
        }
        let sq = rows.chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect();
        Self { rows, sq, d }
    }

    fn dice(&self, a: usize, b: usize) -> f64 {
        let (ra, rb) = (&self.rows[a * self.d..(a + 1) * self.d], &self.rows[b * self.d..(b + 1) * self.d]);
        let ab: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let den = self.sq[a] + self.sq[b];
        if den == 0.0 { 1.0 } else { 2.0 * ab / den }
    }
}

/// For each anchor: the most and least similar pool pixel and the most
/// similar of its 8 neighbours, by Dice similarity on `z` ([1, D, H, W]).
/// The anchor itself is never its own match; ties go to the lowest pixel
/// index. Anchors whose pool holds only themselves are dropped.
pub fn find_matches(z: &Tensor, anchors: &[usize], pool: &[usize]) -> Result<AnchorSet> {
    let (_, _, h, w) = z.dims4();
    let plane = h * w;
    if h * w < 2 {
        return Err(Error::Shape("similarity search needs at least two pixels".into()));
    }
    if let Some(&bad) = anchors.iter().chain(pool).find(|&&p| p >= plane) {
        return Err(Error::InvalidParameter(format!("pixel index {bad} outside a {h}x{w} map")));
    }
    let f = Features::new(z);
    let mut sorted_pool = pool.to_vec();
    sorted_pool.sort_unstable();
    sorted_pool.dedup();

    let mut matches = Vec::with_capacity(anchors.len());
    for &n in anchors {
        let mut best: Option<(f64, usize)> = None;
        let mut worst: Option<(f64, usize)> = None;
        for &q in &sorted_pool {
            if q == n {
                continue;
            }
            let s = f.dice(n, q);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, q));
            }
            if worst.is_none_or(|(b, _)| s < b) {
                worst = Some((s, q));
            }
        }
        let (Some((_, similar)), Some((_, dissimilar))) = (best, worst) else { continue };
        let (r, c) = ((n / w) as isize, (n % w) as isize);
        let mut nb: Option<(f64, usize)> = None;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                let s = f.dice(n, q);
                if nb.is_none_or(|(b, bq)| s > b || (s == b && q < bq)) {
                    nb = Some((s, q));
                }
            }
        }
        let (_, neighbor) = nb.expect("at least one neighbour exists");
        matches.push(Match { anchor: n, similar, dissimilar, neighbor });
    }
    Ok(AnchorSet { anchors: anchors.to_vec(), pool: pool.to_vec(), matches })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedTerms {
    /// Mean KL to the most similar pool pixel (before α).
    pub similar: f64,
    /// Mean hinge on KL to the least similar pool pixel (before β).
    pub dissimilar: f64,
    /// Mean KL to the most similar neighbour (before γ).
    pub neighbor: f64,
}

fn kl_pixel(z: &[f64], d: usize, plane: usize, a: usize, b: usize, eps: f64) -> f64 {
    let mut s = 0.0;
    for c in 0..d {
        let p = floor_at(z[c * plane + a], eps);
        let q = floor_at(z[c * plane + b], eps);
        s += p * (p / q).ln();
    }
    s
}

/// α·mean KL(z_n‖z_s) + β·mean max(0, margin − KL(z_n‖z_d)) + γ·mean KL(z_n‖z_sn).
pub fn unsupervised_loss(tape: &mut Tape, z: Var, set: &AnchorSet, w: &LossWeights) -> (Var, UnsupervisedTerms) {
    let zt = tape.value(z);
    let (_, d, h, wd) = zt.dims4();
    let plane = h * wd;
    let n = set.matches.len();
    let mut terms = UnsupervisedTerms::default();
    let mut hinge_active = vec![false; n];
    if n > 0 {
        for (i, m) in set.matches.iter().enumerate() {
            terms.similar += kl_pixel(zt.data(), d, plane, m.anchor, m.similar, w.epsilon);
            let kd = kl_pixel(zt.data(), d, plane, m.anchor, m.dissimilar, w.epsilon);
            if kd < w.margin {
                hinge_active[i] = true;
                terms.dissimilar += w.margin - kd;
            }
            terms.neighbor += kl_pixel(zt.data(), d, plane, m.anchor, m.neighbor, w.epsilon);
        }
        terms.similar /= n as f64;
        terms.dissimilar /= n as f64;
        terms.neighbor /= n as f64;
    }
    let value = w.alpha * terms.similar + w.beta * terms.dissimilar + w.gamma * terms.neighbor;
    let op = SimilarityOp { matches: set.matches.clone(), hinge_active, weights: w.clone() };
    (tape.custom(&[z], Tensor::scalar(value), Box::new(op)), terms)
}

struct SimilarityOp {
    matches: Vec<Match>,
    hinge_active: Vec<bool>,
    weights: LossWeights,
}

impl SimilarityOp {
    /// Adds `coef`·∂KL(z_a‖z_b) into `dz`.
    fn kl_grad(z: &[f64], dz: &mut [f64], d: usize, plane: usize, a: usize, b: usize, eps: f64, coef: f64) {
        for c in 0..d {
            let (ia, ib) = (c * plane + a, c * plane + b);
            let (pr, qr) = (z[ia], z[ib]);
            let (p, q) = (floor_at(pr, eps), floor_at(qr, eps));
            if pr > eps {
                dz[ia] += coef * ((p / q).ln() + 1.0);
            }
            if qr > eps {
                dz[ib] -= coef * p / q;
            }
        }
    }
}

impl CustomOp for SimilarityOp {
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let (_, d, h, w) = z.dims4();
        let plane = h * w;
        let mut dz = Tensor::zeros(z.shape());
        let n = self.matches.len();
        if n > 0 {
            let s = g.item() / n as f64;
            let wt = &self.weights;
            let eps = wt.epsilon;
            for (m, &active) in self.matches.iter().zip(&self.hinge_active) {
                let (zd, dd) = (z.data(), dz.data_mut());
                if wt.alpha != 0.0 {
                    Self::kl_grad(zd, dd, d, plane, m.anchor, m.similar, eps, s * wt.alpha);
                }
                if wt.beta != 0.0 && active {
                    Self::kl_grad(zd, dd, d, plane, m.anchor, m.dissimilar, eps, -s * wt.beta);
                }
                if wt.gamma != 0.0 {
                    Self::kl_grad(zd, dd, d, plane, m.anchor, m.neighbor, eps, s * wt.gamma);
                }
            }
        }
        vec![Some(dz)]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub total: f64,
    /// Unweighted supervised term.
    pub supervised: f64,
    /// Weighted unsupervised total.
    pub unsupervised: f64,
    pub terms: UnsupervisedTerms,
    /// Fraction of pixels with mask 1.
    pub mask_fraction: f64,
    pub supervised_pixels: usize,
    pub anchors: usize,
    /// Set when no pixel contributed to the supervised term.
    pub no_supervision: bool,
}

/// supervised_weight·Loss_SL + Loss_USL for one patch. `z` is the feature
/// space; matches are searched on its current values.
pub fn total_loss(
    tape: &mut Tape,
    probs: Var,
    z: Var,
    labels: &[u8],
    mask: &[u8],
    w: &LossWeights,
    seed: u64,
) -> Result<(Var, LossDiagnostics)> {
    let (sl, n_sup) = supervised_loss(tape, probs, labels, mask)?;
    let sl_value = tape.value(sl).item();
    let mut diag = LossDiagnostics {
        supervised: sl_value,
        mask_fraction: mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len().max(1) as f64,
        supervised_pixels: n_sup,
        no_supervision: n_sup == 0,
        ..Default::default()
    };
    let mut parts = vec![(sl, w.supervised_weight)];
    if w.unsupervised_enabled() {
        let (_, _, h, wd) = tape.value(z).dims4();
        let (anchors, pool) = sample_anchors(h * wd, w.anchors, w.pool, seed);
        let set = find_matches(tape.value(z), &anchors, &pool)?;
        let (usl, terms) = unsupervised_loss(tape, z, &set, w);
        diag.unsupervised = tape.value(usl).item();
        diag.terms = terms;
        diag.anchors = set.matches.len();
        parts.push((usl, 1.0));
    }
    let total = tape.combine(&parts);
    diag.total = tape.value(total).item();
    Ok((total, diag))
}
