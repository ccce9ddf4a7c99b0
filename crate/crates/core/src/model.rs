//! U-TAE: a shared per-frame convolutional encoder, lightweight temporal
//! attention at the coarsest level, attention-weighted temporal collapse at
//! every level, and a convolutional decoder with skip connections.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Tape, Tensor, Var};
use crate::sits::{NormStats, Period, SitsCube};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of downsampling levels L.
    pub levels: usize,
    /// C^0..C^L.
    pub widths: Vec<usize>,
    pub input_channels: usize,
    pub classes: usize,
    pub attention_heads: usize,
    pub temporal_positions: usize,
    /// Width of the attention's input projection.
    pub d_model: usize,
    /// Key/query size per head.
    pub d_k: usize,
    pub norm_groups: usize,
    pub positional_encoding: bool,
    pub positional_base: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            widths: vec![16, 32, 64],
            input_channels: 10,
            classes: 2,
            attention_heads: 4,
            temporal_positions: 12,
            d_model: 64,
            d_k: 4,
            norm_groups: 4,
            positional_encoding: true,
            positional_base: 1000.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.widths.len() != self.levels + 1 {
            return bad(format!("{} levels need {} widths, got {}", self.levels, self.levels + 1, self.widths.len()));
        }
        if self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("widths {:?} must strictly increase", self.widths));
        }
        if self.classes < 2 || self.input_channels == 0 || self.temporal_positions == 0 {
            return bad("classes >= 2, input_channels >= 1 and temporal_positions >= 1 are required".into());
        }
        if self.attention_heads == 0 || self.d_k == 0 || self.d_model == 0 || self.norm_groups == 0 {
            return bad("attention_heads, d_k, d_model and norm_groups must be positive".into());
        }
        for &w in &self.widths {
            if w % self.attention_heads != 0 || w % self.norm_groups != 0 {
                return bad(format!(
                    "width {w} must be divisible by attention_heads {} and norm_groups {}",
                    self.attention_heads, self.norm_groups
                ));
            }
        }
        if !(self.positional_base > 0.0) {
            return bad("positional_base must be positive".into());
        }
        Ok(())
    }

    /// Side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Channel count D of the fused feature space.
    pub fn feature_dim(&self) -> usize {
        self.widths.iter().sum()
    }
}

/// Normalized frames, per-frame validity and temporal positions for one
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// [T, C, H, W]; zero where invalid.
    pub x: Tensor,
    /// T·H·W, row-major.
    pub validity: Vec<bool>,
    /// Position of each frame on the month axis.
    pub positions: Vec<f64>,
}

impl ModelInput {
    pub fn new(x: Tensor, validity: Vec<bool>, positions: Vec<f64>) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!("model input must be [T, C, H, W], got {:?}", x.shape())));
        }
        let (t, _, h, w) = x.dims4();
        if validity.len() != t * h * w || positions.len() != t {
            return Err(Error::Shape(format!(
                "{t} frames of {h}x{w} need {} validity flags and {t} positions",
                t * h * w
            )));
        }
        Ok(Self { x, validity, positions })
    }

    pub fn from_cube(cube: &SitsCube, stats: &NormStats) -> Result<Self> {
        let x = cube.model_input(stats)?;
        let shape = [x.dim().0, x.dim().1, x.dim().2, x.dim().3];
        let period = match cube.period_labels.len() {
            4 => Some(Period::Seasonal),
            12 => Some(Period::Monthly),
            1 => Some(Period::Annual),
            _ => None,
        };
        let positions = cube
            .period_labels
            .iter()
            .map(|&l| period.map_or(l as f64, |p| p.position(l)))
            .collect();
        ModelInput::new(
            Tensor::from_vec(&shape, x.into_iter().collect()),
            cube.validity.iter().copied().collect(),
            positions,
        )
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.x.dims4()
    }
}

/// Parameters bound to a tape for one pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Everything produced by one forward pass, as tape variables.
pub struct Forward {
    /// e^l, each [T, C^l, H/2^l, W/2^l].
    pub pyramid: Vec<Var>,
    /// a^l, each [heads, T, H/2^l, W/2^l].
    pub attention: Vec<Var>,
    /// F^l, each [1, C^l, H/2^l, W/2^l].
    pub fused: Vec<Var>,
    /// Decoder maps from coarsest (F^L) to full resolution.
    pub decoder: Vec<Var>,
    pub logits: Var,
    /// [1, K, H, W].
    pub probs: Var,
    /// Coarse pixels where every frame was invalid.
    pub attention_fallbacks: usize,
}

/// Per-level validity, max-pooled from full resolution.
pub struct LevelValidity {
    pub frames: usize,
    pub levels: Vec<(usize, usize, Vec<bool>)>,
}

impl LevelValidity {
    pub fn new(validity: &[bool], t: usize, h: usize, w: usize, levels: usize) -> Self {
        let mut out = vec![(h, w, validity.to_vec())];
        for l in 1..=levels {
            let f = 1 << l;
            let (lh, lw) = (h / f, w / f);
            let mut v = vec![false; t * lh * lw];
            for ti in 0..t {
                for r in 0..h {
                    for c in 0..w {
                        if validity[(ti * h + r) * w + c] {
                            v[(ti * lh + r / f) * lw + c / f] = true;
                        }
                    }
                }
            }
            out.push((lh, lw, v));
        }
        Self { frames: t, levels: out }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UTae {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl UTae {
    /// Fresh model with Kaiming-normal convolutions, zero biases and unit
    /// norm gains, seeded by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in Self::layout(&config) {
            let len: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("finite std");
                    (0..len).map(|_| n.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::CheckpointMismatch(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let mut v = Vec::new();
        let kaiming = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());
        let block = |v: &mut Vec<_>, prefix: String, cin: usize, cout: usize| {
            v.push((format!("{prefix}.w"), vec![cout, cin, 3, 3], kaiming(cin * 9)));
            v.push((format!("{prefix}.gn_g"), vec![cout], Init::Ones));
            v.push((format!("{prefix}.gn_b"), vec![cout], Init::Zeros));
        };
        let c = &cfg.widths;
        block(&mut v, "enc0".into(), cfg.input_channels, c[0]);
        for l in 1..=cfg.levels {
            block(&mut v, format!("enc{l}.down"), c[l - 1], c[l]);
            block(&mut v, format!("enc{l}.conv"), c[l], c[l]);
        }
        let (dm, hk) = (cfg.d_model, cfg.attention_heads * cfg.d_k);
        let top = c[cfg.levels];
        v.push(("ltae.in.w".into(), vec![dm, top, 1, 1], kaiming(top)));
        v.push(("ltae.in.b".into(), vec![dm], Init::Zeros));
        v.push(("ltae.key.w".into(), vec![hk, dm, 1, 1], kaiming(dm)));
        v.push(("ltae.key.b".into(), vec![hk], Init::Zeros));
        v.push(("ltae.query".into(), vec![cfg.attention_heads, cfg.d_k], kaiming(cfg.d_k)));
        for (l, &w) in c.iter().enumerate() {
            v.push((format!("fuse{l}.w"), vec![w, w, 1, 1], kaiming(w)));
            v.push((format!("fuse{l}.b"), vec![w], Init::Zeros));
        }
        for l in (0..cfg.levels).rev() {
            v.push((format!("dec{l}.up.w"), vec![c[l + 1], c[l], 2, 2], kaiming(c[l + 1])));
            v.push((format!("dec{l}.up.b"), vec![c[l]], Init::Zeros));
            block(&mut v, format!("dec{l}.conv"), 2 * c[l], c[l]);
        }
        v.push(("head.w".into(), vec![cfg.classes, c[0], 1, 1], kaiming(c[0])));
        v.push(("head.b".into(), vec![cfg.classes], Init::Zeros));
        v
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let (t, c, h, w) = input.dims();
        let cfg = &self.config;
        if c != cfg.input_channels || t != cfg.temporal_positions {
            return Err(Error::Shape(format!(
                "input has {t} frames x {c} channels, model expects {} x {}",
                cfg.temporal_positions, cfg.input_channels
            )));
        }
        let m = cfg.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn block(&self, tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str, stride: usize) -> Var {
        let y = tape.conv2d(x, p.get(&format!("{prefix}.w")), None, stride, 1);
        let y = tape.group_norm(
            y,
            p.get(&format!("{prefix}.gn_g")),
            p.get(&format!("{prefix}.gn_b")),
            self.config.norm_groups,
        );
        tape.relu(y)
    }

    /// Applies the shared encoder to every frame; returns e^0..e^L.
    pub fn encode_spatial(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Vec<Var> {
        let mut levels = vec![self.block(tape, p, x, "enc0", 1)];
        for l in 1..=self.config.levels {
            let d = self.block(tape, p, levels[l - 1], &format!("enc{l}.down"), 2);
            levels.push(self.block(tape, p, d, &format!("enc{l}.conv"), 1));
        }
        levels
    }

    fn positional_table(&self, positions: &[f64], h: usize, w: usize) -> Tensor {
        let d = self.config.d_model;
        let t = positions.len();
        let mut out = Tensor::zeros(&[t, d, h, w]);
        let plane = h * w;
        for (ti, &pos) in positions.iter().enumerate() {
            for ch in 0..d {
                let i = (ch / 2) as f64;
                let angle = pos / self.config.positional_base.powf(2.0 * i / d as f64);
                let v = if ch % 2 == 0 { angle.sin() } else { angle.cos() };
                let base = (ti * d + ch) * plane;
                out.data_mut()[base..base + plane].fill(v);
            }
        }
        out
    }

    /// Attention at the coarsest level, resized to every level and re-masked.
    /// Returns a^0..a^L and the number of coarse pixels with no valid frame.
    pub fn attend_temporal(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        pyramid: &[Var],
        validity: &LevelValidity,
        positions: &[f64],
    ) -> (Vec<Var>, usize) {
        let cfg = &self.config;
        let top = pyramid[cfg.levels];
        let (_, _, h, w) = tape.value(top).dims4();
        let mut u = tape.conv2d(top, p.get("ltae.in.w"), Some(p.get("ltae.in.b")), 1, 0);
        if cfg.positional_encoding {
            let pe = self.positional_table(positions, h, w);
            u = tape.add_const(u, &pe);
        }
        let keys = tape.conv2d(u, p.get("ltae.key.w"), Some(p.get("ltae.key.b")), 1, 0);
        let query = p.get("ltae.query");
        let (_, _, ref valid_top) = validity.levels[cfg.levels];
        let (out, fallback) =
            temporal_scores(tape.value(keys), tape.value(query), valid_top, cfg.attention_heads, cfg.d_k);
        let fallbacks = fallback.iter().filter(|&&f| f).count();
        let coarse = tape.custom(
            &[keys, query],
            out,
            Box::new(TemporalScores { heads: cfg.attention_heads, d_k: cfg.d_k, valid: valid_top.clone(), fallback }),
        );
        let mut attention = Vec::with_capacity(cfg.levels + 1);
        for l in 0..=cfg.levels {
            if l == cfg.levels {
                attention.push(coarse);
                continue;
            }
            let up = tape.upsample(coarse, 1 << (cfg.levels - l));
            let (_, _, ref valid) = validity.levels[l];
            let out = mask_renorm_forward(tape.value(up), valid);
            attention.push(tape.custom(&[up], out, Box::new(MaskRenorm { valid: valid.clone() })));
        }
        (attention, fallbacks)
    }

    /// Attention-weighted sum over frames, then the level's shared 1×1 conv.
    pub fn fuse_temporal(&self, tape: &mut Tape, p: &BoundParams, pyramid: &[Var], attention: &[Var]) -> Vec<Var> {
        pyramid
            .iter()
            .zip(attention)
            .enumerate()
            .map(|(l, (&e, &a))| {
                let out = weighted_sum_forward(tape.value(e), tape.value(a));
                let s = tape.custom(&[e, a], out, Box::new(WeightedSum));
                tape.conv2d(s, p.get(&format!("fuse{l}.w")), Some(p.get(&format!("fuse{l}.b"))), 1, 0)
            })
            .collect()
    }

    /// Decoder maps from F^L up to full resolution.
    pub fn decode(&self, tape: &mut Tape, p: &BoundParams, fused: &[Var]) -> Vec<Var> {
        let mut d = fused[self.config.levels];
        let mut maps = vec![d];
        for l in (0..self.config.levels).rev() {
            let up = tape.conv_t2(d, p.get(&format!("dec{l}.up.w")), Some(p.get(&format!("dec{l}.up.b"))));
            let cat = tape.concat_channels(&[up, fused[l]]);
            d = self.block(tape, p, cat, &format!("dec{l}.conv"), 1);
            maps.push(d);
        }
        maps
    }

    /// Logits and class probabilities from the full-resolution decoder map.
    pub fn predict(&self, tape: &mut Tape, p: &BoundParams, decoder: &[Var]) -> (Var, Var) {
        let last = *decoder.last().expect("decoder produced no maps");
        let logits = tape.conv2d(last, p.get("head.w"), Some(p.get("head.b")), 1, 0);
        (logits, tape.softmax_channels(logits))
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: &ModelInput) -> Result<Forward> {
        self.check_input(input)?;
        let (t, _, h, w) = input.dims();
        let x = tape.constant(input.x.clone());
        let validity = LevelValidity::new(&input.validity, t, h, w, self.config.levels);
        let pyramid = self.encode_spatial(tape, p, x);
        let (attention, attention_fallbacks) = self.attend_temporal(tape, p, &pyramid, &validity, &input.positions);
        let fused = self.fuse_temporal(tape, p, &pyramid, &attention);
        let decoder = self.decode(tape, p, &fused);
        let (logits, probs) = self.predict(tape, p, &decoder);
        Ok(Forward { pyramid, attention, fused, decoder, logits, probs, attention_fallbacks })
    }

    /// Z: every decoder map upsampled to full resolution, concatenated, and
    /// softmax-normalized per pixel. Shape [1, D, H, W].
    pub fn feature_space(&self, tape: &mut Tape, decoder: &[Var]) -> Var {
        let levels = decoder.len() - 1;
        let ups: Vec<Var> =
            decoder.iter().enumerate().map(|(i, &m)| tape.upsample(m, 1 << (levels - i))).collect();
        let cat = tape.concat_channels(&ups);
        tape.softmax_channels(cat)
    }

    /// Inference: K×H×W class probabilities.
    pub fn predict_probs(&self, input: &ModelInput) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &p, input)?;
        Ok(to_array3(tape.value(f.probs)))
    }

    /// Inference: D×H×W per-pixel feature distributions.
    pub fn predict_features(&self, input: &ModelInput) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &p, input)?;
        let z = self.feature_space(&mut tape, &f.decoder);
        Ok(to_array3(tape.value(z)))
    }
}

/// Drops the leading batch axis of a [1, C, H, W] tensor.
pub fn to_array3(t: &Tensor) -> Array3<f64> {
    let (_, c, h, w) = t.dims4();
    Array3::from_shape_vec((c, h, w), t.data().to_vec()).expect("tensor shape")
}

pub fn from_array3(a: ArrayView3<f64>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(&[1, c, h, w], a.iter().copied().collect())
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Masked softmax over frames of q·k/√d_k per head and pixel. Pixels with no
/// valid frame get uniform weights and are reported in the second result.
fn temporal_scores(keys: &Tensor, query: &Tensor, valid: &[bool], heads: usize, d_k: usize) -> (Tensor, Vec<bool>) {
    let (t, _, h, w) = keys.dims4();
    let plane = h * w;
    let inv = 1.0 / (d_k as f64).sqrt();
    let kd = keys.data();
    let q = query.data();
    let mut out = Tensor::zeros(&[heads, t, h, w]);
    let mut fallback = vec![false; plane];
    let mut scores = vec![0.0; t];
    for pix in 0..plane {
        if !(0..t).any(|ti| valid[ti * plane + pix]) {
            fallback[pix] = true;
        }
    }
    let o = out.data_mut();
    for g in 0..heads {
        for pix in 0..plane {
            if fallback[pix] {
                for ti in 0..t {
                    o[(g * t + ti) * plane + pix] = 1.0 / t as f64;
                }
                continue;
            }
            let mut mx = f64::NEG_INFINITY;
            for ti in 0..t {
                if valid[ti * plane + pix] {
                    let mut s = 0.0;
                    for k in 0..d_k {
                        s += q[g * d_k + k] * kd[(ti * heads * d_k + g * d_k + k) * plane + pix];
                    }
                    scores[ti] = s * inv;
                    mx = mx.max(scores[ti]);
                }
            }
            let mut sum = 0.0;
            for ti in 0..t {
                if valid[ti * plane + pix] {
                    scores[ti] = (scores[ti] - mx).exp();
                    sum += scores[ti];
                } else {
                    scores[ti] = 0.0;
                }
            }
            for ti in 0..t {
                o[(g * t + ti) * plane + pix] = scores[ti] / sum;
            }
        }
    }
    (out, fallback)
}

struct TemporalScores {
    heads: usize,
    d_k: usize,
    valid: Vec<bool>,
    fallback: Vec<bool>,
}

impl CustomOp for TemporalScores {
    fn backward(&self, inputs: &[&Tensor], a: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (keys, query) = (inputs[0], inputs[1]);
        let (t, _, h, w) = keys.dims4();
        let plane = h * w;
        let (heads, d_k) = (self.heads, self.d_k);
        let inv = 1.0 / (d_k as f64).sqrt();
        let mut dkeys = Tensor::zeros(keys.shape());
        let mut dq = Tensor::zeros(query.shape());
        let (ad, gd, kd, q) = (a.data(), g.data(), keys.data(), query.data());
        let mut ds = vec![0.0; t];
        for hd in 0..heads {
            for pix in 0..plane {
                if self.fallback[pix] {
                    continue;
                }
                let idx = |ti: usize| (hd * t + ti) * plane + pix;
                let dot: f64 = (0..t).map(|ti| ad[idx(ti)] * gd[idx(ti)]).sum();
                for ti in 0..t {
                    ds[ti] = if self.valid[ti * plane + pix] { ad[idx(ti)] * (gd[idx(ti)] - dot) * inv } else { 0.0 };
                }
                for ti in 0..t {
                    if ds[ti] == 0.0 {
                        continue;
                    }
                    for k in 0..d_k {
                        let ki = (ti * heads * d_k + hd * d_k + k) * plane + pix;
                        dkeys.data_mut()[ki] += ds[ti] * q[hd * d_k + k];
                        dq.data_mut()[hd * d_k + k] += ds[ti] * kd[ki];
                    }
                }
            }
        }
        vec![needs[0].then_some(dkeys), needs[1].then_some(dq)]
    }
}

/// Zeroes invalid frames and renormalizes; pixels with no valid frame get
/// uniform weights.
fn mask_renorm_forward(a: &Tensor, valid: &[bool]) -> Tensor {
    let (heads, t, h, w) = a.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(a.shape());
    let (ad, o) = (a.data(), out.data_mut());
    for g in 0..heads {
        for pix in 0..plane {
            let idx = |ti: usize| (g * t + ti) * plane + pix;
            let n_valid = (0..t).filter(|&ti| valid[ti * plane + pix]).count();
            let sum: f64 = (0..t).filter(|&ti| valid[ti * plane + pix]).map(|ti| ad[idx(ti)]).sum();
            for ti in 0..t {
                let v = valid[ti * plane + pix];
                o[idx(ti)] = if n_valid == 0 {
                    1.0 / t as f64
                } else if sum <= f64::MIN_POSITIVE {
                    if v { 1.0 / n_valid as f64 } else { 0.0 }
                } else if v {
                    ad[idx(ti)] / sum
                } else {
                    0.0
                };
            }
        }
    }
    out
}

struct MaskRenorm {
    valid: Vec<bool>,
}

impl CustomOp for MaskRenorm {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let a = inputs[0];
        let (heads, t, h, w) = a.dims4();
        let plane = h * w;
        let mut da = Tensor::zeros(a.shape());
        let (ad, od, gd) = (a.data(), out.data(), g.data());
        for hd in 0..heads {
            for pix in 0..plane {
                let idx = |ti: usize| (hd * t + ti) * plane + pix;
                let sum: f64 = (0..t).filter(|&ti| self.valid[ti * plane + pix]).map(|ti| ad[idx(ti)]).sum();
                if sum <= f64::MIN_POSITIVE {
                    continue;
                }
                let dot: f64 = (0..t).map(|ti| od[idx(ti)] * gd[idx(ti)]).sum();
                for ti in 0..t {
                    if self.valid[ti * plane + pix] {
                        da.data_mut()[idx(ti)] = (gd[idx(ti)] - dot) / sum;
                    }
                }
            }
        }
        vec![Some(da)]
    }
}

/// Σ_t a[head(c), t] · e[t, c] per pixel; channels are split evenly across
/// heads.
fn weighted_sum_forward(e: &Tensor, a: &Tensor) -> Tensor {
    let (t, c, h, w) = e.dims4();
    let heads = a.shape()[0];
    let (plane, per_head) = (h * w, c / heads);
    let mut out = Tensor::zeros(&[1, c, h, w]);
    let (ed, ad) = (e.data(), a.data());
    for ch in 0..c {
        let g = ch / per_head;
        let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for ti in 0..t {
            let ev = &ed[(ti * c + ch) * plane..(ti * c + ch + 1) * plane];
            let av = &ad[(g * t + ti) * plane..(g * t + ti + 1) * plane];
            for ((d, &x), &wgt) in dst.iter_mut().zip(ev).zip(av) {
                *d += wgt * x;
            }
        }
    }
    out
}

struct WeightedSum;

impl CustomOp for WeightedSum {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (e, a) = (inputs[0], inputs[1]);
        let (t, c, h, w) = e.dims4();
        let heads = a.shape()[0];
        let (plane, per_head) = (h * w, c / heads);
        let mut de = Tensor::zeros(e.shape());
        let mut da = Tensor::zeros(a.shape());
        let (ed, ad, gd) = (e.data(), a.data(), g.data());
        for ti in 0..t {
            for ch in 0..c {
                let hd = ch / per_head;
                let gv = &gd[ch * plane..(ch + 1) * plane];
                let eo = (ti * c + ch) * plane;
                let ao = (hd * t + ti) * plane;
                for pix in 0..plane {
                    de.data_mut()[eo + pix] = ad[ao + pix] * gv[pix];
                    da.data_mut()[ao + pix] += ed[eo + pix] * gv[pix];
                }
            }
        }
        vec![needs[0].then_some(de), needs[1].then_some(da)]
    }
}
