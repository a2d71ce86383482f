//! A trainable weight policy.
//!
//! Each candidate gets a logit `θᵀφ` from five geometric features and the
//! weights are the softmax over the stencil. Training unrolls the refinement
//! loop, scores every iterate with a discounted L1 sequence loss and descends
//! the analytic gradient, which is backpropagated through the softmax, the
//! candidate depths and every earlier iterate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coarse_intrinsics, CameraIntrinsics, Vec3};
use crate::map::{same_dims, DepthMap, NormalMap};
use crate::refine::{
    policy_softmax, CandidateSet, PolicyInput, PropagationTable, Stencil, WeightField, WeightPolicy,
};
use crate::scene::{corrupt, render, synth_confidence, SceneSpec, DEFAULT_KAPPA_MAX};
use crate::upsample::{up_similarity_weights, UpTable, UP_K};

pub const FEATURES: usize = 5;

pub const FEATURE_NAMES: [&str; FEATURES] = [
    "normal_similarity",
    "log_confidence",
    "relative_jump",
    "offset_distance",
    "bias",
];

/// Upper clamp of the relative-jump feature.
pub const JUMP_CLAMP: f64 = 1.0;

/// Confidence floor inside the log-confidence feature.
const KAPPA_FLOOR: f64 = 1e-6;

/// Loss above which training is considered divergent.
const DIVERGENCE_LOSS: f64 = 1e6;

const JUMP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<NamedCoefficient>", into = "Vec<NamedCoefficient>")]
pub struct PolicyParams {
    pub theta: [f64; FEATURES],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedCoefficient {
    name: String,
    value: f64,
}

impl TryFrom<Vec<NamedCoefficient>> for PolicyParams {
    type Error = Error;

    fn try_from(list: Vec<NamedCoefficient>) -> Result<Self> {
        if list.len() != FEATURES {
            return Err(Error::LengthMismatch {
                expected: FEATURES,
                found: list.len(),
            });
        }
        let mut theta = [0.0; FEATURES];
        for (slot, (coef, name)) in theta.iter_mut().zip(list.iter().zip(FEATURE_NAMES)) {
            if coef.name != name {
                return Err(Error::InvalidConfig(format!(
                    "expected coefficient '{name}', found '{}'",
                    coef.name
                )));
            }
            *slot = coef.value;
        }
        PolicyParams::new(theta)
    }
}

impl From<PolicyParams> for Vec<NamedCoefficient> {
    fn from(p: PolicyParams) -> Self {
        FEATURE_NAMES
            .iter()
            .zip(p.theta)
            .map(|(name, value)| NamedCoefficient {
                name: name.to_string(),
                value,
            })
            .collect()
    }
}

impl PolicyParams {
    pub fn new(theta: [f64; FEATURES]) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("policy parameters must be finite".into()));
        }
        Ok(Self { theta })
    }

    pub fn zeros() -> Self {
        Self::default()
    }
}

/// Feature vector of one (pixel, source) pair.
#[allow(clippy::too_many_arguments)]
pub fn features(
    n_query: &Vec3,
    n_source: &Vec3,
    kappa_source: f64,
    relative_jump: f64,
    offset: (i32, i32),
    beta: usize,
    kappa_max: f64,
) -> [f64; FEATURES] {
    let reach = if beta == 0 {
        0.0
    } else {
        (offset.0.unsigned_abs() + offset.1.unsigned_abs()) as f64 / (2 * beta) as f64
    };
    [
        n_query.dot(n_source),
        (kappa_source.max(KAPPA_FLOOR) / kappa_max).ln(),
        relative_jump.min(JUMP_CLAMP),
        reach,
        1.0,
    ]
}

fn dot(theta: &[f64; FEATURES], phi: &[f64; FEATURES]) -> f64 {
    theta.iter().zip(phi).map(|(a, b)| a * b).sum()
}

fn source_index(i: usize, width: usize, offset: (i32, i32)) -> usize {
    let (u, v) = ((i % width) as i64, (i / width) as i64);
    ((v + offset.1 as i64) * width as i64 + u + offset.0 as i64) as usize
}

/// Softmax of `θᵀφ` over the valid candidates of every pixel.
pub fn policy_learned(
    params: &PolicyParams,
    nmap: &NormalMap,
    stencil: &Stencil,
    cands: &CandidateSet,
    depth: &DepthMap,
    kappa_max: f64,
) -> Result<WeightField> {
    same_dims(nmap.dims(), cands.dims())?;
    same_dims(depth.dims(), cands.dims())?;
    if cands.k() != stencil.len() {
        return Err(Error::LengthMismatch {
            expected: stencil.len(),
            found: cands.k(),
        });
    }
    let (w, h) = nmap.dims();
    let k = cands.k();
    let mut weights = vec![0.0; w * h * k];
    weights.par_chunks_mut(k).enumerate().for_each(|(i, logits)| {
        let d_i = depth.values()[i];
        let valid = cands.pixel_valid(i);
        for (kk, &offset) in stencil.offsets().iter().enumerate() {
            logits[kk] = if valid[kk] {
                let j = source_index(i, w, offset);
                let jump = (cands.pixel(i)[kk] - d_i).abs() / d_i;
                let phi = features(
                    &nmap.normals()[i],
                    &nmap.normals()[j],
                    nmap.kappa()[j],
                    jump,
                    offset,
                    stencil.beta(),
                    kappa_max,
                );
                dot(&params.theta, &phi)
            } else {
                f64::NEG_INFINITY
            };
        }
        policy_softmax(logits, cands.self_index());
    });
    WeightField::new((w, h), k, weights)
}

/// [`policy_learned`] as a [`WeightPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnedPolicy {
    pub params: PolicyParams,
    pub kappa_max: f64,
}

impl LearnedPolicy {
    pub fn new(params: PolicyParams) -> Self {
        Self {
            params,
            kappa_max: DEFAULT_KAPPA_MAX,
        }
    }
}

impl WeightPolicy for LearnedPolicy {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField> {
        policy_learned(
            &self.params,
            input.normals,
            input.stencil,
            input.candidates,
            input.depth,
            self.kappa_max,
        )
    }
}

/// `Σ_t γ^(n_iter − t) · mean|gt − d_t|` over `d_0 ..= d_{n_iter}`.
pub fn sequence_loss(iterates: &[DepthMap], gt: &DepthMap, gamma: f64, n_iter: usize) -> Result<f64> {
    if iterates.len() != n_iter + 1 {
        return Err(Error::LengthMismatch {
            expected: n_iter + 1,
            found: iterates.len(),
        });
    }
    let mut loss = 0.0;
    for (t, d) in iterates.iter().enumerate() {
        same_dims(gt.dims(), d.dims())?;
        let l1 = mean_abs_error(d.values(), gt.values());
        loss += gamma.powi((n_iter - t) as i32) * l1;
    }
    Ok(loss)
}

fn mean_abs_error(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / gt.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub n_iter_train: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seeds the initial parameter jitter (only used when `init_scale > 0`).
    pub seed: u64,
    pub init_scale: f64,
    pub beta: usize,
    pub kappa_max: f64,
    /// Stop gradients from flowing through earlier iterates.
    pub truncated: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            n_iter_train: 3,
            learning_rate: 5.0,
            epochs: 100,
            seed: 0,
            init_scale: 0.0,
            beta: 2,
            kappa_max: DEFAULT_KAPPA_MAX,
            truncated: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be nonnegative".into()));
        }
        if !(self.kappa_max > 0.0) {
            return Err(Error::InvalidConfig("kappa_max must be positive".into()));
        }
        Ok(())
    }
}

/// Full-resolution target for training through the normal-guided upsampler.
/// Each full-resolution depth is a fixed linear combination of coarse depths.
#[derive(Debug, Clone)]
struct UpsampledTarget {
    rows: Vec<Vec<(usize, f64)>>,
    gt: Vec<f64>,
}

impl UpsampledTarget {
    fn apply(&self, coarse: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|(c, a)| a * coarse[*c]).sum())
            .collect()
    }
}

/// One training scene, prepared at the resolution the policy runs at.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub intrinsics: CameraIntrinsics,
    pub initial: DepthMap,
    pub normals: NormalMap,
    pub gt: DepthMap,
    upsampled: Option<UpsampledTarget>,
}

impl TrainingSample {
    pub fn new(intrinsics: CameraIntrinsics, initial: DepthMap, normals: NormalMap, gt: DepthMap) -> Result<Self> {
        same_dims(intrinsics.dims(), initial.dims())?;
        same_dims(initial.dims(), normals.dims())?;
        same_dims(initial.dims(), gt.dims())?;
        Ok(Self {
            intrinsics,
            initial,
            normals,
            gt,
            upsampled: None,
        })
    }

    /// Render, corrupt and synthesize confidence at the scene's resolution.
    pub fn from_scene(spec: &SceneSpec) -> Result<Self> {
        let gt = render(spec)?;
        let initial = corrupt(&gt.depth, &spec.corruption)?.depth;
        let normals = synth_confidence(&gt, &spec.confidence_model)?;
        Self::new(spec.intrinsics, initial, normals, gt.depth)
    }

    /// Run the policy at `1/stride` resolution and score the normal-guided
    /// upsampling (similarity up-weights on coarse normals at
    /// `up_temperature`) against full-resolution ground truth.
    pub fn from_scene_upsampled(spec: &SceneSpec, stride: usize, up_temperature: f64) -> Result<Self> {
        let full = render(spec)?;
        let mut coarse_spec = spec.clone();
        coarse_spec.intrinsics = coarse_intrinsics(&spec.intrinsics, stride)?;
        let mut sample = Self::from_scene(&coarse_spec)?;
        let table = UpTable::build(&spec.intrinsics, &sample.normals, stride)?;
        let cands = table.candidates(&sample.initial)?;
        let w = up_similarity_weights(&cands, &sample.normals, None, stride, up_temperature)?;
        let rows = (0..table.entries.len())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(UP_K);
                for (kk, &wk) in w.pixel(i).iter().enumerate() {
                    if wk == 0.0 {
                        continue;
                    }
                    let (cell, ratio) = table.entries[i][kk].unwrap_or(table.fallback[i]);
                    row.push((cell, wk * ratio));
                }
                row
            })
            .collect();
        sample.upsampled = Some(UpsampledTarget {
            rows,
            gt: full.depth.values().to_vec(),
        });
        Ok(sample)
    }
}

/// Per-sample data that does not change while θ varies.
struct Prepared<'a> {
    sample: &'a TrainingSample,
    k: usize,
    self_index: usize,
    entries: Vec<Option<(usize, f64)>>,
    /// Features with the relative-jump slot left at zero.
    base: Vec<[f64; FEATURES]>,
}

impl<'a> Prepared<'a> {
    fn new(sample: &'a TrainingSample, config: &TrainConfig) -> Result<Self> {
        let stencil = Stencil::new(config.beta);
        let table = PropagationTable::build(&sample.intrinsics, &sample.normals, &stencil)?;
        let (w, _) = sample.initial.dims();
        let nm = &sample.normals;
        let k = stencil.len();
        let base = (0..table.entries.len())
            .map(|idx| {
                let (i, kk) = (idx / k, idx % k);
                let offset = stencil.offsets()[kk];
                if table.entries[idx].is_none() && kk != table.self_index {
                    return [0.0; FEATURES];
                }
                let j = source_index(i, w, offset);
                features(&nm.normals()[i], &nm.normals()[j], nm.kappa()[j], 0.0, offset, config.beta, config.kappa_max)
            })
            .collect();
        Ok(Self {
            sample,
            k,
            self_index: table.self_index,
            entries: table.entries,
            base,
        })
    }

    fn is_valid(&self, idx: usize) -> bool {
        self.entries[idx].is_some() || idx % self.k == self.self_index
    }
}

/// Values recorded by one forward step.
struct StepTape {
    cands: Vec<f64>,
    weights: Vec<f64>,
    next: Vec<f64>,
}

fn forward_step(theta: &[f64; FEATURES], prep: &Prepared<'_>, depth: &[f64]) -> StepTape {
    let k = prep.k;
    let n = depth.len();
    let mut cands = vec![0.0; n * k];
    let mut weights = vec![0.0; n * k];
    let mut next = vec![0.0; n];
    cands
        .par_chunks_mut(k)
        .zip(weights.par_chunks_mut(k))
        .zip(next.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((c, w), out))| {
            let d_i = depth[i];
            for kk in 0..k {
                let idx = i * k + kk;
                c[kk] = match prep.entries[idx] {
                    Some((j, ratio)) => ratio * depth[j],
                    None => d_i,
                };
                w[kk] = if prep.is_valid(idx) {
                    let mut phi = prep.base[idx];
                    phi[JUMP] = ((c[kk] - d_i).abs() / d_i).min(JUMP_CLAMP);
                    dot(theta, &phi)
                } else {
                    f64::NEG_INFINITY
                };
            }
            policy_softmax(w, prep.self_index);
            *out = c.iter().zip(w.iter()).map(|(c, w)| c * w).sum();
        });
    StepTape { cands, weights, next }
}

/// Discounted L1 term of one iterate and its gradient w.r.t. that iterate.
fn iterate_loss(prep: &Prepared<'_>, depth: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    let sample = prep.sample;
    match &sample.upsampled {
        None => {
            let gt = sample.gt.values();
            let n = gt.len() as f64;
            if let Some(g) = grad {
                for ((g, d), t) in g.iter_mut().zip(depth).zip(gt) {
                    *g += scale * (d - t).signum_or_zero() / n;
                }
            }
            scale * mean_abs_error(depth, gt)
        }
        Some(up) => {
            let full = up.apply(depth);
            let n = up.gt.len() as f64;
            if let Some(g) = grad {
                for (row, (d, t)) in up.rows.iter().zip(full.iter().zip(&up.gt)) {
                    let s = scale * (d - t).signum_or_zero() / n;
                    for (c, a) in row {
                        g[*c] += s * a;
                    }
                }
            }
            scale * mean_abs_error(&full, &up.gt)
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Sequence loss of one sample and, optionally, its gradient w.r.t. θ.
fn sample_objective(
    theta: &[f64; FEATURES],
    prep: &Prepared<'_>,
    config: &TrainConfig,
    want_grad: bool,
) -> (f64, [f64; FEATURES]) {
    let n_iter = config.n_iter_train;
    let discount = |t: usize| config.gamma.powi((n_iter - t) as i32);
    let mut depths = vec![prep.sample.initial.values().to_vec()];
    let mut tapes = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let tape = forward_step(theta, prep, depths.last().expect("initial depth"));
        depths.push(tape.next.clone());
        tapes.push(tape);
    }
    let loss: f64 = depths
        .iter()
        .enumerate()
        .map(|(t, d)| iterate_loss(prep, d, discount(t), None))
        .sum();
    if !want_grad {
        return (loss, [0.0; FEATURES]);
    }

    let n = depths[0].len();
    let k = prep.k;
    let mut grad_theta = [0.0; FEATURES];
    // ∂L/∂d_{t+1}, starting from the last iterate.
    let mut upstream = vec![0.0; n];
    iterate_loss(prep, &depths[n_iter], discount(n_iter), Some(&mut upstream));
    for t in (0..n_iter).rev() {
        let tape = &tapes[t];
        let depth = &depths[t];
        let mut down = vec![0.0; n];
        for i in 0..n {
            let g = upstream[i];
            if g == 0.0 {
                continue;
            }
            let d_i = depth[i];
            let out = tape.next[i];
            for kk in 0..k {
                let idx = i * k + kk;
                let w = tape.weights[idx];
                if w == 0.0 {
                    continue;
                }
                let c = tape.cands[idx];
                // ∂L/∂logit through the softmax.
                let a = g * w * (c - out);
                let mut phi = prep.base[idx];
                let q = (c - d_i) / d_i;
                phi[JUMP] = q.abs().min(JUMP_CLAMP);
                for (gt, p) in grad_theta.iter_mut().zip(&phi) {
                    *gt += a * p;
                }
                if config.truncated {
                    continue;
                }
                match prep.entries[idx] {
                    Some((j, ratio)) => {
                        down[j] += g * w * ratio;
                        if q.abs() < JUMP_CLAMP && q != 0.0 {
                            let s = a * theta[JUMP] * q.signum();
                            down[j] += s * ratio / d_i;
                            down[i] -= s * c / (d_i * d_i);
                        }
                    }
                    None => down[i] += g * w,
                }
            }
        }
        iterate_loss(prep, depth, discount(t), Some(&mut down));
        upstream = down;
    }
    (loss, grad_theta)
}

/// Mean sequence loss over `samples` and its analytic gradient.
pub fn loss_gradient(
    params: &PolicyParams,
    samples: &[TrainingSample],
    config: &TrainConfig,
) -> Result<(f64, [f64; FEATURES])> {
    objective(params, samples, config, true)
}

/// Mean sequence loss over `samples`.
pub fn loss(params: &PolicyParams, samples: &[TrainingSample], config: &TrainConfig) -> Result<f64> {
    Ok(objective(params, samples, config, false)?.0)
}

fn objective(
    params: &PolicyParams,
    samples: &[TrainingSample],
    config: &TrainConfig,
    want_grad: bool,
) -> Result<(f64, [f64; FEATURES])> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let prepared = samples
        .iter()
        .map(|s| Prepared::new(s, config))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<(f64, [f64; FEATURES])> = prepared
        .iter()
        .map(|p| sample_objective(&params.theta, p, config, want_grad))
        .collect();
    let m = samples.len() as f64;
    let mut total = 0.0;
    let mut grad = [0.0; FEATURES];
    for (l, g) in &parts {
        total += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((total / m, grad.map(|g| g / m)))
}

/// Mean absolute error of the last iterate after `n_iter` steps.
pub fn final_l1(params: &PolicyParams, sample: &TrainingSample, n_iter: usize, beta: usize) -> Result<f64> {
    let config = TrainConfig {
        n_iter_train: n_iter,
        beta,
        ..TrainConfig::default()
    };
    let prep = Prepared::new(sample, &config)?;
    let mut depth = sample.initial.values().to_vec();
    for _ in 0..n_iter {
        depth = forward_step(&params.theta, &prep, &depth).next;
    }
    Ok(iterate_loss(&prep, &depth, 1.0, None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Mean loss at the start of every epoch.
    pub log: Vec<f64>,
}

/// Full-batch gradient descent on the mean sequence loss.
pub fn train(samples: &[TrainingSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let prepared = samples
        .iter()
        .map(|s| Prepared::new(s, config))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = [0.0; FEATURES];
    if config.init_scale > 0.0 {
        for t in theta.iter_mut() {
            *t = config.init_scale * rng.random_range(-1.0..1.0);
        }
    }
    let m = samples.len() as f64;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let parts: Vec<(f64, [f64; FEATURES])> = prepared
            .par_iter()
            .map(|p| sample_objective(&theta, p, config, true))
            .collect();
        let mut loss = 0.0;
        let mut grad = [0.0; FEATURES];
        for (l, g) in &parts {
            loss += l / m;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi / m;
            }
        }
        if !loss.is_finite() || loss > DIVERGENCE_LOSS || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        log.push(loss);
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= config.learning_rate * g;
        }
    }
    Ok(TrainOutcome {
        params: PolicyParams::new(theta).map_err(|_| Error::Divergence {
            epoch: config.epochs,
            loss: f64::NAN,
        })?,
        log,
    })
}

/// Prepare every scene at its own resolution and train.
pub fn train_scenes(scenes: &[SceneSpec], config: &TrainConfig) -> Result<TrainOutcome> {
    let samples = scenes
        .iter()
        .map(TrainingSample::from_scene)
        .collect::<Result<Vec<_>>>()?;
    train(&samples, config)
}
