//! Desk-scale training: AdamW with warmup, photometric loss plus optional
//! representation alignment, checkpoints and view-count sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::container::{self, CHECKPOINT_MAGIC, FORMAT_VERSION};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{patchify, Image, PosedView};
use crate::metrics::{psnr, ssim};
use crate::model::{forward_full, is_layer_norm_param, ModelConfig, Net, ParamStore};
use crate::repa::{projector_forward, repa_loss_views, SyntheticTeacher, TeacherFeatures};

/// Which parameters receive decoupled weight decay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    /// Layer-norm gains and biases only.
    #[default]
    LayerNorm,
    /// Everything except layer-norm parameters.
    AllButLayerNorm,
}

impl DecayScope {
    pub fn applies(self, name: &str) -> bool {
        is_layer_norm_param(name) == (self == DecayScope::LayerNorm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_scope: DecayScope,
    pub batch: usize,
    pub iters: u64,
    pub n_in: usize,
    pub n_tgt: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_iters: 200,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            decay_scope: DecayScope::LayerNorm,
            batch: 4,
            iters: 2000,
            n_in: 2,
            n_tgt: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if self.batch == 0 || self.n_in == 0 || self.n_tgt == 0 {
            return Err(Error::Config("batch, n_in and n_tgt must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from zero, then constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters == 0 || step >= cfg.warmup_iters {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_iters as f64
    }
}

/// Parameters and optimizer moments. Batch randomness is derived from the
/// seed and `step`, so no generator state needs saving.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore<f32>,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

fn zeros_like(p: &ParamStore<f32>) -> ParamStore<f32> {
    ParamStore::from_tensors(p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect())
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_params(ParamStore::init(cfg, seed)?))
    }

    pub fn from_params(params: ParamStore<f32>) -> Self {
        Self {
            step: 0,
            m: zeros_like(&params),
            v: zeros_like(&params),
            params,
        }
    }
}

pub type Grads = BTreeMap<String, Vec<f32>>;

/// One AdamW update with bias correction and decoupled, scoped weight decay.
/// Missing gradients count as zero. A non-finite gradient aborts before any
/// parameter changes.
pub fn adamw_step(state: &mut TrainState, grads: &Grads, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        let p = state
            .params
            .get(name)
            .ok_or_else(|| Error::shape("adamw", format!("gradient for unknown parameter {name}")))?;
        if g.len() != p.len() {
            return Err(Error::shape("adamw", format!("gradient of {name} has {} entries, parameter {}", g.len(), p.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    let lr = lr_at(state.step, cfg);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = state.params.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let g = grads.get(&name);
        let decay = if cfg.decay_scope.applies(&name) { cfg.weight_decay } else { 0.0 };
        let m = state.m.get_mut(&name).unwrap().data_mut();
        let v = state.v.get_mut(&name).unwrap().data_mut();
        let p = state.params.get_mut(&name).unwrap().data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i] as f64);
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let pi = p[i] as f64;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + decay * pi;
            p[i] = (pi - lr * update) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    /// Mean photometric MSE over targets, in patch space.
    pub mse: Var,
    pub repa: Option<Var>,
}

fn patch_pixels<T: Real>(image: &Image, patch: usize) -> Result<Tensor<T>> {
    let (h, w) = (image.height(), image.width());
    let data = patchify(image.data(), h, w, 3, patch)?;
    Tensor::new(
        vec![(h / patch) * (w / patch), patch * patch * 3],
        data.into_iter().map(|v| T::of(v as f64)).collect(),
    )
}

fn teacher_grid<T: Real>(g: &mut Graph<T>, teacher: &SyntheticTeacher, image: &Image, patch: usize) -> Result<Var> {
    let (gh, gw) = (image.height() / patch, image.width() / patch);
    let mut f: TeacherFeatures = teacher.features(image)?;
    if (f.grid_h, f.grid_w) != (gh, gw) {
        f = f.resample(gh, gw)?;
    }
    Ok(g.constant(f.features.cast()))
}

/// Builds the photometric and alignment losses of `sample` in `net`. The
/// alignment term is present when the config enables it and a teacher is
/// given.
pub fn sample_losses<T: Real>(net: &mut Net<'_, T>, sample: &Sample, teacher: Option<&SyntheticTeacher>) -> Result<SampleLoss> {
    let first = sample
        .input_views
        .first()
        .ok_or_else(|| Error::contract("sample has no input views"))?;
    if sample.target_views.is_empty() {
        return Err(Error::contract("sample has no target views"));
    }
    let (h, w) = (first.image.height(), first.image.width());
    let cfg = net.cfg().clone();
    let out = net.forward_sample(&sample.input_views, &sample.target_cameras(), h, w)?;
    let mut mse: Option<Var> = None;
    for (r, tv) in out.renders.iter().zip(&sample.target_views) {
        let gt = net.g.constant(patch_pixels(&tv.image, cfg.patch)?);
        let l = net.g.mse_loss(*r, gt)?;
        mse = Some(match mse {
            Some(acc) => net.g.add(acc, l)?,
            None => l,
        });
    }
    let mse = net.g.scale(mse.unwrap(), T::of(1.0 / out.renders.len() as f64));

    let repa = match (&cfg.repa, teacher) {
        (Some(rc), Some(teacher)) => {
            let layer = rc.align_layer - 1;
            let proj = net.projector()?;
            let mut pairs = Vec::new();
            let mut align = |net: &mut Net<'_, T>, states: &[Var], view: &PosedView| -> Result<()> {
                let x = projector_forward(&mut net.g, states[layer], &proj)?;
                let y = teacher_grid(&mut net.g, teacher, &view.image, cfg.patch)?;
                pairs.push((x, y));
                Ok(())
            };
            if rc.stream.uses_input() {
                for (i, states) in &out.input_states {
                    align(net, states, &sample.input_views[*i])?;
                }
            }
            if rc.stream.uses_target() {
                for (j, states) in &net.isolated_target_states(&out, rc.align_layer)? {
                    align(net, states, &sample.target_views[*j])?;
                }
            }
            Some(repa_loss_views(&mut net.g, &pairs, rc.loss_kind)?)
        }
        _ => None,
    };
    Ok(SampleLoss { mse, repa })
}

/// One step's losses, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub mse: f64,
    pub repa: f64,
    pub total: f64,
    pub ms: f64,
}

impl LossRecord {
    /// Everything except the wall time.
    pub fn same_losses(&self, o: &Self) -> bool {
        self.step == o.step
            && self.lr.to_bits() == o.lr.to_bits()
            && self.mse.to_bits() == o.mse.to_bits()
            && self.repa.to_bits() == o.repa.to_bits()
            && self.total.to_bits() == o.total.to_bits()
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the frozen synthetic teacher for a run.
pub fn teacher_seed(seed: u64) -> u64 {
    mix(seed, 0x7EAC_4E55)
}

/// Gradients and losses of one batch, every sample in its own graph.
pub fn batch_gradients(cfg: &ModelConfig, params: &ParamStore<f32>, batch: &[Sample], teacher: Option<&SyntheticTeacher>) -> Result<(Grads, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let weight = cfg.repa.as_ref().map_or(0.0, |r| r.weight);
    let inv = 1.0 / batch.len() as f32;
    let mut grads = Grads::new();
    let (mut mse_sum, mut repa_sum) = (0.0f64, 0.0f64);
    for sample in batch {
        let mut net = Net::new(cfg, params, true)?;
        let l = sample_losses(&mut net, sample, teacher)?;
        mse_sum += net.g.value(l.mse).data()[0] as f64;
        let loss = match l.repa {
            Some(r) => {
                repa_sum += net.g.value(r).data()[0] as f64;
                if weight > 0.0 {
                    let wr = net.g.scale(r, weight as f32);
                    net.g.add(l.mse, wr)?
                } else {
                    l.mse
                }
            }
            None => l.mse,
        };
        let loss = net.g.scale(loss, inv);
        net.g.backward(loss)?;
        for (name, var) in net.bound() {
            let Some(g) = net.g.grad(var) else { continue };
            match grads.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name.to_owned(), g.to_vec());
                }
            }
        }
    }
    let k = batch.len() as f64;
    Ok((grads, mse_sum / k, repa_sum / k))
}

/// Gradients of the alignment term alone for one sample; parameters it
/// does not reach are absent.
pub fn repa_gradients(cfg: &ModelConfig, params: &ParamStore<f32>, sample: &Sample, teacher: &SyntheticTeacher) -> Result<Grads> {
    let mut net = Net::new(cfg, params, true)?;
    let l = sample_losses(&mut net, sample, Some(teacher))?;
    let r = l.repa.ok_or_else(|| Error::Config("model has no alignment branch".into()))?;
    net.g.backward(r)?;
    Ok(net
        .bound()
        .filter_map(|(name, var)| net.g.grad(var).map(|g| (name.to_owned(), g.to_vec())))
        .collect())
}

/// Training loop over a dataset's train split.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    dataset: &'a Dataset,
    scenes: Vec<usize>,
    teacher: Option<SyntheticTeacher>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, train: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let scenes = dataset.indices(Split::Train);
        if scenes.is_empty() {
            return Err(Error::Config("dataset has no training scenes".into()));
        }
        let teacher = match &model.repa {
            Some(r) => Some(SyntheticTeacher::new(model.patch, r.teacher_dim, teacher_seed(train.seed))?),
            None => None,
        };
        Ok(Self {
            model,
            train,
            dataset,
            scenes,
            teacher,
        })
    }

    pub fn teacher(&self) -> Option<&SyntheticTeacher> {
        self.teacher.as_ref()
    }

    /// The samples of step `step`; a pure function of seed and step.
    pub fn batch(&self, step: u64) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.train.seed, step));
        (0..self.train.batch)
            .map(|_| {
                let s = self.scenes[rng.random_range(0..self.scenes.len())];
                self.dataset.sample(s, self.train.n_in, self.train.n_tgt, &mut rng)
            })
            .collect()
    }

    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord> {
        let t0 = Instant::now();
        let step = state.step;
        let batch = self.batch(step)?;
        let (grads, mse, repa) = batch_gradients(&self.model, &state.params, &batch, self.teacher.as_ref())?;
        let weight = self.model.repa.as_ref().map_or(0.0, |r| r.weight);
        let total = if weight > 0.0 { mse + weight * repa } else { mse };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let lr = lr_at(step, &self.train);
        adamw_step(state, &grads, &self.train)?;
        Ok(LossRecord {
            step,
            lr,
            mse,
            repa,
            total,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs until `state.step` reaches `until`, writing one JSON line per step.
    pub fn run(&self, state: &mut TrainState, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(until.saturating_sub(state.step) as usize);
        while state.step < until {
            let rec = self.step(state)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// Mean metrics of one input-view count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub n_in: usize,
    pub n_tgt: usize,
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Copy of the input view whose camera centre is nearest the target.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

/// Index of the input whose camera centre is closest to `target`'s.
pub fn nearest_input(inputs: &[PosedView], target: &PosedView) -> usize {
    let c = target.camera.center();
    (0..inputs.len())
        .min_by(|&a, &b| {
            let da = (inputs[a].camera.center() - c).norm();
            let db = (inputs[b].camera.center() - c).norm();
            da.total_cmp(&db)
        })
        .unwrap_or(0)
}

/// Fixed view order of one scene for evaluation: targets first, then
/// inputs, so larger input counts extend smaller ones.
pub fn eval_order(available: usize, seed: u64, scene: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xE7A1 ^ scene as u64));
    sample_indices(&mut rng, available, available).into_vec()
}

/// Sweeps the number of input views over `n_in_list` without retraining.
pub fn evaluate(params: &ParamStore<f32>, cfg: &ModelConfig, dataset: &Dataset, scenes: &[usize], n_in_list: &[usize], n_tgt: usize, seed: u64) -> Result<Vec<EvalRow>> {
    if scenes.is_empty() || n_tgt == 0 {
        return Err(Error::Config("evaluation needs scenes and at least one target".into()));
    }
    let mut rows = Vec::with_capacity(n_in_list.len());
    for &n_in in n_in_list {
        let mut acc = [0.0f64; 4];
        let mut images = 0usize;
        for &s in scenes {
            let views = dataset.views(s);
            if n_in + n_tgt > views.len() {
                return Err(Error::InsufficientViews {
                    needed: n_in + n_tgt,
                    available: views.len(),
                });
            }
            let order = eval_order(views.len(), seed, s);
            let targets: Vec<PosedView> = order[..n_tgt].iter().map(|&i| views[i].clone()).collect();
            let inputs: Vec<PosedView> = order[n_tgt..n_tgt + n_in].iter().map(|&i| views[i].clone()).collect();
            let cams: Vec<_> = targets.iter().map(|t| t.camera.clone()).collect();
            let renders = forward_full(&inputs, &cams, params, cfg)?;
            for (r, t) in renders.iter().zip(&targets) {
                let copy = &inputs[nearest_input(&inputs, t)].image;
                acc[0] += psnr(r, &t.image)?;
                acc[1] += ssim(r, &t.image)?;
                acc[2] += psnr(copy, &t.image)?;
                acc[3] += ssim(copy, &t.image)?;
                images += 1;
            }
        }
        let k = images as f64;
        rows.push(EvalRow {
            n_in,
            n_tgt,
            images,
            psnr: acc[0] / k,
            ssim: acc[1] / k,
            baseline_psnr: acc[2] / k,
            baseline_ssim: acc[3] / k,
        });
    }
    Ok(rows)
}

/// JSON written next to a checkpoint's tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

const PARAM: &str = "param/";
const MOM1: &str = "adam_m/";
const MOM2: &str = "adam_v/";

pub fn checkpoint_save(path: &Path, state: &TrainState, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::with_capacity(state.params.len() * 3);
    for (prefix, store) in [(PARAM, &state.params), (MOM1, &state.m), (MOM2, &state.v)] {
        named.extend(store.iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
    }
    let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(k, t)| (k.as_str(), *t)).collect();
    container::write_file(path, CHECKPOINT_MAGIC, &refs)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step: state.step,
        model: model.clone(),
        train: train.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Loads a checkpoint; with `expected`, every parameter must match that
/// config instead of the stored one.
pub fn checkpoint_load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("unsupported checkpoint version {}", meta.format_version),
        });
    }
    let mut stores = [BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    for (name, t) in container::read_file(path, CHECKPOINT_MAGIC)? {
        let slot = [PARAM, MOM1, MOM2]
            .iter()
            .position(|p| name.starts_with(p))
            .ok_or_else(|| Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("unexpected tensor {name}"),
            })?;
        let key = name.split_once('/').unwrap().1.to_owned();
        stores[slot].insert(key, t);
    }
    let [p, m, v] = stores.map(ParamStore::from_tensors);
    let cfg = expected.unwrap_or(&meta.model);
    p.check(cfg)?;
    m.check(cfg)?;
    v.check(cfg)?;
    Ok(Checkpoint {
        state: TrainState {
            step: meta.step,
            params: p,
            m,
            v,
        },
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetSpec};
    use crate::model::{param_stream, ParamStream, Paradigm};
    use crate::repa::{RepaConfig, RepaStream};

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_iters: 200,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 5e-4);
        assert_eq!(lr_at(200, &cfg), 1e-3);
        assert_eq!(lr_at(10_000, &cfg), 1e-3);
        assert_eq!(lr_at(0, &TrainConfig { warmup_iters: 0, ..cfg }), 1e-3);
    }

    fn scalar_state(name: &str, value: f32) -> TrainState {
        let mut t = BTreeMap::new();
        t.insert(name.to_owned(), Tensor::new(vec![1], vec![value]).unwrap());
        TrainState::from_params(ParamStore::from_tensors(t))
    }

    #[test]
    fn adamw_first_step_matches_formula() {
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_iters: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = scalar_state("w", 0.5);
        adamw_step(&mut s, &Grads::from([("w".into(), vec![1.0])]), &cfg).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let want = 0.5f64 - 1e-2 * 1.0 / (1.0 + 1e-8);
        assert!((s.params.get("w").unwrap().data()[0] as f64 - want).abs() < 1e-7);
        assert_eq!(s.step, 1);

        let mut z = scalar_state("w", 0.5);
        adamw_step(&mut z, &Grads::new(), &cfg).unwrap();
        assert_eq!(z.params.get("w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn weight_decay_touches_layer_norms_only() {
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_iters: 0,
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut t = BTreeMap::new();
        t.insert("enc.l0.ln_attn.gamma".to_owned(), Tensor::new(vec![1], vec![1.0f32]).unwrap());
        t.insert("enc.l0.attn.q.w".to_owned(), Tensor::new(vec![1], vec![1.0f32]).unwrap());
        let mut s = TrainState::from_params(ParamStore::from_tensors(t.clone()));
        adamw_step(&mut s, &Grads::new(), &cfg).unwrap();
        assert_eq!(s.params.get("enc.l0.attn.q.w").unwrap().data()[0], 1.0);
        assert!((s.params.get("enc.l0.ln_attn.gamma").unwrap().data()[0] - (1.0 - 1e-2 * 0.05)).abs() < 1e-7);

        let inv = TrainConfig {
            decay_scope: DecayScope::AllButLayerNorm,
            ..cfg
        };
        let mut s = TrainState::from_params(ParamStore::from_tensors(t));
        adamw_step(&mut s, &Grads::new(), &inv).unwrap();
        assert_eq!(s.params.get("enc.l0.ln_attn.gamma").unwrap().data()[0], 1.0);
        assert!(s.params.get("enc.l0.attn.q.w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_state("dec.l1.cross.k.w", 0.5);
        let before = s.clone();
        let err = adamw_step(&mut s, &Grads::from([("dec.l1.cross.k.w".into(), vec![f32::NAN])]), &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(n) if n == "dec.l1.cross.k.w"), "{err}");
        assert_eq!(s, before);
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let spec = DatasetSpec {
            n_scenes: 4,
            cams_per_scene: 8,
            split_ratio: 0.75,
            height: 16,
            width: 16,
            seed: 5,
        };
        build_dataset(&spec, dir).unwrap();
        Dataset::open(&dir.join("manifest.json")).unwrap()
    }

    fn tiny_model(paradigm: Paradigm) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            patch: 4,
            n_heads: Some(2),
            ..ModelConfig::desk(paradigm)
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_iters: 2,
            batch: 2,
            n_in: 2,
            n_tgt: 2,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weight_alignment_matches_plain_training() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let plain = tiny_model(Paradigm::CoRefinement);
        let with = ModelConfig {
            repa: Some(RepaConfig {
                weight: 0.0,
                ..RepaConfig::for_depth(2, 8)
            }),
            ..plain.clone()
        };
        let tp = Trainer::new(plain.clone(), tiny_train(), &ds).unwrap();
        let tw = Trainer::new(with.clone(), tiny_train(), &ds).unwrap();
        let mut sp = TrainState::new(&plain, 1).unwrap();
        let mut sw = TrainState::new(&with, 1).unwrap();
        let rp = tp.run(&mut sp, 3, None).unwrap();
        let rw = tw.run(&mut sw, 3, None).unwrap();
        for (a, b) in rp.iter().zip(&rw) {
            assert_eq!(a.mse.to_bits(), b.mse.to_bits());
            assert_eq!(b.total.to_bits(), b.mse.to_bits());
            assert!(b.repa > 0.0);
        }
        for (k, t) in sp.params.iter() {
            assert_eq!(t, sw.params.get(k).unwrap(), "{k}");
        }
    }

    #[test]
    fn alignment_gradients_stay_in_their_stream() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = ds.sample(0, 2, 2, &mut rng).unwrap();
        for paradigm in [Paradigm::CoRefinement, Paradigm::SelfThenCrossLastlayer, Paradigm::CrossOnly] {
            for (stream, silent) in [(RepaStream::InputOnly, ParamStream::Target), (RepaStream::TargetOnly, ParamStream::Input)] {
                let cfg = ModelConfig {
                    repa: Some(RepaConfig {
                        stream,
                        ..RepaConfig::for_depth(2, 8)
                    }),
                    ..tiny_model(paradigm)
                };
                let params = ParamStore::init(&cfg, 4).unwrap();
                let teacher = SyntheticTeacher::new(cfg.patch, 8, 5).unwrap();
                let grads = repa_gradients(&cfg, &params, &sample, &teacher).unwrap();
                let mut live = 0;
                for (name, g) in &grads {
                    if param_stream(name) == silent {
                        assert!(g.iter().all(|v| *v == 0.0), "{paradigm} {stream:?}: {name}");
                    } else if g.iter().any(|v| *v != 0.0) {
                        live += 1;
                    }
                }
                assert!(live > 0, "{paradigm} {stream:?}");
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_resume_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cfg = ModelConfig {
            repa: Some(RepaConfig {
                stream: RepaStream::Both,
                ..RepaConfig::for_depth(2, 8)
            }),
            ..tiny_model(Paradigm::CoRefinement)
        };
        let tr = Trainer::new(cfg.clone(), tiny_train(), &ds).unwrap();
        let mut a = TrainState::new(&cfg, 3).unwrap();
        let full = tr.run(&mut a, 6, None).unwrap();
        assert!(full.iter().all(|r| r.total.is_finite() && r.repa > 0.0));

        let mut b = TrainState::new(&cfg, 3).unwrap();
        let first = tr.run(&mut b, 3, None).unwrap();
        let ck = dir.path().join("ck/model.elvs");
        checkpoint_save(&ck, &b, &cfg, &tiny_train()).unwrap();
        let mut c = checkpoint_load(&ck, Some(&cfg)).unwrap().state;
        assert_eq!(c, b);
        let mut log = Vec::new();
        let rest = tr.run(&mut c, 6, Some(&mut log)).unwrap();
        for (x, y) in full.iter().zip(first.iter().chain(&rest)) {
            assert!(x.same_losses(y), "{x:?} vs {y:?}");
        }
        assert_eq!(c, a);
        let lines: Vec<&str> = std::str::from_utf8(&log).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for k in ["step", "lr", "mse", "repa", "total", "ms"] {
            assert!(rec.get(k).is_some(), "{k}");
        }

        let ck2 = dir.path().join("ck/again.elvs");
        checkpoint_save(&ck2, &a, &cfg, &tiny_train()).unwrap();
        let mut d = TrainState::new(&cfg, 3).unwrap();
        tr.run(&mut d, 6, None).unwrap();
        let ck3 = dir.path().join("ck/third.elvs");
        checkpoint_save(&ck3, &d, &cfg, &tiny_train()).unwrap();
        assert_eq!(std::fs::read(&ck2).unwrap(), std::fs::read(&ck3).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_magic_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_model(Paradigm::CoRefinement);
        let s = TrainState::new(&cfg, 0).unwrap();
        let ck = dir.path().join("m.elvs");
        checkpoint_save(&ck, &s, &cfg, &TrainConfig::default()).unwrap();
        let other = ModelConfig { d_model: 32, ..cfg.clone() };
        match checkpoint_load(&ck, Some(&other)) {
            Err(Error::Shape { detail, .. }) => assert!(detail.contains("parameter tok_in.fc1.w"), "{detail}"),
            e => panic!("{e:?}"),
        }
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        container::write_file(&ck, container::IMAGE_MAGIC, &[("x", &t)]).unwrap();
        assert!(matches!(checkpoint_load(&ck, None), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn evaluation_sweeps_view_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cfg = tiny_model(Paradigm::CoRefinement);
        let params = ParamStore::init(&cfg, 0).unwrap();
        let val = ds.indices(Split::Val);
        let rows = evaluate(&params, &cfg, &ds, &val, &[1, 2, 4], 2, 0).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.images, 2 * val.len());
            assert!(r.psnr.is_finite() && r.baseline_psnr.is_finite());
        }
        assert!(matches!(evaluate(&params, &cfg, &ds, &val, &[7], 2, 0), Err(Error::InsufficientViews { .. })));
        assert_eq!(evaluate(&params, &cfg, &ds, &val, &[2], 2, 0).unwrap()[0], rows[1]);
    }
}
