//! Two-stage training.
//!
//! Stage 1 aligns the identity pathway: the backbone, projector and a first
//! LoRA train on the diffusion loss while each step randomly keeps the
//! global composite, the local identity features, or both. Identity features
//! reach their ground-truth regions directly, so the router plays no part.
//! Stage 2 freezes all of that and trains only the router and a second LoRA,
//! with the router's argmax choosing the feature at every position and the
//! routing loss supervising its logits.

pub mod checkpoint;
pub mod data;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::GlobalConcatMode;
use crate::diffusion::{add_noise, diffusion_loss, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{IdentityInput, Model, ModelConfig, Routing};
use crate::nn::{group_of, scalar_f64, ParamStore};
use crate::supervision::{routing_objective, routing_term, LossVariant, SupervisionMode};
use crate::synthdata::LoadedClip;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
pub use data::{make_batch, prepare_clip, Batch, Encoders, PrepareOptions, PreparedClip};
pub use optim::{lr_multiplier, AdamW, AdamWConfig, ScheduleConfig};

pub const TRAIN_DTYPE: DType = DType::F32;

/// Stage 1 and stage 2 learning rates for a small model trained from
/// scratch for a few hundred steps. The stage defaults are meant for a
/// pretrained backbone and barely move a fresh one.
/// Smallest per-channel contrast gain drawn by the colour augmentation.
pub const COLOR_MIN_GAIN: f32 = 0.75;

pub const DESK_LR: (f64, f64) = (2e-3, 3e-3);

/// Whether the global composite is part of the model from the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Text-to-video: no global conditioning channels.
    T2v,
    /// Image-to-video: global composite concatenated to the latent.
    I2v,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Self::T2v),
            "i2v" => Ok(Self::I2v),
            other => Err(Error::ModeInvalid(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    GlobalOnly,
    LocalOnly,
    Both,
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GlobalOnly => "global_only",
            Self::LocalOnly => "local_only",
            Self::Both => "both",
        })
    }
}

/// Categorical draw over `(global_only, local_only, both)`.
pub fn sample_condition_mode(drop_probs: [f64; 3], rng: &mut impl Rng) -> Result<ConditionMode> {
    if drop_probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (drop_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::ProbsInvalid(format!("{drop_probs:?}")));
    }
    let u: f64 = rng.random();
    Ok(if u < drop_probs[0] {
        ConditionMode::GlobalOnly
    } else if u < drop_probs[0] + drop_probs[1] {
        ConditionMode::LocalOnly
    } else {
        ConditionMode::Both
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub lambda: f64,
    /// Probabilities of `(global_only, local_only, both)` in stage 1.
    pub drop_probs: [f64; 3],
    pub init_mode: InitMode,
    pub supervision_mode: SupervisionMode,
    pub vae_concat: GlobalConcatMode,
    pub loss_variant: LossVariant,
    pub seed: u64,
    /// Per-sample probability of replacing the prompt with the null prompt.
    pub text_dropout: f64,
    /// Roll each sample down by a random whole number of token rows.
    pub roll_augment: bool,
    /// Recolour each sample with a random [`data::ColorMap`] whose gains are
    /// at least this value, which turns its identities into unseen ones.
    pub color_augment: Option<f32>,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            batch_size: 8,
            lr: 2e-5,
            steps: 300,
            lambda: 1.0,
            drop_probs: [1.0 / 3.0; 3],
            init_mode: InitMode::I2v,
            supervision_mode: SupervisionMode::Seg,
            vae_concat: GlobalConcatMode::Before,
            loss_variant: LossVariant::Route,
            seed: 0,
            text_dropout: 0.1,
            roll_augment: true,
            color_augment: None,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            lr: 3e-5,
            steps: 200,
            color_augment: Some(COLOR_MIN_GAIN),
            ..Self::stage1()
        }
    }

    /// Stage defaults with [`DESK_LR`].
    pub fn desk(stage: u8) -> Self {
        if stage == 1 {
            Self {
                lr: DESK_LR.0,
                ..Self::stage1()
            }
        } else {
            Self {
                lr: DESK_LR.1,
                ..Self::stage2()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size non-zero".into()));
        }
        if self.lambda < 0.0 || self.lambda.is_nan() {
            return Err(Error::LambdaNegative(self.lambda));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::Config(format!(
                "text_dropout {} outside [0, 1]",
                self.text_dropout
            )));
        }
        if let Some(g) = self.color_augment {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("color_augment gain {g} outside (0, 1]")));
            }
        }
        sample_condition_mode(self.drop_probs, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(())
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            supervision: self.supervision_mode,
            concat: self.vae_concat,
        }
    }
}

/// Which parameter groups a stage may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub trainable: BTreeMap<&'static str, bool>,
}

impl FreezePolicy {
    pub fn for_stage(stage: u8) -> Self {
        let on: &[&str] = if stage == 1 {
            &["backbone", "projector", "lora.stage1"]
        } else {
            &["router", "lora.stage2"]
        };
        Self {
            trainable: crate::nn::GROUPS.iter().map(|g| (*g, on.contains(g))).collect(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(group_of(name)).copied().unwrap_or(false)
    }

    pub fn trainable_names(&self, store: &ParamStore) -> Vec<String> {
        store.names().filter(|n| self.is_trainable(n)).cloned().collect()
    }

    /// Fails if any frozen parameter differs bitwise from `reference`.
    pub fn audit(&self, store: &ParamStore, reference: &CheckpointBundle) -> Result<()> {
        for (name, arr) in reference.params() {
            if self.is_trainable(name) {
                continue;
            }
            let var = store.get(name).ok_or_else(|| Error::FreezeViolation(name.clone()))?;
            let now = checkpoint::NamedArray::from_tensor(var.as_tensor())?;
            let same =
                now.shape == arr.shape && now.data.iter().zip(&arr.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::FreezeViolation(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_diff: f64,
    /// Cross-entropy routing term (stage 2), logged whatever the loss variant.
    pub l_route_term: Option<f64>,
    pub lr: f64,
    pub mode: ConditionMode,
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("step,l_diff,l_route_term,lr,mode\n");
    for r in history {
        let term = r.l_route_term.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_diff, term, r.lr, r.mode));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trailing moving average with a window of `window` (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Means of the first and last `window` values.
pub fn endpoint_means(values: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&values[..w.min(values.len())]),
        mean(&values[values.len().saturating_sub(w)..]),
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: CheckpointBundle,
    pub history: Vec<LossRecord>,
}

/// Config snapshot stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Snapshot {
    pub fn from_bundle(b: &CheckpointBundle) -> Result<Self> {
        Ok(serde_json::from_value(b.config.clone())?)
    }
}

/// Stage 1 model configuration implied by the training config.
pub fn stage1_model_config(cfg: &TrainConfig, base: ModelConfig) -> ModelConfig {
    let mut m = base;
    m.dit.global_channels = cfg.init_mode == InitMode::I2v;
    m
}

pub fn lora_stages(stage: u8) -> &'static [&'static str] {
    if stage == 1 {
        &["stage1"]
    } else {
        &["stage1", "stage2"]
    }
}

/// Prepares every clip with the config's supervision and concat modes.
pub fn prepare_corpus(clips: &[LoadedClip], model: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<PreparedClip>> {
    if clips.is_empty() {
        return Err(Error::CorpusEmpty);
    }
    let enc = Encoders::default();
    clips
        .iter()
        .map(|c| prepare_clip(c, model, cfg.prepare_options(), &enc, &Device::Cpu))
        .collect()
}

/// Timesteps spread over the schedule: one uniform draw per equal stratum.
pub fn stratified_timesteps(batch: usize, train_steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch)
        .map(|j| {
            let u: f64 = rng.random();
            (((j as f64 + u) / batch as f64 * train_steps as f64) as usize).min(train_steps - 1)
        })
        .collect()
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Zeroes the prompt embedding of each sample with probability `p`.
fn drop_text(text: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let b = text.dim(0)?;
    let keep: Vec<f32> = (0..b)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    let keep = Tensor::from_vec(keep, (b, 1), text.device())?.to_dtype(text.dtype())?;
    Ok(text.broadcast_mul(&keep)?)
}

struct StepLosses {
    total: Tensor,
    l_diff: f64,
    route_term: Option<f64>,
}

fn step_losses(
    model: &Model,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    batch: &Batch,
    mode: ConditionMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let b = batch.size();
    let ts = stratified_timesteps(b, sched.len(), rng);
    let eps = normal_tensor(batch.x0.dims(), rng, TRAIN_DTYPE)?;
    let xt = add_noise(&batch.x0, &eps, &ts, sched)?;
    let text = drop_text(&batch.text, cfg.text_dropout, rng)?;
    let global = if model.cfg.dit.global_channels {
        Some(if mode == ConditionMode::LocalOnly {
            batch.global.zeros_like()?
        } else {
            batch.global.clone()
        })
    } else {
        None
    };
    let latents = if mode == ConditionMode::GlobalOnly {
        None
    } else {
        Some(model.project(&batch.features)?)
    };
    let routing = if cfg.stage == 1 {
        Routing::Teacher(&batch.one_hot)
    } else {
        Routing::Router
    };
    let identities = latents.as_deref().map(|l| IdentityInput { latents: l, routing });
    let out = model.forward(&xt, &ts, &text, global.as_ref(), identities)?;
    let l_diff = diffusion_loss(&out.eps, &eps)?;

    let mut total = l_diff.clone();
    let mut route_term = None;
    if cfg.stage == 2 && !out.logits.is_empty() {
        let layers = out.logits.len() as f64;
        let mut ce_sum = 0.0;
        let mut objective: Option<Tensor> = None;
        for logits in &out.logits {
            ce_sum += scalar_f64(&routing_term(&logits.detach(), &batch.one_hot, &batch.valid)?)?;
            if let Some(term) = routing_objective(cfg.loss_variant, logits, &batch.one_hot, &batch.valid)? {
                objective = Some(match objective {
                    Some(acc) => (acc + term)?,
                    None => term,
                });
            }
        }
        route_term = Some(ce_sum / layers);
        if let Some(obj) = objective {
            total = (total + obj.affine(cfg.lambda / layers, 0.0)?)?;
        }
    }
    Ok(StepLosses {
        l_diff: scalar_f64(&l_diff)?,
        total,
        route_term,
    })
}

fn run_loop(
    model: &Model,
    store: &ParamStore,
    cfg: &TrainConfig,
    corpus: &[PreparedClip],
    policy: &FreezePolicy,
    opt: &mut AdamW,
) -> Result<Vec<LossRecord>> {
    let sched = NoiseSchedule::from_config(&cfg.diffusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(cfg.stage) << 32));
    let names = policy.trainable_names(store);
    let mut history = Vec::with_capacity(cfg.steps);
    let encoders = Encoders::default();
    for step in 0..cfg.steps {
        let rows = model.cfg.dit.token_grid().1;
        let picks = (0..cfg.batch_size)
            .map(|_| {
                let mut clip = corpus[rng.random_range(0..corpus.len())].clone();
                if cfg.roll_augment {
                    clip = data::roll_vertical(&clip, rng.random_range(0..rows), &model.cfg)?;
                }
                if let Some(min_gain) = cfg.color_augment {
                    let map = data::ColorMap::sample(&mut rng, min_gain);
                    clip = data::recolor(&clip, &map, &model.cfg, cfg.vae_concat, &encoders)?;
                }
                Ok(clip)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&picks.iter().collect::<Vec<_>>(), TRAIN_DTYPE)?;
        let mode = if cfg.stage == 1 {
            sample_condition_mode(cfg.drop_probs, &mut rng)?
        } else {
            ConditionMode::Both
        };
        let losses = step_losses(model, cfg, &sched, &batch, mode, &mut rng)?;
        let total = scalar_f64(&losses.total)?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = losses.total.backward()?;
        let lr = cfg.lr * lr_multiplier(step, cfg.steps, cfg.schedule);
        opt.update(store, &grads, &names, lr)?;
        history.push(LossRecord {
            step,
            l_diff: losses.l_diff,
            l_route_term: losses.route_term,
            lr,
            mode,
        });
    }
    Ok(history)
}

fn check_corpus(corpus: &[PreparedClip]) -> Result<()> {
    if corpus.is_empty() {
        Err(Error::CorpusEmpty)
    } else {
        Ok(())
    }
}

pub fn train_stage1(cfg: &TrainConfig, model_cfg: ModelConfig, corpus: &[PreparedClip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 called with stage {}", cfg.stage)));
    }
    check_corpus(corpus)?;
    let model_cfg = stage1_model_config(cfg, model_cfg);
    let mut store = ParamStore::new(TRAIN_DTYPE, cfg.seed);
    let model = Model::new(&mut store, model_cfg, lora_stages(1))?;
    let policy = FreezePolicy::for_stage(1);
    let mut opt = AdamW::new(cfg.optimizer);
    let history = run_loop(&model, &store, cfg, corpus, &policy, &mut opt)?;
    store.check_finite()?;
    let snapshot = serde_json::to_value(Snapshot {
        model: model_cfg,
        train: cfg.clone(),
    })?;
    Ok(TrainOutcome {
        bundle: CheckpointBundle::from_state(&store, Some(&opt), cfg.steps, 1, snapshot)?,
        history,
    })
}

/// Rebuilds a stage's model around a checkpoint's parameters. Missing
/// parameters (a fresh stage-2 adapter) are initialized from `seed`.
pub fn model_from_bundle(bundle: &CheckpointBundle, stage: u8, seed: u64) -> Result<(Model, ParamStore)> {
    let snap = Snapshot::from_bundle(bundle)?;
    let mut store = bundle.to_store(TRAIN_DTYPE, seed)?;
    let model = Model::new(&mut store, snap.model, lora_stages(stage))?;
    Ok((model, store))
}

pub fn train_stage2(cfg: &TrainConfig, corpus: &[PreparedClip], stage1: &CheckpointBundle) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage2 called with stage {}", cfg.stage)));
    }
    if stage1.stage != 1 {
        return Err(Error::Config(format!(
            "expected a stage-1 checkpoint, got stage {}",
            stage1.stage
        )));
    }
    check_corpus(corpus)?;
    let snap = Snapshot::from_bundle(stage1)?;
    let (model, store) = model_from_bundle(stage1, 2, cfg.seed)?;
    let policy = FreezePolicy::for_stage(2);
    let mut opt = AdamW::new(cfg.optimizer);
    let history = run_loop(&model, &store, cfg, corpus, &policy, &mut opt)?;
    store.check_finite()?;
    policy.audit(&store, stage1)?;
    let snapshot = serde_json::to_value(Snapshot {
        model: snap.model,
        train: cfg.clone(),
    })?;
    Ok(TrainOutcome {
        bundle: CheckpointBundle::from_state(&store, Some(&opt), cfg.steps, 2, snapshot)?,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probs_always_pick_that_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                sample_condition_mode([1.0, 0.0, 0.0], &mut rng).unwrap(),
                ConditionMode::GlobalOnly
            );
        }
        assert!(matches!(
            sample_condition_mode([0.5, 0.6, 0.0], &mut rng),
            Err(Error::ProbsInvalid(_))
        ));
    }

    #[test]
    fn stage_policies() {
        let p1 = FreezePolicy::for_stage(1);
        assert!(p1.is_trainable("backbone.block0.ada.weight"));
        assert!(!p1.is_trainable("router.f.fc1.weight"));
        assert!(!p1.is_trainable("lora.stage2.block0.attn.q.A"));
        let p2 = FreezePolicy::for_stage(2);
        assert!(p2.is_trainable("router.g.fc2.bias"));
        assert!(p2.is_trainable("lora.stage2.block3.attn.o.B"));
        assert!(!p2.is_trainable("projector.W_aggr"));
        assert!(!p2.is_trainable("lora.stage1.block3.attn.o.B"));
    }

    #[test]
    fn stratified_covers_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = stratified_timesteps(8, 1000, &mut rng);
        for (j, t) in ts.iter().enumerate() {
            assert!(*t >= j * 125 && *t < (j + 1) * 125);
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
        assert_eq!(endpoint_means(&[1.0, 3.0, 5.0, 7.0], 2), (2.0, 6.0));
    }
}
