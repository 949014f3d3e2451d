//! Train state, batch preparation and the alternating D/G update.

use serde::{Deserialize, Serialize};
use vstain_tensor::{no_grad, Tensor};

use super::data::{sample_training_pair, stream_rng, Balancing, PairedSample, Split, UnifiedSampler};
use super::optim::{Adam, AdamConfig, Ema};
use super::schedule::{sample_conditioning_drops, warmup_lr, DropRates, Drops};
use crate::backbone::{extract_subcrop_tokens, Backbone, SpatialTokenGrid};
use crate::discriminator::{feature_matching_loss, hinge_d_loss, hinge_g_loss, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{RgbImage, ValueRange};
use crate::losses::{coefficients, edge_loss, l1_at, perceptual_loss, total_generator_loss, LossBundle, LossComponents, LossConfig};
use crate::nn::{frozen, VarMap};
use crate::perceptual::FeatureExtractor;
use crate::processor::ProcessorConfig;
use crate::stain::{dab_loss, StainConfig, StainMatrix};

const STREAM_BATCH: u64 = 1;
const STREAM_ITEM: u64 = 2;
pub(crate) const STREAM_INIT_G: u64 = 3;
pub(crate) const STREAM_INIT_D: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub steps: u64,
    pub adv_start: u64,
    pub warmup: u64,
    pub g_opt: AdamConfig,
    pub d_opt: AdamConfig,
    pub ema_decay: f64,
    pub drops: DropRates,
    pub balancing: Balancing,
    /// Conditioning vocabulary; a sample's token is the index of its class (or stain).
    pub tokens: Vec<String>,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            crop: 512,
            steps: 100_000,
            adv_start: 2000,
            warmup: 1000,
            g_opt: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            d_opt: AdamConfig { lr: 4e-4, ..AdamConfig::default() },
            ema_decay: 0.999,
            drops: DropRates::default(),
            balancing: Balancing::Proportional,
            tokens: ["HER2", "Ki67", "ER", "PR"].map(String::from).to_vec(),
            log_every: 1,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.crop == 0 {
            return bad("train.batch_size and train.crop must be positive");
        }
        if !(self.d_opt.lr > self.g_opt.lr) {
            return bad("train.d_opt.lr must exceed train.g_opt.lr");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay must lie in [0, 1)");
        }
        if !self.drops.is_valid() {
            return bad("train.drops rates must be probabilities summing to <= 1");
        }
        if self.tokens.is_empty() {
            return bad("train.tokens must not be empty");
        }
        Ok(())
    }
}

/// Everything the step function reads but never mutates.
pub struct StepContext<'a> {
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub stain: &'a StainConfig,
    pub stain_matrix: &'a StainMatrix,
    pub perceptual: &'a dyn FeatureExtractor,
}

pub struct TrainState {
    pub seed: u64,
    pub step: u64,
    pub gvars: VarMap,
    pub dvars: VarMap,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub ema: Ema,
}

impl TrainState {
    pub fn new(
        seed: u64,
        gcfg: &GeneratorConfig,
        pcfg: &ProcessorConfig,
        dcfg: &DiscriminatorConfig,
        tcfg: &TrainConfig,
    ) -> Result<Self> {
        let gvars = VarMap::new(super::data::derive_seed(seed, STREAM_INIT_G, 0));
        let dvars = VarMap::new(super::data::derive_seed(seed, STREAM_INIT_D, 0));
        Self::from_vars(seed, 0, gvars, dvars, gcfg, pcfg, dcfg, tcfg)
    }

    /// Builds models over existing (possibly loaded) maps; missing entries are
    /// initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn from_vars(
        seed: u64,
        step: u64,
        gvars: VarMap,
        dvars: VarMap,
        gcfg: &GeneratorConfig,
        pcfg: &ProcessorConfig,
        dcfg: &DiscriminatorConfig,
        tcfg: &TrainConfig,
    ) -> Result<Self> {
        tcfg.validate()?;
        if tcfg.tokens.len() != gcfg.num_classes {
            return Err(Error::Config(format!(
                "train.tokens has {} entries but generator.num_classes is {}",
                tcfg.tokens.len(),
                gcfg.num_classes
            )));
        }
        let generator = Generator::new(&gvars, gcfg, pcfg)?;
        let discriminator = Discriminator::new(&dvars, dcfg)?;
        let g_opt = Adam::new(&gvars, tcfg.g_opt.clone());
        let d_opt = Adam::new(&dvars, tcfg.d_opt.clone());
        let ema = Ema::new(&gvars, tcfg.ema_decay);
        Ok(TrainState { seed, step, gvars, dvars, generator, discriminator, g_opt, d_opt, ema })
    }

    /// Generator bound to the EMA shadow weights.
    pub fn ema_generator(&self) -> Result<Generator> {
        Generator::new(&self.ema.shadow, self.generator.config(), self.generator.processor.config())
    }
}

/// One training batch in model space.
#[derive(Clone, Debug)]
pub struct Batch {
    pub hne: Tensor,
    pub ihc: Tensor,
    pub token_grid: Tensor,
    pub tokens: Vec<usize>,
    pub drops: Vec<Drops>,
}

/// Training pairs held in memory with their tokens and a stain sampler.
pub struct TrainingData {
    pub samples: Vec<PairedSample>,
    pub images: Vec<(RgbImage, RgbImage)>,
    pub tokens: Vec<usize>,
    sampler: UnifiedSampler,
}

impl TrainingData {
    pub fn load(samples: &[PairedSample], vocab: &[String], balancing: Balancing) -> Result<Self> {
        let samples: Vec<PairedSample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
        if samples.is_empty() {
            return Err(Error::Data("manifest has no train split samples".into()));
        }
        let mut images = Vec::with_capacity(samples.len());
        let mut tokens = Vec::with_capacity(samples.len());
        for s in &samples {
            tokens.push(s.token(vocab)?);
            let (h, i) = (RgbImage::load(&s.hne)?, RgbImage::load(&s.ihc)?);
            if (h.height(), h.width()) != (i.height(), i.width()) {
                return Err(Error::Data(format!("{}: H&E and IHC sizes differ", s.source_id)));
            }
            images.push((h, i));
        }
        let sampler = UnifiedSampler::from_samples(&samples, balancing)?;
        Ok(TrainingData { samples, images, tokens, sampler })
    }

    pub fn from_memory(samples: Vec<PairedSample>, images: Vec<(RgbImage, RgbImage)>, tokens: Vec<usize>, balancing: Balancing) -> Result<Self> {
        let sampler = UnifiedSampler::from_samples(&samples, balancing)?;
        Ok(TrainingData { samples, images, tokens, sampler })
    }

    /// The batch for `step`, a pure function of `(seed, step)` whatever `workers` is.
    pub fn batch(
        &self,
        seed: u64,
        step: u64,
        cfg: &TrainConfig,
        backbone: &dyn Backbone,
        grid_side: usize,
        workers: usize,
    ) -> Result<Batch> {
        let mut rng = stream_rng(seed, STREAM_BATCH, step);
        let picks = self.sampler.batch(cfg.batch_size, &mut rng);
        let item = |k: usize| -> Result<(RgbImage, RgbImage, SpatialTokenGrid, Drops)> {
            let mut r = stream_rng(seed, STREAM_ITEM, step * cfg.batch_size as u64 + k as u64);
            let (h, i) = &self.images[picks[k]];
            let (hc, ic, _) = sample_training_pair(h, i, cfg.crop, &mut r)?;
            let drops = sample_conditioning_drops(&cfg.drops, &mut r);
            let grid = no_grad(|| extract_subcrop_tokens(&hc.to_unit(), backbone, grid_side))?;
            Ok((hc, ic, grid, drops))
        };
        let items = parallel_map(cfg.batch_size, workers, item)?;
        let hne: Vec<RgbImage> = items.iter().map(|x| x.0.clone()).collect();
        let ihc: Vec<RgbImage> = items.iter().map(|x| x.1.clone()).collect();
        let grids: Vec<SpatialTokenGrid> = items.iter().map(|x| x.2.clone()).collect();
        Ok(Batch {
            hne: RgbImage::batch_to_tensor(&hne),
            ihc: RgbImage::batch_to_tensor(&ihc),
            token_grid: SpatialTokenGrid::batch_to_tensor(&grids),
            tokens: picks.iter().map(|&p| self.tokens[p]).collect(),
            drops: items.iter().map(|x| x.3).collect(),
        })
    }
}

/// Runs `f(0..n)` across up to `workers` threads, preserving order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let per = n.div_ceil(workers);
        for (ci, chunk) in slots.chunks_mut(per).enumerate() {
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(ci * per + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component: name.into() })
    }
}

/// One D update (once adversarial training is on) then one G update, EMA update
/// and step increment.
pub fn training_step(state: &mut TrainState, batch: &Batch, ctx: &StepContext) -> Result<LossBundle> {
    let t = state.step;
    let cfg = ctx.train;
    let adv_on = t >= cfg.adv_start;
    let lr_g = warmup_lr(cfg.g_opt.lr, t, cfg.warmup);
    let lr_d = warmup_lr(cfg.d_opt.lr, t, cfg.warmup);
    let drop_uni: Vec<bool> = batch.drops.iter().map(|d| d.uni).collect();
    let drop_cls: Vec<bool> = batch.drops.iter().map(|d| d.cls).collect();
    let gen = &state.generator;
    let disc = &state.discriminator;

    if adv_on {
        let fake = no_grad(|| gen.forward_tokens(&batch.hne, &batch.token_grid, &batch.tokens, &drop_uni, &drop_cls))?;
        let real = batch.ihc.detach_var();
        let real_out = disc.discriminate(&real);
        let logit_sum = real_out.logits.iter().map(|l| l.sum_all()).reduce(|a, b| a.add(&b)).expect("scales");
        let gx = logit_sum.backward_with_graph();
        let n = real.dim(0) as f64;
        let r1 = match gx.get(&real) {
            Some(g) => g.sqr().sum_all().scale(disc.config().r1_gamma * 0.5 / n),
            None => Tensor::scalar(0.0),
        };
        let fake_out = disc.discriminate(&fake.detach());
        let loss_d = hinge_d_loss(&real_out.logits, &fake_out.logits).add(&r1);
        finite("discriminator", &loss_d)?;
        let grads = loss_d.backward();
        state.d_opt.step(&grads, lr_d)?;
    }

    let fake = gen.forward_tokens(&batch.hne, &batch.token_grid, &batch.tokens, &drop_uni, &drop_cls)?;
    let percept = perceptual_loss(&fake, &batch.ihc, ctx.perceptual, &ctx.loss.percept_scales);
    let l1 = l1_at(&fake, &batch.ihc, ctx.loss.l1_size);
    let edge = edge_loss(&fake, &batch.hne, &ctx.loss.edge_scales);
    let dab = dab_loss(&fake, &batch.ihc, ctx.stain_matrix, ctx.stain);
    let (adv, fm) = if adv_on {
        let fake_out = frozen(|| disc.discriminate(&fake));
        let real_out = no_grad(|| frozen(|| disc.discriminate(&batch.ihc)));
        let fm = feature_matching_loss(&disc.fm_features(&fake_out), &disc.fm_features(&real_out))?;
        (Some(hinge_g_loss(&fake_out.logits)), Some(fm))
    } else {
        (None, None)
    };
    let k = coefficients(&ctx.loss.weights, t, cfg.adv_start);
    let mut terms = vec![("percept", percept, k.percept), ("l1", l1, k.l1), ("edge", edge, k.edge)];
    if let (Some(a), Some(f)) = (adv, fm) {
        terms.push(("adv", a, k.adv));
        terms.push(("fm", f, k.fm));
    }
    terms.push(("dab", dab, k.dab));
    for (name, v, _) in &terms {
        finite(name, v)?;
    }
    let value = |name: &str| terms.iter().find(|x| x.0 == name).map_or(0.0, |x| x.1.item());
    let comps = LossComponents {
        percept: value("percept"),
        l1: value("l1"),
        edge: value("edge"),
        adv: value("adv"),
        fm: value("fm"),
        dab: value("dab"),
    };
    let bundle = total_generator_loss(&comps, &ctx.loss.weights, t, cfg.adv_start)?;
    let total = terms
        .iter()
        .filter(|x| x.2 != 0.0)
        .map(|(_, v, c)| v.scale(*c))
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Tensor::scalar(0.0));
    let grads = total.backward();
    state.g_opt.step(&grads, lr_g)?;
    state.ema.update(&state.gvars);
    state.step += 1;
    Ok(bundle)
}

/// Generates signed-range outputs for a batch of unit- or signed-range crops
/// without recording gradients.
pub fn generate_images(
    gen: &Generator,
    backbone: &dyn Backbone,
    grid_side: usize,
    hne: &[RgbImage],
    tokens: &[usize],
) -> Result<Vec<RgbImage>> {
    no_grad(|| {
        let grids: Vec<SpatialTokenGrid> =
            hne.iter().map(|h| extract_subcrop_tokens(&h.to_unit(), backbone, grid_side)).collect::<Result<_>>()?;
        let signed: Vec<RgbImage> = hne.iter().map(|h| h.to_signed()).collect();
        let off = vec![false; hne.len()];
        let out = gen.forward_tokens(
            &RgbImage::batch_to_tensor(&signed),
            &SpatialTokenGrid::batch_to_tensor(&grids),
            tokens,
            &off,
            &off,
        )?;
        (0..hne.len()).map(|i| RgbImage::from_tensor(&out, i, ValueRange::Signed)).collect()
    })
}

/// Outputs of a [`run_training`] call besides the updated state.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub log: Vec<LossBundle>,
    pub checkpoints: Vec<std::path::PathBuf>,
}

/// Where [`run_training`] writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct RunSinks<'a> {
    /// Line-delimited loss log, appended every `log_every` steps.
    pub log: Option<&'a std::path::Path>,
    /// Directory for `step_XXXXXXXX.vsck` checkpoints every `checkpoint_every` steps
    /// and a final `last.vsck`.
    pub checkpoints: Option<&'a std::path::Path>,
    /// Stored in every checkpoint header.
    pub config: serde_json::Value,
}

/// Steps `state` until `state.step == until`, resuming from wherever it stands.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    state: &mut TrainState,
    data: &TrainingData,
    ctx: &StepContext,
    backbone: &dyn Backbone,
    grid_side: usize,
    workers: usize,
    until: u64,
    sinks: &RunSinks,
) -> Result<RunOutputs> {
    let mut out = RunOutputs::default();
    let cfg = ctx.train;
    let save = |state: &TrainState, name: String, out: &mut RunOutputs| -> Result<()> {
        if let Some(dir) = sinks.checkpoints {
            let path = dir.join(name);
            super::checkpoint::Checkpoint::from_state(state, sinks.config.clone()).save(&path)?;
            out.checkpoints.push(path);
        }
        Ok(())
    };
    while state.step < until {
        let batch = data.batch(state.seed, state.step, cfg, backbone, grid_side, workers)?;
        let bundle = training_step(state, &batch, ctx)?;
        if cfg.log_every > 0 && bundle.step % cfg.log_every == 0 {
            if let Some(p) = sinks.log {
                crate::losses::append_log(p, std::slice::from_ref(&bundle))?;
            }
            log::info!("step {} total {:.4}", bundle.step, bundle.total);
        }
        out.log.push(bundle);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save(state, format!("step_{:08}.vsck", state.step), &mut out)?;
        }
    }
    save(state, "last.vsck".into(), &mut out)?;
    Ok(out)
}
