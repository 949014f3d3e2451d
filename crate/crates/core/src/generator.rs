//! SPADE-UNet generator: strided encoder, attention bottleneck, multi-scale edge
//! encoder and a decoder whose stages apply SPADE (token maps) plus FiLM (stain
//! embedding) modulation.

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{instance_norm, Conv2d, Embedding, Init, Linear, VarBuilder, VarMap};
use crate::processor::{FeatureProcessor, MultiScaleConditioning, ProcessorConfig};
use crate::sobel::sobel_gradients;

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Input channels followed by one width per encoder level.
    pub encoder_channels: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub attention: bool,
    /// Width of the full-resolution decoder head.
    pub head_channels: usize,
    pub edge_channels: usize,
    pub spade_hidden: usize,
    pub embedding_dim: usize,
    /// Conditioning classes, excluding the null row.
    pub num_classes: usize,
    pub use_edge_encoder: bool,
    pub use_spade: bool,
    pub use_film: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 512,
            encoder_channels: vec![3, 64, 128, 256, 512, 512],
            bottleneck_blocks: 4,
            attention: true,
            head_channels: 64,
            edge_channels: 32,
            spade_hidden: 128,
            embedding_dim: 64,
            num_classes: 4,
            use_edge_encoder: true,
            use_spade: true,
            use_film: true,
        }
    }
}

impl GeneratorConfig {
    pub fn depth(&self) -> usize {
        self.encoder_channels.len() - 1
    }

    pub fn bottleneck_side(&self) -> usize {
        self.resolution >> self.depth()
    }

    /// Output side of every decoder stage, coarsest first; the last is the head.
    pub fn decoder_scales(&self) -> Vec<usize> {
        (0..self.depth()).rev().map(|i| self.resolution >> i).collect()
    }

    /// Scales of the edge pyramid, finest first.
    pub fn edge_scales(&self) -> Vec<usize> {
        (0..self.depth()).map(|i| self.resolution >> i).collect()
    }

    pub fn null_index(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self, cond: &ProcessorConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() < 2 || self.encoder_channels[0] != 3 {
            return bad("generator.encoder_channels must start with 3 and have at least one level".into());
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.head_channels == 0 || self.embedding_dim == 0 {
            return bad("generator widths must be positive".into());
        }
        let depth = self.depth();
        if self.resolution % (1 << depth) != 0 || self.bottleneck_side() < 2 {
            return bad(format!(
                "resolution {} must be divisible by 2^{depth} with a bottleneck side of at least 2",
                self.resolution
            ));
        }
        if self.num_classes == 0 {
            return bad("generator.num_classes must be positive".into());
        }
        let stages = self.decoder_scales();
        let spade_stages = &stages[..stages.len() - 1];
        for s in cond.scales() {
            if !spade_stages.contains(&s) {
                return bad(format!("conditioning scale {s} has no SPADE decoder stage (stages {spade_stages:?})"));
            }
        }
        Ok(())
    }
}

/// Returns the 1024-px variant: one extra encoder level of `extra_channels` in front
/// of the existing ones, a matching decoder stage and edge scale. The token grid and
/// conditioning scales are unchanged.
pub fn build_1024_variant(cfg: &GeneratorConfig, extra_channels: usize) -> Result<GeneratorConfig> {
    if cfg.resolution != 512 {
        return Err(Error::Config(format!("1024 variant needs a 512 config, got {}", cfg.resolution)));
    }
    let mut out = cfg.clone();
    out.resolution = 1024;
    out.encoder_channels.insert(1, extra_channels);
    out.head_channels = extra_channels;
    Ok(out)
}

/// Instance norm followed by `(γ_spade + γ_film) ⊙ ĥ + (β_spade + β_film)`.
#[derive(Clone, Debug)]
pub struct Modulation {
    spade: Option<(Conv2d, Conv2d, Conv2d)>,
    film: Option<Linear>,
    channels: usize,
}

impl Modulation {
    /// SPADE convolutions are bias-free and the emitting pair starts at zero, so the
    /// spatial terms vanish at initialization and for all-zero conditioning maps.
    /// FiLM starts at `γ = 1, β = 0`.
    pub fn new(vb: &VarBuilder, channels: usize, spade: Option<(usize, usize)>, film_dim: Option<usize>) -> Self {
        let spade = spade.map(|(cond, hidden)| {
            (
                Conv2d::new(&vb.pp("spade_shared"), cond, hidden, 3, 1, 1, false),
                Conv2d::zeros(&vb.pp("spade_gamma"), hidden, channels, 3, 1, false),
                Conv2d::zeros(&vb.pp("spade_beta"), hidden, channels, 3, 1, false),
            )
        });
        let film = film_dim.map(|e| {
            let bias = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
            Linear::with_init(&vb.pp("film"), e, 2 * channels, Init::Zeros, Init::Values(bias))
        });
        Modulation { spade, film, channels }
    }

    pub fn forward(&self, h: &Tensor, u: Option<&Tensor>, e: Option<&Tensor>) -> Result<Tensor> {
        let (n, c, hh, hw) = h.dims4();
        let normed = instance_norm(h, NORM_EPS);
        let mut gamma: Option<Tensor> = None;
        let mut beta: Option<Tensor> = None;
        if let (Some((shared, g, b)), Some(u)) = (&self.spade, u) {
            let (_, _, uh, uw) = u.dims4();
            if (uh, uw) != (hh, hw) {
                return Err(Error::Shape(format!("conditioning map {uh}x{uw} does not match features {hh}x{hw}")));
            }
            let a = shared.forward(u).relu();
            gamma = Some(g.forward(&a));
            beta = Some(b.forward(&a));
        }
        if let (Some(film), Some(e)) = (&self.film, e) {
            let p = film.forward(e);
            let gc = p.narrow(1, 0, c).reshape(&[n, c, 1, 1]);
            let bc = p.narrow(1, c, c).reshape(&[n, c, 1, 1]);
            gamma = Some(match gamma {
                Some(gs) => gs.add(&gc),
                None => gc,
            });
            beta = Some(match beta {
                Some(bs) => bs.add(&bc),
                None => bc,
            });
        }
        debug_assert_eq!(c, self.channels);
        let mut out = match gamma {
            Some(g) => normed.mul(&g),
            None => normed,
        };
        if let Some(b) = beta {
            out = out.add(&b);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(vb: &VarBuilder, c: usize) -> Self {
        ResBlock { c1: Conv2d::new(&vb.pp("conv1"), c, c, 3, 1, 1, true), c2: Conv2d::new(&vb.pp("conv2"), c, c, 3, 1, 1, true) }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.c1.forward(&instance_norm(x, NORM_EPS).leaky_relu(SLOPE));
        let h = self.c2.forward(&instance_norm(&h, NORM_EPS).leaky_relu(SLOPE));
        x.add(&h)
    }
}

/// Single-head scaled dot-product self-attention over spatial positions.
#[derive(Clone, Debug)]
struct Attention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out: Conv2d,
    dk: usize,
}

impl Attention {
    fn new(vb: &VarBuilder, c: usize) -> Self {
        let dk = (c / 8).max(1);
        Attention {
            q: Conv2d::new(&vb.pp("q"), c, dk, 1, 1, 0, true),
            k: Conv2d::new(&vb.pp("k"), c, dk, 1, 1, 0, true),
            v: Conv2d::new(&vb.pp("v"), c, c, 1, 1, 0, true),
            out: Conv2d::new(&vb.pp("out"), c, c, 1, 1, 0, true),
            dk,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hn = instance_norm(x, NORM_EPS);
        let q = self.q.forward(&hn).reshape(&[n, self.dk, h * w]).t();
        let k = self.k.forward(&hn).reshape(&[n, self.dk, h * w]);
        let v = self.v.forward(&hn).reshape(&[n, c, h * w]).t();
        let attn = q.matmul(&k).scale(1.0 / (self.dk as f64).sqrt()).softmax_last();
        let y = attn.matmul(&v).t().reshape(&[n, c, h, w]);
        x.add(&self.out.forward(&y))
    }
}

#[derive(Clone, Debug)]
struct EdgeBranch {
    c1: Conv2d,
    c2: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    side: usize,
    up: Conv2d,
    reduce: Conv2d,
    modulation: Modulation,
    spade: bool,
}

/// Token-grid processor plus generator: every generator-side trainable parameter.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    pub processor: FeatureProcessor,
    encoder: Vec<Conv2d>,
    bottleneck: Vec<ResBlock>,
    attention: Option<Attention>,
    edges: Vec<EdgeBranch>,
    stages: Vec<DecoderStage>,
    embedding: Embedding,
    out: Conv2d,
}

impl Generator {
    /// Parameters live under `proc.` (processor) and `gen.` (everything else).
    pub fn new(vm: &VarMap, cfg: &GeneratorConfig, pcfg: &ProcessorConfig) -> Result<Self> {
        cfg.validate(pcfg)?;
        let vb = vm.builder();
        let processor = FeatureProcessor::new(&vb.pp("proc"), pcfg)?;
        let vb = vb.pp("gen");
        let ch = &cfg.encoder_channels;
        let depth = cfg.depth();
        let encoder = (1..=depth).map(|i| Conv2d::new(&vb.pp(format!("enc{i}")), ch[i - 1], ch[i], 4, 2, 1, true)).collect();
        let cb = ch[depth];
        let bottleneck = (0..cfg.bottleneck_blocks).map(|i| ResBlock::new(&vb.pp(format!("res{i}")), cb)).collect();
        let attention = cfg.attention.then(|| Attention::new(&vb.pp("attn"), cb));
        let e = cfg.edge_channels;
        let edges = cfg
            .edge_scales()
            .iter()
            .map(|s| {
                let v = vb.pp(format!("edge{s}"));
                EdgeBranch { c1: Conv2d::new(&v.pp("conv1"), 5, e, 3, 1, 1, true), c2: Conv2d::new(&v.pp("conv2"), e, e, 3, 1, 1, true) }
            })
            .collect();
        let cond_scales = pcfg.scales();
        let film_dim = cfg.use_film.then_some(cfg.embedding_dim);
        let mut stages = Vec::new();
        let mut cin = cb;
        for (j, side) in cfg.decoder_scales().into_iter().enumerate() {
            let level = depth - 1 - j;
            let (c, skip) = if level == 0 { (cfg.head_channels, 0) } else { (ch[level], ch[level]) };
            let spade = cfg.use_spade && cond_scales.contains(&side);
            let v = vb.pp(format!("dec{side}"));
            stages.push(DecoderStage {
                side,
                up: Conv2d::new(&v.pp("up"), cin, c, 3, 1, 1, true),
                reduce: Conv2d::new(&v.pp("reduce"), c + skip + e, c, 3, 1, 1, true),
                modulation: Modulation::new(&v, c, spade.then_some((pcfg.channels, cfg.spade_hidden)), film_dim),
                spade,
            });
            cin = c;
        }
        Ok(Generator {
            embedding: Embedding::new(&vb.pp("embedding"), cfg.num_classes + 1, cfg.embedding_dim),
            out: Conv2d::new(&vb.pp("out"), cin + 3, 3, 3, 1, 1, true),
            cfg: cfg.clone(),
            processor,
            encoder,
            bottleneck,
            attention,
            edges,
            stages,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Edge pyramid keyed by scale, finest first; zeros when the encoder is disabled.
    pub fn edge_encode(&self, hne: &Tensor) -> Vec<Tensor> {
        let (n, _, h, _) = hne.dims4();
        let full = Tensor::cat(&[hne.clone(), sobel_gradients(hne)], 1);
        self.cfg
            .edge_scales()
            .iter()
            .zip(&self.edges)
            .map(|(&s, br)| {
                if !self.cfg.use_edge_encoder {
                    return Tensor::zeros(&[n, self.cfg.edge_channels, s, s]);
                }
                let x = full.avg_pool2d(h / s);
                br.c2.forward(&br.c1.forward(&x).leaky_relu(SLOPE)).leaky_relu(SLOPE)
            })
            .collect()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.num_classes) {
            return Err(Error::InvalidToken {
                token: t.to_string(),
                valid: format!("0..={}", self.cfg.num_classes - 1),
            });
        }
        Ok(())
    }

    /// One forward pass. `hne: [n, 3, R, R]` in signed range; `tokens`, `drop_uni`
    /// and `drop_cls` carry one entry per sample.
    pub fn generate(
        &self,
        hne: &Tensor,
        cond: &MultiScaleConditioning,
        tokens: &[usize],
        drop_uni: &[bool],
        drop_cls: &[bool],
    ) -> Result<Tensor> {
        let (n, c, h, w) = hne.dims4();
        let r = self.cfg.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::Shape(format!("generator expects [n, 3, {r}, {r}], got {:?}", hne.shape())));
        }
        if tokens.len() != n || drop_uni.len() != n || drop_cls.len() != n {
            return Err(Error::Shape("tokens and drop flags need one entry per sample".into()));
        }
        self.check_tokens(tokens)?;
        let cond = cond.drop_samples(drop_uni);
        let ids: Vec<usize> = tokens.iter().zip(drop_cls).map(|(&t, &d)| if d { self.cfg.null_index() } else { t }).collect();
        let emb = self.cfg.use_film.then(|| self.embedding.forward(&ids));

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = hne.clone();
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(&x);
            if i > 0 {
                x = instance_norm(&x, NORM_EPS);
            }
            x = x.leaky_relu(SLOPE);
            skips.push(x.clone());
        }
        let half = self.bottleneck.len() / 2;
        for (i, b) in self.bottleneck.iter().enumerate() {
            if i == half {
                if let Some(a) = &self.attention {
                    x = a.forward(&x);
                }
            }
            x = b.forward(&x);
        }
        if self.bottleneck.len() == half {
            if let Some(a) = &self.attention {
                x = a.forward(&x);
            }
        }
        let edges = self.edge_encode(hne);
        let depth = self.cfg.depth();
        for (j, st) in self.stages.iter().enumerate() {
            let level = depth - 1 - j;
            let up = st.up.forward(&x.upsample_nearest2d(2));
            let mut parts = vec![up];
            if level > 0 {
                parts.push(skips[level - 1].clone());
            }
            parts.push(edges[level].clone());
            let merged = st.reduce.forward(&Tensor::cat(&parts, 1));
            let u = if st.spade {
                Some(cond.map_at(st.side).ok_or_else(|| Error::Shape(format!("no conditioning map at scale {}", st.side)))?)
            } else {
                None
            };
            x = st.modulation.forward(&merged, u, emb.as_ref())?.leaky_relu(SLOPE);
        }
        Ok(self.out.forward(&Tensor::cat(&[x, hne.clone()], 1)).tanh())
    }

    /// Processor then generator.
    pub fn forward_tokens(
        &self,
        hne: &Tensor,
        tokens_grid: &Tensor,
        tokens: &[usize],
        drop_uni: &[bool],
        drop_cls: &[bool],
    ) -> Result<Tensor> {
        let cond = self.processor.forward(tokens_grid)?;
        self.generate(hne, &cond, tokens, drop_uni, drop_cls)
    }
}

/// Trainable generator-side parameter count (generator, processor, embedding).
pub fn param_count(cfg: &GeneratorConfig, pcfg: &ProcessorConfig) -> Result<usize> {
    let vm = VarMap::new(0);
    Generator::new(&vm, cfg, pcfg)?;
    Ok(vm.num_params())
}
