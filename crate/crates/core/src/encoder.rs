//! The full encoder stack and its desk-scale training harness.
//!
//! Embedding streams are interleaved into the token template, rotated by
//! their 3D coordinates inside every attention layer, encoded by pre-LN
//! transformer blocks that alternate regular and shifted temporal windows,
//! normalized, and finally sparsified. A linear head over mean-pooled output
//! tokens stands in for the language-model decoder.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::{Adam, Graph, PairRotation, Rng, Tensor, Var};
use crate::rope::{assign_coordinates, Coord, RopeConfig, SpatialOffset};
use crate::synthdata::tensorfile::{read_records, write_records};
use crate::tokenizer::{
    audio_embed, build_input_sequence, keep_schedule, patch_embed, sparsify_output, token_budget,
    vc_tokens, AudioConv, Clip, ClipSpec, KeepSchedule, LabeledClip, Modality, StreamEmbeddings,
    TokenBudget, TokenLayout, TokenTemplate,
};
use crate::windowattn::{
    group_attention, linear, plan_for_layout, AttentionPlan, AttentionVars, Parity,
};

/// Mechanism switched off for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// VB coordinates are not offset, so they collide with Audio and VC.
    NoRemap,
    /// Only VB tokens, and only on kept steps.
    VbOnly,
    /// Every layer uses regular windows.
    NoShift,
    /// The mel input is replaced by zeros.
    AudioZero,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoRemap,
        Ablation::VbOnly,
        Ablation::NoShift,
        Ablation::AudioZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoRemap => "no-remap",
            Ablation::VbOnly => "vb-only",
            Ablation::NoShift => "no-shift",
            Ablation::AudioZero => "audio-zero",
        }
    }
}

impl Ablation {
    /// Spatial offset used for VB coordinates under this ablation.
    pub fn spatial_offset(self) -> SpatialOffset {
        match self {
            Ablation::NoRemap => SpatialOffset::Unshifted,
            _ => SpatialOffset::Shifted,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "ablate",
                    format!("unknown ablation `{s}` (none|no-remap|vb-only|no-shift|audio-zero)"),
                )
            })
    }
}

/// Which output tokens feed the readout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    All,
    VcOnly,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Pooling::All),
            "vc" => Ok(Pooling::VcOnly),
            _ => Err(Error::config(
                "pooling",
                format!("expected all|vc, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::All => "all",
            Pooling::VcOnly => "vc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub clip: ClipSpec,
    pub template: TokenTemplate,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Temporal group size in frames.
    pub group: usize,
    /// Channel pairs per head for the t, h and w axes.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    pub classes: usize,
    pub pooling: Pooling,
    pub vc_per_step: bool,
    pub ablation: Ablation,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    /// The tiny desk model on a 2 s, 8×8 clip.
    fn default() -> Self {
        Self {
            clip: ClipSpec {
                frames: 50,
                fps: 25,
                height: 8,
                width: 8,
                channels: 1,
                mel_bins: 8,
            },
            template: TokenTemplate {
                tau: 2,
                patch: 4,
                vb_fps: 2,
            },
            layers: 4,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            group: 16,
            rope_split: [4, 2, 2],
            rope_base: 10_000.0,
            classes: 2,
            pooling: Pooling::All,
            vc_per_step: false,
            ablation: Ablation::None,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.head_dim(),
            base: self.rope_base,
            split: self.rope_split,
            frequencies: Default::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide dim {}", self.heads, self.d_model),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.clip.channels == 0 || self.clip.mel_bins == 0 {
            return Err(Error::config(
                "channels",
                "channels and mel bins must be positive",
            ));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        self.rope().validate()?;
        self.template.geometry(&self.clip)?;
        let shifting = self.layers > 1 && self.ablation != Ablation::NoShift;
        let parity = if shifting {
            Parity::Shifted
        } else {
            Parity::Regular
        };
        crate::windowattn::make_plan(1, 1, self.group, self.template.tau, parity)?;
        Ok(())
    }

    pub fn budget(&self) -> Result<TokenBudget> {
        token_budget(&self.clip, &self.template)
    }

    /// Keep schedule and encoder input layout; VB-only keeps just the kept-step VB tokens.
    pub fn input_layout(&self) -> Result<(KeepSchedule, TokenLayout)> {
        let (steps, gh, gw) = self.template.geometry(&self.clip)?;
        let schedule = keep_schedule(
            steps,
            self.clip.fps,
            self.template.vb_fps,
            self.template.tau,
        )?;
        let layout = match self.ablation {
            Ablation::VbOnly => {
                TokenLayout::interleaved(steps, (gh, gw), false, false, |u| schedule.keep(u))
            }
            _ => TokenLayout::template(steps, (gh, gw)),
        };
        Ok((schedule, layout))
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)*
            }

            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)*
            }
        }
    };
}

param_group!(
    /// Patch, audio and VC embeddings.
    StemParams {
        patch_w,
        patch_b,
        audio_w1,
        audio_b1,
        audio_w2,
        audio_b2,
        vc,
    }
);

param_group!(BlockParams {
    ln1_g,
    ln1_b,
    wq,
    bq,
    wk,
    bk,
    wv,
    bv,
    wo,
    bo,
    ln2_g,
    ln2_b,
    mlp_w1,
    mlp_b1,
    mlp_w2,
    mlp_b2,
});

param_group!(NormParams { gamma, beta });

param_group!(HeadParams { w, b });

/// Every learnable tensor, generic over storage (`Tensor`, `Var`, `bool`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub stem: StemParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm: NormParams<T>,
    pub head: HeadParams<T>,
}

impl<T> Params<T> {
    /// Applies `f` to every entry with its dotted name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params {
            stem: self.stem.map("stem.", &mut f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}."), &mut f))
                .collect(),
            norm: self.norm.map("norm.", &mut f),
            head: self.head.map("head.", &mut f),
        }
    }

    /// `(name, entry)` in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.stem.collect("stem.", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}."), &mut out);
        }
        self.norm.collect("norm.", &mut out);
        self.head.collect("head.", &mut out);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.stem.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.collect_mut(&mut out);
        }
        self.norm.collect_mut(&mut out);
        self.head.collect_mut(&mut out);
        out
    }

    /// Same structure filled from `items` in canonical order.
    pub fn refill<U>(&self, items: impl IntoIterator<Item = U>) -> Result<Params<U>> {
        let mut it = items.into_iter();
        let mut short = false;
        let mut slots = Vec::new();
        for _ in self.entries() {
            match it.next() {
                Some(x) => slots.push(Some(x)),
                None => short = true,
            }
        }
        if short || it.next().is_some() {
            return Err(Error::Alignment(
                "parameter list does not match the model layout".into(),
            ));
        }
        let mut slots = slots.into_iter();
        Ok(self.map(|_, _| slots.next().flatten().expect("counted above")))
    }
}

impl Params<Tensor> {
    /// Truncated-normal weights, zero biases, unit layernorm scales.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let std = cfg.init_std;
        let shapes = Self::shapes(cfg);
        Ok(shapes.map(|name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if (leaf.starts_with("ln") && leaf.ends_with("_g")) || leaf == "gamma" {
                Tensor::ones(shape.clone())
            } else if shape.len() == 1 {
                Tensor::zeros(shape.clone())
            } else {
                Tensor::from_fn(shape.clone(), |_| rng.trunc_normal(std))
            }
        }))
    }

    /// Shapes of every parameter for `cfg`.
    pub fn shapes(cfg: &EncoderConfig) -> Params<Vec<usize>> {
        let d = cfg.d_model;
        let t = &cfg.template;
        let c = &cfg.clip;
        let hidden = d * cfg.mlp_ratio;
        let block = BlockParams {
            ln1_g: vec![d],
            ln1_b: vec![d],
            wq: vec![d, d],
            bq: vec![d],
            wk: vec![d, d],
            bk: vec![d],
            wv: vec![d, d],
            bv: vec![d],
            wo: vec![d, d],
            bo: vec![d],
            ln2_g: vec![d],
            ln2_b: vec![d],
            mlp_w1: vec![d, hidden],
            mlp_b1: vec![hidden],
            mlp_w2: vec![hidden, d],
            mlp_b2: vec![d],
        };
        let vc_rows = if cfg.vc_per_step {
            c.frames / t.tau.max(1)
        } else {
            1
        };
        Params {
            stem: StemParams {
                patch_w: vec![t.tau * t.patch * t.patch * c.channels, d],
                patch_b: vec![d],
                audio_w1: vec![d, c.mel_bins, 2],
                audio_b1: vec![d],
                audio_w2: vec![d, d, t.tau],
                audio_b2: vec![d],
                vc: vec![vc_rows, d],
            },
            blocks: vec![block; cfg.layers],
            norm: NormParams {
                gamma: vec![d],
                beta: vec![d],
            },
            head: HeadParams {
                w: vec![d, cfg.classes],
                b: vec![cfg.classes],
            },
        }
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }

    /// Writes every tensor as one named record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<(String, &Tensor)> = self.entries();
        write_records(path, &records)
    }

    /// Reads tensors saved by [`Params::save`] into the layout of `cfg`.
    pub fn load(path: &Path, cfg: &EncoderConfig) -> Result<Self> {
        let records = read_records(path)?;
        let shapes = Self::shapes(cfg);
        let expected = shapes.entries();
        if records.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model needs {}",
                records.len(),
                expected.len()
            )));
        }
        for ((name, shape), (rname, t)) in expected.iter().zip(&records) {
            if name != rname || t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint record `{rname}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        shapes.refill(records.into_iter().map(|(_, t)| t))
    }
}

/// Closed-form parameter count.
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    let t = &cfg.template;
    let c = &cfg.clip;
    let vc_rows = if cfg.vc_per_step { c.frames / t.tau } else { 1 };
    let stem = (t.tau * t.patch * t.patch * c.channels + 1) * d
        + (2 * c.mel_bins + 1) * d
        + (t.tau * d + 1) * d
        + vc_rows * d;
    let block = 4 * d + 4 * (d * d + d) + 2 * cfg.mlp_ratio * d * d + cfg.mlp_ratio * d + d;
    stem + cfg.layers * block + 2 * d + (d + 1) * cfg.classes
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Freeze {
    /// Encoder and head both train.
    #[default]
    Nothing,
    /// Only the readout head trains.
    Encoder,
}

impl FromStr for Freeze {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Freeze::Nothing),
            "encoder" => Ok(Freeze::Encoder),
            _ => Err(Error::config(
                "freeze",
                format!("expected none|encoder, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for Freeze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Freeze::Nothing => "none",
            Freeze::Encoder => "encoder",
        })
    }
}

impl Freeze {
    pub fn mask(self, cfg: &EncoderConfig) -> Params<bool> {
        Params::shapes(cfg).map(|name, _| match self {
            Freeze::Nothing => true,
            Freeze::Encoder => name.starts_with("head."),
        })
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// All input tokens after the final layernorm.
    pub encoded: Var,
    /// The sparsified subset.
    pub output: Var,
}

/// An encoder with its static token structure precomputed.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    steps: usize,
    schedule: KeepSchedule,
    layout_in: TokenLayout,
    layout_out: TokenLayout,
    keep: Vec<usize>,
    coords: Vec<Coord>,
    rotation: Arc<PairRotation>,
    plans: Vec<AttentionPlan>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (schedule, layout_in) = config.input_layout()?;
        let steps = layout_in.steps();
        let coords = assign_coordinates(&layout_in, config.ablation.spatial_offset())?;
        let rotation = config.rope().rotation(&coords)?;
        let shifting = config.ablation != Ablation::NoShift;
        let plans = (0..config.layers)
            .map(|l| {
                plan_for_layout(
                    &layout_in,
                    config.group,
                    config.template.tau,
                    Parity::for_layer(l, shifting),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (keep, layout_out) = sparsify_output(&layout_in, &schedule)?;
        Ok(Self {
            config,
            steps,
            schedule,
            layout_in,
            layout_out,
            keep,
            coords,
            rotation,
            plans,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn schedule(&self) -> &KeepSchedule {
        &self.schedule
    }

    pub fn input_layout(&self) -> &TokenLayout {
        &self.layout_in
    }

    pub fn output_layout(&self) -> &TokenLayout {
        &self.layout_out
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn plans(&self) -> &[AttentionPlan] {
        &self.plans
    }

    pub fn init(&self, seed: u64) -> Result<Params<Tensor>> {
        Params::init(&self.config, seed)
    }

    /// Binds `params` into `g`; entries with `trainable == false` become constants.
    pub fn bind(
        &self,
        g: &mut Graph,
        params: &Params<Tensor>,
        trainable: Option<&Params<bool>>,
    ) -> Params<Var> {
        let flags: Vec<bool> = match trainable {
            Some(t) => t.entries().into_iter().map(|(_, &b)| b).collect(),
            None => vec![true; params.entries().len()],
        };
        let mut i = 0;
        params.map(|_, t| {
            let v = if flags[i] {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            i += 1;
            v
        })
    }

    /// Embeds a clip into the interleaved input sequence `[N_in × d]`.
    pub fn embed(&self, g: &mut Graph, p: &Params<Var>, clip: &Clip) -> Result<Var> {
        clip.conforms(&self.config.clip)?;
        let t = &self.config.template;
        let vb = patch_embed(
            g,
            &clip.frames,
            t.patch,
            t.tau,
            p.stem.patch_w,
            p.stem.patch_b,
        )?;
        let streams = if self.config.ablation == Ablation::VbOnly {
            StreamEmbeddings {
                vb: Some(vb),
                ..Default::default()
            }
        } else {
            let mel = if self.config.ablation == Ablation::AudioZero {
                Tensor::zeros(clip.mel.shape().to_vec())
            } else {
                clip.mel.clone()
            };
            let mel = g.constant(mel);
            let conv = AudioConv {
                w1: p.stem.audio_w1,
                b1: p.stem.audio_b1,
                w2: p.stem.audio_w2,
                b2: p.stem.audio_b2,
            };
            StreamEmbeddings {
                audio: Some(audio_embed(g, mel, &conv, t.tau)?),
                vc: Some(vc_tokens(g, p.stem.vc, self.steps)?),
                vb: Some(vb),
            }
        };
        build_input_sequence(g, &streams, &self.layout_in)
    }

    /// Transformer blocks and the final layernorm over an embedded sequence.
    pub fn encode_embedded(&self, g: &mut Graph, p: &Params<Var>, x: Var) -> Result<Var> {
        let mut x = x;
        for (b, plan) in p.blocks.iter().zip(&self.plans) {
            let h = g.layernorm(x, b.ln1_g, b.ln1_b)?;
            let attn = AttentionVars {
                wq: b.wq,
                bq: b.bq,
                wk: b.wk,
                bk: b.bk,
                wv: b.wv,
                bv: b.bv,
                wo: b.wo,
                bo: b.bo,
            };
            let h = group_attention(g, h, plan, &self.rotation, self.config.heads, &attn)?;
            x = g.add(x, h)?;
            let h = g.layernorm(x, b.ln2_g, b.ln2_b)?;
            let h = linear(g, h, b.mlp_w1, b.mlp_b1)?;
            let h = g.gelu(h);
            let h = linear(g, h, b.mlp_w2, b.mlp_b2)?;
            x = g.add(x, h)?;
        }
        g.layernorm(x, p.norm.gamma, p.norm.beta)
    }

    pub fn forward(&self, g: &mut Graph, p: &Params<Var>, clip: &Clip) -> Result<Forward> {
        let x = self.embed(g, p, clip)?;
        let encoded = self.encode_embedded(g, p, x)?;
        let output = g.gather_rows(encoded, &self.keep)?;
        Ok(Forward { encoded, output })
    }

    /// Pooled linear readout `[1 × classes]` over sparsified features.
    pub fn readout(&self, g: &mut Graph, p: &Params<Var>, output: Var) -> Result<Var> {
        let pooled = match self.config.pooling {
            Pooling::All => {
                if g.shape(output).first().copied().unwrap_or(0) == 0 {
                    return Err(Error::Contract(
                        "readout needs at least one output token".into(),
                    ));
                }
                g.mean_rows(output)?
            }
            Pooling::VcOnly => {
                let rows = self.layout_out.indices_of(Modality::VisualContinuous);
                if rows.is_empty() {
                    return Err(Error::Contract(
                        "VC pooling on a sequence without VC tokens".into(),
                    ));
                }
                let vc = g.gather_rows(output, &rows)?;
                g.mean_rows(vc)?
            }
        };
        linear(g, pooled, p.head.w, p.head.b)
    }

    /// Logits for one clip, evaluated without gradients.
    pub fn logits(&self, params: &Params<Tensor>, clip: &Clip) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let frozen = params.map(|_, _| false);
        let p = self.bind(&mut g, params, Some(&frozen));
        let fwd = self.forward(&mut g, &p, clip)?;
        let logits = self.readout(&mut g, &p, fwd.output)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Encoded and sparsified features for one clip.
    pub fn features(&self, params: &Params<Tensor>, clip: &Clip) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let frozen = params.map(|_, _| false);
        let p = self.bind(&mut g, params, Some(&frozen));
        let fwd = self.forward(&mut g, &p, clip)?;
        Ok((g.value(fwd.encoded).clone(), g.value(fwd.output).clone()))
    }

    /// Step-level Jacobian sparsity of the encoder body: entry `v * U + u`
    /// is true when some embedded token at step `v` moves some encoded token
    /// at step `u` by more than `tol`. Each output step is probed with one
    /// random cotangent drawn from `seed`.
    pub fn step_dependence(
        &self,
        params: &Params<Tensor>,
        clip: &Clip,
        seed: u64,
        tol: f64,
    ) -> Result<Vec<bool>> {
        let steps = self.steps;
        let step_of = self.layout_in.step_of_tokens();
        let frozen = params.map(|_, _| false);
        let embedded = {
            let mut g = Graph::new();
            let p = self.bind(&mut g, params, Some(&frozen));
            let x = self.embed(&mut g, &p, clip)?;
            g.value(x).clone()
        };
        let mut rng = Rng::new(seed);
        let mut dep = vec![false; steps * steps];
        for u in 0..steps {
            let rows: Vec<usize> = (0..step_of.len()).filter(|&i| step_of[i] == u).collect();
            if rows.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let p = self.bind(&mut g, params, Some(&frozen));
            let x = g.param(embedded.clone());
            let y = self.encode_embedded(&mut g, &p, x)?;
            let y = g.gather_rows(y, &rows)?;
            let shape = g.shape(y).to_vec();
            let probe = g.constant(Tensor::from_fn(shape, |_| rng.normal()));
            let z = g.mul(y, probe)?;
            let loss = g.sum(z);
            let grads = g.backward(loss)?;
            let gx = grads.get_or_zeros(x, embedded.shape());
            let d = embedded.shape()[1];
            for (i, &v) in step_of.iter().enumerate() {
                if gx.data()[i * d..(i + 1) * d].iter().any(|g| g.abs() > tol) {
                    dep[v * steps + u] = true;
                }
            }
        }
        Ok(dep)
    }
}

/// Optimizer settings for [`TrainState`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    /// Linear learning-rate ramp over the first `warmup` updates.
    pub warmup: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
    pub freeze: Freeze,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 50,
            clip_norm: 1.0,
            batch: 16,
            steps: 300,
            freeze: Freeze::Nothing,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params<Tensor>,
    trainable: Params<bool>,
    adam: Adam,
    lr: f64,
    warmup: usize,
    clip_norm: f64,
    step: usize,
    rng: Rng,
}

impl TrainState {
    pub fn new(encoder: &Encoder, params: Params<Tensor>, opts: &TrainOptions) -> Self {
        let shapes: Vec<&[usize]> = params.entries().iter().map(|(_, t)| t.shape()).collect();
        let adam = Adam::new(opts.lr, &shapes);
        Self {
            trainable: opts.freeze.mask(encoder.config()),
            params,
            adam,
            lr: opts.lr,
            warmup: opts.warmup,
            clip_norm: opts.clip_norm,
            step: 0,
            rng: Rng::derive(opts.seed, 0x7472_6169_6e),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn trainable(&self) -> &Params<bool> {
        &self.trainable
    }

    /// Mean cross-entropy over `batch`, then one Adam update with the mean gradient.
    pub fn train_step(&mut self, encoder: &Encoder, batch: &[&LabeledClip]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let flags: Vec<bool> = self
            .trainable
            .entries()
            .into_iter()
            .map(|(_, &b)| b)
            .collect();
        let mut total: Vec<Tensor> = self
            .params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut loss_sum = 0.0;
        for example in batch {
            if example.label >= encoder.config().classes {
                return Err(Error::Contract(format!(
                    "label {} outside {} classes",
                    example.label,
                    encoder.config().classes
                )));
            }
            let mut g = Graph::new();
            let p = encoder.bind(&mut g, &self.params, Some(&self.trainable));
            let fwd = encoder.forward(&mut g, &p, &example.clip)?;
            let logits = encoder.readout(&mut g, &p, fwd.output)?;
            let loss = g.cross_entropy(logits, &[example.label])?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    msg: format!("loss is {value} (logits {:?})", g.value(logits).data()),
                });
            }
            loss_sum += value;
            let grads = g.backward(loss)?;
            for (i, (v, acc)) in p.entries().into_iter().zip(total.iter_mut()).enumerate() {
                if flags[i] {
                    if let Some(gr) = grads.get(*v.1) {
                        acc.add_assign(gr);
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let mut norm2 = 0.0;
        for t in &mut total {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
            norm2 += t.data().iter().map(|x| x * x).sum::<f64>();
        }
        if !norm2.is_finite() {
            return Err(Error::Training {
                step: self.step,
                msg: "non-finite gradient".into(),
            });
        }
        let norm = norm2.sqrt();
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let shrink = self.clip_norm / norm;
            for t in &mut total {
                t.data_mut().iter_mut().for_each(|x| *x *= shrink);
            }
        }
        self.adam.lr = if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup as f64).min(1.0)
        };
        let mut refs = self.params.entries_mut();
        self.adam.step(&mut refs, &total, &flags)?;
        self.step += 1;
        Ok(loss_sum * scale)
    }

    /// Runs `opts.steps` updates over shuffled epochs of `data`; returns the loss curve.
    pub fn fit(
        &mut self,
        encoder: &Encoder,
        data: &[LabeledClip],
        opts: &TrainOptions,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if data.is_empty() || opts.batch == 0 {
            return Err(Error::Contract(
                "training needs data and a positive batch size".into(),
            ));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(opts.steps);
        for _ in 0..opts.steps {
            let mut batch = Vec::with_capacity(opts.batch);
            while batch.len() < opts.batch.min(data.len()) {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    self.rng.shuffle(&mut order);
                }
                batch.push(&data[order.pop().expect("refilled above")]);
            }
            let loss = self.train_step(encoder, &batch)?;
            on_step(self.step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Held-out metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub examples: usize,
    pub correct: usize,
    pub loss: f64,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.correct as f64 / self.examples as f64
        }
    }
}

pub fn evaluate(
    encoder: &Encoder,
    params: &Params<Tensor>,
    data: &[LabeledClip],
) -> Result<Metrics> {
    let mut correct = 0;
    let mut loss = 0.0;
    for ex in data {
        let logits = encoder.logits(params, &ex.clip)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[ex.label];
        // first maximum wins ties
        let pred = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &l)| if l > logits[best] { i } else { best });
        if pred == ex.label {
            correct += 1;
        }
    }
    Ok(Metrics {
        examples: data.len(),
        correct,
        loss: if data.is_empty() {
            0.0
        } else {
            loss / data.len() as f64
        },
    })
}

/// File names inside a checkpoint directory.
pub const CHECKPOINT_PARAMS: &str = "params.oetf";
pub const CHECKPOINT_CONFIG: &str = "config.txt";

/// Writes `params` and the configuration document into `dir`.
pub fn save_checkpoint(dir: &Path, params: &Params<Tensor>, config_doc: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    params.save(&dir.join(CHECKPOINT_PARAMS))?;
    fs::write(dir.join(CHECKPOINT_CONFIG), config_doc)?;
    Ok(())
}

/// Reads the configuration document of a checkpoint directory.
pub fn read_checkpoint_config(dir: &Path) -> Result<String> {
    Ok(fs::read_to_string(dir.join(CHECKPOINT_CONFIG))?)
}

pub fn load_checkpoint_params(dir: &Path, cfg: &EncoderConfig) -> Result<Params<Tensor>> {
    Params::load(&dir.join(CHECKPOINT_PARAMS), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::fd_gradcheck;

    pub(crate) fn tiny() -> EncoderConfig {
        EncoderConfig {
            clip: ClipSpec {
                frames: 4,
                fps: 4,
                height: 8,
                width: 8,
                channels: 1,
                mel_bins: 4,
            },
            template: TokenTemplate {
                tau: 2,
                patch: 4,
                vb_fps: 1,
            },
            layers: 2,
            d_model: 16,
            heads: 2,
            mlp_ratio: 4,
            group: 4,
            rope_split: [2, 1, 1],
            classes: 3,
            ..EncoderConfig::default()
        }
    }

    pub(crate) fn random_clip(cfg: &EncoderConfig, seed: u64) -> Clip {
        let mut rng = Rng::new(seed);
        let c = &cfg.clip;
        Clip {
            frames: Tensor::from_fn([c.frames, c.height, c.width, c.channels], |_| rng.uniform()),
            mel: Tensor::from_fn([c.mel_frames(), c.mel_bins], |_| rng.normal()),
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = tiny();
        let a = Params::init(&cfg, 3).unwrap();
        let b = Params::init(&cfg, 3).unwrap();
        let c = Params::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.blocks[0].ln1_g, Tensor::ones([16]));
        assert_eq!(a.blocks[1].bq, Tensor::zeros([16]));
        assert_eq!(a.norm.gamma, Tensor::ones([16]));
        assert!(a.blocks[0].wq.data().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny();
        let p = Params::init(&cfg, 0).unwrap();
        // stem (32+1)·16 + (8+1)·16 + (32+1)·16 + 16, blocks 2·(64 + 4·272 + 2048 + 64 + 16),
        // final norm 32, head 17·3
        let by_hand = 528 + 144 + 528 + 16 + 2 * (64 + 1088 + 2048 + 80) + 32 + 51;
        assert_eq!(p.count(), by_hand);
        assert_eq!(parameter_count(&cfg), by_hand);
        let per_step = EncoderConfig {
            vc_per_step: true,
            ..EncoderConfig::default()
        };
        assert_eq!(
            parameter_count(&per_step),
            Params::init(&per_step, 0).unwrap().count()
        );
    }

    #[test]
    fn zero_depth_is_normalized_embedding() {
        let cfg = EncoderConfig {
            layers: 0,
            ..tiny()
        };
        let enc = Encoder::new(cfg).unwrap();
        let params = enc.init(1).unwrap();
        let clip = random_clip(enc.config(), 2);
        let mut g = Graph::new();
        let p = enc.bind(&mut g, &params, None);
        let x = enc.embed(&mut g, &p, &clip).unwrap();
        let ln = g.layernorm(x, p.norm.gamma, p.norm.beta).unwrap();
        let fwd = enc.forward(&mut g, &p, &clip).unwrap();
        assert_eq!(g.value(ln), g.value(fwd.encoded));
        assert_eq!(g.shape(fwd.output)[0], enc.output_layout().len());
    }

    #[test]
    fn output_lengths_match_budget() {
        for cfg in [tiny(), EncoderConfig::default()] {
            let enc = Encoder::new(cfg.clone()).unwrap();
            let budget = cfg.budget().unwrap();
            let (enc_in, out) = enc
                .features(&enc.init(0).unwrap(), &random_clip(&cfg, 0))
                .unwrap();
            assert_eq!(enc_in.shape()[0], budget.total_in);
            assert_eq!(out.shape()[0], budget.total_out);
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let enc = Encoder::new(tiny()).unwrap();
        for seed in 0..100 {
            let params = enc.init(seed).unwrap();
            let clip = random_clip(enc.config(), 1000 + seed);
            let a = enc.features(&params, &clip).unwrap();
            let b = enc.features(&params, &clip).unwrap();
            assert!(a.0.is_finite() && a.1.is_finite());
            assert_eq!(a.0.data(), b.0.data());
        }
    }

    #[test]
    fn no_remap_is_rejected() {
        let cfg = EncoderConfig {
            ablation: Ablation::NoRemap,
            ..tiny()
        };
        assert!(matches!(
            Encoder::new(cfg),
            Err(Error::CoordinateCollision { .. })
        ));
    }

    #[test]
    fn vb_only_layout() {
        let cfg = EncoderConfig {
            ablation: Ablation::VbOnly,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        assert_eq!(enc.input_layout().len(), 4 * 4);
        assert_eq!(enc.output_layout().len(), 16);
        let logits = enc
            .logits(&enc.init(0).unwrap(), &random_clip(enc.config(), 0))
            .unwrap();
        assert_eq!(logits.len(), 2);
        let vc = EncoderConfig {
            pooling: Pooling::VcOnly,
            ..enc.config().clone()
        };
        let enc = Encoder::new(vc).unwrap();
        assert!(matches!(
            enc.logits(&enc.init(0).unwrap(), &random_clip(enc.config(), 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn readout_pooling_invariances() {
        let enc = Encoder::new(tiny()).unwrap();
        let params = enc.init(5).unwrap();
        let mut rng = Rng::new(9);
        let row = Tensor::from_fn([1, 16], |_| rng.normal());
        let run = |rows: Tensor| {
            let mut g = Graph::new();
            let p = enc.bind(&mut g, &params, None);
            let x = g.constant(rows);
            let l = enc.readout(&mut g, &p, x).unwrap();
            g.value(l).clone()
        };
        let single = run(row.clone());
        let direct = {
            let h = &params.head;
            Tensor::from_fn([1, 3], |j| {
                h.b.data()[j]
                    + (0..16)
                        .map(|k| row.data()[k] * h.w.data()[k * 3 + j])
                        .sum::<f64>()
            })
        };
        assert!(single.max_abs_diff(&direct) < 1e-15);
        let set = Tensor::from_fn([3, 16], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let doubled = Tensor::from_fn([6, 16], |i| set.data()[i % 48]);
        assert!(run(set).max_abs_diff(&run(doubled)) < 1e-15);
    }

    #[test]
    fn readout_gradcheck() {
        let enc = Encoder::new(tiny()).unwrap();
        let params = enc.init(6).unwrap();
        let mut rng = Rng::new(10);
        let feats = Tensor::from_fn([5, 16], |_| rng.normal());
        let head = vec![params.head.w.clone(), params.head.b.clone(), feats];
        let err = fd_gradcheck(
            |g, v| {
                let mut p = enc.bind(g, &params, None);
                p.head.w = v[0];
                p.head.b = v[1];
                let l = enc.readout(g, &p, v[2])?;
                g.cross_entropy(l, &[2])
            },
            &head,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn end_to_end_gradcheck() {
        let cfg = EncoderConfig {
            init_std: 0.3,
            ..tiny()
        };
        let enc = Encoder::new(cfg).unwrap();
        let params = enc.init(7).unwrap();
        let clip = random_clip(enc.config(), 8);
        let flat: Vec<Tensor> = params
            .entries()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let err = fd_gradcheck(
            |g, v| {
                let p = params.refill(v.iter().copied())?;
                let fwd = enc.forward(g, &p, &clip)?;
                let l = enc.readout(g, &p, fwd.output)?;
                g.cross_entropy(l, &[1])
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn labeled(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<LabeledClip> {
        (0..n)
            .map(|i| LabeledClip {
                clip: random_clip(cfg, seed + i as u64),
                label: i % cfg.classes,
            })
            .collect()
    }

    #[test]
    fn frozen_encoder_is_bitwise_unchanged() {
        let enc = Encoder::new(tiny()).unwrap();
        let data = labeled(enc.config(), 6, 20);
        let opts = TrainOptions {
            lr: 1e-2,
            batch: 3,
            steps: 5,
            freeze: Freeze::Encoder,
            seed: 1,
            ..Default::default()
        };
        let init = enc.init(2).unwrap();
        let mut state = TrainState::new(&enc, init.clone(), &opts);
        state.fit(&enc, &data, &opts, |_, _| {}).unwrap();
        let trainable = state.trainable().clone();
        for (((name, a), (_, b)), (_, &t)) in init
            .entries()
            .into_iter()
            .zip(state.params.entries())
            .zip(trainable.entries())
        {
            if t {
                assert_ne!(a, b, "{name} should train");
            } else {
                assert_eq!(a.data(), b.data(), "{name} changed");
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let enc = Encoder::new(tiny()).unwrap();
        let data = labeled(enc.config(), 4, 30);
        let opts = TrainOptions {
            lr: 0.0,
            batch: 2,
            steps: 3,
            ..TrainOptions::default()
        };
        let init = enc.init(3).unwrap();
        let mut state = TrainState::new(&enc, init.clone(), &opts);
        let losses = state.fit(&enc, &data, &opts, |_, _| {}).unwrap();
        assert_eq!(state.params, init);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let enc = Encoder::new(tiny()).unwrap();
        let data = labeled(enc.config(), 8, 40);
        let opts = TrainOptions {
            lr: 3e-3,
            batch: 4,
            steps: 6,
            ..TrainOptions::default()
        };
        let run = || {
            let mut s = TrainState::new(&enc, enc.init(4).unwrap(), &opts);
            let l = s.fit(&enc, &data, &opts, |_, _| {}).unwrap();
            (l, s.params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let params = Params::init(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, "layers=2\n").unwrap();
        let back = load_checkpoint_params(dir.path(), &cfg).unwrap();
        for ((_, a), (_, b)) in params.entries().into_iter().zip(back.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(read_checkpoint_config(dir.path()).unwrap(), "layers=2\n");
        let wider = EncoderConfig { d_model: 32, ..cfg };
        assert!(matches!(
            load_checkpoint_params(dir.path(), &wider),
            Err(Error::Format(_))
        ));
    }
}
