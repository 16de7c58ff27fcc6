//! The three-stream token template.
//!
//! A clip is cut into tubelet steps of `tau` frames. Each step contributes
//! one Audio token, one Visual Continuous (VC) token and one Visual Base (VB)
//! token per spatial patch, in that order. After encoding, a keep-schedule
//! drops VB tokens on most steps while every Audio and VC token survives.

use std::fmt;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::rope::Coord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    VisualContinuous,
    VisualBase,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "A",
            Modality::VisualContinuous => "VC",
            Modality::VisualBase => "VB",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Shape of one clip. Durations are carried as a whole frame count; the mel
/// stream runs at twice the video frame rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub frames: usize,
    pub fps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mel_bins: usize,
}

impl ClipSpec {
    pub fn seconds(&self) -> f64 {
        self.frames as f64 / self.fps as f64
    }

    pub fn mel_rate(&self) -> usize {
        2 * self.fps
    }

    pub fn mel_frames(&self) -> usize {
        2 * self.frames
    }
}

/// Raw clip arrays: `frames: [F × H × W × C]`, `mel: [2F × mel_bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor,
    pub mel: Tensor,
}

impl Clip {
    /// Checks both arrays against `spec`.
    pub fn conforms(&self, spec: &ClipSpec) -> Result<()> {
        let want = [spec.frames, spec.height, spec.width, spec.channels];
        if self.frames.shape() != want {
            return Err(Error::Dimension {
                op: "clip frames",
                lhs: self.frames.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let want = [spec.mel_frames(), spec.mel_bins];
        if self.mel.shape() != want {
            return Err(Error::Dimension {
                op: "clip mel",
                lhs: self.mel.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: Clip,
    pub label: usize,
}

/// Tokenizer settings shared by the encoder and the budget report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenTemplate {
    pub tau: usize,
    pub patch: usize,
    pub vb_fps: usize,
}

impl TokenTemplate {
    /// Checks the clip against the template and returns `(steps, grid_h, grid_w)`.
    pub fn geometry(&self, clip: &ClipSpec) -> Result<(usize, usize, usize)> {
        if clip.fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        if self.tau == 0 {
            return Err(Error::config("tau", "must be positive"));
        }
        if clip.frames == 0 || !clip.frames.is_multiple_of(self.tau) {
            return Err(Error::config(
                "frames",
                format!(
                    "{} frames is not a positive multiple of tau={}",
                    clip.frames, self.tau
                ),
            ));
        }
        if self.patch == 0
            || !clip.height.is_multiple_of(self.patch)
            || !clip.width.is_multiple_of(self.patch)
        {
            let key = if self.patch == 0 || !clip.height.is_multiple_of(self.patch) {
                "height"
            } else {
                "width"
            };
            return Err(Error::config(
                key,
                format!(
                    "{}x{} frames are not divisible into {p}x{p} patches",
                    clip.height,
                    clip.width,
                    p = self.patch
                ),
            ));
        }
        if self.vb_fps * self.tau > clip.fps {
            return Err(Error::config(
                "vb_fps",
                format!(
                    "{} exceeds the step rate {}/{}",
                    self.vb_fps, clip.fps, self.tau
                ),
            ));
        }
        Ok((
            clip.frames / self.tau,
            clip.height / self.patch,
            clip.width / self.patch,
        ))
    }
}

/// One slot in a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub modality: Modality,
    pub step: usize,
    /// Native `(row, col)` patch index for VB tokens.
    pub patch: Option<(usize, usize)>,
}

/// Modality/step bookkeeping for a token sequence, without the embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    tokens: Vec<Token>,
    steps: usize,
    grid: (usize, usize),
}

impl TokenLayout {
    /// Full template: every stream at every step.
    pub fn template(steps: usize, grid: (usize, usize)) -> Self {
        Self::interleaved(steps, grid, true, true, |_| true)
    }

    /// Per step: Audio (if `audio`), VC (if `vc`), then the VB patches in
    /// row-major order when `vb_at(step)` holds.
    pub fn interleaved(
        steps: usize,
        grid: (usize, usize),
        audio: bool,
        vc: bool,
        vb_at: impl Fn(usize) -> bool,
    ) -> Self {
        let mut tokens = Vec::with_capacity(steps * (2 + grid.0 * grid.1));
        for step in 0..steps {
            if audio {
                tokens.push(Token {
                    modality: Modality::Audio,
                    step,
                    patch: None,
                });
            }
            if vc {
                tokens.push(Token {
                    modality: Modality::VisualContinuous,
                    step,
                    patch: None,
                });
            }
            if vb_at(step) {
                for r in 0..grid.0 {
                    for c in 0..grid.1 {
                        tokens.push(Token {
                            modality: Modality::VisualBase,
                            step,
                            patch: Some((r, c)),
                        });
                    }
                }
            }
        }
        Self {
            tokens,
            steps,
            grid,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patches_per_step(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn step_of_tokens(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.step).collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.modality == modality)
            .count()
    }

    /// Indices of tokens with the given modality.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].modality == modality)
            .collect()
    }

    fn subset(&self, keep: &[usize]) -> Self {
        Self {
            tokens: keep.iter().map(|&i| self.tokens[i]).collect(),
            steps: self.steps,
            grid: self.grid,
        }
    }
}

/// Embeddings plus per-token modality, step and coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub layout: TokenLayout,
    pub coords: Vec<Coord>,
}

/// Which tubelet steps keep their VB tokens after encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepSchedule {
    keep: Vec<bool>,
    vb_fps: usize,
}

impl KeepSchedule {
    pub fn from_mask(keep: Vec<bool>, vb_fps: usize) -> Self {
        Self { keep, vb_fps }
    }

    pub fn keep(&self, step: usize) -> bool {
        self.keep.get(step).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn vb_fps(&self) -> usize {
        self.vb_fps
    }

    pub fn kept_steps(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&u| self.keep[u]).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Floor-crossing VB keep rule: step `u` is kept when `⌊u·r⌋` advances,
/// with `r = vb_fps·tau / fps` kept steps per step. When `fps / (tau·vb_fps)`
/// is an integer this keeps every such multiple, i.e. `t mod (fps/vb_fps) = 0`
/// at frame granularity.
pub fn keep_schedule(steps: usize, fps: usize, vb_fps: usize, tau: usize) -> Result<KeepSchedule> {
    if fps == 0 || tau == 0 {
        return Err(Error::config("fps", "fps and tau must be positive"));
    }
    if vb_fps * tau > fps {
        return Err(Error::config(
            "vb_fps",
            format!("{vb_fps} exceeds the step rate {fps}/{tau}"),
        ));
    }
    let level = |u: usize| (u * vb_fps * tau) / fps;
    let keep = (0..steps)
        .map(|u| u == 0 || level(u) != level(u - 1))
        .collect();
    Ok(KeepSchedule { keep, vb_fps })
}

/// Closed-form token counts before and after sparsification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenBudget {
    pub steps: usize,
    pub audio_tokens: usize,
    pub vc_tokens: usize,
    pub vb_in_tokens: usize,
    pub vb_out_tokens: usize,
    pub total_in: usize,
    pub total_out: usize,
}

pub fn token_budget(clip: &ClipSpec, template: &TokenTemplate) -> Result<TokenBudget> {
    let (steps, gh, gw) = template.geometry(clip)?;
    let per_step = gh * gw;
    // ⌊(U-1)·r⌋ + 1 distinct floor levels are visited over steps 0..U
    let kept = if steps == 0 {
        0
    } else {
        (steps - 1) * template.vb_fps * template.tau / clip.fps + 1
    };
    let vb_in = steps * per_step;
    let vb_out = kept * per_step;
    Ok(TokenBudget {
        steps,
        audio_tokens: steps,
        vc_tokens: steps,
        vb_in_tokens: vb_in,
        vb_out_tokens: vb_out,
        total_in: 2 * steps + vb_in,
        total_out: 2 * steps + vb_out,
    })
}

/// Rearranges `frames: [F × H × W × C]` into one row per (step, patch row,
/// patch col), each row the flattened `tau × patch × patch × C` tubelet.
pub fn patchify(frames: &Tensor, patch: usize, tau: usize) -> Result<Tensor> {
    let (f, h, w, c) = match frames.shape() {
        &[f, h, w, c] => (f, h, w, c),
        s => {
            return Err(Error::shape(
                "patch_embed",
                format!("frames must be F×H×W×C, got {s:?}"),
            ))
        }
    };
    if tau == 0 || f % tau != 0 {
        return Err(Error::config(
            "frames",
            format!("{f} frames not divisible by tau={tau}"),
        ));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(
            "patch",
            format!("{h}x{w} frames not divisible into {patch}x{patch} patches"),
        ));
    }
    let (steps, gh, gw) = (f / tau, h / patch, w / patch);
    let row_len = tau * patch * patch * c;
    let src = frames.data();
    let mut out = Vec::with_capacity(steps * gh * gw * row_len);
    for u in 0..steps {
        for pr in 0..gh {
            for pc in 0..gw {
                for dt in 0..tau {
                    let frame = u * tau + dt;
                    for py in 0..patch {
                        let y = pr * patch + py;
                        let start = ((frame * h + y) * w + pc * patch) * c;
                        out.extend_from_slice(&src[start..start + patch * c]);
                    }
                }
            }
        }
    }
    Tensor::new([steps * gh * gw, row_len], out)
}

/// VB embeddings: a learned linear map of each flattened tubelet.
/// `weight: [tau·patch²·C × d]`, `bias: [d]`; rows ordered by step then patch.
pub fn patch_embed(
    g: &mut Graph,
    frames: &Tensor,
    patch: usize,
    tau: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let patches = patchify(frames, patch, tau)?;
    let x = g.constant(patches);
    let h = g.matmul(x, weight)?;
    g.add_bias(h, bias)
}

/// Parameters of the two-layer strided conv audio front end.
#[derive(Clone, Copy, Debug)]
pub struct AudioConv {
    /// `[d × mel_bins × 2]`, stride 2
    pub w1: Var,
    pub b1: Var,
    /// `[d × d × tau]`, stride `tau`
    pub w2: Var,
    pub b2: Var,
}

/// Audio embeddings, one per tubelet step: conv(k=2, s=2) → GELU →
/// conv(k=τ, s=τ). The total stride `2τ` over mel frames at twice the video
/// rate gives exactly one token per step, each seeing only its own mel frames.
pub fn audio_embed(g: &mut Graph, mel: Var, conv: &AudioConv, tau: usize) -> Result<Var> {
    let (m, _) = g.value(mel).dims2("audio_embed")?;
    let window = 2 * tau;
    if m == 0 || m % window != 0 {
        return Err(Error::shape(
            "audio_embed",
            format!("{m} mel frames is not a positive multiple of 2·tau = {window}"),
        ));
    }
    let h = g.conv1d(mel, conv.w1, conv.b1, 2)?;
    let h = g.gelu(h);
    g.conv1d(h, conv.w2, conv.b2, tau)
}

/// VC embeddings: the learnable vector(s) in `table` replicated across
/// `steps`. A one-row table is shared by every step; a taller table supplies
/// one row per step.
pub fn vc_tokens(g: &mut Graph, table: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::shape("vc_tokens", "need at least one step"));
    }
    let (rows, _) = g.value(table).dims2("vc_tokens")?;
    let index: Vec<usize> = if rows == 1 {
        vec![0; steps]
    } else if rows >= steps {
        (0..steps).collect()
    } else {
        return Err(Error::Alignment(format!(
            "per-step VC table has {rows} rows for {steps} steps"
        )));
    };
    g.gather_rows(table, &index)
}

/// Per-stream embedding matrices feeding [`build_input_sequence`].
#[derive(Clone, Copy, Debug, Default)]
pub struct StreamEmbeddings {
    /// `[U × d]`
    pub audio: Option<Var>,
    /// `[U × d]`
    pub vc: Option<Var>,
    /// `[U·patches × d]`, step-major
    pub vb: Option<Var>,
}

/// Interleaves the stream embeddings into the order of `layout`.
pub fn build_input_sequence(
    g: &mut Graph,
    streams: &StreamEmbeddings,
    layout: &TokenLayout,
) -> Result<Var> {
    let steps = layout.steps();
    let per_step = layout.patches_per_step();
    let mut parts = Vec::new();
    let mut offsets = [usize::MAX; 3];
    let mut next = 0;
    let expect = [
        (Modality::Audio, streams.audio, steps),
        (Modality::VisualContinuous, streams.vc, steps),
        (Modality::VisualBase, streams.vb, steps * per_step),
    ];
    for (slot, (modality, var, rows)) in expect.into_iter().enumerate() {
        let Some(v) = var else { continue };
        let (r, _) = g.value(v).dims2("build_input_sequence")?;
        if r != rows {
            return Err(Error::Alignment(format!(
                "{modality} stream has {r} rows, expected {rows} for {steps} steps"
            )));
        }
        offsets[slot] = next;
        next += r;
        parts.push(v);
    }
    if parts.is_empty() {
        return Err(Error::Alignment("no token streams supplied".into()));
    }
    let mut index = Vec::with_capacity(layout.len());
    for t in layout.tokens() {
        let slot = t.modality as usize;
        if offsets[slot] == usize::MAX {
            return Err(Error::Alignment(format!(
                "layout needs {} tokens but that stream is missing",
                t.modality
            )));
        }
        let row = match (t.modality, t.patch) {
            (Modality::VisualBase, Some((r, c))) => t.step * per_step + r * layout.grid().1 + c,
            _ => t.step,
        };
        index.push(offsets[slot] + row);
    }
    let all = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 0)?
    };
    g.gather_rows(all, &index)
}

/// Token indices surviving sparsification and the resulting layout: all
/// Audio and VC tokens, VB tokens only on kept steps, order preserved.
pub fn sparsify_output(
    layout: &TokenLayout,
    schedule: &KeepSchedule,
) -> Result<(Vec<usize>, TokenLayout)> {
    if schedule.len() != layout.steps() {
        return Err(Error::Alignment(format!(
            "keep schedule covers {} steps, sequence has {}",
            schedule.len(),
            layout.steps()
        )));
    }
    let keep: Vec<usize> = layout
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.modality != Modality::VisualBase || schedule.keep(t.step))
        .map(|(i, _)| i)
        .collect();
    let out = layout.subset(&keep);
    Ok((keep, out))
}

/// [`sparsify_output`] applied to a materialized sequence.
pub fn sparsify_sequence(seq: &TokenSequence, schedule: &KeepSchedule) -> Result<TokenSequence> {
    let (keep, layout) = sparsify_output(&seq.layout, schedule)?;
    let d = seq.embeddings.last_dim();
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend_from_slice(seq.embeddings.row(i));
    }
    Ok(TokenSequence {
        embeddings: Tensor::new([keep.len(), d], data)?,
        layout,
        coords: keep.iter().map(|&i| seq.coords[i]).collect(),
    })
}
