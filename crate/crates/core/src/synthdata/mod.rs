//! Synthetic clips for three toy tasks and the on-disk dataset format.
//!
//! - `motion`: a blob drifts away from the frame centre in one of eight
//!   directions and snaps back on every kept step, so the VB stream only
//!   ever sees the start position.
//! - `av-sync`: centred disk flashes with mel bursts either on the same steps
//!   or displaced by at least one temporal group.
//! - `modality-probe`: one fixed marker placed in the mel stream, on patch
//!   (0,0), or on some other patch.
//!
//! Every clip is a pure function of `(seed, index)`.

pub mod tensorfile;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor, RNG_ALGORITHM};
use crate::tokenizer::{keep_schedule, Clip, ClipSpec, KeepSchedule, LabeledClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Motion,
    AvSync,
    ModalityProbe,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Motion, TaskKind::AvSync, TaskKind::ModalityProbe];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Motion => "motion",
            TaskKind::AvSync => "av-sync",
            TaskKind::ModalityProbe => "modality-probe",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            TaskKind::Motion => 8,
            TaskKind::AvSync => 2,
            TaskKind::ModalityProbe => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "task",
                    format!("unknown task `{s}` (motion|av-sync|modality-probe)"),
                )
            })
    }
}

/// Generator parameters shared by all tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub clip: ClipSpec,
    pub tau: usize,
    pub vb_fps: usize,
    /// Temporal group in frames; av-sync negatives sit at least one group away.
    pub group: usize,
    /// Blob displacement per step in pixels (motion).
    pub speed: f64,
    /// Peak strength of the task signal.
    pub amplitude: f64,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
    /// Flash events per clip (av-sync).
    pub events: usize,
    /// Steps each flash and burst lasts (av-sync).
    pub event_steps: usize,
}

impl Default for GenConfig {
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
            tau: 2,
            vb_fps: 2,
            group: 16,
            speed: 0.5,
            amplitude: 0.8,
            noise: 0.05,
            events: 1,
            event_steps: 3,
        }
    }
}

const BACKGROUND: f64 = 0.1;
const BLOB_SIGMA: f64 = 0.8;

impl GenConfig {
    fn steps(&self) -> Result<usize> {
        if self.tau == 0 || self.clip.frames == 0 || !self.clip.frames.is_multiple_of(self.tau) {
            return Err(Error::config(
                "frames",
                format!(
                    "{} frames is not a positive multiple of tau={}",
                    self.clip.frames, self.tau
                ),
            ));
        }
        if self.clip.height == 0
            || self.clip.width == 0
            || self.clip.channels == 0
            || self.clip.mel_bins == 0
        {
            return Err(Error::config("height", "clip extents must be positive"));
        }
        Ok(self.clip.frames / self.tau)
    }

    fn schedule(&self) -> Result<KeepSchedule> {
        keep_schedule(self.steps()?, self.clip.fps, self.vb_fps, self.tau)
    }

    fn mel_per_step(&self) -> usize {
        2 * self.tau
    }
}

fn noise_frames(rng: &mut Rng, cfg: &GenConfig) -> Vec<f64> {
    let c = &cfg.clip;
    (0..c.frames * c.height * c.width * c.channels)
        .map(|_| BACKGROUND + cfg.noise * rng.normal())
        .collect()
}

fn noise_mel(rng: &mut Rng, cfg: &GenConfig) -> Vec<f64> {
    (0..cfg.clip.mel_frames() * cfg.clip.mel_bins)
        .map(|_| BACKGROUND + cfg.noise * rng.normal())
        .collect()
}

fn finish(cfg: &GenConfig, frames: Vec<f64>, mel: Vec<f64>) -> Result<Clip> {
    let c = &cfg.clip;
    let frames = frames.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
    Ok(Clip {
        frames: Tensor::new([c.frames, c.height, c.width, c.channels], frames)?,
        mel: Tensor::new([c.mel_frames(), c.mel_bins], mel)?,
    })
}

/// Balanced labels: `index mod classes`.
fn label_of(index: usize, classes: usize) -> usize {
    index % classes
}

/// Unit steps of the eight motion directions, counter-clockwise from +x.
pub const DIRECTIONS: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

pub fn mirror_direction(d: usize) -> usize {
    (d + 4) % 8
}

/// Steps since the most recent kept step.
fn phase(schedule: &KeepSchedule) -> Vec<usize> {
    let mut last = 0;
    (0..schedule.len())
        .map(|u| {
            if schedule.keep(u) {
                last = u;
            }
            u - last
        })
        .collect()
}

struct MotionDraw {
    centre: (f64, f64),
    frames: Vec<f64>,
    mel: Vec<f64>,
}

fn render_motion(
    cfg: &GenConfig,
    phases: &[usize],
    draw: &MotionDraw,
    direction: usize,
) -> Vec<f64> {
    let c = &cfg.clip;
    let (dx, dy) = DIRECTIONS[direction];
    let norm = ((dx * dx + dy * dy) as f64).sqrt();
    let (vx, vy) = (cfg.speed * dx as f64 / norm, cfg.speed * dy as f64 / norm);
    let mut frames = draw.frames.clone();
    let wrap = |d: f64, n: usize| {
        let n = n as f64;
        d - n * (d / n).round()
    };
    for f in 0..c.frames {
        let k = phases[f / cfg.tau] as f64;
        let (py, px) = (draw.centre.0 + vy * k, draw.centre.1 + vx * k);
        for y in 0..c.height {
            for x in 0..c.width {
                let ey = wrap(y as f64 - py, c.height);
                let ex = wrap(x as f64 - px, c.width);
                let v =
                    cfg.amplitude * (-(ey * ey + ex * ex) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                for ch in 0..c.channels {
                    frames[((f * c.height + y) * c.width + x) * c.channels + ch] += v;
                }
            }
        }
    }
    frames
}

/// Kept-step frames of two clips agree bit for bit.
fn kept_frames_agree(cfg: &GenConfig, schedule: &KeepSchedule, a: &Tensor, b: &Tensor) -> bool {
    let per_frame = cfg.clip.height * cfg.clip.width * cfg.clip.channels;
    schedule.kept_steps().into_iter().all(|u| {
        let range = u * cfg.tau * per_frame..(u + 1) * cfg.tau * per_frame;
        a.data()[range.clone()]
            .iter()
            .zip(&b.data()[range])
            .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

pub fn gen_motion_direction(seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<LabeledClip>> {
    let schedule = cfg.schedule()?;
    if !(cfg.speed > 0.0) {
        return Err(Error::Generator(format!(
            "speed {} carries no motion",
            cfg.speed
        )));
    }
    if cfg.amplitude <= 0.0 {
        return Err(Error::Generator("blob amplitude must be positive".into()));
    }
    let phases = phase(&schedule);
    let longest = phases.iter().copied().max().unwrap_or(0);
    if longest == 0 {
        return Err(Error::Generator(
            "every step is kept, so the sparse stream is not aliased".into(),
        ));
    }
    let reach = cfg.speed * longest as f64;
    let half = cfg.clip.height.min(cfg.clip.width) as f64 / 2.0;
    if reach >= half {
        return Err(Error::Generator(format!(
            "blob travels {reach} px between kept steps; opposite directions alias beyond {half} px"
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, i as u64);
            let label = label_of(i, 8);
            let c = &cfg.clip;
            let centre = (
                c.height as f64 / 2.0 + rng.uniform_range(-0.5, 0.5),
                c.width as f64 / 2.0 + rng.uniform_range(-0.5, 0.5),
            );
            let draw = MotionDraw {
                centre,
                frames: noise_frames(&mut rng, cfg),
                mel: noise_mel(&mut rng, cfg),
            };
            let clip = finish(
                cfg,
                render_motion(cfg, &phases, &draw, label),
                draw.mel.clone(),
            )?;
            let mirror = finish(
                cfg,
                render_motion(cfg, &phases, &draw, mirror_direction(label)),
                draw.mel.clone(),
            )?;
            if !kept_frames_agree(cfg, &schedule, &clip.frames, &mirror.frames) {
                return Err(Error::Generator(format!(
                    "clip {i}: mirrored trajectories differ on kept steps"
                )));
            }
            Ok(LabeledClip { clip, label })
        })
        .collect()
}

/// Centred disk with radius a third of the shorter side; bursts fill the low half of the mel bins.
fn flash_disk(c: &ClipSpec) -> Vec<f64> {
    let (cy, cx) = ((c.height as f64 - 1.0) / 2.0, (c.width as f64 - 1.0) / 2.0);
    let r2 = (c.height.min(c.width) as f64 / 3.0).powi(2);
    let mut out = Vec::with_capacity(c.height * c.width * c.channels);
    for y in 0..c.height {
        for x in 0..c.width {
            let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r2;
            out.extend(std::iter::repeat_n(
                if inside { 1.0 } else { 0.0 },
                c.channels,
            ));
        }
    }
    out
}

/// Flash and burst steps of one av-sync clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncEvents {
    pub flashes: Vec<usize>,
    pub bursts: Vec<usize>,
}

fn sync_offset_bounds(cfg: &GenConfig) -> Result<(usize, usize)> {
    if cfg.group == 0 || !cfg.group.is_multiple_of(cfg.tau) {
        return Err(Error::config("group", "must be a positive multiple of tau"));
    }
    // a full group between the nearest flash and burst steps, so no window holds both
    let lo = (cfg.group / cfg.tau).max(2) + cfg.event_steps.max(1) - 1;
    Ok((lo, lo + 2))
}

fn draw_sync_events(
    rng: &mut Rng,
    cfg: &GenConfig,
    steps: usize,
    positive: bool,
) -> Result<SyncEvents> {
    let (lo, hi) = sync_offset_bounds(cfg)?;
    let span = cfg.event_steps.max(1);
    let starts = steps + 1 - span;
    let spacing = span + 2;
    // flashes must overlap a kept step or the sparse stream never sees them
    let schedule = cfg.schedule()?;
    let visible: Vec<usize> = (0..starts)
        .filter(|&s| (s..s + span).any(|u| schedule.keep(u)))
        .collect();
    if visible.is_empty() {
        return Err(Error::Generator(
            "no flash placement overlaps a kept step".into(),
        ));
    }
    for _ in 0..10_000 {
        let mut flashes: Vec<usize> = Vec::with_capacity(cfg.events);
        while flashes.len() < cfg.events {
            let s = visible[rng.below(visible.len())];
            if flashes.iter().all(|&f| f.abs_diff(s) >= spacing) {
                flashes.push(s);
            } else if flashes.len() * spacing >= visible.len() {
                break;
            }
        }
        if flashes.len() < cfg.events {
            continue;
        }
        flashes.sort_unstable();
        if positive {
            return Ok(SyncEvents {
                bursts: flashes.clone(),
                flashes,
            });
        }
        let offset = lo + rng.below(hi - lo + 1);
        let sign = rng.below(2) == 0;
        let bursts: Option<Vec<usize>> = flashes
            .iter()
            .map(|&f| {
                if sign {
                    f.checked_add(offset).filter(|&b| b < starts)
                } else {
                    f.checked_sub(offset)
                }
            })
            .collect();
        let Some(bursts) = bursts else { continue };
        // bursts also overlap kept steps, so their timing alone carries no label
        if bursts.iter().all(|&b| {
            visible.binary_search(&b).is_ok() && flashes.iter().all(|&f| f.abs_diff(b) >= lo)
        }) {
            return Ok(SyncEvents { flashes, bursts });
        }
    }
    Err(Error::Generator(format!(
        "could not place {} events with offsets {lo}..={hi} in {steps} steps",
        cfg.events
    )))
}

/// Events behind clip `index` of [`gen_av_sync`].
pub fn av_sync_events(seed: u64, index: usize, cfg: &GenConfig) -> Result<SyncEvents> {
    let steps = cfg.steps()?;
    let mut rng = Rng::derive(seed, index as u64);
    draw_sync_events(&mut rng, cfg, steps, label_of(index, 2) == 1)
}

pub fn gen_av_sync(seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<LabeledClip>> {
    let steps = cfg.steps()?;
    if cfg.clip.fps == 0 || cfg.clip.frames < 2 * cfg.clip.fps {
        return Err(Error::Generator(format!(
            "av-sync needs at least 2 s of video, got {} frames at {} fps",
            cfg.clip.frames, cfg.clip.fps
        )));
    }
    let (_, hi) = sync_offset_bounds(cfg)?;
    if cfg.event_steps == 0 || hi + cfg.event_steps > steps {
        return Err(Error::Generator(format!(
            "events of {} steps offset by up to {hi} do not fit the {steps}-step clip",
            cfg.event_steps
        )));
    }
    if cfg.events == 0 || cfg.amplitude <= 0.0 {
        return Err(Error::Generator(
            "av-sync needs at least one visible event".into(),
        ));
    }
    let c = cfg.clip;
    let per_frame = c.height * c.width * c.channels;
    let mel_step = cfg.mel_per_step() * c.mel_bins;
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, i as u64);
            let label = label_of(i, 2);
            let events = draw_sync_events(&mut rng, cfg, steps, label == 1)?;
            let mut frames = noise_frames(&mut rng, cfg);
            let mut mel = noise_mel(&mut rng, cfg);
            let disk = flash_disk(&c);
            let d = cfg.event_steps;
            for &f in &events.flashes {
                let span = f * cfg.tau * per_frame..(f + d) * cfg.tau * per_frame;
                for (j, x) in frames[span].iter_mut().enumerate() {
                    *x += cfg.amplitude * disk[j % per_frame];
                }
            }
            for &b in &events.bursts {
                for (j, x) in mel[b * mel_step..(b + d) * mel_step].iter_mut().enumerate() {
                    if j % c.mel_bins < c.mel_bins.div_ceil(2) {
                        *x += cfg.amplitude;
                    }
                }
            }
            Ok(LabeledClip {
                clip: finish(cfg, frames, mel)?,
                label,
            })
        })
        .collect()
}

/// Where the modality-probe marker sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkerSite {
    Audio,
    /// Patch (0,0), the position Audio and VC would take without the remap.
    Origin,
    Patch(usize, usize),
}

fn marker_value(y: usize, x: usize) -> f64 {
    if (y + x).is_multiple_of(2) {
        1.0
    } else {
        0.0
    }
}

fn probe_site(rng: &mut Rng, label: usize, grid: (usize, usize)) -> MarkerSite {
    match label {
        0 => MarkerSite::Audio,
        1 => MarkerSite::Origin,
        _ => {
            let k = 1 + rng.below(grid.0 * grid.1 - 1);
            MarkerSite::Patch(k / grid.1, k % grid.1)
        }
    }
}

/// Marker site of clip `index` of [`gen_modality_probe`] with patch size `patch`.
pub fn modality_probe_site(seed: u64, index: usize, cfg: &GenConfig, patch: usize) -> MarkerSite {
    let mut rng = Rng::derive(seed, index as u64);
    probe_site(
        &mut rng,
        label_of(index, 3),
        (cfg.clip.height / patch, cfg.clip.width / patch),
    )
}

pub fn gen_modality_probe(
    seed: u64,
    n: usize,
    cfg: &GenConfig,
    patch: usize,
) -> Result<Vec<LabeledClip>> {
    cfg.steps()?;
    if cfg.amplitude == 0.0 {
        return Err(Error::Generator(
            "marker amplitude 0 carries no label".into(),
        ));
    }
    let c = cfg.clip;
    if patch == 0 || !c.height.is_multiple_of(patch) || !c.width.is_multiple_of(patch) {
        return Err(Error::config(
            "patch",
            "frame is not divisible into patches",
        ));
    }
    let grid = (c.height / patch, c.width / patch);
    if grid.0 * grid.1 < 2 {
        return Err(Error::Generator(
            "the probe needs at least two patches".into(),
        ));
    }
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, i as u64);
            let label = label_of(i, 3);
            let site = probe_site(&mut rng, label, grid);
            let mut frames = noise_frames(&mut rng, cfg);
            let mut mel = noise_mel(&mut rng, cfg);
            match site {
                MarkerSite::Audio => {
                    for (j, x) in mel.iter_mut().enumerate() {
                        *x += cfg.amplitude * marker_value(0, j % c.mel_bins);
                    }
                }
                MarkerSite::Origin | MarkerSite::Patch(..) => {
                    let (pr, pc) = match site {
                        MarkerSite::Patch(r, col) => (r, col),
                        _ => (0, 0),
                    };
                    for f in 0..c.frames {
                        for y in 0..patch {
                            for x in 0..patch {
                                let at = (f * c.height + pr * patch + y) * c.width + pc * patch + x;
                                for ch in 0..c.channels {
                                    frames[at * c.channels + ch] +=
                                        cfg.amplitude * marker_value(y, x);
                                }
                            }
                        }
                    }
                }
            }
            Ok(LabeledClip {
                clip: finish(cfg, frames, mel)?,
                label,
            })
        })
        .collect()
}

pub fn generate(
    task: TaskKind,
    seed: u64,
    n: usize,
    cfg: &GenConfig,
    patch: usize,
) -> Result<Vec<LabeledClip>> {
    match task {
        TaskKind::Motion => gen_motion_direction(seed, n, cfg),
        TaskKind::AvSync => gen_av_sync(seed, n, cfg),
        TaskKind::ModalityProbe => gen_modality_probe(seed, n, cfg, patch),
    }
}

/// SHA-256 over labels and the little-endian bits of every array.
pub fn digest(clips: &[LabeledClip]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update((c.label as u64).to_le_bytes());
        for t in [&c.clip.frames, &c.clip.mel] {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const DATASET_FILE: &str = "clips.oetf";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Parsed `manifest.txt` of a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub task: TaskKind,
    pub seed: u64,
    pub file: String,
    pub labels: Vec<usize>,
    pub frames_shape: Vec<usize>,
    pub mel_shape: Vec<usize>,
    pub sha256: String,
}

fn dims(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl Manifest {
    pub fn render(&self) -> String {
        let labels: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        format!(
            "# omnienc synthetic dataset\ntask={}\nseed={}\nrng={}\ncount={}\nfile={}\nframes_shape={}\nmel_shape={}\nlabels={}\nsha256={}\n",
            self.task,
            self.seed,
            RNG_ALGORITHM,
            self.labels.len(),
            self.file,
            dims(&self.frames_shape),
            dims(&self.mel_shape),
            labels.join(","),
            self.sha256
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}` is not key=value")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
        };
        let bad = |k: &str| Error::Format(format!("manifest `{k}` is malformed"));
        let parse_dims = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(k)))
                .collect()
        };
        let labels = get("labels")?;
        let labels: Vec<usize> = if labels.is_empty() {
            Vec::new()
        } else {
            labels
                .split(',')
                .map(|l| l.parse().map_err(|_| bad("labels")))
                .collect::<Result<_>>()?
        };
        let count: usize = get("count")?.parse().map_err(|_| bad("count"))?;
        if count != labels.len() {
            return Err(Error::Format(format!(
                "count={count} but {} labels",
                labels.len()
            )));
        }
        if get("rng")? != RNG_ALGORITHM {
            return Err(bad("rng"));
        }
        Ok(Self {
            task: get("task")?.parse().map_err(|_| bad("task"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            file: get("file")?.to_string(),
            labels,
            frames_shape: parse_dims("frames_shape")?,
            mel_shape: parse_dims("mel_shape")?,
            sha256: get("sha256")?.to_string(),
        })
    }
}

/// Writes the clips and a manifest into `dir`; returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    task: TaskKind,
    seed: u64,
    clips: &[LabeledClip],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(2 * clips.len());
    for (i, c) in clips.iter().enumerate() {
        records.push((format!("clip{i}.frames"), &c.clip.frames));
        records.push((format!("clip{i}.mel"), &c.clip.mel));
    }
    tensorfile::write_records(&dir.join(DATASET_FILE), &records)?;
    let first = clips.first();
    let manifest = Manifest {
        task,
        seed,
        file: DATASET_FILE.to_string(),
        labels: clips.iter().map(|c| c.label).collect(),
        frames_shape: first
            .map(|c| c.clip.frames.shape().to_vec())
            .unwrap_or_default(),
        mel_shape: first
            .map(|c| c.clip.mel.shape().to_vec())
            .unwrap_or_default(),
        sha256: digest(clips),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render())?;
    Ok(path)
}

/// Reads a dataset directory and verifies it against its manifest digest.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<LabeledClip>)> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let records = tensorfile::read_records(&dir.join(&manifest.file))?;
    if records.len() != 2 * manifest.labels.len() {
        return Err(Error::Format(format!(
            "{} records for {} clips",
            records.len(),
            manifest.labels.len()
        )));
    }
    let mut it = records.into_iter();
    let clips: Vec<LabeledClip> = manifest
        .labels
        .iter()
        .map(|&label| {
            let (_, frames) = it.next().expect("counted");
            let (_, mel) = it.next().expect("counted");
            LabeledClip {
                clip: Clip { frames, mel },
                label,
            }
        })
        .collect();
    if digest(&clips) != manifest.sha256 {
        return Err(Error::Format(
            "dataset digest does not match its manifest".into(),
        ));
    }
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(clips: &[LabeledClip], classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for x in clips {
            c[x.label] += 1;
        }
        c
    }

    #[test]
    fn motion_labels_balanced_and_aliased() {
        let cfg = GenConfig::default();
        let clips = gen_motion_direction(1, 800, &cfg).unwrap();
        assert!(counts(&clips, 8).iter().all(|&c| c == 100));
        let schedule = cfg.schedule().unwrap();
        // all directions coincide on kept steps when centre and noise match
        let phases = phase(&schedule);
        let mut rng = Rng::new(3);
        let draw = MotionDraw {
            centre: (4.2, 3.9),
            frames: noise_frames(&mut rng, &cfg),
            mel: noise_mel(&mut rng, &cfg),
        };
        let render = |d| {
            finish(
                &cfg,
                render_motion(&cfg, &phases, &draw, d),
                draw.mel.clone(),
            )
            .unwrap()
        };
        let base = render(0);
        for d in 1..8 {
            let other = render(d);
            assert!(kept_frames_agree(
                &cfg,
                &schedule,
                &base.frames,
                &other.frames
            ));
            assert_ne!(base.frames, other.frames);
        }
    }

    #[test]
    fn motion_rejections() {
        let zero = GenConfig {
            speed: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            gen_motion_direction(0, 4, &zero),
            Err(Error::Generator(_))
        ));
        let fast = GenConfig {
            speed: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            gen_motion_direction(0, 4, &fast),
            Err(Error::Generator(_))
        ));
        let dense = GenConfig {
            vb_fps: 12,
            clip: ClipSpec {
                fps: 24,
                frames: 48,
                ..GenConfig::default().clip
            },
            ..Default::default()
        };
        assert!(matches!(
            gen_motion_direction(0, 4, &dense),
            Err(Error::Generator(_))
        ));
    }

    #[test]
    fn av_sync_construction() {
        let cfg = GenConfig::default();
        let clips = gen_av_sync(2, 64, &cfg).unwrap();
        assert_eq!(counts(&clips, 2), vec![32, 32]);
        for i in 0..64 {
            let ev = av_sync_events(2, i, &cfg).unwrap();
            if i % 2 == 1 {
                assert_eq!(ev.flashes, ev.bursts);
            } else {
                for b in &ev.bursts {
                    assert!(ev.flashes.iter().all(|f| f.abs_diff(*b) >= 10));
                    assert!(b + cfg.event_steps <= 25);
                }
                let kept = cfg.schedule().unwrap();
                for f in &ev.flashes {
                    assert!((*f..f + cfg.event_steps).any(|u| kept.keep(u)));
                }
            }
        }
        let short = GenConfig {
            clip: ClipSpec {
                frames: 40,
                ..cfg.clip
            },
            ..cfg
        };
        assert!(matches!(
            gen_av_sync(0, 2, &short),
            Err(Error::Generator(_))
        ));
        let wide = GenConfig { group: 48, ..cfg };
        assert!(matches!(gen_av_sync(0, 2, &wide), Err(Error::Generator(_))));
        let instant = GenConfig {
            event_steps: 0,
            ..cfg
        };
        assert!(matches!(
            gen_av_sync(0, 2, &instant),
            Err(Error::Generator(_))
        ));
    }

    #[test]
    fn probe_construction() {
        let cfg = GenConfig::default();
        let clips = gen_modality_probe(3, 30, &cfg, 4).unwrap();
        assert_eq!(counts(&clips, 3), vec![10, 10, 10]);
        for i in 0..30 {
            let site = modality_probe_site(3, i, &cfg, 4);
            match i % 3 {
                0 => assert_eq!(site, MarkerSite::Audio),
                1 => assert_eq!(site, MarkerSite::Origin),
                _ => assert!(
                    matches!(site, MarkerSite::Patch(r, c) if (r, c) != (0, 0) && r < 2 && c < 2)
                ),
            }
        }
        let silent = GenConfig {
            amplitude: 0.0,
            ..cfg
        };
        assert!(matches!(
            gen_modality_probe(0, 3, &silent, 4),
            Err(Error::Generator(_))
        ));
    }

    #[test]
    fn generators_are_pure_in_seed_and_index() {
        let cfg = GenConfig::default();
        for task in TaskKind::ALL {
            let a = generate(task, 9, 6, &cfg, 4).unwrap();
            let b = generate(task, 9, 6, &cfg, 4).unwrap();
            let c = generate(task, 10, 6, &cfg, 4).unwrap();
            assert_eq!(digest(&a), digest(&b));
            assert_ne!(digest(&a), digest(&c));
            let longer = generate(task, 9, 9, &cfg, 4).unwrap();
            assert_eq!(digest(&a), digest(&longer[..6]));
            assert!(a
                .iter()
                .all(|c| c.clip.frames.data().iter().all(|x| (0.0..=1.0).contains(x))));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = gen_av_sync(4, 6, &GenConfig::default()).unwrap();
        write_dataset(dir.path(), TaskKind::AvSync, 4, &clips).unwrap();
        let (manifest, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest.task, TaskKind::AvSync);
        assert_eq!(manifest.labels, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(manifest.frames_shape, vec![50, 8, 8, 1]);
        assert_eq!(back, clips);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            text.replace("labels=0,1", "labels=1,1"),
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
