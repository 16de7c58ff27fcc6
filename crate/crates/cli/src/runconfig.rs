//! Plain-text `key=value` run configuration.
//!
//! Values are layered: built-in defaults, then an optional document, then
//! command-line overrides. Every key is parsed as soon as it is set, so a bad
//! value is reported against the key that carried it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use omnienc::encoder::{
    read_checkpoint_config, Ablation, EncoderConfig, Freeze, Pooling, TrainOptions,
};
use omnienc::synthdata::{GenConfig, TaskKind};
use omnienc::tokenizer::{ClipSpec, TokenTemplate};
use omnienc::Error;

/// Which split `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(format!("expected train|eval, got `{s}`")),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub split: Split,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
    pub freeze: Freeze,
    pub ablate: Ablation,
    pub seconds: Option<usize>,
    pub frames: usize,
    pub fps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mel_bins: usize,
    pub tau: usize,
    pub patch: usize,
    pub vb_fps: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub group: usize,
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    pub pooling: Pooling,
    pub vc_per_step: bool,
    pub init_std: f64,
    pub speed: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub events: usize,
    pub event_steps: usize,
    pub t_list: Vec<usize>,
    pub bench_repeats: usize,
    pub layer: usize,
    pub oracle_draws: usize,
}

/// Every accepted key, in document order.
pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "n_train",
    "n_eval",
    "split",
    "out",
    "checkpoint",
    "lr",
    "warmup",
    "clip_norm",
    "batch",
    "steps",
    "freeze",
    "ablate",
    "seconds",
    "frames",
    "fps",
    "height",
    "width",
    "channels",
    "mel_bins",
    "tau",
    "patch",
    "vb_fps",
    "layers",
    "dim",
    "heads",
    "mlp_ratio",
    "group",
    "rope_split",
    "rope_base",
    "pooling",
    "vc_per_step",
    "init_std",
    "speed",
    "amplitude",
    "noise",
    "events",
    "event_steps",
    "t_list",
    "bench_repeats",
    "layer",
    "oracle_draws",
];

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let gen = GenConfig::default();
        let train = TrainOptions::default();
        Self {
            task: TaskKind::Motion,
            seed: 0,
            n_train: 512,
            n_eval: 512,
            split: Split::Eval,
            out: PathBuf::from("omnienc-out"),
            checkpoint: None,
            lr: train.lr,
            warmup: train.warmup,
            clip_norm: train.clip_norm,
            batch: train.batch,
            steps: train.steps,
            freeze: train.freeze,
            ablate: enc.ablation,
            seconds: None,
            frames: enc.clip.frames,
            fps: enc.clip.fps,
            height: enc.clip.height,
            width: enc.clip.width,
            channels: enc.clip.channels,
            mel_bins: enc.clip.mel_bins,
            tau: enc.template.tau,
            patch: enc.template.patch,
            vb_fps: enc.template.vb_fps,
            layers: enc.layers,
            dim: enc.d_model,
            heads: enc.heads,
            mlp_ratio: enc.mlp_ratio,
            group: enc.group,
            rope_split: enc.rope_split,
            rope_base: enc.rope_base,
            pooling: enc.pooling,
            vc_per_step: enc.vc_per_step,
            init_std: enc.init_std,
            speed: gen.speed,
            amplitude: gen.amplitude,
            noise: gen.noise,
            events: gen.events,
            event_steps: gen.event_steps,
            t_list: vec![8, 16, 32, 64, 128],
            bench_repeats: 3,
            layer: 0,
            oracle_draws: 100,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| bad(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let value = value.trim();
        match key {
            "task" => self.task = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_eval" => self.n_eval = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => {
                self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "freeze" => self.freeze = value.parse()?,
            "ablate" => self.ablate = value.parse()?,
            "seconds" => {
                self.seconds = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            "frames" => self.frames = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "mel_bins" => self.mel_bins = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "vb_fps" => self.vb_fps = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "group" => self.group = parse(key, value)?,
            "rope_split" => {
                let v = parse_list(key, value)?;
                self.rope_split = v
                    .try_into()
                    .map_err(|_| bad(key, "expected three comma-separated values t,h,w"))?;
            }
            "rope_base" => self.rope_base = parse(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "vc_per_step" => self.vc_per_step = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "speed" => self.speed = parse(key, value)?,
            "amplitude" => self.amplitude = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "events" => self.events = parse(key, value)?,
            "event_steps" => self.event_steps = parse(key, value)?,
            "t_list" => self.t_list = parse_list(key, value)?,
            "bench_repeats" => self.bench_repeats = parse(key, value)?,
            "layer" => self.layer = parse(key, value)?,
            "oracle_draws" => self.oracle_draws = parse(key, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Text form of one key, the inverse of [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.name().to_string(),
            "seed" => self.seed.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "split" => self.split.name().to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => self
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "lr" => self.lr.to_string(),
            "warmup" => self.warmup.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "batch" => self.batch.to_string(),
            "steps" => self.steps.to_string(),
            "freeze" => self.freeze.to_string(),
            "ablate" => self.ablate.to_string(),
            "seconds" => self.seconds.map(|s| s.to_string()).unwrap_or_default(),
            "frames" => self.frames.to_string(),
            "fps" => self.fps.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "channels" => self.channels.to_string(),
            "mel_bins" => self.mel_bins.to_string(),
            "tau" => self.tau.to_string(),
            "patch" => self.patch.to_string(),
            "vb_fps" => self.vb_fps.to_string(),
            "layers" => self.layers.to_string(),
            "dim" => self.dim.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "group" => self.group.to_string(),
            "rope_split" => join(&self.rope_split),
            "rope_base" => self.rope_base.to_string(),
            "pooling" => self.pooling.to_string(),
            "vc_per_step" => self.vc_per_step.to_string(),
            "init_std" => self.init_std.to_string(),
            "speed" => self.speed.to_string(),
            "amplitude" => self.amplitude.to_string(),
            "noise" => self.noise.to_string(),
            "events" => self.events.to_string(),
            "event_steps" => self.event_steps.to_string(),
            "t_list" => join(&self.t_list),
            "bench_repeats" => self.bench_repeats.to_string(),
            "layer" => self.layer.to_string(),
            "oracle_draws" => self.oracle_draws.to_string(),
            _ => return None,
        })
    }

    /// Applies a `key=value` document; blank lines and `#` comments are skipped.
    pub fn apply_document(&mut self, text: &str) -> Result<(), Error> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                bad(
                    format!("line {}", n + 1).as_str(),
                    format!("expected key=value, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)?;
        self.apply_document(&text)
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Error> {
        let mut cfg = Self::default();
        cfg.layer_over(file, overrides)?;
        Ok(cfg)
    }

    /// Like [`RunConfig::resolve`], with the checkpoint's stored document
    /// slotted between the defaults and `file`.
    pub fn resolve_from_checkpoint(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, Error> {
        let probe = Self::resolve(file, overrides)?;
        let dir = probe.checkpoint_dir();
        let mut cfg = Self::default();
        cfg.apply_document(&read_checkpoint_config(&dir)?)?;
        cfg.layer_over(file, overrides)?;
        cfg.out = probe.out;
        cfg.checkpoint = Some(dir);
        Ok(cfg)
    }

    fn layer_over(
        &mut self,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<(), Error> {
        if let Some(path) = file {
            self.apply_file(path)?;
        }
        for (key, value) in overrides {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# omnienc run configuration\n");
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Frame count after resolving `seconds`.
    pub fn resolved_frames(&self) -> usize {
        self.seconds.map_or(self.frames, |s| s * self.fps)
    }

    pub fn clip(&self) -> ClipSpec {
        ClipSpec {
            frames: self.resolved_frames(),
            fps: self.fps,
            height: self.height,
            width: self.width,
            channels: self.channels,
            mel_bins: self.mel_bins,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            clip: self.clip(),
            template: TokenTemplate {
                tau: self.tau,
                patch: self.patch,
                vb_fps: self.vb_fps,
            },
            layers: self.layers,
            d_model: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            group: self.group,
            rope_split: self.rope_split,
            rope_base: self.rope_base,
            classes: self.task.classes(),
            pooling: self.pooling,
            vc_per_step: self.vc_per_step,
            ablation: self.ablate,
            init_std: self.init_std,
        }
    }

    pub fn generator(&self) -> GenConfig {
        GenConfig {
            clip: self.clip(),
            tau: self.tau,
            vb_fps: self.vb_fps,
            group: self.group,
            speed: self.speed,
            amplitude: self.amplitude,
            noise: self.noise,
            events: self.events,
            event_steps: self.event_steps,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            warmup: self.warmup,
            clip_norm: self.clip_norm,
            batch: self.batch,
            steps: self.steps,
            freeze: self.freeze,
            seed: self.seed,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint"))
    }

    /// Checks every field that does not depend on the subcommand.
    pub fn validate(&self) -> Result<(), Error> {
        self.encoder().validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(bad("lr", "must be finite and non-negative"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(bad("clip_norm", "must be finite and non-negative"));
        }
        if self.batch == 0 {
            return Err(bad("batch", "must be positive"));
        }
        if self.n_train == 0 {
            return Err(bad("n_train", "must be positive"));
        }
        if self.n_eval == 0 {
            return Err(bad("n_eval", "must be positive"));
        }
        if self.t_list.is_empty() || self.t_list.contains(&0) {
            return Err(bad("t_list", "needs one or more positive durations"));
        }
        if self.bench_repeats == 0 {
            return Err(bad("bench_repeats", "must be positive"));
        }
        if self.layer >= self.layers.max(1) {
            return Err(bad(
                "layer",
                format!(
                    "layer {} does not exist in a {}-layer encoder",
                    self.layer, self.layers
                ),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(bad("noise", "must be finite and non-negative"));
        }
        if !(self.speed.is_finite() && self.amplitude.is_finite()) {
            return Err(bad("amplitude", "generator parameters must be finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("task", "av-sync").unwrap();
        cfg.set("rope_split", "2,1,1").unwrap();
        cfg.set("checkpoint", "somewhere/ckpt").unwrap();
        cfg.set("seconds", "4").unwrap();
        let mut back = RunConfig::default();
        back.apply_document(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.resolved_frames(), 100);
    }

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            let mut other = RunConfig::default();
            other.set(key, &v).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_and_malformed_keys_name_themselves() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_document("# c\nlayerz=3\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "layerz"));
        let err = cfg.set("heads", "four").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "heads"));
        let err = cfg.apply_document("just words").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "line 1"));
        let err = cfg.set("rope_split", "1,2").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "rope_split"));
    }

    #[test]
    fn validation_reports_the_failing_key() {
        let mut cfg = RunConfig::default();
        cfg.height = 10;
        let err = cfg.validate().unwrap_err();
        assert!(
            matches!(err, Error::Config { ref key, .. } if key == "height"),
            "{err}"
        );
        let mut cfg = RunConfig::default();
        cfg.layer = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref key, .. }) if key == "layer"));
    }
}
