use std::fs;

use omnienc::encoder::{
    evaluate, load_checkpoint_params, save_checkpoint, Encoder, Metrics, TrainState,
};
use omnienc::synthdata::generate;
use omnienc::tokenizer::LabeledClip;

use crate::report::fixed;
use crate::runconfig::Split;
use crate::{Failure, Output, Report, RunConfig};

pub const TRAIN_REPORT: &str = "train_report.txt";
pub const EVAL_REPORT: &str = "eval_report.txt";

/// Seed of the held-out split for a run seeded with `seed`.
pub fn eval_split_seed(seed: u64) -> u64 {
    seed ^ 0x6576_616c_0000_0000
}

fn split_data(cfg: &RunConfig, split: Split) -> Result<Vec<LabeledClip>, Failure> {
    let (seed, n) = match split {
        Split::Train => (cfg.seed, cfg.n_train),
        Split::Eval => (eval_split_seed(cfg.seed), cfg.n_eval),
    };
    Ok(generate(cfg.task, seed, n, &cfg.generator(), cfg.patch)?)
}

fn metrics(r: &mut Report, prefix: &str, m: &Metrics) {
    r.kv(format!("{prefix}_examples"), m.examples)
        .kv(format!("{prefix}_accuracy"), fixed(m.accuracy()))
        .kv(format!("{prefix}_loss"), fixed(m.loss));
}

/// Trains on the generated split, saves a checkpoint and scores both splits.
pub fn train(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let enc = Encoder::new(cfg.encoder())?;
    let train = split_data(cfg, Split::Train)?;
    let held_out = split_data(cfg, Split::Eval)?;
    let opts = cfg.train_options();
    let mut state = TrainState::new(&enc, enc.init(cfg.seed)?, &opts);

    let mut r = Report::new();
    r.comment(format!(
        "{} on {} clips, {} steps of batch {}",
        cfg.task.name(),
        train.len(),
        opts.steps,
        opts.batch
    ));
    let every = (opts.steps / 10).max(1);
    let mut window = 0.0;
    let losses = state.fit(&enc, &train, &opts, |step, loss| {
        window += loss;
        if step % every == 0 {
            r.comment(format!(
                "step {step} mean loss {}",
                fixed(window / every as f64)
            ));
            window = 0.0;
        }
    })?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };

    let dir = cfg.checkpoint_dir();
    save_checkpoint(&dir, &state.params, &cfg.render())?;
    r.kv("task", cfg.task.name())
        .kv("ablate", cfg.ablate)
        .kv("seed", cfg.seed)
        .kv("steps", opts.steps)
        .kv("parameters", state.params.count())
        .kv("final_loss", fixed(final_loss));
    metrics(&mut r, "train", &evaluate(&enc, &state.params, &train)?);
    metrics(&mut r, "eval", &evaluate(&enc, &state.params, &held_out)?);
    r.kv("checkpoint", dir.display());
    let text = r.finish();
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(TRAIN_REPORT), &text)?;
    Ok(Output {
        stdout: text,
        ..Default::default()
    })
}

/// Scores a saved checkpoint on the split named by `split`.
pub fn eval(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let enc = Encoder::new(cfg.encoder())?;
    let dir = cfg.checkpoint_dir();
    let params = load_checkpoint_params(&dir, enc.config())?;
    let data = split_data(cfg, cfg.split)?;
    let m = evaluate(&enc, &params, &data)?;
    let mut r = Report::new();
    r.comment(format!("checkpoint {}", dir.display()));
    r.kv("task", cfg.task.name())
        .kv("ablate", cfg.ablate)
        .kv("split", cfg.split.name());
    metrics(&mut r, cfg.split.name(), &m);
    let text = r.finish();
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(EVAL_REPORT), &text)?;
    Ok(Output {
        stdout: text,
        ..Default::default()
    })
}
