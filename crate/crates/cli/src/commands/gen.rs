use omnienc::synthdata::{digest, generate, write_dataset, DATASET_FILE, MANIFEST_FILE};

use crate::{Failure, Output, Report, RunConfig};

pub fn gen(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let clips = generate(cfg.task, cfg.seed, cfg.n_train, &cfg.generator(), cfg.patch)?;
    write_dataset(&cfg.out, cfg.task, cfg.seed, &clips)?;
    let mut counts = vec![0usize; cfg.task.classes()];
    for c in &clips {
        counts[c.label] += 1;
    }
    let mut r = Report::new();
    r.comment(format!("wrote {DATASET_FILE} and {MANIFEST_FILE}"))
        .kv("task", cfg.task.name())
        .kv("seed", cfg.seed)
        .kv("count", clips.len());
    for (k, n) in counts.iter().enumerate() {
        r.kv(format!("class.{k}"), n);
    }
    r.kv("sha256", digest(&clips));
    Ok(Output::ok(r))
}
