use omnienc::tokenizer::{sparsify_output, TokenLayout};
use omnienc::windowattn::{count_attention_pairs, full_attention_pairs, plan_for_layout, Parity};

use crate::{Failure, Output, Report, RunConfig};

pub fn plan(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let enc = cfg.encoder();
    let b = enc.budget()?;
    let (schedule, _) = enc.input_layout()?;
    let (_, gh, gw) = enc.template.geometry(&enc.clip)?;
    let layout = TokenLayout::template(b.steps, (gh, gw));
    let (_, out_layout) = sparsify_output(&layout, &schedule)?;
    let identity = layout.len() == b.total_in && out_layout.len() == b.total_out;

    let mut r = Report::new();
    let c = enc.clip;
    r.comment(format!(
        "{} frames at {} fps, {}x{}, patch {}, tau {}, vb_fps {}",
        c.frames,
        c.fps,
        c.height,
        c.width,
        enc.template.patch,
        enc.template.tau,
        enc.template.vb_fps
    ));
    r.comment(format!("{:<8}{:>10}{:>10}", "stream", "in", "out"));
    for (name, tin, tout) in [
        ("audio", b.audio_tokens, b.audio_tokens),
        ("vc", b.vc_tokens, b.vc_tokens),
        ("vb", b.vb_in_tokens, b.vb_out_tokens),
        ("total", b.total_in, b.total_out),
    ] {
        r.comment(format!("{name:<8}{tin:>10}{tout:>10}"));
    }
    r.kv("steps", b.steps)
        .kv("grid", format!("{gh}x{gw}"))
        .kv("kept_steps", schedule.kept_count())
        .kv("audio_tokens", b.audio_tokens)
        .kv("vc_tokens", b.vc_tokens)
        .kv("vb_in_tokens", b.vb_in_tokens)
        .kv("vb_out_tokens", b.vb_out_tokens)
        .kv("total_in", b.total_in)
        .kv("total_out", b.total_out)
        .kv("enumerated_in", layout.len())
        .kv("enumerated_out", out_layout.len())
        .kv("budget_identity", if identity { "pass" } else { "fail" });
    let regular = plan_for_layout(&layout, enc.group, enc.template.tau, Parity::Regular)?;
    r.kv("group_frames", enc.group)
        .kv("group_steps", regular.group_steps())
        .kv("windows", regular.groups().len())
        .kv("attention_pairs_windowed", count_attention_pairs(&regular))
        .kv("attention_pairs_full", full_attention_pairs(layout.len()));
    let mut out = Output::ok(r);
    if !identity {
        out.code = crate::EXIT_FAILURE;
    }
    Ok(out)
}
