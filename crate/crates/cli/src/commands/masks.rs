use std::fs;

use omnienc::rope::assign_coordinates;
use omnienc::windowattn::{count_attention_pairs, plan_for_layout, Parity};

use crate::{Failure, Output, Report, RunConfig};

/// Block mask of one layer plus the coordinate table of the input layout.
///
/// The mask is written to `<out>/mask_layer<L>.pbm`; the report lists groups
/// and coordinates.
pub fn masks(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let enc = cfg.encoder();
    let (_, layout) = enc.input_layout()?;
    let coords = assign_coordinates(&layout, enc.ablation.spatial_offset())?;
    let shifting = enc.ablation != omnienc::encoder::Ablation::NoShift;
    let parity = Parity::for_layer(cfg.layer, shifting);
    let plan = plan_for_layout(&layout, enc.group, enc.template.tau, parity)?;

    fs::create_dir_all(&cfg.out)?;
    let file = format!("mask_layer{}.pbm", cfg.layer);
    fs::write(cfg.out.join(&file), plan.mask_pbm())?;

    let mut r = Report::new();
    r.comment(format!(
        "layer {} uses {} windows of {} steps",
        cfg.layer,
        match parity {
            Parity::Regular => "regular",
            Parity::Shifted => "shifted",
        },
        plan.group_steps()
    ));
    r.kv("layer", cfg.layer)
        .kv(
            "parity",
            if parity == Parity::Regular {
                "regular"
            } else {
                "shifted"
            },
        )
        .kv("tokens", plan.tokens())
        .kv("windows", plan.groups().len())
        .kv("pairs", count_attention_pairs(&plan))
        .kv("mask_file", &file);
    let step_of = layout.step_of_tokens();
    for (i, g) in plan.groups().iter().enumerate() {
        r.kv(
            format!("window.{i}"),
            format!(
                "tokens {}..{} steps {}..={}",
                g.start,
                g.end,
                step_of[g.start],
                step_of[g.end - 1]
            ),
        );
    }
    r.comment("coordinates (t,h,w) per input token");
    for (i, (tok, c)) in layout.tokens().iter().zip(&coords).enumerate() {
        let what = match tok.patch {
            Some((pr, pc)) => format!("{} u={} p={pr},{pc}", tok.modality, tok.step),
            None => format!("{} u={}", tok.modality, tok.step),
        };
        r.kv(format!("coord.{i}"), format!("{what} {c}"));
    }
    Ok(Output::ok(r))
}
