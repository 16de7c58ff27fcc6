use std::sync::Arc;

use omnienc::encoder::{
    load_checkpoint_params, read_checkpoint_config, Ablation, Encoder, EncoderConfig,
};
use omnienc::numcore::{fd_gradcheck, Graph, PairRotation, Rng, Tensor};
use omnienc::rope::{assign_coordinates, rope_rotate_tensor, Coord};
use omnienc::tokenizer::{sparsify_output, Clip, ClipSpec, TokenLayout, TokenTemplate};
use omnienc::windowattn::{group_attention, plan_for_layout, AttentionVars, Parity};
use omnienc::Error;

use crate::{Failure, Output, Report, RunConfig, EXIT_FAILURE};

const ORACLE_TOL: f64 = 1e-10;
const ROPE_TOL: f64 = 1e-10;
const GRADCHECK_TOL: f64 = 1e-4;

struct Outcome {
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

impl Outcome {
    fn judged(name: &'static str, ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self {
            name,
            status,
            detail,
        }
    }
}

pub fn check(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let enc = cfg.encoder();
    // an unreadable checkpoint is an I/O problem, reported before any check runs
    let checkpoint = match &cfg.checkpoint {
        Some(dir) => {
            let mut stored = RunConfig::default();
            stored.apply_document(&read_checkpoint_config(dir)?)?;
            Some(load_checkpoint_params(dir, &stored.encoder())?)
        }
        None => None,
    };

    let mut outcomes = vec![
        coordinate_uniqueness(&enc)?,
        rope_relative(&enc, cfg.seed),
        mask_oracle(cfg.seed, cfg.oracle_draws)?,
        gradcheck(cfg.ablate, cfg.seed)?,
        budget_identity(&enc)?,
    ];
    if let Some(params) = checkpoint {
        outcomes.push(Outcome::judged(
            "checkpoint",
            params.is_finite(),
            format!("{} parameters", params.count()),
        ));
    }

    let mut r = Report::new();
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.status == Status::Fail)
        .map(|o| o.name)
        .collect();
    for o in &outcomes {
        let status = match o.status {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        };
        r.comment(format!("{}: {}", o.name, o.detail));
        r.kv(format!("check.{}", o.name), status);
    }
    r.kv("checks_failed", failed.len());
    if !failed.is_empty() {
        r.kv("failed", failed.join(","));
    }
    let mut out = Output::ok(r);
    if !failed.is_empty() {
        out.code = EXIT_FAILURE;
        out.stderr = format!("check failed: {}\n", failed.join(", "));
    }
    Ok(out)
}

fn coordinate_uniqueness(enc: &EncoderConfig) -> Result<Outcome, Error> {
    let (_, layout) = enc.input_layout()?;
    Ok(
        match assign_coordinates(&layout, enc.ablation.spatial_offset()) {
            Ok(coords) => Outcome::judged(
                "coordinate_uniqueness",
                true,
                format!("{} tokens, all coordinates distinct", coords.len()),
            ),
            Err(e @ Error::CoordinateCollision { .. }) => {
                Outcome::judged("coordinate_uniqueness", false, e.to_string())
            }
            Err(e) => return Err(e),
        },
    )
}

/// Scores depend only on the coordinate offset between query and key.
fn rope_relative(enc: &EncoderConfig, seed: u64) -> Outcome {
    let rope = enc.rope();
    let dim = rope.head_dim;
    let mut rng = Rng::derive(seed, 0x726f_7065);
    let mut worst = 0.0f64;
    let coord = |rng: &mut Rng| Coord::new(rng.below(200), rng.below(50), rng.below(50));
    for _ in 0..64 {
        let q = Tensor::from_fn([1, dim], |_| rng.normal());
        let k = Tensor::from_fn([1, dim], |_| rng.normal());
        let (a, b) = (coord(&mut rng), coord(&mut rng));
        let d = coord(&mut rng);
        let shift = |c: Coord| Coord::new(c.t + d.t, c.h + d.h, c.w + d.w);
        let score = |ca: Coord, cb: Coord| -> Result<f64, Error> {
            let qa = rope_rotate_tensor(&q, &[ca], &rope)?;
            let kb = rope_rotate_tensor(&k, &[cb], &rope)?;
            Ok(qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum())
        };
        match (score(a, b), score(shift(a), shift(b))) {
            (Ok(s0), Ok(s1)) => worst = worst.max((s0 - s1).abs() / s0.abs().max(1.0)),
            (Err(e), _) | (_, Err(e)) => {
                return Outcome::judged("rope_relative", false, e.to_string());
            }
        }
    }
    Outcome::judged(
        "rope_relative",
        worst <= ROPE_TOL,
        format!("64 draws, max score drift {worst:.3e}"),
    )
}

/// Windowed attention against full attention with an explicit block mask.
fn mask_oracle(seed: u64, draws: usize) -> Result<Outcome, Error> {
    let mut worst = 0.0f64;
    let (mut ragged, mut shifted) = (0, 0);
    for i in 0..draws {
        let mut rng = Rng::derive(seed, 0x6d61_736b_0000 + i as u64);
        let tau = 1 + rng.below(3);
        let gu = 2 * (1 + rng.below(4));
        let steps = 1 + rng.below(14);
        let grid = (1 + rng.below(2), 1 + rng.below(3));
        let audio = rng.below(5) != 0;
        let vb: Vec<bool> = (0..steps).map(|_| rng.below(3) != 0).collect();
        let mut layout = TokenLayout::interleaved(steps, grid, audio, true, |u| vb[u]);
        if layout.is_empty() {
            layout = TokenLayout::template(steps, grid);
        }
        let parity = if rng.below(2) == 0 {
            Parity::Regular
        } else {
            Parity::Shifted
        };
        let plan = plan_for_layout(&layout, gu * tau, tau, parity)?;
        shifted += (parity == Parity::Shifted) as usize;
        ragged += (!steps.is_multiple_of(gu) || parity == Parity::Shifted) as usize;

        let heads = 1 + rng.below(3);
        let pairs = 1 + rng.below(2);
        let width = heads * 2 * pairs;
        let n = layout.len();
        let draw =
            |shape: &[usize], rng: &mut Rng| Tensor::from_fn(shape.to_vec(), |_| rng.normal());
        let x = draw(&[n, width], &mut rng);
        let weights: Vec<Tensor> = (0..4)
            .flat_map(|_| [draw(&[width, width], &mut rng), draw(&[width], &mut rng)])
            .collect();
        let angles: Vec<f64> = (0..n * pairs)
            .map(|_| rng.uniform_range(-3.0, 3.0))
            .collect();
        let rotation = Arc::new(PairRotation::from_angles(n, pairs, &angles)?);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv: Vec<_> = weights.iter().map(|t| g.constant(t.clone())).collect();
        let vars = AttentionVars {
            wq: wv[0],
            bq: wv[1],
            wk: wv[2],
            bk: wv[3],
            wv: wv[4],
            bv: wv[5],
            wo: wv[6],
            bo: wv[7],
        };
        let y = group_attention(&mut g, xv, &plan, &rotation, heads, &vars)?;
        let fast = g.value(y).data().to_vec();

        let step_of = layout.step_of_tokens();
        let window = |s: usize| match parity {
            Parity::Regular => s / gu,
            Parity::Shifted => (s + gu / 2) / gu,
        };
        let naive = masked_attention(&x, &weights, &angles, pairs, heads, |i, j| {
            window(step_of[i]) == window(step_of[j])
        });
        for (a, b) in fast.iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Outcome::judged(
        "mask_oracle",
        worst <= ORACLE_TOL,
        format!("{draws} draws ({shifted} shifted, {ragged} ragged), max deviation {worst:.3e}"),
    ))
}

fn affine(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for k in 0..din {
                acc += x[i * din + k] * w.data()[k * dout + o];
            }
            y[i * dout + o] = acc;
        }
    }
    y
}

fn masked_attention(
    x: &Tensor,
    w: &[Tensor],
    angles: &[f64],
    pairs: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let (n, width) = (x.shape()[0], x.shape()[1]);
    let hd = width / heads;
    let rotate = |m: &mut [f64]| {
        for i in 0..n {
            for h in 0..heads {
                for p in 0..pairs {
                    let (s, c) = angles[i * pairs + p].sin_cos();
                    let at = i * width + h * hd + 2 * p;
                    let (a, b) = (m[at], m[at + 1]);
                    m[at] = a * c - b * s;
                    m[at + 1] = a * s + b * c;
                }
            }
        }
    };
    let mut q = affine(x.data(), n, &w[0], &w[1]);
    let mut k = affine(x.data(), n, &w[2], &w[3]);
    let v = affine(x.data(), n, &w[4], &w[5]);
    rotate(&mut q);
    rotate(&mut k);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attended = vec![0.0; n * width];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if !allowed(i, j) {
                        return f64::NEG_INFINITY;
                    }
                    (0..hd)
                        .map(|c| q[i * width + h * hd + c] * k[j * width + h * hd + c])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                attended[i * width + h * hd + c] =
                    (0..n).map(|j| e[j] / z * v[j * width + h * hd + c]).sum();
            }
        }
    }
    affine(&attended, n, &w[6], &w[7])
}

/// Reference model for the gradient check: two layers, width 16.
pub(crate) fn gradcheck_config(ablation: Ablation) -> EncoderConfig {
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
        ablation,
        init_std: 0.3,
        ..EncoderConfig::default()
    }
}

fn gradcheck(ablation: Ablation, seed: u64) -> Result<Outcome, Error> {
    let enc = match Encoder::new(gradcheck_config(ablation)) {
        Ok(enc) => enc,
        Err(e @ Error::CoordinateCollision { .. }) => {
            return Ok(Outcome {
                name: "gradcheck",
                status: Status::Skip,
                detail: format!("encoder rejected: {e}"),
            });
        }
        Err(e) => return Err(e),
    };
    let params = enc.init(seed)?;
    let spec = enc.config().clip;
    let mut rng = Rng::derive(seed, 0x6772_6164);
    let clip = Clip {
        frames: Tensor::from_fn(
            [spec.frames, spec.height, spec.width, spec.channels],
            |_| rng.uniform(),
        ),
        mel: Tensor::from_fn([spec.mel_frames(), spec.mel_bins], |_| rng.normal()),
    };
    let flat: Vec<Tensor> = params
        .entries()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let err = fd_gradcheck(
        |g, v| {
            let p = params.refill(v.iter().copied())?;
            let fwd = enc.forward(g, &p, &clip)?;
            let logits = enc.readout(g, &p, fwd.output)?;
            g.cross_entropy(logits, &[1])
        },
        &flat,
        1e-5,
    )?;
    Ok(Outcome::judged(
        "gradcheck",
        err < GRADCHECK_TOL,
        format!(
            "{} parameters, layers=2 dim=16, max relative error {err:.3e}",
            params.count()
        ),
    ))
}

fn budget_identity(enc: &EncoderConfig) -> Result<Outcome, Error> {
    let b = enc.budget()?;
    let (schedule, _) = enc.input_layout()?;
    let (_, gh, gw) = enc.template.geometry(&enc.clip)?;
    let layout = TokenLayout::template(b.steps, (gh, gw));
    let (_, out) = sparsify_output(&layout, &schedule)?;
    Ok(Outcome::judged(
        "budget_identity",
        layout.len() == b.total_in && out.len() == b.total_out,
        format!(
            "total_in {} vs {} enumerated, total_out {} vs {} enumerated",
            b.total_in,
            layout.len(),
            b.total_out,
            out.len()
        ),
    ))
}
