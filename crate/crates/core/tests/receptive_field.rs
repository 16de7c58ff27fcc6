use omnienc::encoder::{Ablation, Encoder, EncoderConfig};
use omnienc::numcore::{Rng, Tensor};
use omnienc::tokenizer::{Clip, ClipSpec, TokenTemplate};
use omnienc::windowattn::step_reachability;

fn config(layers: usize, ablation: Ablation) -> EncoderConfig {
    EncoderConfig {
        clip: ClipSpec {
            frames: 24,
            fps: 4,
            height: 4,
            width: 4,
            channels: 1,
            mel_bins: 4,
        },
        template: TokenTemplate {
            tau: 2,
            patch: 4,
            vb_fps: 2,
        },
        layers,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        group: 4,
        rope_split: [2, 1, 1],
        ablation,
        init_std: 0.3,
        ..EncoderConfig::default()
    }
}

fn clip(spec: &ClipSpec, seed: u64) -> Clip {
    let mut rng = Rng::new(seed);
    Clip {
        frames: Tensor::from_fn(
            [spec.frames, spec.height, spec.width, spec.channels],
            |_| rng.uniform(),
        ),
        mel: Tensor::from_fn([spec.mel_frames(), spec.mel_bins], |_| rng.normal()),
    }
}

fn check(layers: usize, ablation: Ablation) {
    let enc = Encoder::new(config(layers, ablation)).unwrap();
    let steps = enc.steps();
    let reach = step_reachability(enc.plans(), steps);
    let seed = layers as u64 + 7;
    let params = enc.init(seed).unwrap();
    let dep = enc
        .step_dependence(&params, &clip(&enc.config().clip, seed), seed, 1e-12)
        .unwrap();
    let mut false_nonzero = Vec::new();
    let mut false_zero = Vec::new();
    for v in 0..steps {
        for u in 0..steps {
            match (reach[v * steps + u], dep[v * steps + u]) {
                (false, true) => false_nonzero.push((v, u)),
                (true, false) => false_zero.push((v, u)),
                _ => {}
            }
        }
    }
    assert!(
        false_nonzero.is_empty(),
        "{layers} layers, {ablation}: unexpected dependence {false_nonzero:?}"
    );
    assert!(
        false_zero.is_empty(),
        "{layers} layers, {ablation}: missing dependence {false_zero:?}"
    );
}

#[test]
fn one_layer_stays_inside_its_window() {
    check(1, Ablation::None);
}

#[test]
fn two_layers_reach_across_the_shift() {
    check(2, Ablation::None);
}

#[test]
fn three_layers_match_predicted_reach() {
    check(3, Ablation::None);
    let widths: Vec<usize> = (1..=3)
        .map(|l| {
            let enc = Encoder::new(config(l, Ablation::None)).unwrap();
            step_reachability(enc.plans(), enc.steps())
                .iter()
                .filter(|&&r| r)
                .count()
        })
        .collect();
    assert!(widths[0] < widths[1] && widths[1] < widths[2], "{widths:?}");
}

#[test]
fn unshifted_stack_never_leaves_the_window() {
    check(3, Ablation::NoShift);
    let enc = Encoder::new(config(3, Ablation::NoShift)).unwrap();
    let reach = step_reachability(enc.plans(), enc.steps());
    let u = enc.steps();
    assert!(
        !reach[u + 2],
        "step 1 must not reach step 2 without shifting"
    );
}
