use std::fmt::Write as _;
use std::time::Instant;

use omnienc::encoder::Encoder;
use omnienc::numcore::{Rng, Tensor};
use omnienc::tokenizer::Clip;
use omnienc::windowattn::{count_attention_pairs, full_attention_pairs, plan_for_layout, Parity};

use crate::report::fixed;
use crate::{Failure, Output, Report, RunConfig};

/// Coefficient of determination of a least-squares polynomial fit.
pub fn fit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let k = degree + 1;
    // normal equations, solved by Gaussian elimination with partial pivoting
    let mut a = vec![vec![0.0; k + 1]; k];
    for (&x, &y) in xs.iter().zip(ys) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += x.powi((i + j) as i32);
            }
            a[i][k] += y * x.powi(i as i32);
        }
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        if a[col][col] == 0.0 {
            return f64::NAN;
        }
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = coef
            .iter()
            .enumerate()
            .map(|(i, c)| c * x.powi(i as i32))
            .sum();
        ss_res += (y - fit).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

struct Row {
    seconds: usize,
    tokens: usize,
    windowed: u128,
    full: u128,
}

fn forward_seconds(enc: &Encoder, seed: u64, repeats: usize) -> Result<f64, Failure> {
    let params = enc.init(seed)?;
    let spec = enc.config().clip;
    let mut rng = Rng::derive(seed, 0x6265_6e63);
    let clip = Clip {
        frames: Tensor::from_fn(
            [spec.frames, spec.height, spec.width, spec.channels],
            |_| rng.uniform(),
        ),
        mel: Tensor::from_fn([spec.mel_frames(), spec.mel_bins], |_| rng.normal()),
    };
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t0 = Instant::now();
        enc.features(&params, &clip)?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Pair counts for windowed and full attention over `t_list`, plus forward
/// wall times. Counts go to the report; timings go to stderr only.
pub fn bench(cfg: &RunConfig) -> Result<Output, Failure> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for &seconds in &cfg.t_list {
        let mut at = cfg.clone();
        at.seconds = Some(seconds);
        let windowed = at.encoder();
        windowed.validate()?;
        let (_, layout) = windowed.input_layout()?;
        let plan = plan_for_layout(
            &layout,
            windowed.group,
            windowed.template.tau,
            Parity::Regular,
        )?;
        rows.push(Row {
            seconds,
            tokens: layout.len(),
            windowed: count_attention_pairs(&plan),
            full: full_attention_pairs(layout.len()),
        });
        // one window spanning twice the clip: no layer parity can split it
        let mut full = windowed.clone();
        full.group = 2 * full.clip.frames;
        let tw = forward_seconds(&Encoder::new(windowed)?, cfg.seed, cfg.bench_repeats)?;
        let tf = forward_seconds(&Encoder::new(full)?, cfg.seed, cfg.bench_repeats)?;
        times.push((seconds, tw, tf));
    }

    let xs: Vec<f64> = rows.iter().map(|r| r.seconds as f64).collect();
    let win: Vec<f64> = rows.iter().map(|r| r.windowed as f64).collect();
    let full: Vec<f64> = rows.iter().map(|r| r.full as f64).collect();
    let mut r = Report::new();
    r.comment(format!(
        "group {} frames, {} layers, dim {}",
        cfg.group, cfg.layers, cfg.dim
    ));
    r.comment(format!(
        "{:>8}{:>10}{:>16}{:>16}",
        "T(s)", "tokens", "windowed", "full"
    ));
    for row in &rows {
        r.comment(format!(
            "{:>8}{:>10}{:>16}{:>16}",
            row.seconds, row.tokens, row.windowed, row.full
        ));
    }
    for row in &rows {
        let t = row.seconds;
        r.kv(format!("bench.{t}.tokens"), row.tokens)
            .kv(format!("bench.{t}.windowed_pairs"), row.windowed)
            .kv(format!("bench.{t}.full_pairs"), row.full);
    }
    if rows.len() >= 3 {
        r.kv("r2_windowed_linear", fixed(fit_r2(&xs, &win, 1)))
            .kv("r2_full_linear", fixed(fit_r2(&xs, &full, 1)))
            .kv("r2_full_quadratic", fixed(fit_r2(&xs, &full, 2)));
    }

    let mut err = String::new();
    for (t, tw, tf) in &times {
        let _ = writeln!(err, "wall.{t}.windowed_ms={:.3}", tw * 1e3);
        let _ = writeln!(err, "wall.{t}.full_ms={:.3}", tf * 1e3);
    }
    for pair in times.windows(2) {
        let ((t0, w0, f0), (t1, w1, f1)) = (pair[0], pair[1]);
        if t1 == 2 * t0 {
            let _ = writeln!(err, "ratio.{t1}.windowed={:.3}", w1 / w0);
            let _ = writeln!(err, "ratio.{t1}.full={:.3}", f1 / f0);
        }
    }
    Ok(Output {
        stdout: r.finish(),
        stderr: err,
        code: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fits_score_one() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let line: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let square: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((fit_r2(&xs, &line, 1) - 1.0).abs() < 1e-12);
        assert!((fit_r2(&xs, &square, 2) - 1.0).abs() < 1e-12);
        assert!(fit_r2(&xs, &square, 1) < 0.99);
    }
}
