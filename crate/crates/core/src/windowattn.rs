//! Temporal window shifting.
//!
//! The token sequence is cut into groups of `G_u = G/τ` consecutive tubelet
//! steps and attention runs independently inside each group. Odd layers move
//! the boundaries by `G_u/2` steps so information crosses groups as depth
//! grows. Edge groups are ragged; nothing wraps around.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::{Graph, PairRotation, Var};
use crate::tokenizer::TokenLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Regular,
    Shifted,
}

impl Parity {
    /// Even layers regular, odd layers shifted; `shifting = false` keeps every layer regular.
    pub fn for_layer(layer: usize, shifting: bool) -> Self {
        if shifting && layer % 2 == 1 {
            Parity::Shifted
        } else {
            Parity::Regular
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parity::Regular => "regular",
            Parity::Shifted => "shifted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    parity: Parity,
    group_frames: usize,
    group_steps: usize,
    steps: usize,
    step_groups: Vec<Range<usize>>,
    groups: Arc<[Range<usize>]>,
    tokens: usize,
}

/// Step ranges of one layer, before mapping to tokens.
pub fn step_groups(steps: usize, group_steps: usize, parity: Parity) -> Vec<Range<usize>> {
    let offset = match parity {
        Parity::Regular => 0,
        Parity::Shifted => group_steps / 2,
    };
    let mut out = Vec::new();
    let mut start = 0;
    let mut end = if offset == 0 { group_steps } else { offset };
    while start < steps {
        let stop = end.min(steps);
        out.push(start..stop);
        start = stop;
        end += group_steps;
    }
    out
}

fn group_steps_for(group: usize, tau: usize, parity: Parity) -> Result<usize> {
    if tau == 0 {
        return Err(Error::config("tau", "must be positive"));
    }
    if group == 0 || !group.is_multiple_of(tau) {
        return Err(Error::config(
            "group",
            format!("group of {group} frames is not a positive multiple of tau {tau}"),
        ));
    }
    let gu = group / tau;
    if parity == Parity::Shifted && !gu.is_multiple_of(2) {
        return Err(Error::config(
            "group",
            format!("shifted windows need an even number of steps per group, got {gu}"),
        ));
    }
    Ok(gu)
}

/// Plan for a sequence with exactly `frame_tokens` tokens at every step.
pub fn make_plan(
    steps: usize,
    frame_tokens: usize,
    group: usize,
    tau: usize,
    parity: Parity,
) -> Result<AttentionPlan> {
    let gu = group_steps_for(group, tau, parity)?;
    let step_groups = step_groups(steps, gu, parity);
    let groups: Vec<Range<usize>> = step_groups
        .iter()
        .map(|r| r.start * frame_tokens..r.end * frame_tokens)
        .filter(|r| !r.is_empty())
        .collect();
    Ok(AttentionPlan {
        parity,
        group_frames: group,
        group_steps: gu,
        steps,
        step_groups,
        groups: groups.into(),
        tokens: steps * frame_tokens,
    })
}

/// Plan for an arbitrary step-ordered layout; steps without tokens yield no group.
pub fn plan_for_layout(
    layout: &TokenLayout,
    group: usize,
    tau: usize,
    parity: Parity,
) -> Result<AttentionPlan> {
    let gu = group_steps_for(group, tau, parity)?;
    let steps = layout.steps();
    let step_of = layout.step_of_tokens();
    if step_of.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Alignment(
            "token layout is not ordered by step".into(),
        ));
    }
    let step_groups = step_groups(steps, gu, parity);
    let mut groups = Vec::with_capacity(step_groups.len());
    let mut cursor = 0;
    for r in &step_groups {
        let start = cursor;
        while cursor < step_of.len() && step_of[cursor] < r.end {
            cursor += 1;
        }
        if cursor > start {
            groups.push(start..cursor);
        }
    }
    Ok(AttentionPlan {
        parity,
        group_frames: group,
        group_steps: gu,
        steps,
        step_groups,
        groups: groups.into(),
        tokens: step_of.len(),
    })
}

impl AttentionPlan {
    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn group_frames(&self) -> usize {
        self.group_frames
    }

    pub fn group_steps(&self) -> usize {
        self.group_steps
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_groups(&self) -> &[Range<usize>] {
        &self.step_groups
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Row-major `N × N` mask, `true` where attention is allowed.
    pub fn block_mask(&self) -> Vec<bool> {
        let n = self.tokens;
        let mut mask = vec![false; n * n];
        for g in self.groups.iter() {
            for i in g.clone() {
                mask[i * n + g.start..i * n + g.end].fill(true);
            }
        }
        mask
    }

    /// Plain-text portable bitmap (`P1`) of the block mask; `1` marks an allowed pair.
    pub fn mask_pbm(&self) -> String {
        let n = self.tokens;
        let mask = self.block_mask();
        let mut out = format!("P1\n{n} {n}\n");
        for row in mask.chunks(n.max(1)) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `Σ |group|²` over the plan.
pub fn count_attention_pairs(plan: &AttentionPlan) -> u128 {
    plan.groups().iter().map(|g| (g.len() as u128).pow(2)).sum()
}

/// Pairs for unrestricted attention over `n` tokens.
pub fn full_attention_pairs(n: usize) -> u128 {
    (n as u128).pow(2)
}

/// `reach[v·U + u]` is true when output step `u` can depend on input step `v`
/// after running the given layers in order.
pub fn step_reachability(plans: &[AttentionPlan], steps: usize) -> Vec<bool> {
    let mut reach = vec![false; steps * steps];
    for u in 0..steps {
        reach[u * steps + u] = true;
    }
    for plan in plans {
        let mut group_of = vec![usize::MAX; steps];
        for (i, r) in plan.step_groups().iter().enumerate() {
            for u in r.clone() {
                group_of[u] = i;
            }
        }
        // compose: new[v][u] = OR_w reach[v][w] && same_group(w, u)
        let mut next = vec![false; steps * steps];
        for v in 0..steps {
            for w in 0..steps {
                if !reach[v * steps + w] {
                    continue;
                }
                for u in 0..steps {
                    if group_of[w] == group_of[u] {
                        next[v * steps + u] = true;
                    }
                }
            }
        }
        reach = next;
    }
    reach
}

/// Projection weights of one attention layer; matrices are `[d × d]`, biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head attention restricted to the plan's groups, with Q and K
/// rotated by `rotation` before the scores are formed.
pub fn group_attention(
    g: &mut Graph,
    x: Var,
    plan: &AttentionPlan,
    rotation: &Arc<PairRotation>,
    heads: usize,
    w: &AttentionVars,
) -> Result<Var> {
    let n = g.shape(x).first().copied().unwrap_or(0);
    if n != plan.tokens() {
        return Err(Error::Alignment(format!(
            "plan covers {} tokens but the sequence has {n}",
            plan.tokens()
        )));
    }
    let q = linear(g, x, w.wq, w.bq)?;
    let k = linear(g, x, w.wk, w.bk)?;
    let v = linear(g, x, w.wv, w.bv)?;
    let q = g.rotate_pairs(q, rotation.clone())?;
    let k = g.rotate_pairs(k, rotation.clone())?;
    let a = g.grouped_attention(q, k, v, plan.groups.clone(), heads)?;
    linear(g, a, w.wo, w.bo)
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}
