//! 3D rotary coordinates for the multimodal token sequence.
//!
//! Every token gets a `(t, h, w)` triple on the tubelet-step grid. VB patch
//! `(r, c)` sits at `(u, r + 1, c + 1)`, which frees the spatial origin for
//! the Audio token at `(u, 0, 0)` and the VC token at `(u, 0, 1)`. Each
//! channel pair of a head is bound to one axis and rotated by that axis'
//! coordinate times the pair's frequency.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::{Graph, PairRotation, Tensor, Var};
use crate::tokenizer::{Modality, TokenLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Coord {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.t, self.h, self.w)
    }
}

/// How VB spatial indices are placed on the coordinate grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpatialOffset {
    /// VB patch `(r, c)` → `(r + 1, c + 1)`.
    #[default]
    Shifted,
    /// VB patch `(r, c)` → `(r, c)`; collides with Audio/VC at the origin.
    Unshifted,
}

/// Assigns `(t, h', w')` to every token and rejects duplicate coordinates.
pub fn assign_coordinates(layout: &TokenLayout, offset: SpatialOffset) -> Result<Vec<Coord>> {
    let shift = match offset {
        SpatialOffset::Shifted => 1,
        SpatialOffset::Unshifted => 0,
    };
    let coords: Vec<Coord> = layout
        .tokens()
        .iter()
        .map(|tok| match (tok.modality, tok.patch) {
            (Modality::Audio, _) => Coord::new(tok.step, 0, 0),
            (Modality::VisualContinuous, _) => Coord::new(tok.step, 0, 1),
            (Modality::VisualBase, Some((r, c))) => Coord::new(tok.step, r + shift, c + shift),
            (Modality::VisualBase, None) => Coord::new(tok.step, shift, shift),
        })
        .collect();
    check_unique(layout, &coords)?;
    Ok(coords)
}

fn describe(layout: &TokenLayout, i: usize) -> String {
    let tok = layout.tokens()[i];
    match tok.patch {
        Some((r, c)) => format!(
            "token {i} ({} step {} patch ({r},{c}))",
            tok.modality, tok.step
        ),
        None => format!("token {i} ({} step {})", tok.modality, tok.step),
    }
}

/// Fails with [`Error::CoordinateCollision`] on the first repeated coordinate.
pub fn check_unique(layout: &TokenLayout, coords: &[Coord]) -> Result<()> {
    let mut seen: HashMap<Coord, usize> = HashMap::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        if let Some(&j) = seen.get(c) {
            return Err(Error::CoordinateCollision {
                first: describe(layout, j),
                second: describe(layout, i),
                coord: c.to_string(),
            });
        }
        seen.insert(*c, i);
    }
    Ok(())
}

/// Which frequency a channel pair uses within its axis band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FrequencyIndex {
    /// Pair `j` of a band with `n` pairs uses `base^(-j/n)`: every axis
    /// spans the full frequency range.
    #[default]
    PerAxis,
    /// Pair `k` of the head uses `base^(-2k/d_head)` regardless of its axis.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Channel pairs given to the t, h and w axes, in that order.
    pub split: [usize; 3],
    pub frequencies: FrequencyIndex,
}

impl RopeConfig {
    /// Default 2:1:1 split of the head's channel pairs.
    pub fn new(head_dim: usize) -> Result<Self> {
        let pairs = head_dim / 2;
        let quarter = pairs / 4;
        let cfg = Self {
            head_dim,
            base: 10_000.0,
            split: [pairs - 2 * quarter, quarter, quarter],
            frequencies: FrequencyIndex::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Splits `head_dim / 2` pairs in the ratio `ratio`, remainder to t.
    pub fn with_ratio(head_dim: usize, ratio: [usize; 3]) -> Result<Self> {
        let pairs = head_dim / 2;
        let total: usize = ratio.iter().sum();
        if total == 0 {
            return Err(Error::config("rope_split", "ratio sums to zero"));
        }
        let h = pairs * ratio[1] / total;
        let w = pairs * ratio[2] / total;
        let cfg = Self {
            split: [pairs.saturating_sub(h + w), h, w],
            ..Self::new_unchecked(head_dim)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn new_unchecked(head_dim: usize) -> Self {
        Self {
            head_dim,
            base: 10_000.0,
            split: [0, 0, 0],
            frequencies: FrequencyIndex::default(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::config(
                "heads",
                format!("head dim {} must be even and positive", self.head_dim),
            ));
        }
        if self.split.iter().sum::<usize>() != self.pairs() || self.split.contains(&0) {
            return Err(Error::config(
                "rope_split",
                format!(
                    "pair split {:?} must give each axis at least one of {} pairs",
                    self.split,
                    self.pairs()
                ),
            ));
        }
        if !(self.base > 1.0) {
            return Err(Error::config("rope_base", "must exceed 1"));
        }
        Ok(())
    }

    /// `(axis, frequency)` for every channel pair, axis 0 = t, 1 = h, 2 = w.
    pub fn pair_table(&self) -> Vec<(usize, f64)> {
        let mut table = Vec::with_capacity(self.pairs());
        let mut k = 0;
        for (axis, &n) in self.split.iter().enumerate() {
            for j in 0..n {
                let exponent = match self.frequencies {
                    FrequencyIndex::PerAxis => j as f64 / n as f64,
                    FrequencyIndex::Global => 2.0 * k as f64 / self.head_dim as f64,
                };
                table.push((axis, self.base.powf(-exponent)));
                k += 1;
            }
        }
        table
    }

    /// Rotation angle of every pair for every coordinate, row-major `N × pairs`.
    pub fn angles(&self, coords: &[Coord]) -> Vec<f64> {
        let table = self.pair_table();
        let mut out = Vec::with_capacity(coords.len() * table.len());
        for c in coords {
            let pos = [c.t as f64, c.h as f64, c.w as f64];
            out.extend(table.iter().map(|&(axis, freq)| pos[axis] * freq));
        }
        out
    }

    pub fn rotation(&self, coords: &[Coord]) -> Result<Arc<PairRotation>> {
        self.validate()?;
        let angles = self.angles(coords);
        Ok(Arc::new(PairRotation::from_angles(
            coords.len(),
            self.pairs(),
            &angles,
        )?))
    }
}

/// Rotates `x` (`[N × heads·d_head]` on the graph) by the coordinates' angles.
pub fn rope_rotate(g: &mut Graph, x: Var, coords: &[Coord], cfg: &RopeConfig) -> Result<Var> {
    let n = g.value(x).shape().first().copied().unwrap_or(0);
    if n != coords.len() {
        return Err(Error::Alignment(format!(
            "{} coordinates for {n} tokens",
            coords.len()
        )));
    }
    g.rotate_pairs(x, cfg.rotation(coords)?)
}

/// Value-level rotation of `x: [N × heads × d_head]` (or `[N × heads·d_head]`).
pub fn rope_rotate_tensor(x: &Tensor, coords: &[Coord], cfg: &RopeConfig) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let n = shape.first().copied().unwrap_or(0);
    if n != coords.len() {
        return Err(Error::Alignment(format!(
            "{} coordinates for {n} tokens",
            coords.len()
        )));
    }
    if n == 0 || !x.numel().is_multiple_of(n * cfg.head_dim) {
        return Err(Error::shape(
            "rope_rotate",
            format!(
                "shape {shape:?} does not hold heads of dim {}",
                cfg.head_dim
            ),
        ));
    }
    let flat = x.reshaped([n, x.numel() / n.max(1)])?;
    let mut g = Graph::new();
    let v = g.constant(flat);
    let out = g.rotate_pairs(v, cfg.rotation(coords)?)?;
    g.value(out).reshaped(shape)
}
