//! Synthetic spatial count data with known factors.
//!
//! Both generators place four spatial patterns on a square grid and three
//! Bernoulli nonspatial patterns over the observations. Every feature is
//! assigned one pattern of each kind; its mean is
//! `(active or background) + (nonspatial active or background)` and counts
//! are negative binomial, drawn as a gamma-Poisson mixture.
//!
//! ggblocks uses four shapes on a 6×6 template upsampled to the grid
//! (template cells `(row, col)`):
//!
//! ```text
//! square   (0,0) (0,1) (1,0) (1,1)
//! cross    (0,4) (1,3) (1,4) (1,5) (2,4)
//! diagonal (3,0) (4,0) (4,1) (5,1) (5,2)
//! L-shape  (3,3) (4,3) (5,3) (5,4) (5,5)
//! ```
//!
//! quilt uses four overlapping rectangles on a side-`s` grid: rows and columns
//! `[0, s/2)`; rows and columns `[s/4, 3s/4)`; rows `[2s/3, s)`; columns
//! `[2s/3, s)`.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Ggblocks,
    Quilt,
}

impl FromStr for SimKind {
    type Err = NsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ggblocks" => Ok(Self::Ggblocks),
            "quilt" => Ok(Self::Quilt),
            other => Err(NsfError::Argument(format!("unknown simulation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub side: usize,
    pub num_features: usize,
    pub active: f64,
    pub background: f64,
    pub nonspatial_active: f64,
    pub nonspatial_patterns: usize,
    pub nonspatial_prob: f64,
    pub nb_shape: f64,
}

impl SimConfig {
    pub fn ggblocks() -> Self {
        Self {
            side: 30,
            num_features: 500,
            active: 11.0,
            background: 0.1,
            nonspatial_active: 9.0,
            nonspatial_patterns: 3,
            nonspatial_prob: 0.2,
            nb_shape: 10.0,
        }
    }

    pub fn quilt() -> Self {
        Self { side: 36, ..Self::ggblocks() }
    }

    pub fn for_kind(kind: SimKind) -> Self {
        match kind {
            SimKind::Ggblocks => Self::ggblocks(),
            SimKind::Quilt => Self::quilt(),
        }
    }

    pub fn validate(&self, kind: SimKind) -> Result<()> {
        let positive = [self.active, self.background, self.nonspatial_active, self.nb_shape];
        if positive.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(NsfError::Argument("intensities and shape must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nonspatial_prob) {
            return Err(NsfError::Argument("activation probability must lie in [0, 1]".into()));
        }
        if self.num_features == 0 || self.nonspatial_patterns == 0 {
            return Err(NsfError::Argument("need at least one feature and one nonspatial pattern".into()));
        }
        match kind {
            SimKind::Ggblocks if self.side == 0 || self.side % 6 != 0 => {
                Err(NsfError::Argument(format!("ggblocks needs a side divisible by 6, got {}", self.side)))
            }
            SimKind::Quilt if self.side < 4 => Err(NsfError::Argument("quilt needs a side of at least 4".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    /// Counts (N × J).
    pub y: Array2<f64>,
    /// Grid coordinates `(column, row)` (N × 2).
    pub x: Array2<f64>,
    /// Spatial masks (N × 4), entries 0 or 1.
    pub spatial_patterns: Array2<f64>,
    /// Nonspatial patterns (N × P), entries 0 or 1.
    pub nonspatial_patterns: Array2<f64>,
    /// Spatial pattern of each feature.
    pub spatial_assignment: Vec<usize>,
    /// Nonspatial pattern of each feature.
    pub nonspatial_assignment: Vec<usize>,
}

const GGBLOCKS: [&[(usize, usize)]; 4] = [
    &[(0, 0), (0, 1), (1, 0), (1, 1)],
    &[(0, 4), (1, 3), (1, 4), (1, 5), (2, 4)],
    &[(3, 0), (4, 0), (4, 1), (5, 1), (5, 2)],
    &[(3, 3), (4, 3), (5, 3), (5, 4), (5, 5)],
];

/// Binary masks (side² × 4), row-major over the grid.
pub fn pattern_masks(kind: SimKind, side: usize) -> Array2<f64> {
    let n = side * side;
    let mut m = Array2::zeros((n, 4));
    for i in 0..n {
        let (r, c) = (i / side, i % side);
        match kind {
            SimKind::Ggblocks => {
                let cell = (r * 6 / side, c * 6 / side);
                for (p, shape) in GGBLOCKS.iter().enumerate() {
                    if shape.contains(&cell) {
                        m[[i, p]] = 1.0;
                    }
                }
            }
            SimKind::Quilt => {
                let half = side / 2;
                let (q1, q3) = (side / 4, 3 * side / 4);
                let t = 2 * side / 3;
                let flags = [
                    r < half && c < half,
                    (q1..q3).contains(&r) && (q1..q3).contains(&c),
                    r >= t,
                    c >= t,
                ];
                for (p, &on) in flags.iter().enumerate() {
                    if on {
                        m[[i, p]] = 1.0;
                    }
                }
            }
        }
    }
    m
}

fn grid(side: usize) -> Array2<f64> {
    Array2::from_shape_fn((side * side, 2), |(i, d)| if d == 0 { (i % side) as f64 } else { (i / side) as f64 })
}

pub fn simulate(kind: SimKind, cfg: &SimConfig, seed: u64) -> Result<SimDataset> {
    cfg.validate(kind)?;
    let side = cfg.side;
    let n = side * side;
    let j = cfg.num_features;
    let p = cfg.nonspatial_patterns;
    let mut r = rng::seeded(seed);
    let spatial_patterns = pattern_masks(kind, side);
    let spatial_assignment: Vec<usize> = (0..j).map(|_| r.gen_range(0..4)).collect();
    let nonspatial_assignment: Vec<usize> = (0..j).map(|_| r.gen_range(0..p)).collect();
    let nonspatial_patterns =
        Array2::from_shape_fn((n, p), |_| if r.gen::<f64>() < cfg.nonspatial_prob { 1.0 } else { 0.0 });
    let gamma_unit = Gamma::new(cfg.nb_shape, 1.0 / cfg.nb_shape).map_err(|e| NsfError::Argument(e.to_string()))?;
    let mut y = Array2::zeros((n, j));
    for i in 0..n {
        for jj in 0..j {
            let m1 = if spatial_patterns[[i, spatial_assignment[jj]]] > 0.0 { cfg.active } else { cfg.background };
            let m2 = if nonspatial_patterns[[i, nonspatial_assignment[jj]]] > 0.0 {
                cfg.nonspatial_active
            } else {
                cfg.background
            };
            let rate = (m1 + m2) * gamma_unit.sample(&mut r);
            y[[i, jj]] = if rate > 0.0 { Poisson::new(rate).map(|d| d.sample(&mut r)).unwrap_or(0.0) } else { 0.0 };
        }
    }
    Ok(SimDataset {
        y,
        x: grid(side),
        spatial_patterns,
        nonspatial_patterns,
        spatial_assignment,
        nonspatial_assignment,
    })
}

pub fn simulate_ggblocks(cfg: &SimConfig, seed: u64) -> Result<SimDataset> {
    simulate(SimKind::Ggblocks, cfg, seed)
}

pub fn simulate_quilt(cfg: &SimConfig, seed: u64) -> Result<SimDataset> {
    simulate(SimKind::Quilt, cfg, seed)
}

/// Number of features assigned to each spatial pattern.
pub fn assignment_counts(assignment: &[usize], k: usize) -> Array1<usize> {
    let mut c = Array1::zeros(k);
    for &a in assignment {
        c[a] += 1;
    }
    c
}
