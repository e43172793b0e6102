//! Prior spatial constraints on the part transforms.
//!
//! Three hinge penalties keep each learned crop sensible:
//!
//! * centre: `½·max{0, ‖t − C‖² − α}` keeps the translation near the part prior,
//! * scale range: `max{0, β − s_x} + max{0, β − s_y}` stops crops collapsing,
//! * inside: `½·max{0, (s ± t)² − γ}` per axis and edge keeps the crop in the image.
//!
//! The localization loss is `Σ_parts L_cen + ξ₁·L_pos + ξ₂·L_in` and the
//! training objective is `L_cls + λ·L_loc`. Every hinge uses a strict `> 0`
//! activity test, so a point sitting exactly on a boundary has zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stn::{TransformParams, NUM_PARTS};

/// Prior centre and slack constants of one part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartPrior {
    pub cx: f64,
    pub cy: f64,
    /// α: squared-distance slack around the centre.
    #[serde(default = "PartPrior::default_alpha")]
    pub alpha: f64,
    /// β: smallest scale allowed without penalty.
    #[serde(default = "PartPrior::default_beta")]
    pub beta: f64,
    /// γ: squared extent of the image in normalized coordinates.
    #[serde(default = "PartPrior::default_gamma")]
    pub gamma: f64,
}

impl PartPrior {
    pub const ALPHA: f64 = 0.5;
    pub const BETA: f64 = 0.1;
    pub const GAMMA: f64 = 1.0;

    fn default_alpha() -> f64 {
        Self::ALPHA
    }
    fn default_beta() -> f64 {
        Self::BETA
    }
    fn default_gamma() -> f64 {
        Self::GAMMA
    }

    pub fn new(cx: f64, cy: f64) -> Self {
        Self {
            cx,
            cy,
            alpha: Self::ALPHA,
            beta: Self::BETA,
            gamma: Self::GAMMA,
        }
    }

    /// Head-shoulder, upper body and lower body. `y = -1` is the top row.
    pub fn defaults() -> [PartPrior; NUM_PARTS] {
        [Self::new(0.0, -0.6), Self::new(0.0, 0.0), Self::new(0.0, 0.6)]
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (-1.0..=1.0).contains(&v);
        if !inside(self.cx) || !inside(self.cy) {
            return Err(Error::Config(format!(
                "prior centre ({}, {}) lies outside [-1, 1]^2",
                self.cx, self.cy
            )));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "prior constants must be positive (alpha {}, beta {}, gamma {})",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Which crop edges the inside constraint penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsideEdges {
    /// Both `(s + t)²` and `(s − t)²`.
    #[default]
    Both,
    /// Only `(s + t)²`.
    Plus,
}

/// ξ₁, ξ₂ inside the localization loss and λ in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub xi1: f64,
    pub xi2: f64,
    pub lambda: f64,
    pub inside_edges: InsideEdges,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            xi1: 1.0,
            xi2: 1.0,
            lambda: 0.1,
            inside_edges: InsideEdges::Both,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("xi1", self.xi1), ("xi2", self.xi2), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Centre constraint and its gradient.
pub fn center_loss(theta: &TransformParams, prior: &PartPrior) -> (f64, TransformParams) {
    let dx = theta.tx - prior.cx;
    let dy = theta.ty - prior.cy;
    let excess = dx * dx + dy * dy - prior.alpha;
    if excess > 0.0 {
        (0.5 * excess, TransformParams::new(0.0, dx, 0.0, dy))
    } else {
        (0.0, TransformParams::default())
    }
}

/// Scale-range constraint and its gradient.
pub fn scale_range_loss(theta: &TransformParams, prior: &PartPrior) -> (f64, TransformParams) {
    let mut loss = 0.0;
    let mut grad = TransformParams::default();
    if prior.beta - theta.sx > 0.0 {
        loss += prior.beta - theta.sx;
        grad.sx = -1.0;
    }
    if prior.beta - theta.sy > 0.0 {
        loss += prior.beta - theta.sy;
        grad.sy = -1.0;
    }
    (loss, grad)
}

/// Inside-image constraint and its gradient.
pub fn inside_loss(theta: &TransformParams, prior: &PartPrior, edges: InsideEdges) -> (f64, TransformParams) {
    let mut loss = 0.0;
    let mut grad = TransformParams::default();
    // (value, d/ds, d/dt) for every penalized edge of one axis
    let mut axis = |s: f64, t: f64, gs: &mut f64, gt: &mut f64| {
        let mut edge = |e: f64, sign: f64| {
            let excess = e * e - prior.gamma;
            if excess > 0.0 {
                loss += 0.5 * excess;
                *gs += e;
                *gt += sign * e;
            }
        };
        edge(s + t, 1.0);
        if edges == InsideEdges::Both {
            edge(s - t, -1.0);
        }
    };
    axis(theta.sx, theta.tx, &mut grad.sx, &mut grad.tx);
    axis(theta.sy, theta.ty, &mut grad.sy, &mut grad.ty);
    (loss, grad)
}

/// The three constraint values of one part, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintValues {
    pub center: f64,
    pub scale: f64,
    pub inside: f64,
}

impl ConstraintValues {
    pub fn max(&self) -> f64 {
        self.center.max(self.scale).max(self.inside)
    }
}

/// Weighted localization loss over all parts of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationLoss {
    pub total: f64,
    pub parts: Vec<ConstraintValues>,
    pub grads: Vec<TransformParams>,
}

pub fn localization_loss(
    thetas: &[TransformParams],
    priors: &[PartPrior],
    w: &LossWeights,
) -> Result<LocalizationLoss> {
    if thetas.len() != NUM_PARTS || priors.len() != NUM_PARTS {
        return Err(Error::Config(format!(
            "localization loss needs {NUM_PARTS} parts, got {} transforms and {} priors",
            thetas.len(),
            priors.len()
        )));
    }
    let mut out = LocalizationLoss {
        total: 0.0,
        parts: Vec::with_capacity(NUM_PARTS),
        grads: Vec::with_capacity(NUM_PARTS),
    };
    for (theta, prior) in thetas.iter().zip(priors) {
        let (lc, gc) = center_loss(theta, prior);
        let (ls, gs) = scale_range_loss(theta, prior);
        let (li, gi) = inside_loss(theta, prior, w.inside_edges);
        out.total += lc + w.xi1 * ls + w.xi2 * li;
        out.parts.push(ConstraintValues {
            center: lc,
            scale: ls,
            inside: li,
        });
        out.grads.push(gc + gs * w.xi1 + gi * w.xi2);
    }
    Ok(out)
}

/// `L_cls + λ·L_loc`.
pub fn total_objective(cls_loss: f64, loc_loss: f64, w: &LossWeights) -> f64 {
    cls_loss + w.lambda * loc_loss
}
