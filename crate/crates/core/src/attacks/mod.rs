//! Threat models, projections, APGD and the embedding-space attack objectives.

mod apgd;
mod objectives;

use std::fmt;
use std::str::FromStr;

use robustsim_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

pub use apgd::{apgd, checkpoints};
pub use objectives::{
    attack_2afc, attack_2afc_all, attack_targeted_embedding, attack_untargeted_embedding, robust_2afc_accuracy,
    EncoderObjective, TwoAfcOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// `||delta||_p <= epsilon`, intersected with the `[0, 1]` image box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("radius must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self { norm, epsilon })
    }

    pub fn linf(epsilon: f64) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self {
            norm: Norm::L2,
            epsilon,
        }
    }

    /// Norm of `delta` in this threat model's order.
    pub fn measure(&self, delta: &Tensor) -> f64 {
        match self.norm {
            Norm::Linf => delta.linf_norm(),
            Norm::L2 => delta.l2_norm(),
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..*self }
    }
}

/// Scales an l2 radius given at one pixel count to another so the per-pixel
/// RMS budget is unchanged: `eps * sqrt(to / from)`.
pub fn rescale_l2(epsilon: f64, from_pixels: usize, to_pixels: usize) -> f64 {
    epsilon * (to_pixels as f64 / from_pixels as f64).sqrt()
}

fn parse_radius(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse radius {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    Ok(v)
}

impl FromStr for ThreatModel {
    type Err = Error;

    /// `linf:4/255`, `l2:0.42`, or `l2:3@224` for a radius quoted at
    /// 224x224 that is rescaled to 32x32 (both three-channel).
    fn from_str(s: &str) -> Result<Self> {
        let (norm, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("threat model {s:?} must look like linf:4/255")))?;
        let norm = match norm.trim() {
            "linf" | "inf" => Norm::Linf,
            "l2" => Norm::L2,
            other => return Err(Error::Config(format!("unknown norm {other:?}"))),
        };
        let eps = match rest.split_once('@') {
            Some((r, side)) => {
                let side: usize = side
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad reference resolution in {s:?}")))?;
                rescale_l2(parse_radius(r)?, side * side, 32 * 32)
            }
            None => parse_radius(rest)?,
        };
        ThreatModel::new(norm, eps)
    }
}

impl fmt::Display for ThreatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.norm {
            Norm::Linf => write!(f, "linf:{}/255", self.epsilon * 255.0),
            Norm::L2 => write!(f, "l2:{}", self.epsilon),
        }
    }
}

/// Projects a perturbation onto the threat ball. Feasible points come back
/// unchanged.
pub fn project(delta: &Tensor, threat: &ThreatModel) -> Tensor {
    let eps = threat.epsilon;
    match threat.norm {
        Norm::Linf => delta.map(|v| v.clamp(-eps, eps)),
        Norm::L2 => {
            let n = delta.l2_norm();
            if n > eps {
                let s = eps / n;
                let mut out = delta.map(|v| v * s);
                // rounding can leave the norm a hair above eps
                while out.l2_norm() > eps {
                    out = out.map(|v| v * (1.0 - 1e-15));
                }
                out
            } else {
                delta.clone()
            }
        }
    }
}

/// Projects `x` onto the threat ball around `origin`, then clamps to the box.
pub fn project_image(x: &Tensor, origin: &Tensor, threat: &ThreatModel) -> Tensor {
    let delta = x.zip_map(origin, |a, b| a - b).expect("same shape");
    let delta = project(&delta, threat);
    origin
        .zip_map(&delta, |o, d| (o + d).clamp(0.0, 1.0))
        .expect("same shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Defaults to twice the radius.
    pub initial_step: Option<f64>,
    pub momentum: f64,
    /// Fraction of improving steps below which the step size is halved.
    pub rho: f64,
    pub checkpoint_start: f64,
    pub checkpoint_decrement: f64,
    pub checkpoint_min: f64,
    pub random_start: bool,
    /// Stop as soon as the objective reports success.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            initial_step: None,
            momentum: 0.75,
            rho: 0.75,
            checkpoint_start: 0.22,
            checkpoint_decrement: 0.03,
            checkpoint_min: 0.06,
            random_start: false,
            early_stop: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("initial step must be positive, got {s}")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// Output of [`apgd`]. Objective values are in the maximized sense.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: ImageBatch,
    pub initial_objective: f64,
    pub best_objective: f64,
    /// Objective at every evaluated iterate, starting with the initial point.
    pub trace: Vec<f64>,
    /// Running maximum of `trace`.
    pub best_trace: Vec<f64>,
    pub success: bool,
}

/// A differentiable scalar to maximize over images.
pub trait Objective: Sync {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    /// Whether an objective value already counts as a successful attack.
    fn is_success(&self, _value: f64) -> bool {
        false
    }
}

impl<F> Objective for F
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)> + Sync,
{
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self(x)
    }
}
