//! Auto-PGD: momentum projected gradient ascent whose step size halves at
//! checkpoints when progress stalls, restarting from the best point so far.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robustsim_autodiff::{TapeError, Tensor};

use super::{project_image, AttackConfig, AttackResult, Norm, Objective, ThreatModel};
use crate::error::{Error, Result};
use crate::image::ImageBatch;

/// Iteration indices at which the step-size conditions are checked.
pub fn checkpoints(iterations: usize, cfg: &AttackConfig) -> Vec<usize> {
    let mut p = vec![0.0, cfg.checkpoint_start];
    loop {
        let j = p.len() - 1;
        let next = p[j] + (p[j] - p[j - 1] - cfg.checkpoint_decrement).max(cfg.checkpoint_min);
        if next > 1.0 {
            break;
        }
        p.push(next);
    }
    let mut w: Vec<usize> = p[1..]
        .iter()
        .map(|&q| (q * iterations as f64 - 1e-9).ceil() as usize)
        .filter(|&k| k > 0 && k <= iterations)
        .collect();
    w.dedup();
    w
}

fn eval(obj: &dyn Objective, x: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = obj.value_and_grad(x)?;
    if !v.is_finite() {
        return Err(Error::Tape(TapeError::NonFinite { op: "objective" }));
    }
    Ok((v, g))
}

fn ascent_step(x: &Tensor, grad: &Tensor, step: f64, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => x.zip_map(grad, |a, g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            a + step * s
        }),
        Norm::L2 => {
            let n = grad.l2_norm();
            if n == 0.0 {
                return x.clone();
            }
            x.zip_map(grad, |a, g| a + step * g / n)
        }
    }
    .expect("same shape")
}

fn random_start(x0: &Tensor, threat: &ThreatModel, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = threat.epsilon;
    let start = match threat.norm {
        Norm::Linf => {
            let mut t = x0.clone();
            t.data_mut().iter_mut().for_each(|v| *v += eps * rng.gen_range(-1.0..=1.0));
            t
        }
        Norm::L2 => {
            let mut dir = x0.clone();
            dir.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = dir.l2_norm().max(f64::MIN_POSITIVE);
            let r = eps * rng.gen_range(0.0..=1.0);
            x0.zip_map(&dir, |v, d| v + r * d / n).expect("same shape")
        }
    };
    project_image(&start, x0, threat)
}

/// Maximizes `objective` over the threat ball around `x0` intersected with
/// `[0, 1]`, returning the best iterate seen.
pub fn apgd(
    objective: &dyn Objective,
    x0: &ImageBatch,
    threat: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let origin = x0.tensor();
    let n = cfg.iterations;
    let alpha = cfg.momentum;
    let mut eta = cfg.initial_step.unwrap_or(2.0 * threat.epsilon);
    let marks = checkpoints(n, cfg);

    let mut x = if cfg.random_start {
        random_start(origin, threat, cfg.seed)
    } else {
        origin.clone()
    };
    let (f0, g0) = eval(objective, &x)?;
    let mut trace = vec![f0];
    let mut best_trace = vec![f0];
    let (mut x_best, mut f_best, mut g_best) = (x.clone(), f0, g0.clone());

    let mut x_prev = x.clone();
    let mut f_cur = f0;
    let mut g_cur = g0;

    let mut improved = 0usize;
    let mut last_mark = 0usize;
    let mut eta_at_mark = eta;
    let mut best_at_mark = f_best;

    for k in 0..n {
        if cfg.early_stop && objective.is_success(f_best) {
            break;
        }
        let z = project_image(&ascent_step(&x, &g_cur, eta, threat.norm), origin, threat);
        let next = if k == 0 {
            z
        } else {
            let mixed = x
                .zip_map(&z, |a, b| a + alpha * (b - a))
                .and_then(|m| {
                    let mom = x.zip_map(&x_prev, |a, b| (1.0 - alpha) * (a - b))?;
                    m.zip_map(&mom, |a, b| a + b)
                })
                .expect("same shape");
            project_image(&mixed, origin, threat)
        };
        let (f_next, g_next) = eval(objective, &next)?;
        if f_next > f_cur {
            improved += 1;
        }
        if f_next > f_best {
            x_best = next.clone();
            f_best = f_next;
            g_best = g_next.clone();
        }
        trace.push(f_next);
        best_trace.push(f_best);
        x_prev = std::mem::replace(&mut x, next);
        f_cur = f_next;
        g_cur = g_next;

        let done = k + 1;
        if marks.contains(&done) {
            let span = done - last_mark;
            let stalled_steps = (improved as f64) < cfg.rho * span as f64;
            let stalled_best = eta == eta_at_mark && f_best == best_at_mark;
            eta_at_mark = eta;
            if stalled_steps || stalled_best {
                eta /= 2.0;
                x = x_best.clone();
                x_prev = x_best.clone();
                f_cur = f_best;
                g_cur = g_best.clone();
            }
            best_at_mark = f_best;
            improved = 0;
            last_mark = done;
        }
    }
    Ok(AttackResult {
        adversarial: ImageBatch::new(x_best)?,
        initial_objective: f0,
        best_objective: f_best,
        trace,
        best_trace,
        success: objective.is_success(f_best),
    })
}
