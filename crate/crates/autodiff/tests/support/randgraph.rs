//! Randomly composed graphs over the full primitive set, shared by the
//! gradient checks here and in dependent crates.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{finite_diff_grad, max_relative_error, value_and_grad, Graph, Padding, Result, Tensor, Var};

pub const H: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Step {
    Gelu,
    Tanh,
    ExpScaled,
    Softplus,
    SqrtPlusOne,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Normalize,
    AddOther,
    SubOther,
    MulOther,
    DivOther,
    Project,
    Transpose,
    ConcatSlice,
    RowScale,
    Reshape,
    Relu,
}

const STEPS: [Step; 19] = [
    Step::Gelu,
    Step::Tanh,
    Step::ExpScaled,
    Step::Softplus,
    Step::SqrtPlusOne,
    Step::LayerNorm,
    Step::Softmax,
    Step::LogSoftmax,
    Step::Normalize,
    Step::AddOther,
    Step::SubOther,
    Step::MulOther,
    Step::DivOther,
    Step::Project,
    Step::Transpose,
    Step::ConcatSlice,
    Step::RowScale,
    Step::Reshape,
    Step::Relu,
];

#[derive(Debug, Clone, Copy)]
pub enum Front {
    Matrix,
    Conv { stride: usize, same: bool, max_pool: bool },
}

#[derive(Debug, Clone, Copy)]
pub enum Reduce {
    Sum,
    Mean,
    Norm,
}

#[derive(Debug, Clone)]
pub struct Program {
    pub front: Front,
    pub steps: Vec<Step>,
    pub reduce: Reduce,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Leaves: [0] main input, [1] same-shape partner matrix, [2] projection, [3] bias,
/// and for conv programs [4] weight, [5] conv bias.
pub fn build<'g>(p: &Program, g: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
    let mut cur = match p.front {
        Front::Matrix => v[0],
        Front::Conv { stride, same, max_pool } => {
            let pad = if same { Padding::Same } else { Padding::Valid };
            let y = v[0].conv2d(v[4], Some(v[5]), stride, pad)?.gelu()?;
            let s = y.shape();
            let y = if s[2] % 2 == 0 && s[3] % 2 == 0 {
                if max_pool {
                    y.max_pool2d(2)?
                } else {
                    y.avg_pool2d(2)?
                }
            } else {
                y
            };
            let s = y.shape();
            let flat = y.reshape(&[s[0] * s[1], s[2] * s[3]])?;
            // bring to the partner's shape
            let partner = v[1].shape();
            let cols = flat.slice(1, 0, partner[1].min(s[2] * s[3]))?;
            let rows = cols.slice(0, 0, partner[0].min(s[0] * s[1]))?;
            rows.add(v[1].slice(0, 0, rows.shape()[0])?.slice(1, 0, rows.shape()[1])?)?
        }
    };
    for step in &p.steps {
        let shape = cur.shape();
        cur = match step {
            Step::Gelu => cur.gelu()?,
            Step::Tanh => cur.tanh()?,
            Step::Relu => cur.relu()?,
            Step::ExpScaled => cur.scale(0.3)?.exp()?,
            Step::Softplus => cur.exp()?.add_scalar(1.0)?.log()?,
            Step::SqrtPlusOne => cur.square()?.add_scalar(1.0)?.sqrt()?,
            // two-element rows put the zero-variance kink within FD reach
            Step::LayerNorm if shape[1] < 3 => cur.tanh()?,
            Step::LayerNorm => cur.layer_norm()?,
            Step::Softmax => cur.softmax()?,
            Step::LogSoftmax => cur.log_softmax()?,
            Step::Normalize => cur.scale(0.5)?.exp()?.normalize_last()?,
            Step::AddOther | Step::SubOther | Step::MulOther | Step::DivOther => {
                let other = partner_like(g, v[1], &shape)?;
                match step {
                    Step::AddOther => cur.add(other)?,
                    Step::SubOther => cur.sub(other)?,
                    Step::MulOther => cur.mul(other)?,
                    _ => cur.div(other.square()?.add_scalar(1.0)?)?,
                }
            }
            Step::Project => {
                let w = v[2].slice(0, 0, shape[1].min(v[2].shape()[0]))?;
                let lhs = cur.slice(1, 0, w.shape()[0])?;
                lhs.matmul(w)?.mul_bias(v[3])?.add_bias(v[3])?
            }
            Step::Transpose => cur.transpose()?,
            Step::ConcatSlice => {
                let both = Var::concat(&[cur, cur.scale(-0.5)?], 1)?;
                both.slice(1, 1, shape[1])?
            }
            Step::RowScale => {
                let n = cur.square()?.sum_last()?.add_scalar(0.5)?;
                cur.mul_rows(n.sqrt()?)?
            }
            Step::Reshape => cur.reshape(&[shape[1], shape[0]])?,
        };
    }
    // a fixed non-uniform weighting keeps e.g. sum(softmax(..)) from being constant
    let shape = cur.shape();
    let n: usize = shape.iter().product();
    let ramp = Tensor::new(shape, (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.25).collect())?;
    let cur = cur.mul(g.constant(ramp)?)?;
    match p.reduce {
        Reduce::Sum => cur.sum(),
        Reduce::Mean => cur.mean(),
        Reduce::Norm => cur.l2_norm(),
    }
}

/// The partner leaf reshaped or sliced to `shape`.
fn partner_like<'g>(_g: &'g Graph, partner: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
    let ps = partner.shape();
    if ps == shape {
        return Ok(partner);
    }
    if ps[0] * ps[1] == shape[0] * shape[1] {
        return partner.reshape(shape);
    }
    let t = partner.concat_self_until(shape)?;
    Ok(t)
}

trait Tile<'g> {
    fn concat_self_until(self, shape: &[usize]) -> Result<Var<'g>>;
}

impl<'g> Tile<'g> for Var<'g> {
    fn concat_self_until(self, shape: &[usize]) -> Result<Var<'g>> {
        let mut rows = self;
        while rows.shape()[0] < shape[0] {
            rows = Var::concat(&[rows, self], 0)?;
        }
        let mut t = rows.slice(0, 0, shape[0])?;
        let base = t;
        while t.shape()[1] < shape[1] {
            t = Var::concat(&[t, base.scale(0.7)?], 1)?;
        }
        t.slice(1, 0, shape[1])
    }
}

pub fn random_case(seed: u64) -> (Program, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(2..=3);
    let c = rng.gen_range(3..=5);
    let front = if rng.gen_bool(0.4) {
        Front::Conv {
            stride: rng.gen_range(1..=2),
            same: rng.gen_bool(0.5),
            max_pool: rng.gen_bool(0.5),
        }
    } else {
        Front::Matrix
    };
    let n_steps = rng.gen_range(2..=6);
    let steps = (0..n_steps).map(|_| STEPS[rng.gen_range(0..STEPS.len())]).collect();
    let reduce = match rng.gen_range(0..3) {
        0 => Reduce::Sum,
        1 => Reduce::Mean,
        _ => Reduce::Norm,
    };
    let proj_out = rng.gen_range(2..=4);
    let main = match front {
        Front::Matrix => rand_tensor(&mut rng, &[r, c]),
        Front::Conv { .. } => rand_tensor(&mut rng, &[1, 2, 6, 6]),
    };
    let mut leaves = vec![
        main,
        rand_tensor(&mut rng, &[r, c]),
        rand_tensor(&mut rng, &[5, proj_out]),
        rand_tensor(&mut rng, &[proj_out]),
    ];
    if matches!(front, Front::Conv { .. }) {
        leaves.push(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        leaves.push(rand_tensor(&mut rng, &[3]));
    }
    (Program { front, steps, reduce }, leaves)
}

/// Worst relative error over every leaf.
pub fn check_program(p: &Program, leaves: &[Tensor]) -> f64 {
    let (_, grads) = value_and_grad(leaves, |g, v| build(p, g, v)).expect("forward/backward");
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut probe = leaves.to_vec();
                probe[i] = t.clone();
                let g = Graph::new();
                let vars: Vec<_> = probe.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
                build(p, &g, &vars)?.item()
            },
            &leaves[i],
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(grad, &fd));
    }
    worst
}

