//! Finite-difference gradient verification.
//!
//! The oracle here is central differences in double precision. It is kept
//! deliberately independent of the graph internals: a check builds a fresh
//! graph for every perturbed evaluation through the same builder closure,
//! so the only shared code is the forward math being verified.
//!
//! `run_core_suite` sweeps every primitive op over randomized shapes and
//! values; composite structures (GRU steps, residual blocks, whole models)
//! reuse [`check_loss_grads`] from their own modules.

use crate::graph::{Graph, NodeId};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::Result;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor that keeps near-zero pairs from exploding.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Builder contract: construct a scalar loss from leaves corresponding to
/// the given differentiable inputs (in order). Non-differentiable data is
/// captured by the closure itself.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

/// Verify analytic gradients of `build` against central differences for
/// every element of every input. Returns the maximum relative error.
pub fn check_loss_grads(build: LossBuilder, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &leaves)?;
    graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            graph
                .grad(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |flat: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            let chunk = &flat[offset..offset + t.len()];
            ids.push(g.leaf(Tensor::from_vec(t.shape(), chunk.to_vec())?));
            offset += t.len();
        }
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).data()[0])
    };

    let mut flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let i = offset + j;
            let orig = flat[i];
            flat[i] = orig + h;
            let fp = eval(&flat)?;
            flat[i] = orig - h;
            let fm = eval(&flat)?;
            flat[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k][j], numeric));
        }
        offset += t.len();
    }
    Ok(worst)
}

/// Outcome of one op's randomized sweep.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub op: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rand_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.uniform(-2.0, 2.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values bounded away from zero, for inputs feeding kinked ops (ReLU) so
/// the finite-difference probe never straddles the kink.
fn rand_tensor_off_kink(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let mut v = rng.uniform(-2.0, 2.0);
            while v.abs() < 0.05 {
                v = rng.uniform(-2.0, 2.0);
            }
            v
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values with distinct entries per (n, c) plane so max-pool argmaxes have
/// a margin wider than the probe step.
fn rand_tensor_distinct(rng: &mut RngState, n: usize, c: usize, hw: usize) -> Tensor<f64> {
    let mut data = vec![0.0f64; n * c * hw];
    for p in 0..n * c {
        loop {
            let plane = &mut data[p * hw..][..hw];
            for v in plane.iter_mut() {
                *v = rng.uniform(-2.0, 2.0);
            }
            let mut sorted: Vec<f64> = plane.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if hw < 2 || sorted[0] - sorted[1] > 1e-3 {
                break;
            }
        }
    }
    Tensor::from_vec(&[n, c, hw, 1], data).unwrap()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>,
}

fn probe_loss(g: &mut Graph<f64>, y: NodeId, probe: &Tensor<f64>) -> Result<NodeId> {
    let p = g.constant(probe.clone());
    let weighted = g.mul(y, p)?;
    Ok(g.sum_all(weighted))
}

fn case_for(op: &str, rng: &mut RngState) -> Case {
    let dim = |rng: &mut RngState, lo: u64, hi: u64| (lo + rng.below(hi - lo + 1)) as usize;
    match op {
        "add" | "sub" | "mul" => {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 5)];
            let inputs = vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
            let probe = rand_tensor(rng, &shape);
            let which = op.to_string();
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = match which.as_str() {
                        "add" => g.add(ids[0], ids[1])?,
                        "sub" => g.sub(ids[0], ids[1])?,
                        _ => g.mul(ids[0], ids[1])?,
                    };
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "affine_const" => {
            let shape = vec![dim(rng, 1, 4), dim(rng, 1, 4)];
            let inputs = vec![rand_tensor(rng, &shape)];
            let probe = rand_tensor(rng, &shape);
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.affine_const(ids[0], a, b);
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "relu" => {
            let shape = vec![dim(rng, 1, 3), dim(rng, 2, 6)];
            let inputs = vec![rand_tensor_off_kink(rng, &shape)];
            let probe = rand_tensor(rng, &shape);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.relu(ids[0]);
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "sigmoid" | "tanh" | "exp" => {
            let shape = vec![3, 3];
            let inputs = vec![rand_tensor(rng, &shape)];
            let probe = rand_tensor(rng, &shape);
            let which = op.to_string();
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = match which.as_str() {
                        "sigmoid" => g.sigmoid(ids[0]),
                        "tanh" => g.tanh(ids[0]),
                        _ => g.exp(ids[0]),
                    };
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "matmul" => {
            let (n, k, m) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 4));
            let inputs = vec![rand_tensor(rng, &[n, k]), rand_tensor(rng, &[k, m])];
            let probe = rand_tensor(rng, &[n, m]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "add_row_bias" => {
            let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 6));
            let inputs = vec![rand_tensor(rng, &[n, m]), rand_tensor(rng, &[m])];
            let probe = rand_tensor(rng, &[n, m]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.add_row_bias(ids[0], ids[1])?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "conv2d" => {
            let n = dim(rng, 1, 2);
            let cin = dim(rng, 1, 3);
            let cout = dim(rng, 1, 3);
            let k = if rng.coin(0.5) { 3 } else { 1 };
            let stride = if rng.coin(0.3) { 2 } else { 1 };
            let pad = if k == 3 { rng.below(2) as usize } else { 0 };
            let h = dim(rng, 4, 6);
            let w = dim(rng, 4, 6);
            let inputs = vec![
                rand_tensor(rng, &[n, cin, h, w]),
                rand_tensor(rng, &[cout, cin, k, k]),
                rand_tensor(rng, &[cout]),
            ];
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let probe = rand_tensor(rng, &[n, cout, oh, ow]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "batchnorm_train" => {
            let (n, c, h, w) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 2, 3));
            let affine = rng.coin(0.5);
            let mut inputs = vec![rand_tensor(rng, &[n, c, h, w])];
            if affine {
                inputs.push(rand_tensor(rng, &[c]));
                inputs.push(rand_tensor(rng, &[c]));
            }
            let probe = rand_tensor(rng, &[n, c, h, w]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let mut rm = vec![0.0f64; c];
                    let mut rv = vec![1.0f64; c];
                    let (wt, bs) = if affine {
                        (Some(ids[1]), Some(ids[2]))
                    } else {
                        (None, None)
                    };
                    let y = g.bn2d_train(ids[0], wt, bs, &mut rm, &mut rv, 0.1, 1e-5)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "batchnorm_eval" => {
            let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 2, 3));
            let inputs = vec![rand_tensor(rng, &[n, c, h, w])];
            let rm: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let rv: Vec<f64> = (0..c).map(|_| rng.uniform(0.2, 2.0)).collect();
            let wt: Vec<f64> = (0..c).map(|_| rng.uniform(-1.5, 1.5)).collect();
            let bs: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let probe = rand_tensor(rng, &[n, c, h, w]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.bn2d_eval(ids[0], Some(&wt), Some(&bs), &rm, &rv, 1e-5)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "global_max_pool" => {
            let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let hw = dim(rng, 4, 9);
            let inputs = vec![rand_tensor_distinct(rng, n, c, hw)];
            let probe = rand_tensor(rng, &[n, c]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.global_max_pool(ids[0])?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "softmax_ce" => {
            let (n, a) = (dim(rng, 1, 3), dim(rng, 2, 5));
            let inputs = vec![rand_tensor(rng, &[n, a])];
            let targets: Vec<usize> = (0..n).map(|_| rng.below(a as u64) as usize).collect();
            Case {
                inputs,
                build: Box::new(move |g, ids| g.softmax_ce(ids[0], &targets)),
            }
        }
        "embedding" => {
            let (v, e) = (dim(rng, 2, 6), dim(rng, 1, 4));
            let t = dim(rng, 1, 5);
            let inputs = vec![rand_tensor(rng, &[v, e])];
            let ids_vec: Vec<usize> = (0..t).map(|_| rng.below(v as u64) as usize).collect();
            let probe = rand_tensor(rng, &[t, e]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.embedding(ids[0], &ids_vec)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "concat_channels" => {
            let (n, ca, cb, h, w) = (
                dim(rng, 1, 2),
                dim(rng, 1, 3),
                dim(rng, 1, 3),
                dim(rng, 2, 3),
                dim(rng, 2, 3),
            );
            let inputs = vec![
                rand_tensor(rng, &[n, ca, h, w]),
                rand_tensor(rng, &[n, cb, h, w]),
            ];
            let probe = rand_tensor(rng, &[n, ca + cb, h, w]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.concat_channels(ids[0], ids[1])?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "film" => {
            let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 2, 4), dim(rng, 2, 4));
            let inputs = vec![
                rand_tensor(rng, &[n, c, h, w]),
                rand_tensor(rng, &[n, c]),
                rand_tensor(rng, &[n, c]),
            ];
            let probe = rand_tensor(rng, &[n, c, h, w]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.film(ids[0], ids[1], ids[2])?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "slice_cols" => {
            let (n, m) = (dim(rng, 1, 3), dim(rng, 2, 6));
            let len = dim(rng, 1, m as u64);
            let start = rng.below((m - len + 1) as u64) as usize;
            let inputs = vec![rand_tensor(rng, &[n, m])];
            let probe = rand_tensor(rng, &[n, len]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.slice_cols(ids[0], start, len)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "mask_mix" => {
            let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let inputs = vec![rand_tensor(rng, &[n, m]), rand_tensor(rng, &[n, m])];
            let mask: Vec<f64> = (0..n).map(|_| if rng.coin(0.5) { 1.0 } else { 0.0 }).collect();
            let probe = rand_tensor(rng, &[n, m]);
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let y = g.mask_mix(ids[0], ids[1], &mask)?;
                    probe_loss(g, y, &probe)
                }),
            }
        }
        "sum_all" => {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 4)];
            let inputs = vec![rand_tensor(rng, &shape)];
            Case {
                inputs,
                build: Box::new(move |g, ids| Ok(g.sum_all(ids[0]))),
            }
        }
        other => panic!("no gradcheck case for op {other}"),
    }
}

pub const CORE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "affine_const",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "matmul",
    "add_row_bias",
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "global_max_pool",
    "softmax_ce",
    "embedding",
    "concat_channels",
    "film",
    "slice_cols",
    "mask_mix",
    "sum_all",
];

/// Sweep every primitive op over `cases` randomized shapes and values.
pub fn run_core_suite(cases: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let root = RngState::new(seed);
    let mut out = Vec::new();
    for (oi, &op) in CORE_OPS.iter().enumerate() {
        let mut rng = root.derive(oi as u64 + 1);
        let mut max_err = 0.0f64;
        for _ in 0..cases {
            let case = case_for(op, &mut rng);
            let err = check_loss_grads(&*case.build, &case.inputs, H)?;
            max_err = max_err.max(err);
        }
        out.push(CheckOutcome {
            op: op.to_string(),
            cases,
            max_rel_err: max_err,
            pass: max_err <= TOL,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_known_quadratic() {
        // f(x) = x0^2 + 3 x1, grad = (2 x0, 3).
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = finite_diff_grad(&mut f, &[1.5, -0.5], 1e-6);
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn core_suite_passes_at_tolerance() {
        // A quick version of the acceptance sweep: fewer cases, same ops.
        for outcome in run_core_suite(3, 0xF00D).unwrap() {
            assert!(
                outcome.pass,
                "{} failed: max rel err {:.3e}",
                outcome.op, outcome.max_rel_err
            );
        }
    }

    #[test]
    fn rel_err_handles_near_zero_pairs() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, -1e-12) < 1e-4);
        assert!(rel_err(1.0, 1.0001) < 2e-4);
        assert!(rel_err(1.0, 2.0) > 0.3);
    }
}
