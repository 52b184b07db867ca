//! Finite-difference checks for every registered op on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Conv1dSpec, NodeId, SparseRows, Tape};
use crate::tensor::Tensor;

pub const OP_NAMES: &[&str] = &[
    "affine",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_column",
    "column",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "concat",
    "sum",
    "conv1d",
    "sparse_embed",
    "sparse_embed_values",
    "exp_decay",
    "cosine_rows",
    "bce_loss",
    "squared_loss",
    "dropout",
];

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Values bounded away from zero, for inputs of kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=16)
}

/// Reduces a node to a scalar through a fixed random weighting so that
/// every output coordinate gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = t.constant(weights.clone())?;
    let m = t.mul(x, w)?;
    t.sum(m)
}

/// Runs the gradient check of one op. Shapes are drawn from `seed`.
pub fn check_op(name: &str, seed: u64, config: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (n, d) = (dim(&mut rng), dim(&mut rng));
    let x_id = store.add("x", random_tensor(&mut rng, n, d))?;
    let out_w = random_tensor(&mut rng, n, d);

    macro_rules! run {
        ($params:expr, $f:expr) => {{
            let params: Vec<ParamId> = $params;
            grad_check(&mut store, &params, config, $f)
        }};
    }

    match name {
        "affine" => {
            let m = dim(&mut rng);
            let w = store.add("w", random_tensor(&mut rng, d, m))?;
            let b = store.add("b", random_tensor(&mut rng, 1, m))?;
            let ow = random_tensor(&mut rng, n, m);
            run!(vec![x_id, w, b], |t| {
                let (x, wn, bn) = (t.param(x_id)?, t.param(w)?, t.param(b)?);
                let y = t.affine(x, wn, Some(bn))?;
                weighted_sum(t, y, &ow)
            })
        }
        "add" | "sub" | "mul" => {
            let y_id = store.add("y", random_tensor(&mut rng, n, d))?;
            let op = name.to_string();
            run!(vec![x_id, y_id], |t| {
                let (x, y) = (t.param(x_id)?, t.param(y_id)?);
                let z = match op.as_str() {
                    "add" => t.add(x, y)?,
                    "sub" => t.sub(x, y)?,
                    _ => t.mul(x, y)?,
                };
                weighted_sum(t, z, &out_w)
            })
        }
        "scale" => run!(vec![x_id], |t| {
            let x = t.param(x_id)?;
            let y = t.scale(x, -1.7)?;
            weighted_sum(t, y, &out_w)
        }),
        "mul_column" => {
            let c = store.add("c", random_tensor(&mut rng, n, 1))?;
            run!(vec![x_id, c], |t| {
                let (x, cn) = (t.param(x_id)?, t.param(c)?);
                let y = t.mul_column(x, cn)?;
                weighted_sum(t, y, &out_w)
            })
        }
        "column" => {
            let k = rng.gen_range(0..d);
            let ow = random_tensor(&mut rng, n, 1);
            run!(vec![x_id], |t| {
                let x = t.param(x_id)?;
                let y = t.column(x, k)?;
                weighted_sum(t, y, &ow)
            })
        }
        "relu" => {
            *store.value_mut(x_id) = away_from_zero(&mut rng, n, d);
            run!(vec![x_id], |t| {
                let x = t.param(x_id)?;
                let y = t.relu(x)?;
                weighted_sum(t, y, &out_w)
            })
        }
        "sigmoid" | "softplus" | "softmax" => {
            let op = name.to_string();
            run!(vec![x_id], |t| {
                let x = t.param(x_id)?;
                let y = match op.as_str() {
                    "sigmoid" => t.sigmoid(x)?,
                    "softplus" => t.softplus(x)?,
                    _ => t.softmax(x)?,
                };
                weighted_sum(t, y, &out_w)
            })
        }
        "concat" => {
            let d2 = dim(&mut rng);
            let y_id = store.add("y", random_tensor(&mut rng, n, d2))?;
            let ow = random_tensor(&mut rng, n, d + d2 + d);
            run!(vec![x_id, y_id], |t| {
                let (x, y) = (t.param(x_id)?, t.param(y_id)?);
                let z = t.concat(&[x, y, x])?;
                weighted_sum(t, z, &ow)
            })
        }
        "sum" => run!(vec![x_id], |t| {
            let x = t.param(x_id)?;
            let s = t.sum(x)?;
            t.scale(s, 0.3)
        }),
        "conv1d" => {
            let channels_in = rng.gen_range(1..=4);
            let channels_out = rng.gen_range(1..=3);
            let len = dim(&mut rng);
            let width = [1, 3, 5][rng.gen_range(0..3)];
            let spec = Conv1dSpec {
                channels_in,
                channels_out,
                len,
                width,
            };
            let xin = store.add("conv.x", random_tensor(&mut rng, n, channels_in * len))?;
            let k = store.add(
                "conv.k",
                random_tensor(&mut rng, channels_out, channels_in * width),
            )?;
            let b = store.add("conv.b", random_tensor(&mut rng, 1, channels_out))?;
            let ow = random_tensor(&mut rng, n, channels_out * len);
            run!(vec![xin, k, b], |t| {
                let (x, kn, bn) = (t.param(xin)?, t.param(k)?, t.param(b)?);
                let y = t.conv1d(x, kn, bn, spec)?;
                weighted_sum(t, y, &ow)
            })
        }
        "sparse_embed" | "sparse_embed_values" => {
            let table_rows = dim(&mut rng);
            let table = store.add("table", random_tensor(&mut rng, table_rows, d))?;
            let with_values = name == "sparse_embed_values";
            let mut rows = SparseRows::new();
            for _ in 0..n {
                let k = rng.gen_range(usize::from(with_values)..=3);
                let entries: Vec<(usize, f64)> = (0..k)
                    .map(|_| (rng.gen_range(0..table_rows), rng.gen_range(-2.0..2.0)))
                    .collect();
                rows.push_row(entries);
            }
            let nnz = rows.nnz().max(1);
            let vals = store.add("values", random_tensor(&mut rng, nnz, 1))?;
            let params = if with_values { vec![table, vals] } else { vec![table] };
            run!(params, |t| {
                let values = if with_values { Some(t.param(vals)?) } else { None };
                let y = t.sparse_embed(table, rows.clone(), values)?;
                weighted_sum(t, y, &out_w)
            })
        }
        "exp_decay" => {
            let theta = store.add("theta", random_tensor(&mut rng, 1, d))?;
            let m = rng.gen_range(1..=16);
            let index: Vec<usize> = (0..m).map(|_| rng.gen_range(0..d)).collect();
            let dt: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
            let ow = random_tensor(&mut rng, m, 1);
            run!(vec![theta], |t| {
                let th = t.param(theta)?;
                let y = t.exp_decay(th, index.clone(), dt.clone())?;
                weighted_sum(t, y, &ow)
            })
        }
        "cosine_rows" => {
            let y_id = store.add("y", random_tensor(&mut rng, n, d))?;
            let ow = random_tensor(&mut rng, n, 1);
            run!(vec![x_id, y_id], |t| {
                let (x, y) = (t.param(x_id)?, t.param(y_id)?);
                let c = t.cosine_rows(x, y)?;
                weighted_sum(t, c, &ow)
            })
        }
        "bce_loss" => {
            let logits = store.add("logits", random_tensor(&mut rng, n, 1))?;
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            run!(vec![logits], |t| {
                let z = t.param(logits)?;
                let p = t.sigmoid(z)?;
                t.bce_loss(p, &labels)
            })
        }
        "squared_loss" => {
            let pred = store.add("pred", random_tensor(&mut rng, n, 1))?;
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            run!(vec![pred], |t| {
                let p = t.param(pred)?;
                t.squared_loss(p, &targets)
            })
        }
        "dropout" => {
            let mask: Vec<f64> = (0..n * d)
                .map(|_| if rng.gen_bool(0.8) { 1.25 } else { 0.0 })
                .collect();
            run!(vec![x_id], |t| {
                let x = t.param(x_id)?;
                let y = t.dropout(x, mask.clone())?;
                weighted_sum(t, y, &out_w)
            })
        }
        other => Err(crate::error::EngineError::InvalidArgument(format!(
            "no gradient check registered for `{other}`"
        ))),
    }
}

/// Checks every op in [`OP_NAMES`] once per seed.
pub fn check_all_ops(seeds: &[u64], config: GradCheckConfig) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for name in OP_NAMES {
        let mut worst: f64 = 0.0;
        for &s in seeds {
            worst = worst.max(check_op(name, s, config)?.max_rel_error);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
