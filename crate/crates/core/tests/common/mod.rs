//! Random operator instances for gradient checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spcnav::attention::{
    config_repr, grounded_instruction, object_align, predict_controller, similarity_score, soft_attn, state_attn_update, ObjectAlign,
    SimilarityInput,
};
use spcnav::tensor::gradcheck::{check_inputs, check_params};
use spcnav::tensor::{Linear, LstmCell, LstmState, ParamStore, Tape, Tensor, TensorError, Var};

pub const OPS: &[&str] = &[
    "matmul", "matmul_vec", "matvec_t", "matmul_nt", "add", "sub", "mul", "scale", "mul_scalar", "dot", "sum", "concat", "slice", "row",
    "stack", "tanh", "sigmoid", "relu", "softmax", "masked_softmax", "cross_entropy", "mse", "normalize_rows", "group_max", "gather_rows",
    "mean_rows", "shift_clamp", "pad", "linear", "lstm", "soft_attn", "config_repr", "state_attn", "similarity", "controller", "grounded",
    "object_align",
];

fn te(e: spcnav::Error) -> TensorError {
    TensorError::Invalid(e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(uniform(rng, n))
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c)).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Contracts `v` with fixed pseudo-random weights so every output entry
/// reaches the loss with a distinct coefficient.
fn project(t: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut r = ChaCha8Rng::seed_from_u64(n as u64 * 7919 + shape.len() as u64);
    let w = t.constant(Tensor::new(shape, uniform(&mut r, n))?);
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn random_groups(rng: &mut ChaCha8Rng, groups: usize, rows: usize, allow_empty: bool) -> Vec<Vec<usize>> {
    (0..groups)
        .map(|_| {
            let lo = if allow_empty { 0 } else { 1 };
            let k = rng.gen_range(lo..=rows.min(3));
            (0..k).map(|_| rng.gen_range(0..rows)).collect()
        })
        .collect()
}

fn params_error(mut store: ParamStore, f: impl Fn(&mut Tape) -> Result<Var, TensorError>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    check_params(&mut store, None, &mut rng, f)
        .unwrap()
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max)
}

/// Largest relative error between analytic and central-difference
/// gradients for one random instance of `op`.
pub fn op_error(op: &str, seed: u64) -> f64 {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let run = |inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>| check_inputs(&inputs, f).unwrap();
    match op {
        "matmul" => run(vec![matrix(rng, m, k), matrix(rng, k, n)], &|t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o)
        }),
        "matmul_vec" => run(vec![matrix(rng, m, k), vector(rng, k)], &|t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o)
        }),
        "matvec_t" => run(vec![matrix(rng, m, k), vector(rng, m)], &|t, v| {
            let o = t.matvec_t(v[0], v[1])?;
            project(t, o)
        }),
        "matmul_nt" => run(vec![matrix(rng, m, k), matrix(rng, n, k)], &|t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            project(t, o)
        }),
        "add" | "sub" | "mul" => {
            let op = op.to_string();
            run(vec![matrix(rng, m, k), matrix(rng, m, k)], &move |t, v| {
                let o = match op.as_str() {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, o)
            })
        }
        "scale" => {
            let c = rng.gen_range(-2.0..2.0);
            run(vec![vector(rng, m)], &move |t, v| {
                let o = t.scale(v[0], c);
                project(t, o)
            })
        }
        "mul_scalar" => run(vec![vector(rng, m), vector(rng, 1)], &|t, v| {
            let o = t.mul_scalar(v[0], v[1])?;
            project(t, o)
        }),
        "dot" => run(vec![vector(rng, m), vector(rng, m)], &|t, v| t.dot(v[0], v[1])),
        "sum" => run(vec![matrix(rng, m, k)], &|t, v| {
            let s = t.sum(v[0]);
            let s2 = t.mul(s, s)?;
            Ok(s2)
        }),
        "concat" => run(vec![vector(rng, m), vector(rng, k), vector(rng, n)], &|t, v| {
            let o = t.concat(v)?;
            project(t, o)
        }),
        "slice" => {
            let len = m + k;
            let start = rng.gen_range(0..len);
            let take = rng.gen_range(1..=len - start);
            run(vec![vector(rng, len)], &move |t, v| {
                let o = t.slice(v[0], start, take)?;
                project(t, o)
            })
        }
        "row" => {
            let i = rng.gen_range(0..m);
            run(vec![matrix(rng, m, k)], &move |t, v| {
                let o = t.row(v[0], i)?;
                project(t, o)
            })
        }
        "stack" => run(vec![vector(rng, k), vector(rng, k), vector(rng, k)], &|t, v| {
            let o = t.stack(v)?;
            project(t, o)
        }),
        "tanh" | "sigmoid" => {
            let tanh = op == "tanh";
            run(vec![vector(rng, m + 1)], &move |t, v| {
                let o = if tanh { t.tanh(v[0]) } else { t.sigmoid(v[0]) };
                project(t, o)
            })
        }
        "relu" => {
            let data = (0..m + 2)
                .map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            run(vec![Tensor::vector(data)], &|t, v| {
                let o = t.relu(v[0]);
                project(t, o)
            })
        }
        "softmax" => run(vec![vector(rng, m + 1)], &|t, v| {
            let o = t.softmax(v[0])?;
            project(t, o)
        }),
        "masked_softmax" => {
            let len = m + 2;
            let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.3)).collect();
            mask[rng.gen_range(0..len)] = false;
            run(vec![vector(rng, len)], &move |t, v| {
                let o = t.masked_softmax(v[0], Some(&mask))?;
                project(t, o)
            })
        }
        "cross_entropy" => {
            let target = rng.gen_range(0..m + 1);
            run(vec![vector(rng, m + 1)], &move |t, v| t.cross_entropy(v[0], target))
        }
        "mse" => run(vec![vector(rng, m), vector(rng, m)], &|t, v| t.mse(v[0], v[1])),
        "normalize_rows" => run(vec![matrix(rng, m, k + 1)], &|t, v| {
            let o = t.normalize_rows(v[0]);
            project(t, o)
        }),
        "group_max" => {
            let (rows, cols) = (m + 1, k + 1);
            let (gr, gc) = (dim(rng), dim(rng));
            let rg = random_groups(rng, gr, rows, true);
            let cg = random_groups(rng, gc, cols, true);
            run(vec![matrix(rng, rows, cols)], &move |t, v| {
                let o = t.group_max(v[0], &rg, &cg)?;
                project(t, o)
            })
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..n + 1).map(|_| rng.gen_range(0..m)).collect();
            run(vec![matrix(rng, m, k)], &move |t, v| {
                let o = t.gather_rows(v[0], &idx)?;
                project(t, o)
            })
        }
        "mean_rows" => run(vec![matrix(rng, m, k)], &|t, v| {
            let o = t.mean_rows(v[0])?;
            project(t, o)
        }),
        "shift_clamp" => run(vec![vector(rng, m + 1)], &|t, v| {
            let o = t.shift_clamp(v[0])?;
            project(t, o)
        }),
        "pad" => {
            let to = m + rng.gen_range(0..3);
            run(vec![vector(rng, m)], &move |t, v| {
                let o = t.pad(v[0], to)?;
                project(t, o)
            })
        }
        "linear" => {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, rng, "fc", k, n, true).unwrap();
            for p in store.iter_mut() {
                p.tensor.data = uniform(rng, p.tensor.data.len());
            }
            let x = vector(rng, k);
            params_error(store, move |t| {
                let xv = t.constant(x.clone());
                let o = lin.forward(t, xv)?;
                project(t, o)
            })
        }
        "lstm" => {
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, rng, "cell", k, n).unwrap();
            let (x1, x2) = (vector(rng, k), vector(rng, k));
            params_error(store, move |t| {
                let mut s = LstmState::zeros(t, n);
                for x in [&x1, &x2] {
                    let xv = t.constant(x.clone());
                    s = cell.forward(t, xv, s)?;
                }
                let o = t.concat(&[s.h, s.c])?;
                project(t, o)
            })
        }
        "soft_attn" => {
            let mut mask: Vec<bool> = (0..m + 1).map(|_| rng.gen_bool(0.3)).collect();
            mask[0] = false;
            run(
                vec![vector(rng, k), matrix(rng, m + 1, n), matrix(rng, m + 1, k + 1), matrix(rng, k, n)],
                &move |t, v| {
                    let (o, w) = soft_attn(t, v[0], v[1], v[2], v[3], Some(&mask)).map_err(te)?;
                    let a = project(t, o)?;
                    let b = project(t, w)?;
                    t.add(a, b)
                },
            )
        }
        "config_repr" => run(vec![matrix(rng, m + 1, k), matrix(rng, k, k)], &|t, v| {
            let (o, w) = config_repr(t, v[0], v[1]).map_err(te)?;
            let a = project(t, o)?;
            let b = project(t, w)?;
            t.add(a, b)
        }),
        "state_attn" => run(vec![vector(rng, m + 1), vector(rng, 2)], &|t, v| {
            let o = state_attn_update(t, v[0], v[1]).map_err(te)?;
            project(t, o)
        }),
        "similarity" => {
            let (configs, images) = (m + 1, n + 1);
            let (nl, no) = (dim(rng), dim(rng) + 1);
            let lg = random_groups(rng, configs, nl, true);
            let og = random_groups(rng, images, no, true);
            let n_max = images + rng.gen_range(0..3);
            run(vec![matrix(rng, nl, k + 1), matrix(rng, no, k + 1), vector(rng, configs)], &move |t, v| {
                let input = SimilarityInput {
                    landmarks: Some(v[0]),
                    landmark_groups: &lg,
                    objects: Some(v[1]),
                    object_groups: &og,
                };
                let o = similarity_score(t, &input, v[2], n_max).map_err(te)?;
                project(t, o)
            })
        }
        "controller" => {
            let mut store = ParamStore::new();
            let fc = Linear::new(&mut store, rng, "fc_gamma", m + k + n, 2, true).unwrap();
            let (h, img, s) = (vector(rng, m), vector(rng, k), vector(rng, n));
            params_error(store, move |t| {
                let (hv, iv, sv) = (t.constant(h.clone()), t.constant(img.clone()), t.constant(s.clone()));
                let g = predict_controller(t, &fc, hv, iv, Some(sv)).map_err(te)?;
                project(t, g)
            })
        }
        "grounded" => run(vec![vector(rng, m), matrix(rng, m, k)], &|t, v| {
            let o = grounded_instruction(t, v[0], v[1]).map_err(te)?;
            project(t, o)
        }),
        "object_align" => {
            let images = m + 1;
            let (d_c, d_o, d_h, d_i) = (k, n, dim(rng), dim(rng));
            let counts: Vec<usize> = (0..images).map(|j| if j == 0 { 1 } else { rng.gen_range(0..3) }).collect();
            let mut inputs = vec![matrix(rng, d_c, d_o), matrix(rng, d_h, d_o), vector(rng, d_c), vector(rng, d_h), matrix(rng, images, d_i)];
            for &c in counts.iter().filter(|&&c| c > 0) {
                inputs.push(matrix(rng, c, d_o));
            }
            run(inputs, &move |t, v| {
                let mut next = 5;
                let objects: Vec<Option<Var>> = counts
                    .iter()
                    .map(|&c| {
                        (c > 0).then(|| {
                            next += 1;
                            v[next - 1]
                        })
                    })
                    .collect();
                let w = ObjectAlign {
                    w_obj: v[0],
                    w_objimg: v[1],
                };
                let (o, wts) = object_align(t, &w, v[2], &objects, v[3], v[4], None).map_err(te)?;
                let a = project(t, o)?;
                let b = project(t, wts)?;
                t.add(a, b)
            })
        }
        other => panic!("unknown op {other}"),
    }
}

/// Full convolution of `alpha` with the kernel `[g0, g1]`, with the entry
/// that falls off the end folded back onto the last configuration.
pub fn state_oracle(alpha: &[f64], gamma: [f64; 2]) -> Vec<f64> {
    let m = alpha.len();
    let kernel = [gamma[0], gamma[1]];
    let mut full = vec![0.0; m + 1];
    for (i, a) in alpha.iter().enumerate() {
        for (d, g) in kernel.iter().enumerate() {
            full[i + d] += a * g;
        }
    }
    let spill = full.pop().unwrap();
    full[m - 1] += spill;
    full
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Nested-loop similarity score zero-padded to `n_max`.
pub fn similarity_oracle(landmarks: &[Vec<Vec<f64>>], objects: &[Vec<Vec<f64>>], alpha: &[f64], n_max: usize) -> Vec<f64> {
    let mut s = vec![0.0; n_max];
    for (j, objs) in objects.iter().enumerate() {
        for (i, lms) in landmarks.iter().enumerate() {
            if lms.is_empty() || objs.is_empty() {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for l in lms {
                for o in objs {
                    best = best.max(cosine(l, o));
                }
            }
            s[j] += alpha[i] * best;
        }
    }
    s
}

pub fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0f64) + 1e-3).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

/// Random similarity instance: `(landmarks, objects, alpha, n_max)`. Some
/// configurations and images are left empty.
#[allow(clippy::type_complexity)]
pub fn similarity_instance(rng: &mut ChaCha8Rng, zero_landmarks: bool) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<f64>, usize) {
    let m = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=8);
    let d = rng.gen_range(2..=8);
    let landmarks = (0..m)
        .map(|_| {
            let k = if zero_landmarks { 0 } else { rng.gen_range(0..=3) };
            (0..k).map(|_| uniform(rng, d)).collect()
        })
        .collect();
    let objects = (0..n)
        .map(|_| {
            let k = rng.gen_range(0..=4);
            (0..k).map(|_| uniform(rng, d)).collect()
        })
        .collect();
    let alpha = random_simplex(rng, m);
    let n_max = n + rng.gen_range(0..4);
    (landmarks, objects, alpha, n_max)
}
