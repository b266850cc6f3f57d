//! Attention sites of the agent, built on the tape.
//!
//! All functions take tape variables and return tape variables, so the same
//! code runs during training (with gradients) and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Linear, Tape, Tensor, TensorError, Var};

/// Distribution over configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAttention {
    pub alpha: Vec<f64>,
    pub step: usize,
}

impl StateAttention {
    /// Focused on the first of `m` configurations.
    pub fn initial(m: usize) -> Self {
        let mut alpha = vec![0.0; m];
        if m > 0 {
            alpha[0] = 1.0;
        }
        StateAttention { alpha, step: 0 }
    }
}

/// Stay/advance probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub gamma: [f64; 2],
}

/// `softmax(Q^T W K_j / sqrt(d_k))` over the rows of `keys`, then the
/// weighted sum of the rows of `values`. Returns `(attended, weights)`.
///
/// `w` is `[d_q, d_k]`; `keys` is `[n, d_k]`; `values` is `[n, d_v]`.
/// `mask[j] == true` excludes row `j`.
pub fn soft_attn(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    w: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let ks = tape.shape(keys).to_vec();
    let vs = tape.shape(values).to_vec();
    if ks.len() != 2 || ks[0] == 0 {
        return Err(Error::Invalid("soft attention needs at least one key".into()));
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(TensorError::Shape {
            op: "soft_attn",
            lhs: ks,
            rhs: vs,
        }
        .into());
    }
    let qw = tape.matvec_t(w, query)?;
    let scores = tape.matmul(keys, qw)?;
    let scores = tape.scale(scores, 1.0 / (ks[1] as f64).sqrt());
    let weights = tape.masked_softmax(scores, mask)?;
    let attended = tape.matvec_t(values, weights)?;
    Ok((attended, weights))
}

/// Summary of one configuration: attention over its contextual token
/// vectors `[n, d]` queried by the last row, the pseudo delimiter.
pub fn config_repr(tape: &mut Tape, tokens: Var, w: Var) -> Result<(Var, Var)> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Invalid("empty configuration".into()));
    }
    let delim = tape.row(tokens, s[0] - 1)?;
    soft_attn(tape, delim, tokens, tokens, w, None)
}

/// Attention over projected images `[n, d]` queried by the previous
/// decoder state.
pub fn image_attn(tape: &mut Tape, h_prev: Var, images: Var, w: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    soft_attn(tape, h_prev, images, images, w, mask)
}

/// `alpha_t = gamma_0 * alpha + gamma_1 * shift(alpha)`, with mass at the
/// last configuration kept in place instead of shifted out.
pub fn state_attn_update(tape: &mut Tape, alpha: Var, gamma: Var) -> Result<Var> {
    if tape.value(alpha).is_empty() {
        return Err(Error::Invalid("state attention over zero configurations".into()));
    }
    if tape.value(gamma).len() != 2 {
        return Err(TensorError::Shape {
            op: "state_attn_update",
            lhs: vec![2],
            rhs: tape.shape(gamma).to_vec(),
        }
        .into());
    }
    let g0 = tape.slice(gamma, 0, 1)?;
    let g1 = tape.slice(gamma, 1, 1)?;
    let stay = tape.mul_scalar(alpha, g0)?;
    let shifted = tape.shift_clamp(alpha)?;
    let advance = tape.mul_scalar(shifted, g1)?;
    Ok(tape.add(stay, advance)?)
}

/// Landmark and object embeddings feeding the similarity score.
///
/// `landmark_groups[i]` lists the rows of `landmarks` that belong to
/// configuration `i`; `object_groups[j]` lists the rows of `objects` shown
/// in image `j`.
pub struct SimilarityInput<'a> {
    pub landmarks: Option<Var>,
    pub landmark_groups: &'a [Vec<usize>],
    pub objects: Option<Var>,
    pub object_groups: &'a [Vec<usize>],
}

/// Per-image score `s_j = sum_i alpha_i * max_{l in i, k in j} cos(l, o_k)`,
/// zero-padded to `n_max`. Configurations without landmarks and images
/// without objects contribute zero.
pub fn similarity_score(tape: &mut Tape, input: &SimilarityInput, alpha: Var, n_max: usize) -> Result<Var> {
    let n = input.object_groups.len();
    if n > n_max {
        return Err(Error::Invalid(format!("{n} images exceed the limit of {n_max}")));
    }
    if tape.value(alpha).len() != input.landmark_groups.len() {
        return Err(TensorError::Shape {
            op: "similarity_score",
            lhs: vec![input.landmark_groups.len()],
            rhs: tape.shape(alpha).to_vec(),
        }
        .into());
    }
    let (Some(lm), Some(obj)) = (input.landmarks, input.objects) else {
        return Ok(tape.constant(Tensor::zeros(&[n_max])));
    };
    if n == 0 {
        return Ok(tape.constant(Tensor::zeros(&[n_max])));
    }
    let lm = tape.normalize_rows(lm);
    let obj = tape.normalize_rows(obj);
    let cos = tape.matmul_nt(lm, obj)?;
    let best = tape.group_max(cos, input.landmark_groups, input.object_groups)?;
    let s = tape.matvec_t(best, alpha)?;
    Ok(tape.pad(s, n_max)?)
}

/// `softmax(FC_gamma([h; I_bar; S]))`; `s` is omitted when the similarity
/// score is switched off.
pub fn predict_controller(tape: &mut Tape, fc: &Linear, h_prev: Var, img: Var, s: Option<Var>) -> Result<Var> {
    let x = match s {
        Some(s) => tape.concat(&[h_prev, img, s])?,
        None => tape.concat(&[h_prev, img])?,
    };
    if tape.value(x).len() != fc.in_dim {
        return Err(TensorError::Shape {
            op: "predict_controller",
            lhs: vec![fc.in_dim],
            rhs: tape.shape(x).to_vec(),
        }
        .into());
    }
    let logits = fc.forward(tape, x)?;
    Ok(tape.softmax(logits)?)
}

/// `sum_i alpha_i * bank_i` for a `[m, d]` bank of enriched configurations.
pub fn grounded_instruction(tape: &mut Tape, alpha: Var, bank: Var) -> Result<Var> {
    Ok(tape.matvec_t(bank, alpha)?)
}

/// Bilinear maps of the two object-alignment levels.
pub struct ObjectAlign {
    pub w_obj: Var,
    pub w_objimg: Var,
}

/// Two-level object alignment. Each image's objects `[k_j, d_o]` are
/// attended with the grounded instruction as query; the per-image results
/// are then attended with the decoder state, and that distribution weights
/// the projected images. Images without objects use a zero vector.
/// Returns `(aligned image vector, second-level weights)`.
pub fn object_align(
    tape: &mut Tape,
    w: &ObjectAlign,
    c_hat: Var,
    objects: &[Option<Var>],
    h_prev: Var,
    images: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let d_o = tape.shape(w.w_obj).get(1).copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(objects.len());
    for o in objects {
        let r = match o {
            Some(o) => soft_attn(tape, c_hat, *o, *o, w.w_obj, None)?.0,
            None => tape.zeros(d_o),
        };
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::Invalid("object alignment over zero images".into()));
    }
    let o_hat = tape.stack(&rows)?;
    soft_attn(tape, h_prev, o_hat, images, w.w_objimg, mask)
}

/// Value-level state attention update, evaluated through the tape.
pub fn state_attn_values(alpha: &[f64], gamma: [f64; 2]) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(alpha.to_vec()));
    let g = t.constant(Tensor::vector(gamma.to_vec()));
    let out = state_attn_update(&mut t, a, g)?;
    Ok(t.value(out).to_vec())
}

/// Value-level similarity score, evaluated through the tape. `landmarks[i]`
/// holds configuration `i`'s landmark vectors, `objects[j]` image `j`'s
/// object vectors.
pub fn similarity_values(landmarks: &[Vec<Vec<f64>>], objects: &[Vec<Vec<f64>>], alpha: &[f64], n_max: usize) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let (lm, lg) = flatten_groups(&mut t, landmarks)?;
    let (ob, og) = flatten_groups(&mut t, objects)?;
    let a = t.constant(Tensor::vector(alpha.to_vec()));
    let input = SimilarityInput {
        landmarks: lm,
        landmark_groups: &lg,
        objects: ob,
        object_groups: &og,
    };
    let s = similarity_score(&mut t, &input, a, n_max)?;
    Ok(t.value(s).to_vec())
}

fn flatten_groups(t: &mut Tape, groups: &[Vec<Vec<f64>>]) -> Result<(Option<Var>, Vec<Vec<usize>>)> {
    let mut data = Vec::new();
    let mut idx = Vec::with_capacity(groups.len());
    let mut next = 0;
    let mut d = None;
    for g in groups {
        let mut ids = Vec::with_capacity(g.len());
        for v in g {
            if *d.get_or_insert(v.len()) != v.len() {
                return Err(Error::Invalid("ragged embedding rows".into()));
            }
            data.extend_from_slice(v);
            ids.push(next);
            next += 1;
        }
        idx.push(ids);
    }
    let var = match d {
        Some(d) if next > 0 => Some(t.constant(Tensor::matrix(next, d, data)?)),
        _ => None,
    };
    Ok((var, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(t: &mut Tape, r: usize, c: usize, d: Vec<f64>) -> Var {
        t.constant(Tensor::matrix(r, c, d).unwrap())
    }

    fn vec_(t: &mut Tape, d: Vec<f64>) -> Var {
        t.constant(Tensor::vector(d))
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut t = Tape::new();
        let q = vec_(&mut t, vec![0.3, -1.2]);
        let k = mat(&mut t, 3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v = mat(&mut t, 3, 1, vec![1.0, 2.0, 6.0]);
        let w = t.constant(Tensor::identity(2));
        let (a, wts) = soft_attn(&mut t, q, k, v, w, None).unwrap();
        for x in t.value(wts) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((t.value(a)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_map_ignores_query() {
        let mut t = Tape::new();
        let q = vec_(&mut t, vec![5.0, -7.0]);
        let k = mat(&mut t, 2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let (_, wts) = soft_attn(&mut t, q, k, k, w, None).unwrap();
        assert_eq!(t.value(wts), &[0.5, 0.5]);
    }

    #[test]
    fn hand_computed_two_keys() {
        // q = (1, 0), keys (1, 0) and (0, 1), d_k = 2, W = I
        // scores (1/sqrt2, 0)
        let mut t = Tape::new();
        let q = vec_(&mut t, vec![1.0, 0.0]);
        let k = mat(&mut t, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = t.constant(Tensor::identity(2));
        let (a, wts) = soft_attn(&mut t, q, k, k, w, None).unwrap();
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((t.value(wts)[0] - w0).abs() < 1e-15);
        assert!((t.value(a)[0] - w0).abs() < 1e-15);
        assert!((t.value(a)[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn empty_keys_rejected() {
        let mut t = Tape::new();
        let q = vec_(&mut t, vec![1.0]);
        let k = t.constant(Tensor::new(vec![0, 1], vec![]).unwrap());
        let w = t.constant(Tensor::identity(1));
        assert!(soft_attn(&mut t, q, k, k, w, None).is_err());
    }

    #[test]
    fn masked_out_image_gets_no_weight() {
        let mut t = Tape::new();
        let h = vec_(&mut t, vec![1.0, 1.0]);
        let imgs = mat(&mut t, 2, 2, vec![4.0, 4.0, -1.0, 0.5]);
        let w = t.constant(Tensor::identity(2));
        let (a, wts) = image_attn(&mut t, h, imgs, w, Some(&[true, false])).unwrap();
        assert_eq!(t.value(wts), &[0.0, 1.0]);
        assert_eq!(t.value(a), &[-1.0, 0.5]);
        assert!(image_attn(&mut t, h, imgs, w, Some(&[true, true])).is_err());
    }

    #[test]
    fn single_image_and_zero_query() {
        let mut t = Tape::new();
        let h = vec_(&mut t, vec![0.0, 0.0]);
        let one = mat(&mut t, 1, 2, vec![0.2, 0.9]);
        let w = mat(&mut t, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (a, _) = image_attn(&mut t, h, one, w, None).unwrap();
        assert_eq!(t.value(a), &[0.2, 0.9]);
        let many = mat(&mut t, 3, 2, vec![1.0, 0.0, 0.0, 5.0, 2.0, 2.0]);
        let (_, wts) = image_attn(&mut t, h, many, w, None).unwrap();
        assert!(t.value(wts).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn config_repr_is_convex_pair() {
        let mut t = Tape::new();
        let c = mat(&mut t, 2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let w = mat(&mut t, 2, 2, vec![0.3, 0.1, -0.2, 0.4]);
        let (cbar, wts) = config_repr(&mut t, c, w).unwrap();
        let wv = t.value(wts).to_vec();
        let cv = t.value(cbar).to_vec();
        assert!((wv[0] + wv[1] - 1.0).abs() < 1e-15);
        assert!((cv[0] - (wv[0] * 1.0 + wv[1] * 0.5)).abs() < 1e-15);
        assert!((cv[1] - (wv[0] * -1.0 + wv[1] * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn config_repr_symmetric_in_identical_rows() {
        let mut t = Tape::new();
        let a = mat(&mut t, 3, 2, vec![1.0, 1.0, 0.0, 2.0, -1.0, 0.5]);
        let b = mat(&mut t, 3, 2, vec![1.0, 1.0, 0.0, 2.0, -1.0, 0.5]);
        let w = t.constant(Tensor::identity(2));
        let (x, _) = config_repr(&mut t, a, w).unwrap();
        let (y, _) = config_repr(&mut t, b, w).unwrap();
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn config_repr_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut t = Tape::new();
            let c = mat(&mut t, 6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let w = mat(&mut t, 4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (_, wts) = config_repr(&mut t, c, w).unwrap();
            let s: f64 = t.value(wts).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn state_attention_examples() {
        let a = state_attn_values(&[0.7, 0.3, 0.0], [0.4, 0.6]).unwrap();
        let want = [0.28, 0.54, 0.18];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-15, "{a:?}");
        }
        assert_eq!(state_attn_values(&[0.2, 0.5, 0.3], [1.0, 0.0]).unwrap(), [0.2, 0.5, 0.3]);
        assert_eq!(state_attn_values(&[0.0, 0.0, 1.0], [0.3, 0.7]).unwrap(), [0.0, 0.0, 1.0]);
        assert!(state_attn_values(&[], [0.5, 0.5]).is_err());
    }

    #[test]
    fn similarity_identical_vector_scores_one() {
        let lm = vec![vec![vec![1.0, 2.0, -1.0]], vec![]];
        let objs = vec![vec![vec![0.0, 1.0, 0.0]], vec![vec![2.0, 4.0, -2.0], vec![-1.0, 0.0, 0.0]]];
        let s = similarity_values(&lm, &objs, &[1.0, 0.0], 4).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert_eq!(s[2..], [0.0, 0.0]);
    }

    #[test]
    fn similarity_without_landmarks_is_zero() {
        let objs = vec![vec![vec![1.0, 0.0]]; 3];
        let s = similarity_values(&[vec![], vec![]], &objs, &[0.5, 0.5], 5).unwrap();
        assert_eq!(s, vec![0.0; 5]);
    }

    #[test]
    fn controller_zero_weights_is_even() {
        let mut store = crate::tensor::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::new(&mut store, &mut rng, "g", 5, 2, true).unwrap();
        store.get_mut(fc.weight).tensor.data.iter_mut().for_each(|x| *x = 0.0);
        let mut t = Tape::with_params(&store);
        let h = vec_(&mut t, vec![1.0, 2.0]);
        let i = vec_(&mut t, vec![3.0]);
        let s = vec_(&mut t, vec![4.0, 5.0]);
        let g = predict_controller(&mut t, &fc, h, i, Some(s)).unwrap();
        assert_eq!(t.value(g), &[0.5, 0.5]);
        assert!(predict_controller(&mut t, &fc, h, i, None).is_err());
    }

    #[test]
    fn grounded_one_hot_and_linearity() {
        let mut t = Tape::new();
        let bank = mat(&mut t, 2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]);
        let a = vec_(&mut t, vec![1.0, 0.0]);
        let g = grounded_instruction(&mut t, a, bank).unwrap();
        assert_eq!(t.value(g), &[1.0, 2.0, 3.0]);
        let a = vec_(&mut t, vec![0.3, 0.7]);
        let g1 = grounded_instruction(&mut t, a, bank).unwrap();
        let bank2 = t.scale(bank, 2.0);
        let g2 = grounded_instruction(&mut t, a, bank2).unwrap();
        for (x, y) in t.value(g1).iter().zip(t.value(g2)) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn object_align_singleton_and_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut t = Tape::new();
            let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let c_hat = t.constant(Tensor::vector(r(4)));
            let h = t.constant(Tensor::vector(r(3)));
            let imgs = t.constant(Tensor::matrix(3, 2, r(6)).unwrap());
            let o0 = t.constant(Tensor::matrix(1, 2, r(2)).unwrap());
            let o1 = t.constant(Tensor::matrix(2, 2, r(4)).unwrap());
            let w = ObjectAlign {
                w_obj: t.constant(Tensor::matrix(4, 2, r(8)).unwrap()),
                w_objimg: t.constant(Tensor::matrix(3, 2, r(6)).unwrap()),
            };
            let (single, _) = soft_attn(&mut t, c_hat, o0, o0, w.w_obj, None).unwrap();
            assert_eq!(t.value(single), t.value(o0));
            let (ihat, wts) = object_align(&mut t, &w, c_hat, &[Some(o0), Some(o1), None], h, imgs, None).unwrap();
            let s: f64 = t.value(wts).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let iv = t.value(imgs).to_vec();
            for (d, &x) in t.value(ihat).iter().enumerate() {
                let col: Vec<f64> = (0..3).map(|j| iv[j * 2 + d]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}
