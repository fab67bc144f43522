//! Depth-guided cross-attention and refinement.
//!
//! Pyramid stages are pooled to the stage-4 grid, concatenated along
//! channels, and flattened to tokens. Depth tokens form the queries; RGB
//! tokens provide keys and values. A self-attention pass refines the fused
//! tokens before they are reshaped back to a spatial map.

use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::nn::{xavier_uniform, ParamKind, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flattened stage-4-resolution tokens of one modality.
pub struct TokenMap<S: Scalar> {
    /// `[N, T, D]` with `T = h*w` in row-major spatial order.
    pub tokens: Tensor<S>,
    pub spatial: (usize, usize),
}

impl<S: Scalar> TokenMap<S> {
    pub fn token_count(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn model_dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Back to a `[N, D, h, w]` map.
    pub fn to_map(&self) -> Result<Tensor<S>, TensorError> {
        self.tokens.tokens_to_nchw(self.spatial)
    }
}

/// Pools every stage to the stage-4 grid, concatenates channels, and
/// flattens to tokens.
pub fn align_concat<S: Scalar>(stages: &[Tensor<S>; 4]) -> Result<TokenMap<S>, TensorError> {
    let last = stages[3].shape();
    let spatial = (last[2], last[3]);
    let mut aligned = Vec::with_capacity(4);
    for stage in stages {
        aligned.push(stage.resize_avg(spatial)?);
    }
    let combined = Tensor::concat(&aligned, 1)?;
    Ok(TokenMap {
        tokens: combined.nchw_to_tokens()?,
        spatial,
    })
}

/// Projection matrices of one attention block.
pub struct AttentionParams<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub heads: usize,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init(d_model: usize, heads: usize, rng: &mut ChaCha12Rng) -> Result<Self, TensorError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("head count {heads} must divide model dim {d_model}"),
            });
        }
        let mut mat = || xavier_uniform(rng, vec![d_model, d_model], d_model, d_model);
        Ok(AttentionParams {
            w_q: mat(),
            w_k: mat(),
            w_v: mat(),
            w_o: mat(),
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w_q.numel() + self.w_k.numel() + self.w_v.numel() + self.w_o.numel()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.w_q"), ParamKind::Learnable, &self.w_q);
        f(&format!("{prefix}.w_k"), ParamKind::Learnable, &self.w_k);
        f(&format!("{prefix}.w_v"), ParamKind::Learnable, &self.w_v);
        f(&format!("{prefix}.w_o"), ParamKind::Learnable, &self.w_o);
    }
}

/// Two-layer token MLP with expansion factor 4 (refinement option).
pub struct MlpParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn init(d_model: usize, rng: &mut ChaCha12Rng) -> Self {
        let hidden = 4 * d_model;
        MlpParams {
            w1: xavier_uniform(rng, vec![d_model, hidden], d_model, hidden),
            b1: Tensor::param(vec![hidden], vec![S::zero(); hidden]).expect("b1"),
            w2: xavier_uniform(rng, vec![hidden, d_model], hidden, d_model),
            b2: Tensor::param(vec![d_model], vec![S::zero(); d_model]).expect("b2"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.w1"), ParamKind::Learnable, &self.w1);
        f(&format!("{prefix}.b1"), ParamKind::Learnable, &self.b1);
        f(&format!("{prefix}.w2"), ParamKind::Learnable, &self.w2);
        f(&format!("{prefix}.b2"), ParamKind::Learnable, &self.b2);
    }
}

/// Learnable layer-norm scale/shift over the token dimension.
pub struct LnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LnParams<S> {
    pub fn init(d_model: usize) -> Self {
        LnParams {
            gamma: Tensor::param(vec![d_model], vec![S::one(); d_model]).expect("gamma"),
            beta: Tensor::param(vec![d_model], vec![S::zero(); d_model]).expect("beta"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, S::of_f64(1e-5))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.gamma"), ParamKind::Learnable, &self.gamma);
        f(&format!("{prefix}.beta"), ParamKind::Learnable, &self.beta);
    }
}

/// Multi-head scaled dot-product attention on already-projected tokens.
/// Returns the mixed tokens and the per-head attention weight matrices.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
) -> Result<(Tensor<S>, Vec<Tensor<S>>), TensorError> {
    let d_model = q.shape()[2];
    if d_model % heads != 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("head count {heads} must divide model dim {d_model}"),
        });
    }
    let d_k = d_model / heads;
    let scale = S::one() / S::of_f64((d_k as f64).sqrt());
    let mut mixed = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_axis(2, h * d_k, d_k)?;
        let kh = k.slice_axis(2, h * d_k, d_k)?;
        let vh = v.slice_axis(2, h * d_k, d_k)?;
        let logits = qh.matmul(&kh.transpose_last2()?)?.mul_scalar(scale);
        let attn = logits.softmax(2)?;
        mixed.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    Ok((Tensor::concat(&mixed, 2)?, weights))
}

fn check_token_compat<S: Scalar>(
    a: &TokenMap<S>,
    b: &TokenMap<S>,
) -> Result<(), TensorError> {
    if a.tokens.shape() != b.tokens.shape() {
        return Err(TensorError::Invalid {
            op: "cross_attention",
            msg: format!(
                "token shapes differ: {:?} vs {:?}",
                a.tokens.shape(),
                b.tokens.shape()
            ),
        });
    }
    Ok(())
}

/// Cross-attention with `q_src` queries over `kv_src` keys/values, output
/// projection, and an optional residual from the key/value stream.
pub fn cross_attention<S: Scalar>(
    q_src: &TokenMap<S>,
    kv_src: &TokenMap<S>,
    params: &AttentionParams<S>,
    residual: bool,
    ln: Option<&LnParams<S>>,
) -> Result<TokenMap<S>, TensorError> {
    check_token_compat(q_src, kv_src)?;
    let q = q_src.tokens.matmul(&params.w_q)?;
    let k = kv_src.tokens.matmul(&params.w_k)?;
    let v = kv_src.tokens.matmul(&params.w_v)?;
    let (mixed, _) = scaled_dot_attention(&q, &k, &v, params.heads)?;
    let mut out = mixed.matmul(&params.w_o)?;
    if residual {
        out = out.add(&kv_src.tokens)?;
    }
    if let Some(ln) = ln {
        out = ln.apply(&out)?;
    }
    Ok(TokenMap {
        tokens: out,
        spatial: q_src.spatial,
    })
}

/// Self-attention refinement with identity residual and optional MLP.
pub fn self_attention_refine<S: Scalar>(
    fused: &TokenMap<S>,
    params: &AttentionParams<S>,
    residual: bool,
    mlp: Option<&MlpParams<S>>,
    ln: Option<&LnParams<S>>,
) -> Result<TokenMap<S>, TensorError> {
    let q = fused.tokens.matmul(&params.w_q)?;
    let k = fused.tokens.matmul(&params.w_k)?;
    let v = fused.tokens.matmul(&params.w_v)?;
    let (mixed, _) = scaled_dot_attention(&q, &k, &v, params.heads)?;
    let mut out = mixed.matmul(&params.w_o)?;
    if residual {
        out = out.add(&fused.tokens)?;
    }
    if let Some(ln) = ln {
        out = ln.apply(&out)?;
    }
    if let Some(mlp) = mlp {
        let hidden = out.matmul(&mlp.w1)?.add_row_bias(&mlp.b1)?.relu();
        let expanded = hidden.matmul(&mlp.w2)?.add_row_bias(&mlp.b2)?;
        out = out.add(&expanded)?;
        if let Some(ln) = ln {
            out = ln.apply(&out)?;
        }
    }
    Ok(TokenMap {
        tokens: out,
        spatial: fused.spatial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    type T = Tensor<f64>;

    fn random_tokens(rng: &mut ChaCha12Rng, n: usize, t: usize, d: usize) -> TokenMap<f64> {
        let vals: Vec<f64> = (0..n * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenMap {
            tokens: T::from_vec(vec![n, t, d], vals).unwrap(),
            spatial: (t, 1),
        }
    }

    /// Brute-force attention with pre-divided queries and plain softmax.
    fn attention_oracle(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        t: usize,
        d_k: usize,
    ) -> Vec<f64> {
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut out = vec![0.0; t * d_k];
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for p in 0..d_k {
                    // queries pre-divided: (q*scale) . k
                    dot += q[i * d_k + p] * scale * k[j * d_k + p];
                }
                logits[j] = dot;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..t {
                let w = exps[j] / total;
                for p in 0..d_k {
                    out[i * d_k + p] += w * v[j * d_k + p];
                }
            }
        }
        out
    }

    #[test]
    fn align_concat_token_dims() {
        // synthetic pyramid with stage-4 grid 2x2 and channels (8,16,32,64)
        let stages = [
            T::full(vec![1, 8, 16, 16], 1.0),
            T::full(vec![1, 16, 8, 8], 2.0),
            T::full(vec![1, 32, 4, 4], 3.0),
            T::full(vec![1, 64, 2, 2], 4.0),
        ];
        let tokens = align_concat(&stages).unwrap();
        assert_eq!(tokens.token_count(), 4);
        assert_eq!(tokens.model_dim(), 120);
        // mean-preserving pooling keeps constant stages constant
        let tv = tokens.tokens.to_vec();
        for p in 0..4 {
            assert!(tv[p * 120..p * 120 + 8].iter().all(|&v| v == 1.0));
            assert!(tv[p * 120 + 8..p * 120 + 24].iter().all(|&v| v == 2.0));
            assert!(tv[p * 120 + 120 - 64..(p + 1) * 120].iter().all(|&v| v == 4.0));
        }
    }

    #[test]
    fn full_scale_token_geometry() {
        let stages = [
            T::zeros(vec![1, 64, 56, 56]),
            T::zeros(vec![1, 128, 28, 28]),
            T::zeros(vec![1, 256, 14, 14]),
            T::zeros(vec![1, 512, 7, 7]),
        ];
        let tokens = align_concat(&stages).unwrap();
        assert_eq!(tokens.token_count(), 49);
        assert_eq!(tokens.model_dim(), 960);
    }

    #[test]
    fn singleton_token_attention_weight_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let q = random_tokens(&mut rng, 1, 1, 4).tokens;
        let k = random_tokens(&mut rng, 1, 1, 4).tokens;
        let v = random_tokens(&mut rng, 1, 1, 4).tokens;
        let (out, weights) = scaled_dot_attention(&q, &k, &v, 2).unwrap();
        for w in &weights {
            assert_eq!(w.to_vec(), vec![1.0]);
        }
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn identical_queries_give_identical_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let kv = random_tokens(&mut rng, 1, 3, 4);
        let q_row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut qv = Vec::new();
        for _ in 0..3 {
            qv.extend_from_slice(&q_row);
        }
        let q = T::from_vec(vec![1, 3, 4], qv).unwrap();
        let (out, _) = scaled_dot_attention(&q, &kv.tokens, &kv.tokens, 1).unwrap();
        let ov = out.to_vec();
        assert_eq!(ov[0..4], ov[4..8]);
        assert_eq!(ov[0..4], ov[8..12]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let q = random_tokens(&mut rng, 2, 5, 8).tokens;
        let k = random_tokens(&mut rng, 2, 5, 8).tokens;
        let v = random_tokens(&mut rng, 2, 5, 8).tokens;
        let (_, weights) = scaled_dot_attention(&q, &k, &v, 4).unwrap();
        for w in &weights {
            let wv = w.to_vec();
            for row in wv.chunks(5) {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn matches_prescaled_oracle() {
        // two tokens, one head: trace exp/normalize/mix against the oracle
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (t, d_k) = (2usize, 2usize);
        let qv: Vec<f64> = (0..t * d_k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..t * d_k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..t * d_k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = T::from_vec(vec![1, t, d_k], qv.clone()).unwrap();
        let k = T::from_vec(vec![1, t, d_k], kv.clone()).unwrap();
        let v = T::from_vec(vec![1, t, d_k], vv.clone()).unwrap();
        let (out, _) = scaled_dot_attention(&q, &k, &v, 1).unwrap();
        let want = attention_oracle(&qv, &kv, &vv, t, d_k);
        for (got, want) in out.values().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (t, d, heads) = (3usize, 4usize, 2usize);
        let d_k = d / heads;
        let qv: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let slice_head = |src: &[f64], h: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(t * d_k);
            for i in 0..t {
                out.extend_from_slice(&src[i * d + h * d_k..i * d + (h + 1) * d_k]);
            }
            out
        };
        let q = T::from_vec(vec![1, t, d], qv.clone()).unwrap();
        let k = T::from_vec(vec![1, t, d], kv.clone()).unwrap();
        let v = T::from_vec(vec![1, t, d], vv.clone()).unwrap();
        let (out, _) = scaled_dot_attention(&q, &k, &v, heads).unwrap();
        let ov = out.to_vec();
        for h in 0..heads {
            let want = attention_oracle(
                &slice_head(&qv, h),
                &slice_head(&kv, h),
                &slice_head(&vv, h),
                t,
                d_k,
            );
            for i in 0..t {
                for p in 0..d_k {
                    let got = ov[i * d + h * d_k + p];
                    assert!((got - want[i * d_k + p]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_weights_with_residual_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let fused = random_tokens(&mut rng, 1, 4, 6);
        let params = AttentionParams::<f64>::init(6, 2, &mut rng).unwrap();
        for w in [&params.w_q, &params.w_k, &params.w_v, &params.w_o] {
            w.set_values(vec![0.0; w.numel()]);
        }
        let out = self_attention_refine(&fused, &params, true, None, None).unwrap();
        assert_eq!(out.tokens.to_vec(), fused.tokens.to_vec());
    }

    #[test]
    fn permutation_equivariance_holds() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (t, d) = (6usize, 4usize);
        let params = AttentionParams::<f64>::init(d, 2, &mut rng).unwrap();
        let q_src = random_tokens(&mut rng, 1, t, d);
        let kv_src = random_tokens(&mut rng, 1, t, d);
        let base = cross_attention(&q_src, &kv_src, &params, true, None).unwrap();
        let base_v = base.tokens.to_vec();

        for _ in 0..100 {
            // random permutation via seeded shuffle
            let mut perm: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permute = |src: &Tensor<f64>| -> Tensor<f64> {
                let sv = src.to_vec();
                let mut out = vec![0.0; sv.len()];
                for (dst, &s) in perm.iter().enumerate() {
                    out[dst * d..(dst + 1) * d].copy_from_slice(&sv[s * d..(s + 1) * d]);
                }
                T::from_vec(vec![1, t, d], out).unwrap()
            };
            let qp = TokenMap {
                tokens: permute(&q_src.tokens),
                spatial: q_src.spatial,
            };
            let kvp = TokenMap {
                tokens: permute(&kv_src.tokens),
                spatial: kv_src.spatial,
            };
            let permuted = cross_attention(&qp, &kvp, &params, true, None).unwrap();
            let pv = permuted.tokens.to_vec();
            for (dst, &s) in perm.iter().enumerate() {
                for p in 0..d {
                    let diff = (pv[dst * d + p] - base_v[s * d + p]).abs();
                    assert!(diff <= 1e-12, "perm mismatch {diff}");
                }
            }
        }
    }

    #[test]
    fn gradients_reach_projections_and_both_streams() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let params = AttentionParams::<f64>::init(4, 2, &mut rng).unwrap();
        let mk = |rng: &mut ChaCha12Rng| -> TokenMap<f64> {
            let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            TokenMap {
                tokens: T::param(vec![1, 2, 4], vals).unwrap(),
                spatial: (2, 1),
            }
        };
        let q_src = mk(&mut rng);
        let kv_src = mk(&mut rng);
        let fused = cross_attention(&q_src, &kv_src, &params, true, None).unwrap();
        let refined = self_attention_refine(&fused, &params, true, None, None).unwrap();
        refined
            .tokens
            .mul(&refined.tokens)
            .unwrap()
            .sum_all()
            .backward()
            .unwrap();
        for (name, t) in [
            ("w_q", &params.w_q),
            ("w_k", &params.w_k),
            ("w_v", &params.w_v),
            ("w_o", &params.w_o),
            ("q_src", &q_src.tokens),
            ("kv_src", &kv_src.tokens),
        ] {
            let g = t.grad().unwrap_or_else(|| panic!("no grad: {name}"));
            assert!(g.iter().any(|&v| v != 0.0), "zero grad: {name}");
        }
    }

    #[test]
    fn refine_mlp_and_layer_norm_paths_run() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let fused = random_tokens(&mut rng, 2, 4, 6);
        let params = AttentionParams::<f64>::init(6, 3, &mut rng).unwrap();
        let mlp = MlpParams::<f64>::init(6, &mut rng);
        let ln = LnParams::<f64>::init(6);
        let out = self_attention_refine(&fused, &params, true, Some(&mlp), Some(&ln)).unwrap();
        assert_eq!(out.tokens.shape(), fused.tokens.shape());
        assert!(out.tokens.values().iter().all(|v| v.is_finite()));
    }
}
