//! Token importance scoring, top-k masks, and the gather-process-scatter
//! composition around a sequence block.
//!
//! Selection is a hard routing decision: gradients flow through the gathered
//! token values (and through the scores where the model gates by them), never
//! through the index choice itself.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore, TapeBinding};
use crate::scalar::Scalar;
use crate::ssm::MambaBlock;
use crate::tensor::tape::{NodeId, Tape};

/// Ordered top-k index set over one token axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub source_len: usize,
    /// Strictly increasing positions of the selected tokens.
    pub indices: Vec<usize>,
}

impl SelectionMask {
    pub fn new(source_len: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.len() > source_len {
            return Err(Error::Contract(format!(
                "mask size {} out of range [1, {source_len}]",
                indices.len()
            )));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Contract("mask indices must be strictly increasing".into()));
            }
        }
        if *indices.last().unwrap() >= source_len {
            return Err(Error::Contract(format!(
                "mask index {} out of range for {source_len} tokens",
                indices.last().unwrap()
            )));
        }
        Ok(SelectionMask { source_len, indices })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn full(source_len: usize) -> Self {
        SelectionMask { source_len, indices: (0..source_len).collect() }
    }
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// returned in ascending index order.
pub fn topk_mask(scores: &[f64], k: usize) -> Result<SelectionMask> {
    let len = scores.len();
    if k == 0 || k > len {
        return Err(Error::Contract(format!("top-k with k = {k} out of range [1, {len}]")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    // Stable descending sort keeps equal scores in index order.
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    SelectionMask::new(len, selected)
}

// ── Attention-logit scorer (spectral / temporal branches) ───────────

/// γ_i = mean over heads and key positions of the √d_k-scaled pre-softmax
/// logits. Because the mean runs over every key, this reduces to a dot with
/// the summed key vector; no L×L matrix is formed.
#[derive(Clone, Debug)]
pub struct AttentionScorer {
    pub heads: usize,
    pub d_k: usize,
    pub feat: usize,
    w_q: ParamId,
    w_k: ParamId,
}

impl AttentionScorer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        feat: usize,
        heads: usize,
        d_k: usize,
    ) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::Config("attention scorer requires d_k ≥ 1".into()));
        }
        if heads == 0 {
            return Err(Error::Config("attention scorer requires at least one head".into()));
        }
        let width = heads * d_k;
        Ok(AttentionScorer {
            heads,
            d_k,
            feat,
            w_q: store.add(format!("{prefix}.w_q"), vec![feat, width], fan_in_uniform(rng, feat, feat * width), true),
            w_k: store.add(format!("{prefix}.w_k"), vec![feat, width], fan_in_uniform(rng, feat, feat * width), true),
        })
    }

    /// tokens: [rows, L, feat] → scores [rows, L].
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &TapeBinding, tokens: NodeId) -> Result<NodeId> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.feat {
            return Err(Error::Dimension(format!(
                "attention scorer expects [rows, L, {}], got {shape:?}",
                self.feat
            )));
        }
        let (rows, l) = (shape[0], shape[1]);
        let width = self.heads * self.d_k;
        let flat = tape.reshape(tokens, vec![rows * l, self.feat])?;
        let q = tape.matmul(flat, bind.node(self.w_q)?)?;
        let k = tape.matmul(flat, bind.node(self.w_k)?)?;
        let q3 = tape.reshape(q, vec![rows, l, width])?;
        let k3 = tape.reshape(k, vec![rows, l, width])?;
        let ksum = tape.sum_axis(k3, 1)?;
        let ksum3 = tape.reshape(ksum, vec![rows, 1, width])?;
        let prod = tape.mul_broadcast_mid(q3, ksum3)?;
        let raw = tape.sum_axis(prod, 2)?;
        let norm = 1.0 / (self.heads as f64 * l as f64 * (self.d_k as f64).sqrt());
        tape.scale(raw, S::from_f64(norm))
    }

    pub fn param_count(feat: usize, heads: usize, d_k: usize) -> usize {
        2 * feat * heads * d_k
    }
}

/// Literal evaluation of the same score from explicit Q, K matrices
/// ([L, heads·d_k] each): forms the full logit matrix per head and averages.
/// Reference path for tests.
pub fn attention_scores_from_qk(q: &[f64], k: &[f64], l: usize, heads: usize, d_k: usize) -> Vec<f64> {
    let width = heads * d_k;
    assert_eq!(q.len(), l * width);
    assert_eq!(k.len(), l * width);
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut gamma = vec![0.0f64; l];
    for (i, g) in gamma.iter_mut().enumerate() {
        let mut acc = 0.0;
        for h in 0..heads {
            for j in 0..l {
                let mut dot = 0.0;
                for p in 0..d_k {
                    dot += q[i * width + h * d_k + p] * k[j * width + h * d_k + p];
                }
                acc += dot * scale;
            }
        }
        *g = acc / (heads as f64 * l as f64);
    }
    gamma
}

// ── Cosine-to-center scorer (spatial branch) ────────────────────────

/// γ = softmax over tokens of each token's cosine similarity to the center
/// token; Σγ = 1 per sample.
#[derive(Clone, Copy, Debug)]
pub struct CosineScorer {
    pub center: usize,
}

impl CosineScorer {
    /// tokens: [rows, L, d] → scores [rows, L].
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, tokens: NodeId) -> Result<NodeId> {
        let cos = tape.cosine_to_center(tokens, self.center)?;
        tape.softmax(cos, 1)
    }
}

// ── Gather → block → scatter ────────────────────────────────────────

/// Row-major index table for a batch of per-row masks (all of size k).
pub fn mask_table(masks: &[SelectionMask]) -> Result<(Arc<Vec<usize>>, usize)> {
    let k = masks.first().map(|m| m.k()).ok_or_else(|| Error::Contract("no masks".into()))?;
    let mut table = Vec::with_capacity(masks.len() * k);
    for m in masks {
        if m.k() != k {
            return Err(Error::Contract("masks in one batch must share k".into()));
        }
        table.extend_from_slice(&m.indices);
    }
    Ok((Arc::new(table), k))
}

/// F_new = Mᵀ · Block(M · F): gather the selected tokens (order preserved),
/// run the block on the compacted sequence, scatter the outputs back to
/// their original positions with exact zeros elsewhere.
pub fn sparse_branch<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &TapeBinding,
    tokens: NodeId,
    masks: &[SelectionMask],
    block: &MambaBlock,
) -> Result<NodeId> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("sparse_branch expects [rows, L, feat], got {shape:?}")));
    }
    let (rows, l) = (shape[0], shape[1]);
    if masks.len() != rows {
        return Err(Error::Contract(format!("{} masks for {rows} rows", masks.len())));
    }
    if let Some(bad) = masks.iter().find(|m| m.source_len != l) {
        return Err(Error::Contract(format!(
            "mask over {} tokens applied to a {l}-token axis",
            bad.source_len
        )));
    }
    let (table, k) = mask_table(masks)?;
    let gathered = tape.gather_tokens(tokens, Arc::clone(&table), k)?;
    let processed = block.forward(tape, bind, gathered)?;
    tape.scatter_tokens(processed, table, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::{substream, Stream};
    use crate::tensor::Tensor;

    #[test]
    fn topk_basics_and_ties() {
        let m = topk_mask(&[4.0, 0.0], 1).unwrap();
        assert_eq!(m.indices, vec![0]);

        let m = topk_mask(&[1.0, 3.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(m.indices, vec![1, 3]); // ties toward lower index, sorted

        let m = topk_mask(&[0.5; 6], 6).unwrap();
        assert_eq!(m.indices, (0..6).collect::<Vec<_>>());

        assert!(matches!(topk_mask(&[1.0], 0), Err(Error::Contract(_))));
        assert!(matches!(topk_mask(&[1.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn topk_matches_brute_force_with_ties() {
        let mut rng = substream(21, Stream::Test, 0);
        for trial in 0..1000 {
            let len = rng.gen_range(1..20usize);
            // Coarse quantization forces frequent ties.
            let scores: Vec<f64> = (0..len).map(|_| (rng.gen_range(-5..5) as f64) * 0.5).collect();
            let k = rng.gen_range(1..=len);

            // Oracle: sort all (score, index) pairs by score desc, index asc.
            let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..len).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            expect.sort_unstable();

            let got = topk_mask(&scores, k).unwrap();
            assert_eq!(got.indices, expect, "trial {trial}: scores {scores:?} k {k}");
        }
    }

    #[test]
    fn attention_scores_hand_example() {
        // H = 1, d_k = 1, Q = [[2],[0]], K = [[1],[3]] ⇒ logits [[2,6],[0,0]] ⇒ γ = [4, 0].
        let gamma = attention_scores_from_qk(&[2.0, 0.0], &[1.0, 3.0], 2, 1, 1);
        assert_eq!(gamma, vec![4.0, 0.0]);
    }

    #[test]
    fn scorer_matches_reference_and_hand_example() {
        // Identity tokens make the projections produce chosen Q/K exactly.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = substream(22, Stream::Test, 0);
        let scorer = AttentionScorer::init(&mut store, &mut rng, "score", 2, 1, 1).unwrap();
        store.set_data(store.lookup("score.w_q").unwrap(), vec![2.0, 0.0]);
        store.set_data(store.lookup("score.w_k").unwrap(), vec![1.0, 3.0]);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let tokens = tape.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![1, 2, 2]).unwrap());
        let gamma = scorer.forward(&mut tape, &bind, tokens).unwrap();
        let got = tape.value(gamma).data();
        assert!((got[0] - 4.0).abs() < 1e-12);
        assert!(got[1].abs() < 1e-12);
    }

    #[test]
    fn scorer_zero_query_and_duplicate_tokens() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = substream(23, Stream::Test, 0);
        let (feat, heads, d_k) = (4, 2, 3);
        let scorer = AttentionScorer::init(&mut store, &mut rng, "score", feat, heads, d_k).unwrap();

        let mut rng2 = substream(23, Stream::Test, 1);
        let l = 5;
        let mut toks: Vec<f64> = (0..l * feat).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        for j in 0..feat {
            toks[2 * feat + j] = toks[4 * feat + j]; // duplicate tokens 2 and 4
        }

        // Zero query projection ⇒ all-zero scores.
        let wq = store.lookup("score.w_q").unwrap();
        let saved = store.data(wq).to_vec();
        store.set_data(wq, vec![0.0; feat * heads * d_k]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let tokens = tape.constant(Tensor::new(toks.clone(), vec![1, l, feat]).unwrap());
        let gamma = scorer.forward(&mut tape, &bind, tokens).unwrap();
        assert!(tape.value(gamma).data().iter().all(|&v| v == 0.0));

        // Restored weights: duplicates share scores, and the fused path
        // agrees with the literal double-sum reference.
        store.set_data(wq, saved);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let tokens = tape.constant(Tensor::new(toks.clone(), vec![1, l, feat]).unwrap());
        let gamma = scorer.forward(&mut tape, &bind, tokens).unwrap();
        let got = tape.value(gamma).data().to_vec();
        assert!((got[2] - got[4]).abs() < 1e-12);

        let width = heads * d_k;
        let mut q = vec![0.0; l * width];
        let mut k = vec![0.0; l * width];
        let wq_d = store.data(store.lookup("score.w_q").unwrap()).to_vec();
        let wk_d = store.data(store.lookup("score.w_k").unwrap()).to_vec();
        for i in 0..l {
            for o in 0..width {
                for f in 0..feat {
                    q[i * width + o] += toks[i * feat + f] * wq_d[f * width + o];
                    k[i * width + o] += toks[i * feat + f] * wk_d[f * width + o];
                }
            }
        }
        let reference = attention_scores_from_qk(&q, &k, l, heads, d_k);
        for (a, b) in got.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scorer_permutation_equivariance() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = substream(24, Stream::Test, 0);
        let (feat, l) = (3, 6);
        let scorer = AttentionScorer::init(&mut store, &mut rng, "score", feat, 2, 2).unwrap();
        let mut rng2 = substream(24, Stream::Test, 1);
        let toks: Vec<f64> = (0..l * feat).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| toks[i * feat..(i + 1) * feat].to_vec()).collect();

        let score = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape).unwrap();
            let tokens = tape.constant(Tensor::new(vals, vec![1, l, feat]).unwrap());
            let gamma = scorer.forward(&mut tape, &bind, tokens).unwrap();
            tape.value(gamma).data().to_vec()
        };
        let g0 = score(toks);
        let g1 = score(permuted);
        for (i, &p) in perm.iter().enumerate() {
            assert!((g1[i] - g0[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_scores_match_hand_values() {
        // s_c = [1, 0] at index 0; tokens {[1,0],[0,1],[−1,0]} ⇒ cos {1, 0, −1}.
        let toks = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let mut tape: Tape<f64> = Tape::new();
        let node = tape.constant(Tensor::new(toks, vec![1, 3, 2]).unwrap());
        let scorer = CosineScorer { center: 0 };
        let gamma = scorer.forward(&mut tape, node).unwrap();
        let g = tape.value(gamma).data();
        assert!((g[0] - 0.66524).abs() < 1e-5);
        assert!((g[1] - 0.24473).abs() < 1e-5);
        assert!((g[2] - 0.09003).abs() < 1e-5);
        let sum: f64 = g.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_scores_uniform_and_scale_invariant() {
        let (l, d) = (4, 3);
        let all_same = vec![0.3, -0.7, 0.2].repeat(l);
        let mut tape: Tape<f64> = Tape::new();
        let node = tape.constant(Tensor::new(all_same, vec![1, l, d]).unwrap());
        let gamma = CosineScorer { center: 2 }.forward(&mut tape, node).unwrap();
        for &v in tape.value(gamma).data() {
            assert!((v - 1.0 / l as f64).abs() < 1e-12);
        }

        let mut rng = substream(25, Stream::Test, 0);
        let toks: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scaled = toks.clone();
        for j in 0..d {
            scaled[1 * d + j] *= 37.5; // positive rescale of one token
        }
        let score = |vals: Vec<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let node = tape.constant(Tensor::new(vals, vec![1, l, d]).unwrap());
            let gamma = CosineScorer { center: 0 }.forward(&mut tape, node).unwrap();
            tape.value(gamma).data().to_vec()
        };
        let g0 = score(toks);
        let g1 = score(scaled);
        for (a, b) in g0.iter().zip(g1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
