//! The three disentangled token streams.
//!
//! Spectral and temporal stems are band-local per time step (group
//! structure), so no stem ever mixes information across time; the spatial
//! tokenizer is pointwise per pixel, so it never mixes across pixels.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, zeros, ParamId, ParamStore, TapeBinding};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    /// [B·H·W, C, T] — C tokens of width T per pixel.
    Spectral,
    /// [B·H·W, T, C] — T tokens of width C per pixel.
    Temporal,
    /// [B, H·W, d] — H·W tokens of width d per sample.
    Spatial,
}

/// One branch's token tensor with its axis semantics.
pub struct TokenSet {
    pub kind: TokenKind,
    pub node: NodeId,
    /// Independent sequences (B·H·W for pixel streams, B for spatial).
    pub rows: usize,
    /// Tokens per sequence (C, T or H·W).
    pub tokens: usize,
    /// Features per token (T, C or d).
    pub width: usize,
}

/// Per-time-step grouped projection of the C₀ bands to C channels; group g
/// holds its own weights, so time steps stay independent.
#[derive(Clone, Debug)]
pub struct SpectralTokenizer {
    pub t: usize,
    pub c0: usize,
    pub c: usize,
    w: ParamId,
    b: ParamId,
}

impl SpectralTokenizer {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, prefix: &str, t: usize, c0: usize, c: usize) -> Self {
        SpectralTokenizer {
            t,
            c0,
            c,
            w: store.add(format!("{prefix}.w"), vec![t * c, c0, 1], fan_in_uniform(rng, c0, t * c * c0), true),
            b: store.add(format!("{prefix}.b"), vec![t * c], zeros(t * c), true),
        }
    }

    /// pixels: [B·H·W, T·C₀] with (t, band) contiguous → [B·H·W, C, T].
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &TapeBinding, pixels: NodeId) -> Result<TokenSet> {
        let shape = tape.shape(pixels).to_vec();
        if shape.len() != 2 || shape[1] != self.t * self.c0 {
            return Err(Error::Dimension(format!(
                "spectral tokenizer expects [pixels, {}], got {shape:?}",
                self.t * self.c0
            )));
        }
        let rows = shape[0];
        let x3 = tape.reshape(pixels, vec![rows, self.t * self.c0, 1])?;
        let conv = tape.grouped_conv1d(x3, bind.node(self.w)?, Some(bind.node(self.b)?), self.t)?;
        let seq = tape.reshape(conv, vec![rows, self.t, self.c])?;
        let node = tape.transpose_last2(seq)?;
        Ok(TokenSet { kind: TokenKind::Spectral, node, rows, tokens: self.c, width: self.t })
    }

    pub fn param_count(t: usize, c0: usize, c: usize) -> usize {
        t * c * c0 + t * c
    }
}

/// Shared pointwise projection C₀ → C applied at every (pixel, step).
#[derive(Clone, Debug)]
pub struct TemporalTokenizer {
    pub t: usize,
    pub c0: usize,
    pub c: usize,
    w: ParamId,
    b: ParamId,
}

impl TemporalTokenizer {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, prefix: &str, t: usize, c0: usize, c: usize) -> Self {
        TemporalTokenizer {
            t,
            c0,
            c,
            w: store.add(format!("{prefix}.w"), vec![c0, c], fan_in_uniform(rng, c0, c0 * c), true),
            b: store.add(format!("{prefix}.b"), vec![c], zeros(c), true),
        }
    }

    /// pixels: [B·H·W, T·C₀] → [B·H·W, T, C].
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &TapeBinding, pixels: NodeId) -> Result<TokenSet> {
        let shape = tape.shape(pixels).to_vec();
        if shape.len() != 2 || shape[1] != self.t * self.c0 {
            return Err(Error::Dimension(format!(
                "temporal tokenizer expects [pixels, {}], got {shape:?}",
                self.t * self.c0
            )));
        }
        let rows = shape[0];
        let per_step = tape.reshape(pixels, vec![rows * self.t, self.c0])?;
        let projected = tape.linear(per_step, bind.node(self.w)?, Some(bind.node(self.b)?))?;
        let node = tape.reshape(projected, vec![rows, self.t, self.c])?;
        Ok(TokenSet { kind: TokenKind::Temporal, node, rows, tokens: self.t, width: self.c })
    }

    pub fn param_count(c0: usize, c: usize) -> usize {
        c0 * c + c
    }
}

/// Per-pixel projection of the full T·C₀ series to d spatial-token features.
#[derive(Clone, Debug)]
pub struct SpatialTokenizer {
    pub hw: usize,
    pub series_len: usize,
    pub d: usize,
    w: ParamId,
    b: ParamId,
}

impl SpatialTokenizer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hw: usize,
        series_len: usize,
        d: usize,
    ) -> Self {
        SpatialTokenizer {
            hw,
            series_len,
            d,
            w: store.add(format!("{prefix}.w"), vec![series_len, d], fan_in_uniform(rng, series_len, series_len * d), true),
            b: store.add(format!("{prefix}.b"), vec![d], zeros(d), true),
        }
    }

    /// pixels: [B·H·W, T·C₀] → [B, H·W, d]; token order is row-major (h, w).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &TapeBinding, pixels: NodeId, batch: usize) -> Result<TokenSet> {
        let shape = tape.shape(pixels).to_vec();
        if shape.len() != 2 || shape[1] != self.series_len || shape[0] != batch * self.hw {
            return Err(Error::Dimension(format!(
                "spatial tokenizer expects [{}·{}, {}], got {shape:?}",
                batch, self.hw, self.series_len
            )));
        }
        let projected = tape.linear(pixels, bind.node(self.w)?, Some(bind.node(self.b)?))?;
        let node = tape.reshape(projected, vec![batch, self.hw, self.d])?;
        Ok(TokenSet { kind: TokenKind::Spatial, node, rows: batch, tokens: self.hw, width: self.d })
    }

    pub fn param_count(series_len: usize, d: usize) -> usize {
        series_len * d + d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::{substream, Stream};
    use crate::tensor::Tensor;

    fn pixels_tensor(data: Vec<f64>, rows: usize, width: usize) -> Tensor<f64> {
        Tensor::new(data, vec![rows, width]).unwrap()
    }

    struct Fixture {
        store: ParamStore<f64>,
        t: usize,
        c0: usize,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture { store: ParamStore::new(), t: 4, c0: 3 }
        }
    }

    #[test]
    fn spectral_shapes_and_group_independence() {
        let mut fx = Fixture::new();
        let mut rng = substream(1, Stream::Test, 0);
        let (t, c0, c) = (fx.t, fx.c0, 5);
        let tok = SpectralTokenizer::init(&mut fx.store, &mut rng, "spectral", t, c0, c);

        let rows = 6;
        let data: Vec<f64> = (0..rows * t * c0).map(|i| (i as f64 * 0.113).sin()).collect();
        let run = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let bind = fx.store.bind(&mut tape).unwrap();
            let px = tape.constant(pixels_tensor(vals, rows, t * c0));
            let ts = tok.forward(&mut tape, &bind, px).unwrap();
            assert_eq!(tape.shape(ts.node), &[rows, c, t]);
            tape.value(ts.node).data().to_vec()
        };
        let y0 = run(data.clone());

        // Perturb one time step; only that slice of the output may move.
        let t_hit = 2;
        let mut bumped = data.clone();
        for r in 0..rows {
            for b in 0..c0 {
                bumped[r * t * c0 + t_hit * c0 + b] += 3.0;
            }
        }
        let y1 = run(bumped);
        for r in 0..rows {
            for ch in 0..c {
                for tt in 0..t {
                    let idx = (r * c + ch) * t + tt;
                    if tt == t_hit {
                        assert_ne!(y0[idx], y1[idx]);
                    } else {
                        assert_eq!(y0[idx], y1[idx]);
                    }
                }
            }
        }
    }

    #[test]
    fn spectral_identity_stem_reproduces_bands() {
        let mut fx = Fixture::new();
        let mut rng = substream(2, Stream::Test, 0);
        let (t, c0) = (fx.t, fx.c0);
        let tok = SpectralTokenizer::init(&mut fx.store, &mut rng, "spectral", t, c0, c0);
        // Kernel δ: per group, weight = identity over bands.
        let mut w = vec![0.0f64; t * c0 * c0];
        for g in 0..t {
            for ch in 0..c0 {
                w[(g * c0 + ch) * c0 + ch] = 1.0;
            }
        }
        let wid = fx.store.lookup("spectral.w").unwrap();
        fx.store.set_data(wid, w);

        let rows = 3;
        let data: Vec<f64> = (0..rows * t * c0).map(|i| i as f64 * 0.5 - 2.0).collect();
        let mut tape = Tape::new();
        let bind = fx.store.bind(&mut tape).unwrap();
        let px = tape.constant(pixels_tensor(data.clone(), rows, t * c0));
        let ts = tok.forward(&mut tape, &bind, px).unwrap();
        let y = tape.value(ts.node).data();
        for r in 0..rows {
            for ch in 0..c0 {
                for tt in 0..t {
                    assert_eq!(y[(r * c0 + ch) * t + tt], data[r * t * c0 + tt * c0 + ch]);
                }
            }
        }
    }

    #[test]
    fn temporal_shift_equivariance_and_zero_case() {
        let mut fx = Fixture::new();
        let mut rng = substream(3, Stream::Test, 0);
        let (t, c0, c) = (fx.t, fx.c0, 4);
        let tok = TemporalTokenizer::init(&mut fx.store, &mut rng, "temporal", t, c0, c);

        let rows = 2;
        let data: Vec<f64> = (0..rows * t * c0).map(|i| (i as f64 * 0.37).cos()).collect();
        let shift = 1usize;
        let mut shifted = vec![0.0; data.len()];
        for r in 0..rows {
            for tt in 0..t {
                let src = (tt + t - shift) % t;
                for b in 0..c0 {
                    shifted[r * t * c0 + tt * c0 + b] = data[r * t * c0 + src * c0 + b];
                }
            }
        }
        let run = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let bind = fx.store.bind(&mut tape).unwrap();
            let px = tape.constant(pixels_tensor(vals, rows, t * c0));
            let ts = tok.forward(&mut tape, &bind, px).unwrap();
            assert_eq!(tape.shape(ts.node), &[rows, t, c]);
            tape.value(ts.node).data().to_vec()
        };
        let y0 = run(data);
        let y1 = run(shifted);
        for r in 0..rows {
            for tt in 0..t {
                let src = (tt + t - shift) % t;
                for ch in 0..c {
                    assert_eq!(y1[(r * t + tt) * c + ch], y0[(r * t + src) * c + ch]);
                }
            }
        }

        // Zero input with zero bias ⇒ zero tokens.
        let y = run(vec![0.0; rows * t * c0]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_tokens_identity_and_duplicates() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = substream(4, Stream::Test, 0);
        let (hw, series, d) = (9, 8, 3);
        let tok = SpatialTokenizer::init(&mut store, &mut rng, "spatial", hw, series, d);
        // Truncated identity projection reproduces the first d raw features.
        let mut w = vec![0.0f64; series * d];
        for j in 0..d {
            w[j * d + j] = 1.0;
        }
        let wid = store.lookup("spatial.w").unwrap();
        store.set_data(wid, w);

        let batch = 2;
        let mut rng2 = substream(4, Stream::Test, 1);
        let mut data: Vec<f64> = (0..batch * hw * series).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        // Make pixels 0 and 5 of sample 1 identical.
        for j in 0..series {
            data[(hw + 5) * series + j] = data[hw * series + j];
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let px = tape.constant(pixels_tensor(data.clone(), batch * hw, series));
        let ts = tok.forward(&mut tape, &bind, px, batch).unwrap();
        assert_eq!(tape.shape(ts.node), &[batch, hw, d]);
        let y = tape.value(ts.node).data();
        for j in 0..d {
            assert_eq!(y[j], data[j]); // truncated identity
            assert_eq!(y[(hw + 5) * d + j], y[hw * d + j]); // duplicate pixels
        }
    }
}
