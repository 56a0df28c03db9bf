//! Mini-batch graph stream: RBF adjacency over the samples of one batch,
//! symmetric normalization, and graph-convolution layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ones, zeros, ParamId, ParamStore, TapeBinding};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How the RBF width σ is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// Median of pairwise squared distances, recomputed per batch.
    Median,
    /// Fixed constant (squared-distance units).
    Fixed(f64),
}

/// Adjacency, self-loop, degree and normalized propagation matrices for one
/// batch of B samples.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub size: usize,
    /// B×B RBF adjacency, symmetric, unit diagonal.
    pub adjacency: Vec<f64>,
    /// Ã = A + I.
    pub with_self_loops: Vec<f64>,
    /// Diagonal of D̃.
    pub degrees: Vec<f64>,
    /// L = D̃^{−1/2} Ã D̃^{−1/2}.
    pub normalized: Vec<f64>,
    pub sigma_sq: f64,
}

/// Flattened (time-major: step outer, band inner) features of the center
/// pixel. H and W must be odd so the center is unique.
pub fn center_pixel_vector(cube: &[f64], h: usize, w: usize, t: usize, c0: usize) -> Result<Vec<f64>> {
    if h % 2 == 0 || w % 2 == 0 {
        return Err(Error::Contract(format!(
            "center pixel undefined for even patch dims {h}×{w}"
        )));
    }
    if cube.len() != h * w * t * c0 {
        return Err(Error::Dimension(format!(
            "cube length {} does not match {h}×{w}×{t}×{c0}",
            cube.len()
        )));
    }
    let base = ((h / 2) * w + w / 2) * t * c0;
    Ok(cube[base..base + t * c0].to_vec())
}

/// A_ij = exp(−‖x_i − x_j‖² / σ²) over the batch's center vectors.
pub fn rbf_adjacency(vectors: &[Vec<f64>], sigma_sq: f64) -> Result<Vec<f64>> {
    let b = vectors.len();
    if b < 2 {
        return Err(Error::Contract(format!("rbf adjacency needs B ≥ 2, got {b}")));
    }
    if sigma_sq <= 0.0 {
        return Err(Error::Config(format!("rbf sigma² must be positive, got {sigma_sq}")));
    }
    let mut a = vec![0.0f64; b * b];
    for i in 0..b {
        a[i * b + i] = 1.0;
        for j in i + 1..b {
            let mut d2 = 0.0;
            for (x, y) in vectors[i].iter().zip(vectors[j].iter()) {
                let d = x - y;
                d2 += d * d;
            }
            let v = (-d2 / sigma_sq).exp();
            a[i * b + j] = v;
            a[j * b + i] = v;
        }
    }
    Ok(a)
}

/// Median of the B(B−1)/2 pairwise squared distances (the σ heuristic).
/// Falls back to 1.0 when the batch is degenerate (all points coincide).
pub fn median_pairwise_sq_dist(vectors: &[Vec<f64>]) -> f64 {
    let b = vectors.len();
    let mut dists = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            let mut d2 = 0.0;
            for (x, y) in vectors[i].iter().zip(vectors[j].iter()) {
                let d = x - y;
                d2 += d * d;
            }
            dists.push(d2);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if median > 1e-12 {
        median
    } else {
        1.0
    }
}

/// Ã = A + I (applied literally), D̃ from Ã's row sums, L the symmetric
/// normalization. `clamp_diagonal` instead pins Ã's diagonal to 1.
pub fn normalize_adjacency(a: &[f64], b: usize, clamp_diagonal: bool) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if a.len() != b * b {
        return Err(Error::Dimension(format!("adjacency length {} is not {b}×{b}", a.len())));
    }
    for i in 0..b {
        for j in 0..i {
            if (a[i * b + j] - a[j * b + i]).abs() > 0.0 {
                return Err(Error::Contract("adjacency must be symmetric".into()));
            }
        }
    }
    if a.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("adjacency must be nonnegative".into()));
    }
    let mut a_tilde = a.to_vec();
    for i in 0..b {
        if clamp_diagonal {
            a_tilde[i * b + i] = 1.0;
        } else {
            a_tilde[i * b + i] += 1.0;
        }
    }
    let mut degrees = vec![0.0f64; b];
    for i in 0..b {
        let mut acc = 0.0;
        for j in 0..b {
            acc += a_tilde[i * b + j];
        }
        if acc <= 0.0 {
            return Err(Error::Contract(format!("degenerate degree: row {i} of Ã sums to {acc}")));
        }
        degrees[i] = acc;
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let mut normalized = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            normalized[i * b + j] = inv_sqrt[i] * a_tilde[i * b + j] * inv_sqrt[j];
        }
    }
    Ok((a_tilde, degrees, normalized))
}

impl GraphBatch {
    /// Build the full graph for one batch of center vectors. A single-node
    /// batch gets the trivial graph directly (L = [1]).
    pub fn build(vectors: &[Vec<f64>], sigma: SigmaMode, clamp_diagonal: bool) -> Result<GraphBatch> {
        let b = vectors.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if b == 1 {
            return Ok(GraphBatch {
                size: 1,
                adjacency: vec![1.0],
                with_self_loops: vec![if clamp_diagonal { 1.0 } else { 2.0 }],
                degrees: vec![if clamp_diagonal { 1.0 } else { 2.0 }],
                normalized: vec![1.0],
                sigma_sq: 1.0,
            });
        }
        let sigma_sq = match sigma {
            SigmaMode::Median => median_pairwise_sq_dist(vectors),
            SigmaMode::Fixed(s) => {
                if s <= 0.0 {
                    return Err(Error::Config(format!("fixed sigma² must be positive, got {s}")));
                }
                s
            }
        };
        let adjacency = rbf_adjacency(vectors, sigma_sq)?;
        let (with_self_loops, degrees, normalized) = normalize_adjacency(&adjacency, b, clamp_diagonal)?;
        Ok(GraphBatch { size: b, adjacency, with_self_loops, degrees, normalized, sigma_sq })
    }

    pub fn normalized_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.normalized.iter().map(|&v| S::from_f64(v)).collect();
        Tensor::new(data, vec![self.size, self.size]).expect("square matrix")
    }
}

// ── GCN layer ───────────────────────────────────────────────────────

/// H^{(l+1)} = BN(L · H^{(l)} · W + b), with per-feature affine batch norm.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub f_in: usize,
    pub f_out: usize,
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl GcnLayer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        f_in: usize,
        f_out: usize,
    ) -> Self {
        GcnLayer {
            f_in,
            f_out,
            w: store.add(format!("{prefix}.w"), vec![f_in, f_out], fan_in_uniform(rng, f_in, f_in * f_out), true),
            b: store.add(format!("{prefix}.b"), vec![f_out], zeros(f_out), true),
            gamma: store.add(format!("{prefix}.bn_gamma"), vec![f_out], ones(f_out), true),
            beta: store.add(format!("{prefix}.bn_beta"), vec![f_out], zeros(f_out), true),
            running_mean: store.add(format!("{prefix}.bn_mean"), vec![f_out], zeros(f_out), false),
            running_var: store.add(format!("{prefix}.bn_var"), vec![f_out], ones(f_out), false),
        }
    }

    /// One propagation step. `propagate` carries the normalized adjacency as
    /// a tape constant; `None` skips the graph product (the plain-MLP path).
    /// Training mode updates the running statistics in `store`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &TapeBinding,
        store: &mut ParamStore<S>,
        h: NodeId,
        propagate: Option<NodeId>,
        training: bool,
    ) -> Result<NodeId> {
        let hw = {
            let x = match propagate {
                Some(l) => tape.matmul(l, h)?,
                None => h,
            };
            tape.linear(x, bind.node(self.w)?, Some(bind.node(self.b)?))?
        };
        let rm: Vec<S> = store.data(self.running_mean).to_vec();
        let rv: Vec<S> = store.data(self.running_var).to_vec();
        let (out, stats) = tape.batch_norm(
            hw,
            bind.node(self.gamma)?,
            bind.node(self.beta)?,
            &rm,
            &rv,
            S::from_f64(BN_EPS),
            training,
        )?;
        if let Some((mean, var)) = stats {
            let b = tape.shape(hw)[0];
            // Unbiased variance feeds the running estimate.
            let unbias = S::from_f64(b as f64 / (b as f64 - 1.0));
            let m = S::from_f64(BN_MOMENTUM);
            let one_m = S::ONE - m;
            {
                let dst = store.data_mut(self.running_mean);
                for (d, &v) in dst.iter_mut().zip(mean.iter()) {
                    *d = one_m * *d + m * v;
                }
            }
            {
                let dst = store.data_mut(self.running_var);
                for (d, &v) in dst.iter_mut().zip(var.iter()) {
                    *d = one_m * *d + m * v * unbias;
                }
            }
        }
        Ok(out)
    }

    pub fn param_count(f_in: usize, f_out: usize) -> usize {
        f_in * f_out + f_out + 2 * f_out
    }

    pub fn macs_per_sample(f_in: usize, f_out: usize, batch: usize) -> usize {
        // H·W is per sample; the B×B propagation amortizes to B·f_in per sample.
        f_in * f_out + batch * f_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::{substream, Stream};

    #[test]
    fn center_vector_layout_and_errors() {
        let (h, w, t, c0) = (3, 3, 2, 2);
        let mut cube = vec![0.0f64; h * w * t * c0];
        // Marker at center pixel, time 0, band 0.
        let center_base = ((h / 2) * w + w / 2) * t * c0;
        cube[center_base] = 7.5;
        cube[center_base + 1] = 1.25; // time 0, band 1
        cube[center_base + 2] = -3.0; // time 1, band 0
        let v = center_pixel_vector(&cube, h, w, t, c0).unwrap();
        assert_eq!(v.len(), t * c0);
        assert_eq!(v[0], 7.5);
        assert_eq!(v[1], 1.25);
        assert_eq!(v[2], -3.0);

        assert!(center_pixel_vector(&cube, 3, 3, 2, 2).is_ok());
        let err = center_pixel_vector(&vec![0.0; 4 * 3 * 2 * 2], 4, 3, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn center_vector_is_138_for_reference_dims() {
        let cube = vec![0.25f64; 13 * 13 * 23 * 6];
        let v = center_pixel_vector(&cube, 13, 13, 23, 6).unwrap();
        assert_eq!(v.len(), 138);
        assert!(v.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn rbf_basic_properties() {
        let vectors = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.3, -2.0]];
        let a = rbf_adjacency(&vectors, 2.0).unwrap();
        let b = 3;
        for i in 0..b {
            assert_eq!(a[i * b + i], 1.0);
            for j in 0..b {
                assert_eq!(a[i * b + j], a[j * b + i]);
                assert!(a[i * b + j] > 0.0 && a[i * b + j] <= 1.0);
            }
        }
        // Identical vectors ⇒ edge weight exactly 1.
        let same = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let a2 = rbf_adjacency(&same, 1.0).unwrap();
        assert_eq!(a2[1], 1.0);
        // ‖x_i − x_j‖² = σ² ⇒ e⁻¹.
        let unit = vec![vec![0.0], vec![1.0]];
        let a3 = rbf_adjacency(&unit, 1.0).unwrap();
        assert!((a3[1] - (-1.0f64).exp()).abs() < 1e-15);

        assert!(matches!(rbf_adjacency(&unit, 0.0), Err(Error::Config(_))));
        assert!(matches!(rbf_adjacency(&[vec![1.0]], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn rbf_translation_invariance() {
        let mut rng = substream(11, Stream::Test, 0);
        let vectors: Vec<Vec<f64>> =
            (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let shift: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().zip(shift.iter()).map(|(a, s)| a + s).collect())
            .collect();
        let a0 = rbf_adjacency(&vectors, 1.7).unwrap();
        let a1 = rbf_adjacency(&shifted, 1.7).unwrap();
        for (x, y) in a0.iter().zip(a1.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_matches_worked_two_node_case() {
        let e = (-1.0f64).exp();
        let a = vec![1.0, e, e, 1.0];
        let (a_tilde, degrees, l) = normalize_adjacency(&a, 2, false).unwrap();
        assert_eq!(a_tilde[0], 2.0);
        assert!((a_tilde[1] - 0.367879441).abs() < 1e-8);
        assert!((degrees[0] - 2.367879441).abs() < 1e-8);
        assert!((l[0] - 0.844638).abs() < 1e-6);
        assert!((l[1] - 0.155362).abs() < 1e-6);
        assert!((l[2] - 0.155362).abs() < 1e-6);
        assert!((l[3] - 0.844638).abs() < 1e-6);
    }

    #[test]
    fn identity_adjacency_normalizes_to_identity() {
        let a = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (a_tilde, _, l) = normalize_adjacency(&a, 3, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect_at = if i == j { 2.0 } else { 0.0 };
                assert_eq!(a_tilde[i * 3 + j], expect_at);
                let expect_l = if i == j { 1.0 } else { 0.0 };
                assert!((l[i * 3 + j] - expect_l).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn permuting_nodes_permutes_l() {
        let mut rng = substream(13, Stream::Test, 1);
        let vectors: Vec<Vec<f64>> =
            (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g = GraphBatch::build(&vectors, SigmaMode::Fixed(2.0), false).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| vectors[i].clone()).collect();
        let gp = GraphBatch::build(&permuted, SigmaMode::Fixed(2.0), false).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let orig = g.normalized[perm[i] * 5 + perm[j]];
                assert!((gp.normalized[i * 5 + j] - orig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rayleigh_quotient_bounded_by_one() {
        let mut rng = substream(17, Stream::Test, 2);
        let vectors: Vec<Vec<f64>> =
            (0..16).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g = GraphBatch::build(&vectors, SigmaMode::Median, false).unwrap();
        let b = g.size;
        for _ in 0..1000 {
            let v: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm_sq: f64 = v.iter().map(|x| x * x).sum();
            let mut quad = 0.0;
            for i in 0..b {
                for j in 0..b {
                    quad += v[i] * g.normalized[i * b + j] * v[j];
                }
            }
            assert!(quad.abs() / norm_sq <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn single_node_graph_is_trivial() {
        let g = GraphBatch::build(&[vec![1.0, 2.0]], SigmaMode::Median, false).unwrap();
        assert_eq!(g.normalized, vec![1.0]);
    }
}
