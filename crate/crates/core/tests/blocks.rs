//! Block-level integration: the gated scan block and the sparse
//! gather-process-scatter composition around it.

use std::sync::Arc;

use gdsm_core::gradcheck::{finite_difference_at, max_rel_error};
use gdsm_core::params::ParamStore;
use gdsm_core::rng::{substream, Stream};
use gdsm_core::sparse::{sparse_branch, topk_mask, SelectionMask};
use gdsm_core::ssm::{MambaBlock, MambaConfig};
use gdsm_core::tensor::tape::Tape;
use gdsm_core::tensor::Tensor;
use rand::Rng;

fn block_fixture(seed: u64, d_model: usize) -> (ParamStore<f64>, MambaBlock) {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, Stream::Test, 0);
    let cfg = MambaConfig::with_defaults(d_model);
    let block = MambaBlock::init(&mut store, &mut rng, "block", cfg);
    (store, block)
}

fn random_tokens(seed: u64, rows: usize, len: usize, d: usize) -> Tensor<f64> {
    let mut rng = substream(seed, Stream::Test, 1);
    let data: Vec<f64> = (0..rows * len * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(data, vec![rows, len, d]).unwrap()
}

#[test]
fn block_preserves_shape_for_all_lengths() {
    let (store, block) = block_fixture(1, 5);
    for len in [1usize, 7, 23] {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let tokens = tape.constant(random_tokens(len as u64, 2, len, 5));
        let out = block.forward(&mut tape, &bind, tokens).unwrap();
        assert_eq!(tape.shape(out), &[2, len, 5]);
    }
}

#[test]
fn zero_input_passes_through_as_zeros() {
    // The gate branch has no bias, so zero tokens silence the whole block;
    // with a zero output bias the residual carries zeros through.
    let (store, block) = block_fixture(2, 4);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let tokens = tape.constant(Tensor::zeros(vec![3, 6, 4]));
    let out = block.forward(&mut tape, &bind, tokens).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_is_causal() {
    let (store, block) = block_fixture(3, 4);
    let run = |tokens: Tensor<f64>| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let node = tape.constant(tokens);
        let out = block.forward(&mut tape, &bind, node).unwrap();
        tape.value(out).data().to_vec()
    };
    let base = random_tokens(3, 1, 10, 4);
    let y0 = run(base.clone());
    let mut bumped = base.data().to_vec();
    let t_hit = 6;
    bumped[t_hit * 4 + 2] += 2.0;
    let y1 = run(Tensor::new(bumped, vec![1, 10, 4]).unwrap());
    for t in 0..t_hit {
        for c in 0..4 {
            assert_eq!(y0[t * 4 + c], y1[t * 4 + c]);
        }
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    // Mean of the block output, differentiated w.r.t. a sample of entries
    // from every parameter tensor.
    let d_model = 3;
    let (store, block) = block_fixture(4, d_model);
    let tokens = random_tokens(4, 2, 5, d_model);

    let names: Vec<String> = store.iter().map(|(_, e)| e.name.clone()).collect();
    let flat: Vec<Vec<f64>> = store.iter().map(|(_, e)| e.data.clone()).collect();

    let eval = |inputs: &[Vec<f64>]| -> f64 {
        let mut s: ParamStore<f64> = ParamStore::new();
        let mut rng = substream(4, Stream::Test, 0);
        let cfg = MambaConfig::with_defaults(d_model);
        let b = MambaBlock::init(&mut s, &mut rng, "block", cfg);
        for (idx, data) in inputs.iter().enumerate() {
            let id = s.lookup(&names[idx]).unwrap();
            s.set_data(id, data.clone());
        }
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape).unwrap();
        let node = tape.constant(tokens.clone());
        let out = b.forward(&mut tape, &bind, node).unwrap();
        let m = tape.mean_all(out).unwrap();
        tape.value(m).data()[0]
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let node = tape.constant(tokens.clone());
    let out = block.forward(&mut tape, &bind, node).unwrap();
    let loss = tape.mean_all(out).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut rng = substream(99, Stream::Test, 2);
    for (idx, (pid, entry)) in store.iter().enumerate() {
        let node = bind.node(pid).unwrap();
        let analytic = grads.expect(node);
        let n = entry.data.len();
        let picks: Vec<usize> = (0..3.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let numeric = finite_difference_at(eval, &flat, idx, &picks, 1e-6);
        let chosen: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
        let err = max_rel_error(&chosen, &numeric);
        assert!(err < 1e-4, "param {} rel err {err}", entry.name);
    }
}

// ── Sparse branch vs the explicit 0/1 matrix form ───────────────────

/// Oracle: F_new = Mᵀ · Block(M · F) with M materialized as a k×L matrix.
fn matrix_form_oracle(
    store: &ParamStore<f64>,
    block: &MambaBlock,
    tokens: &Tensor<f64>,
    mask: &SelectionMask,
) -> Vec<f64> {
    let shape = tokens.shape().to_vec();
    let (l, feat) = (shape[1], shape[2]);
    let k = mask.k();
    let mut m = vec![0.0f64; k * l];
    for (row, &idx) in mask.indices.iter().enumerate() {
        m[row * l + idx] = 1.0;
    }
    let mut mt = vec![0.0f64; l * k];
    for r in 0..k {
        for c in 0..l {
            mt[c * k + r] = m[r * l + c];
        }
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let m_node = tape.constant(Tensor::new(m, vec![k, l]).unwrap());
    let mt_node = tape.constant(Tensor::new(mt, vec![l, k]).unwrap());
    let f = tape.constant(tokens.reshaped(vec![l, feat]).unwrap());
    let gathered = tape.matmul(m_node, f).unwrap();
    let g3 = tape.reshape(gathered, vec![1, k, feat]).unwrap();
    let processed = block.forward(&mut tape, &bind, g3).unwrap();
    let p2 = tape.reshape(processed, vec![k, feat]).unwrap();
    let scattered = tape.matmul(mt_node, p2).unwrap();
    tape.value(scattered).data().to_vec()
}

#[test]
fn sparse_branch_equals_explicit_matrix_form() {
    let feat = 4;
    let (store, block) = block_fixture(7, feat);
    let mut rng = substream(7, Stream::Test, 5);
    for trial in 0..50 {
        let l = rng.gen_range(2..10usize);
        let k = match trial {
            0 => 1,
            1 => l,
            _ => rng.gen_range(1..=l),
        };
        let scores: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = topk_mask(&scores, k).unwrap();
        let tokens = random_tokens(100 + trial as u64, 1, l, feat);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let node = tape.constant(tokens.clone());
        let out = sparse_branch(&mut tape, &bind, node, std::slice::from_ref(&mask), &block).unwrap();
        let got = tape.value(out).data().to_vec();

        let expect = matrix_form_oracle(&store, &block, &tokens, &mask);
        let worst = got.iter().zip(expect.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "trial {trial} l {l} k {k}: diff {worst}");

        // Unselected rows are bitwise zero.
        for t in 0..l {
            if !mask.indices.contains(&t) {
                for j in 0..feat {
                    assert_eq!(got[t * feat + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn full_mask_is_a_no_op_wrapper() {
    let feat = 5;
    let (store, block) = block_fixture(8, feat);
    let tokens = random_tokens(8, 3, 6, feat);
    let mask = SelectionMask::full(6);
    let masks = vec![mask; 3];

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let node = tape.constant(tokens.clone());
    let sparse = sparse_branch(&mut tape, &bind, node, &masks, &block).unwrap();
    let direct = block.forward(&mut tape, &bind, node).unwrap();
    assert_eq!(tape.value(sparse).data(), tape.value(direct).data());
}

#[test]
fn selected_rows_match_block_on_gathered_tokens() {
    let feat = 3;
    let (store, block) = block_fixture(9, feat);
    let l = 7;
    let tokens = random_tokens(9, 1, l, feat);
    let mask = SelectionMask::new(l, vec![1, 4, 6]).unwrap();

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let node = tape.constant(tokens.clone());
    let out = sparse_branch(&mut tape, &bind, node, std::slice::from_ref(&mask), &block).unwrap();
    let got = tape.value(out).data().to_vec();

    // Explicit gather, run the block directly, compare row for row.
    let src = tokens.data();
    let mut gathered = Vec::new();
    for &i in &mask.indices {
        gathered.extend_from_slice(&src[i * feat..(i + 1) * feat]);
    }
    let mut tape2 = Tape::new();
    let bind2 = store.bind(&mut tape2).unwrap();
    let g = tape2.constant(Tensor::new(gathered, vec![1, 3, feat]).unwrap());
    let processed = block.forward(&mut tape2, &bind2, g).unwrap();
    let pv = tape2.value(processed).data();
    for (row, &i) in mask.indices.iter().enumerate() {
        for j in 0..feat {
            assert_eq!(got[i * feat + j], pv[row * feat + j]);
        }
    }
}

#[test]
fn mask_contract_errors() {
    assert!(SelectionMask::new(4, vec![]).is_err());
    assert!(SelectionMask::new(4, vec![0, 0]).is_err());
    assert!(SelectionMask::new(4, vec![2, 1]).is_err());
    assert!(SelectionMask::new(4, vec![0, 4]).is_err());

    let (store, block) = block_fixture(10, 2);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let node = tape.constant(random_tokens(10, 1, 5, 2));
    let wrong = SelectionMask::new(4, vec![0, 2]).unwrap();
    assert!(sparse_branch(&mut tape, &bind, node, &[wrong], &block).is_err());
}

// ── Gradient flow through the scan's selective inputs ───────────────

#[test]
fn selective_scan_gradients_match_finite_differences() {
    // Direct spot-check of the fused op (independent of the block wiring).
    let (rows, len, ch, n) = (2usize, 4usize, 3usize, 2usize);
    let mut rng = substream(11, Stream::Test, 3);
    let mut mk = |len_total: usize, scale: f64| -> Vec<f64> {
        (0..len_total).map(|_| rng.gen_range(-scale..scale)).collect()
    };
    let x = mk(rows * len * ch, 1.0);
    let delta_raw = mk(rows * len * ch, 1.0);
    let b = mk(rows * len * n, 1.0);
    let c = mk(rows * len * n, 1.0);
    let a_log = mk(ch * n, 0.5);
    let d_skip = mk(ch, 1.0);
    let inputs = vec![x, delta_raw, b, c, a_log, d_skip];

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let xn = tape.param(Tensor::new(vals[0].clone(), vec![rows, len, ch]).unwrap());
        let draw = tape.param(Tensor::new(vals[1].clone(), vec![rows, len, ch]).unwrap());
        let bn = tape.param(Tensor::new(vals[2].clone(), vec![rows, len, n]).unwrap());
        let cn = tape.param(Tensor::new(vals[3].clone(), vec![rows, len, n]).unwrap());
        let al = tape.param(Tensor::new(vals[4].clone(), vec![ch, n]).unwrap());
        let dn = tape.param(Tensor::new(vals[5].clone(), vec![ch]).unwrap());
        let delta = tape.softplus(draw).unwrap();
        let a_exp = tape.exp(al).unwrap();
        let a = tape.scale(a_exp, -1.0).unwrap();
        let y = tape.selective_scan(xn, delta, bn, cn, a, dn).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let m = tape.mean_all(sq).unwrap();
        tape.value(m).data()[0]
    };

    let fd = gdsm_core::gradcheck::finite_difference(eval, &inputs, 1e-6);

    let mut tape: Tape<f64> = Tape::new();
    let xn = tape.param(Tensor::new(inputs[0].clone(), vec![rows, len, ch]).unwrap());
    let draw = tape.param(Tensor::new(inputs[1].clone(), vec![rows, len, ch]).unwrap());
    let bn = tape.param(Tensor::new(inputs[2].clone(), vec![rows, len, n]).unwrap());
    let cn = tape.param(Tensor::new(inputs[3].clone(), vec![rows, len, n]).unwrap());
    let al = tape.param(Tensor::new(inputs[4].clone(), vec![ch, n]).unwrap());
    let dn = tape.param(Tensor::new(inputs[5].clone(), vec![ch]).unwrap());
    let delta = tape.softplus(draw).unwrap();
    let a_exp = tape.exp(al).unwrap();
    let a = tape.scale(a_exp, -1.0).unwrap();
    let y = tape.selective_scan(xn, delta, bn, cn, a, dn).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.mean_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (i, node) in [xn, draw, bn, cn, al, dn].into_iter().enumerate() {
        let err = max_rel_error(grads.expect(node), &fd[i]);
        assert!(err < 1e-5, "input {i} rel err {err}");
    }
}
