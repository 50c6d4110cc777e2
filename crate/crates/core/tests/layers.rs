mod common;

use common::gradients::{attention_setup, gru_store};
use common::*;
use duallab::nn::*;
use duallab::tensor::{sigmoid, ParamStore, Tape, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn linear_cases() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[4, 3], 1.0);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let eye = t.constant(Tensor::identity(3));
    let zero_b = t.constant(Tensor::zeros(&[3]));
    let y = linear(&mut t, xv, eye, zero_b).unwrap();
    assert_eq!(t.value(y), &x);

    let w = random_tensor(&mut r, &[3, 5], 1.0);
    let b = random_tensor(&mut r, &[5], 1.0);
    let zx = t.constant(Tensor::zeros(&[2, 3]));
    let wv = t.constant(w.clone());
    let bv = t.constant(b.clone());
    let y0 = linear(&mut t, zx, wv, bv).unwrap();
    for row in 0..2 {
        assert_eq!(t.value(y0).row(row), b.data());
    }

    let y = linear(&mut t, xv, wv, bv).unwrap();
    let mut expect = naive_matmul(x.data(), w.data(), 4, 3, 5);
    for (i, e) in expect.iter_mut().enumerate() {
        *e += b.data()[i % 5];
    }
    for (a, e) in t.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

/// Direct summation: out[k][o] = b[o] + sum_j sum_c x[k + j - w/2][c] * kern[j][c][o].
fn conv_oracle(
    x: &[f64],
    k_len: usize,
    c_in: usize,
    kern: &[f64],
    bias: &[f64],
    width: usize,
) -> Vec<f64> {
    let c_out = bias.len();
    let half = width as isize / 2;
    let mut out = vec![0.0; k_len * c_out];
    for k in 0..k_len {
        for o in 0..c_out {
            let mut s = bias[o];
            for j in 0..width {
                let src = k as isize + j as isize - half;
                if src < 0 || src >= k_len as isize {
                    continue;
                }
                for c in 0..c_in {
                    s += x[src as usize * c_in + c] * kern[(j * c_in + c) * c_out + o];
                }
            }
            out[k * c_out + o] = s;
        }
    }
    out
}

#[test]
fn temporal_conv_cases() {
    let mut r = rng(2);
    let (k_len, d, width) = (7, 3, 5);
    let x = random_tensor(&mut r, &[k_len, d], 1.0);
    let layout = Layout::single(k_len).unwrap();

    // centered delta on channel 1 -> output equals input channel 1
    let mut delta = Tensor::zeros(&[width * d, 1]);
    delta.data_mut()[(width / 2) * d + 1] = 1.0;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(delta);
    let bv = t.constant(Tensor::zeros(&[1]));
    let y = temporal_conv(&mut t, xv, &layout, kv, bv, width).unwrap();
    for k in 0..k_len {
        assert_eq!(t.value(y).at(k, 0), x.at(k, 1));
    }

    // zero input -> bias only
    let kern = random_tensor(&mut r, &[width * d, 4], 1.0);
    let bias = random_tensor(&mut r, &[4], 1.0);
    let zx = t.constant(Tensor::zeros(&[k_len, d]));
    let kv = t.constant(kern.clone());
    let bv = t.constant(bias.clone());
    let y0 = temporal_conv(&mut t, zx, &layout, kv, bv, width).unwrap();
    for k in 0..k_len {
        assert_eq!(t.value(y0).row(k), bias.data());
    }

    let y = temporal_conv(&mut t, xv, &layout, kv, bv, width).unwrap();
    let expect = conv_oracle(x.data(), k_len, d, kern.data(), bias.data(), width);
    for (a, e) in t.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }

    assert!(temporal_conv(&mut t, xv, &layout, kv, bv, 4).is_err());
    assert!(Layout::single(0).is_err());
}

/// Scalar reference: one output unit at a time.
fn gru_cell_oracle(s: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hd = p.hidden;
    let g = |id| s.get(id).data().to_vec();
    let (wz, wr, wh) = (g(p.w_z), g(p.w_r), g(p.w_h));
    let (uz, ur, uh) = (g(p.u_z), g(p.u_r), g(p.u_h));
    let (bz, br, bh) = (g(p.b_z), g(p.b_r), g(p.b_h));
    let dot_in = |w: &[f64], j: usize| {
        x.iter()
            .enumerate()
            .map(|(i, xi)| xi * w[i * hd + j])
            .sum::<f64>()
    };
    let dot_h = |u: &[f64], v: &[f64], j: usize| {
        v.iter()
            .enumerate()
            .map(|(i, vi)| vi * u[i * hd + j])
            .sum::<f64>()
    };
    let r: Vec<f64> = (0..hd)
        .map(|j| sigmoid(dot_in(&wr, j) + dot_h(&ur, h, j) + br[j]))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    (0..hd)
        .map(|j| {
            let z = sigmoid(dot_in(&wz, j) + dot_h(&uz, h, j) + bz[j]);
            let cand = (dot_in(&wh, j) + dot_h(&uh, &rh, j) + bh[j]).tanh();
            (1.0 - z) * h[j] + z * cand
        })
        .collect()
}

#[test]
fn gru_cell_cases() {
    let (mut s, p) = gru_store(3, 4, 3);
    for v in s.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let hv = Tensor::matrix(1, 4, vec![1.0, -2.0, 0.5, 4.0]);
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![0.3, 0.1, -0.7]));
    let h = t.constant(hv.clone());
    let h2 = gru_cell(&mut t, &s, &p, x, h).unwrap();
    for (a, b) in t.value(h2).data().iter().zip(hv.data()) {
        assert_eq!(*a, 0.5 * b);
    }
    let h0 = t.constant(Tensor::zeros(&[1, 4]));
    let out0 = gru_cell(&mut t, &s, &p, x, h0).unwrap();
    assert!(t.value(out0).data().iter().all(|&v| v == 0.0));

    let (s, p) = gru_store(3, 4, 4);
    let mut r = rng(5);
    let xv = random_tensor(&mut r, &[1, 3], 1.0);
    let hv = random_tensor(&mut r, &[1, 4], 1.0);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let h = t.constant(hv.clone());
    let out = gru_cell(&mut t, &s, &p, x, h).unwrap();
    let expect = gru_cell_oracle(&s, &p, xv.data(), hv.data());
    for (a, e) in t.value(out).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
    let bad = t.constant(Tensor::zeros(&[1, 5]));
    assert!(gru_cell(&mut t, &s, &p, bad, h).is_err());
}

#[test]
fn gru_sequence_shapes_and_single_step() {
    let mut s = ParamStore::new();
    let layer = GruLayer::new(&mut s, "l", 2, 3, true, &mut rng(6));
    let mut r = rng(7);
    for k in 1..200 {
        let layout = Layout::single(k).unwrap();
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&mut r, &[k, 2], 1.0));
        let y = gru_sequence(&mut t, &s, &layer, x, &layout).unwrap();
        assert_eq!(t.value(y).rows(), k);
        assert_eq!(t.value(y).cols(), 6);
    }
    let layout = Layout::single(1).unwrap();
    let mut t = Tape::new();
    let xv = random_tensor(&mut r, &[1, 2], 1.0);
    let x = t.constant(xv);
    let y = gru_sequence(&mut t, &s, &layer, x, &layout).unwrap();
    let h0 = t.constant(Tensor::zeros(&[1, 3]));
    let c = gru_cell(&mut t, &s, &layer.fwd, x, h0).unwrap();
    assert_eq!(&t.value(y).data()[..3], t.value(c).data());
}

#[test]
fn reversing_input_swaps_directions() {
    let mut s = ParamStore::new();
    let layer = GruLayer::new(&mut s, "l", 2, 3, true, &mut rng(8));
    let k = 9;
    let xv = random_tensor(&mut rng(9), &[k, 2], 1.0);
    let rev: Vec<f64> = (0..k).rev().flat_map(|i| xv.row(i).to_vec()).collect();
    let layout = Layout::single(k).unwrap();
    let run = |data: Vec<f64>| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(k, 2, data));
        let y = gru_sequence(&mut t, &s, &layer, x, &layout).unwrap();
        t.value(y).clone()
    };
    let a = run(xv.data().to_vec());
    // recompute with the directions' parameters swapped on reversed input
    let swapped = GruLayer {
        fwd: layer.bwd.clone().unwrap(),
        bwd: Some(layer.fwd.clone()),
    };
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(k, 2, rev));
    let y = gru_sequence(&mut t, &s, &swapped, x, &layout).unwrap();
    let b = t.value(y);
    for i in 0..k {
        let j = k - 1 - i;
        for c in 0..3 {
            assert!((a.at(i, c) - b.at(j, 3 + c)).abs() < 1e-12);
            assert!((a.at(i, 3 + c) - b.at(j, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_cases() {
    let (s, p) = attention_setup(10);
    let mut r = rng(11);
    // T = 1
    let mut t = Tape::new();
    let mem_v = random_tensor(&mut r, &[1, 3], 1.0);
    let values = t.constant(mem_v.clone());
    let mem = AttentionMemory::new(&mut t, &s, &p, values, &[1]).unwrap();
    let q = t.constant(random_tensor(&mut r, &[1, 4], 1.0));
    let cum = t.constant(Tensor::zeros(&[1, 1]));
    let (ctx, w) = location_sensitive_attention(&mut t, &s, &p, &mem, q, cum).unwrap();
    assert!((t.value(w).item() - 1.0).abs() < 1e-15);
    for (a, b) in t.value(ctx).data().iter().zip(mem_v.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    // identical memory rows, zero cumulative weights and zero location bank -> uniform
    let (mut s2, p2) = attention_setup(12);
    s2.get_mut(p2.filters)
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = 0.0);
    let row = random_tensor(&mut r, &[1, 3], 1.0);
    let rows: Vec<f64> = (0..4).flat_map(|_| row.data().to_vec()).collect();
    let mut t = Tape::new();
    let values = t.constant(Tensor::matrix(4, 3, rows));
    let mem = AttentionMemory::new(&mut t, &s2, &p2, values, &[4]).unwrap();
    let q = t.constant(random_tensor(&mut r, &[1, 4], 1.0));
    let cum = t.constant(random_tensor(&mut r, &[1, 4], 1.0));
    let (_, w) = location_sensitive_attention(&mut t, &s2, &p2, &mem, q, cum).unwrap();
    for v in t.value(w).data() {
        assert!((v - 0.25).abs() < 1e-12);
    }

    // random batch with padding: context equals direct weighted sum, weights normalized
    let (s3, p3) = attention_setup(13);
    let lengths = [5usize, 3];
    let mut t = Tape::new();
    let mem_v = random_tensor(&mut r, &[10, 3], 1.0);
    let values = t.constant(mem_v.clone());
    let mem = AttentionMemory::new(&mut t, &s3, &p3, values, &lengths).unwrap();
    let mut cum = t.constant(Tensor::zeros(&[2, 5]));
    for _step in 0..6 {
        let q = t.constant(random_tensor(&mut r, &[2, 4], 1.0));
        let (ctx, w) = location_sensitive_attention(&mut t, &s3, &p3, &mem, q, cum).unwrap();
        let wv = t.value(w).clone();
        for b in 0..2 {
            let row = wv.row(b);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for tt in lengths[b]..5 {
                assert_eq!(row[tt], 0.0);
            }
            for m in 0..3 {
                let direct: f64 = (0..5).map(|tt| row[tt] * mem_v.at(b * 5 + tt, m)).sum();
                assert!((t.value(ctx).at(b, m) - direct).abs() < 1e-12);
            }
        }
        cum = t.add(cum, w).unwrap();
    }
    let bad = t.constant(Tensor::zeros(&[1, 3]));
    assert!(AttentionMemory::new(&mut t, &s3, &p3, bad, &[]).is_err());
}

#[test]
fn layer_gradients_match_finite_differences() {
    for (name, err) in gradients::layer_errors() {
        assert!(err < 1e-5, "{name}: {err:e}");
    }
}

#[test]
fn dropout_is_seeded() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[4, 8], 1.0));
    let a = dropout(&mut t, x, 0.5, &mut rng(3)).unwrap();
    let b = dropout(&mut t, x, 0.5, &mut rng(3)).unwrap();
    assert_eq!(t.value(a), t.value(b));
    assert!(t.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    let c = dropout(&mut t, x, 0.0, &mut rng(3)).unwrap();
    assert_eq!(c, x);
}
