//! Finite-difference suites shared by the unit tests and the acceptance run.

use std::cell::RefCell;

use duallab::align::DurationSeq;
use duallab::ctc::{ctc_loss_raw, min_frames, LogProbMatrix};
use duallab::models::{GenItem, Generator, GeneratorConfig, GeneratorKind, Reader, ReaderConfig};
use duallab::nn::*;
use duallab::tensor::{ParamStore, Tape, Tensor, UnfoldSpec, Var};
use duallab::trace::Trace;
use duallab::vocab::TextSeq;
use rand::Rng;

use super::*;

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element contributes a distinct amount to the scalar loss.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn check_op(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> (&'static str, f64) {
    let err = max_fd_error(&inputs, |t, v| {
        let out = f(t, v);
        if t.value(out).is_scalar() {
            out
        } else {
            probe(t, out, 99)
        }
    });
    (name, err)
}

/// Maximum relative error per tape op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[3, 4], 1.0);
    let row = random_tensor(&mut r, &[4], 1.0);
    let col = random_tensor(&mut r, &[3, 1], 1.0);
    let m = random_tensor(&mut r, &[4, 5], 1.0);

    out.push(check_op("add", vec![a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    }));
    out.push(check_op("add_row", vec![a.clone(), row.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    }));
    out.push(check_op("sub", vec![a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    }));
    out.push(check_op("sub_col", vec![a.clone(), col.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    }));
    out.push(check_op("mul", vec![a.clone(), b.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    }));
    out.push(check_op("mul_row", vec![a.clone(), row.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    }));
    out.push(check_op("mul_col", vec![a.clone(), col.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    }));
    out.push(check_op("matmul", vec![a.clone(), m.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    }));
    out.push(check_op("tanh", vec![a.clone()], |t, v| {
        t.tanh(v[0]).unwrap()
    }));
    out.push(check_op("sigmoid", vec![a.clone()], |t, v| {
        t.sigmoid(v[0]).unwrap()
    }));
    let kinked = random_away_from_zero(&mut r, &[3, 4], 0.01);
    out.push(check_op("relu", vec![kinked], |t, v| t.relu(v[0]).unwrap()));
    out.push(check_op("exp", vec![a.clone()], |t, v| {
        t.exp(v[0]).unwrap()
    }));
    out.push(check_op("scale", vec![a.clone()], |t, v| {
        t.scale(v[0], -2.5).unwrap()
    }));
    out.push(check_op(
        "concat_last_axis",
        vec![a.clone(), col.clone(), b.clone()],
        |t, v| t.concat_cols(&[v[0], v[1], v[2]]).unwrap(),
    ));
    out.push(check_op(
        "concat_rows",
        vec![a.clone(), b.clone()],
        |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
    ));
    out.push(check_op("slice_rows", vec![a.clone()], |t, v| {
        t.slice_rows(v[0], 1, 2).unwrap()
    }));
    out.push(check_op("slice_cols", vec![a.clone()], |t, v| {
        t.slice_cols(v[0], 1, 2).unwrap()
    }));
    out.push(check_op(
        "log_softmax_last_axis",
        vec![a.clone()],
        |t, v| t.log_softmax(v[0]).unwrap(),
    ));
    out.push(check_op("sum", vec![a.clone()], |t, v| {
        t.sum(v[0]).unwrap()
    }));
    out.push(check_op("mean", vec![a.clone()], |t, v| {
        t.mean(v[0]).unwrap()
    }));
    let gap = random_away_from_zero(&mut r, &[3, 4], 0.01);
    let shifted = {
        let mut s = b.clone();
        for (x, (y, g)) in s.data_mut().iter_mut().zip(b.data().iter().zip(gap.data())) {
            *x = y + g;
        }
        s
    };
    out.push(check_op("l1_distance", vec![b.clone(), shifted], |t, v| {
        t.l1_distance(v[0], v[1]).unwrap()
    }));
    out.push(check_op("gather_rows", vec![a.clone()], |t, v| {
        t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()
    }));
    let seq = random_tensor(&mut r, &[6, 2], 1.0);
    out.push(check_op("unfold", vec![seq.clone()], |t, v| {
        let spec = UnfoldSpec {
            outer: 1,
            steps: 3,
            inner: 2,
            width: 3,
        };
        t.unfold(v[0], spec).unwrap()
    }));
    out.push(check_op("unfold_batch_major", vec![seq.clone()], |t, v| {
        let spec = UnfoldSpec {
            outer: 2,
            steps: 6 / 2,
            inner: 1,
            width: 5,
        };
        t.unfold(v[0], spec).unwrap()
    }));
    out.push(check_op("reshape", vec![a.clone()], |t, v| {
        t.reshape(v[0], &[6, 2]).unwrap()
    }));
    out.push(check_op("repeat_rows", vec![a.clone()], |t, v| {
        t.repeat_rows(v[0], 3).unwrap()
    }));
    out.push(check_op("tile_rows", vec![a.clone()], |t, v| {
        t.tile_rows(v[0], 2).unwrap()
    }));
    let w = random_tensor(&mut r, &[2, 3], 1.0);
    let vals = random_tensor(&mut r, &[6, 4], 1.0);
    out.push(check_op("weighted_sum", vec![w, vals], |t, v| {
        t.weighted_sum(v[0], v[1]).unwrap()
    }));
    out
}

pub fn random_ctc_instance(r: &mut impl Rng) -> (usize, usize, Vec<f64>, Vec<usize>) {
    loop {
        let frames = r.gen_range(1..=6);
        let vocab = r.gen_range(2..=4);
        let len = r.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| r.gen_range(1..vocab)).collect();
        if min_frames(&target) > frames {
            continue;
        }
        let logits: Vec<f64> = (0..frames * vocab)
            .map(|_| r.gen_range(-2.0..2.0))
            .collect();
        let m = LogProbMatrix::from_logits(frames, vocab, &logits).unwrap();
        return (frames, vocab, m.values().to_vec(), target);
    }
}

/// Worst relative error of the CTC gradient over `n` random instances.
pub fn ctc_gradient_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (k, v, lp, target) = random_ctc_instance(&mut r);
        let (_, grad) = ctc_loss_raw(&lp, k, v, &target).unwrap();
        worst = worst.max(max_fd_error_fn(&lp, &grad, |x| {
            ctc_loss_raw(x, k, v, &target).unwrap().0
        }));
    }
    worst
}

pub fn gru_store(input: usize, hidden: usize, seed: u64) -> (ParamStore, GruParams) {
    let mut s = ParamStore::new();
    let p = GruParams::new(&mut s, "gru", input, hidden, &mut rng(seed));
    (s, p)
}

pub fn attention_setup(seed: u64) -> (ParamStore, AttentionParams) {
    let mut s = ParamStore::new();
    let cfg = AttentionConfig {
        query_dim: 4,
        memory_dim: 3,
        dim: 5,
        filters: 2,
        filter_width: 3,
    };
    let p = AttentionParams::new(&mut s, "att", cfg, &mut rng(seed)).unwrap();
    (s, p)
}

/// Maximum relative error per layer check, all w.r.t. parameters unless named.
pub fn layer_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(20);
    // linear + conv + bidirectional GRU with padding
    let mut s = ParamStore::new();
    let conv = Conv1d::new(&mut s, "conv", 2, 3, 3, &mut r).unwrap();
    let gru = GruLayer::new(&mut s, "gru", 3, 2, true, &mut r);
    let lin = Linear::new(&mut s, "lin", 4, 2, &mut r);
    assert!(s.num_scalars() <= 5000);
    let layout = Layout::new(vec![4, 2]).unwrap();
    let a = random_tensor(&mut r, &[4, 2], 1.0);
    let b = random_tensor(&mut r, &[2, 2], 1.0);
    let packed = layout.pack(&[a.data(), b.data()], 2);
    let mask = layout.frame_mask();
    let probe = random_tensor(&mut r, &[8, 2], 1.0);
    let err = max_fd_error_store(&s, |t, st| {
        let x = t.constant(packed.clone());
        let h = conv.forward(t, st, x, &layout).unwrap();
        let h = t.tanh(h).unwrap();
        let m = t.constant(mask.clone());
        let h = t.mul(h, m).unwrap();
        let h = gru_sequence(t, st, &gru, h, &layout).unwrap();
        let y = lin.forward(t, st, h).unwrap();
        let y = t.mul(y, m).unwrap();
        let p = t.constant(probe.clone());
        let y = t.mul(y, p).unwrap();
        t.sum(y).unwrap()
    });
    out.push(("stack", err));

    // gru_cell w.r.t. parameters and inputs
    let (s, p) = gru_store(3, 4, 21);
    let xv = random_tensor(&mut r, &[2, 3], 1.0);
    let hv = random_tensor(&mut r, &[2, 4], 1.0);
    let err = max_fd_error_store(&s, |t, st| {
        let x = t.constant(xv.clone());
        let h = t.constant(hv.clone());
        let y = gru_cell(t, st, &p, x, h).unwrap();
        let y = t.mul(y, y).unwrap();
        t.sum(y).unwrap()
    });
    out.push(("gru_cell params", err));
    let err = max_fd_error(&[xv.clone(), hv.clone()], |t, v| {
        let y = gru_cell(t, &s, &p, v[0], v[1]).unwrap();
        let y = t.mul(y, y).unwrap();
        t.sum(y).unwrap()
    });
    out.push(("gru_cell inputs", err));

    // attention over three decoder steps w.r.t. parameters
    let (s, p) = attention_setup(22);
    let mem_v = random_tensor(&mut r, &[8, 3], 1.0);
    let queries: Vec<Tensor> = (0..3)
        .map(|_| random_tensor(&mut r, &[2, 4], 1.0))
        .collect();
    let err = max_fd_error_store(&s, |t, st| {
        let values = t.constant(mem_v.clone());
        let mem = AttentionMemory::new(t, st, &p, values, &[4, 3]).unwrap();
        let mut cum = t.constant(Tensor::zeros(&[2, 4]));
        let mut total = None;
        for q in &queries {
            let qv = t.constant(q.clone());
            let (ctx, w) = location_sensitive_attention(t, st, &p, &mem, qv, cum).unwrap();
            cum = t.add(cum, w).unwrap();
            let c2 = t.mul(ctx, ctx).unwrap();
            let sc = t.sum(c2).unwrap();
            total = Some(match total {
                None => sc,
                Some(prev) => t.add(prev, sc).unwrap(),
            });
        }
        total.unwrap()
    });
    out.push(("attention", err));
    out
}

pub fn random_trace(rng: &mut impl Rng, frames: usize, dim: usize) -> Trace {
    Trace::new(
        frames,
        dim,
        (0..frames * dim)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect(),
    )
    .unwrap()
}

pub trait HasStore: Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl HasStore for Reader {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl HasStore for Generator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Central differences over every parameter of a model.
pub fn model_fd<M: HasStore>(model: &M, loss: impl Fn(&M, &mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<f64> = grads
        .for_store(model.store())
        .into_iter()
        .zip(model.store().values())
        .flat_map(|(g, v)| g.map_or(vec![0.0; v.numel()], |g| g.data().to_vec()))
        .collect();
    let theta = flatten_store(model.store());
    assert!(theta.len() <= 5000, "{} parameters", theta.len());
    let scratch = RefCell::new(model.clone());
    max_fd_error_fn(&theta, &analytic, |p| {
        let mut m = scratch.borrow_mut();
        set_store(m.store_mut(), p);
        let mut t = Tape::new();
        let l = loss(&m, &mut t);
        t.value(l).item()
    })
}

pub fn tiny_reader() -> Reader {
    Reader::new(ReaderConfig {
        dim: 3,
        conv_channels: 3,
        conv_width: 3,
        conv_layers: 1,
        hidden: 3,
        gru_layers: 2,
        ..ReaderConfig::default()
    })
    .unwrap()
}

pub fn tiny_generator(kind: GeneratorKind) -> Generator {
    Generator::new(GeneratorConfig {
        kind,
        dim: 3,
        embed: 3,
        hidden: 4,
        guide: 2,
        prenet: 3,
        attention_dim: 3,
        location_filters: 2,
        location_width: 3,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

/// Maximum relative error of each model's training loss over all parameters.
pub fn model_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    {
        let reader = tiny_reader();
        let mut rng = rng(1);
        let traces = [random_trace(&mut rng, 5, 3), random_trace(&mut rng, 4, 3)];
        let targets = [TextSeq(vec![4, 5]), TextSeq(vec![6])];
        let err = model_fd(&reader, |m, tape| {
            let tr: Vec<&Trace> = traces.iter().collect();
            let tg: Vec<&TextSeq> = targets.iter().collect();
            m.ctc_loss(tape, &tr, &tg).unwrap().0.unwrap()
        });
        out.push(("reader ctc", err));
    }
    {
        let g = tiny_generator(GeneratorKind::Duration);
        let mut rng = rng(2);
        let texts = [TextSeq(vec![1, 7, 2]), TextSeq(vec![1, 9])];
        let durs = [DurationSeq(vec![1, 2, 2]), DurationSeq(vec![2, 1])];
        let targets = [random_trace(&mut rng, 5, 3), random_trace(&mut rng, 3, 3)];
        let guides: Vec<Vec<f64>> = targets.iter().map(|t| t.frame(0).to_vec()).collect();
        let err = model_fd(&g, |m, tape| {
            let items: Vec<GenItem> = (0..2)
                .map(|i| GenItem {
                    text: &texts[i],
                    durations: Some(&durs[i]),
                    guide: &guides[i],
                    target: Some(&targets[i]),
                })
                .collect();
            m.loss(tape, &items, None).unwrap().total
        });
        out.push(("duration generator l1", err));
    }
    {
        let g = tiny_generator(GeneratorKind::Attention);
        let mut rng = rng(3);
        let texts = [TextSeq(vec![1, 7, 2]), TextSeq(vec![1, 9])];
        let targets = [random_trace(&mut rng, 5, 3), random_trace(&mut rng, 3, 3)];
        let guides: Vec<Vec<f64>> = targets.iter().map(|t| t.frame(0).to_vec()).collect();
        let err = model_fd(&g, |m, tape| {
            let items: Vec<GenItem> = (0..2)
                .map(|i| GenItem {
                    text: &texts[i],
                    durations: None,
                    guide: &guides[i],
                    target: Some(&targets[i]),
                })
                .collect();
            m.loss(tape, &items, None).unwrap().total
        });
        out.push(("attention generator l1", err));
    }
    out
}
