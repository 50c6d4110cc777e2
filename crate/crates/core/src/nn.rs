//! Neural building blocks over time-major batches.
//!
//! A batch of `B` sequences padded to `K` steps is stored as a `[K * B, C]`
//! matrix whose row `t * B + b` is step `t` of item `b`. [`Layout`] records
//! the true length of each item.

use rand::Rng;

use crate::tensor::{
    mismatch, ParamId, ParamStore, Result, Tape, Tensor, TensorError, UnfoldSpec, Var,
};

/// Lengths of the sequences packed into a time-major batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub steps: usize,
    pub lengths: Vec<usize>,
}

impl Layout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
            return Err(TensorError::Invalid("empty sequence in batch".into()));
        }
        let steps = *lengths.iter().max().expect("non-empty");
        Ok(Self { steps, lengths })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch()
    }

    pub fn is_full(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.steps)
    }

    /// `[B, 1]` indicator of items still active at step `t`; `None` when all are.
    pub fn step_mask(&self, t: usize) -> Option<Tensor> {
        if self.lengths.iter().all(|&l| t < l) {
            return None;
        }
        let m = self
            .lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect();
        Some(Tensor::matrix(self.batch(), 1, m))
    }

    /// `[K * B, 1]` indicator of real (non-padding) rows.
    pub fn frame_mask(&self) -> Tensor {
        let b = self.batch();
        let mut m = vec![0.0; self.rows()];
        for (i, &l) in self.lengths.iter().enumerate() {
            for t in 0..l {
                m[t * b + i] = 1.0;
            }
        }
        Tensor::matrix(self.rows(), 1, m)
    }

    pub fn valid_rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Packs per-item `len x C` row-major sequences into a `[K * B, C]` tensor.
    pub fn pack(&self, items: &[&[f64]], cols: usize) -> Tensor {
        let b = self.batch();
        let mut data = vec![0.0; self.rows() * cols];
        for (i, item) in items.iter().enumerate() {
            debug_assert_eq!(item.len(), self.lengths[i] * cols);
            for t in 0..self.lengths[i] {
                let dst = (t * b + i) * cols;
                data[dst..dst + cols].copy_from_slice(&item[t * cols..(t + 1) * cols]);
            }
        }
        Tensor::matrix(self.rows(), cols, data)
    }

    /// Packs token ids; padding rows use `pad`.
    pub fn pack_ids(&self, items: &[&[usize]], pad: usize) -> Vec<usize> {
        let b = self.batch();
        let mut out = vec![pad; self.rows()];
        for (i, item) in items.iter().enumerate() {
            for (t, &id) in item.iter().enumerate() {
                out[t * b + i] = id;
            }
        }
        out
    }

    /// Extracts item `i` from a packed tensor as `len x C` rows.
    pub fn unpack(&self, packed: &Tensor, i: usize) -> Vec<f64> {
        let b = self.batch();
        let c = packed.cols();
        let mut out = Vec::with_capacity(self.lengths[i] * c);
        for t in 0..self.lengths[i] {
            out.extend_from_slice(packed.row(t * b + i));
        }
        out
    }
}

/// `x . weight + bias`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add(y, bias)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight =
            store.insert_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear(tape, x, w, b)
    }
}

/// Temporal convolution with odd window, stride 1 and zero "same" padding.
/// Kernel row `j * in_dim + c` weights channel `c` at offset `j - width / 2`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(mismatch(
                "temporal_conv",
                format!("window width {width} is even"),
            ));
        }
        let fan_in = width * in_dim;
        let kernel =
            store.insert_uniform(format!("{name}.kernel"), &[fan_in, out_dim], fan_in, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[out_dim], fan_in, rng);
        Ok(Self {
            kernel,
            bias,
            width,
            in_dim,
            out_dim,
        })
    }

    /// Padding rows of `x` must be zero for padded items to match their
    /// unpadded result.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layout: &Layout,
    ) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        temporal_conv(tape, x, layout, k, b, self.width)
    }
}

/// Convolves a packed batch `[K * B, C]` with `kernel [width * C, C']`.
pub fn temporal_conv(
    tape: &mut Tape,
    x: Var,
    layout: &Layout,
    kernel: Var,
    bias: Var,
    width: usize,
) -> Result<Var> {
    if width % 2 == 0 {
        return Err(mismatch(
            "temporal_conv",
            format!("window width {width} is even"),
        ));
    }
    let spec = UnfoldSpec {
        outer: 1,
        steps: layout.steps,
        inner: layout.batch(),
        width,
    };
    let windows = tape.unfold(x, spec)?;
    linear(tape, windows, kernel, bias)
}

/// GRU weights with gate convention
/// `z = s(x W_z + h U_z + b_z)`, `r = s(x W_r + h U_r + b_r)`,
/// `h~ = tanh(x W_h + (r * h) U_h + b_h)`, `h' = (1 - z) * h + z * h~`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |s: &str, shape: &[usize], store: &mut ParamStore| {
            store.insert_uniform(format!("{name}.{s}"), shape, hidden, rng)
        };
        Self {
            w_z: w("W_z", &[input_dim, hidden], store),
            w_r: w("W_r", &[input_dim, hidden], store),
            w_h: w("W_h", &[input_dim, hidden], store),
            u_z: w("U_z", &[hidden, hidden], store),
            u_r: w("U_r", &[hidden, hidden], store),
            u_h: w("U_h", &[hidden, hidden], store),
            b_z: w("b_z", &[hidden], store),
            b_r: w("b_r", &[hidden], store),
            b_h: w("b_h", &[hidden], store),
            input_dim,
            hidden,
        }
    }

    fn input_projections(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (slot, (w, b)) in out.iter_mut().zip([
            (self.w_z, self.b_z),
            (self.w_r, self.b_r),
            (self.w_h, self.b_h),
        ]) {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            *slot = linear(tape, x, w, b)?;
        }
        Ok(out)
    }

    /// One recurrence step given precomputed input projections. Rows whose
    /// `mask` entry is zero keep their previous state.
    fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proj: [Var; 3],
        h: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let u_z = tape.param(store, self.u_z);
        let u_r = tape.param(store, self.u_r);
        let u_h = tape.param(store, self.u_h);
        let hz = tape.matmul(h, u_z)?;
        let z = tape.add(proj[0], hz)?;
        let mut z = tape.sigmoid(z)?;
        let hr = tape.matmul(h, u_r)?;
        let r = tape.add(proj[1], hr)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, u_h)?;
        let cand = tape.add(proj[2], rhu)?;
        let cand = tape.tanh(cand)?;
        if let Some(m) = mask {
            z = tape.mul(z, m)?;
        }
        let delta = tape.sub(cand, h)?;
        let upd = tape.mul(z, delta)?;
        tape.add(h, upd)
    }
}

/// Single GRU step on `x [B, in]`, `h [B, H]`.
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GruParams,
    x: Var,
    h: Var,
) -> Result<Var> {
    let (xv, hv) = (tape.value(x), tape.value(h));
    if xv.cols() != params.input_dim || hv.cols() != params.hidden || xv.rows() != hv.rows() {
        return Err(mismatch(
            "gru_cell",
            format!("x {:?}, h {:?}", xv.shape(), hv.shape()),
        ));
    }
    let proj = params.input_projections(tape, store, x)?;
    params.step(tape, store, proj, h, None)
}

/// Runs one direction over a packed batch. Returns `[K * B, H]` states in
/// time order; padding rows carry the last (or, reversed, the zero) state.
pub fn gru_direction(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GruParams,
    xs: Var,
    layout: &Layout,
    reverse: bool,
) -> Result<Var> {
    let xv = tape.value(xs);
    if xv.rows() != layout.rows() || xv.cols() != params.input_dim {
        return Err(mismatch(
            "gru_sequence",
            format!(
                "input {:?} for {} rows x {}",
                xv.shape(),
                layout.rows(),
                params.input_dim
            ),
        ));
    }
    let b = layout.batch();
    let proj_all = params.input_projections(tape, store, xs)?;
    let mut h = tape.constant(Tensor::zeros(&[b, params.hidden]));
    let mut states = vec![h; layout.steps];
    let order: Vec<usize> = if reverse {
        (0..layout.steps).rev().collect()
    } else {
        (0..layout.steps).collect()
    };
    for t in order {
        let mut proj = proj_all;
        for p in &mut proj {
            *p = tape.slice_rows(*p, t * b, b)?;
        }
        let mask = layout.step_mask(t).map(|m| tape.constant(m));
        h = params.step(tape, store, proj, h, mask)?;
        states[t] = h;
    }
    tape.concat_rows(&states)
}

/// A GRU layer, optionally bidirectional (forward and backward states
/// concatenated per step).
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub fwd: GruParams,
    pub bwd: Option<GruParams>,
}

impl GruLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fwd = GruParams::new(store, &format!("{name}.fwd"), input_dim, hidden, rng);
        let bwd = bidirectional
            .then(|| GruParams::new(store, &format!("{name}.bwd"), input_dim, hidden, rng));
        Self { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden * if self.bwd.is_some() { 2 } else { 1 }
    }
}

/// `K` output states for a packed batch of `K`-step inputs.
pub fn gru_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GruLayer,
    xs: Var,
    layout: &Layout,
) -> Result<Var> {
    let f = gru_direction(tape, store, &layer.fwd, xs, layout, false)?;
    match &layer.bwd {
        None => Ok(f),
        Some(bp) => {
            let r = gru_direction(tape, store, bp, xs, layout, true)?;
            tape.concat_cols(&[f, r])
        }
    }
}

/// Location-sensitive additive attention. The location term convolves the
/// cumulative attention of all previous decoder steps.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub memory: ParamId,
    pub filters: ParamId,
    pub location: ParamId,
    pub score: ParamId,
    pub filter_width: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub query_dim: usize,
    pub memory_dim: usize,
    pub dim: usize,
    pub filters: usize,
    pub filter_width: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.filter_width % 2 == 0 {
            return Err(mismatch("attention", "location filter width must be odd"));
        }
        let query = Linear::new(store, &format!("{name}.query"), cfg.query_dim, cfg.dim, rng);
        let memory = store.insert_uniform(
            format!("{name}.memory"),
            &[cfg.memory_dim, cfg.dim],
            cfg.memory_dim,
            rng,
        );
        let filters = store.insert_uniform(
            format!("{name}.loc_filters"),
            &[cfg.filter_width, cfg.filters],
            cfg.filter_width,
            rng,
        );
        let location = store.insert_uniform(
            format!("{name}.loc_proj"),
            &[cfg.filters, cfg.dim],
            cfg.filters,
            rng,
        );
        let score = store.insert_uniform(format!("{name}.score"), &[cfg.dim, 1], cfg.dim, rng);
        Ok(Self {
            query,
            memory,
            filters,
            location,
            score,
            filter_width: cfg.filter_width,
            dim: cfg.dim,
        })
    }
}

/// Encoder outputs in batch-major layout `[B * T, M]` plus their projection.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    pub values: Var,
    pub keys: Var,
    pub batch: usize,
    pub steps: usize,
    /// Additive `[B, T]` mask with a large negative value on padding.
    pub pad: Option<Var>,
}

impl AttentionMemory {
    pub fn new(
        tape: &mut Tape,
        store: &ParamStore,
        params: &AttentionParams,
        values: Var,
        lengths: &[usize],
    ) -> Result<Self> {
        let batch = lengths.len();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        if steps == 0 || lengths.contains(&0) {
            return Err(mismatch("attention", "empty memory"));
        }
        if tape.value(values).rows() != batch * steps {
            return Err(mismatch("attention", "memory rows do not match lengths"));
        }
        let w = tape.param(store, params.memory);
        let keys = tape.matmul(values, w)?;
        let pad = if lengths.iter().all(|&l| l == steps) {
            None
        } else {
            let mut m = vec![0.0; batch * steps];
            for (b, &l) in lengths.iter().enumerate() {
                for t in l..steps {
                    m[b * steps + t] = -1e9;
                }
            }
            Some(tape.constant(Tensor::matrix(batch, steps, m)))
        };
        Ok(Self {
            values,
            keys,
            batch,
            steps,
            pad,
        })
    }
}

/// Returns `(context [B, M], weights [B, T])` for `query [B, Hq]` and the
/// cumulative previous weights `[B, T]` (all zero at the first step).
pub fn location_sensitive_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    memory: &AttentionMemory,
    query: Var,
    cumulative: Var,
) -> Result<(Var, Var)> {
    let (b, t) = (memory.batch, memory.steps);
    let cv = tape.value(cumulative);
    if cv.rows() != b || cv.cols() != t {
        return Err(mismatch(
            "attention",
            format!("cumulative weights {:?}", cv.shape()),
        ));
    }
    let q = params.query.forward(tape, store, query)?;
    let q = tape.repeat_rows(q, t)?;
    let cum = tape.reshape(cumulative, &[b * t, 1])?;
    let windows = tape.unfold(
        cum,
        UnfoldSpec {
            outer: b,
            steps: t,
            inner: 1,
            width: params.filter_width,
        },
    )?;
    let filters = tape.param(store, params.filters);
    let loc = tape.matmul(windows, filters)?;
    let loc_proj = tape.param(store, params.location);
    let loc = tape.matmul(loc, loc_proj)?;
    let e = tape.add(q, memory.keys)?;
    let e = tape.add(e, loc)?;
    let e = tape.tanh(e)?;
    let v = tape.param(store, params.score);
    let scores = tape.matmul(e, v)?;
    let mut scores = tape.reshape(scores, &[b, t])?;
    if let Some(pad) = memory.pad {
        scores = tape.add(scores, pad)?;
    }
    let logw = tape.log_softmax(scores)?;
    let weights = tape.exp(logw)?;
    let context = tape.weighted_sum(weights, memory.values)?;
    Ok((context, weights))
}

/// Inverted dropout with keep-probability `1 - p`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let m: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(shape, m)?);
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_masks() {
        let l = Layout::new(vec![3, 1, 2]).unwrap();
        assert_eq!(l.steps, 3);
        assert!(l.step_mask(0).is_none());
        assert_eq!(l.step_mask(1).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(l.frame_mask().sum(), 6.0);
        assert!(Layout::new(vec![]).is_err());
        assert!(Layout::new(vec![2, 0]).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let l = Layout::new(vec![2, 3]).unwrap();
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let p = l.pack(&[&a, &b], 2);
        assert_eq!(l.unpack(&p, 0), a.to_vec());
        assert_eq!(l.unpack(&p, 1), b.to_vec());
    }

    #[test]
    fn even_conv_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        assert!(Conv1d::new(&mut s, "c", 2, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn padded_items_match_unpadded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let layer = GruLayer::new(&mut s, "g", 3, 4, true, &mut rng);
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..6).map(|i| (i as f64 * 0.11).cos()).collect();
        let run = |items: &[&[f64]]| {
            let lens = items.iter().map(|x| x.len() / 3).collect();
            let layout = Layout::new(lens).unwrap();
            let mut t = Tape::new();
            let x = t.constant(layout.pack(items, 3));
            let y = gru_sequence(&mut t, &s, &layer, x, &layout).unwrap();
            let v = t.value(y).clone();
            (0..items.len())
                .map(|i| layout.unpack(&v, i))
                .collect::<Vec<_>>()
        };
        let joint = run(&[&a, &b]);
        let alone_a = run(&[&a]);
        let alone_b = run(&[&b]);
        for (x, y) in joint[0].iter().zip(&alone_a[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in joint[1].iter().zip(&alone_b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
