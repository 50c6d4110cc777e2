//! Joint training of the reader and a generator: supervised steps on paired
//! data, then dual steps where each model learns from the other's outputs on
//! unpaired text and unpaired traces.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::align::{extract_durations, monotonicity, run_lengths, DurationSeq};
use crate::config::{set_parsed, KeyValueConfig};
use crate::ctc::BLANK;
use crate::metrics::{self, EvalReport};
use crate::models::{
    GenItem, Generator, GeneratorConfig, GeneratorKind, ModelError, Reader, ReaderConfig,
};
use crate::synth::{seeded_rng, Dataset, Split, Utterance};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::trace::Trace;
use crate::vocab::TextSeq;

pub const CSV_HEADER: &str =
    "epoch,stage,L_p_lg,L_p_lr,L_u_lg,L_u_lr,total,eval_cer,eval_wer,eval_l1,eval_psnr";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite {what} at epoch {epoch}, iteration {iteration}")]
    NonFinite {
        what: String,
        epoch: usize,
        iteration: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    /// Name of the operation that produced a non-finite value, if that is
    /// what went wrong.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        match self {
            TrainError::Tensor(TensorError::NonFinite { op })
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => Some(op),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Baseline,
    Dual,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Dual => "dual",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "dual" => Ok(Self::Dual),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct DualConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    /// Supervised-only epochs; 0 switches at the first reader plateau.
    pub stage1_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub unpaired_batch_size: usize,
    /// Iterations per epoch; 0 means one pass over the paired split.
    pub steps_per_epoch: usize,
    pub reader_lr: f64,
    pub generator_lr: f64,
    pub reader_weight_decay: f64,
    pub reader_decay: f64,
    pub generator_decay: f64,
    pub plateau_patience: usize,
    pub plateau_delta: f64,
    /// Global gradient norm cap per model; 0 disables clipping.
    pub grad_clip: f64,
    pub unpaired_fraction: f64,
    /// Evaluate on at most this many eval utterances; 0 means all.
    pub eval_limit: usize,
    pub seed: u64,
    pub reader: ReaderConfig,
    pub generator: GeneratorConfig,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dual,
            alpha: 1.0,
            stage1_epochs: 0,
            total_epochs: 30,
            batch_size: 16,
            unpaired_batch_size: 16,
            steps_per_epoch: 0,
            reader_lr: 2e-4,
            generator_lr: 1e-3,
            reader_weight_decay: 0.01,
            reader_decay: 0.5,
            generator_decay: 0.1,
            plateau_patience: 3,
            plateau_delta: 1e-4,
            grad_clip: 5.0,
            unpaired_fraction: 1.0,
            eval_limit: 0,
            seed: 7,
            reader: ReaderConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl KeyValueConfig for DualConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        if let Some(k) = key.strip_prefix("reader.") {
            return self.reader.set(k, value);
        }
        if let Some(k) = key.strip_prefix("generator.") {
            return self.generator.set(k, value);
        }
        match key {
            "mode" => set_parsed(&mut self.mode, value),
            "alpha" => set_parsed(&mut self.alpha, value),
            "stage1_epochs" => set_parsed(&mut self.stage1_epochs, value),
            "total_epochs" => set_parsed(&mut self.total_epochs, value),
            "batch_size" => set_parsed(&mut self.batch_size, value),
            "unpaired_batch_size" => set_parsed(&mut self.unpaired_batch_size, value),
            "steps_per_epoch" => set_parsed(&mut self.steps_per_epoch, value),
            "reader_lr" => set_parsed(&mut self.reader_lr, value),
            "generator_lr" => set_parsed(&mut self.generator_lr, value),
            "reader_weight_decay" => set_parsed(&mut self.reader_weight_decay, value),
            "reader_decay" => set_parsed(&mut self.reader_decay, value),
            "generator_decay" => set_parsed(&mut self.generator_decay, value),
            "plateau_patience" => set_parsed(&mut self.plateau_patience, value),
            "plateau_delta" => set_parsed(&mut self.plateau_delta, value),
            "grad_clip" => set_parsed(&mut self.grad_clip, value),
            "unpaired_fraction" => set_parsed(&mut self.unpaired_fraction, value),
            "eval_limit" => set_parsed(&mut self.eval_limit, value),
            "seed" => set_parsed(&mut self.seed, value),
            _ => Ok(false),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.alpha >= 0.0) {
            return Err("alpha must be non-negative".into());
        }
        if self.total_epochs == 0 || self.batch_size == 0 || self.unpaired_batch_size == 0 {
            return Err("epochs and batch sizes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.unpaired_fraction) {
            return Err("unpaired_fraction must be in [0,1]".into());
        }
        if !(self.reader_lr > 0.0 && self.generator_lr > 0.0) {
            return Err("learning rates must be positive".into());
        }
        if self.reader.dim != self.generator.dim
            || self.reader.token_mode != self.generator.token_mode
        {
            return Err("reader and generator must agree on dim and token_mode".into());
        }
        self.reader.validate()?;
        self.generator.validate()
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("alpha", self.alpha.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("total_epochs", self.total_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("unpaired_batch_size", self.unpaired_batch_size.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("reader_lr", self.reader_lr.to_string()),
            ("generator_lr", self.generator_lr.to_string()),
            ("reader_weight_decay", self.reader_weight_decay.to_string()),
            ("reader_decay", self.reader_decay.to_string()),
            ("generator_decay", self.generator_decay.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("plateau_delta", self.plateau_delta.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("unpaired_fraction", self.unpaired_fraction.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Top-level keys followed by the nested model keys with their prefixes.
    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in self.reader.to_pairs() {
            let _ = writeln!(s, "reader.{k} = {v}");
        }
        for (k, v) in self.generator.to_pairs() {
            let _ = writeln!(s, "generator.{k} = {v}");
        }
        s
    }
}

/// Adam with bias correction; decoupled weight decay when `weight_decay > 0`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(TrainError::Tensor(TensorError::NonFinite {
                op: "adam gradient",
            }));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (param, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (p, &gj)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                if self.weight_decay > 0.0 {
                    *p -= self.lr * self.weight_decay * *p;
                }
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn decay(&mut self, ratio: f64) {
        self.lr *= ratio;
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::norm_sq)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Fires after `patience` consecutive observations that fail to beat the
/// best value by more than `delta`.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub delta: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize, delta: f64) -> Self {
        Self {
            patience,
            delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> bool {
        if value < self.best - self.delta {
            self.best = value;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Per-iteration loss terms. Missing terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_p_lg: f64,
    pub l_p_lr: f64,
    pub l_u_lg: f64,
    pub l_u_lr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_p_lg: f64, l_p_lr: f64, l_u_lg: f64, l_u_lr: f64, alpha: f64) -> Self {
        Self {
            l_p_lg,
            l_p_lr,
            l_u_lg,
            l_u_lr,
            total: (l_p_lg + l_p_lr) + alpha * (l_u_lg + l_u_lr),
        }
    }
}

/// Durations for a decoded transcript: one run per non-blank label run,
/// each absorbing the blanks that follow it (leading blanks go to the first
/// token). Returns `None` when only blanks were emitted.
pub fn pseudo_durations(frame_labels: &[usize]) -> Option<(TextSeq, DurationSeq)> {
    let mut text = Vec::new();
    let mut durs: Vec<usize> = Vec::new();
    let mut leading = 0;
    for (label, n) in run_lengths(frame_labels) {
        if label == BLANK {
            match durs.last_mut() {
                Some(d) => *d += n,
                None => leading += n,
            }
        } else {
            text.push(label);
            durs.push(n);
        }
    }
    let first = durs.first_mut()?;
    *first += leading;
    Some((TextSeq(text), DurationSeq(durs)))
}

/// Splits `trace` into `prototypes.len()` contiguous segments of at least
/// one frame, minimising the L1 distance of every frame to its segment's
/// prototype. Returns the segment lengths.
pub fn segment_trace(trace: &Trace, prototypes: &[Vec<f64>]) -> Option<DurationSeq> {
    let (k, t) = (trace.frames(), prototypes.len());
    if t == 0 || t > k {
        return None;
    }
    let cost: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| {
            (0..k)
                .map(|f| {
                    trace
                        .frame(f)
                        .iter()
                        .zip(p)
                        .map(|(a, b)| (a - b).abs())
                        .sum()
                })
                .collect()
        })
        .collect();
    // best[i][f]: first i segments cover the first f frames
    let mut best = vec![vec![f64::INFINITY; k + 1]; t + 1];
    let mut back = vec![vec![0usize; k + 1]; t + 1];
    best[0][0] = 0.0;
    for i in 1..=t {
        // leave at least one frame for each later segment
        for f in i..=k - (t - i) {
            let mut acc = 0.0;
            for start in (i - 1..f).rev() {
                acc += cost[i - 1][start];
                let c = best[i - 1][start] + acc;
                if c < best[i][f] {
                    best[i][f] = c;
                    back[i][f] = start;
                }
            }
        }
    }
    let mut durs = vec![0; t];
    let mut f = k;
    for i in (1..=t).rev() {
        let start = back[i][f];
        durs[i - 1] = f - start;
        f = start;
    }
    Some(DurationSeq(durs))
}

/// Mean frame of each token's span in a generated trace.
pub fn token_prototypes(generated: &Trace, durations: &DurationSeq) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(durations.len());
    let mut f0 = 0;
    for &d in durations.counts() {
        let mut m = vec![0.0; generated.dim()];
        for f in f0..f0 + d {
            for (acc, v) in m.iter_mut().zip(generated.frame(f)) {
                *acc += v / d as f64;
            }
        }
        out.push(m);
        f0 += d;
    }
    out
}

/// Uniformly chosen frame of `trace`.
pub fn random_guide(trace: &Trace, rng: &mut impl Rng) -> Vec<f64> {
    trace.frame(rng.gen_range(0..trace.frames())).to_vec()
}

/// Guide frames for text-only utterances come from traces of the same
/// speaker (paired or lip-only); any trace when the speaker has none.
#[derive(Clone, Debug, Default)]
pub struct GuidePool {
    by_speaker: Vec<Vec<usize>>,
    all: Vec<usize>,
}

impl GuidePool {
    pub fn new(data: &Dataset) -> Self {
        let mut pool = Self::default();
        for (i, u) in data.utterances.iter().enumerate() {
            if u.trace.is_some() && matches!(u.split, Split::Paired | Split::LipOnly) {
                if pool.by_speaker.len() <= u.speaker {
                    pool.by_speaker.resize(u.speaker + 1, Vec::new());
                }
                pool.by_speaker[u.speaker].push(i);
                pool.all.push(i);
            }
        }
        pool
    }

    pub fn guide(&self, data: &Dataset, speaker: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
        let list = match self.by_speaker.get(speaker) {
            Some(l) if !l.is_empty() => l,
            _ => &self.all,
        };
        let &i = list.get(rng.gen_range(0..list.len().max(1)))?;
        Some(random_guide(data.utterances[i].trace.as_ref()?, rng))
    }
}

/// Loss variables of one iteration on a shared tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepVars {
    pub p_lg: Option<Var>,
    pub p_lr: Option<Var>,
    pub u_lg: Option<Var>,
    pub u_lr: Option<Var>,
}

/// Bookkeeping from a dual step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualInfo {
    /// Frame counts of the pseudo traces made from the text batch.
    pub pseudo_frames: Vec<usize>,
    /// Lip items whose decoded transcript was empty.
    pub skipped_decodes: usize,
    /// Text items whose pseudo trace was too short for CTC.
    pub skipped_ctc: usize,
    /// Set when more than half the lip batch was skipped.
    pub generator_term_dropped: bool,
}

/// Reader CTC and generator L1 on a paired batch.
pub fn supervised_losses(
    tape: &mut Tape,
    reader: &Reader,
    generator: &Generator,
    batch: &[&Utterance],
    rng: &mut ChaCha8Rng,
) -> Result<StepVars> {
    if batch.is_empty() {
        return Err(TrainError::Data("empty paired batch".into()));
    }
    let traces: Vec<&Trace> = batch
        .iter()
        .map(|u| u.trace.as_ref().expect("paired trace"))
        .collect();
    let texts: Vec<&TextSeq> = batch
        .iter()
        .map(|u| u.text.as_ref().expect("paired text"))
        .collect();
    let (p_lr, _) = reader.ctc_loss(tape, &traces, &texts)?;
    let guides: Vec<Vec<f64>> = traces.iter().map(|t| random_guide(t, rng)).collect();
    let items: Vec<GenItem> = (0..batch.len())
        .map(|i| GenItem {
            text: texts[i],
            durations: batch[i].durations.as_ref(),
            guide: &guides[i],
            target: Some(traces[i]),
        })
        .collect();
    let p_lg = generator.loss(tape, &items, Some(rng))?.total;
    Ok(StepVars {
        p_lg: Some(p_lg),
        p_lr,
        ..StepVars::default()
    })
}

/// Dual transformation on unpaired batches: the generator turns text into
/// pseudo traces for the reader, the reader turns traces into pseudo text
/// for the generator. Pseudo inputs enter the tape as constants.
#[allow(clippy::too_many_arguments)]
pub fn dual_losses(
    tape: &mut Tape,
    reader: &Reader,
    generator: &Generator,
    data: &Dataset,
    guides: &GuidePool,
    text_batch: &[&Utterance],
    lip_batch: &[&Utterance],
    rng: &mut ChaCha8Rng,
) -> Result<(StepVars, DualInfo)> {
    if text_batch.is_empty() || lip_batch.is_empty() {
        return Err(TrainError::Data("empty unpaired batch".into()));
    }
    let mut info = DualInfo::default();

    // text -> pseudo trace -> reader
    let text_guides: Vec<Vec<f64>> = text_batch
        .iter()
        .map(|u| {
            guides
                .guide(data, u.speaker, rng)
                .ok_or_else(|| TrainError::Data("no trace available for guide frames".into()))
        })
        .collect::<Result<_>>()?;
    let items: Vec<GenItem> = text_batch
        .iter()
        .zip(&text_guides)
        .map(|(u, g)| GenItem {
            text: u.text.as_ref().expect("text-only text"),
            durations: u.durations.as_ref(),
            guide: g,
            target: None,
        })
        .collect();
    let pseudo = generator.generate(&items)?;
    info.pseudo_frames = pseudo.iter().map(|p| p.trace.frames()).collect();
    let traces: Vec<&Trace> = pseudo.iter().map(|p| &p.trace).collect();
    let texts: Vec<&TextSeq> = items.iter().map(|i| i.text).collect();
    let (u_lr, per_item) = reader.ctc_loss(tape, &traces, &texts)?;
    info.skipped_ctc = per_item.iter().filter(|l| l.is_none()).count();

    // trace -> pseudo text -> generator
    let lip_traces: Vec<&Trace> = lip_batch
        .iter()
        .map(|u| u.trace.as_ref().expect("lip-only trace"))
        .collect();
    let decoded = reader.transcribe_batch(&lip_traces)?;
    let mut kept = Vec::new();
    for (i, d) in decoded.iter().enumerate() {
        match pseudo_durations(&d.frame_labels) {
            Some((text, durs)) => kept.push((i, text, durs)),
            None => info.skipped_decodes += 1,
        }
    }
    let u_lg = if kept.is_empty() || 2 * info.skipped_decodes > lip_batch.len() {
        info.generator_term_dropped = true;
        None
    } else {
        let lip_guides: Vec<Vec<f64>> = kept
            .iter()
            .map(|(i, _, _)| random_guide(lip_traces[*i], rng))
            .collect();
        if generator.kind() == GeneratorKind::Duration {
            // decoded label runs place boundaries only roughly; refit them
            // against what the generator draws for each token
            let items: Vec<GenItem> = kept
                .iter()
                .zip(&lip_guides)
                .map(|((_, text, durs), g)| GenItem {
                    text,
                    durations: Some(durs),
                    guide: g,
                    target: None,
                })
                .collect();
            let drawn = generator.generate(&items)?;
            for ((i, _, durs), g) in kept.iter_mut().zip(&drawn) {
                if let Some(d) = segment_trace(lip_traces[*i], &token_prototypes(&g.trace, durs)) {
                    *durs = d;
                }
            }
        }
        let items: Vec<GenItem> = kept
            .iter()
            .zip(&lip_guides)
            .map(|((i, text, durs), g)| GenItem {
                text,
                durations: Some(durs),
                guide: g,
                target: Some(lip_traces[*i]),
            })
            .collect();
        Some(generator.loss(tape, &items, Some(rng))?.total)
    };
    Ok((
        StepVars {
            u_lg,
            u_lr,
            ..StepVars::default()
        },
        info,
    ))
}

/// Reader, generator and their optimizers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: DualConfig,
    pub reader: Reader,
    pub generator: Generator,
    pub reader_opt: Adam,
    pub generator_opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: DualConfig) -> Result<Self> {
        config.validate().map_err(TrainError::Data)?;
        let mut rc = config.reader.clone();
        rc.seed = crate::synth::derive_seed(config.seed, &[1, rc.seed]);
        let mut gc = config.generator.clone();
        gc.seed = crate::synth::derive_seed(config.seed, &[2, gc.seed]);
        let reader = Reader::new(rc)?;
        let generator = Generator::new(gc)?;
        let reader_opt = Adam::new(&reader.store, config.reader_lr, config.reader_weight_decay);
        let generator_opt = Adam::new(&generator.store, config.generator_lr, 0.0);
        let rng = seeded_rng(config.seed, &[3]);
        Ok(Self {
            config,
            reader,
            generator,
            reader_opt,
            generator_opt,
            rng,
        })
    }

    /// One update from an optional paired batch and optional unpaired
    /// batches, with the four terms summed as
    /// `(L_p_lg + L_p_lr) + alpha (L_u_lg + L_u_lr)`.
    pub fn iteration(
        &mut self,
        data: &Dataset,
        guides: &GuidePool,
        paired: &[&Utterance],
        unpaired: Option<(&[&Utterance], &[&Utterance])>,
    ) -> Result<(LossBreakdown, Option<DualInfo>)> {
        let alpha = self.config.alpha;
        let mut tape = Tape::new();
        let mut vars = StepVars::default();
        if !paired.is_empty() {
            vars = supervised_losses(
                &mut tape,
                &self.reader,
                &self.generator,
                paired,
                &mut self.rng,
            )?;
        }
        let mut info = None;
        if let Some((text, lip)) = unpaired {
            if alpha > 0.0 {
                let (u, i) = dual_losses(
                    &mut tape,
                    &self.reader,
                    &self.generator,
                    data,
                    guides,
                    text,
                    lip,
                    &mut self.rng,
                )?;
                vars.u_lg = u.u_lg;
                vars.u_lr = u.u_lr;
                info = Some(i);
            }
        }
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let parts = LossBreakdown::combine(
            value(vars.p_lg),
            value(vars.p_lr),
            value(vars.u_lg),
            value(vars.u_lr),
            alpha,
        );
        let mut terms = Vec::new();
        for v in [vars.p_lg, vars.p_lr].into_iter().flatten() {
            terms.push(v);
        }
        for v in [vars.u_lg, vars.u_lr].into_iter().flatten() {
            terms.push(tape.scale(v, alpha)?);
        }
        if terms.is_empty() {
            return Ok((parts, info));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        if !tape.value(total).item().is_finite() {
            return Err(TrainError::Tensor(TensorError::NonFinite {
                op: "total loss",
            }));
        }
        let grads = tape.backward(total)?;
        let mut rg = grads.for_store(&self.reader.store);
        let mut gg = grads.for_store(&self.generator.store);
        clip_gradients(&mut rg, self.config.grad_clip);
        clip_gradients(&mut gg, self.config.grad_clip);
        self.reader_opt.update(&mut self.reader.store, &rg)?;
        self.generator_opt.update(&mut self.generator.store, &gg)?;
        Ok((parts, info))
    }

    /// Supervised-only update.
    pub fn supervised_step(
        &mut self,
        data: &Dataset,
        guides: &GuidePool,
        batch: &[&Utterance],
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(TrainError::Data("empty paired batch".into()));
        }
        Ok(self.iteration(data, guides, batch, None)?.0)
    }

    /// Unsupervised-only update.
    pub fn dual_step(
        &mut self,
        data: &Dataset,
        guides: &GuidePool,
        text: &[&Utterance],
        lip: &[&Utterance],
    ) -> Result<(LossBreakdown, Option<DualInfo>)> {
        self.iteration(data, guides, &[], Some((text, lip)))
    }
}

/// Per-sentence attention diagnostics from free-running generation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionStats {
    pub monotone_fraction: f64,
    /// Share of sentences whose generated length is within 10% of the truth.
    pub length_fraction: f64,
    /// Whether every sentence's extracted durations sum to its frame count.
    pub durations_consistent: bool,
    /// Sentences padded or truncated to the reference length for scoring.
    pub length_adjusted: usize,
}

/// Evaluation of both models on the eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    /// Mean CTC loss of the reader.
    pub reader_loss: f64,
    /// Teacher-forced L1 of the attention generator; equals the report's
    /// L1 for the duration generator.
    pub generator_loss: f64,
    pub attention: Option<AttentionStats>,
}

const EVAL_BATCH: usize = 32;

pub fn eval_split<'a>(data: &'a Dataset, limit: usize) -> Vec<&'a Utterance> {
    let mut v = data.split(Split::Eval);
    if limit > 0 {
        v.truncate(limit);
    }
    v
}

/// Reader CER/WER/loss and generator L1/PSNR on `eval`. Guides are each
/// utterance's first frame.
pub fn evaluate(
    reader: &Reader,
    generator: &Generator,
    eval: &[&Utterance],
    label: &str,
) -> Result<EvalSummary> {
    if eval.is_empty() {
        return Err(TrainError::Data("eval split is empty".into()));
    }
    let vocab = &reader.vocab;
    let (mut unit, mut wer, mut loss, mut loss_n) = (0.0, 0.0, 0.0, 0usize);
    let (mut l1, mut psnr) = (0.0, 0.0);
    let mut attn = AttentionStats {
        durations_consistent: true,
        ..AttentionStats::default()
    };
    let (mut monotone, mut close) = (0usize, 0usize);
    let mut forced = 0.0;
    for chunk in eval.chunks(EVAL_BATCH) {
        let traces: Vec<&Trace> = chunk
            .iter()
            .map(|u| u.trace.as_ref().expect("eval trace"))
            .collect();
        let texts: Vec<&TextSeq> = chunk
            .iter()
            .map(|u| u.text.as_ref().expect("eval text"))
            .collect();
        let mut tape = Tape::new();
        let (_, per_item) = reader.ctc_loss(&mut tape, &traces, &texts)?;
        for l in per_item.into_iter().flatten() {
            loss += l;
            loss_n += 1;
        }
        for (tr, t) in reader.transcribe_batch(&traces)?.iter().zip(&texts) {
            unit += metrics::unit_error_rate(vocab, t, &tr.text)
                .map_err(|e| TrainError::Data(e.to_string()))?;
            wer += metrics::word_error_rate(vocab, t, &tr.text)
                .map_err(|e| TrainError::Data(e.to_string()))?;
        }
        let guides: Vec<Vec<f64>> = traces.iter().map(|t| t.frame(0).to_vec()).collect();
        let items: Vec<GenItem> = (0..chunk.len())
            .map(|i| GenItem {
                text: texts[i],
                durations: chunk[i].durations.as_ref(),
                guide: &guides[i],
                target: None,
            })
            .collect();
        if generator.kind() == GeneratorKind::Attention {
            let forced_items: Vec<GenItem> = items
                .iter()
                .zip(&traces)
                .map(|(it, t)| GenItem {
                    target: Some(t),
                    ..*it
                })
                .collect();
            let mut tape = Tape::new();
            let l = generator.loss(&mut tape, &forced_items, None)?.l1;
            forced += tape.value(l).item() * chunk.len() as f64;
        }
        for (g, reference) in generator.generate(&items)?.iter().zip(&traces) {
            let k = g.trace.frames();
            let hyp = if k == reference.frames() {
                g.trace.clone()
            } else {
                attn.length_adjusted += 1;
                g.trace.fit_length(reference.frames())
            };
            l1 += metrics::mean_l1(reference, &hyp).expect("length-matched");
            psnr += metrics::psnr_trace(reference, &hyp).expect("length-matched");
            if let Some(a) = &g.alignment {
                if monotonicity(a).is_monotone {
                    monotone += 1;
                }
                if extract_durations(a).total() != k {
                    attn.durations_consistent = false;
                }
                if (k as f64 - reference.frames() as f64).abs() <= 0.1 * reference.frames() as f64 {
                    close += 1;
                }
            }
        }
    }
    let n = eval.len() as f64;
    let attention = (generator.kind() == GeneratorKind::Attention).then(|| {
        attn.monotone_fraction = monotone as f64 / n;
        attn.length_fraction = close as f64 / n;
        attn
    });
    Ok(EvalSummary {
        report: EvalReport {
            label: label.to_string(),
            unit_error: unit / n,
            wer: wer / n,
            mean_l1: l1 / n,
            mean_psnr: psnr / n,
            n_utterances: eval.len(),
            mode: vocab.mode(),
        },
        reader_loss: if loss_n > 0 {
            loss / loss_n as f64
        } else {
            f64::INFINITY
        },
        generator_loss: if generator.kind() == GeneratorKind::Attention {
            forced / n
        } else {
            l1 / n
        },
        attention,
    })
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub losses: LossBreakdown,
    pub eval: EvalSummary,
}

impl EpochRecord {
    /// Loss columns use the shortest exact representation so that the
    /// logged total can be recomputed from the logged parts.
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let r = &self.eval.report;
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.4}",
            self.epoch,
            self.stage,
            l.l_p_lg,
            l.l_p_lr,
            l.l_u_lg,
            l.l_u_lr,
            l.total,
            r.unit_error,
            r.wer,
            r.mean_l1,
            r.mean_psnr
        )
    }
}

/// Result of [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// First epoch trained with dual steps, if any.
    pub stage2_start: Option<usize>,
    pub best_reader: Reader,
    pub best_generator: Generator,
    /// Evaluation of the best checkpoints.
    pub best_eval: EvalSummary,
    pub warnings: Vec<String>,
    pub skipped_decodes: usize,
}

impl TrainOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// File names inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const READER_CKPT: &str = "reader";
pub const GENERATOR_CKPT: &str = "generator";

#[derive(Default)]
struct Accum {
    sums: [f64; 4],
    counts: [usize; 4],
}

impl Accum {
    fn add(&mut self, l: &LossBreakdown, has_dual: bool, has_paired: bool) {
        if has_paired {
            self.sums[0] += l.l_p_lg;
            self.sums[1] += l.l_p_lr;
            self.counts[0] += 1;
            self.counts[1] += 1;
        }
        if has_dual {
            self.sums[2] += l.l_u_lg;
            self.sums[3] += l.l_u_lr;
            self.counts[2] += 1;
            self.counts[3] += 1;
        }
    }

    fn mean(&self, alpha: f64) -> LossBreakdown {
        let m = |i: usize| {
            if self.counts[i] == 0 {
                0.0
            } else {
                self.sums[i] / self.counts[i] as f64
            }
        };
        LossBreakdown::combine(m(0), m(1), m(2), m(3), alpha)
    }
}

/// Runs the two-stage schedule. With `run_dir`, the metric CSV is rewritten
/// after every epoch and the best checkpoints are saved there.
pub fn train_run(
    config: &DualConfig,
    data: &Dataset,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if data.dim != config.reader.dim || data.vocab.mode() != config.reader.token_mode {
        return Err(TrainError::Data(format!(
            "corpus has dim {} and {} tokens; config expects dim {} and {} tokens",
            data.dim,
            data.vocab.mode(),
            config.reader.dim,
            config.reader.token_mode
        )));
    }
    let data = data.with_unpaired_fraction(config.unpaired_fraction);
    let data = &data;
    let mut trainer = Trainer::new(config.clone())?;
    let paired = data.split(Split::Paired);
    if paired.is_empty() {
        return Err(TrainError::Data("paired split is empty".into()));
    }
    let text_only = data.split(Split::TextOnly);
    let lip_only = data.split(Split::LipOnly);
    let eval = eval_split(data, config.eval_limit);
    let mut warnings = Vec::new();
    let dual = match config.mode {
        TrainMode::Baseline => false,
        TrainMode::Dual if text_only.is_empty() || lip_only.is_empty() || config.alpha == 0.0 => {
            warnings.push(
                "dual mode without unpaired data or with alpha = 0: training as baseline"
                    .to_string(),
            );
            false
        }
        TrainMode::Dual => true,
    };
    let guides = GuidePool::new(data);
    let steps = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        paired.len().div_ceil(config.batch_size)
    };
    let mut order_rng = seeded_rng(config.seed, &[4]);
    let mut order: Vec<usize> = (0..paired.len()).collect();
    let mut cursor = order.len();

    let mut reader_plateau = Plateau::new(config.plateau_patience, config.plateau_delta);
    let mut gen_plateau = Plateau::new(config.plateau_patience, config.plateau_delta);
    let mut stage: u8 = 1;
    let mut stage2_start = None;
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, Reader)> = None;
    let mut best_gen: Option<(f64, Generator)> = None;
    let mut skipped_decodes = 0;
    let mut csv = format!("{CSV_HEADER}\n");

    for epoch in 1..=config.total_epochs {
        let mut acc = Accum::default();
        for it in 0..steps {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size.min(paired.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                batch.push(paired[order[cursor]]);
                cursor += 1;
            }
            let unpaired_batches = (stage == 2).then(|| {
                let pick = |pool: &[&Utterance], rng: &mut ChaCha8Rng| -> Vec<usize> {
                    rand::seq::index::sample(
                        rng,
                        pool.len(),
                        config.unpaired_batch_size.min(pool.len()),
                    )
                    .into_vec()
                };
                let t = pick(&text_only, &mut order_rng);
                let l = pick(&lip_only, &mut order_rng);
                (
                    t.into_iter().map(|i| text_only[i]).collect::<Vec<_>>(),
                    l.into_iter().map(|i| lip_only[i]).collect::<Vec<_>>(),
                )
            });
            let (losses, info) = trainer
                .iteration(
                    data,
                    &guides,
                    &batch,
                    unpaired_batches.as_ref().map(|(t, l)| (&t[..], &l[..])),
                )
                .map_err(|e| match e.non_finite_op() {
                    Some(op) => TrainError::NonFinite {
                        what: op.to_string(),
                        epoch,
                        iteration: it + 1,
                    },
                    None => e,
                })?;
            if let Some(i) = &info {
                skipped_decodes += i.skipped_decodes;
            }
            acc.add(&losses, info.is_some(), true);
        }

        let summary = evaluate(
            &trainer.reader,
            &trainer.generator,
            &eval,
            &format!("epoch {epoch}"),
        )?;
        let record = EpochRecord {
            epoch,
            stage,
            losses: acc.mean(config.alpha),
            eval: summary.clone(),
        };
        on_epoch(&record);
        csv.push_str(&record.csv_row());
        csv.push('\n');
        history.push(record);

        let cer = summary.report.unit_error;
        let improved = best.as_ref().map_or(true, |(c, l, _)| {
            cer < *c || (cer == *c && summary.reader_loss < *l)
        });
        if improved {
            best = Some((cer, summary.reader_loss, trainer.reader.clone()));
            if let Some(dir) = run_dir {
                trainer.reader.save(dir, READER_CKPT)?;
            }
        }
        let gl1 = summary.report.mean_l1;
        if best_gen.as_ref().map_or(true, |(b, _)| gl1 < *b) {
            best_gen = Some((gl1, trainer.generator.clone()));
            if let Some(dir) = run_dir {
                trainer.generator.save(dir, GENERATOR_CKPT)?;
            }
        }
        if let Some(dir) = run_dir {
            std::fs::write(dir.join(METRICS_FILE), &csv)?;
        }

        let reader_flat = reader_plateau.observe(summary.reader_loss);
        let gen_flat = gen_plateau.observe(summary.generator_loss);
        // the dual schedule keeps both learning rates until stage 2
        let warmup = dual && stage == 1;
        if warmup {
            let switch_now = if config.stage1_epochs > 0 {
                epoch >= config.stage1_epochs
            } else {
                reader_flat
            };
            if switch_now {
                stage = 2;
                stage2_start = Some(epoch + 1);
            }
        } else {
            if reader_flat {
                trainer.reader_opt.decay(config.reader_decay);
            }
            if gen_flat {
                trainer.generator_opt.decay(config.generator_decay);
            }
        }
    }

    let (_, _, best_reader) = best.expect("at least one epoch");
    let (_, best_generator) = best_gen.expect("at least one epoch");
    let best_eval = evaluate(
        &best_reader,
        &best_generator,
        &eval,
        &config.mode.to_string(),
    )?;
    Ok(TrainOutcome {
        history,
        stage2_start,
        best_reader,
        best_generator,
        best_eval,
        warnings,
        skipped_decodes,
    })
}

/// Reads the reader and generator checkpoints of a run directory.
pub fn load_checkpoints(run_dir: &Path) -> Result<(Reader, Generator)> {
    Ok((
        Reader::load(run_dir, READER_CKPT)?,
        Generator::load(run_dir, GENERATOR_CKPT)?,
    ))
}

/// Human-readable one-line summary of an epoch.
pub fn describe(record: &EpochRecord) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "epoch {:>3} stage {}  loss {:.4}  {} {:.2}%  wer {:.2}%  l1 {:.4}  psnr {:.2}",
        record.epoch,
        record.stage,
        record.losses.total,
        record.eval.report.unit_name(),
        100.0 * record.eval.report.unit_error,
        100.0 * record.eval.report.wer,
        record.eval.report.mean_l1,
        record.eval.report.mean_psnr
    );
    if let Some(a) = &record.eval.attention {
        let _ = write!(
            s,
            "  monotone {:.0}%  length {:.0}%",
            100.0 * a.monotone_fraction,
            100.0 * a.length_fraction
        );
    }
    s
}
