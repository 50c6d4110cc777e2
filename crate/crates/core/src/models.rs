//! The reader (frames to text) and the two generators (text to frames).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::align::{expand, AlignError, AlignmentMatrix, DurationSeq};
use crate::config::{set_parsed, ConfigError, KeyValueConfig};
use crate::ctc::{self, ctc_greedy_decode, LogProbMatrix};
use crate::nn::{
    dropout, gru_cell, gru_sequence, location_sensitive_attention, AttentionConfig,
    AttentionMemory, AttentionParams, Conv1d, GruLayer, GruParams, Layout, Linear,
};
use crate::synth::seeded_rng;
use crate::tensor::{sigmoid, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::trace::Trace;
use crate::vocab::{TextSeq, TokenMode, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("{0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn bad_shape(detail: impl Into<String>) -> ModelError {
    ModelError::Shape(detail.into())
}

fn check_traces(traces: &[&Trace], dim: usize) -> Result<()> {
    if traces.is_empty() {
        return Err(ModelError::Empty("no traces".into()));
    }
    if let Some(t) = traces.iter().find(|t| t.dim() != dim) {
        return Err(bad_shape(format!(
            "trace has {} channels, model expects {dim}",
            t.dim()
        )));
    }
    Ok(())
}

// Traces are rows of f64 already; packing copies them time-major.
fn pack_traces(tape: &mut Tape, traces: &[&Trace], dim: usize) -> Result<(Var, Layout)> {
    let layout = Layout::new(traces.iter().map(|t| t.frames()).collect())?;
    let items: Vec<&[f64]> = traces.iter().map(|t| t.data()).collect();
    let x = tape.constant(layout.pack(&items, dim));
    Ok((x, layout))
}

/// `sum |pred - target|` over real frames divided by `frames * dim`.
/// Padding rows of `target` must be zero.
fn masked_l1(tape: &mut Tape, pred: Var, target: &Tensor, layout: &Layout) -> Result<Var> {
    let dim = target.cols();
    let target = tape.constant(target.clone());
    let pred = if layout.is_full() {
        pred
    } else {
        let m = tape.constant(layout.frame_mask());
        tape.mul(pred, m)?
    };
    let l = tape.l1_distance(pred, target)?;
    Ok(tape.scale(l, 1.0 / (layout.valid_rows() * dim) as f64)?)
}

/// Mean binary cross-entropy of `logits [K*B, 1]` against "last frame"
/// labels, over real frames.
fn stop_bce(tape: &mut Tape, logits: Var, layout: &Layout) -> Result<Var> {
    let b = layout.batch();
    let s = tape.value(logits).clone();
    let n = layout.valid_rows() as f64;
    let mut grad = vec![0.0; s.numel()];
    let mut total = 0.0;
    for (i, &len) in layout.lengths.iter().enumerate() {
        for t in 0..len {
            let r = t * b + i;
            let x = s.data()[r];
            let y = if t + 1 == len { 1.0 } else { 0.0 };
            total += x.max(0.0) - y * x + (-x.abs()).exp().ln_1p();
            grad[r] = (sigmoid(x) - y) / n;
        }
    }
    let g = Tensor::new(s.shape().to_vec(), grad)?;
    Ok(tape.custom_scalar(total / n, vec![(logits, g)])?)
}

/// Reader sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderConfig {
    pub token_mode: TokenMode,
    pub dim: usize,
    pub conv_channels: usize,
    pub conv_width: usize,
    pub conv_layers: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub seed: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            token_mode: TokenMode::Character,
            dim: 8,
            conv_channels: 32,
            conv_width: 5,
            conv_layers: 2,
            hidden: 64,
            gru_layers: 2,
            seed: 1,
        }
    }
}

impl KeyValueConfig for ReaderConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "token_mode" => set_parsed(&mut self.token_mode, value),
            "dim" => set_parsed(&mut self.dim, value),
            "conv_channels" => set_parsed(&mut self.conv_channels, value),
            "conv_width" => set_parsed(&mut self.conv_width, value),
            "conv_layers" => set_parsed(&mut self.conv_layers, value),
            "hidden" => set_parsed(&mut self.hidden, value),
            "gru_layers" => set_parsed(&mut self.gru_layers, value),
            "seed" => set_parsed(&mut self.seed, value),
            _ => Ok(false),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 || self.hidden == 0 || self.gru_layers == 0 {
            return Err("reader sizes must be positive".into());
        }
        if self.conv_layers > 0 && (self.conv_channels == 0 || self.conv_width % 2 == 0) {
            return Err("conv_width must be odd and conv_channels positive".into());
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("token_mode", self.token_mode.to_string()),
            ("dim", self.dim.to_string()),
            ("conv_channels", self.conv_channels.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("conv_layers", self.conv_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("gru_layers", self.gru_layers.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Output of the reader for one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub text: TextSeq,
    /// Framewise argmax labels before collapsing.
    pub frame_labels: Vec<usize>,
}

/// Temporal convolutions, bidirectional GRUs and a softmax over the
/// vocabulary (blank included).
#[derive(Clone, Debug)]
pub struct Reader {
    pub config: ReaderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    convs: Vec<Conv1d>,
    grus: Vec<GruLayer>,
    out: Linear,
}

impl Reader {
    pub fn new(config: ReaderConfig) -> Result<Self> {
        config.validate().map_err(bad_shape)?;
        let vocab = Vocabulary::for_mode(config.token_mode);
        let mut rng = seeded_rng(config.seed, &[0x5245]);
        let mut store = ParamStore::new();
        let mut width = config.dim;
        let mut convs = Vec::new();
        for i in 0..config.conv_layers {
            convs.push(Conv1d::new(
                &mut store,
                &format!("conv{i}"),
                width,
                config.conv_channels,
                config.conv_width,
                &mut rng,
            )?);
            width = config.conv_channels;
        }
        let mut grus = Vec::new();
        for i in 0..config.gru_layers {
            let g = GruLayer::new(
                &mut store,
                &format!("gru{i}"),
                width,
                config.hidden,
                true,
                &mut rng,
            );
            width = g.output_dim();
            grus.push(g);
        }
        let out = Linear::new(&mut store, "out", width, vocab.len(), &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            convs,
            grus,
            out,
        })
    }

    /// Log-probabilities `[K * B, V]` for a batch, time-major.
    pub fn forward(&self, tape: &mut Tape, traces: &[&Trace]) -> Result<(Var, Layout)> {
        check_traces(traces, self.config.dim)?;
        let (x, layout) = pack_traces(tape, traces, self.config.dim)?;
        let y = self.forward_packed(tape, x, &layout)?;
        Ok((y, layout))
    }

    pub fn forward_packed(&self, tape: &mut Tape, x: Var, layout: &Layout) -> Result<Var> {
        let mask = (!layout.is_full()).then(|| tape.constant(layout.frame_mask()));
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, &self.store, h, layout)?;
            h = tape.relu(h)?;
            if let Some(m) = mask {
                h = tape.mul(h, m)?;
            }
        }
        for g in &self.grus {
            h = gru_sequence(tape, &self.store, g, h, layout)?;
        }
        let logits = self.out.forward(tape, &self.store, h)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// Mean CTC loss over the items whose target fits in their frames,
    /// plus the per-item losses (`None` for skipped items).
    pub fn ctc_loss(
        &self,
        tape: &mut Tape,
        traces: &[&Trace],
        targets: &[&TextSeq],
    ) -> Result<(Option<Var>, Vec<Option<f64>>)> {
        let (lp, layout) = self.forward(tape, traces)?;
        let t: Vec<Option<&[usize]>> = targets.iter().map(|t| Some(t.tokens())).collect();
        Ok(ctc::tape_ctc_loss(tape, lp, &layout, &t)?)
    }

    pub fn log_probs_batch(&self, traces: &[&Trace]) -> Result<Vec<LogProbMatrix>> {
        let mut tape = Tape::new();
        let (lp, layout) = self.forward(&mut tape, traces)?;
        let v = self.vocab.len();
        let value = tape.value(lp);
        (0..traces.len())
            .map(|i| {
                LogProbMatrix::new(layout.lengths[i], v, layout.unpack(value, i))
                    .map_err(|e| bad_shape(e.to_string()))
            })
            .collect()
    }

    pub fn log_probs(&self, trace: &Trace) -> Result<LogProbMatrix> {
        Ok(self.log_probs_batch(&[trace])?.remove(0))
    }

    /// Greedy CTC decoding.
    pub fn transcribe_batch(&self, traces: &[&Trace]) -> Result<Vec<Transcript>> {
        Ok(self
            .log_probs_batch(traces)?
            .iter()
            .map(|lp| Transcript {
                text: TextSeq(ctc_greedy_decode(lp)),
                frame_labels: lp.argmax_path(),
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        save_checkpoint(&self.store, &self.config.render(), dir, name)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta = read_meta(dir, name)?;
        let config = ReaderConfig::parse(&meta).map_err(|e| meta_error(dir, name, e))?;
        let mut m = Self::new(config)?;
        load_params(&mut m.store, dir, name)?;
        Ok(m)
    }
}

fn stem(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn meta_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.meta"))
}

fn save_checkpoint(store: &ParamStore, meta: &str, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::Checkpoint {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    store.save(&stem(dir, name))?;
    std::fs::write(meta_path(dir, name), meta).map_err(|e| ModelError::Checkpoint {
        path: meta_path(dir, name),
        detail: e.to_string(),
    })
}

fn read_meta(dir: &Path, name: &str) -> Result<String> {
    std::fs::read_to_string(meta_path(dir, name)).map_err(|e| ModelError::Checkpoint {
        path: meta_path(dir, name),
        detail: e.to_string(),
    })
}

fn meta_error(dir: &Path, name: &str, e: ConfigError) -> ModelError {
    ModelError::Checkpoint {
        path: meta_path(dir, name),
        detail: e.to_string(),
    }
}

fn load_params(store: &mut ParamStore, dir: &Path, name: &str) -> Result<()> {
    store
        .load_into(&stem(dir, name))
        .map_err(|e| ModelError::Checkpoint {
            path: stem(dir, name),
            detail: e.to_string(),
        })
}

/// Whether the generator is told how long each token lasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Duration,
    Attention,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Duration => "duration",
            GeneratorKind::Attention => "attention",
        })
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "duration" => Ok(Self::Duration),
            "attention" => Ok(Self::Attention),
            other => Err(format!("unknown generator {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub token_mode: TokenMode,
    pub dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub guide: usize,
    pub prenet: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub prenet_dropout: f64,
    pub stop_weight: f64,
    /// Weight of the diagonal prior on training-time attention.
    pub guided_weight: f64,
    /// Width of that prior in normalized positions.
    pub guided_width: f64,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Duration,
            token_mode: TokenMode::Character,
            dim: 8,
            embed: 32,
            hidden: 64,
            guide: 16,
            prenet: 32,
            attention_dim: 32,
            location_filters: 8,
            location_width: 7,
            prenet_dropout: 0.5,
            stop_weight: 0.1,
            guided_weight: 0.3,
            guided_width: 0.2,
            max_frames: 90,
            seed: 2,
        }
    }
}

impl KeyValueConfig for GeneratorConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "kind" => set_parsed(&mut self.kind, value),
            "token_mode" => set_parsed(&mut self.token_mode, value),
            "dim" => set_parsed(&mut self.dim, value),
            "embed" => set_parsed(&mut self.embed, value),
            "hidden" => set_parsed(&mut self.hidden, value),
            "guide" => set_parsed(&mut self.guide, value),
            "prenet" => set_parsed(&mut self.prenet, value),
            "attention_dim" => set_parsed(&mut self.attention_dim, value),
            "location_filters" => set_parsed(&mut self.location_filters, value),
            "location_width" => set_parsed(&mut self.location_width, value),
            "prenet_dropout" => set_parsed(&mut self.prenet_dropout, value),
            "stop_weight" => set_parsed(&mut self.stop_weight, value),
            "guided_weight" => set_parsed(&mut self.guided_weight, value),
            "guided_width" => set_parsed(&mut self.guided_width, value),
            "max_frames" => set_parsed(&mut self.max_frames, value),
            "seed" => set_parsed(&mut self.seed, value),
            _ => Ok(false),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if [
            self.dim,
            self.embed,
            self.hidden,
            self.guide,
            self.max_frames,
        ]
        .contains(&0)
        {
            return Err("generator sizes must be positive".into());
        }
        if self.hidden % 2 != 0 {
            return Err("generator hidden size must be even".into());
        }
        if self.location_width % 2 == 0 {
            return Err("location_width must be odd".into());
        }
        if self.guided_weight < 0.0 || self.guided_width <= 0.0 {
            return Err("guided_weight must be >= 0 and guided_width > 0".into());
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err("prenet_dropout must be in [0,1)".into());
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.to_string()),
            ("token_mode", self.token_mode.to_string()),
            ("dim", self.dim.to_string()),
            ("embed", self.embed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("guide", self.guide.to_string()),
            ("prenet", self.prenet.to_string()),
            ("attention_dim", self.attention_dim.to_string()),
            ("location_filters", self.location_filters.to_string()),
            ("location_width", self.location_width.to_string()),
            ("prenet_dropout", self.prenet_dropout.to_string()),
            ("stop_weight", self.stop_weight.to_string()),
            ("guided_weight", self.guided_weight.to_string()),
            ("guided_width", self.guided_width.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// One generator input. `durations` is required by the duration model,
/// `target` by training.
#[derive(Clone, Copy, Debug)]
pub struct GenItem<'a> {
    pub text: &'a TextSeq,
    pub durations: Option<&'a DurationSeq>,
    pub guide: &'a [f64],
    pub target: Option<&'a Trace>,
}

/// A generated trace; the attention model also reports its alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub trace: Trace,
    pub alignment: Option<AlignmentMatrix>,
}

/// Training-time outputs.
#[derive(Clone, Debug)]
pub struct GenOutput {
    /// `[K * B, D]` frames, time-major.
    pub frames: Var,
    pub layout: Layout,
    /// Per-item `frames x tokens` attention rows, attention model only.
    pub alignments: Vec<AlignmentMatrix>,
    pub stop_logits: Option<Var>,
    /// Attention mass away from the diagonal, attention model only.
    pub attention_penalty: Option<Var>,
}

/// Loss terms of a generator batch.
#[derive(Clone, Copy, Debug)]
pub struct GenLoss {
    /// Frame L1 (plus the weighted stop loss for the attention model).
    pub total: Var,
    pub l1: Var,
}

#[derive(Clone, Debug)]
struct GuideEncoder {
    l1: Linear,
    l2: Linear,
}

impl GuideEncoder {
    fn new(store: &mut ParamStore, dim: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, "guide.l1", dim, out, rng),
            l2: Linear::new(store, "guide.l2", out, out, rng),
        }
    }

    /// `[B, D]` guide frames to `[B, G]` features.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, guides: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, guides)?;
        let h = tape.tanh(h)?;
        let h = self.l2.forward(tape, store, h)?;
        Ok(tape.tanh(h)?)
    }
}

fn pack_guides(tape: &mut Tape, items: &[GenItem], dim: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(items.len() * dim);
    for it in items {
        if it.guide.len() != dim {
            return Err(bad_shape(format!(
                "guide frame has {} channels, model expects {dim}",
                it.guide.len()
            )));
        }
        data.extend_from_slice(it.guide);
    }
    Ok(tape.constant(Tensor::matrix(items.len(), dim, data)))
}

/// Expander, text encoder, guide encoder, fusion GRU and a frame decoder
/// that also sees the guide features and the raw guide frame.
#[derive(Clone, Debug)]
struct DurationNet {
    embed: ParamId,
    encoder: GruLayer,
    guide: GuideEncoder,
    fusion: GruLayer,
    dec_hidden: Linear,
    dec_out: Linear,
}

impl DurationNet {
    fn new(
        store: &mut ParamStore,
        cfg: &GeneratorConfig,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed = store.insert_uniform("embed".to_string(), &[vocab, cfg.embed], cfg.embed, rng);
        let encoder = GruLayer::new(store, "encoder", cfg.embed, cfg.hidden / 2, true, rng);
        let guide = GuideEncoder::new(store, cfg.dim, cfg.guide, rng);
        let fusion = GruLayer::new(
            store,
            "fusion",
            encoder.output_dim() + cfg.guide,
            cfg.hidden,
            false,
            rng,
        );
        let dec_in = cfg.hidden + cfg.guide + cfg.dim;
        let dec_hidden = Linear::new(store, "dec.hidden", dec_in, cfg.hidden, rng);
        let dec_out = Linear::new(store, "dec.out", cfg.hidden, cfg.dim, rng);
        Self {
            embed,
            encoder,
            guide,
            fusion,
            dec_hidden,
            dec_out,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &GeneratorConfig,
        items: &[GenItem],
    ) -> Result<GenOutput> {
        let mut unrolled = Vec::with_capacity(items.len());
        for it in items {
            let d = it
                .durations
                .ok_or_else(|| ModelError::Empty("duration generator needs durations".into()))?;
            unrolled.push(expand(it.text, d)?);
        }
        let layout = Layout::new(unrolled.iter().map(TextSeq::len).collect())?;
        let ids: Vec<&[usize]> = unrolled.iter().map(|t| t.tokens()).collect();
        let ids = layout.pack_ids(&ids, 0);
        let table = tape.param(store, self.embed);
        let emb = tape.gather_rows(table, &ids)?;
        let zt = gru_sequence(tape, store, &self.encoder, emb, &layout)?;
        let guides = pack_guides(tape, items, cfg.dim)?;
        let zi = self.guide.forward(tape, store, guides)?;
        let zi_frames = tape.tile_rows(zi, layout.steps)?;
        let guide_frames = tape.tile_rows(guides, layout.steps)?;
        let fused_in = tape.concat_cols(&[zt, zi_frames])?;
        let r = gru_sequence(tape, store, &self.fusion, fused_in, &layout)?;
        let dec_in = tape.concat_cols(&[r, zi_frames, guide_frames])?;
        let h = self.dec_hidden.forward(tape, store, dec_in)?;
        let h = tape.relu(h)?;
        let o = self.dec_out.forward(tape, store, h)?;
        let frames = tape.sigmoid(o)?;
        Ok(GenOutput {
            frames,
            layout,
            alignments: Vec::new(),
            stop_logits: None,
            attention_penalty: None,
        })
    }
}

/// Token encoder with location-sensitive attention and an autoregressive
/// GRU decoder that emits one frame and one stop logit per step.
#[derive(Clone, Debug)]
struct AttentionNet {
    embed: ParamId,
    encoder: GruLayer,
    guide: GuideEncoder,
    prenet1: Linear,
    prenet2: Linear,
    rnn: GruParams,
    attention: AttentionParams,
    dec_hidden: Linear,
    frame_out: Linear,
    stop_out: Linear,
}

struct DecoderState {
    h: Var,
    context: Var,
    cumulative: Var,
}

struct StepOut {
    frame: Var,
    stop: Var,
    weights: Var,
}

impl AttentionNet {
    fn new(
        store: &mut ParamStore,
        cfg: &GeneratorConfig,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.insert_uniform("embed".to_string(), &[vocab, cfg.embed], cfg.embed, rng);
        let encoder = GruLayer::new(store, "encoder", cfg.embed, cfg.hidden / 2, true, rng);
        let memory_dim = encoder.output_dim();
        let guide = GuideEncoder::new(store, cfg.dim, cfg.guide, rng);
        let prenet1 = Linear::new(store, "prenet.l1", cfg.dim, cfg.prenet, rng);
        let prenet2 = Linear::new(store, "prenet.l2", cfg.prenet, cfg.prenet, rng);
        let rnn = GruParams::new(
            store,
            "decoder.rnn",
            cfg.prenet + memory_dim + cfg.guide,
            cfg.hidden,
            rng,
        );
        let attention = AttentionParams::new(
            store,
            "attention",
            AttentionConfig {
                query_dim: cfg.hidden,
                memory_dim,
                dim: cfg.attention_dim,
                filters: cfg.location_filters,
                filter_width: cfg.location_width,
            },
            rng,
        )?;
        let feat = cfg.hidden + memory_dim + cfg.guide + cfg.dim;
        let dec_hidden = Linear::new(store, "dec.hidden", feat, cfg.hidden, rng);
        let frame_out = Linear::new(store, "dec.frame", cfg.hidden, cfg.dim, rng);
        let stop_out = Linear::new(store, "dec.stop", cfg.hidden, 1, rng);
        Ok(Self {
            embed,
            encoder,
            guide,
            prenet1,
            prenet2,
            rnn,
            attention,
            dec_hidden,
            frame_out,
            stop_out,
        })
    }

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[GenItem],
    ) -> Result<(AttentionMemory, Vec<usize>)> {
        if let Some(i) = items.iter().position(|it| it.text.is_empty()) {
            return Err(ModelError::Empty(format!("text of item {i}")));
        }
        let lengths: Vec<usize> = items.iter().map(|it| it.text.len()).collect();
        let layout = Layout::new(lengths.clone())?;
        let ids: Vec<&[usize]> = items.iter().map(|it| it.text.tokens()).collect();
        let ids = layout.pack_ids(&ids, 0);
        let table = tape.param(store, self.embed);
        let emb = tape.gather_rows(table, &ids)?;
        let enc = gru_sequence(tape, store, &self.encoder, emb, &layout)?;
        // time-major [T*B, M] to batch-major [B*T, M]
        let (b, t) = (layout.batch(), layout.steps);
        let perm: Vec<usize> = (0..b * t).map(|r| (r % t) * b + r / t).collect();
        let values = tape.gather_rows(enc, &perm)?;
        let memory = AttentionMemory::new(tape, store, &self.attention, values, &lengths)?;
        Ok((memory, lengths))
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &AttentionMemory,
        state: &mut DecoderState,
        prev: Var,
        zi: Var,
        guides: Var,
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<StepOut> {
        let mut p = self.prenet1.forward(tape, store, prev)?;
        p = tape.relu(p)?;
        let mut drop = drop;
        if let Some((rate, rng)) = drop.as_mut() {
            p = dropout(tape, p, *rate, rng)?;
        }
        p = self.prenet2.forward(tape, store, p)?;
        p = tape.relu(p)?;
        if let Some((rate, rng)) = drop.as_mut() {
            p = dropout(tape, p, *rate, rng)?;
        }
        let x = tape.concat_cols(&[p, state.context, zi])?;
        state.h = gru_cell(tape, store, &self.rnn, x, state.h)?;
        let (context, weights) = location_sensitive_attention(
            tape,
            store,
            &self.attention,
            memory,
            state.h,
            state.cumulative,
        )?;
        state.context = context;
        state.cumulative = tape.add(state.cumulative, weights)?;
        let feat = tape.concat_cols(&[state.h, context, zi, guides])?;
        let h = self.dec_hidden.forward(tape, store, feat)?;
        let h = tape.relu(h)?;
        let o = self.frame_out.forward(tape, store, h)?;
        let frame = tape.sigmoid(o)?;
        let stop = self.stop_out.forward(tape, store, h)?;
        Ok(StepOut {
            frame,
            stop,
            weights,
        })
    }

    fn initial_state(
        &self,
        tape: &mut Tape,
        cfg: &GeneratorConfig,
        memory: &AttentionMemory,
    ) -> DecoderState {
        let b = memory.batch;
        let m = tape.value(memory.values).cols();
        DecoderState {
            h: tape.constant(Tensor::zeros(&[b, cfg.hidden])),
            context: tape.constant(Tensor::zeros(&[b, m])),
            cumulative: tape.constant(Tensor::zeros(&[b, memory.steps])),
        }
    }

    /// Teacher-forced pass: step `k` is fed ground-truth frame `k - 1`.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &GeneratorConfig,
        items: &[GenItem],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GenOutput> {
        let targets: Vec<&Trace> = items
            .iter()
            .map(|it| {
                it.target
                    .ok_or_else(|| ModelError::Empty("teacher trace".into()))
            })
            .collect::<Result<_>>()?;
        check_traces(&targets, cfg.dim)?;
        let (memory, text_lengths) = self.encode(tape, store, items)?;
        let guides = pack_guides(tape, items, cfg.dim)?;
        let zi = self.guide.forward(tape, store, guides)?;
        let layout = Layout::new(targets.iter().map(|t| t.frames()).collect())?;
        let b = items.len();
        let mut state = self.initial_state(tape, cfg, &memory);
        let mut frames = Vec::with_capacity(layout.steps);
        let mut stops = Vec::with_capacity(layout.steps);
        let mut weights = Vec::with_capacity(layout.steps);
        let mut rng = rng;
        for k in 0..layout.steps {
            let mut prev = vec![0.0; b * cfg.dim];
            if k > 0 {
                for (i, t) in targets.iter().enumerate() {
                    if k - 1 < t.frames() {
                        prev[i * cfg.dim..(i + 1) * cfg.dim].copy_from_slice(t.frame(k - 1));
                    }
                }
            }
            let prev = tape.constant(Tensor::matrix(b, cfg.dim, prev));
            let drop = match rng.as_deref_mut() {
                Some(r) if cfg.prenet_dropout > 0.0 => Some((cfg.prenet_dropout, r)),
                _ => None,
            };
            let out = self.step(tape, store, &memory, &mut state, prev, zi, guides, drop)?;
            frames.push(out.frame);
            stops.push(out.stop);
            weights.push(out.weights);
        }
        let alignments = collect_alignments(tape, &weights, &layout.lengths, &text_lengths)?;
        let penalty = diagonal_penalty(
            tape,
            &weights,
            &layout.lengths,
            &text_lengths,
            cfg.guided_width,
        )?;
        let frames = tape.concat_rows(&frames)?;
        let stop_logits = tape.concat_rows(&stops)?;
        Ok(GenOutput {
            frames,
            layout,
            alignments,
            stop_logits: Some(stop_logits),
            attention_penalty: Some(penalty),
        })
    }

    /// Free-running generation until every item's stop probability exceeds
    /// one half or `max_frames` steps have run.
    fn infer(
        &self,
        store: &ParamStore,
        cfg: &GeneratorConfig,
        items: &[GenItem],
        max_frames: usize,
    ) -> Result<Vec<Generated>> {
        let mut tape = Tape::new();
        let tape = &mut tape;
        let (memory, text_lengths) = self.encode(tape, store, items)?;
        let guides = pack_guides(tape, items, cfg.dim)?;
        let zi = self.guide.forward(tape, store, guides)?;
        let b = items.len();
        let mut state = self.initial_state(tape, cfg, &memory);
        let mut prev = tape.constant(Tensor::zeros(&[b, cfg.dim]));
        let mut lengths: Vec<Option<usize>> = vec![None; b];
        let mut frames = Vec::new();
        let mut weights = Vec::new();
        for k in 0..max_frames.max(1) {
            let out = self.step(tape, store, &memory, &mut state, prev, zi, guides, None)?;
            frames.push(out.frame);
            weights.push(out.weights);
            for (i, len) in lengths.iter_mut().enumerate() {
                if len.is_none() && sigmoid(tape.value(out.stop).data()[i]) > 0.5 {
                    *len = Some(k + 1);
                }
            }
            if lengths.iter().all(Option::is_some) {
                break;
            }
            prev = tape.detach(out.frame);
        }
        let steps = frames.len();
        let lengths: Vec<usize> = lengths.iter().map(|l| l.unwrap_or(steps)).collect();
        let alignments = collect_alignments(tape, &weights, &lengths, &text_lengths)?;
        let mut out = Vec::with_capacity(b);
        for (i, alignment) in alignments.into_iter().enumerate() {
            let mut data = Vec::with_capacity(lengths[i] * cfg.dim);
            for f in frames.iter().take(lengths[i]) {
                data.extend_from_slice(tape.value(*f).row(i));
            }
            out.push(Generated {
                trace: Trace::new(lengths[i], cfg.dim, data)
                    .map_err(|e| bad_shape(e.to_string()))?,
                alignment: Some(alignment),
            });
        }
        Ok(out)
    }
}

/// Mean over frames of the attention weight placed at token `t` of `T`
/// on frame `k` of `K`, scaled by `1 - exp(-(t/T - k/K)^2 / 2w^2)`.
fn diagonal_penalty(
    tape: &mut Tape,
    weights: &[Var],
    frame_lengths: &[usize],
    text_lengths: &[usize],
    width: f64,
) -> Result<Var> {
    let b = frame_lengths.len();
    let steps = text_lengths.iter().copied().max().unwrap_or(0);
    let frames: usize = frame_lengths.iter().sum();
    let mut total = None;
    for (k, &w) in weights.iter().enumerate() {
        let mut g = vec![0.0; b * steps];
        for i in 0..b {
            let (kk, tt) = (frame_lengths[i], text_lengths[i]);
            if k >= kk {
                continue;
            }
            let pos = (k as f64 + 0.5) / kk as f64;
            for t in 0..tt {
                let d = (t as f64 + 0.5) / tt as f64 - pos;
                g[i * steps + t] = 1.0 - (-d * d / (2.0 * width * width)).exp();
            }
        }
        let g = tape.constant(Tensor::matrix(b, steps, g));
        let m = tape.mul(w, g)?;
        let s = tape.sum(m)?;
        total = Some(match total {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    let total = total.ok_or_else(|| ModelError::Empty("attention steps".into()))?;
    Ok(tape.scale(total, 1.0 / frames.max(1) as f64)?)
}

/// Per-item `tokens x frames` alignment from per-step `[B, T]` weights.
fn collect_alignments(
    tape: &Tape,
    weights: &[Var],
    frame_lengths: &[usize],
    text_lengths: &[usize],
) -> Result<Vec<AlignmentMatrix>> {
    frame_lengths
        .iter()
        .zip(text_lengths)
        .enumerate()
        .map(|(i, (&k, &t))| {
            let cols: Vec<Vec<f64>> = weights[..k]
                .iter()
                .map(|w| {
                    let row = &tape.value(*w).row(i)[..t];
                    // padding positions carry exp(-1e9) = 0 exactly
                    let s: f64 = row.iter().sum();
                    row.iter().map(|v| v / s).collect()
                })
                .collect();
            Ok(AlignmentMatrix::from_frames(&cols)?)
        })
        .collect()
}

#[derive(Clone, Debug)]
enum GeneratorNet {
    Duration(DurationNet),
    Attention(AttentionNet),
}

/// Text-to-trace model of either kind.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    net: GeneratorNet,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate().map_err(bad_shape)?;
        let vocab = Vocabulary::for_mode(config.token_mode);
        let mut rng = seeded_rng(config.seed, &[0x4745]);
        let mut store = ParamStore::new();
        let net = match config.kind {
            GeneratorKind::Duration => {
                GeneratorNet::Duration(DurationNet::new(&mut store, &config, vocab.len(), &mut rng))
            }
            GeneratorKind::Attention => GeneratorNet::Attention(AttentionNet::new(
                &mut store,
                &config,
                vocab.len(),
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            vocab,
            store,
            net,
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        self.config.kind
    }

    /// Training-mode forward: expanded by durations, or teacher-forced on
    /// the target traces. `rng` enables prenet dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        items: &[GenItem],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GenOutput> {
        if items.is_empty() {
            return Err(ModelError::Empty("no generator items".into()));
        }
        match &self.net {
            GeneratorNet::Duration(n) => n.forward(tape, &self.store, &self.config, items),
            GeneratorNet::Attention(n) => n.forward(tape, &self.store, &self.config, items, rng),
        }
    }

    /// Mean per-value L1 against the targets, plus the stop loss and the
    /// diagonal attention prior for the attention model.
    pub fn loss(
        &self,
        tape: &mut Tape,
        items: &[GenItem],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GenLoss> {
        let out = self.forward(tape, items, rng)?;
        let targets: Vec<&Trace> = items
            .iter()
            .map(|it| {
                it.target
                    .ok_or_else(|| ModelError::Empty("target trace".into()))
            })
            .collect::<Result<_>>()?;
        if let Some((i, t)) = targets
            .iter()
            .enumerate()
            .find(|(i, t)| t.frames() != out.layout.lengths[*i])
        {
            return Err(bad_shape(format!(
                "item {i}: target has {} frames, generator made {}",
                t.frames(),
                out.layout.lengths[i]
            )));
        }
        let items_data: Vec<&[f64]> = targets.iter().map(|t| t.data()).collect();
        let target = out.layout.pack(&items_data, self.config.dim);
        let l1 = masked_l1(tape, out.frames, &target, &out.layout)?;
        let total = match out.stop_logits {
            Some(s) if self.config.stop_weight > 0.0 => {
                let bce = stop_bce(tape, s, &out.layout)?;
                let bce = tape.scale(bce, self.config.stop_weight)?;
                tape.add(l1, bce)?
            }
            _ => l1,
        };
        let total = match out.attention_penalty {
            Some(p) if self.config.guided_weight > 0.0 => {
                let p = tape.scale(p, self.config.guided_weight)?;
                tape.add(total, p)?
            }
            _ => total,
        };
        Ok(GenLoss { total, l1 })
    }

    /// Inference: expansion by the given durations, or free-running
    /// attention decoding capped at the configured `max_frames`.
    pub fn generate(&self, items: &[GenItem]) -> Result<Vec<Generated>> {
        self.generate_capped(items, self.config.max_frames)
    }

    pub fn generate_capped(&self, items: &[GenItem], max_frames: usize) -> Result<Vec<Generated>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        match &self.net {
            GeneratorNet::Duration(n) => {
                let mut tape = Tape::new();
                let out = n.forward(&mut tape, &self.store, &self.config, items)?;
                let value = tape.value(out.frames);
                (0..items.len())
                    .map(|i| {
                        let data = out.layout.unpack(value, i);
                        Ok(Generated {
                            trace: Trace::new(out.layout.lengths[i], self.config.dim, data)
                                .map_err(|e| bad_shape(e.to_string()))?,
                            alignment: None,
                        })
                    })
                    .collect()
            }
            GeneratorNet::Attention(n) => n.infer(&self.store, &self.config, items, max_frames),
        }
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        save_checkpoint(&self.store, &self.config.render(), dir, name)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta = read_meta(dir, name)?;
        let config = GeneratorConfig::parse(&meta).map_err(|e| meta_error(dir, name, e))?;
        let mut m = Self::new(config)?;
        load_params(&mut m.store, dir, name)?;
        Ok(m)
    }
}
