//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 1 2 3`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::gradients;
use duallab::align::{expand, extract_durations, one_hot_alignment, AlignmentMatrix, DurationSeq};
use duallab::config::KeyValueConfig;
use duallab::ctc::{ctc_brute_force, ctc_loss, LogProbMatrix};
use duallab::metrics::{edit_distance, psnr_trace, wer};
use duallab::synth::{make_corpus, CorpusConfig, Dataset};
use duallab::trace::Trace;
use duallab::train::{describe, train_run, DualConfig, TrainOutcome};
use duallab::vocab::TextSeq;
use rand::Rng;

const TOL_CTC: f64 = 1e-10;
const TOL_FD: f64 = 1e-5;

/// Shared training settings of the semi-supervised experiments.
const EXPERIMENT: &str = "reader_lr = 0.003
total_epochs = 80
";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Run {
    outcome: TrainOutcome,
    elapsed: Duration,
}

impl Run {
    fn cer(&self) -> f64 {
        self.outcome.best_eval.report.unit_error
    }

    fn l1(&self) -> f64 {
        self.outcome.best_eval.report.mean_l1
    }
}

/// Lazily trained runs shared between criteria 5 to 7.
struct Experiments {
    data: Dataset,
    runs: Vec<(String, Run)>,
}

impl Experiments {
    fn new() -> Self {
        let data = make_corpus(&CorpusConfig::default()).unwrap().dataset();
        Self {
            data,
            runs: Vec::new(),
        }
    }

    fn get(&mut self, overrides: &str) -> &Run {
        if let Some(i) = self.runs.iter().position(|(k, _)| k == overrides) {
            return &self.runs[i].1;
        }
        let mut config = DualConfig::default();
        config.apply(EXPERIMENT).unwrap();
        config.apply(overrides).unwrap();
        eprintln!("  training [{}]", overrides.trim().replace('\n', "; "));
        let start = Instant::now();
        let outcome = train_run(&config, &self.data, None, |r| {
            eprintln!("    {}", describe(r))
        })
        .unwrap();
        let elapsed = start.elapsed();
        eprintln!("  done in {:.0}s", elapsed.as_secs_f64());
        self.runs
            .push((overrides.to_string(), Run { outcome, elapsed }));
        &self.runs.last().unwrap().1
    }
}

const BASELINE: &str = "mode = baseline\n";
const DUAL_DURATION: &str = "mode = dual\n";
const DUAL_ATTENTION: &str = "mode = dual
generator.kind = attention
generator.embed = 64
generator.hidden = 128
generator.attention_dim = 64
";
const MINUTES_30: Duration = Duration::from_secs(30 * 60);

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn ctc_oracle() -> Verdict {
    let mut r = common::rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (k, v, lp, target) = gradients::random_ctc_instance(&mut r);
        let m = LogProbMatrix::new(k, v, lp.clone()).unwrap();
        let (loss, _) = ctc_loss(&m, &target).unwrap();
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let p = ctc_brute_force(&probs, k, v, &target).unwrap();
        worst = worst.max((loss + p.ln()).abs());
    }
    verdict(
        worst < TOL_CTC,
        format!("max |loss + ln p| = {worst:.1e} over 200 instances"),
    )
}

fn gradient_suite() -> Verdict {
    let mut all: Vec<(String, f64)> = Vec::new();
    all.push(("ctc".into(), gradients::ctc_gradient_error(77, 30)));
    for (n, e) in gradients::model_errors() {
        all.push((n.into(), e));
    }
    for (n, e) in gradients::layer_errors() {
        all.push((n.into(), e));
    }
    for (n, e) in gradients::op_errors() {
        all.push((n.into(), e));
    }
    let (name, worst) = all
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let failing: Vec<&str> = all
        .iter()
        .filter(|(_, e)| *e >= TOL_FD)
        .map(|(n, _)| n.as_str())
        .collect();
    verdict(
        failing.is_empty(),
        format!(
            "{} checks, worst {name} at {worst:.1e}; failing {failing:?}",
            all.len()
        ),
    )
}

fn alignment_laws() -> Verdict {
    let mut r = common::rng(31);
    let mut round_trip = 0;
    let mut sums = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=12);
        let text = TextSeq((0..n).map(|_| r.gen_range(4..30)).collect());
        let durs = DurationSeq((0..n).map(|_| r.gen_range(1..=6)).collect());
        let expanded = expand(&text, &durs).unwrap();
        let back = extract_durations(&one_hot_alignment(&durs).unwrap());
        if back == durs && expanded.len() == durs.total() {
            round_trip += 1;
        }
        let (t, k) = (r.gen_range(1..=10), r.gen_range(1..=40));
        let mut w = vec![0.0; t * k];
        for c in 0..k {
            let col: Vec<f64> = (0..t).map(|_| r.gen_range(0.0..1.0f64) + 1e-12).collect();
            let s: f64 = col.iter().sum();
            for (row, v) in col.iter().enumerate() {
                w[row * k + c] = v / s;
            }
        }
        if extract_durations(&AlignmentMatrix::new(t, k, w).unwrap()).total() == k {
            sums += 1;
        }
    }
    let worked = expand(&TextSeq(vec![4, 5, 6]), &DurationSeq(vec![1, 2, 3])).unwrap();
    let example = worked == TextSeq(vec![4, 5, 5, 6, 6, 6]);
    verdict(
        round_trip == 1000 && sums == 1000 && example,
        format!(
            "round trips {round_trip}/1000, duration sums {sums}/1000, expander example {example}"
        ),
    )
}

fn supervised_sanity() -> Verdict {
    let corpus = CorpusConfig {
        paired_fraction: 1.0,
        ..CorpusConfig::default()
    };
    let data = make_corpus(&corpus).unwrap().dataset();
    let mut config = DualConfig::default();
    config
        .apply("mode = baseline\nreader_lr = 0.003\ntotal_epochs = 12\n")
        .unwrap();
    let start = Instant::now();
    let outcome = train_run(&config, &data, None, |r| eprintln!("    {}", describe(r))).unwrap();
    let elapsed = start.elapsed();
    let cer = outcome.best_eval.report.unit_error;
    verdict(
        cer < 0.02 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{} paired, eval CER {} in {:.0}s",
            data.counts().paired,
            pct(cer),
            elapsed.as_secs_f64()
        ),
    )
}

fn dual_trend(exp: &mut Experiments) -> Verdict {
    let (b_cer, b_l1, b_t) = {
        let b = exp.get(BASELINE);
        (b.cer(), b.l1(), b.elapsed)
    };
    let (d_cer, d_l1, d_t) = {
        let d = exp.get(DUAL_DURATION);
        (d.cer(), d.l1(), d.elapsed)
    };
    let (a_cer, a_l1, a_t) = {
        let a = exp.get(DUAL_ATTENTION);
        (a.cer(), a.l1(), a.elapsed)
    };
    let halved = |cer: f64| cer * 2.0 <= b_cer;
    let pass = halved(d_cer)
        && halved(a_cer)
        && d_l1 < b_l1
        && d_l1 < a_l1
        && [b_t, d_t, a_t].iter().all(|t| *t < MINUTES_30);
    verdict(
        pass,
        format!(
            "CER baseline {} / with durations {} / attention {}; L1 baseline {b_l1:.4} / with durations {d_l1:.4} / attention {a_l1:.4}; minutes {:.1} / {:.1} / {:.1}",
            pct(b_cer),
            pct(d_cer),
            pct(a_cer),
            b_t.as_secs_f64() / 60.0,
            d_t.as_secs_f64() / 60.0,
            a_t.as_secs_f64() / 60.0
        ),
    )
}

fn unpaired_sweep(exp: &mut Experiments) -> Verdict {
    let available = {
        let c = exp.data.counts();
        (c.text_only + c.lip_only) as f64 / (c.paired + c.text_only + c.lip_only) as f64
    };
    let mut points = Vec::new();
    for f in [0.0, 0.3, 0.6, 0.9] {
        let overrides = if f == 0.0 {
            BASELINE.to_string()
        } else if f == 0.9 {
            DUAL_DURATION.to_string()
        } else {
            format!("{DUAL_DURATION}unpaired_fraction = {}\n", f / available)
        };
        points.push((f, exp.get(&overrides).cer()));
    }
    let steps_ok = points.windows(2).all(|w| w[1].1 <= w[0].1 * 1.1);
    let end_ok = points[3].1 < points[0].1;
    let shown: Vec<String> = points
        .iter()
        .map(|(f, c)| format!("{f}: {}", pct(*c)))
        .collect();
    verdict(
        steps_ok && end_ok,
        format!("CER by unpaired share {}", shown.join(", ")),
    )
}

fn monotone_alignment(exp: &mut Experiments) -> Verdict {
    let run = exp.get(DUAL_ATTENTION);
    let stats = run.outcome.best_eval.attention.clone().unwrap();
    verdict(
        stats.monotone_fraction >= 0.9 && stats.durations_consistent,
        format!(
            "monotone {} of eval sentences, durations sum to frames: {}",
            pct(stats.monotone_fraction),
            stats.durations_consistent
        ),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn duallab(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_duallab"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (a, b) = (tmp.path().join("corpus_a"), tmp.path().join("corpus_b"));
    let gen_ok = duallab(&["gen-data", "--out", &s(&a)]) && duallab(&["gen-data", "--out", &s(&b)]);
    let corpus_same = gen_ok && files(&a) == files(&b);

    let small = tmp.path().join("small");
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "reader.hidden = 16\nreader.conv_channels = 8\ngenerator.hidden = 16\ntotal_epochs = 3\nstage1_epochs = 1\nsteps_per_epoch = 3\nbatch_size = 8\nunpaired_batch_size = 8\n",
    )
    .unwrap();
    let mut ok = duallab(&[
        "gen-data",
        "--out",
        &s(&small),
        "--utterances",
        "120",
        "--paired-fraction",
        "0.3",
    ]);
    let mut csvs = Vec::new();
    for name in ["run_a", "run_b"] {
        let run = tmp.path().join(name);
        ok &= duallab(&[
            "train",
            "--config",
            &s(&cfg),
            "--data",
            &s(&small),
            "--out",
            &s(&run),
            "--mode",
            "dual",
            "--quiet",
        ]);
        csvs.push(std::fs::read(run.join("metrics.csv")).unwrap_or_default());
    }
    let metrics_same = ok && !csvs[0].is_empty() && csvs[0] == csvs[1];
    verdict(
        corpus_same && metrics_same,
        format!("corpus bytes identical: {corpus_same}, metric CSVs identical: {metrics_same}"),
    )
}

/// Plain recursion over the three edit operations.
fn edit_oracle(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_oracle(ra, rb) + usize::from(x != y);
            sub.min(edit_oracle(ra, b) + 1).min(edit_oracle(a, rb) + 1)
        }
    }
}

fn metric_spot_checks() -> Verdict {
    let a: Vec<char> = "kitten".chars().collect();
    let b: Vec<char> = "sitting".chars().collect();
    let d = edit_distance(&a, &b);
    let oracle = edit_oracle(&a, &b);
    let w = wer("bin blue at f two now", "bin blue at f three now").unwrap();
    let reference = Trace::new(4, 2, vec![0.5; 8]).unwrap();
    let shifted = Trace::new(4, 2, vec![0.6; 8]).unwrap();
    let p = psnr_trace(&reference, &shifted).unwrap();
    verdict(
        d == 3 && oracle == 3 && (w - 1.0 / 6.0).abs() < 1e-12 && (p - 20.0).abs() < 1e-9,
        format!("edit distance {d} (oracle {oracle}), WER {w:.6}, PSNR {p:.9} dB"),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut exp: Option<Experiments> = None;
    let mut failures = 0;
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let (name, v) = match n {
            1 => ("ctc oracle equivalence", ctc_oracle()),
            2 => ("gradient suite", gradient_suite()),
            3 => ("alignment laws", alignment_laws()),
            4 => ("supervised sanity", supervised_sanity()),
            5 => (
                "dual-learning trend",
                dual_trend(exp.get_or_insert_with(Experiments::new)),
            ),
            6 => (
                "unpaired fraction trend",
                unpaired_sweep(exp.get_or_insert_with(Experiments::new)),
            ),
            7 => (
                "monotone alignment",
                monotone_alignment(exp.get_or_insert_with(Experiments::new)),
            ),
            8 => ("determinism", determinism()),
            _ => ("metric spot checks", metric_spot_checks()),
        };
        let secs = start.elapsed().as_secs_f64();
        let limit = match n {
            1 => Some(10.0),
            2 => Some(60.0),
            _ => None,
        };
        let in_time = limit.map_or(true, |l| secs < l);
        let pass = v.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {n} {name}: {} ({}) [{secs:.1}s{}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            if in_time { "" } else { ", over time limit" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
