//! Trains on 10% paired data twice: once with the paired data alone, once
//! adding dual steps on the unpaired text and traces. Prints both results.
//!
//! `cargo run --release --example dual_vs_baseline -- [epochs] [duration|attention]`

use duallab::config::KeyValueConfig;
use duallab::metrics::EvalReport;
use duallab::synth::{make_corpus, CorpusConfig};
use duallab::train::{describe, train_run, DualConfig, TrainMode};

const ATTENTION_SIZES: &str = "generator.embed = 64
generator.hidden = 128
generator.attention_dim = 64";

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let kind = args.next().unwrap_or_else(|| "duration".into());
    let data = make_corpus(&CorpusConfig::default()).unwrap().dataset();
    println!("{}", data.counts());

    let mut reports = Vec::new();
    for mode in [TrainMode::Baseline, TrainMode::Dual] {
        let mut cfg = DualConfig::default();
        cfg.apply(&format!(
            "reader_lr = 0.003\ngenerator.kind = {kind}\nstage1_epochs = {}",
            epochs / 2
        ))
        .unwrap();
        if kind == "attention" {
            cfg.apply(ATTENTION_SIZES).unwrap();
        }
        cfg.mode = mode;
        cfg.total_epochs = epochs;
        println!("-- {mode}");
        let out = train_run(&cfg, &data, None, |r| println!("{}", describe(r))).unwrap();
        reports.push(out.best_eval.report);
    }
    print!("{}", EvalReport::table(&reports));
    let (b, d) = (&reports[0], &reports[1]);
    println!(
        "error rate reduction {:.2}x, generator L1 {:.4} -> {:.4}",
        b.unit_error / d.unit_error.max(1e-12),
        b.mean_l1,
        d.mean_l1
    );
}
