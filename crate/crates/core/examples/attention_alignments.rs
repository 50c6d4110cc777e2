//! Trains the attention generator with dual steps, then writes per-sentence
//! durations and alignment heat maps for a few eval sentences.
//!
//! `cargo run --release --example attention_alignments -- <out_dir> [epochs]`

use duallab::cli::export_alignments;
use duallab::config::KeyValueConfig;
use duallab::synth::{make_corpus, CorpusConfig};
use duallab::train::{describe, train_run, DualConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "alignments".into());
    let epochs: usize = args.next().map_or(12, |s| s.parse().expect("epochs"));
    let mut cc = CorpusConfig::default();
    cc.utterances = 600;
    cc.paired_fraction = 0.3;
    let data = make_corpus(&cc).unwrap().dataset();

    let mut cfg = DualConfig::default();
    cfg.apply("generator.kind = attention\nreader_lr = 0.003\neval_limit = 30")
        .unwrap();
    cfg.apply("generator.embed = 64\ngenerator.hidden = 128\ngenerator.attention_dim = 64")
        .unwrap();
    cfg.total_epochs = epochs;
    cfg.stage1_epochs = epochs / 2;
    let run = train_run(&cfg, &data, None, |r| println!("{}", describe(r))).unwrap();
    let n = export_alignments(&run.best_generator, &data, out.as_ref(), 8).unwrap();
    println!("wrote {n} sentences to {out}");
    print!(
        "{}",
        std::fs::read_to_string(std::path::Path::new(&out).join("index.csv")).unwrap()
    );
}
