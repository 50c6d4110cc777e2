//! Supervised training of the reader and the duration generator on a fully
//! paired corpus, then transcription of a few eval traces.
//!
//! `cargo run --release --example train_reader -- [epochs]`

use duallab::config::KeyValueConfig;
use duallab::models::GenItem;
use duallab::synth::{make_corpus, CorpusConfig, Split};
use duallab::train::{describe, train_run, DualConfig};

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(15, |s| s.parse().expect("epochs"));
    let mut cc = CorpusConfig::default();
    cc.utterances = 600;
    cc.paired_fraction = 1.0;
    let data = make_corpus(&cc).unwrap().dataset();

    let mut cfg = DualConfig::default();
    cfg.apply("mode = baseline\nreader_lr = 0.003\neval_limit = 40")
        .unwrap();
    cfg.total_epochs = epochs;
    let out = train_run(&cfg, &data, None, |r| println!("{}", describe(r))).unwrap();
    print!("{}", out.best_eval.report);

    let vocab = &data.vocab;
    let eval = data.split(Split::Eval);
    for u in eval.iter().take(3) {
        let trace = u.trace.as_ref().unwrap();
        let t = &out.best_reader.transcribe_batch(&[trace]).unwrap()[0];
        println!(
            "ref {}\nhyp {}",
            vocab.render(u.text.as_ref().unwrap()),
            vocab.render(&t.text)
        );
        let g = &out
            .best_generator
            .generate(&[GenItem {
                text: u.text.as_ref().unwrap(),
                durations: u.durations.as_ref(),
                guide: trace.frame(0),
                target: None,
            }])
            .unwrap()[0];
        let l1 = duallab::metrics::mean_l1(trace, &g.trace).unwrap();
        println!("generated {} frames, L1 {l1:.4}", g.trace.frames());
    }
}
