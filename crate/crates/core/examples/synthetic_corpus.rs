//! Builds a small synthetic corpus, prints the split table and one
//! utterance with its per-token durations.
//!
//! `cargo run --example synthetic_corpus -- [out_dir]` also writes it to disk.

use duallab::align::format_durations;
use duallab::synth::{make_corpus, CorpusConfig, Split};

fn main() {
    let mut cfg = CorpusConfig::default();
    cfg.utterances = 400;
    let corpus = make_corpus(&cfg).unwrap();
    println!("{}", corpus.split_counts());

    let data = corpus.dataset();
    let u = data.split(Split::Paired)[0];
    let text = u.text.as_ref().unwrap();
    let trace = u.trace.as_ref().unwrap();
    println!(
        "{} (speaker {}): {}",
        u.id,
        u.speaker,
        data.vocab.render(text)
    );
    println!(
        "durations: {}",
        format_durations(&data.vocab, text, u.durations.as_ref().unwrap())
    );
    println!("trace: {} frames x {} dims", trace.frames(), trace.dim());
    for k in 0..4 {
        let row: Vec<String> = trace.frame(k).iter().map(|v| format!("{v:.3}")).collect();
        println!("  frame {k}: {}", row.join(" "));
    }

    let lip = data.split(Split::LipOnly)[0];
    println!(
        "{} is lip-only: text {:?}, trace {}",
        lip.id,
        lip.text,
        lip.trace.is_some()
    );

    if let Some(dir) = std::env::args().nth(1) {
        corpus.write(dir.as_ref()).unwrap();
        println!("written to {dir}");
    }
}
