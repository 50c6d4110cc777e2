//! Sweeps the amount of unpaired data at a fixed 10% paired split through
//! the same code path as `duallab sweep-unpaired`, writing a CSV and an SVG
//! plot.
//!
//! `cargo run --release --example unpaired_sweep -- <work_dir> [epochs]`

use duallab::cli::{cmd_sweep_unpaired, SweepArgs};
use duallab::config::KeyValueConfig;
use duallab::synth::{make_corpus, CorpusConfig};
use duallab::train::DualConfig;

fn main() {
    let mut args = std::env::args().skip(1);
    let work = std::path::PathBuf::from(args.next().unwrap_or_else(|| "sweep".into()));
    let epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    let data_dir = work.join("data");
    make_corpus(&CorpusConfig::default())
        .unwrap()
        .write(&data_dir)
        .unwrap();

    let mut cfg = DualConfig::default();
    cfg.apply(&format!(
        "reader_lr = 0.003\nstage1_epochs = {}\neval_limit = 100",
        epochs / 2
    ))
    .unwrap();
    cfg.total_epochs = epochs;
    let cfg_path = work.join("train.cfg");
    std::fs::write(&cfg_path, cfg.render()).unwrap();

    let report = cmd_sweep_unpaired(&SweepArgs {
        config: Some(cfg_path),
        data: data_dir,
        out: work.join("runs"),
        fractions: "0,0.3,0.6,0.9".into(),
        generator: None,
        seed: None,
        jobs: 1,
        quiet: true,
    })
    .unwrap();
    print!("{}", report.table());
    println!("plot: {}", work.join("runs").join("sweep.svg").display());
}
