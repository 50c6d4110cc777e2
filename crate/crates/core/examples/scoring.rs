//! Error rates and reconstruction scores.

use duallab::metrics::{
    cer, edit_distance, psnr_trace, unit_error_rate, wer, word_error_rate, EvalReport,
};
use duallab::trace::Trace;
use duallab::vocab::{TokenMode, Vocabulary};

fn main() {
    println!(
        "edit distance kitten/sitting = {}",
        edit_distance(b"kitten", b"sitting")
    );
    let r = "bin blue at f two now";
    let h = "bin blue at s two now";
    println!(
        "wer {:.4}  cer {:.4}",
        wer(r, h).unwrap(),
        cer(r, h).unwrap()
    );

    let chars = Vocabulary::characters();
    let phones = Vocabulary::phonemes();
    let words = ["bin", "blue", "at", "f", "two", "now"];
    let (rc, hc) = (
        chars.encode_words(&words).unwrap(),
        chars.parse("bin blue at s two now").unwrap(),
    );
    println!(
        "token cer {:.4}  token wer {:.4}",
        unit_error_rate(&chars, &rc, &hc).unwrap(),
        word_error_rate(&chars, &rc, &hc).unwrap()
    );
    let rp = phones.encode_words(&words).unwrap();
    let hp = phones
        .encode_words(&["bin", "blue", "at", "s", "two", "now"])
        .unwrap();
    println!(
        "phonemes {}  per {:.4}",
        phones.render(&rp),
        unit_error_rate(&phones, &rp, &hp).unwrap()
    );

    let a = Trace::new(2, 2, vec![0.5; 4]).unwrap();
    let b = Trace::new(2, 2, vec![0.6, 0.4, 0.6, 0.4]).unwrap();
    println!("psnr at mse 0.01: {:.3} dB", psnr_trace(&a, &b).unwrap());

    let report = EvalReport {
        label: "example".into(),
        unit_error: 0.012,
        wer: 0.041,
        mean_l1: 0.028,
        mean_psnr: 28.9,
        n_utterances: 200,
        mode: TokenMode::Character,
    };
    print!("{report}");
    print!("{}", EvalReport::csv(&[report]));
}
