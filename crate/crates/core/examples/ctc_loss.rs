//! CTC loss on a tiny problem, checked against summing every frame path,
//! followed by greedy decoding.

use duallab::ctc::{collapse, ctc_brute_force, ctc_greedy_decode, ctc_loss, LogProbMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (frames, vocab) = (6, 4);
    let logits: Vec<f64> = (0..frames * vocab)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let lp = LogProbMatrix::from_logits(frames, vocab, &logits).unwrap();

    for target in [vec![1], vec![1, 2], vec![2, 2], vec![1, 3, 1]] {
        let (loss, grad) = ctc_loss(&lp, &target).unwrap();
        let probs: Vec<f64> = lp.values().iter().map(|v| v.exp()).collect();
        let p = ctc_brute_force(&probs, frames, vocab, &target).unwrap();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        println!(
            "target {target:?}: loss {loss:.12}  -ln(sum over paths) {:.12}  |grad| {gnorm:.4}",
            -p.ln()
        );
    }

    let path = lp.argmax_path();
    println!("best path {path:?} collapses to {:?}", collapse(&path));
    println!("greedy decode {:?}", ctc_greedy_decode(&lp));
}
