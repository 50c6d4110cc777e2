//! Expanding tokens by durations, turning durations into a hard alignment,
//! and reading durations back off a soft alignment.

use duallab::align::{
    expand, extract_durations, monotonicity, one_hot_alignment, AlignmentMatrix, DurationSeq,
};
use duallab::vocab::TextSeq;

fn main() {
    let text = TextSeq(vec![10, 11, 12]);
    let durs = DurationSeq(vec![1, 2, 3]);
    println!(
        "expand {:?} by {:?} -> {:?}",
        text.0,
        durs.0,
        expand(&text, &durs).unwrap().0
    );

    let hard = one_hot_alignment(&durs).unwrap();
    println!("hard alignment gives back {:?}", extract_durations(&hard).0);

    // a soft, slightly smeared alignment over 7 frames
    let frames = vec![
        vec![0.9, 0.1, 0.0],
        vec![0.6, 0.4, 0.0],
        vec![0.2, 0.7, 0.1],
        vec![0.1, 0.5, 0.4],
        vec![0.0, 0.3, 0.7],
        vec![0.0, 0.1, 0.9],
        vec![0.0, 0.0, 1.0],
    ];
    let soft = AlignmentMatrix::from_frames(&frames).unwrap();
    let d = extract_durations(&soft);
    let m = monotonicity(&soft);
    println!(
        "soft alignment: path {:?}, durations {:?} (sum {}), monotone {}",
        soft.argmax_path(),
        d.0,
        d.total(),
        m.is_monotone
    );

    let backwards =
        AlignmentMatrix::from_frames(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let m = monotonicity(&backwards);
    println!(
        "jumping alignment: monotone {}, {} violation(s)",
        m.is_monotone, m.violations
    );
}
