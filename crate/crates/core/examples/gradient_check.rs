//! Differentiates a bidirectional GRU through the tape and compares every
//! parameter gradient against central finite differences.

use duallab::nn::{gru_sequence, GruLayer, Layout};
use duallab::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(
    store: &ParamStore,
    layer: &GruLayer,
    x: &Tensor,
    layout: &Layout,
) -> (f64, Vec<Option<Tensor>>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = gru_sequence(&mut tape, store, layer, xv, layout).unwrap();
    let t = tape.tanh(h).unwrap();
    let l = tape.sum(t).unwrap();
    let value = tape.value(l).item();
    let grads = tape.backward(l).unwrap().for_store(store);
    (value, grads)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layer = GruLayer::new(&mut store, "gru", 3, 4, true, &mut rng);
    // two sequences of lengths 5 and 3, packed time-major
    let layout = Layout::new(vec![5, 3]).unwrap();
    let x = Tensor::matrix(10, 3, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let (value, grads) = loss(&store, &layer, &x, &layout);
    println!("loss {value:.6} over {} parameters", store.num_scalars());

    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..store.len() {
        let analytic = grads[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.values()[i].shape()));
        for j in 0..store.values()[i].numel() {
            let orig = store.values()[i].data()[j];
            store.values_mut()[i].data_mut()[j] = orig + h;
            let up = loss(&store, &layer, &x, &layout).0;
            store.values_mut()[i].data_mut()[j] = orig - h;
            let down = loss(&store, &layer, &x, &layout).0;
            store.values_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    println!("max relative error {worst:.2e}");
}
