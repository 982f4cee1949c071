//! Scratch diagnostic (deleted before release): trains a bare 1x1 conv head
//! on the raw image intensities. Class bands are linearly separable, so this
//! must reach near-perfect DSC fast if loss/optimizer/metrics are wired
//! correctly.

use msga_core::data::{generate, SyntheticSpec};
use msga_core::metrics::{argmax_channels, evaluate};
use msga_core::nn::SegHead;
use msga_core::trainer::AdamState;
use msga_core::{ChaCha20Rng, ParamStore, SeedableRng, Tape};

fn main() {
    let spec = SyntheticSpec { n: 8, height: 32, width: 32, classes: 4, sigma: 0.05, seed: 7 };
    let samples = generate(&spec).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = SegHead::new(&mut store, &mut rng, "probe", 1, 4);
    let mut adam = AdamState::new(&store, 0.05);

    for epoch in 1..=120 {
        store.zero_grad();
        let mut total = 0.0;
        for s in &samples {
            let mut tape = Tape::new();
            let img = tape.constant(s.image.clone());
            let logits = head.forward(&mut tape, &store, img).unwrap();
            let ce = tape.cross_entropy(logits, s.labels.data()).unwrap();
            total += tape.value(ce).item().unwrap();
            tape.backward(ce, &mut store).unwrap();
        }
        adam.step(&mut store).unwrap();

        if epoch % 20 == 0 || epoch <= 3 {
            let mut dsc_sum = 0.0;
            for s in &samples {
                let mut tape = Tape::new();
                let img = tape.constant(s.image.clone());
                let logits = head.forward(&mut tape, &store, img).unwrap();
                let pred = argmax_channels(tape.value(logits)).unwrap();
                let rep = evaluate(&pred, &s.labels, 4).unwrap();
                dsc_sum += rep.mean_dsc.unwrap_or(0.0);
            }
            println!(
                "epoch {epoch:3}  ce {:8.4}  dsc {:6.4}",
                total / samples.len() as f64,
                dsc_sum / samples.len() as f64
            );
        }
    }
}
