//! Scratch: scan the guided-module probe loss along one parameter direction
//! to see the local structure behind a finite-difference mismatch.

use msga_core::guided::GuidedModule;
use msga_core::tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pname = args.get(1).map(String::as_str).unwrap_or("g.s1.ae.enc2.kernel");
    let j: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(523);

    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let g = GuidedModule::new(&mut store, &mut rng, "g", 8, 2).unwrap();
    let x = store.register("x", rand_tensor(vec![8, 4, 4], 0.2, 1.2, &mut rng));
    let build = move |tape: &mut Tape, store: &ParamStore| -> msga_core::Result<Var> {
        let xv = tape.param(store, x);
        let out = g.forward(tape, store, xv)?;
        let sq = tape.mul_elementwise(out.features, out.features)?;
        let s = tape.sum_all(sq);
        let s = tape.add(s, out.guide_loss)?;
        tape.add(s, out.recon_loss)
    };

    let id = store.find(pname).unwrap();
    let orig = store.value(id).data()[j];
    // 41 samples across +-2e-3; print t, L(t), and the local slope estimate.
    let mut prev: Option<(f64, f64)> = None;
    for step in -20..=20i32 {
        let t = step as f64 * 1e-4;
        store.value_mut(id).data_mut()[j] = orig + t;
        let mut tape = Tape::new();
        let l = build(&mut tape, &store).unwrap();
        let lv = tape.value(l).item().unwrap();
        let slope = prev.map(|(pt, pl)| (lv - pl) / (t - pt));
        match slope {
            Some(s) => println!("t={t:+.4e}  L={lv:.12}  slope={s:+.6}"),
            None => println!("t={t:+.4e}  L={lv:.12}"),
        }
        prev = Some((t, lv));
    }
    store.value_mut(id).data_mut()[j] = orig;
}
