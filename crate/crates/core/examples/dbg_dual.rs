//! Scratch: locate the parameter entry where the guided-module
//! finite-difference comparison disagrees. Not part of the shipped crate.

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
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let g = GuidedModule::new(&mut store, &mut rng, "g", 8, 2).unwrap();
    // Same jitter the unit test applies.
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        for v in store.value_mut(*id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = store.register("x", rand_tensor(vec![8, 4, 4], 0.2, 1.2, &mut rng));
    let build = move |tape: &mut Tape, store: &ParamStore| -> msga_core::Result<Var> {
        let xv = tape.param(store, x);
        let out = g.forward(tape, store, xv)?;
        let sq = tape.mul_elementwise(out.features, out.features)?;
        let s = tape.sum_all(sq);
        let s = tape.add(s, out.guide_loss)?;
        tape.add(s, out.recon_loss)
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store).unwrap();
    let base = tape.value(loss).item().unwrap();
    println!("base loss {base}");
    tape.backward(loss, &mut store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let h = 1e-3;
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.value(id).data().len();
        let analytic: Vec<f64> = store.grad(id).data().to_vec();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let mut tp = Tape::new();
            let lp = {
                let l = build(&mut tp, &store).unwrap();
                tp.value(l).item().unwrap()
            };
            store.value_mut(id).data_mut()[j] = orig - h;
            let mut tm = Tape::new();
            let lm = {
                let l = build(&mut tm, &store).unwrap();
                tm.value(l).item().unwrap()
            };
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ga = analytic[j];
            let resolution = 32.0 * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / (2.0 * h);
            if ga.abs() <= resolution && fd.abs() <= resolution {
                continue;
            }
            let fd_plus = (lp - base) / h;
            let fd_minus = (base - lm) / h;
            if (fd_plus - fd_minus).abs() > 0.5 * fd_plus.abs().max(fd_minus.abs()) {
                continue;
            }
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-12);
            if rel > 1e-3 {
                println!(
                    "{name}[{j}] rel {rel:.4e} analytic {ga:.8e} fd {fd:.8e} fd+ {fd_plus:.8e} fd- {fd_minus:.8e}"
                );
            }
        }
    }
}
