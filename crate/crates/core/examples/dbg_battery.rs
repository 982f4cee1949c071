//! Scratch: run the block and net batteries and print per-check worst errors.

use msga_core::trainer::{battery, battery_threshold};

fn main() {
    for scope in ["op", "block", "net"] {
        let t0 = std::time::Instant::now();
        let (reports, threshold) = battery(scope, 0).unwrap();
        let thr = battery_threshold(scope).unwrap();
        assert_eq!(threshold, thr);
        for r in &reports {
            let verdict = if r.worst < threshold { "ok " } else { "FAIL" };
            println!("{verdict} {scope:<6} {:<22} worst {:.3e} (thr {threshold:.0e})", r.name, r.worst);
        }
        println!("{scope}: {:?}", t0.elapsed());
    }
}
