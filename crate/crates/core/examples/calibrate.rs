//! Scratch calibration run for the overfit acceptance target (deleted before
//! release): times epochs and watches the DSC trajectory.

use msga_core::data::{generate, SyntheticSpec};
use msga_core::network::{MsgaNet, NetworkConfig};
use msga_core::trainer::{train, TrainConfig};
use msga_core::{ChaCha20Rng, ParamStore, SeedableRng};

fn main() {
    let spec = SyntheticSpec { n: 8, height: 32, width: 32, classes: 4, sigma: 0.05, seed: 7 };
    let samples = generate(&spec).unwrap();
    let cfg = NetworkConfig {
        classes: 4,
        scales: 4,
        base_width: 8,
        fusion_channels: 8,
        steps: 2,
        input_h: 32,
        input_w: 32,
        alpha: 1.0,
        beta: 0.25,
        gamma: 0.1,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let net = MsgaNet::new(&mut store, &mut rng, &cfg).unwrap();
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let patience: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(50);
    let tc = TrainConfig {
        epochs,
        batch_size: 8,
        lr: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        patience,
        lr_factor: 0.5,
        val_fraction: 0.0,
        augment: false,
        seed: 7,
        out_dir: None,
    };
    let t0 = std::time::Instant::now();
    let report = train(&net, &mut store, &samples, &tc).unwrap();

    // Which heads actually learned? Compare raw vs attentive per scale.
    use msga_core::metrics::evaluate;
    use msga_core::network::predict_labels;
    use msga_core::Tape;
    for s in 0..4 {
        let (mut raw_dsc, mut att_dsc) = (0.0, 0.0);
        for sample in &samples {
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &store, &sample.image).unwrap();
            let pr = predict_labels(&mut tape, fwd.raw_logits[s], 32, 32).unwrap();
            let pa = predict_labels(&mut tape, fwd.att_logits[s], 32, 32).unwrap();
            raw_dsc += evaluate(&pr, &sample.labels, 4).unwrap().mean_dsc.unwrap_or(0.0);
            att_dsc += evaluate(&pa, &sample.labels, 4).unwrap().mean_dsc.unwrap_or(0.0);
        }
        println!(
            "scale {s}: raw dsc {:.4}  att dsc {:.4}",
            raw_dsc / samples.len() as f64,
            att_dsc / samples.len() as f64
        );
    }
    for r in report.epochs.iter() {
        if r.epoch % 5 == 0 || r.epoch <= 3 || r.epoch + 1 == epochs {
            println!(
                "epoch {:3}  loss {:9.4}  seg {:8.4} guide {:8.5} recon {:8.4}  dsc {:6.4}  lr {:9.2e}  {:.2}s",
                r.epoch, r.loss, r.seg_loss, r.guide_loss, r.recon_loss, r.val_dsc, r.lr, r.seconds
            );
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
