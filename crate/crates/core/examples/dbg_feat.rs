//! Scratch probe (deleted before release): feature statistics at the
//! attentive-head inputs, to see whether those heads starve for magnitude or
//! for per-pixel direction variation.

use msga_core::data::{generate, SyntheticSpec};
use msga_core::network::{downsample_labels_by2, MsgaNet, NetworkConfig};
use msga_core::trainer::{train, TrainConfig};
use msga_core::{ChaCha20Rng, ParamStore, SeedableRng, Tape};

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

    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if epochs > 0 {
        // Inline loop (full-batch, fixed order) so stats can be printed
        // mid-training; close enough to the real trainer for diagnosis.
        let mut adam = msga_core::trainer::AdamState::new(&store, 1e-3);
        for epoch in 1..=epochs {
            store.zero_grad();
            let (mut tot, mut seg) = (0.0, 0.0);
            for sample in &samples {
                let mut tape = Tape::new();
                let fwd = net.forward(&mut tape, &store, &sample.image).unwrap();
                let loss = net.loss(&mut tape, &fwd, &sample.labels).unwrap();
                tot += tape.value(loss.total).item().unwrap();
                seg += tape.value(loss.seg).item().unwrap();
                tape.backward(loss.total, &mut store).unwrap();
            }
            adam.step(&mut store).unwrap();
            if epoch % 10 == 0 || epoch == 1 {
                let mut tape = Tape::new();
                let fwd = net.forward(&mut tape, &store, &samples[0].image).unwrap();
                let mut feats = Vec::new();
                for s in 0..4 {
                    let f = tape.value(fwd.guided[s].features);
                    feats.push(format!(
                        "{:.3}",
                        f.data().iter().map(|v| v.abs()).sum::<f64>() / f.data().len() as f64
                    ));
                }
                let bias_mean = |name: &str| {
                    let id = store.find(name).unwrap();
                    let d = store.value(id).data();
                    d.iter().sum::<f64>() / d.len() as f64
                };
                println!(
                    "ep {epoch:3}  loss {:7.3}  seg {:6.3}  feat [{}]  bias s0 {:.3} s3 {:.3}",
                    tot / 8.0,
                    seg / 8.0,
                    feats.join(" "),
                    bias_mean("fusion.s0.bias"),
                    bias_mean("fusion.s3.bias"),
                );
            }
        }
        let _ = (train, TrainConfig::default());
    }

    // Force balance: per-loss gradient norms on key parameters.
    for which in ["seg", "guide", "recon"] {
        store.zero_grad();
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &store, &samples[0].image).unwrap();
        let loss = net.loss(&mut tape, &fwd, &samples[0].labels).unwrap();
        let target = match which {
            "seg" => loss.seg,
            "guide" => loss.guide,
            _ => loss.recon,
        };
        let val = tape.value(target).item().unwrap();
        tape.backward(target, &mut store).unwrap();
        let mut parts = Vec::new();
        for name in ["fusion.s0.kernel", "head.att.s0.kernel", "guided.s0.s0.ae.enc1.kernel", "backbone.stage0.kernel"] {
            let id = store.find(name).unwrap();
            let n: f64 = store.grad(id).data().iter().map(|g| g * g).sum::<f64>().sqrt();
            parts.push(format!("{name} {n:.3e}"));
        }
        println!("{which:5} loss {val:10.3}  |grad|: {}", parts.join("  "));
    }
    store.zero_grad();

    let sample = &samples[0];
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &store, &sample.image).unwrap();

    // Image stats.
    let img = &sample.image;
    let im_abs: f64 =
        img.data().iter().map(|v| v.abs()).sum::<f64>() / img.data().len() as f64;
    println!("image mean|v| {im_abs:.4}");

    for s in 0..4 {
        let feats = tape.value(fwd.guided[s].features).clone();
        let shape = feats.shape().to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let d = feats.data();
        let mean_abs: f64 = d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;

        // Per-pixel channel vectors, normalized; cosine against their mean.
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(hw);
        for p in 0..hw {
            let mut v: Vec<f64> = (0..c).map(|ch| d[ch * hw + p]).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-30 {
                for x in &mut v {
                    *x /= n;
                }
                dirs.push(v);
            }
        }
        let mut mean_dir = vec![0.0; c];
        for v in &dirs {
            for (m, x) in mean_dir.iter_mut().zip(v) {
                *m += x;
            }
        }
        let mn = mean_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for m in &mut mean_dir {
            *m /= mn.max(1e-30);
        }
        let mean_cos: f64 = dirs
            .iter()
            .map(|v| v.iter().zip(&mean_dir).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / dirs.len().max(1) as f64;

        // Argmax histogram of the attentive logits at this scale.
        let lg = tape.value(fwd.att_logits[s]).clone();
        let k = lg.shape()[0];
        let lhw = lg.shape()[1] * lg.shape()[2];
        let mut hist = vec![0usize; k];
        for p in 0..lhw {
            let mut best = 0;
            for ch in 1..k {
                if lg.data()[ch * lhw + p] > lg.data()[best * lhw + p] {
                    best = ch;
                }
            }
            hist[best] += 1;
        }
        let lg_abs: f64 =
            lg.data().iter().map(|v| v.abs()).sum::<f64>() / lg.data().len() as f64;
        println!(
            "scale {s}: feat mean|v| {mean_abs:.6}  dir-cos {mean_cos:.5}  logits mean|v| {lg_abs:.6}  argmax {hist:?}"
        );
    }

    // Per-class feature centroids at scale 0 (the final head's input):
    // coinciding centroids mean the features carry no class signal at all.
    let half = downsample_labels_by2(&sample.labels).unwrap();
    let feats = tape.value(fwd.guided[0].features).clone();
    let c = feats.shape()[0];
    let hw = feats.shape()[1] * feats.shape()[2];
    let mut centroids = vec![vec![0.0f64; c]; 4];
    let mut counts = vec![0usize; 4];
    for p in 0..hw {
        let k = half.data()[p];
        counts[k] += 1;
        for ch in 0..c {
            centroids[k][ch] += feats.data()[ch * hw + p];
        }
    }
    for k in 0..4 {
        if counts[k] > 0 {
            for v in &mut centroids[k] {
                *v /= counts[k] as f64;
            }
        }
    }
    for k in 0..4 {
        let norm = centroids[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("class {k}: pixels {:4}  centroid norm {norm:.4}", counts[k]);
    }
    for a in 0..4 {
        for b in (a + 1)..4 {
            let (ca, cb) = (&centroids[a], &centroids[b]);
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            let na = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dist: f64 =
                ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            println!(
                "classes {a}-{b}: cos {:.5}  dist {dist:.4}",
                dot / (na * nb).max(1e-30)
            );
        }
    }
}
