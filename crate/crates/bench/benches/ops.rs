//! Criterion benchmarks for the hot paths: dense matmul, convolution, the
//! position-attention block, and a full network forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use msga_core::attention::PositionAttention;
use msga_core::network::{MsgaNet, NetworkConfig};
use msga_core::{ParamStore, Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, vec![64, 64]);
    let b = rand_tensor(&mut rng, vec![64, 64]);
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let y = tape.matmul(av, bv).unwrap();
            std::hint::black_box(tape.value(y).data()[0]);
        })
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, vec![8, 32, 32]);
    let k = rand_tensor(&mut rng, vec![8, 8, 3, 3]);
    let b = rand_tensor(&mut rng, vec![8]);
    c.bench_function("conv2d_8x32x32_3x3", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
            std::hint::black_box(tape.value(y).data()[0]);
        })
    });
}

fn bench_position_attention(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let pam = PositionAttention::new(&mut store, &mut rng, "pam", 8);
    let x = rand_tensor(&mut rng, vec![8, 16, 16]);
    c.bench_function("position_attention_8x16x16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = pam.forward(&mut tape, &store, xv).unwrap();
            std::hint::black_box(tape.value(out.out).data()[0]);
        })
    });
}

fn bench_net_forward(c: &mut Criterion) {
    let cfg = NetworkConfig {
        classes: 4,
        scales: 4,
        base_width: 8,
        fusion_channels: 16,
        steps: 2,
        input_h: 32,
        input_w: 32,
        alpha: 1.0,
        beta: 0.25,
        gamma: 0.1,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let net = MsgaNet::new(&mut store, &mut rng, &cfg).unwrap();
    let image = rand_tensor(&mut rng, vec![1, 32, 32]);
    c.bench_function("net_forward_32x32_c8_f16_m2", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &store, &image).unwrap();
            std::hint::black_box(tape.value(fwd.logits_final).data()[0]);
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_position_attention,
    bench_net_forward
);
criterion_main!(benches);
