//! Layer building blocks: convolution blocks, the downsampling backbone, the
//! bottleneck encoder-decoder, and per-pixel classification heads.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// He-uniform kernel: limit sqrt(6 / fan_in) with fan_in = cin * kh * kw.
fn he_uniform(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    small_uniform(rng, shape, limit)
}

fn small_uniform(rng: &mut ChaCha20Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Kernel that starts as a box blur routed from chosen input channels: each
/// `(out, in, w)` tap spreads total weight `w` uniformly over a ksize x ksize
/// window reading input channel `in` into output channel `out`. Smooth
/// outputs survive pooling bottlenecks, so layers seeded this way keep any
/// downstream reconstruction losses near their floor from the first step
/// instead of paying for texture no bottleneck can carry.
pub fn box_routing_kernel(
    cout: usize,
    cin: usize,
    ksize: usize,
    taps: &[(usize, usize, f64)],
) -> Tensor {
    let mut k = Tensor::zeros(vec![cout, cin, ksize, ksize]);
    let per = 1.0 / (ksize * ksize) as f64;
    for &(o, i, w) in taps {
        assert!(o < cout && i < cin, "tap ({o},{i}) outside {cout}x{cin}");
        for dy in 0..ksize {
            for dx in 0..ksize {
                k.data_mut()[((o * cin + i) * ksize + dy) * ksize + dx] += w * per;
            }
        }
    }
    k
}

/// One convolution with optional ReLU. Padding keeps spatial size: k/2.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub pad: usize,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        activation: Activation,
    ) -> ConvBlock {
        let fan_in = cin * ksize * ksize;
        let kernel = store.register(
            &format!("{name}.kernel"),
            he_uniform(rng, vec![cout, cin, ksize, ksize], fan_in),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvBlock { kernel, bias, pad: ksize / 2, activation }
    }

    /// Square conv initialized to the identity map: a centered delta kernel.
    /// Lets a block sit transparently in a residual-style path at the start
    /// of training instead of scrambling its input with random weights.
    pub fn identity_init(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        ksize: usize,
        activation: Activation,
    ) -> ConvBlock {
        let mut k = Tensor::zeros(vec![c, c, ksize, ksize]);
        let center = ksize / 2;
        for ch in 0..c {
            k.data_mut()[((ch * c + ch) * ksize + center) * ksize + center] = 1.0;
        }
        let kernel = store.register(&format!("{name}.kernel"), k);
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![c]));
        ConvBlock { kernel, bias, pad: ksize / 2, activation }
    }

    /// Conv initialized to the zero map; it contributes nothing at first and
    /// is grown by the optimizer as needed.
    pub fn zero_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        activation: Activation,
    ) -> ConvBlock {
        let kernel = store.register(
            &format!("{name}.kernel"),
            Tensor::zeros(vec![cout, cin, ksize, ksize]),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvBlock { kernel, bias, pad: ksize / 2, activation }
    }

    /// Conv built from an explicit starting kernel, with zero biases.
    pub fn from_kernel(
        store: &mut ParamStore,
        name: &str,
        kernel: Tensor,
        activation: Activation,
    ) -> ConvBlock {
        assert_eq!(kernel.shape().len(), 4, "conv kernels are [cout,cin,kh,kw]");
        let cout = kernel.shape()[0];
        let ksize = kernel.shape()[3];
        let kernel = store.register(&format!("{name}.kernel"), kernel);
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvBlock { kernel, bias, pad: ksize / 2, activation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, b, 1, self.pad)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Linear => y,
        })
    }
}

/// Four-stage feature extractor. Stage s maps to width base*2^s and halves
/// the spatial size, so stage s output is (base*2^s) x H/2^(s+1) x W/2^(s+1).
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<ConvBlock>,
}

pub const BACKBONE_STAGES: usize = 4;

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_channels: usize,
        base: usize,
    ) -> Backbone {
        let mut stages = Vec::with_capacity(BACKBONE_STAGES);
        let mut cin = in_channels;
        for s in 0..BACKBONE_STAGES {
            let cout = base << s;
            stages.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.stage{s}"),
                cin,
                cout,
                3,
                Activation::Relu,
            ));
            cin = cout;
        }
        Backbone { stages }
    }

    /// Input must have spatial dims divisible by 2^4.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        let shape = tape.value(image).shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "backbone expects [C,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let div = 1 << BACKBONE_STAGES;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "backbone input {h}x{w} must be divisible by {div}"
            )));
        }
        let mut features = Vec::with_capacity(BACKBONE_STAGES);
        let mut x = image;
        for stage in &self.stages {
            let c = stage.forward(tape, store, x)?;
            x = tape.avg_pool2(c)?;
            features.push(x);
        }
        Ok(features)
    }
}

/// Bottleneck autoencoder: two downsampling stages to a 2C-wide latent at
/// quarter resolution, then two upsampling stages back to the input shape.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    enc1: ConvBlock,
    enc2: ConvBlock,
    dec1: ConvBlock,
    dec2: ConvBlock,
}

impl EncoderDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, c: usize) -> EncoderDecoder {
        // Pass-through initialization. The reconstruction multiplies other
        // feature maps downstream and feeds a squared-error loss, so a fresh
        // module reproducing its input as closely as the pooling bottleneck
        // allows is far more useful than one emitting random garbage: the
        // per-channel center-tap kernels make the initial reconstruction the
        // low-pass image that survives two pool/upsample round trips, the
        // reconstruction loss starts near its floor, and early optimizer
        // steps are free to serve the task loss instead of repairing a
        // random decoder. The widening conv routes channel j to channel j
        // and seeds the extra channels with small random weights so they are
        // live from the start (a ReLU unit with all-zero weights never wakes
        // up); the narrowing conv reads channel j back from channel j and
        // ignores the extras until training grows them in.
        let enc1 = {
            let fan_in = c * 9;
            let limit = 0.25 * (6.0 / fan_in as f64).sqrt();
            let mut k = small_uniform(rng, vec![2 * c, c, 3, 3], limit);
            for ch in 0..c {
                for ci in 0..c {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let v = if ci == ch && dy == 1 && dx == 1 { 1.0 } else { 0.0 };
                            k.data_mut()[((ch * c + ci) * 3 + dy) * 3 + dx] = v;
                        }
                    }
                }
            }
            let kernel = store.register(&format!("{name}.enc1.kernel"), k);
            let bias = store.register(&format!("{name}.enc1.bias"), Tensor::zeros(vec![2 * c]));
            ConvBlock { kernel, bias, pad: 1, activation: Activation::Relu }
        };
        let enc2 = ConvBlock::identity_init(store, &format!("{name}.enc2"), 2 * c, 3, Activation::Relu);
        let dec1 = ConvBlock::identity_init(store, &format!("{name}.dec1"), 2 * c, 3, Activation::Relu);
        let dec2 = {
            let mut k = Tensor::zeros(vec![c, 2 * c, 3, 3]);
            for ch in 0..c {
                k.data_mut()[((ch * 2 * c + ch) * 3 + 1) * 3 + 1] = 1.0;
            }
            let kernel = store.register(&format!("{name}.dec2.kernel"), k);
            let bias = store.register(&format!("{name}.dec2.bias"), Tensor::zeros(vec![c]));
            ConvBlock { kernel, bias, pad: 1, activation: Activation::Relu }
        };
        EncoderDecoder { enc1, enc2, dec1, dec2 }
    }

    /// Returns (latent, reconstruction); latent is 2C x H/4 x W/4 and the
    /// reconstruction has the input shape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("encoder expects [C,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder input {h}x{w} must be divisible by 4"
            )));
        }
        let e1 = self.enc1.forward(tape, store, x)?;
        let e1 = tape.avg_pool2(e1)?;
        let e2 = self.enc2.forward(tape, store, e1)?;
        let latent = tape.avg_pool2(e2)?;

        let u1 = tape.bilinear_upsample(latent, h / 2, w / 2)?;
        let d1 = self.dec1.forward(tape, store, u1)?;
        let u2 = tape.bilinear_upsample(d1, h, w)?;
        let recon = self.dec2.forward(tape, store, u2)?;
        Ok((latent, recon))
    }
}

/// 1x1 linear conv mapping features to per-pixel class scores. Inputs get a
/// fixed gain first: with few, large optimizer steps the class ordering has
/// to emerge from small weight deltas, and the gain makes those deltas worth
/// decision-scale logit differences.
#[derive(Debug, Clone)]
pub struct SegHead {
    conv: ConvBlock,
}

/// Fixed input gain of every [`SegHead`].
pub const HEAD_GAIN: f64 = 2.0;

impl SegHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, cin: usize, classes: usize) -> SegHead {
        // Moderate init: small enough that no class starts with a decisive
        // margin, large enough that the cross-entropy pulls features toward
        // class-informative directions from the first step — the auxiliary
        // reconstruction pressure flattens features it cannot encode, and a
        // head too close to zero cannot push back in time.
        let kernel = store.register(
            &format!("{name}.kernel"),
            small_uniform(rng, vec![classes, cin, 1, 1], 0.1),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![classes]));
        SegHead {
            conv: ConvBlock { kernel, bias, pad: 0, activation: Activation::Linear },
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let amplified = tape.scale(x, HEAD_GAIN);
        self.conv.forward(tape, store, amplified)
    }

    pub fn kernel(&self) -> ParamId {
        self.conv.kernel
    }

    pub fn bias(&self) -> ParamId {
        self.conv.bias
    }
}
