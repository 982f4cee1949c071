//! The full segmentation network: a four-stage backbone, multi-scale feature
//! fusion, one guided attention module per scale, and deeply supervised
//! segmentation heads (a raw head on each upsampled backbone feature and an
//! attentive head on each guided output). The final prediction comes from the
//! scale-0 attentive head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::guided::{guided_losses_total, GuidedModule, GuidedOutput, STEP_CHOICES};
use crate::metrics::{argmax_channels, LabelMap};
use crate::nn::{box_routing_kernel, Activation, Backbone, ConvBlock, SegHead, BACKBONE_STAGES};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of classes K (background included).
    pub classes: usize,
    /// Number of backbone scales; must equal [`BACKBONE_STAGES`].
    pub scales: usize,
    /// Channel width of backbone stage 0 (stage s has `base_width << s`).
    pub base_width: usize,
    /// Channel width of the fused multi-scale features; the guided attention
    /// modules run at this width, so it must be divisible by 8 (position
    /// attention projects to an eighth of the channels).
    pub fusion_channels: usize,
    /// Refinement steps per guided module.
    pub steps: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Weight of the segmentation loss.
    pub alpha: f64,
    /// Weight of the latent-guidance loss.
    pub beta: f64,
    /// Weight of the reconstruction loss.
    pub gamma: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.scales != BACKBONE_STAGES {
            return Err(Error::Config(format!(
                "this backbone has exactly {BACKBONE_STAGES} scales, got {}",
                self.scales
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base width must be at least 1".into()));
        }
        if self.fusion_channels == 0 || self.fusion_channels % 8 != 0 {
            return Err(Error::Config(format!(
                "fusion width must be a positive multiple of 8, got {}",
                self.fusion_channels
            )));
        }
        if !STEP_CHOICES.contains(&self.steps) {
            return Err(Error::Config(format!(
                "refinement step count must be one of {STEP_CHOICES:?}, got {}",
                self.steps
            )));
        }
        let div = 1 << BACKBONE_STAGES;
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % div != 0
            || self.input_w % div != 0
        {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of {div}",
                self.input_h, self.input_w
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the config as `key=value` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = format!(
            "classes={}\nscales={}\nbase_width={}\nfusion_channels={}\nsteps={}\n\
             input_h={}\ninput_w={}\nalpha={}\nbeta={}\ngamma={}\n",
            self.classes,
            self.scales,
            self.base_width,
            self.fusion_channels,
            self.steps,
            self.input_h,
            self.input_w,
            self.alpha,
            self.beta,
            self.gamma
        );
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetworkConfig> {
        let text = fs::read_to_string(path)?;
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed config line: {line}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            fields
                .get(key)
                .ok_or_else(|| Error::Data(format!("network config is missing '{key}'")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("config field '{key}' is not an integer")))
        };
        let float = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("config field '{key}' is not a number")))
        };
        let cfg = NetworkConfig {
            classes: int("classes")?,
            scales: int("scales")?,
            base_width: int("base_width")?,
            fusion_channels: int("fusion_channels")?,
            steps: int("steps")?,
            input_h: int("input_h")?,
            input_w: int("input_w")?,
            alpha: float("alpha")?,
            beta: float("beta")?,
            gamma: float("gamma")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks a dataset or image against this configuration; the error lists
    /// every differing field.
    pub fn check_compatible(&self, height: usize, width: usize, classes: usize) -> Result<()> {
        let mut diffs = Vec::new();
        if height != self.input_h {
            diffs.push(format!("height {height} vs configured {}", self.input_h));
        }
        if width != self.input_w {
            diffs.push(format!("width {width} vs configured {}", self.input_w));
        }
        if classes != self.classes {
            diffs.push(format!("classes {classes} vs configured {}", self.classes));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "input incompatible with the checkpoint: {}",
                diffs.join(", ")
            )))
        }
    }
}

pub struct ForwardResult {
    /// Per-scale logits from the raw (pre-attention) heads, at half input
    /// resolution.
    pub raw_logits: Vec<Var>,
    /// Per-scale logits from the attentive heads, at half input resolution.
    pub att_logits: Vec<Var>,
    /// Alias of `att_logits[0]`: the network's final prediction logits.
    pub logits_final: Var,
    pub guided: Vec<GuidedOutput>,
}

pub struct LossBreakdown {
    pub total: Var,
    /// Sum of the cross-entropies of all supervision heads.
    pub seg: Var,
    pub guide: Var,
    pub recon: Var,
}

pub struct MsgaNet {
    cfg: NetworkConfig,
    backbone: Backbone,
    fuse_all: ConvBlock,
    scale_fuse: Vec<ConvBlock>,
    guided: Vec<GuidedModule>,
    raw_heads: Vec<SegHead>,
    att_heads: Vec<SegHead>,
}

impl MsgaNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        cfg: &NetworkConfig,
    ) -> Result<MsgaNet> {
        cfg.validate()?;
        let c = cfg.base_width;
        let f = cfg.fusion_channels;
        let k = cfg.classes;
        let backbone = Backbone::new(store, rng, "backbone", 1, c);
        let cat_width: usize = (0..BACKBONE_STAGES).map(|s| c << s).sum();
        // The fusion convs start as smoothing channel routers rather than
        // random mixers, and the per-scale convs add a unit bias so the
        // guided modules receive features of the form 1 + (smooth data
        // term). Both choices defuse the same trap: the guided modules chain
        // elementwise products with pooled-and-upsampled reconstructions,
        // and their reconstruction/latent losses are summed squared norms,
        // so random textured features create a loss debt that no bottleneck
        // can pay — and the optimizer's cheapest fix is to zero the fused
        // features outright, permanently killing the attentive path through
        // the ReLUs. Near the multiplicative identity, smooth maps survive
        // both the products and the bottleneck, the auxiliary losses start
        // near their floor, and gradient pressure goes into the
        // segmentation objective instead.
        // The cross-scale summary reads antisymmetric channel contrasts from
        // the second stage. Those channels are rectified linear mixtures of
        // once-pooled image intensity: pooling has averaged away pixel
        // noise, upsampling has left them smooth at the granularity the
        // guided modules' pooled latent can reproduce, and their pairwise
        // differences still track the region structure of the input — the
        // contrast the summary carries is concentrated where class identity
        // changes, which is the only contrast whose auxiliary-loss cost
        // buys segmentation signal. Each contrast is split into a +/-
        // channel pair so the ReLU keeps both half-waves instead of
        // discarding the negative one.
        let fuse_all = {
            let mut taps = Vec::new();
            for p in 0..f / 2 {
                let i0 = p % (2 * c);
                let i1 = (p + 1) % (2 * c);
                taps.extend([
                    (2 * p, c + i0, 1.0),
                    (2 * p, c + i1, -1.0),
                    (2 * p + 1, c + i0, -1.0),
                    (2 * p + 1, c + i1, 1.0),
                ]);
            }
            let kernel = box_routing_kernel(f, cat_width, 3, &taps);
            ConvBlock::from_kernel(store, "fusion.all", kernel, Activation::Relu)
        };
        let mut scale_fuse = Vec::new();
        let mut guided = Vec::new();
        let mut raw_heads = Vec::new();
        let mut att_heads = Vec::new();
        for s in 0..BACKBONE_STAGES {
            let cs = c << s;
            // Each output channel rides the unit bias plus one cross-scale
            // contrast channel; the per-scale feature slice starts unwired
            // (all-zero taps, still trainable because its inputs are live)
            // and is recruited by training. Starting from the
            // multiplicative identity keeps the product recurrence in the
            // guided modules stable, and sourcing the only data term from
            // the smooth cross-scale summary keeps the initial features
            // inside the set the pooled latent can reproduce.
            let taps: Vec<_> = (0..f).map(|j| (j, cs + j, 0.05)).collect();
            let kernel = box_routing_kernel(f, cs + f, 3, &taps);
            let block = ConvBlock::from_kernel(
                store,
                &format!("fusion.s{s}"),
                kernel,
                Activation::Relu,
            );
            store.value_mut(block.bias).data_mut().fill(1.0);
            scale_fuse.push(block);
            guided.push(GuidedModule::new(store, rng, &format!("guided.s{s}"), f, cfg.steps)?);
            raw_heads.push(SegHead::new(store, rng, &format!("head.raw.s{s}"), cs, k));
            att_heads.push(SegHead::new(store, rng, &format!("head.att.s{s}"), f, k));
        }
        Ok(MsgaNet {
            cfg: cfg.clone(),
            backbone,
            fuse_all,
            scale_fuse,
            guided,
            raw_heads,
            att_heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<ForwardResult> {
        self.forward_inner(tape, store, image, false)
    }

    /// Forward pass with the fused multi-scale features replaced by zeros;
    /// used to verify that the fusion genuinely feeds every scale.
    #[cfg(test)]
    pub(crate) fn forward_fusion_ablated(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<ForwardResult> {
        self.forward_inner(tape, store, image, true)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        zero_fusion: bool,
    ) -> Result<ForwardResult> {
        if image.shape() != [1, self.cfg.input_h, self.cfg.input_w] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match the configured input [1, {}, {}]",
                image.shape(),
                self.cfg.input_h,
                self.cfg.input_w
            )));
        }
        image.assert_finite("input image")?;
        let (h2, w2) = (self.cfg.input_h / 2, self.cfg.input_w / 2);
        let img = tape.constant(image.clone());
        let feats = self.backbone.forward(tape, store, img)?;

        // Scale 0 is already at half resolution; the rest are upsampled to it.
        let mut ups = Vec::with_capacity(feats.len());
        for (s, &fv) in feats.iter().enumerate() {
            ups.push(if s == 0 { fv } else { tape.bilinear_upsample(fv, h2, w2)? });
        }

        let cat = tape.concat_channels(&ups)?;
        let mut fms = self.fuse_all.forward(tape, store, cat)?;
        if zero_fusion {
            let shape = tape.value(fms).shape().to_vec();
            fms = tape.constant(Tensor::zeros(shape));
        }

        let mut raw_logits = Vec::with_capacity(ups.len());
        let mut att_logits = Vec::with_capacity(ups.len());
        let mut guided_outs = Vec::with_capacity(ups.len());
        for s in 0..ups.len() {
            let gin_cat = tape.concat_channels(&[ups[s], fms])?;
            let gin = self.scale_fuse[s].forward(tape, store, gin_cat)?;
            let gout = self.guided[s].forward(tape, store, gin)?;
            raw_logits.push(self.raw_heads[s].forward(tape, store, ups[s])?);
            att_logits.push(self.att_heads[s].forward(tape, store, gout.features)?);
            guided_outs.push(gout);
        }
        let logits_final = att_logits[0];
        Ok(ForwardResult { raw_logits, att_logits, logits_final, guided: guided_outs })
    }

    /// Composite training loss against full-resolution labels. Supervision
    /// happens at half resolution (where all heads predict); the labels are
    /// downsampled by nearest neighbor.
    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &ForwardResult,
        labels: &LabelMap,
    ) -> Result<LossBreakdown> {
        if labels.height() != self.cfg.input_h || labels.width() != self.cfg.input_w {
            return Err(Error::Data(format!(
                "labels {}x{} do not match the configured input {}x{}",
                labels.height(),
                labels.width(),
                self.cfg.input_h,
                self.cfg.input_w
            )));
        }
        let half = downsample_labels_by2(labels)?;
        let mut seg: Option<Var> = None;
        for &logits in fwd.raw_logits.iter().chain(&fwd.att_logits) {
            let ce = tape.cross_entropy(logits, half.data())?;
            seg = Some(match seg {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let seg = seg.expect("the network always has supervision heads");
        let (guide, recon) = guided_losses_total(tape, &fwd.guided)?;
        let total = combine_weighted(
            tape,
            seg,
            guide,
            recon,
            self.cfg.alpha,
            self.cfg.beta,
            self.cfg.gamma,
        )?;
        Ok(LossBreakdown { total, seg, guide, recon })
    }

    /// Writes `net.cfg` plus all parameters into `dir`.
    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.cfg.save(&dir.join("net.cfg"))?;
        store.save_dir(dir)
    }

    /// Rebuilds a network and its parameters from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<(MsgaNet, ParamStore)> {
        let cfg = NetworkConfig::load(&dir.join("net.cfg"))?;
        let mut store = ParamStore::new();
        // The seed is irrelevant: every value is overwritten by the load.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let net = MsgaNet::new(&mut store, &mut rng, &cfg)?;
        store.load_dir(dir)?;
        Ok((net, store))
    }
}

/// `alpha*seg + beta*guide + gamma*recon`, in that association order.
pub fn combine_weighted(
    tape: &mut Tape,
    seg: Var,
    guide: Var,
    recon: Var,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Var> {
    let a = tape.scale(seg, alpha);
    let b = tape.scale(guide, beta);
    let c = tape.scale(recon, gamma);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Nearest-neighbor 2x downsampling (keeps the top-left pixel of each block).
pub fn downsample_labels_by2(labels: &LabelMap) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "label map {h}x{w} cannot be halved exactly"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            data.push(labels.at(2 * r, 2 * c));
        }
    }
    LabelMap::new(oh, ow, data)
}

/// Upsamples logits to the requested size and takes the per-pixel argmax.
pub fn predict_labels(tape: &mut Tape, logits: Var, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let up = tape.bilinear_upsample(logits, out_h, out_w)?;
    argmax_channels(tape.value(up))
}
