//! Self-attention over positions and over channels, plus the block that
//! fuses both paths.
//!
//! Both attention maps are column-stochastic: entry (i, j) is the weight of
//! source i in the mixture that feeds target j, so every column sums to 1.
//! Each path is gated by a learned scalar that starts at zero, which makes a
//! freshly initialized position or channel block an identity map over its
//! input; the combined block starts at the constant one, the neutral element
//! of the feature-gating product applied downstream.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvBlock};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Position attention: mixes feature vectors across spatial locations.
/// Query/key project to C/8 channels, value keeps C.
#[derive(Debug, Clone)]
pub struct PamBlock {
    query: ConvBlock,
    key: ConvBlock,
    value: ConvBlock,
    pub gate: ParamId,
}

impl PamBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, c: usize) -> Result<PamBlock> {
        if c % 8 != 0 {
            return Err(Error::Config(format!(
                "position attention needs channels divisible by 8, got {c}"
            )));
        }
        let reduced = c / 8;
        Ok(PamBlock {
            query: ConvBlock::new(store, rng, &format!("{name}.query"), c, reduced, 1, Activation::Linear),
            key: ConvBlock::new(store, rng, &format!("{name}.key"), c, reduced, 1, Activation::Linear),
            value: ConvBlock::new(store, rng, &format!("{name}.value"), c, c, 1, Activation::Linear),
            gate: store.register(&format!("{name}.gate"), Tensor::scalar(0.0)),
        })
    }

    /// Returns (out, attn) with out = gate * (value @ attn) + f and attn of
    /// shape (H*W) x (H*W), columns summing to 1.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let shape = tape.value(f).shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("position attention expects [C,H,W], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = h * w;
        let reduced = c / 8;

        let q = self.query.forward(tape, store, f)?;
        let q = tape.reshape(q, &[reduced, n])?;
        let q = tape.permute(q, &[1, 0])?;
        let k = self.key.forward(tape, store, f)?;
        let k = tape.reshape(k, &[reduced, n])?;

        // logits[i][j] = query_i . key_j; normalize over sources i for each
        // target j by softmaxing the transposed matrix row-wise.
        let logits = tape.matmul(q, k)?;
        let logits_t = tape.permute(logits, &[1, 0])?;
        let attn_t = tape.softmax_rows(logits_t)?;
        let attn = tape.permute(attn_t, &[1, 0])?;

        let v = self.value.forward(tape, store, f)?;
        let v = tape.reshape(v, &[c, n])?;
        let mixed = tape.matmul(v, attn)?;
        let mixed = tape.reshape(mixed, &[c, h, w])?;
        let gate = tape.param(store, self.gate);
        let gated = tape.mul_scalar(mixed, gate)?;
        let out = tape.add(gated, f)?;
        Ok((out, attn))
    }
}

/// Channel attention: mixes whole channel maps using their Gram similarity.
/// No projections; the only parameter is the gate scalar.
#[derive(Debug, Clone)]
pub struct CamBlock {
    pub gate: ParamId,
}

impl CamBlock {
    pub fn new(store: &mut ParamStore, name: &str) -> CamBlock {
        CamBlock { gate: store.register(&format!("{name}.gate"), Tensor::scalar(0.0)) }
    }

    /// Returns (out, attn) with attn of shape C x C, columns summing to 1.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let shape = tape.value(f).shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("channel attention expects [C,H,W], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = h * w;

        let fm = tape.reshape(f, &[c, n])?;
        let ft = tape.permute(fm, &[1, 0])?;
        let gram = tape.matmul(fm, ft)?;
        let gram_t = tape.permute(gram, &[1, 0])?;
        let attn_t = tape.softmax_rows(gram_t)?;
        let attn = tape.permute(attn_t, &[1, 0])?;

        let mixed = tape.matmul(attn_t, fm)?;
        let mixed = tape.reshape(mixed, &[c, h, w])?;
        let gate = tape.param(store, self.gate);
        let gated = tape.mul_scalar(mixed, gate)?;
        let out = tape.add(gated, f)?;
        Ok((out, attn))
    }
}

pub struct DualOutput {
    pub out: Var,
    pub pam_attn: Var,
    pub cam_attn: Var,
}

/// Runs both attention paths on the same features, pushes each through its
/// own 3x3 conv, and sums the results.
#[derive(Debug, Clone)]
pub struct DualBlock {
    pub pam: PamBlock,
    pub cam: CamBlock,
    out_pam: ConvBlock,
    out_cam: ConvBlock,
}

impl DualBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, c: usize) -> Result<DualBlock> {
        // Both out-convs are linear (a center-tap kernel must reproduce its
        // input exactly, signs included). The fresh block computes the
        // complement pair x + (1 - x) = 1: the position-path conv passes
        // its input through, the channel-path conv negates it and adds one
        // via its bias (the gates inside both attention paths start at
        // zero, so each path still sees the raw features). A block that
        // starts at the constant one is the multiplicative identity for the
        // gating product downstream — refinement steps begin as gentle
        // smoothing instead of repeated self-multiplication, which would
        // either square feature contrast into the reconstruction losses or
        // scramble it (random init). Training grows both convs from there.
        let out_cam =
            ConvBlock::zero_init(store, &format!("{name}.out_cam"), c, c, 3, Activation::Linear);
        {
            let kt = store.value_mut(out_cam.kernel);
            for ch in 0..c {
                kt.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] = -1.0;
            }
            store.value_mut(out_cam.bias).data_mut().fill(1.0);
        }
        Ok(DualBlock {
            pam: PamBlock::new(store, rng, &format!("{name}.pam"), c)?,
            cam: CamBlock::new(store, &format!("{name}.cam")),
            out_pam: ConvBlock::identity_init(store, &format!("{name}.out_pam"), c, 3, Activation::Linear),
            out_cam,
        })
    }

    /// Test hook: makes both out-convs exact identities (center tap 1,
    /// zero bias).
    pub fn set_identity_out_convs(&self, store: &mut ParamStore) {
        for conv in [&self.out_pam, &self.out_cam] {
            let kt = store.value_mut(conv.kernel);
            let c = kt.shape()[0];
            kt.data_mut().fill(0.0);
            for ch in 0..c {
                // kernel[ch][ch][1][1] = 1 for a 3x3 kernel.
                let idx = ((ch * c + ch) * 3 + 1) * 3 + 1;
                kt.data_mut()[idx] = 1.0;
            }
            store.value_mut(conv.bias).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<DualOutput> {
        let (p_out, pam_attn) = self.pam.forward(tape, store, f)?;
        let (c_out, cam_attn) = self.cam.forward(tape, store, f)?;
        let p_conv = self.out_pam.forward(tape, store, p_out)?;
        let c_conv = self.out_cam.forward(tape, store, c_out)?;
        let out = tape.add(p_conv, c_conv)?;
        Ok(DualOutput { out, pam_attn, cam_attn })
    }
}
