//! Optimization and verification harnesses: Adam, the plateau learning-rate
//! schedule, the epoch training loop with checkpointing, and finite-difference
//! gradient checking.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::attention::{CamBlock, DualBlock, PamBlock};
use crate::data::{AugmentOp, Sample};
use crate::error::{Error, Result};
use crate::guided::GuidedModule;
use crate::metrics::evaluate;
use crate::network::{predict_labels, MsgaNet, NetworkConfig};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Settings for a finite-difference gradient check.
///
/// `h` is the central-difference step. When `samples` is `Some(k)`, only `k`
/// parameter entries (chosen by a `seed`-determined shuffle) are probed —
/// needed for large graphs where probing every entry is too slow.
pub struct GradCheck {
    pub h: f64,
    pub samples: Option<usize>,
    pub seed: u64,
}

fn eval_loss<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.value(loss).item()
}

/// Compares the tape's gradients against central finite differences.
///
/// `build` must construct the loss graph from scratch on the given tape; it is
/// re-run twice per probed parameter entry. Returns the worst relative error
/// `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e-12)` over all probed entries.
pub fn gradcheck<F>(build: &F, store: &mut ParamStore, cfg: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let base = tape.value(loss).item()?;
    if !base.is_finite() {
        return Err(Error::Numeric(
            "gradient check: loss is not finite at the unperturbed point".into(),
        ));
    }
    tape.backward(loss, store)?;
    drop(tape);

    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();

    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (pi, &id) in ids.iter().enumerate() {
        for j in 0..store.value(id).numel() {
            entries.push((pi, j));
        }
    }
    if let Some(k) = cfg.samples {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let k = k.min(entries.len());
        for i in 0..k {
            let j = rng.gen_range(i..entries.len());
            entries.swap(i, j);
        }
        entries.truncate(k);
    }

    let mut worst = 0.0f64;
    for (pi, j) in entries {
        let id = ids[pi];
        let orig = store.value(id).data()[j];
        let ga = analytic[pi][j];
        // A central difference is only trustworthy when the loss is smooth
        // across the whole bracket (-h, +h); a relu kink inside it, or
        // curvature the step cannot resolve, makes the estimate meaningless
        // regardless of the analytic value. Both conditions are visible from
        // the loss values alone — the two one-sided differences disagree — so
        // a wrong analytic gradient can never trigger the filter and hide
        // behind it. On a bad bracket the step shrinks (kinks fall outside
        // the smaller window, curvature shrinks linearly) and the entry is
        // retried; an entry whose bracket never becomes smooth is skipped
        // rather than scored on a straddled estimate.
        let mut h = cfg.h;
        for attempt in 0..3 {
            store.value_mut(id).data_mut()[j] = orig + h;
            let lp = eval_loss(build, store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let lm = eval_loss(build, store)?;
            store.value_mut(id).data_mut()[j] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check: loss is not finite when perturbing {}[{}]",
                    store.name(id),
                    j
                )));
            }
            let fd = (lp - lm) / (2.0 * h);
            // Differences cannot resolve gradients whose whole effect on the
            // loss is below its floating-point rounding: there (lp - lm) is a
            // few ulps of |loss| no matter what the true derivative is. When
            // both the analytic and the numeric value sit under that
            // resolution the entry carries no signal (e.g. a query-projection
            // bias, which shifts every pre-softmax score in a column equally
            // and so cancels exactly); it is dropped rather than scored on
            // rounding noise.
            let resolution = 32.0 * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / (2.0 * h);
            if ga.abs() <= resolution && fd.abs() <= resolution {
                break;
            }
            let fd_plus = (lp - base) / h;
            let fd_minus = (base - lm) / h;
            let smooth = (fd_plus - fd_minus).abs()
                <= 1e-4 * fd_plus.abs().max(fd_minus.abs()).max(1e-12);
            if smooth {
                let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-12);
                if rel > worst {
                    worst = rel;
                }
                break;
            }
            if attempt + 1 < 3 {
                h /= 8.0;
            }
        }
    }
    store.zero_grad();
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state (first/second moment buffers per parameter entry).
///
/// Defaults: β₁ = 0.9, β₂ = 0.99, ε = 1e-8, with bias correction.
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> AdamState {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).numel()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one Adam update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_live() {
            return Err(Error::Usage(
                "optimizer step requires gradients; run a backward pass first".into(),
            ));
        }
        let ids: Vec<ParamId> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::Usage(
                "optimizer state does not match the parameter store it was built for".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, &id) in ids.iter().enumerate() {
            let (value, grad) = store.update_view(id);
            let val = value.data_mut();
            let g = grad.data();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for j in 0..val.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                val[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        for &id in &ids {
            if !store.value(id).all_finite() {
                return Err(Error::Numeric(format!(
                    "parameter {} became non-finite during an optimizer step",
                    store.name(id)
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule
// ---------------------------------------------------------------------------

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the monitored metric (higher is better).
pub struct PlateauSchedule {
    patience: usize,
    factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> PlateauSchedule {
        PlateauSchedule { patience, factor, best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Feeds one epoch's metric; returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
            lr
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.stale = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub lr_factor: f64,
    /// Fraction of samples held out for validation. With 0, the training set
    /// itself is used as the plateau/checkpoint metric set.
    pub val_fraction: f64,
    pub augment: bool,
    pub seed: u64,
    /// When set, the best checkpoint (by validation mean DSC) is written to
    /// `<out_dir>/best/`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            patience: 50,
            lr_factor: 0.5,
            val_fraction: 0.25,
            augment: false,
            seed: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training losses over the epoch.
    pub loss: f64,
    pub seg_loss: f64,
    pub guide_loss: f64,
    pub recon_loss: f64,
    /// Mean foreground DSC over the validation set.
    pub val_dsc: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: f64,
}

impl TrainReport {
    /// CSV with columns `epoch,loss,val_dsc,lr,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_dsc,lr,seconds\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.val_dsc, r.lr, r.seconds
            ));
        }
        s
    }
}

/// Trains `net` on `samples`.
///
/// Per epoch: shuffle the training split, then for each mini-batch zero the
/// gradients, sum per-sample gradients from independent tapes (in sample
/// order), and apply one Adam step. Validation mean foreground DSC drives the
/// plateau schedule and best-checkpoint selection.
pub fn train(
    net: &MsgaNet,
    store: &mut ParamStore,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Usage("training requires at least one sample".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Usage("validation fraction must lie in [0, 1)".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Usage("learning rate must be finite and non-negative".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let val_n = (samples.len() as f64 * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = idx.split_at(val_n);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Usage(format!(
            "training split has {} samples, smaller than one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let val_set: Vec<usize> =
        if val_idx.is_empty() { train_idx.to_vec() } else { val_idx.to_vec() };

    let mut adam = AdamState::new(store, cfg.lr);
    let mut sched = PlateauSchedule::new(cfg.patience, cfg.lr_factor);
    let mut lr = cfg.lr;
    let mut report =
        TrainReport { epochs: Vec::new(), best_epoch: None, best_val_dsc: f64::NEG_INFINITY };

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng);

        let (mut sum_total, mut sum_seg, mut sum_guide, mut sum_recon) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &si in batch {
                let sample = &samples[si];
                let (image, labels) = if cfg.augment {
                    let square = sample.labels.height() == sample.labels.width();
                    let op = AugmentOp::sample(&mut rng, square);
                    (op.apply_image(&sample.image)?, op.apply_labels(&sample.labels)?)
                } else {
                    (sample.image.clone(), sample.labels.clone())
                };
                let mut tape = Tape::new();
                let fwd = net.forward(&mut tape, store, &image)?;
                let loss = net.loss(&mut tape, &fwd, &labels)?;
                let total = tape.value(loss.total).item()?;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged: loss became non-finite at epoch {epoch}"
                    )));
                }
                sum_total += total;
                sum_seg += tape.value(loss.seg).item()?;
                sum_guide += tape.value(loss.guide).item()?;
                sum_recon += tape.value(loss.recon).item()?;
                tape.backward(loss.total, store)?;
            }
            adam.step(store)?;
        }
        let n = train_idx.len() as f64;

        let mut dsc_sum = 0.0;
        for &vi in &val_set {
            let sample = &samples[vi];
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, store, &sample.image)?;
            let pred = predict_labels(
                &mut tape,
                fwd.logits_final,
                sample.labels.height(),
                sample.labels.width(),
            )?;
            let rep = evaluate(&pred, &sample.labels, net.config().classes)?;
            dsc_sum += rep.mean_dsc.unwrap_or(0.0);
        }
        let val_dsc = dsc_sum / val_set.len() as f64;

        lr = sched.observe(val_dsc, lr);
        adam.set_lr(lr);

        if val_dsc > report.best_val_dsc {
            report.best_val_dsc = val_dsc;
            report.best_epoch = Some(epoch);
            if let Some(dir) = &cfg.out_dir {
                net.save(&dir.join("best"), store)?;
            }
        }

        report.epochs.push(EpochRecord {
            epoch,
            loss: sum_total / n,
            seg_loss: sum_seg / n,
            guide_loss: sum_guide / n,
            recon_loss: sum_recon / n,
            val_dsc,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient-check batteries (shared by the CLI and the acceptance suite)
// ---------------------------------------------------------------------------

pub struct CheckReport {
    pub name: String,
    pub worst: f64,
}

/// Recommended pass threshold per battery scope.
pub fn battery_threshold(scope: &str) -> Result<f64> {
    match scope {
        "op" => Ok(1e-6),
        "block" => Ok(1e-4),
        "net" => Ok(1e-3),
        other => Err(Error::Usage(format!(
            "unknown gradient-check scope '{other}' (expected op, block, or net)"
        ))),
    }
}

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("generated data length matches shape")
}

fn check<F>(name: &str, store: &mut ParamStore, cfg: &GradCheck, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let worst = gradcheck(&build, store, cfg)?;
    Ok(CheckReport { name: name.to_string(), worst })
}

/// Nudges every registered parameter off its initial value by a small
/// uniform offset.
///
/// Several blocks initialize parameters to special values — zero attention
/// gates, identity or zero out-convs — that make a fresh module an identity
/// map. Checking derivatives only there would leave whole paths multiplied
/// away by zeros, so the block checks jitter all parameters first and probe
/// at a generic point. The offset is additive and small, which keeps the
/// fan-in-scaled magnitudes of the initialization (a wholesale re-draw at
/// the wrong scale makes deep activations, and with them the curvature of
/// the attention softmaxes, blow up).
pub(crate) fn jitter_params(store: &mut ParamStore, rng: &mut ChaCha20Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// One gradient check per differentiable tape operation.
pub fn battery_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cfg = GradCheck { h: 1e-5, samples: None, seed };
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let a = store.register("a", rand_tensor(vec![3, 4], -1.0, 1.0, &mut rng));
        let b = store.register("b", rand_tensor(vec![4, 2], -1.0, 1.0, &mut rng));
        out.push(check("matmul", &mut store, &cfg, move |tape, store| {
            let av = tape.param(store, a);
            let bv = tape.param(store, b);
            let p = tape.matmul(av, bv)?;
            Ok(tape.sum_all(p))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![3, 5], -2.0, 2.0, &mut rng));
        let w = store.register("w", rand_tensor(vec![3, 5], -1.0, 1.0, &mut rng));
        out.push(check("softmax_rows", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let wv = tape.param(store, w);
            let sm = tape.softmax_rows(xv)?;
            let weighted = tape.mul_elementwise(sm, wv)?;
            Ok(tape.sum_all(weighted))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 4, 4], -1.0, 1.0, &mut rng));
        let k = store.register("k", rand_tensor(vec![3, 2, 3, 3], -0.5, 0.5, &mut rng));
        let b = store.register("b", rand_tensor(vec![3], -0.5, 0.5, &mut rng));
        out.push(check("conv2d_stride1", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let y = tape.conv2d(xv, kv, bv, 1, 1)?;
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![1, 5, 5], -1.0, 1.0, &mut rng));
        let k = store.register("k", rand_tensor(vec![2, 1, 3, 3], -0.5, 0.5, &mut rng));
        let b = store.register("b", rand_tensor(vec![2], -0.5, 0.5, &mut rng));
        out.push(check("conv2d_stride2", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let y = tape.conv2d(xv, kv, bv, 2, 0)?;
            Ok(tape.sum_all(y))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 4, 4], -1.0, 1.0, &mut rng));
        out.push(check("avg_pool2", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let y = tape.avg_pool2(xv)?;
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 3, 3], -1.0, 1.0, &mut rng));
        out.push(check("bilinear_upsample", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let y = tape.bilinear_upsample(xv, 7, 5)?;
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 3, 4], -1.0, 1.0, &mut rng));
        out.push(check("reshape_permute", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let r = tape.reshape(xv, &[2, 12])?;
            let p = tape.permute(r, &[1, 0])?;
            let sq = tape.mul_elementwise(p, p)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let a = store.register("a", rand_tensor(vec![2, 3, 3], -1.0, 1.0, &mut rng));
        let b = store.register("b", rand_tensor(vec![1, 3, 3], -1.0, 1.0, &mut rng));
        out.push(check("concat_channels", &mut store, &cfg, move |tape, store| {
            let av = tape.param(store, a);
            let bv = tape.param(store, b);
            let c = tape.concat_channels(&[av, bv])?;
            let sq = tape.mul_elementwise(c, c)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let a = store.register("a", rand_tensor(vec![3, 3], -1.0, 1.0, &mut rng));
        let b = store.register("b", rand_tensor(vec![3, 3], -1.0, 1.0, &mut rng));
        out.push(check("add_sub_mul", &mut store, &cfg, move |tape, store| {
            let av = tape.param(store, a);
            let bv = tape.param(store, b);
            let s = tape.add(av, bv)?;
            let d = tape.sub(av, bv)?;
            let m = tape.mul_elementwise(s, d)?;
            Ok(tape.sum_all(m))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 3], -1.0, 1.0, &mut rng));
        let g = store.register("g", rand_tensor(vec![1], -1.0, 1.0, &mut rng));
        out.push(check("scale_mul_scalar", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let gv = tape.param(store, g);
            let s = tape.scale(xv, 0.75);
            let m = tape.mul_scalar(s, gv)?;
            let sq = tape.mul_elementwise(m, m)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        // Entries are kept away from zero so the finite-difference step never
        // crosses the relu kink.
        let base = rand_tensor(vec![4, 4], 0.25, 1.0, &mut rng);
        let mut signed = base;
        for (i, v) in signed.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let x = store.register("x", signed);
        out.push(check("relu", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let y = tape.relu(xv);
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let x = store.register("logits", rand_tensor(vec![3, 2, 2], -1.5, 1.5, &mut rng));
        let labels = vec![0usize, 2, 1, 0];
        out.push(check("cross_entropy", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            tape.cross_entropy(xv, &labels)
        })?);
    }
    Ok(out)
}

/// Gradient checks for the composite attention blocks.
pub fn battery_blocks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cfg = GradCheck { h: 1e-4, samples: None, seed };
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let pam = PamBlock::new(&mut store, &mut rng, "pam", 8)?;
        jitter_params(&mut store, &mut rng);
        let x = store.register("x", rand_tensor(vec![8, 3, 3], -1.0, 1.0, &mut rng));
        out.push(check("pam", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let (y, _attn) = pam.forward(tape, store, xv)?;
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let cam = CamBlock::new(&mut store, "cam");
        jitter_params(&mut store, &mut rng);
        let x = store.register("x", rand_tensor(vec![4, 3, 3], -1.0, 1.0, &mut rng));
        out.push(check("cam", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let (y, _attn) = cam.forward(tape, store, xv)?;
            let sq = tape.mul_elementwise(y, y)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let dual = DualBlock::new(&mut store, &mut rng, "dual", 8)?;
        jitter_params(&mut store, &mut rng);
        let x = store.register("x", rand_tensor(vec![8, 3, 3], 0.2, 1.2, &mut rng));
        out.push(check("dual", &mut store, &cfg, move |tape, store| {
            let xv = tape.param(store, x);
            let y = dual.forward(tape, store, xv)?;
            let sq = tape.mul_elementwise(y.out, y.out)?;
            Ok(tape.sum_all(sq))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let guided = GuidedModule::new(&mut store, &mut rng, "guided", 8, 2)?;
        jitter_params(&mut store, &mut rng);
        let x = store.register("x", rand_tensor(vec![8, 4, 4], 0.2, 1.2, &mut rng));
        // A slightly larger step than the other blocks: this stack is deep
        // and its probe loss large, so h=1e-4 sits on the roundoff floor
        // eps*|L|/h for parameters with small gradients.
        let sub = GradCheck { h: 1e-3, samples: Some(400), seed };
        out.push(check("guided", &mut store, &sub, move |tape, store| {
            let xv = tape.param(store, x);
            let g = guided.forward(tape, store, xv)?;
            let sq = tape.mul_elementwise(g.features, g.features)?;
            let s = tape.sum_all(sq);
            let with_guide = tape.add(s, g.guide_loss)?;
            tape.add(with_guide, g.recon_loss)
        })?);
    }
    Ok(out)
}

/// Gradient check of the full network loss over 10 sampled parameters.
pub fn battery_net(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let net_cfg = NetworkConfig {
        classes: 2,
        scales: 4,
        base_width: 2,
        fusion_channels: 8,
        steps: 1,
        input_h: 16,
        input_w: 16,
        alpha: 1.0,
        beta: 0.25,
        gamma: 0.1,
    };
    let mut store = ParamStore::new();
    let net = MsgaNet::new(&mut store, &mut rng, &net_cfg)?;
    let image = rand_tensor(vec![1, 16, 16], 0.05, 1.0, &mut rng);
    let label_data: Vec<usize> = (0..256).map(|_| rng.gen_range(0..2usize)).collect();
    let labels = crate::metrics::LabelMap::new(16, 16, label_data)?;
    let cfg = GradCheck { h: 1e-4, samples: Some(10), seed };
    let rep = check("net", &mut store, &cfg, move |tape, store| {
        let fwd = net.forward(tape, store, &image)?;
        let loss = net.loss(tape, &fwd, &labels)?;
        Ok(loss.total)
    })?;
    Ok(vec![rep])
}

/// Runs the battery for a scope; returns the per-item reports and threshold.
pub fn battery(scope: &str, seed: u64) -> Result<(Vec<CheckReport>, f64)> {
    let threshold = battery_threshold(scope)?;
    let reports = match scope {
        "op" => battery_ops(seed)?,
        "block" => battery_blocks(seed)?,
        "net" => battery_net(seed)?,
        _ => unreachable!("battery_threshold validated the scope"),
    };
    Ok((reports, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::nn::EncoderDecoder;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // Loss 0.5·θ with θ = 1: gradient 0.5, so the bias-corrected first
        // step is lr·0.5/(√0.25 + ε) ≈ lr.
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let tv = tape.param(&store, theta);
        let half = tape.scale(tv, 0.5);
        let loss = tape.sum_all(half);
        tape.backward(loss, &mut store).unwrap();
        let mut adam = AdamState::new(&store, 1e-3);
        adam.step(&mut store).unwrap();
        assert!(close(store.value(theta).data()[0], 0.999, 1e-9));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let frozen = store.register("frozen", Tensor::scalar(0.625));
        let active = store.register("active", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let av = tape.param(&store, active);
        let sq = tape.mul_elementwise(av, av).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store).unwrap();
        let mut adam = AdamState::new(&store, 1e-2);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(frozen).data()[0], 0.625);
        assert!(store.value(active).data()[0] < 1.0);
    }

    #[test]
    fn adam_lr_zero_changes_nothing() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.mul_elementwise(xv, xv).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store).unwrap();
        let mut adam = AdamState::new(&store, 0.0);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(x).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_drives_quadratic_near_zero() {
        // 1-D quadratic θ² from θ=1: with lr 0.01, Adam's sign-like steps
        // walk θ to the origin well within 500 steps and stay in a small
        // band around it.
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, 1e-2);
        for _ in 0..500 {
            store.zero_grad();
            let mut tape = Tape::new();
            let tv = tape.param(&store, theta);
            let sq = tape.mul_elementwise(tv, tv).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        let theta_final = store.value(theta).data()[0];
        assert!(theta_final.abs() < 0.05, "theta after 500 steps: {theta_final}");
    }

    #[test]
    fn adam_step_without_gradients_is_a_usage_error() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, 1e-3);
        assert!(matches!(adam.step(&mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn plateau_halves_after_exactly_patience_stale_epochs() {
        let mut sched = PlateauSchedule::new(50, 0.5);
        let mut lr = 1e-3;
        lr = sched.observe(0.5, lr); // first observation improves over -inf
        assert_eq!(lr, 1e-3);
        for _ in 0..49 {
            lr = sched.observe(0.5, lr); // equal metric is not an improvement
        }
        assert_eq!(lr, 1e-3);
        lr = sched.observe(0.5, lr);
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        let mut sched = PlateauSchedule::new(10, 0.5);
        let mut lr = 1.0;
        lr = sched.observe(0.1, lr);
        for _ in 0..9 {
            lr = sched.observe(0.1, lr);
        }
        assert_eq!(lr, 1.0);
        lr = sched.observe(0.2, lr); // improvement resets the counter
        for _ in 0..9 {
            lr = sched.observe(0.2, lr);
        }
        assert_eq!(lr, 1.0);
        lr = sched.observe(0.2, lr);
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn plateau_never_raises_lr() {
        let mut sched = PlateauSchedule::new(2, 0.5);
        let mut lr = 1.0;
        let mut last = lr;
        for i in 0..20 {
            lr = sched.observe((i % 3) as f64, lr);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn gradcheck_rejects_nonfinite_loss() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(1e200));
        let build = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.param(store, x);
            let sq = tape.mul_elementwise(xv, xv)?;
            Ok(tape.sum_all(sq))
        };
        let err = gradcheck(&build, &mut store, &GradCheck { h: 1e-5, samples: None, seed: 0 });
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn gradcheck_sampled_subset_runs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(vec![2, 5], -1.0, 1.0, &mut rng));
        let build = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.param(store, x);
            let sq = tape.mul_elementwise(xv, xv)?;
            Ok(tape.sum_all(sq))
        };
        let worst =
            gradcheck(&build, &mut store, &GradCheck { h: 1e-5, samples: Some(3), seed: 1 })
                .unwrap();
        assert!(worst < 1e-6, "sampled gradcheck worst {worst}");
    }

    #[test]
    fn gradcheck_flags_a_dependency_invisible_to_backward() {
        // The loss reads the parameter twice: once through the tape (visible
        // to backward) and once baked into a constant (invisible, but the
        // finite differences rebuild it after each perturbation and see it).
        // This mimics a backward pass that forgot a path: L = sum(w*w) but
        // the analytic gradient only accounts for one factor, so the checker
        // must report a large error, not filter the entries away.
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w = store.register("w", rand_tensor(vec![4], 0.5, 1.5, &mut rng));
        let build = |tape: &mut Tape, store: &ParamStore| {
            let frozen = tape.constant(store.value(w).clone());
            let live = tape.param(store, w);
            let prod = tape.mul_elementwise(live, frozen)?;
            Ok(tape.sum_all(prod))
        };
        let worst =
            gradcheck(&build, &mut store, &GradCheck { h: 1e-5, samples: None, seed: 0 })
                .unwrap();
        assert!(
            (worst - 0.5).abs() < 1e-3,
            "missing-path bug should score rel err ~0.5, got {worst}"
        );
    }

    #[test]
    fn gradcheck_skips_entries_parked_exactly_on_a_relu_kink() {
        // At w = 0 the loss relu(w)*c is not differentiable: the analytic
        // convention picks the flat side while central differences straddle
        // the corner. The bracket is visibly non-smooth from the loss values
        // alone, so the entry must be dropped instead of scored.
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::new(vec![1], vec![0.0]).unwrap());
        let c = store.register("c", Tensor::new(vec![1], vec![3.0]).unwrap());
        let build = |tape: &mut Tape, store: &ParamStore| {
            let wv = tape.param(store, w);
            let cv = tape.param(store, c);
            let r = tape.relu(wv);
            let prod = tape.mul_elementwise(r, cv)?;
            Ok(tape.sum_all(prod))
        };
        let worst =
            gradcheck(&build, &mut store, &GradCheck { h: 1e-4, samples: None, seed: 0 })
                .unwrap();
        assert!(worst < 1e-10, "kink-straddled entry should be skipped, got {worst}");
    }

    #[test]
    fn encoder_decoder_reconstruction_training_reduces_loss() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let encdec = EncoderDecoder::new(&mut store, &mut rng, "ae", 2);
        let x = rand_tensor(vec![2, 8, 8], 0.1, 1.0, &mut rng);
        let mut adam = AdamState::new(&store, 1e-3);
        let mut losses = Vec::new();
        for _ in 0..200 {
            store.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (_latent, recon) = encdec.forward(&mut tape, &store, xv).unwrap();
            let d = tape.sub(xv, recon).unwrap();
            let sq = tape.mul_elementwise(d, d).unwrap();
            let loss = tape.sum_all(sq);
            losses.push(tape.value(loss).item().unwrap());
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(last < first, "reconstruction loss did not decrease: {first} -> {last}");
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<Sample> {
        generate(&SyntheticSpec {
            n,
            height: 16,
            width: 16,
            classes: 2,
            sigma: 0.02,
            seed,
        })
        .unwrap()
    }

    fn tiny_net(seed: u64) -> (MsgaNet, ParamStore) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cfg = NetworkConfig {
            classes: 2,
            scales: 4,
            base_width: 2,
            fusion_channels: 8,
            steps: 1,
            input_h: 16,
            input_w: 16,
            alpha: 1.0,
            beta: 0.25,
            gamma: 0.1,
        };
        let mut store = ParamStore::new();
        let net = MsgaNet::new(&mut store, &mut rng, &cfg).unwrap();
        (net, store)
    }

    #[test]
    fn train_smoke_produces_one_record_per_epoch() {
        let samples = tiny_dataset(8, 3);
        let (net, mut store) = tiny_net(4);
        let cfg = TrainConfig {
            epochs: 2,
            val_fraction: 0.0,
            seed: 7,
            ..TrainConfig::default()
        };
        let report = train(&net, &mut store, &samples, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 2);
        for r in &report.epochs {
            assert!(r.loss.is_finite() && r.loss > 0.0);
            assert!((0.0..=1.0).contains(&r.val_dsc));
        }
        assert!(report.best_epoch.is_some());
        let csv = report.to_csv();
        assert!(csv.starts_with("epoch,loss,val_dsc,lr,seconds\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn train_rejects_dataset_smaller_than_one_batch() {
        let samples = tiny_dataset(4, 3);
        let (net, mut store) = tiny_net(4);
        let cfg = TrainConfig { epochs: 1, val_fraction: 0.0, ..TrainConfig::default() };
        assert!(matches!(
            train(&net, &mut store, &samples, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn train_zero_epochs_yields_empty_report_and_no_checkpoint() {
        let samples = tiny_dataset(8, 3);
        let (net, mut store) = tiny_net(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            val_fraction: 0.0,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let report = train(&net, &mut store, &samples, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert!(report.best_epoch.is_none());
        assert!(!dir.path().join("best").exists());
    }

    #[test]
    fn battery_ops_passes_its_threshold() {
        let (reports, threshold) = battery("op", 0).unwrap();
        assert!(reports.len() >= 10);
        for r in &reports {
            assert!(r.worst < threshold, "{} worst {}", r.name, r.worst);
        }
    }

    #[test]
    fn battery_rejects_unknown_scope() {
        assert!(matches!(battery("all", 0), Err(Error::Usage(_))));
    }
}
