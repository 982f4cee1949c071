//! Segmentation quality metrics: Dice similarity coefficient (DSC), volume
//! similarity (VS), and mean surface distance (MSD), evaluated per class with
//! background (class 0) excluded from the means.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dense 2-D map of integer class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<usize>) -> Result<LabelMap> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "label map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    /// Converts a rank-2 tensor of integer-valued floats; every value must be
    /// an integer in `[0, classes)`.
    pub fn from_tensor(t: &Tensor, classes: usize) -> Result<LabelMap> {
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "label tensor must be rank 2, got {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v.fract() != 0.0 || !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "label value {v} is not a non-negative integer"
                )));
            }
            let label = v as usize;
            if label >= classes {
                return Err(Error::Data(format!(
                    "label value {label} is out of range for {classes} classes"
                )));
            }
            data.push(label);
        }
        LabelMap::new(shape[0], shape[1], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.h, self.w], data).expect("label data matches its shape")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.data[r * self.w + c]
    }
}

/// A binary mask over a 2-D grid.
#[derive(Debug, Clone)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Mask> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn from_class(labels: &LabelMap, class: usize) -> Mask {
        Mask {
            h: labels.h,
            w: labels.w,
            data: labels.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    fn same_shape(&self, other: &Mask) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Dice similarity coefficient 2|A∩B| / (|A|+|B|); both-empty counts as
/// perfect agreement (1).
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_shape(b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// Volume similarity 1 − ||A|−|B|| / (|A|+|B|); both-empty counts as 1.
pub fn vs(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_shape(b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        Ok(1.0)
    } else {
        Ok(1.0 - (na as f64 - nb as f64).abs() / (na + nb) as f64)
    }
}

/// Boundary pixels: mask pixels with at least one face-adjacent neighbor that
/// is background or outside the image.
fn boundary_points(m: &Mask) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for r in 0..m.h {
        for c in 0..m.w {
            if !m.at(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r == m.h - 1
                || c == m.w - 1
                || !m.at(r - 1, c)
                || !m.at(r + 1, c)
                || !m.at(r, c - 1)
                || !m.at(r, c + 1);
            if edge {
                pts.push((r, c));
            }
        }
    }
    pts
}

fn min_dist(p: (usize, usize), pts: &[(usize, usize)]) -> f64 {
    let mut best = f64::INFINITY;
    for &(r, c) in pts {
        let dr = p.0 as f64 - r as f64;
        let dc = p.1 as f64 - c as f64;
        let d = (dr * dr + dc * dc).sqrt();
        if d < best {
            best = d;
        }
    }
    best
}

/// Mean surface distance: boundary points of each mask are matched to their
/// nearest boundary point of the other mask (Euclidean, in pixel units), and
/// the distances are averaged over all boundary points of both masks.
/// Undefined when either mask is empty.
pub fn msd(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_shape(b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::Data(
            "mean surface distance is undefined for an empty mask".into(),
        ));
    }
    let pa = boundary_points(a);
    let pb = boundary_points(b);
    let sum_a: f64 = pa.iter().map(|&p| min_dist(p, &pb)).sum();
    let sum_b: f64 = pb.iter().map(|&p| min_dist(p, &pa)).sum();
    Ok((sum_a + sum_b) / (pa.len() + pb.len()) as f64)
}

#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub vs: f64,
    /// Absent when either mask has no pixels of this class.
    pub msd: Option<f64>,
    /// False when the class is empty in the ground truth; such rows are
    /// excluded from the means.
    pub in_mean: bool,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// One row per foreground class (1..K), in class order.
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc: Option<f64>,
    pub mean_vs: Option<f64>,
    pub mean_msd: Option<f64>,
    /// Foreground classes with empty ground truth.
    pub flagged: Vec<usize>,
}

impl MetricsReport {
    /// CSV rows (no header): one per class plus a `mean` row, with columns
    /// `sample,class,dsc,vs,msd`. Undefined values render as empty fields.
    pub fn csv_rows(&self, sample: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        for row in &self.classes {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                sample,
                row.class,
                row.dsc,
                row.vs,
                opt(row.msd)
            ));
        }
        s.push_str(&format!(
            "{},mean,{},{},{}\n",
            sample,
            opt(self.mean_dsc),
            opt(self.mean_vs),
            opt(self.mean_msd)
        ));
        s
    }
}

pub const METRICS_CSV_HEADER: &str = "sample,class,dsc,vs,msd";

/// Per-class DSC/VS/MSD between predicted and ground-truth label maps, with
/// means taken over foreground classes present in the ground truth.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MetricsReport> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::Shape(format!(
            "prediction {}x{} and ground truth {}x{} differ in shape",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    if classes < 2 {
        return Err(Error::Config(format!(
            "evaluation needs at least 2 classes, got {classes}"
        )));
    }
    for map in [pred, truth] {
        if let Some(&bad) = map.data.iter().find(|&&v| v >= classes) {
            return Err(Error::Data(format!(
                "label value {bad} is out of range for {classes} classes"
            )));
        }
    }

    let mut rows = Vec::new();
    let mut flagged = Vec::new();
    for k in 1..classes {
        let a = Mask::from_class(pred, k);
        let b = Mask::from_class(truth, k);
        let truth_empty = b.count() == 0;
        let msd_val = if a.count() > 0 && b.count() > 0 { Some(msd(&a, &b)?) } else { None };
        if truth_empty {
            flagged.push(k);
        }
        rows.push(ClassMetrics {
            class: k,
            dsc: dsc(&a, &b)?,
            vs: vs(&a, &b)?,
            msd: msd_val,
            in_mean: !truth_empty,
        });
    }

    let included: Vec<&ClassMetrics> = rows.iter().filter(|r| r.in_mean).collect();
    let mean_of = |vals: Vec<f64>| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mean_dsc = mean_of(included.iter().map(|r| r.dsc).collect());
    let mean_vs = mean_of(included.iter().map(|r| r.vs).collect());
    // The MSD mean is taken over the included classes where it is defined.
    let mean_msd = mean_of(included.iter().filter_map(|r| r.msd).collect());

    Ok(MetricsReport { classes: rows, mean_dsc, mean_vs, mean_msd, flagged })
}

/// Argmax over the channel axis of a [K,H,W] tensor; ties resolve to the
/// lowest class index.
pub fn argmax_channels(t: &Tensor) -> Result<LabelMap> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "argmax expects [K,H,W], got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if k == 0 {
        return Err(Error::Shape("argmax needs at least one channel".into()));
    }
    let mut out = vec![0usize; h * w];
    for p in 0..h * w {
        let mut best_k = 0usize;
        let mut best = t.data()[p];
        for ch in 1..k {
            let v = t.data()[ch * h * w + p];
            if v > best {
                best = v;
                best_k = ch;
            }
        }
        out[p] = best_k;
    }
    LabelMap::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut data = vec![false; h * w];
        for &(r, c) in on {
            data[r * w + c] = true;
        }
        Mask::new(h, w, data).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dsc_frozen_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);

        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);

        // |A|=4, |B|=2, |A∩B|=2 -> 2*2/(4+2) = 2/3.
        let b2 = mask(4, 4, &[(0, 0), (0, 1)]);
        assert!(close(dsc(&a, &b2).unwrap(), 2.0 / 3.0, 1e-15));

        let empty = mask(4, 4, &[]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn vs_frozen_cases() {
        let a = mask(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        let b = mask(4, 4, &[(3, 3), (3, 2), (3, 1)]);
        assert_eq!(vs(&a, &b).unwrap(), 1.0); // equal volumes, disjoint

        let c = mask(4, 4, &[(0, 0)]);
        assert_eq!(vs(&a, &c).unwrap(), 0.5); // 1 - |3-1|/4

        let empty = mask(4, 4, &[]);
        let ten: Vec<(usize, usize)> = (0..10).map(|i| (i / 4, i % 4)).collect();
        let big = mask(4, 4, &ten);
        assert_eq!(vs(&big, &empty).unwrap(), 0.0);
        assert_eq!(vs(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn msd_frozen_cases() {
        let a = mask(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(msd(&a, &a).unwrap(), 0.0);

        let p = mask(8, 8, &[(4, 1)]);
        let q = mask(8, 8, &[(4, 4)]);
        assert_eq!(msd(&p, &q).unwrap(), 3.0);

        let empty = mask(8, 8, &[]);
        assert!(matches!(msd(&a, &empty), Err(Error::Data(_))));
    }

    /// All-pairs brute force over boundary points, written independently of
    /// the production routine.
    fn msd_oracle(a: &Mask, b: &Mask) -> f64 {
        let surf = |m: &Mask| -> Vec<(f64, f64)> {
            let mut pts = Vec::new();
            for r in 0..m.h {
                for c in 0..m.w {
                    if !m.at(r, c) {
                        continue;
                    }
                    let mut exposed = r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1;
                    if !exposed {
                        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                            let (nr, nc) = ((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                            if !m.at(nr, nc) {
                                exposed = true;
                                break;
                            }
                        }
                    }
                    if exposed {
                        pts.push((r as f64, c as f64));
                    }
                }
            }
            pts
        };
        let pa = surf(a);
        let pb = surf(b);
        let nearest = |p: (f64, f64), pts: &[(f64, f64)]| {
            pts.iter()
                .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let s: f64 = pa.iter().map(|&p| nearest(p, &pb)).sum::<f64>()
            + pb.iter().map(|&p| nearest(p, &pa)).sum::<f64>();
        s / (pa.len() + pb.len()) as f64
    }

    #[test]
    fn msd_offset_squares_match_brute_force_and_hand_value() {
        let a = mask(8, 8, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(8, 8, &[(2, 0), (2, 1), (3, 0), (3, 1)]);
        let got = msd(&a, &b).unwrap();
        assert!(close(got, msd_oracle(&a, &b), 1e-12));
        // Every pixel of each 2x2 square is a boundary pixel; nearer rows are
        // 1 apart, farther rows 2 apart: (2+2+1+1)*2 / 8 = 1.5.
        assert!(close(got, 1.5, 1e-12));
    }

    fn random_mask(h: usize, w: usize, fill: f64, rng: &mut ChaCha20Rng) -> Mask {
        let data = (0..h * w).map(|_| rng.gen_bool(fill)).collect();
        Mask::new(h, w, data).unwrap()
    }

    #[test]
    fn metrics_match_independent_oracles_on_random_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut tried = 0;
        while tried < 25 {
            let a = random_mask(7, 6, 0.4, &mut rng);
            let b = random_mask(7, 6, 0.4, &mut rng);
            if a.count() == 0 || b.count() == 0 {
                continue;
            }
            tried += 1;
            let inter =
                a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count() as f64;
            let (na, nb) = (a.count() as f64, b.count() as f64);
            assert!(close(dsc(&a, &b).unwrap(), 2.0 * inter / (na + nb), 1e-15));
            assert!(close(vs(&a, &b).unwrap(), 1.0 - (na - nb).abs() / (na + nb), 1e-15));
            assert!(close(msd(&a, &b).unwrap(), msd_oracle(&a, &b), 1e-12));
        }
    }

    #[test]
    fn metrics_are_symmetric_and_translation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(78);
        for _ in 0..10 {
            let a = random_mask(6, 6, 0.35, &mut rng);
            let b = random_mask(6, 6, 0.35, &mut rng);
            assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            assert_eq!(vs(&a, &b).unwrap(), vs(&b, &a).unwrap());
            if a.count() > 0 && b.count() > 0 {
                assert_eq!(msd(&a, &b).unwrap(), msd(&b, &a).unwrap());
                // Shift both masks two rows and three columns inside a larger
                // grid: distances are unchanged.
                let shift = |m: &Mask| {
                    let mut data = vec![false; 12 * 12];
                    for r in 0..6 {
                        for c in 0..6 {
                            if m.at(r, c) {
                                data[(r + 2) * 12 + (c + 3)] = true;
                            }
                        }
                    }
                    Mask::new(12, 12, data).unwrap()
                };
                let plain = |m: &Mask| {
                    let mut data = vec![false; 12 * 12];
                    for r in 0..6 {
                        for c in 0..6 {
                            if m.at(r, c) {
                                data[r * 12 + c] = true;
                            }
                        }
                    }
                    Mask::new(12, 12, data).unwrap()
                };
                assert_eq!(
                    msd(&plain(&a), &plain(&b)).unwrap(),
                    msd(&shift(&a), &shift(&b)).unwrap()
                );
            }
        }
    }

    #[test]
    fn evaluate_perfect_prediction_scores_perfectly() {
        let labels = LabelMap::new(
            4,
            4,
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0],
        )
        .unwrap();
        let rep = evaluate(&labels, &labels, 3).unwrap();
        assert_eq!(rep.classes.len(), 2);
        for row in &rep.classes {
            assert_eq!(row.dsc, 1.0);
            assert_eq!(row.vs, 1.0);
            assert_eq!(row.msd, Some(0.0));
            assert!(row.in_mean);
        }
        assert_eq!(rep.mean_dsc, Some(1.0));
        assert_eq!(rep.mean_vs, Some(1.0));
        assert_eq!(rep.mean_msd, Some(0.0));
        assert!(rep.flagged.is_empty());
    }

    #[test]
    fn evaluate_single_pixel_distance_one_case() {
        // One class-1 pixel in each map, one pixel apart: disjoint masks of
        // equal volume whose boundaries are 1 apart.
        let mut tdata = vec![0usize; 64];
        tdata[3 * 8 + 3] = 1;
        let mut pdata = vec![0usize; 64];
        pdata[3 * 8 + 4] = 1;
        let truth = LabelMap::new(8, 8, tdata).unwrap();
        let pred = LabelMap::new(8, 8, pdata).unwrap();
        let rep = evaluate(&pred, &truth, 2).unwrap();
        assert_eq!(rep.classes[0].dsc, 0.0);
        assert_eq!(rep.classes[0].vs, 1.0);
        assert_eq!(rep.classes[0].msd, Some(1.0));
    }

    #[test]
    fn evaluate_flags_classes_empty_in_truth() {
        // Class 2 never occurs in truth; class 1 is matched except one pixel.
        let mut tdata = vec![0usize; 16];
        tdata[0] = 1;
        tdata[1] = 1;
        let mut pdata = vec![0usize; 16];
        pdata[0] = 1;
        pdata[5] = 2; // spurious prediction of an absent class
        let truth = LabelMap::new(4, 4, tdata).unwrap();
        let pred = LabelMap::new(4, 4, pdata).unwrap();
        let rep = evaluate(&pred, &truth, 3).unwrap();
        assert_eq!(rep.flagged, vec![2]);
        let c2 = &rep.classes[1];
        assert!(!c2.in_mean);
        assert_eq!(c2.dsc, 0.0); // empty truth vs nonempty prediction
        assert_eq!(c2.msd, None);
        // The means only reflect class 1.
        let c1 = &rep.classes[0];
        assert_eq!(rep.mean_dsc, Some(c1.dsc));
        assert_eq!(rep.mean_vs, Some(c1.vs));

        // Absent in both: recorded as perfect but still excluded.
        let mut one = vec![0usize; 16];
        one[3] = 1;
        let t2 = LabelMap::new(4, 4, one.clone()).unwrap();
        let p2 = LabelMap::new(4, 4, one).unwrap();
        let rep2 = evaluate(&p2, &t2, 3).unwrap();
        assert_eq!(rep2.classes[1].dsc, 1.0);
        assert_eq!(rep2.classes[1].vs, 1.0);
        assert!(!rep2.classes[1].in_mean);
        assert_eq!(rep2.mean_dsc, Some(1.0)); // class 1 only
    }

    #[test]
    fn evaluate_relabeling_permutes_rows_and_preserves_means() {
        let mut rng = ChaCha20Rng::seed_from_u64(80);
        let data: Vec<usize> = (0..36).map(|_| rng.gen_range(0..3usize)).collect();
        let pdata: Vec<usize> = (0..36).map(|_| rng.gen_range(0..3usize)).collect();
        let truth = LabelMap::new(6, 6, data.clone()).unwrap();
        let pred = LabelMap::new(6, 6, pdata.clone()).unwrap();
        let swap = |v: &[usize]| -> Vec<usize> {
            v.iter().map(|&x| match x {
                1 => 2,
                2 => 1,
                other => other,
            })
            .collect()
        };
        let truth2 = LabelMap::new(6, 6, swap(&data)).unwrap();
        let pred2 = LabelMap::new(6, 6, swap(&pdata)).unwrap();
        let r1 = evaluate(&pred, &truth, 3).unwrap();
        let r2 = evaluate(&pred2, &truth2, 3).unwrap();
        assert_eq!(r1.classes[0].dsc, r2.classes[1].dsc);
        assert_eq!(r1.classes[1].dsc, r2.classes[0].dsc);
        assert_eq!(r1.classes[0].msd, r2.classes[1].msd);
        let d = (r1.mean_dsc.unwrap() - r2.mean_dsc.unwrap()).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn evaluate_rejects_shape_mismatch_and_bad_labels() {
        let a = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        let b = LabelMap::new(2, 3, vec![0; 6]).unwrap();
        assert!(matches!(evaluate(&a, &b, 2), Err(Error::Shape(_))));
        let c = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(matches!(evaluate(&a, &c, 2), Err(Error::Data(_))));
    }

    #[test]
    fn label_map_from_tensor_validates_values() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(LabelMap::from_tensor(&t, 3).is_ok());
        // 3.0 with K=3 is out of range (valid ids are 0..2).
        assert!(matches!(LabelMap::from_tensor(&t, 2), Err(Error::Data(_))));
        let frac = Tensor::new(vec![1, 2], vec![0.0, 1.5]).unwrap();
        assert!(matches!(LabelMap::from_tensor(&frac, 3), Err(Error::Data(_))));
        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        assert!(matches!(LabelMap::from_tensor(&neg, 3), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_resolves_ties_to_the_lowest_class_and_ignores_shifts() {
        let t = Tensor::new(
            vec![3, 1, 2],
            vec![
                0.5, 0.1, // class 0
                0.5, 0.9, // class 1 (ties class 0 at pixel 0)
                0.2, 0.9, // class 2 (ties class 1 at pixel 1)
            ],
        )
        .unwrap();
        let lm = argmax_channels(&t).unwrap();
        assert_eq!(lm.data(), &[0, 1]);

        // Adding a per-pixel constant across channels leaves argmax alone.
        let mut shifted = t.clone();
        for ch in 0..3 {
            for p in 0..2 {
                shifted.data_mut()[ch * 2 + p] += [7.5, -2.0][p];
            }
        }
        let lm2 = argmax_channels(&shifted).unwrap();
        assert_eq!(lm.data(), lm2.data());
    }

    #[test]
    fn csv_rows_render_absent_values_as_empty_fields() {
        let rep = MetricsReport {
            classes: vec![ClassMetrics {
                class: 1,
                dsc: 0.5,
                vs: 1.0,
                msd: None,
                in_mean: true,
            }],
            mean_dsc: Some(0.5),
            mean_vs: Some(1.0),
            mean_msd: None,
            flagged: vec![],
        };
        let rows = rep.csv_rows("0003");
        assert_eq!(rows, "0003,1,0.5,1,\n0003,mean,0.5,1,\n");
    }
}
