//! Scalar training objectives and their analytic gradients.
//!
//! Segmentation is supervised by multi-class cross-entropy plus a Dice term;
//! domain alignment uses least-squares adversarial losses on sigmoid-squashed
//! discriminator scores (source labeled 0, target labeled 1). Each loss comes
//! in a value-only form and a `*_with_grad` form used by the graph's loss
//! nodes.
//!
//! Label conventions: maps are `[N, H, W]` of u8, class ids run 1..=C with
//! channel `id-1` holding that class's logit/probability, and pixels whose
//! label equals the ignore value are excluded from every sum.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

/// Smoothing added to Dice numerators and denominators so absent classes do
/// not divide by zero.
pub const DICE_EPS: f64 = 1e-6;

/// Weights of the two adversarial terms in the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            mu: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be a non-negative finite number, got {}",
                self.lambda
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "mu must be a non-negative finite number, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// How the Dice loss aggregates classes: `Macro` averages per-class Dice over
/// classes with ground-truth support; `Global` pools every class and pixel
/// into a single overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    #[default]
    Macro,
    Global,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct MceOut {
    pub value: f64,
    pub grad: Tensor,
    /// Number of pixels that entered the mean; 0 means the loss is defined
    /// as 0 (the no-labeled-pixels rule).
    pub labeled: usize,
}

fn check_extents(c: usize, map: (usize, usize, usize, usize), labels: &Array3<u8>) -> Result<()> {
    let (n, _, h, w) = map;
    if labels.dim() != (n, h, w) {
        return Err(Error::Argument(format!(
            "label map {:?} does not match prediction extent ({n}, {h}, {w})",
            labels.dim()
        )));
    }
    if c == 0 {
        return Err(Error::Argument("prediction has zero classes".into()));
    }
    Ok(())
}

/// Resolves a label value to a class channel, or `None` for ignored pixels.
fn label_channel(label: u8, num_classes: usize, ignore: u8) -> Result<Option<usize>> {
    if label == ignore {
        return Ok(None);
    }
    if label == 0 || label as usize > num_classes {
        return Err(Error::Data(format!(
            "label {label} outside valid class range 1..={num_classes}"
        )));
    }
    Ok(Some(label as usize - 1))
}

/// Mean negative log softmax probability of the true class over labeled
/// pixels. Returns 0 when no pixel is labeled.
pub fn mce_loss(logits: &Tensor, labels: &Array3<u8>, ignore: u8) -> Result<f64> {
    Ok(mce_with_grad(logits, labels, ignore)?.value)
}

/// Cross-entropy plus its gradient with respect to the logits.
pub fn mce_with_grad(logits: &Tensor, labels: &Array3<u8>, ignore: u8) -> Result<MceOut> {
    let (n, c, h, w) = logits.dim();
    check_extents(c, logits.dim(), labels)?;
    let mut grad = Tensor::zeros(logits.dim());
    let mut total = 0.0_f64;
    let mut labeled = 0_usize;
    // First pass counts labeled pixels (the mean divisor), validating labels.
    for i in 0..n {
        for r in 0..h {
            for col in 0..w {
                if label_channel(labels[[i, r, col]], c, ignore)?.is_some() {
                    labeled += 1;
                }
            }
        }
    }
    if labeled == 0 {
        return Ok(MceOut {
            value: 0.0,
            grad,
            labeled: 0,
        });
    }
    let m = labeled as f64;
    for i in 0..n {
        for r in 0..h {
            for col in 0..w {
                let Some(true_ch) = label_channel(labels[[i, r, col]], c, ignore)? else {
                    continue;
                };
                // Stable log-softmax via max subtraction.
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(logits[[i, ch, r, col]]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    sum += (logits[[i, ch, r, col]] - max).exp();
                }
                let log_sum = sum.ln() + max;
                total -= logits[[i, true_ch, r, col]] - log_sum;
                for ch in 0..c {
                    let p = (logits[[i, ch, r, col]] - log_sum).exp();
                    let y = if ch == true_ch { 1.0 } else { 0.0 };
                    grad[[i, ch, r, col]] = (p - y) / m;
                }
            }
        }
    }
    Ok(MceOut {
        value: total / m,
        grad,
        labeled,
    })
}

/// Dice loss on a probability map. See [`DiceMode`] for the aggregation
/// variants; both exclude ignored pixels from all sums.
pub fn dice_loss(probs: &Tensor, labels: &Array3<u8>, ignore: u8, mode: DiceMode) -> Result<f64> {
    Ok(dice_with_grad(probs, labels, ignore, mode)?.0)
}

/// Dice loss plus its gradient with respect to the probabilities.
pub fn dice_with_grad(
    probs: &Tensor,
    labels: &Array3<u8>,
    ignore: u8,
    mode: DiceMode,
) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = probs.dim();
    check_extents(c, probs.dim(), labels)?;
    // Per-class intersection, ground-truth count, and predicted mass over
    // labeled pixels.
    let mut inter = vec![0.0_f64; c];
    let mut gt_count = vec![0.0_f64; c];
    let mut pred_mass = vec![0.0_f64; c];
    for i in 0..n {
        for r in 0..h {
            for col in 0..w {
                let Some(true_ch) = label_channel(labels[[i, r, col]], c, ignore)? else {
                    continue;
                };
                gt_count[true_ch] += 1.0;
                inter[true_ch] += probs[[i, true_ch, r, col]];
                for ch in 0..c {
                    pred_mass[ch] += probs[[i, ch, r, col]];
                }
            }
        }
    }
    let mut grad = Tensor::zeros(probs.dim());
    match mode {
        DiceMode::Macro => {
            let supported: Vec<usize> = (0..c).filter(|&k| gt_count[k] > 0.0).collect();
            if supported.is_empty() {
                // No labeled pixels at all: loss 0, like the MCE rule.
                return Ok((0.0, grad));
            }
            let kn = supported.len() as f64;
            let mut mean_dice = 0.0;
            let mut coeff = vec![(0.0_f64, 0.0_f64); c]; // (den, 2I+eps) per class
            for &k in &supported {
                let den = gt_count[k] + pred_mass[k] + DICE_EPS;
                let num = 2.0 * inter[k] + DICE_EPS;
                mean_dice += num / den;
                coeff[k] = (den, num);
            }
            mean_dice /= kn;
            for i in 0..n {
                for r in 0..h {
                    for col in 0..w {
                        let Some(true_ch) = label_channel(labels[[i, r, col]], c, ignore)? else {
                            continue;
                        };
                        for &k in &supported {
                            let (den, num) = coeff[k];
                            let y = if k == true_ch { 1.0 } else { 0.0 };
                            // d(1 - mean dice)/dp = -(2y*den - num) / den^2 / |K|
                            grad[[i, k, r, col]] = -(2.0 * y * den - num) / (den * den) / kn;
                        }
                    }
                }
            }
            Ok((1.0 - mean_dice, grad))
        }
        DiceMode::Global => {
            let total_inter: f64 = inter.iter().sum();
            let total_gt: f64 = gt_count.iter().sum();
            let total_pred: f64 = pred_mass.iter().sum();
            if total_gt == 0.0 {
                return Ok((0.0, grad));
            }
            let den = total_gt + total_pred + DICE_EPS;
            let num = 2.0 * total_inter + DICE_EPS;
            for i in 0..n {
                for r in 0..h {
                    for col in 0..w {
                        let Some(true_ch) = label_channel(labels[[i, r, col]], c, ignore)? else {
                            continue;
                        };
                        for ch in 0..c {
                            let y = if ch == true_ch { 1.0 } else { 0.0 };
                            grad[[i, ch, r, col]] = -(2.0 * y * den - num) / (den * den);
                        }
                    }
                }
            }
            Ok((1.0 - num / den, grad))
        }
    }
}

/// Discriminator objective: source scores pushed to 0, target scores to 1,
/// each term a mean of squared sigmoid error over its own map.
pub fn lsgan_d_loss(src_scores: &Tensor, tgt_scores: &Tensor) -> f64 {
    lsgan_d_with_grad(src_scores, tgt_scores).0
}

pub fn lsgan_d_with_grad(src_scores: &Tensor, tgt_scores: &Tensor) -> (f64, Tensor, Tensor) {
    let (src_val, src_grad) = lsgan_half(src_scores, 0.0);
    let (tgt_val, tgt_grad) = lsgan_half(tgt_scores, 1.0);
    (src_val + tgt_val, src_grad, tgt_grad)
}

/// Generator objective on target scores: pulls them toward the source label
/// (0), making target features indistinguishable from source features.
pub fn lsgan_g_loss(tgt_scores: &Tensor) -> f64 {
    lsgan_g_with_grad(tgt_scores).0
}

pub fn lsgan_g_with_grad(tgt_scores: &Tensor) -> (f64, Tensor) {
    lsgan_half(tgt_scores, 0.0)
}

/// Mean of (sigmoid(score) - label)^2 with its score gradient.
fn lsgan_half(scores: &Tensor, label: f64) -> (f64, Tensor) {
    assert!(!scores.is_empty(), "score map must be non-empty");
    let len = scores.len() as f64;
    let mut value = 0.0;
    let grad = scores.mapv(|s| {
        let sg = sigmoid(s);
        let diff = sg - label;
        value += diff * diff;
        2.0 * diff * sg * (1.0 - sg) / len
    });
    (value / len, grad)
}

/// Total objective: `seg + lambda * g_feat + mu * g_cat`. NaN or infinite
/// components abort with the offending term named.
pub fn total_loss(seg: f64, g_feat: f64, g_cat: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("seg", seg), ("g_feat", g_feat), ("g_cat", g_cat)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    let total = seg + w.lambda * g_feat + w.mu * g_cat;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("total loss is {total}")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: (usize, usize, usize, usize)) -> Tensor {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_shape_vec(shape, data).unwrap()
    }

    fn rand_probs(rng: &mut ChaCha20Rng, shape: (usize, usize, usize, usize)) -> Tensor {
        crate::nn::kernels::softmax_channels(&rand_tensor(rng, shape))
    }

    fn rand_labels(rng: &mut ChaCha20Rng, shape: (usize, usize, usize), c: u8) -> Array3<u8> {
        let len = shape.0 * shape.1 * shape.2;
        // Includes 0s, which are ignored under the default convention.
        let data: Vec<u8> = (0..len).map(|_| rng.random_range(0..=c)).collect();
        Array3::from_shape_vec(shape, data).unwrap()
    }

    #[test]
    fn mce_uniform_logits_give_log_class_count() {
        let logits = Tensor::zeros((1, 13, 4, 4));
        let labels = Array3::from_elem((1, 4, 4), 5u8);
        let v = mce_loss(&logits, &labels, 0).unwrap();
        assert!((v - 13.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mce_confident_correct_prediction_is_near_zero() {
        let mut logits = Tensor::zeros((1, 3, 2, 2));
        let labels = Array3::from_elem((1, 2, 2), 2u8);
        for r in 0..2 {
            for c in 0..2 {
                logits[[0, 1, r, c]] = 40.0;
            }
        }
        assert!(mce_loss(&logits, &labels, 0).unwrap() < 1e-12);
    }

    #[test]
    fn mce_all_ignored_is_zero_with_flag() {
        let logits = Tensor::zeros((1, 3, 2, 2));
        let labels = Array3::zeros((1, 2, 2));
        let out = mce_with_grad(&logits, &labels, 0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.labeled, 0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mce_rejects_out_of_range_labels() {
        let logits = Tensor::zeros((1, 3, 1, 1));
        let labels = Array3::from_elem((1, 1, 1), 4u8);
        assert!(matches!(
            mce_loss(&logits, &labels, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let labels = rand_labels(&mut rng, (1, 6, 6), 4);
        let mut probs = Tensor::zeros((1, 4, 6, 6));
        for r in 0..6 {
            for c in 0..6 {
                let l = labels[[0, r, c]];
                // One-hot on the true class; ignored pixels get arbitrary mass.
                let ch = if l == 0 { 0 } else { l as usize - 1 };
                probs[[0, ch, r, c]] = 1.0;
            }
        }
        for mode in [DiceMode::Macro, DiceMode::Global] {
            let v = dice_loss(&probs, &labels, 0, mode).unwrap();
            assert!(v.abs() < 1e-5, "mode {mode:?}: {v}");
        }
    }

    #[test]
    fn dice_disjoint_support_is_one() {
        // GT all class 1, prediction puts all mass on class 2.
        let labels = Array3::from_elem((1, 4, 4), 1u8);
        let mut probs = Tensor::zeros((1, 2, 4, 4));
        probs.slice_mut(ndarray::s![0, 1, .., ..]).fill(1.0);
        for mode in [DiceMode::Macro, DiceMode::Global] {
            let v = dice_loss(&probs, &labels, 0, mode).unwrap();
            assert!((v - 1.0).abs() < 1e-5, "mode {mode:?}: {v}");
        }
    }

    #[test]
    fn dice_single_pixel_halves_match_hand_value() {
        // One labeled pixel of class 1 with probabilities (0.5, 0.5):
        // 1 - 2*0.5/(1 + 0.5) = 1/3. Class 2 has no support and is excluded.
        let labels = Array3::from_elem((1, 1, 1), 1u8);
        let probs = Tensor::from_elem((1, 2, 1, 1), 0.5);
        let v = dice_loss(&probs, &labels, 0, DiceMode::Macro).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn dice_is_class_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let probs = rand_probs(&mut rng, (1, 4, 5, 5));
        let labels = rand_labels(&mut rng, (1, 5, 5), 4);
        // Swap classes 1 and 3 in both probs and labels.
        let perm = [2usize, 1, 0, 3];
        let mut probs_p = probs.clone();
        for (to, &from) in perm.iter().enumerate() {
            probs_p
                .slice_mut(ndarray::s![.., to, .., ..])
                .assign(&probs.slice(ndarray::s![.., from, .., ..]));
        }
        let labels_p = labels.mapv(|l| match l {
            1 => 3,
            3 => 1,
            other => other,
        });
        for mode in [DiceMode::Macro, DiceMode::Global] {
            let a = dice_loss(&probs, &labels, 0, mode).unwrap();
            let b = dice_loss(&probs_p, &labels_p, 0, mode).unwrap();
            assert!((a - b).abs() < 1e-12, "mode {mode:?}: {a} vs {b}");
        }
    }

    #[test]
    fn dice_flags_imbalance_that_mce_misses() {
        // 99 pixels of class 1 predicted confidently right, 1 pixel of
        // class 2 predicted confidently wrong: cross-entropy stays small,
        // Dice stays near 0.5.
        let mut labels = Array3::from_elem((1, 10, 10), 1u8);
        labels[[0, 9, 9]] = 2;
        let mut probs = Tensor::zeros((1, 2, 10, 10));
        probs.slice_mut(ndarray::s![0, 0, .., ..]).fill(0.99);
        probs.slice_mut(ndarray::s![0, 1, .., ..]).fill(0.01);
        let dice = dice_loss(&probs, &labels, 0, DiceMode::Macro).unwrap();
        let logits = probs.mapv(f64::ln);
        let mce = mce_loss(&logits, &labels, 0).unwrap();
        assert!(dice >= 0.49, "dice {dice}");
        assert!(mce <= 0.1, "mce {mce}");
    }

    #[test]
    fn lsgan_closed_forms() {
        let zeros = Tensor::zeros((1, 1, 2, 2)); // sigmoid = 0.5
        assert!((lsgan_d_loss(&zeros, &zeros) - 0.5).abs() < 1e-9);
        assert!((lsgan_g_loss(&zeros) - 0.25).abs() < 1e-9);
        // Saturated scores: sigmoid(±60) is 0/1 to far below 1e-9.
        let lo = Tensor::from_elem((1, 1, 2, 2), -60.0);
        let hi = Tensor::from_elem((1, 1, 2, 2), 60.0);
        assert!(lsgan_d_loss(&lo, &hi).abs() < 1e-9); // perfect discriminator
        assert!((lsgan_d_loss(&hi, &lo) - 2.0).abs() < 1e-9); // worst case
        assert!(lsgan_g_loss(&lo).abs() < 1e-9);
        assert!((lsgan_g_loss(&hi) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_hand_sum_and_nan_detection() {
        let w = LossWeights::default();
        let v = total_loss(1.0, 0.2, 0.4, &w).unwrap();
        assert!((v - 1.3).abs() < 1e-12);
        let zero = LossWeights { lambda: 0.0, mu: 0.0 };
        assert_eq!(total_loss(0.7, 9.9, 9.9, &zero).unwrap(), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let err = total_loss(1.0, f64::NAN, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("g_feat"), "{err}");
    }

    /// Central finite differences over every loss input; mirrors the
    /// acceptance gradient criterion with a tighter step.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for &classes in &[2usize, 13] {
            let shape = (1, classes, 4, 4);
            let logits = rand_tensor(&mut rng, shape);
            let labels = rand_labels(&mut rng, (1, 4, 4), classes as u8);
            let out = mce_with_grad(&logits, &labels, 0).unwrap();
            check_fd(
                &logits,
                &out.grad,
                1e-5,
                1e-6,
                |t| mce_loss(t, &labels, 0).unwrap(),
                "mce",
            );
            let probs = rand_probs(&mut rng, shape);
            for mode in [DiceMode::Macro, DiceMode::Global] {
                let (_, grad) = dice_with_grad(&probs, &labels, 0, mode).unwrap();
                check_fd(
                    &probs,
                    &grad,
                    1e-5,
                    1e-6,
                    |t| dice_loss(t, &labels, 0, mode).unwrap(),
                    "dice",
                );
            }
        }
        let src = rand_tensor(&mut rng, (1, 1, 4, 4));
        let tgt = rand_tensor(&mut rng, (1, 1, 4, 4));
        let (_, gs, gt) = lsgan_d_with_grad(&src, &tgt);
        check_fd(&src, &gs, 1e-5, 1e-8, |t| lsgan_d_loss(t, &tgt), "lsgan_d/src");
        check_fd(&tgt, &gt, 1e-5, 1e-8, |t| lsgan_d_loss(&src, t), "lsgan_d/tgt");
        let (_, gg) = lsgan_g_with_grad(&tgt);
        check_fd(&tgt, &gg, 1e-5, 1e-8, lsgan_g_loss, "lsgan_g");
    }

    fn check_fd(
        x: &Tensor,
        grad: &Tensor,
        step: f64,
        tol: f64,
        f: impl Fn(&Tensor) -> f64,
        tag: &str,
    ) {
        for idx in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += step;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[idx] -= step;
            let num = (f(&plus) - f(&minus)) / (2.0 * step);
            let ana = grad.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= tol * (1.0 + num.abs()),
                "{tag}[{idx}]: numeric {num} vs analytic {ana}"
            );
        }
    }
}
