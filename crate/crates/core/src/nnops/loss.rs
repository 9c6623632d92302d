use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: Tensor,
    /// Pixels that contributed (label != ignore).
    pub counted: usize,
}

/// Mean per-pixel softmax cross-entropy over `[n_C, H, W]` logits.
///
/// Pixels labelled `ignore` add neither loss nor gradient; an image with no
/// counted pixels has loss 0 and zero gradient.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &LabelMap,
    ignore: u8,
) -> Result<CrossEntropy> {
    let (classes, h, w) = logits.chw()?;
    if labels.dims() != (h, w) {
        return Err(Error::shape(format!(
            "labels are {}x{} but logits are {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    let plane = h * w;
    let z = logits.data();
    let mut grad = vec![0.0; z.len()];
    // Compensated sum: the loss is differenced at tiny steps by gradcheck.
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    let mut counted = 0usize;
    let mut probs = vec![0.0; classes];
    for (p, &label) in labels.as_slice().iter().enumerate() {
        if label == ignore {
            continue;
        }
        let label = label as usize;
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} at pixel {p} is outside 0..{classes}"
            )));
        }
        let max = (0..classes)
            .map(|c| z[c * plane + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for (c, pr) in probs.iter_mut().enumerate() {
            *pr = (z[c * plane + p] - max).exp();
            norm += *pr;
        }
        let term = norm.ln() - (z[label * plane + p] - max);
        let t = total + term;
        carry += if total.abs() >= term.abs() {
            (total - t) + term
        } else {
            (term - t) + total
        };
        total = t;
        for (c, pr) in probs.iter().enumerate() {
            grad[c * plane + p] = pr / norm;
        }
        grad[label * plane + p] -= 1.0;
        counted += 1;
    }
    total += carry;
    if counted > 0 {
        let inv = 1.0 / counted as f64;
        for g in &mut grad {
            *g *= inv;
        }
        total /= counted as f64;
    }
    Ok(CrossEntropy {
        loss: total,
        grad_logits: Tensor::new(logits.shape(), grad)?,
        counted,
    })
}

/// Per-pixel contributions `CE_p / counted` to the mean loss, in pixel
/// order with ignored pixels omitted.
pub fn cross_entropy_terms(logits: &Tensor, labels: &LabelMap, ignore: u8) -> Result<Vec<f64>> {
    let (classes, h, w) = logits.chw()?;
    if labels.dims() != (h, w) {
        return Err(Error::shape("labels and logits differ in size"));
    }
    let plane = h * w;
    let z = logits.data();
    let mut terms = Vec::new();
    for (p, &label) in labels.as_slice().iter().enumerate() {
        if label == ignore {
            continue;
        }
        if label as usize >= classes {
            return Err(Error::Data(format!(
                "label {label} at pixel {p} is outside 0..{classes}"
            )));
        }
        let max = (0..classes)
            .map(|c| z[c * plane + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = (0..classes).map(|c| (z[c * plane + p] - max).exp()).sum();
        terms.push(norm.ln() - (z[label as usize * plane + p] - max));
    }
    let n = terms.len() as f64;
    for t in &mut terms {
        *t /= n;
    }
    Ok(terms)
}

/// Mean cross-entropy of `plus` minus that of `minus`, for two nearby logit
/// maps with the same labels. Each pixel's log-sum-exp difference goes through
/// `ln_1p`/`exp_m1` of the logit differences, so the result carries rounding
/// relative to the difference itself rather than to the loss.
pub fn cross_entropy_difference(
    plus: &Tensor,
    minus: &Tensor,
    labels: &LabelMap,
    ignore: u8,
) -> Result<f64> {
    if plus.shape() != minus.shape() {
        return Err(Error::shape("logit maps differ in shape"));
    }
    let (classes, h, w) = minus.chw()?;
    if labels.dims() != (h, w) {
        return Err(Error::shape("labels and logits differ in size"));
    }
    let plane = h * w;
    let (zp, zm) = (plus.data(), minus.data());
    let (mut total, mut counted) = (0.0, 0usize);
    for (p, &label) in labels.as_slice().iter().enumerate() {
        if label == ignore {
            continue;
        }
        if label as usize >= classes {
            return Err(Error::Data(format!(
                "label {label} at pixel {p} is outside 0..{classes}"
            )));
        }
        let max = (0..classes)
            .map(|c| zm[c * plane + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut norm, mut shift) = (0.0, 0.0);
        for c in 0..classes {
            let e = (zm[c * plane + p] - max).exp();
            norm += e;
            shift += e * (zp[c * plane + p] - zm[c * plane + p]).exp_m1();
        }
        let y = label as usize * plane + p;
        total += (shift / norm).ln_1p() - (zp[y] - zm[y]);
        counted += 1;
    }
    Ok(if counted > 0 {
        total / counted as f64
    } else {
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::IGNORE_LABEL;

    #[test]
    fn difference_matches_direct_subtraction() {
        let mut rng = crate::Rng::new(5);
        let minus = Tensor::rand_uniform(&mut rng, &[3, 2, 2], -2.0, 2.0).unwrap();
        let mut plus = minus.clone();
        for v in plus.data_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
        let labels = LabelMap::new(2, 2, vec![0, IGNORE_LABEL, 2, 1]).unwrap();
        let direct = softmax_cross_entropy(&plus, &labels, IGNORE_LABEL)
            .unwrap()
            .loss
            - softmax_cross_entropy(&minus, &labels, IGNORE_LABEL)
                .unwrap()
                .loss;
        let d = cross_entropy_difference(&plus, &minus, &labels, IGNORE_LABEL).unwrap();
        assert!((d - direct).abs() < 1e-14, "{d} {direct}");
        assert_eq!(
            cross_entropy_difference(&minus, &minus, &labels, IGNORE_LABEL).unwrap(),
            0.0
        );
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::fill(&[4, 2, 3], 0.7).unwrap();
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = Tensor::zeros(&[3, 1, 1]).unwrap();
        logits.data_mut()[1] = 60.0;
        let labels = LabelMap::new(1, 1, vec![1]).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert!(ce.loss < 1e-20);
    }

    #[test]
    fn gradient_sums_to_zero_per_pixel() {
        let logits = Tensor::new(&[3, 1, 2], vec![0.1, -2.0, 1.5, 0.3, -0.4, 2.2]).unwrap();
        let labels = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| ce.grad_logits.data()[c * 2 + p]).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn terms_sum_to_loss() {
        let logits = Tensor::new(&[2, 1, 3], vec![3.0, 1.0, -1.0, 0.0, 0.5, 2.0]).unwrap();
        let labels = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 1]).unwrap();
        let terms = cross_entropy_terms(&logits, &labels, IGNORE_LABEL).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert_eq!(terms.len(), 2);
        assert!((terms.iter().sum::<f64>() - ce.loss).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_are_inert() {
        let logits = Tensor::new(&[2, 1, 2], vec![3.0, 1.0, -1.0, 0.0]).unwrap();
        let labels = LabelMap::new(1, 2, vec![IGNORE_LABEL, 1]).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert_eq!(ce.counted, 1);
        assert_eq!(ce.grad_logits.data()[0], 0.0);
        assert_eq!(ce.grad_logits.data()[2], 0.0);

        let all = LabelMap::filled(1, 2, IGNORE_LABEL).unwrap();
        let ce = softmax_cross_entropy(&logits, &all, IGNORE_LABEL).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let logits = Tensor::zeros(&[2, 1, 1]).unwrap();
        let labels = LabelMap::new(1, 1, vec![2]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &labels, IGNORE_LABEL),
            Err(Error::Data(_))
        ));
    }
}
