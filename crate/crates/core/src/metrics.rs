//! Confusion-matrix segmentation metrics and per-class depth variance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

/// Counts `n[i][j]` of pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(format!(
                "{num_classes} classes need {} counts, got {}",
                num_classes * num_classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not [`IGNORE_LABEL`]. Validates the
    /// whole map before counting anything.
    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predicted.dims() != truth.dims() {
            return Err(Error::shape(format!(
                "prediction {:?} and truth {:?} differ in size",
                predicted.dims(),
                truth.dims()
            )));
        }
        let n = self.num_classes;
        let pairs = || {
            predicted
                .as_slice()
                .iter()
                .zip(truth.as_slice())
                .filter(|(_, &t)| t != IGNORE_LABEL)
        };
        if let Some((p, t)) = pairs().find(|(&p, &t)| p as usize >= n || t as usize >= n) {
            return Err(Error::Data(format!(
                "class pair (truth {t}, predicted {p}) out of range for {n} classes"
            )));
        }
        for (&p, &t) in pairs() {
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                "cannot merge matrices of different class counts",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class never occurs in the truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|i| {
                let s_i: u64 = (0..n).map(|j| self.get(i, j)).sum();
                if s_i == 0 {
                    return None;
                }
                let predicted_i: u64 = (0..n).map(|j| self.get(j, i)).sum();
                let n_ii = self.get(i, i);
                Some(n_ii as f64 / (s_i + predicted_i - n_ii) as f64)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macc: f64,
    pub miou: f64,
    pub fwiou: f64,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nacc,{}\nmacc,{}\nmiou,{}\nfwiou,{}\n",
            self.acc, self.macc, self.miou, self.fwiou
        )
    }
}

/// Pixel accuracy, mean class accuracy, mean IoU and frequency-weighted IoU.
/// Classes absent from the truth are left out of the class means.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let s = cm.total();
    if s == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    let n = cm.num_classes();
    let mut diag = 0u64;
    let mut acc_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut fw_sum = 0.0;
    let mut present = 0usize;
    for (i, iou) in cm.class_iou().into_iter().enumerate() {
        let n_ii = cm.get(i, i);
        diag += n_ii;
        if let Some(iou) = iou {
            let s_i: u64 = (0..n).map(|j| cm.get(i, j)).sum();
            present += 1;
            acc_sum += n_ii as f64 / s_i as f64;
            iou_sum += iou;
            fw_sum += s_i as f64 * iou;
        }
    }
    Ok(Metrics {
        acc: diag as f64 / s as f64,
        macc: acc_sum / present as f64,
        miou: iou_sum / present as f64,
        fwiou: fw_sum / s as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    #[default]
    Population,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthVarianceReport {
    pub kind: VarianceKind,
    /// Mean over images containing the class; `None` if it never appears.
    pub per_class: BTreeMap<u8, Option<f64>>,
    pub all: f64,
    pub images: usize,
}

impl DepthVarianceReport {
    pub fn to_json(&self) -> String {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .map(|(c, v)| {
                (
                    c.to_string(),
                    v.map_or(serde_json::Value::Null, |v| v.into()),
                )
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "variance": self.kind,
            "per_class": per_class,
            "all": self.all,
            "images": self.images,
        }))
        .expect("json value")
    }
}

fn variance(values: &[f64], kind: VarianceKind) -> Option<f64> {
    let n = values.len();
    let denom = match kind {
        VarianceKind::Population => n,
        VarianceKind::Sample => n.checked_sub(1)?,
    };
    if denom == 0 {
        return None;
    }
    // Shifting by the first value makes constant input give exactly zero.
    let k = values[0];
    let mean = values.iter().map(|v| v - k).sum::<f64>() / n as f64;
    Some(
        values
            .iter()
            .map(|v| (v - k - mean) * (v - k - mean))
            .sum::<f64>()
            / denom as f64,
    )
}

/// Per image, the variance of valid depths within each labeled class and
/// over all valid pixels; each then averaged without weights over the
/// images where it is defined. Classes `0..num_classes` that never occur
/// are reported as `None`.
pub fn depth_variance_report(
    scenes: &[Scene],
    num_classes: usize,
    kind: VarianceKind,
) -> Result<DepthVarianceReport> {
    let mut class_sums = vec![(0.0, 0usize); num_classes];
    let mut all_sum = 0.0;
    let mut images = 0usize;
    for scene in scenes {
        scene.labels.check_classes(num_classes)?;
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
        let mut all = Vec::new();
        for ((&l, &d), &ok) in scene
            .labels
            .as_slice()
            .iter()
            .zip(scene.depth.values())
            .zip(scene.depth.mask())
        {
            if !ok || l == IGNORE_LABEL {
                continue;
            }
            per_class[l as usize].push(d);
            all.push(d);
        }
        let Some(v) = variance(&all, kind) else {
            continue;
        };
        all_sum += v;
        images += 1;
        for (c, depths) in per_class.iter().enumerate() {
            if let Some(v) = variance(depths, kind) {
                class_sums[c].0 += v;
                class_sums[c].1 += 1;
            }
        }
    }
    if images == 0 {
        return Err(Error::Data(
            "no scene has a labeled pixel with valid depth".into(),
        ));
    }
    Ok(DepthVarianceReport {
        kind,
        per_class: class_sums
            .iter()
            .enumerate()
            .map(|(c, &(sum, n))| (c as u8, (n > 0).then(|| sum / n as f64)))
            .collect(),
        all: all_sum / images as f64,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::similarity::DepthMap;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_two_class_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.acc - 0.7).abs() < 1e-12);
        assert!((m.macc - (0.75 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
        assert!((m.fwiou - (4.0 * 0.5 + 6.0 * 4.0 / 7.0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn accumulate_counts_and_ignores() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0; 10]), &labels(&[0; 10])).unwrap();
        assert_eq!(cm.get(0, 0), 10);
        let before = cm.clone();
        cm.accumulate(&labels(&[1; 4]), &labels(&[IGNORE_LABEL; 4]))
            .unwrap();
        assert_eq!(cm, before);
        // Predicted [0,1,1,0,1], truth [0,0,1,1,1].
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0, 1, 1, 0, 1]), &labels(&[0, 0, 1, 1, 1]))
            .unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix::from_counts(2, vec![1, 1, 1, 2]).unwrap()
        );
    }

    #[test]
    fn out_of_range_is_a_data_error_and_counts_nothing() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm
            .accumulate(&labels(&[0, 2]), &labels(&[0, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        assert!(matches!(
            compute_metrics(&ConfusionMatrix::new(3)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn absent_class_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 5, 0, 0, 0, 0]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.acc, m.macc, m.miou, m.fwiou), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(cm.class_iou()[2], None);
    }

    #[test]
    fn output_formats() {
        let m = Metrics {
            acc: 0.5,
            macc: 0.25,
            miou: 0.125,
            fwiou: 1.0,
        };
        assert_eq!(
            m.to_csv(),
            "metric,value\nacc,0.5\nmacc,0.25\nmiou,0.125\nfwiou,1\n"
        );
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["miou"], 0.125);
    }

    fn scene(depths: &[f64], labels_: &[u8]) -> Scene {
        let n = depths.len();
        Scene::new(
            Tensor::zeros(&[3, 1, n]).unwrap(),
            DepthMap::new(1, n, depths.to_vec()).unwrap(),
            labels(labels_),
        )
        .unwrap()
    }

    #[test]
    fn two_pixel_population_variance() {
        let r = depth_variance_report(&[scene(&[1.0, 3.0], &[0, 0])], 1, VarianceKind::Population)
            .unwrap();
        assert_eq!(r.per_class[&0], Some(1.0));
        assert_eq!(r.all, 1.0);
        let r =
            depth_variance_report(&[scene(&[1.0, 3.0], &[0, 0])], 1, VarianceKind::Sample).unwrap();
        assert_eq!(r.per_class[&0], Some(2.0));
    }

    #[test]
    fn constant_class_has_zero_variance_and_absent_is_none() {
        let s = scene(&[2.0, 2.0, 5.0, 5.0], &[0, 0, 1, 1]);
        let r = depth_variance_report(&[s], 3, VarianceKind::Population).unwrap();
        assert_eq!(r.per_class[&0], Some(0.0));
        assert_eq!(r.per_class[&1], Some(0.0));
        assert_eq!(r.per_class[&2], None);
        assert_eq!(r.all, 2.25);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["per_class"]["2"].is_null());
    }

    #[test]
    fn noise_free_synthetic_pattern() {
        let spec = DatasetSpec {
            num_images: 20,
            height: 32,
            width: 32,
            rgb_noise: 0.0,
            ..DatasetSpec::default()
        };
        let r =
            depth_variance_report(&generate(&spec).unwrap(), 4, VarianceKind::Population).unwrap();
        assert!(r.all > 0.0);
        for v in r.per_class.values() {
            assert_eq!(*v, Some(0.0));
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_order_independent(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..60)
        ) {
            let (p, t): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let mut whole = ConfusionMatrix::new(4);
            whole.accumulate(&labels(&p), &labels(&t)).unwrap();
            let mut split = ConfusionMatrix::new(4);
            let mid = p.len() / 2;
            let mut second = ConfusionMatrix::new(4);
            if mid > 0 {
                split.accumulate(&labels(&p[..mid]), &labels(&t[..mid])).unwrap();
            }
            second.accumulate(&labels(&p[mid..]), &labels(&t[mid..])).unwrap();
            second.merge(&split).unwrap();
            prop_assert_eq!(&whole, &second);
            let m = compute_metrics(&whole).unwrap();
            for v in [m.acc, m.macc, m.miou, m.fwiou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let diagonal = p == t;
            prop_assert_eq!(m.miou == 1.0, diagonal);
            prop_assert_eq!(m.acc == 1.0, diagonal);
        }
    }
}
