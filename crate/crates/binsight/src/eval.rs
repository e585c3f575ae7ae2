//! Evaluation: confusion matrices, macro-averaged classification metrics,
//! ROC/AUC, and the masked-reconstruction error protocol.

use std::path::Path;

use serde::Serialize;

use crate::byteplot::ByteImage;
use crate::error::{Error, Result};
use crate::mae::{sample_mask, Mae, MaskPlan};
use crate::seed::{mix_str, mix_u64};
use crate::vit::ViTConfig;

/// Counts grid with rows = actual class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Row-major `C x C` counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn at(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes() + predicted]
    }
}

/// Tallies `(actual, predicted)` pairs into a confusion matrix.
pub fn confusion(
    predictions: &[usize],
    actuals: &[usize],
    labels: &[String],
) -> Result<ConfusionMatrix> {
    if predictions.len() != actuals.len() {
        return Err(Error::Eval(format!(
            "{} predictions vs {} actuals",
            predictions.len(),
            actuals.len()
        )));
    }
    let c = labels.len();
    let mut counts = vec![0u64; c * c];
    for (&p, &a) in predictions.iter().zip(actuals) {
        if p >= c || a >= c {
            return Err(Error::Eval(format!(
                "class index out of range: actual {a}, predicted {p}, classes {c}"
            )));
        }
        counts[a * c + p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of macro precision and macro recall (the primary value).
    pub macro_f1_harmonic: f64,
    /// Unweighted mean of the per-class F1 scores (alternate convention).
    pub macro_f1_classwise: f64,
    pub n_samples: u64,
    pub per_class: Vec<ClassMetrics>,
}

/// Per-class precision/recall/F1 and their macro averages. Undefined (0/0)
/// ratios count as 0, which matters for classes never predicted or absent.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.classes();
    let total = cm.total();
    if total == 0 {
        return Err(Error::Eval("empty confusion matrix".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp: u64 = cm.at(k, k);
        let row: u64 = (0..c).map(|j| cm.at(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.at(i, k)).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            label: cm.labels[k].clone(),
            precision,
            recall,
            f1,
        });
    }

    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let macro_precision = mean(|m| m.precision);
    let macro_recall = mean(|m| m.recall);
    let macro_f1_harmonic = if macro_precision + macro_recall == 0.0 {
        0.0
    } else {
        2.0 * macro_precision * macro_recall / (macro_precision + macro_recall)
    };
    let trace: u64 = (0..c).map(|k| cm.at(k, k)).sum();

    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        macro_precision,
        macro_recall,
        macro_f1_harmonic,
        macro_f1_classwise: mean(|m| m.f1),
        n_samples: total,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` predict positive at this operating point.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the unique scores (ties grouped), trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Eval(
            "ROC needs both a positive and a negative example".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
    });

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at this score
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Anything that can fill in the masked patches of an image. Implemented by
/// the trained autoencoder and by the evaluation stubs used in tests.
pub trait Reconstructor {
    fn config(&self) -> &ViTConfig;
    fn synthesize(&self, img: &ByteImage, plan: &MaskPlan) -> Result<ByteImage>;
}

impl Reconstructor for Mae {
    fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    fn synthesize(&self, img: &ByteImage, plan: &MaskPlan) -> Result<ByteImage> {
        Mae::synthesize(self, img, plan)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassReconError {
    pub class: String,
    pub mean_abs_error: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReconReport {
    pub per_class: Vec<ClassReconError>,
    /// Mean of the per-class means.
    pub overall: f64,
}

/// Masked-reconstruction quality protocol.
///
/// For every image, `n_masks` independent plans are drawn (seeded by
/// `(seed, image source id, mask index)`, so results do not depend on
/// evaluation order), a composite is synthesized per plan, and the mean
/// absolute per-pixel error against the original — over all pixels, visible
/// patches contributing zero by construction — is averaged across masks,
/// then across each class's images.
pub fn recon_error_eval<R: Reconstructor>(
    model: &R,
    groups: &[(String, Vec<ByteImage>)],
    n_masks: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<ReconReport> {
    if groups.is_empty() {
        return Err(Error::Dataset("no classes to evaluate".into()));
    }
    if n_masks == 0 {
        return Err(Error::Config("n_masks must be >= 1".into()));
    }
    let n_patches = model.config().num_patches();
    let keep_ratio = 1.0 - mask_ratio;

    let mut per_class = Vec::with_capacity(groups.len());
    for (class, images) in groups {
        if images.is_empty() {
            return Err(Error::Dataset(format!("class `{class}` has no images")));
        }
        let mut class_sum = 0.0;
        for img in images {
            let mut image_sum = 0.0;
            for mask_index in 0..n_masks {
                let mask_seed =
                    mix_u64(mix_str(mix_str(seed, "recon"), &img.source_id), mask_index as u64);
                let plan = sample_mask(n_patches, keep_ratio, mask_seed)?;
                let composite = model.synthesize(img, &plan)?;
                let abs_err: f64 = composite
                    .pixels
                    .iter()
                    .zip(&img.pixels)
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                image_sum += abs_err / img.pixels.len() as f64;
            }
            class_sum += image_sum / n_masks as f64;
        }
        per_class.push(ClassReconError {
            class: class.clone(),
            mean_abs_error: class_sum / images.len() as f64,
            n_images: images.len(),
        });
    }
    let overall = per_class.iter().map(|c| c.mean_abs_error).sum::<f64>() / per_class.len() as f64;
    Ok(ReconReport { per_class, overall })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Eval(format!("serializing metrics: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// `confusion.csv`: header row of predicted labels, then one row per actual.
pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("actual");
    for l in &cm.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in cm.labels.iter().enumerate() {
        out.push_str(l);
        for j in 0..cm.classes() {
            out.push(',');
            out.push_str(&cm.at(i, j).to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_recon_csv(report: &ReconReport, path: &Path) -> Result<()> {
    let mut out = String::from("class,mean_abs_error,n_images\n");
    for c in &report.per_class {
        out.push_str(&format!("{},{},{}\n", c.class, c.mean_abs_error, c.n_images));
    }
    out.push_str(&format!("__overall__,{},{}\n", report.overall, report
        .per_class
        .iter()
        .map(|c| c.n_images)
        .sum::<usize>()));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Blue-ramp heatmap of the confusion matrix (darker = larger count,
/// normalized per row so imbalanced classes stay readable).
pub fn render_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let c = cm.classes() as u32;
    let cell: u32 = (512 / c).clamp(2, 32);
    let side = c * cell;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([255, 255, 255]));
    for i in 0..c {
        let row_max = (0..c).map(|j| cm.at(i as usize, j as usize)).max().unwrap_or(0);
        for j in 0..c {
            let v = cm.at(i as usize, j as usize);
            let intensity = if row_max == 0 {
                0.0
            } else {
                v as f64 / row_max as f64
            };
            let shade = (255.0 * (1.0 - intensity)) as u8;
            let color = image::Rgb([shade, shade, shade.saturating_add(64)]);
            for y in i * cell..(i + 1) * cell {
                for x in j * cell..(j + 1) * cell {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// ROC line plot with the chance diagonal.
pub fn render_roc_png(curve: &RocCurve, path: &Path) -> Result<()> {
    let side: u32 = 512;
    let margin: i64 = 24;
    let span = (side as i64 - 2 * margin) as f64;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([255, 255, 255]));

    let to_px = |fpr: f64, tpr: f64| -> (i64, i64) {
        let x = margin + (fpr * span) as i64;
        let y = side as i64 - margin - (tpr * span) as i64;
        (x, y)
    };
    let mut draw_line = |a: (i64, i64), b: (i64, i64), color: image::Rgb<u8>| {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for s in 0..=steps {
            let x = a.0 + (b.0 - a.0) * s / steps;
            let y = a.1 + (b.1 - a.1) * s / steps;
            if (0..side as i64).contains(&x) && (0..side as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };

    // axes
    draw_line(to_px(0.0, 0.0), to_px(1.0, 0.0), image::Rgb([0, 0, 0]));
    draw_line(to_px(0.0, 0.0), to_px(0.0, 1.0), image::Rgb([0, 0, 0]));
    // chance diagonal
    draw_line(to_px(0.0, 0.0), to_px(1.0, 1.0), image::Rgb([200, 200, 200]));
    // curve
    for w in curve.points.windows(2) {
        draw_line(
            to_px(w[0].fpr, w[0].tpr),
            to_px(w[1].fpr, w[1].tpr),
            image::Rgb([30, 60, 200]),
        );
    }
    img.save(path)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::synthesize_from_prediction;
    use crate::seed::rng_from;
    use rand::Rng;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions_make_a_diagonal() {
        let actual = vec![0, 1, 2, 1, 0];
        let cm = confusion(&actual, &actual, &labels(&["a", "b", "c"])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.at(i, j), 0);
                }
            }
        }
        let report = macro_metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        assert_eq!(report.macro_f1_harmonic, 1.0);
        assert_eq!(report.macro_f1_classwise, 1.0);
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let actual = vec![0, 1, 2, 2];
        let preds = vec![1, 1, 1, 1];
        let cm = confusion(&preds, &actual, &labels(&["a", "b", "c"])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if j == 1 {
                    actual.iter().filter(|&&a| a == i).count() as u64
                } else {
                    0
                };
                assert_eq!(cm.at(i, j), expected);
            }
        }
    }

    #[test]
    fn three_class_tally_matches_hand_count() {
        let actual = vec![0, 0, 1, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 1, 0, 2, 1];
        let cm = confusion(&preds, &actual, &labels(&["x", "y", "z"])).unwrap();
        assert_eq!(cm.at(0, 0), 1);
        assert_eq!(cm.at(0, 1), 1);
        assert_eq!(cm.at(1, 1), 2);
        assert_eq!(cm.at(2, 0), 1);
        assert_eq!(cm.at(2, 1), 1);
        assert_eq!(cm.at(2, 2), 1);
        assert_eq!(cm.total(), 7);
    }

    #[test]
    fn out_of_range_class_errors() {
        assert!(confusion(&[3], &[0], &labels(&["a", "b"])).is_err());
        assert!(confusion(&[0], &[2], &labels(&["a", "b"])).is_err());
    }

    #[test]
    fn absent_class_contributes_zero() {
        // class "c" never appears and is never predicted
        let cm = confusion(&[0, 1], &[0, 1], &labels(&["a", "b", "c"])).unwrap();
        let report = macro_metrics(&cm).unwrap();
        assert_eq!(report.per_class[2].precision, 0.0);
        assert_eq!(report.per_class[2].recall, 0.0);
        assert_eq!(report.per_class[2].f1, 0.0);
        assert!((report.macro_precision - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Brute-force per-definition metrics oracle: recomputes TP/FP/FN by
    /// scanning prediction pairs, with no shared code.
    fn metrics_oracle(preds: &[usize], actuals: &[usize], c: usize) -> (f64, f64, f64, f64, f64) {
        let mut precision_sum = 0.0;
        let mut recall_sum = 0.0;
        let mut f1_sum = 0.0;
        for k in 0..c {
            let tp = preds
                .iter()
                .zip(actuals)
                .filter(|(p, a)| **p == k && **a == k)
                .count() as f64;
            let fp = preds
                .iter()
                .zip(actuals)
                .filter(|(p, a)| **p == k && **a != k)
                .count() as f64;
            let fn_ = preds
                .iter()
                .zip(actuals)
                .filter(|(p, a)| **p != k && **a == k)
                .count() as f64;
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            precision_sum += prec;
            recall_sum += rec;
            f1_sum += if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            };
        }
        let mp = precision_sum / c as f64;
        let mr = recall_sum / c as f64;
        let harmonic = if mp + mr == 0.0 { 0.0 } else { 2.0 * mp * mr / (mp + mr) };
        let acc = preds
            .iter()
            .zip(actuals)
            .filter(|(p, a)| p == a)
            .count() as f64
            / preds.len() as f64;
        (acc, mp, mr, harmonic, f1_sum / c as f64)
    }

    #[test]
    fn random_matrices_match_definition_oracle() {
        let mut rng = rng_from(77);
        let names = labels(&["a", "b", "c", "d"]);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let actuals: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let report = macro_metrics(&confusion(&preds, &actuals, &names).unwrap()).unwrap();
            let (acc, mp, mr, harm, classwise) = metrics_oracle(&preds, &actuals, 4);
            assert!((report.accuracy - acc).abs() < 1e-12);
            assert!((report.macro_precision - mp).abs() < 1e-12);
            assert!((report.macro_recall - mr).abs() < 1e-12);
            assert!((report.macro_f1_harmonic - harm).abs() < 1e-12);
            assert!((report.macro_f1_classwise - classwise).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_scores_have_auc_one() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let labels = vec![true, true, false, false];
        let curve = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.auc, 1.0);
    }

    #[test]
    fn inverted_scores_have_auc_zero() {
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        let labels = vec![true, true, false, false];
        let curve = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.auc, 0.0);
    }

    #[test]
    fn single_class_labels_error() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[false, false]).is_err());
    }

    /// Mann-Whitney pairwise oracle: fraction of (positive, negative) pairs
    /// ranked correctly, ties counting half.
    fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut correct = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    correct += 1.0;
                } else if scores[i] == scores[j] {
                    correct += 0.5;
                }
            }
        }
        correct / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = rng_from(13);
        for round in 0..100 {
            let n = rng.gen_range(4..30);
            // quantized scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let curve = roc_auc(&scores, &labels).unwrap();
            let expected = auc_oracle(&scores, &labels);
            assert!(
                (curve.auc - expected).abs() < 1e-9,
                "round {round}: {} vs {expected}",
                curve.auc
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = rng_from(14);
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        let b = roc_auc(&transformed, &labels).unwrap().auc;
        assert!((a - b).abs() < 1e-12);
    }

    fn micro_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            in_channels: 3,
            encoder_dim: 16,
            encoder_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
            decoder_blocks: 1,
            decoder_heads: 2,
            use_class_token: false,
        }
    }

    fn random_image(cfg: &ViTConfig, seed: u64, id: &str) -> ByteImage {
        let mut rng = rng_from(seed);
        let n = cfg.in_channels * cfg.image_size * cfg.image_size;
        let pixels = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        ByteImage::new(cfg.image_size, cfg.image_size, cfg.in_channels, pixels)
            .unwrap()
            .with_source_id(id)
    }

    struct PerfectStub(ViTConfig);
    impl Reconstructor for PerfectStub {
        fn config(&self) -> &ViTConfig {
            &self.0
        }
        fn synthesize(&self, img: &ByteImage, _plan: &MaskPlan) -> Result<ByteImage> {
            Ok(img.clone())
        }
    }

    /// Predicts zero in normalized space, i.e. fills each masked patch with
    /// its mean value.
    struct PatchMeanStub(ViTConfig);
    impl Reconstructor for PatchMeanStub {
        fn config(&self) -> &ViTConfig {
            &self.0
        }
        fn synthesize(&self, img: &ByteImage, plan: &MaskPlan) -> Result<ByteImage> {
            let zeros = vec![0.0; self.0.num_patches() * self.0.patch_dim()];
            synthesize_from_prediction(&zeros, img, plan, &self.0)
        }
    }

    #[test]
    fn perfect_reconstructor_scores_zero() {
        let cfg = micro_cfg();
        let groups = vec![
            ("alpha".to_string(), vec![random_image(&cfg, 1, "a1"), random_image(&cfg, 2, "a2")]),
            ("beta".to_string(), vec![random_image(&cfg, 3, "b1")]),
        ];
        let report = recon_error_eval(&PerfectStub(cfg), &groups, 10, 0.75, 9).unwrap();
        assert!(report.per_class.iter().all(|c| c.mean_abs_error == 0.0));
        assert_eq!(report.overall, 0.0);
    }

    #[test]
    fn patch_mean_stub_matches_brute_force_recomputation() {
        // Oracle: replay the protocol by hand — same seed derivation, same
        // plans, explicit per-pixel absolute differences.
        let cfg = micro_cfg();
        let groups = vec![
            ("alpha".to_string(), vec![random_image(&cfg, 4, "x1"), random_image(&cfg, 5, "x2")]),
            ("beta".to_string(), vec![random_image(&cfg, 6, "y1")]),
        ];
        let seed = 21;
        let n_masks = 4;
        let report =
            recon_error_eval(&PatchMeanStub(cfg), &groups, n_masks, 0.75, seed).unwrap();

        let stub = PatchMeanStub(cfg);
        let mut class_means = Vec::new();
        for (_, images) in &groups {
            let mut image_means = Vec::new();
            for img in images {
                let mut mask_errs = Vec::new();
                for m in 0..n_masks {
                    let s = mix_u64(
                        mix_str(mix_str(seed, "recon"), &img.source_id),
                        m as u64,
                    );
                    let plan = sample_mask(cfg.num_patches(), 0.25, s).unwrap();
                    let composite = stub.synthesize(img, &plan).unwrap();
                    let total: f64 = composite
                        .pixels
                        .iter()
                        .zip(&img.pixels)
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    mask_errs.push(total / img.pixels.len() as f64);
                }
                image_means.push(mask_errs.iter().sum::<f64>() / n_masks as f64);
            }
            class_means.push(image_means.iter().sum::<f64>() / image_means.len() as f64);
        }
        for (got, want) in report.per_class.iter().zip(&class_means) {
            assert!((got.mean_abs_error - want).abs() < 1e-9);
            assert!(got.mean_abs_error > 0.0);
        }
        let overall = class_means.iter().sum::<f64>() / class_means.len() as f64;
        assert!((report.overall - overall).abs() < 1e-9);
    }

    #[test]
    fn visible_patches_add_no_error() {
        // With a stub that corrupts only masked patches, flipping the plan's
        // visible set must leave those pixels bit-identical.
        let cfg = micro_cfg();
        let img = random_image(&cfg, 7, "v1");
        let plan = sample_mask(cfg.num_patches(), 0.25, 3).unwrap();
        let stub = PatchMeanStub(cfg);
        let composite = stub.synthesize(&img, &plan).unwrap();
        let p = cfg.patch_dim();
        let orig = crate::vit::patchify(&img, &cfg).unwrap().to_vec();
        let got = crate::vit::patchify(&composite, &cfg).unwrap().to_vec();
        for &v in &plan.visible {
            assert_eq!(orig[v * p..(v + 1) * p], got[v * p..(v + 1) * p]);
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        let cfg = micro_cfg();
        let groups = vec![("alpha".to_string(), vec![])];
        assert!(recon_error_eval(&PerfectStub(cfg), &groups, 10, 0.75, 1).is_err());
    }

    #[test]
    fn recon_eval_is_order_independent() {
        let cfg = micro_cfg();
        let a1 = random_image(&cfg, 1, "a1");
        let a2 = random_image(&cfg, 2, "a2");
        let fwd = vec![("alpha".to_string(), vec![a1.clone(), a2.clone()])];
        let rev = vec![("alpha".to_string(), vec![a2, a1])];
        let stub = PatchMeanStub(cfg);
        let r1 = recon_error_eval(&stub, &fwd, 3, 0.75, 5).unwrap();
        let r2 = recon_error_eval(&stub, &rev, 3, 0.75, 5).unwrap();
        assert_eq!(r1.per_class[0].mean_abs_error, r2.per_class[0].mean_abs_error);
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], &labels(&["a", "b"])).unwrap();
        let report = macro_metrics(&cm).unwrap();
        let curve = roc_auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap();

        let mpath = dir.path().join("metrics.json");
        write_metrics_json(&report, &mpath).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        assert!(parsed["accuracy"].is_number());
        assert!(parsed["macro_f1_harmonic"].is_number());
        assert!(parsed["per_class"].is_array());

        let cpath = dir.path().join("confusion.csv");
        write_confusion_csv(&cm, &cpath).unwrap();
        let text = std::fs::read_to_string(&cpath).unwrap();
        assert!(text.starts_with("actual,a,b\n"));

        let rpath = dir.path().join("roc.csv");
        write_roc_csv(&curve, &rpath).unwrap();
        assert!(std::fs::read_to_string(&rpath).unwrap().starts_with("fpr,tpr,threshold\n"));

        render_confusion_png(&cm, &dir.path().join("confusion.png")).unwrap();
        render_roc_png(&curve, &dir.path().join("roc.png")).unwrap();
        assert!(dir.path().join("confusion.png").exists());
        assert!(dir.path().join("roc.png").exists());
    }
}
