//! Shared fixtures and independent oracles for the integration tests.
//!
//! The oracles here deliberately re-derive results from first principles
//! (explicit double loops, pairwise counts, textbook definitions) and share
//! no code with the implementation paths they check.

#![allow(dead_code)]

use binsight::byteplot::ByteImage;
use binsight::seed::rng_from;
use binsight::vit::ViTConfig;
use rand::Rng;

/// Hand-built minimal DEX: 112-byte header, 16 data bytes, file size 0x80.
pub fn fixture_dex() -> Vec<u8> {
    let mut d = vec![0u8; 0x80];
    d[0..8].copy_from_slice(b"dex\n035\0");
    d[32..36].copy_from_slice(&0x80u32.to_le_bytes()); // file_size
    d[36..40].copy_from_slice(&0x70u32.to_le_bytes()); // header_size
    d[40..44].copy_from_slice(&0x1234_5678u32.to_le_bytes()); // endian_tag
    d[104..108].copy_from_slice(&16u32.to_le_bytes()); // data_size
    d[108..112].copy_from_slice(&0x70u32.to_le_bytes()); // data_off
    for (i, b) in d[0x70..0x80].iter_mut().enumerate() {
        *b = (i * 16) as u8;
    }
    d
}

/// The desk-scale training geometry: 64² images, 8² patches, width 64,
/// 4 encoder / 2 decoder blocks, 4 heads.
pub fn tiny_cfg() -> ViTConfig {
    ViTConfig::tiny()
}

/// Synthetic two-class imagery: class 0 carries vertical stripes, class 1
/// horizontal ones, with low-amplitude per-image noise. Structured enough
/// that masked patches are predictable from visible neighbors, and the two
/// orientations stay linearly separable.
pub fn striped_image(cfg: &ViTConfig, class: usize, seed: u64) -> ByteImage {
    let mut rng = rng_from(seed);
    let side = cfg.image_size;
    let n = cfg.in_channels * side * side;
    let mut pixels = vec![0.0; n];
    for c in 0..cfg.in_channels {
        for y in 0..side {
            for x in 0..side {
                let phase = if class == 0 { x } else { y };
                let base = 0.5 + 0.35 * ((phase as f64) * std::f64::consts::PI / 4.0).sin();
                let noise: f64 = rng.gen_range(-0.08..0.08);
                pixels[c * side * side + y * side + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    ByteImage::new(side, side, cfg.in_channels, pixels)
        .unwrap()
        .with_source_id(format!("toy-{class}-{seed}"))
}

/// Balanced labeled toy set, `n` images alternating classes.
pub fn toy_dataset(cfg: &ViTConfig, n: usize, seed_base: u64) -> Vec<(ByteImage, usize)> {
    (0..n)
        .map(|i| {
            let class = i % 2;
            (striped_image(cfg, class, seed_base + i as u64), class)
        })
        .collect()
}

/// Brute-force macro metrics straight from the definitions, scanning the
/// prediction pairs per class.
pub fn metrics_oracle(
    preds: &[usize],
    actuals: &[usize],
    c: usize,
) -> (f64, f64, f64, f64, f64) {
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
    let harmonic = if mp + mr == 0.0 {
        0.0
    } else {
        2.0 * mp * mr / (mp + mr)
    };
    let acc = preds.iter().zip(actuals).filter(|(p, a)| p == a).count() as f64
        / preds.len().max(1) as f64;
    (acc, mp, mr, harmonic, f1_sum / c as f64)
}

/// Mann-Whitney pairwise AUC oracle (ties count half).
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
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

/// Direct (non-separable) Lanczos-3 resample with its own kernel: full 2-D
/// window double loop per output pixel.
pub fn direct_resize_oracle(img: &ByteImage, out_w: usize, out_h: usize) -> Vec<f64> {
    fn kernel(x: f64) -> f64 {
        if x.abs() >= 3.0 {
            return 0.0;
        }
        if x.abs() < 1e-12 {
            return 1.0;
        }
        let s = |t: f64| {
            let pt = std::f64::consts::PI * t;
            pt.sin() / pt
        };
        s(x) * s(x / 3.0)
    }
    let rx = img.width as f64 / out_w as f64;
    let ry = img.height as f64 / out_h as f64;
    let (sx, sy) = (rx.max(1.0), ry.max(1.0));
    let mut out = Vec::new();
    for c in 0..img.channels {
        for oy in 0..out_h {
            let cy = (oy as f64 + 0.5) * ry - 0.5;
            for ox in 0..out_w {
                let cx = (ox as f64 + 0.5) * rx - 0.5;
                let mut acc = 0.0;
                let mut total = 0.0;
                for iy in (cy - 3.0 * sy).ceil() as isize..=(cy + 3.0 * sy).floor() as isize {
                    for ix in (cx - 3.0 * sx).ceil() as isize..=(cx + 3.0 * sx).floor() as isize {
                        let w = kernel((iy as f64 - cy) / sy) * kernel((ix as f64 - cx) / sx);
                        let y = iy.clamp(0, img.height as isize - 1) as usize;
                        let x = ix.clamp(0, img.width as isize - 1) as usize;
                        acc += w * img.pixel(c, y, x);
                        total += w;
                    }
                }
                out.push((acc / total).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Synthetic "binary" with structure along one axis when laid out at the
/// given byteplot width: class 0 varies with the column, class 1 with the
/// row. Converting these yields stripe imagery like [`striped_image`].
pub fn toy_binary(class: usize, width: usize, len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_from(seed);
    (0..len)
        .map(|i| {
            let phase = if class == 0 { i % width } else { i / width };
            let base = 128.0 + 90.0 * ((phase as f64) * std::f64::consts::PI / 16.0).sin();
            let noise: f64 = rng.gen_range(-15.0..15.0);
            (base + noise).clamp(0.0, 255.0) as u8
        })
        .collect()
}
