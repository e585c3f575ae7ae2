//! Classification heads over the shared encoder.
//!
//! Three tasks reuse one architecture: binary malicious/benign detection,
//! malware-type classification and malware-family classification. A learnable
//! class token is prepended to the patch tokens, the encoder output at that
//! token feeds a single linear head, and training minimizes class-rebalanced
//! cross-entropy. Fine-tuning updates every parameter, whether the encoder
//! came from a pretrained checkpoint or from random init (the from-scratch
//! baseline).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::byteplot::{lanczos_resize, ByteImage};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mae::{read_vit_config, write_vit_config, Mae};
use crate::seed::{mix_str, mix_u64, rng_from};
use crate::tensor::optim::AdamW;
use crate::tensor::Tensor;
use crate::vit::{encoder_forward, patchify, pos_embed_2d, EncoderParams, LinearParams, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryLabel {
    Benign,
    Malicious,
}

impl BinaryLabel {
    pub fn parse(s: &str) -> Result<BinaryLabel> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(BinaryLabel::Benign),
            "malicious" | "malware" => Ok(BinaryLabel::Malicious),
            other => Err(Error::Label(format!(
                "binary label must be benign or malicious, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BinaryLabel::Benign => "benign",
            BinaryLabel::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    Type,
    Family,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Type => "type",
            Task::Family => "family",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(Task::Binary),
            "type" => Ok(Task::Type),
            "family" => Ok(Task::Family),
            other => Err(Error::Label(format!("unknown task `{other}`"))),
        }
    }
}

/// Canonical class order for the binary task.
pub const BINARY_LABELS: [&str; 2] = ["benign", "malicious"];

/// Family/type label space and its mapping onto the binary verdict.
#[derive(Debug, Clone, Default)]
pub struct LabelHierarchy {
    /// Unique family names, in first-appearance order.
    pub families: Vec<String>,
    /// Unique type names, in first-appearance order.
    pub types: Vec<String>,
    family_to_binary: BTreeMap<String, BinaryLabel>,
    type_to_binary: BTreeMap<String, BinaryLabel>,
    /// Training-split image counts per label (filled by the caller that owns
    /// the manifest; drives class re-balancing).
    pub class_counts: BTreeMap<String, u64>,
}

impl LabelHierarchy {
    /// Builds and validates a hierarchy from `(family, type, binary)` rows.
    ///
    /// Every fine label must map to exactly one binary label, and exactly one
    /// type and one family may map to benign.
    pub fn from_rows(rows: &[(String, String, BinaryLabel)]) -> Result<LabelHierarchy> {
        if rows.is_empty() {
            return Err(Error::Label("hierarchy has no rows".into()));
        }
        let mut h = LabelHierarchy::default();
        for (family, ty, binary) in rows {
            for label in [family, ty] {
                if label.is_empty() || label.contains(',') || label.contains('\n') {
                    return Err(Error::Label(format!(
                        "label `{label}` must be non-empty and free of commas/newlines"
                    )));
                }
            }
            match h.family_to_binary.get(family) {
                None => {
                    h.family_to_binary.insert(family.clone(), *binary);
                    h.families.push(family.clone());
                }
                Some(prev) if prev != binary => {
                    return Err(Error::Label(format!(
                        "family `{family}` maps to both {} and {}",
                        prev.as_str(),
                        binary.as_str()
                    )));
                }
                Some(_) => {}
            }
            match h.type_to_binary.get(ty) {
                None => {
                    h.type_to_binary.insert(ty.clone(), *binary);
                    h.types.push(ty.clone());
                }
                Some(prev) if prev != binary => {
                    return Err(Error::Label(format!(
                        "type `{ty}` maps to both {} and {}",
                        prev.as_str(),
                        binary.as_str()
                    )));
                }
                Some(_) => {}
            }
        }
        for (kind, map) in [("type", &h.type_to_binary), ("family", &h.family_to_binary)] {
            let benign = map.values().filter(|b| **b == BinaryLabel::Benign).count();
            if benign != 1 {
                return Err(Error::Label(format!(
                    "exactly one {kind} must map to benign, found {benign}"
                )));
            }
        }
        Ok(h)
    }

    /// Loads a `family,type,binary` CSV (header row required).
    pub fn load_csv(path: &Path) -> Result<LabelHierarchy> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = ["family", "type", "binary"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Label(format!(
                "hierarchy header must be `family,type,binary`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::Label("hierarchy rows need 3 columns".into()));
            }
            rows.push((
                record[0].to_string(),
                record[1].to_string(),
                BinaryLabel::parse(&record[2])?,
            ));
        }
        LabelHierarchy::from_rows(&rows)
    }

    pub fn family_binary(&self, family: &str) -> Result<BinaryLabel> {
        self.family_to_binary
            .get(family)
            .copied()
            .ok_or_else(|| Error::Label(format!("unknown family `{family}`")))
    }

    pub fn type_binary(&self, ty: &str) -> Result<BinaryLabel> {
        self.type_to_binary
            .get(ty)
            .copied()
            .ok_or_else(|| Error::Label(format!("unknown type `{ty}`")))
    }

    pub fn contains_type(&self, ty: &str) -> bool {
        self.type_to_binary.contains_key(ty)
    }

    pub fn contains_family(&self, family: &str) -> bool {
        self.family_to_binary.contains_key(family)
    }

    /// Ordered class labels for a task.
    pub fn labels_for(&self, task: Task) -> Vec<String> {
        match task {
            Task::Binary => BINARY_LABELS.iter().map(|s| s.to_string()).collect(),
            Task::Type => self.types.clone(),
            Task::Family => self.families.clone(),
        }
    }

    pub fn with_counts(mut self, counts: BTreeMap<String, u64>) -> LabelHierarchy {
        self.class_counts = counts;
        self
    }
}

/// Coarse binary verdict for a fine (type or family) label: a pure lookup,
/// no model involved. A label present in both namespaces must agree.
pub fn infer_coarse(fine_label: &str, hierarchy: &LabelHierarchy) -> Result<BinaryLabel> {
    let as_type = hierarchy.type_to_binary.get(fine_label);
    let as_family = hierarchy.family_to_binary.get(fine_label);
    match (as_type, as_family) {
        (Some(t), Some(f)) if t != f => Err(Error::Label(format!(
            "label `{fine_label}` is both a type ({}) and a family ({}) with conflicting verdicts",
            t.as_str(),
            f.as_str()
        ))),
        (Some(t), _) => Ok(*t),
        (None, Some(f)) => Ok(*f),
        (None, None) => Err(Error::Label(format!(
            "label `{fine_label}` is neither a known type nor family"
        ))),
    }
}

/// Class re-balancing weights `W_c = (1 - 0.999) / (1 - 0.999^n_c)`.
/// No renormalization is applied.
pub fn class_weights(counts: &BTreeMap<String, u64>) -> Result<BTreeMap<String, f64>> {
    const Q: f64 = 0.999;
    let mut out = BTreeMap::new();
    for (label, &n) in counts {
        if n < 1 {
            return Err(Error::Label(format!(
                "class `{label}` needs at least one training image"
            )));
        }
        let q_pow = if n <= i32::MAX as u64 {
            Q.powi(n as i32)
        } else {
            Q.powf(n as f64)
        };
        out.insert(label.clone(), (1.0 - Q) / (1.0 - q_pow));
    }
    Ok(out)
}

/// Mean over the batch of `W_{y_i} * (-log softmax(logits_i)[y_i])`.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<Tensor> {
    let (b, c) = match *logits.shape() {
        [b, c] => (b, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "weighted_cross_entropy",
                shape: logits.shape().to_vec(),
                reason: "expected [batch, classes]".into(),
            })
        }
    };
    if labels.len() != b {
        return Err(Error::Dataset(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Dataset(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    let mut picked = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label(format!("label index {y} out of range for {c} classes")));
        }
        picked[i * c + y] = weights[y];
    }
    let picker = Tensor::from_vec(&[b, c], picked)?;
    Ok(logits
        .log_softmax(1)?
        .mul(&picker)?
        .sum()
        .scale(-1.0 / b as f64))
}

/// Encoder plus class token plus a linear head for one task.
pub struct Classifier {
    pub cfg: ViTConfig,
    pub encoder: EncoderParams,
    pub head: LinearParams,
    pub task: Task,
    /// Class index -> label name; fixed order (binary: benign=0, malicious=1).
    pub labels: Vec<String>,
}

impl Classifier {
    fn check_labels(task: Task, labels: &[String]) -> Result<()> {
        if task == Task::Binary && labels != BINARY_LABELS {
            return Err(Error::Label(format!(
                "binary classifier labels must be {BINARY_LABELS:?}, got {labels:?}"
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Label("a classifier needs at least 2 classes".into()));
        }
        if labels.iter().any(|l| l.contains(',') || l.contains('\n')) {
            return Err(Error::Label("labels must be free of commas/newlines".into()));
        }
        Ok(())
    }

    /// Randomly initialized model (the from-scratch baseline).
    pub fn init(cfg: &ViTConfig, task: Task, labels: Vec<String>, seed: u64) -> Result<Classifier> {
        Classifier::check_labels(task, &labels)?;
        let cfg = cfg.with_class_token();
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let encoder = EncoderParams::init(&cfg, &mut rng);
        let head = LinearParams::init(cfg.encoder_dim, labels.len(), &mut rng);
        Ok(Classifier {
            cfg,
            encoder,
            head,
            task,
            labels,
        })
    }

    /// Model whose encoder weights are copied (bit-exactly) from a pretrained
    /// masked autoencoder; class token starts at zero, head is fresh.
    pub fn from_pretrained(mae: &Mae, task: Task, labels: Vec<String>, seed: u64) -> Result<Classifier> {
        let model = Classifier::init(&mae.cfg, task, labels, seed)?;
        for (name, source) in mae.params.encoder.named_params() {
            let target = model
                .encoder
                .named_params()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing encoder tensor `{name}`")))?;
            target.set_data(&source.to_vec())?;
        }
        if let Some(cls) = &model.encoder.class_token {
            cls.apply_update(|_, v| *v = 0.0);
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params();
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// Logits for a batch of geometry-matching images: `[B, classes]`.
    pub fn logits(&self, images: &[&ByteImage]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::EmptyInput);
        }
        let patches: Vec<Tensor> = images
            .iter()
            .map(|img| patchify(img, &self.cfg))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = patches.iter().collect();
        self.logits_from_patches(&Tensor::stack(&refs)?)
    }

    /// Logits from pre-patchified images `[B, N, P]`.
    pub fn logits_from_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let b = patches.shape()[0];
        let embedded = self.encoder.patch_embed.forward(patches)?;
        let grid = self.cfg.grid();
        let pos = pos_embed_2d(grid, grid, self.cfg.encoder_dim)?;
        let tokens = embedded.add(&pos)?;

        let cls = self
            .encoder
            .class_token
            .as_ref()
            .ok_or_else(|| Error::Config("classifier missing class token".into()))?;
        // The class token carries no positional embedding; position enters
        // through the patch tokens it attends to.
        let cls_batch = cls.index_select(0, &vec![0; b])?.reshape(&[b, 1, self.cfg.encoder_dim])?;
        let sequence = Tensor::concat(&[&cls_batch, &tokens], 1)?;

        let encoded = encoder_forward(&sequence, &self.encoder)?;
        let class_repr = encoded
            .index_select(1, &[0])?
            .reshape(&[b, self.cfg.encoder_dim])?;
        self.head.forward(&class_repr)
    }

    /// Class probabilities for one image; resamples to the model's geometry
    /// first when the spatial size differs.
    pub fn predict(&self, img: &ByteImage) -> Result<Vec<f64>> {
        let img = self.conform(img)?;
        let logits = self.logits(&[&img])?;
        Ok(logits.softmax(1)?.to_vec())
    }

    /// Batch variant of [`predict`]: row-stochastic probability matrix.
    pub fn predict_batch(&self, images: &[&ByteImage]) -> Result<Vec<Vec<f64>>> {
        let conformed: Vec<ByteImage> = images
            .iter()
            .map(|img| self.conform(img))
            .collect::<Result<_>>()?;
        let refs: Vec<&ByteImage> = conformed.iter().collect();
        let probs = self.logits(&refs)?.softmax(1)?;
        let c = self.classes();
        Ok(probs.to_vec().chunks(c).map(|r| r.to_vec()).collect())
    }

    fn conform(&self, img: &ByteImage) -> Result<ByteImage> {
        if img.channels != self.cfg.in_channels {
            return Err(Error::Geometry {
                expected: format!("{} channels", self.cfg.in_channels),
                got: format!("{}", img.channels),
            });
        }
        if img.width == self.cfg.image_size && img.height == self.cfg.image_size {
            Ok(img.clone())
        } else {
            lanczos_resize(img, self.cfg.image_size, self.cfg.image_size)
        }
    }

    /// Binary verdict: malicious iff `P(malicious) > 0.5` strictly.
    pub fn detect(&self, img: &ByteImage) -> Result<(BinaryLabel, f64)> {
        if self.task != Task::Binary {
            return Err(Error::Config(format!(
                "detect needs a binary model, this one is `{}`",
                self.task.as_str()
            )));
        }
        let probs = self.predict(img)?;
        let p_malicious = probs[1];
        let verdict = if p_malicious > 0.5 {
            BinaryLabel::Malicious
        } else {
            BinaryLabel::Benign
        };
        Ok((verdict, p_malicious))
    }

    pub fn to_checkpoint(&self, steps: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set("kind", "classifier");
        ckpt.set("task", self.task.as_str());
        ckpt.set("labels", self.labels.join(","));
        ckpt.set("steps", steps);
        write_vit_config(&mut ckpt, &self.cfg);
        for (name, t) in self.named_params() {
            ckpt.push_tensor(&name, &t);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Classifier> {
        if ckpt.get("kind") != Some("classifier") {
            return Err(Error::Checkpoint(format!(
                "expected a classifier checkpoint, found kind `{}`",
                ckpt.get("kind").unwrap_or("<none>")
            )));
        }
        let cfg = read_vit_config(ckpt)?;
        let task = Task::parse(
            ckpt.get("task")
                .ok_or_else(|| Error::Checkpoint("missing task".into()))?,
        )?;
        let labels: Vec<String> = ckpt
            .get("labels")
            .ok_or_else(|| Error::Checkpoint("missing labels".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let model = Classifier::init(&cfg, task, labels, 0)?;
        for (name, t) in model.named_params() {
            ckpt.load_into(&name, &t)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneHyper {
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Stop after the first epoch whose post-epoch training accuracy is 100%.
    pub stop_at_full_accuracy: bool,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper {
            max_steps: 200,
            batch_size: 10,
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            stop_at_full_accuracy: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub steps_run: usize,
    pub final_train_accuracy: f64,
    /// `(step, training accuracy)` measured after each epoch.
    pub accuracy_trace: Vec<(usize, f64)>,
}

/// Encoder starting point for fine-tuning.
pub enum EncoderInit<'a> {
    /// Reuse (copy) the encoder of a pretrained masked autoencoder.
    Pretrained(&'a Mae),
    /// Random initialization — the from-scratch baseline.
    Scratch(&'a ViTConfig),
}

/// Fine-tunes a classifier end to end on `(image, label index)` pairs.
///
/// Class weights follow the re-balancing formula over the label counts of
/// this (training) dataset; classes absent from it keep weight 1, which is
/// never consulted. Deterministic for a fixed seed.
pub fn finetune(
    init: EncoderInit,
    dataset: &[(ByteImage, usize)],
    task: Task,
    labels: Vec<String>,
    hyper: &FinetuneHyper,
    seed: u64,
) -> Result<(Classifier, TrainStats)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("fine-tuning needs at least one image".into()));
    }
    if hyper.batch_size == 0 || hyper.max_steps == 0 {
        return Err(Error::Config("batch_size and max_steps must be >= 1".into()));
    }
    let c = labels.len();
    for (_, y) in dataset {
        if *y >= c {
            return Err(Error::Label(format!(
                "label index {y} out of range for {c} classes"
            )));
        }
    }

    let init_seed = mix_str(seed, "classifier-init");
    let model = match init {
        EncoderInit::Pretrained(mae) => Classifier::from_pretrained(mae, task, labels, init_seed)?,
        EncoderInit::Scratch(cfg) => Classifier::init(cfg, task, labels, init_seed)?,
    };

    // Re-balancing weights from this split's counts.
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (_, y) in dataset {
        *counts.entry(model.labels[*y].clone()).or_insert(0) += 1;
    }
    let weight_map = class_weights(&counts)?;
    let weights: Vec<f64> = model
        .labels
        .iter()
        .map(|l| weight_map.get(l).copied().unwrap_or(1.0))
        .collect();

    // Patchify once; geometry must already match the model.
    let patches: Vec<Tensor> = dataset
        .iter()
        .map(|(img, _)| patchify(img, &model.cfg))
        .collect::<Result<_>>()?;

    let params = model.trainable();
    let mut opt = AdamW::new(hyper.lr, hyper.betas, hyper.weight_decay);
    let mut step = 0usize;
    let mut accuracy_trace = Vec::new();
    let mut final_accuracy = 0.0;

    'epochs: for epoch in 1.. {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(mix_u64(mix_str(seed, "shuffle"), epoch)));

        for batch in order.chunks(hyper.batch_size) {
            let batch_patches: Vec<&Tensor> = batch.iter().map(|&i| &patches[i]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| dataset[i].1).collect();
            let logits = model.logits_from_patches(&Tensor::stack(&batch_patches)?)?;
            let loss = weighted_cross_entropy(&logits, &batch_labels, &weights)?;
            if !loss.item().is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite loss at step {step}"
                )));
            }
            loss.backward()?;
            opt.step(&params);
            opt.zero_grad(&params);
            step += 1;
            if step >= hyper.max_steps {
                final_accuracy = train_accuracy(&model, &patches, dataset)?;
                accuracy_trace.push((step, final_accuracy));
                break 'epochs;
            }
        }

        final_accuracy = train_accuracy(&model, &patches, dataset)?;
        accuracy_trace.push((step, final_accuracy));
        if hyper.stop_at_full_accuracy && final_accuracy == 1.0 {
            break;
        }
    }

    Ok((
        model,
        TrainStats {
            steps_run: step,
            final_train_accuracy: final_accuracy,
            accuracy_trace,
        },
    ))
}

fn train_accuracy(
    model: &Classifier,
    patches: &[Tensor],
    dataset: &[(ByteImage, usize)],
) -> Result<f64> {
    let refs: Vec<&Tensor> = patches.iter().collect();
    let logits = model.logits_from_patches(&Tensor::stack(&refs)?)?;
    let data = logits.to_vec();
    let c = model.classes();
    let correct = dataset
        .iter()
        .enumerate()
        .filter(|(i, (_, y))| {
            let row = &data[i * c..(i + 1) * c];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty row");
            argmax == *y
        })
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
