//! Linear probe on frozen encoder features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{LabeledSequence, Split};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::pipeline::{derive_seed, encode_full};
use crate::train::{eval_view, init_model};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Encoder checksum before and after probing; always equal.
    pub checksum_before: [u8; 32],
    pub checksum_after: [u8; 32],
}

impl ProbeReport {
    pub fn chance(&self) -> f64 {
        1.0 / self.classes as f64
    }
}

/// Pooled encoder feature of the evaluation view of every sequence.
pub fn extract_features(cfg: &RunConfig, model: &Model, seqs: &[&LabeledSequence]) -> Result<Vec<Vec<f64>>> {
    seqs.iter()
        .map(|s| encode_full(model, &cfg.torso_joints, &eval_view(cfg, &s.sequence)?))
        .collect()
}

/// Per-feature standardization fitted on the training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Invalid("cannot standardize an empty feature set".into()));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Softmax linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub dim: usize,
    pub classes: usize,
    /// Row-major `[classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        // first maximum wins on ties
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }

    /// Mini-batch SGD with momentum on the mean cross-entropy; the learning
    /// rate follows a cosine from `lr` down to 0 over all steps.
    pub fn train(xs: &[Vec<f64>], ys: &[usize], classes: usize, sgd: &SgdConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Invalid(format!("{} feature rows for {} labels", xs.len(), ys.len())));
        }
        if let Some(&bad) = ys.iter().find(|&&y| y >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if sgd.batch == 0 || !(sgd.lr > 0.0) || !(0.0..1.0).contains(&sgd.momentum) {
            return Err(Error::Invalid(format!("bad probe optimizer settings {sgd:?}")));
        }
        let dim = xs[0].len();
        let mut clf = LinearClassifier { dim, classes, weight: vec![0.0; classes * dim], bias: vec![0.0; classes] };
        let mut vw = vec![0.0; classes * dim];
        let mut vb = vec![0.0; classes];
        let batches = xs.len().div_ceil(sgd.batch);
        let total = (sgd.epochs * batches).max(1);
        let mut step = 0;
        for epoch in 0..sgd.epochs {
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(sgd.seed, &[epoch as u64])));
            for chunk in order.chunks(sgd.batch) {
                let lr = 0.5 * sgd.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
                let mut gw = vec![0.0; classes * dim];
                let mut gb = vec![0.0; classes];
                let inv = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let z = clf.logits(&xs[i]);
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for k in 0..classes {
                        let d = (e[k] / s - f64::from(u8::from(k == ys[i]))) * inv;
                        gb[k] += d;
                        gw[k * dim..(k + 1) * dim].iter_mut().zip(&xs[i]).for_each(|(g, x)| *g += d * x);
                    }
                }
                for (p, (v, g)) in clf.weight.iter_mut().zip(vw.iter_mut().zip(&gw)) {
                    *v = sgd.momentum * *v + g;
                    *p -= lr * *v;
                }
                for (p, (v, g)) in clf.bias.iter_mut().zip(vb.iter_mut().zip(&gb)) {
                    *v = sgd.momentum * *v + g;
                    *p -= lr * *v;
                }
                step += 1;
            }
        }
        Ok(clf)
    }
}

pub fn sgd_config(cfg: &RunConfig) -> SgdConfig {
    SgdConfig {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        momentum: cfg.probe_momentum,
        batch: cfg.probe_batch,
        seed: derive_seed(cfg.seed, &[5]),
    }
}

/// Trains the probe on the train split of `dataset` and evaluates it on
/// the test split. The encoder is only read.
pub fn probe(cfg: &RunConfig, model: &Model, dataset: &[LabeledSequence]) -> Result<ProbeReport> {
    let train: Vec<&LabeledSequence> = dataset.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<&LabeledSequence> = dataset.iter().filter(|s| s.split == Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "probe needs train and test sequences, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    let classes = dataset.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    if classes < 2 {
        return Err(Error::Invalid("probe needs at least 2 classes".into()));
    }
    let checksum_before = model.store.checksum();
    let ftrain = extract_features(cfg, model, &train)?;
    let ftest = extract_features(cfg, model, &test)?;
    let st = Standardizer::fit(&ftrain)?;
    let xtrain: Vec<Vec<f64>> = ftrain.iter().map(|r| st.apply(r)).collect();
    let xtest: Vec<Vec<f64>> = ftest.iter().map(|r| st.apply(r)).collect();
    let ytrain: Vec<usize> = train.iter().map(|s| s.label).collect();
    let ytest: Vec<usize> = test.iter().map(|s| s.label).collect();
    let clf = LinearClassifier::train(&xtrain, &ytrain, classes, &sgd_config(cfg))?;
    Ok(ProbeReport {
        classes,
        n_train: train.len(),
        n_test: test.len(),
        train_accuracy: clf.accuracy(&xtrain, &ytrain),
        test_accuracy: clf.accuracy(&xtest, &ytest),
        checksum_before,
        checksum_after: model.store.checksum(),
    })
}

/// Loads `path`, refusing checkpoints whose digest differs from `cfg`'s.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ckpt = checkpoint::load(path)?;
    let mut model = init_model(cfg)?;
    checkpoint::restore(&mut model, &ckpt, &cfg.model_digest())?;
    Ok(model)
}

/// Probe accuracies of `cfg.probe_random_seeds` untrained encoders.
pub fn random_baseline(cfg: &RunConfig, dataset: &[LabeledSequence]) -> Result<Vec<ProbeReport>> {
    (0..cfg.probe_random_seeds as u64)
        .map(|k| {
            let model = Model::new(cfg.model_config()?, derive_seed(cfg.seed, &[6, k]))?;
            probe(cfg, &model, dataset)
        })
        .collect()
}

/// Copy of `dataset` with labels permuted within each split.
pub fn shuffle_labels(dataset: &[LabeledSequence], seed: u64) -> Vec<LabeledSequence> {
    let mut out = dataset.to_vec();
    for split in [Split::Train, Split::Test] {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].split == split).collect();
        let mut labels: Vec<usize> = idx.iter().map(|&i| out[i].label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split as u64])));
        for (&i, l) in idx.iter().zip(labels) {
            out[i].label = l;
        }
    }
    out
}
