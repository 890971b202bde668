//! Pre-training loop, training log and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, LabeledSequence, Split};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::losses::{AdamW, LossReport, LrSchedule, ParamSlot};
use crate::network::Model;
use crate::pipeline::{self, derive_seed, PipelineConfig, SampleSeeds};
use crate::skeleton::SkeletonSequence;

pub const CSV_HEADER: &str = "step,lr,l_r,l_c2,total,grad_norm,seconds";
pub const FINAL_CHECKPOINT: &str = "model.bin";
pub const TRAIN_LOG: &str = "train.csv";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

pub fn pipeline_config(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        torso: cfg.torso_joints.clone(),
        mask: cfg.mask_config(),
        mu: cfg.mu,
        contrast: cfg.contrast_mode,
        recon_norm: cfg.recon_norm,
        decoder_positions: cfg.decoder_positions,
    }
}

/// Fresh model for `cfg`; the initialization seed derives from `cfg.seed`.
pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model_config()?, derive_seed(cfg.seed, &[0]))
}

/// Centered crop used for evaluation and the overfit mode.
pub fn eval_view(cfg: &RunConfig, x: &SkeletonSequence) -> Result<SkeletonSequence> {
    data::crop_resample::<ChaCha8Rng>(x, cfg.eval_crop, cfg.frames, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
    pub seconds: Option<f64>,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let secs = self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
        let r = &self.report;
        format!("{},{},{},{},{},{},{}", self.step, self.lr, r.l_r, r.l_c2, r.total, r.grad_norm, secs)
    }
}

pub struct TrainSummary {
    pub model: Model,
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

fn check_joints(cfg: &RunConfig, seqs: &[LabeledSequence]) -> Result<()> {
    if let Some(bad) = seqs.iter().find(|s| s.sequence.joints() != cfg.joints) {
        return Err(Error::Config(format!(
            "dataset sequences have {} joints, config expects {}",
            bad.sequence.joints(),
            cfg.joints
        )));
    }
    Ok(())
}

/// Refuses to overwrite a run whose checkpoint came from a different
/// model configuration.
fn check_existing(out: &Path, digest: &str) -> Result<()> {
    let path = out.join(FINAL_CHECKPOINT);
    if path.exists() {
        let found = checkpoint::read_digest(&path)?;
        if found != digest {
            return Err(Error::DigestMismatch { checkpoint: found, config: digest.to_string() });
        }
    }
    Ok(())
}

fn batch_sizes(n: usize, batch: usize) -> Vec<usize> {
    let mut sizes = vec![batch; n / batch];
    if n % batch >= 2 {
        sizes.push(n % batch);
    }
    sizes
}

/// Runs pre-training on the train split, writing the log, config snapshot
/// and checkpoints under `cfg.out`.
pub fn pretrain(cfg: &RunConfig, dataset: &[LabeledSequence]) -> Result<TrainSummary> {
    cfg.validate()?;
    check_joints(cfg, dataset)?;
    let mut train: Vec<&LabeledSequence> = dataset.iter().filter(|s| s.split == Split::Train).collect();
    if cfg.overfit {
        train.truncate(cfg.batch_size);
    }
    if train.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 training sequences, got {}", train.len())));
    }
    let digest = cfg.model_digest();
    check_existing(&cfg.out, &digest)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_SNAPSHOT), cfg.to_text())?;

    let pcfg = pipeline_config(cfg);
    let mut model = init_model(cfg)?;
    let batches = if cfg.overfit { vec![train.len()] } else { batch_sizes(train.len(), cfg.batch_size) };
    let mut total_steps = cfg.epochs * batches.len();
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let schedule = LrSchedule {
        peak: cfg.lr,
        end: cfg.lr_end,
        warmup_steps: (cfg.warmup_epochs * batches.len()).min(total_steps),
        total_steps,
    };
    let sizes: Vec<usize> = model.store.entries().iter().map(|e| e.value.numel()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &sizes);
    let fixed_views: Vec<SkeletonSequence> = if cfg.overfit {
        train.iter().map(|s| eval_view(cfg, &s.sequence)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut logs = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        if !cfg.overfit {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64])));
        }
        let mut offset = 0;
        for &size in &batches {
            if step >= total_steps {
                break 'epochs;
            }
            let idx = &order[offset..offset + size];
            offset += size;
            let mut seqs = Vec::with_capacity(size);
            let mut seeds = Vec::with_capacity(size);
            for (i, &k) in idx.iter().enumerate() {
                let s = step as u64;
                if cfg.overfit {
                    seqs.push(fixed_views[k].clone());
                    seeds.push(SampleSeeds {
                        mask: derive_seed(cfg.seed, &[3, k as u64]),
                        dropout: derive_seed(cfg.seed, &[4, k as u64]),
                    });
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, s, i as u64]));
                    let p = rng.gen_range(cfg.crop_min..=cfg.crop_max);
                    seqs.push(data::crop_resample(&train[k].sequence, p, cfg.frames, Some(&mut rng))?);
                    seeds.push(SampleSeeds {
                        mask: derive_seed(cfg.seed, &[3, s, i as u64]),
                        dropout: derive_seed(cfg.seed, &[4, s, i as u64]),
                    });
                }
            }
            let lr = schedule.lr(step);
            let out = pipeline::batch_gradients(&model, &pcfg, &seqs, &seeds)?;
            apply_update(&mut model, &mut opt, &out.grads, lr)?;
            let entry = StepLog {
                step,
                lr,
                report: out.report,
                seconds: cfg.log_timing.then(|| start.elapsed().as_secs_f64()),
            };
            let _ = writeln!(csv, "{}", entry.csv_row());
            log::debug!("step {step} lr {lr:.3e} total {:.6}", entry.report.total);
            logs.push(entry);
            step += 1;
        }
        if let Some(last) = logs.last() {
            log::info!("epoch {} step {} total {:.6}", epoch + 1, step, last.report.total);
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let path = cfg.out.join(format!("ckpt_epoch{:04}.bin", epoch + 1));
            checkpoint::save(&path, &digest, &model.store)?;
            checkpoints.push(path);
        }
    }
    fs::write(cfg.out.join(TRAIN_LOG), csv)?;
    let final_path = cfg.out.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_path, &digest, &model.store)?;
    checkpoints.push(final_path);
    Ok(TrainSummary { model, logs, checkpoints })
}

/// One AdamW step over the trainable parameters. Decay applies to linear
/// and pooling weight matrices only; frozen parameters get neither.
pub fn apply_update(model: &mut Model, opt: &mut AdamW, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
    let mut slots: Vec<ParamSlot> = model
        .store
        .entries_mut()
        .zip(grads)
        .map(|(e, g)| ParamSlot {
            name: &e.name,
            grad: if e.trainable { g.as_ref().map(|t| t.data()) } else { None },
            decay: e.trainable && e.name.ends_with(".w"),
            value: e.value.data_mut(),
        })
        .collect();
    opt.step(&mut slots, lr)
}
