//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output.
//! `HACM_ACCEPT=1,4,6` restricts the run to the listed criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use hacm::cli::{self, Cli};
use hacm::config::RunConfig;
use hacm::data::{self, SyntheticSpec};
use hacm::engine::{relative_error, Graph, Tensor};
use hacm::geometry::{
    ball_project, exp_map_origin, mobius_add, poincare_distance, BallPoint, Curvature,
};
use hacm::losses::{recon_loss_value, ReconNorm};
use hacm::masking::{
    extract_and_concat, gumbel_unmask, plan_masks, unmask_count, MaskConfig, MaskInputs, Projection,
};
use hacm::network::{self, Binding, Model, ModelConfig};
use hacm::pipeline::{self, PipelineConfig, PlanSource, SampleSeeds};
use hacm::probe;
use hacm::refine::TokenGrid;
use hacm::skeleton::SkeletonSequence;
use hacm::train::{self, FINAL_CHECKPOINT, TRAIN_LOG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, max_radius: f64) -> BallPoint {
    let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = rng.gen_range(0.0..max_radius);
    BallPoint::new(dir.iter().map(|v| v / n * r).collect(), Curvature::default()).unwrap()
}

fn gyrovector_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_inv, mut worst_sym, mut worst_tri, mut worst_closed) = (0.0f64, 0.0f64, f64::MIN, 0.0f64);
    for _ in 0..1000 {
        let dim = rng.gen_range(2..=8);
        let [u, v, w] = [0, 1, 2].map(|_| random_ball_point(&mut rng, dim, 0.95));
        let o = BallPoint::origin(dim, Curvature::default());
        let left = mobius_add(&o, &u).map_err(|e| e.to_string())?;
        let right = mobius_add(&u, &o).map_err(|e| e.to_string())?;
        ensure(left == u && right == u, || format!("origin is not an exact identity for {:?}", u.coords()))?;
        worst_inv = worst_inv.max(mobius_add(&u.negate(), &u).unwrap().norm());
        let d = |a: &BallPoint, b: &BallPoint| poincare_distance(a, b).unwrap();
        worst_sym = worst_sym.max((d(&u, &v) - d(&v, &u)).abs());
        worst_tri = worst_tri.max(d(&u, &w) - d(&u, &v) - d(&v, &w));
        worst_closed = worst_closed.max((d(&o, &v) - 2.0 * v.norm().atanh()).abs());
    }
    let elapsed = start.elapsed();
    ensure(worst_inv <= 1e-9, || format!("inverse residual {worst_inv:e}"))?;
    ensure(worst_sym <= 1e-10, || format!("symmetry gap {worst_sym:e}"))?;
    ensure(worst_tri <= 1e-9, || format!("triangle violation {worst_tri:e}"))?;
    ensure(worst_closed <= 1e-12, || format!("closed-form gap {worst_closed:e}"))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "1000 triples: inverse {worst_inv:.1e}, symmetry {worst_sym:.1e}, triangle slack {worst_tri:.1e}, \
         d(0,v) {worst_closed:.1e}, {elapsed:.2?}"
    ))
}

fn ball_containment() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut closest = f64::INFINITY;
    for i in 0..10_000 {
        let c = Curvature::new([-1.0, -0.5, -2.0, -0.1][i % 4]).unwrap();
        let dim = rng.gen_range(1..=16);
        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let norm = 10f64.powf(rng.gen_range(-6.0..=6.0));
        let x: Vec<f64> = dir.iter().map(|v| v / n * norm).collect();
        let e = exp_map_origin(&x, c).map_err(|e| e.to_string())?;
        let p = ball_project(e.coords(), c).map_err(|e| e.to_string())?;
        let radius = 1.0 / c.kappa().sqrt();
        ensure(p.norm() < radius, || format!("norm {} reached radius {radius} at input norm {norm:e}", p.norm()))?;
        closest = closest.min(radius - p.norm());
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("10^4 vectors inside, smallest margin {closest:.3e}, {elapsed:.2?}"))
}

/// Upper 1% point of χ² with 5 degrees of freedom.
const CHI2_5DF_P01: f64 = 15.086;

fn gumbel_distribution() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 6];
    for _ in 0..10_000 {
        counts[gumbel_unmask(&[0.0; 6], 1, 0.9, &mut rng).map_err(|e| e.to_string())?[0]] += 1;
    }
    let expect = 10_000.0 / 6.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let scores = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let hits = (0..1000)
        .filter(|_| gumbel_unmask(&scores, 1, 0.01, &mut rng).unwrap() == vec![2])
        .count();
    let elapsed = start.elapsed();
    ensure(chi2 < CHI2_5DF_P01, || format!("chi2 {chi2:.3} >= {CHI2_5DF_P01}, counts {counts:?}"))?;
    ensure(hits >= 990, || format!("dominant index chosen {hits}/1000"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("chi2 {chi2:.3} (5 df, critical {CHI2_5DF_P01}), dominant {hits}/1000, {elapsed:.2?}"))
}

fn random_grid(rng: &mut ChaCha8Rng, frames: usize, joints: usize, c: usize, ball: bool) -> TokenGrid {
    let mut v: Vec<f64> = (0..frames * joints * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if ball {
        for tok in v.chunks_mut(c) {
            hacm::geometry::map_to_ball_raw(tok, 1.0);
        }
    }
    TokenGrid::new(frames, joints, c, v).unwrap()
}

fn mask_accounting() -> Outcome {
    let c = 8;
    let joints = 18;
    let model = Model::new(ModelConfig { embed_dim: c, heads: 2, hidden: 16, enc_layers: 1, dec_layers: 1, ..ModelConfig::default() }, 4)
        .map_err(|e| e.to_string())?;
    let token = model.store.by_name("mask_token").expect("mask token").data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let proj = Projection { weight: Tensor::zeros(&[c, c]), bias: Tensor::zeros(&[c]) };
    let mut lines = Vec::new();
    for l in [54, 216] {
        let pooled = 2 * l / joints;
        let ball = random_grid(&mut rng, pooled, joints, c, true);
        let euclid = random_grid(&mut rng, pooled, joints, c, false);
        let root = random_grid(&mut rng, pooled, 1, c, true);
        let pruned = SkeletonSequence::new(
            3 * pooled,
            joints,
            (0..3 * pooled * joints * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let inputs = MaskInputs {
            ball: &ball,
            euclid: &euclid,
            root: &root,
            pruned: &pruned,
            r: 3,
            curvature: Curvature::default(),
            psi: &proj,
            phi: &proj,
        };
        for ratio in [0.5, 0.75, 0.9] {
            let cfg = MaskConfig { ratio, ..MaskConfig::default() };
            let out = plan_masks(&cfg, &inputs, &mut rng, 0).map_err(|e| e.to_string())?;
            let p = &out.plan;
            let m = ((1.0 - ratio) * l as f64).ceil() as usize;
            ensure(p.l == l && p.m == m && unmask_count(l, ratio).unwrap() == m, || format!("l={l} ratio={ratio}: M={}", p.m))?;
            let mut distinct = p.idx_umask.clone();
            distinct.sort_unstable();
            distinct.dedup();
            ensure(distinct.len() == 2 * m, || format!("l={l} ratio={ratio}: {} distinct of {}", distinct.len(), 2 * m))?;
            let offset_ok = p.idx_umask[..m] == p.idx_odd[..]
                && p.idx_umask[m..].iter().zip(&p.idx_even).all(|(&u, &e)| u == e + l)
                && p.idx_odd.iter().chain(&p.idx_even).all(|&q| q < l);
            ensure(offset_ok, || format!("l={l} ratio={ratio}: offset rule violated"))?;

            // gather the unmasked tokens, scatter them back between mask tokens, gather again
            let (odd, even) = (ball.select_frames(&(1..pooled).step_by(2).collect::<Vec<_>>()), ball.select_frames(&(0..pooled).step_by(2).collect::<Vec<_>>()));
            let (extracted, plan2) = extract_and_concat(&odd, &even, &p.idx_odd, &p.idx_even, p.tau, p.seed).map_err(|e| e.to_string())?;
            ensure(plan2 == *p, || "extraction rebuilt a different plan".into())?;
            let mut g = Graph::new();
            let mut bind = Binding::new(&model.store, true);
            let enc = g.constant(extracted.clone()).unwrap();
            let full = network::insert_mask_tokens(&mut g, &mut bind, &model, enc, p).map_err(|e| e.to_string())?;
            let back = g.gather_rows(full, &p.idx_umask).unwrap();
            ensure(g.value(back) == &extracted, || format!("l={l} ratio={ratio}: gather after scatter differs"))?;
            let grid = g.value(full);
            for q in 0..2 * l {
                let row = grid.row(q);
                let want: &[f64] = match p.idx_umask.iter().position(|&u| u == q) {
                    Some(_) if q < l => odd.token(q / joints, q % joints),
                    Some(_) => even.token((q - l) / joints, (q - l) % joints),
                    None => &token,
                };
                ensure(row == want, || format!("l={l} ratio={ratio}: canonical row {q} differs"))?;
            }
            lines.push(format!("({l},{ratio})→2M={}", 2 * m));
        }
    }
    Ok(format!("{} exact round trips", lines.join(" ")))
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        joints: 3,
        frames: 8,
        pool_r: 2,
        embed_dim: 8,
        heads: 2,
        hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        curvature: Curvature::default(),
        dropout: 0.0,
    };
    Model::new(cfg, seed).unwrap()
}

fn tiny_batch(seed: u64) -> Vec<SkeletonSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let phase: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..6.0)).collect();
            let coords = (0..8 * 12).map(|i| (0.4 * (i / 12) as f64 + phase[i % 12]).sin() * 0.5).collect();
            SkeletonSequence::new(8, 4, coords).unwrap()
        })
        .collect()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut model = tiny_model(5);
    let pcfg = PipelineConfig {
        torso: vec![0],
        mask: MaskConfig { use_gumbel: false, ..MaskConfig::default() },
        mu: 1.0,
        ..PipelineConfig::default()
    };
    let seqs = tiny_batch(6);
    let seeds = [SampleSeeds { mask: 1, dropout: 2 }, SampleSeeds { mask: 3, dropout: 4 }];
    let analytic = pipeline::batch_gradients(&model, &pcfg, &seqs, &seeds).map_err(|e| e.to_string())?;
    let eval = |m: &Model| -> Result<(f64, Vec<hacm::masking::MaskPlan>), String> {
        let mut g = Graph::new();
        let mut bind = Binding::new(&m.store, true);
        let (total, _, _, fwd) = pipeline::batch_loss(&mut g, &mut bind, m, &pcfg, &seqs, &seeds).map_err(|e| e.to_string())?;
        Ok((g.value(total).item().unwrap(), fwd.into_iter().map(|f| f.outcome.plan).collect()))
    };
    let (f0, base_plans) = eval(&model)?;
    ensure(base_plans == analytic.plans, || "plans differ between the two gradient paths".into())?;
    let eps = 1e-5;
    // round-off of a central difference quotient at this loss scale; below it
    // the relative error compares noise with noise, so those coordinates are
    // held to an absolute bound instead
    let floor = 100.0 * f64::EPSILON * f0.abs().max(1.0) / eps;
    let (mut worst, mut worst_at, mut checked, mut tiny, mut worst_abs) = (0.0f64, String::new(), 0usize, 0usize, 0.0f64);
    let names: Vec<(usize, String, bool, usize)> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.name.clone(), e.trainable, e.value.numel()))
        .collect();
    for (i, name, trainable, numel) in names {
        if !trainable {
            continue;
        }
        let grad = analytic.grads[i].as_ref().ok_or_else(|| format!("no gradient for {name}"))?;
        for k in 0..numel {
            let orig = model.store.entries()[i].value.data()[k];
            let at = |v: f64, model: &mut Model| -> Result<f64, String> {
                let entry = model.store.entries_mut().nth(i).unwrap();
                entry.value.data_mut()[k] = v;
                let (f, plans) = eval(model)?;
                ensure(plans == base_plans, || format!("mask plan changed when perturbing {name}[{k}]"))?;
                Ok(f)
            };
            let fp = at(orig + eps, &mut model)?;
            let fm = at(orig - eps, &mut model)?;
            at(orig, &mut model)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[k];
            checked += 1;
            if a.abs().max(numeric.abs()) < floor {
                tiny += 1;
                worst_abs = worst_abs.max((a - numeric).abs());
                continue;
            }
            let err = relative_error(a, numeric);
            if err > worst {
                worst = err;
                worst_at = format!("{name}[{k}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e} at {worst_at}"))?;
    ensure(worst_abs < floor, || format!("absolute error {worst_abs:.3e} above round-off floor {floor:.1e}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "{checked} coordinates at total {f0:.4}, max relative error {worst:.2e} ({worst_at}); {tiny} below the \
         round-off floor {floor:.1e} agree within {worst_abs:.1e}; plan fixed, {elapsed:.1?}"
    ))
}

fn loss_locality() -> Outcome {
    // default token geometry (L=72, r=3, J′=18 → l=216, M=22) on a narrow model
    let cfg = ModelConfig { embed_dim: 16, heads: 2, hidden: 32, enc_layers: 1, dec_layers: 1, ..ModelConfig::default() };
    let model = Model::new(cfg, 6).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { samples_per_class: 1, test_per_class: 0, frames: 72, ..SyntheticSpec::default() };
    let seq = data::generate(&spec).map_err(|e| e.to_string())?.remove(0).sequence;
    let pcfg = PipelineConfig::default();
    let mut g = Graph::new();
    let mut bind = Binding::new(&model.store, true);
    let f = pipeline::forward_sample(&mut g, &mut bind, &model, &pcfg, &seq, SampleSeeds { mask: 7, dropout: 8 }, PlanSource::Sample, true)
        .map_err(|e| e.to_string())?;
    let d = f.decoded.as_ref().unwrap();
    let (plan, target) = (&f.outcome.plan, &d.target);
    let pred = g.value(d.pred).clone();
    let (l, m) = (plan.l, plan.m);
    ensure((l, m) == (216, 22), || format!("unexpected token counts l={l}, M={m}"))?;
    let lr = |p: &Tensor| recon_loss_value(p, target, plan, ReconNorm::Masked).unwrap();
    let base = lr(&pred);
    ensure((g.value(d.l_r).item().unwrap() - base).abs() < 1e-15, || "graph and direct L_r disagree".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = pred.shape()[1];
    for scale in [1e-8, 1.0, 1e6] {
        let mut moved = pred.clone();
        for &q in &plan.idx_umask {
            for k in 0..w {
                moved.data_mut()[q * w + k] += scale * rng.gen_range(-1.0..1.0);
            }
        }
        ensure(lr(&moved).to_bits() == base.to_bits(), || format!("unmasked perturbation of scale {scale:e} moved L_r"))?;
    }

    let masked = plan.masked();
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let q = masked[rng.gen_range(0..masked.len())];
        let k = rng.gen_range(0..w);
        let delta = [1e-3, 0.1, 1.0, -2.5, 10.0][trial % 5];
        let mut at = pred.clone();
        at.data_mut()[q * w + k] = target.values.data()[q * w + k];
        let before = lr(&at);
        at.data_mut()[q * w + k] += delta;
        let change = lr(&at) - before;
        worst = worst.max((change - delta * delta / (2.0 * (l - m) as f64)).abs());
    }
    ensure(worst < 1e-9, || format!("masked perturbation off by {worst:e}"))?;
    Ok(format!("unmasked perturbations bit-identical; 200 masked δ within {worst:.1e} of δ²/(2·{})", l - m))
}

fn scaled_config(out: &Path) -> RunConfig {
    RunConfig { embed_dim: 64, hidden: 256, out: out.to_path_buf(), ..RunConfig::default() }
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { samples_per_class: 1, test_per_class: 0, ..SyntheticSpec::default() };
    let dataset = data::generate(&spec).map_err(|e| e.to_string())?;
    let cfg = RunConfig { overfit: true, batch_size: 4, epochs: 500, ..scaled_config(dir.path()) };
    let start = Instant::now();
    let summary = train::pretrain(&cfg, &dataset).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let first = summary.logs[0].report.total;
    let (best_step, best) = summary
        .logs
        .iter()
        .map(|l| (l.step, l.report.total))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let reached = summary.logs.iter().find(|l| l.report.total < 0.1 * first).map(|l| l.step);
    let last = summary.logs.last().unwrap().report;
    let detail = format!(
        "{} steps, total {first:.4} → {:.4} at step {best_step} ({:.1}% drop), final L_r {:.4} L_c2 {:.4}, {elapsed:.1?}",
        summary.logs.len(),
        best,
        100.0 * (1.0 - best / first),
        last.l_r,
        last.l_c2
    );
    ensure(summary.logs.len() <= 500, || format!("ran {} steps", summary.logs.len()))?;
    ensure(reached.is_some(), || format!("no 90% drop: {detail}"))?;
    within(elapsed, Duration::from_secs(600)).map_err(|e| format!("{e}; {detail}"))?;
    Ok(format!("90% drop first at step {}; {detail}", reached.unwrap()))
}

fn representation_quality() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = data::generate(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let cfg = RunConfig { epochs: 30, ..scaled_config(dir.path()) };
    let start = Instant::now();
    let summary = train::pretrain(&cfg, &dataset).map_err(|e| e.to_string())?;
    let trained = probe::probe(&cfg, &summary.model, &dataset).map_err(|e| e.to_string())?;
    let random = probe::random_baseline(&cfg, &dataset).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mean = random.iter().map(|r| r.test_accuracy).sum::<f64>() / random.len() as f64;
    let detail = format!(
        "{} train / {} test, probe test accuracy {:.4} (train {:.4}), random-encoder mean {mean:.4} over {} seeds, \
         loss {:.4} → {:.4}, {elapsed:.1?}",
        trained.n_train,
        trained.n_test,
        trained.test_accuracy,
        trained.train_accuracy,
        random.len(),
        summary.logs[0].report.total,
        summary.logs.last().unwrap().report.total
    );
    ensure(trained.n_train == 256 && random.len() == 5, || detail.clone())?;
    ensure(trained.checksum_before == trained.checksum_after, || format!("encoder changed during probe; {detail}"))?;
    ensure(trained.test_accuracy > 2.0 * trained.chance(), || format!("not above 2× chance; {detail}"))?;
    ensure(trained.test_accuracy > mean, || format!("not above random encoders; {detail}"))?;
    within(elapsed, Duration::from_secs(1800)).map_err(|e| format!("{e}; {detail}"))?;
    Ok(detail)
}

const SMALL_RUN: &[&str] = &[
    "embed_dim=16",
    "heads=2",
    "hidden=32",
    "enc_layers=2",
    "dec_layers=1",
    "epochs=2",
    "batch_size=4",
    "warmup_epochs=1",
];

fn pretrain_cli(data: &Path, out: &Path, extra: &[&str]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut args = vec!["hacm".to_string(), "pretrain".into(), "--data".into(), data.display().to_string()];
    args.extend(["--out".into(), out.display().to_string()]);
    for kv in SMALL_RUN.iter().chain(extra) {
        args.extend(["--set".into(), kv.to_string()]);
    }
    let cli = Cli::try_parse_from(&args).map_err(|e| e.to_string())?;
    cli::run(&cli).map_err(|e| e.to_string())?;
    let read = |f: &str| fs::read(out.join(f)).map_err(|e| e.to_string());
    Ok((read(FINAL_CHECKPOINT)?, read(TRAIN_LOG)?))
}

fn small_dataset(dir: &Path) -> Result<std::path::PathBuf, String> {
    let path = dir.join("small.seq");
    let spec = SyntheticSpec { samples_per_class: 4, test_per_class: 1, ..SyntheticSpec::default() };
    data::save(&path, &data::generate(&spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(path)
}

fn totals(csv: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(csv).lines().skip(1).map(|r| r.split(',').nth(4).unwrap_or("").to_string()).collect()
}

fn ablations() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = small_dataset(dir.path())?;
    let (_, base) = pretrain_cli(&data, &dir.path().join("base"), &[])?;
    let (_, no_gumbel) = pretrain_cli(&data, &dir.path().join("no_gumbel"), &["use_gumbel=false"])?;
    let (_, no_contrast) = pretrain_cli(&data, &dir.path().join("mu0"), &["mu=0"])?;
    let (b, g, c) = (totals(&base), totals(&no_gumbel), totals(&no_contrast));
    ensure(!b.is_empty() && b.len() == g.len() && b.len() == c.len(), || "runs logged different step counts".into())?;
    ensure(b != g && b != c && g != c, || "ablation trajectories coincide".into())?;
    Ok(format!(
        "{} steps each; final totals: default {}, no Gumbel {}, μ=0 {}",
        b.len(),
        b.last().unwrap(),
        g.last().unwrap(),
        c.last().unwrap()
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = small_dataset(dir.path())?;
    let (ca, la) = pretrain_cli(&data, &dir.path().join("a"), &[])?;
    let (cb, lb) = pretrain_cli(&data, &dir.path().join("b"), &[])?;
    ensure(ca == cb, || "checkpoints differ".into())?;
    ensure(la == lb, || "training logs differ".into())?;
    Ok(format!("checkpoint {} bytes and log {} bytes identical", ca.len(), la.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gyrovector suite", gyrovector_suite),
        (2, "ball containment", ball_containment),
        (3, "Gumbel-Max distribution", gumbel_distribution),
        (4, "mask accounting", mask_accounting),
        (5, "full-pipeline gradient check", gradient_check),
        (6, "masked-loss locality", loss_locality),
        (7, "single-batch overfit", overfit),
        (8, "representation quality", representation_quality),
        (9, "ablation trajectories", ablations),
        (10, "determinism", determinism),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("HACM_ACCEPT").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    // `cargo test -- <filter>` passes libtest arguments; skip everything when filtering on other targets
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} [{name}]: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} [{name}]: FAIL  {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
