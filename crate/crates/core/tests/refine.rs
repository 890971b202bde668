//! Pruning, pooling, root tokens, positional tables and ball mapping.

use hacm::engine::{finite_diff_check, Graph, Tensor, Var};
use hacm::geometry::{ball_project, exp_map_origin, Curvature};
use hacm::network::{Binding, Model, ModelConfig};
use hacm::pipeline::refine_sample;
use hacm::refine::{
    add_positional, map_grid_to_ball, map_to_ball, refined_shape, root_features, sequence_tensor, spatial_prune,
    temporal_pool, TokenGrid,
};
use hacm::skeleton::{SkeletonSequence, BODY25_TORSO};
use hacm::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wave(frames: usize, joints: usize, seed: u64) -> SkeletonSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SkeletonSequence::new(frames, joints, (0..frames * joints * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Kernel averaging the `r` taps of each coordinate channel.
fn averaging_kernel(r: usize) -> Tensor {
    let mut w = vec![0.0; 3 * 3 * r];
    for c in 0..3 {
        for t in 0..r {
            w[c * 3 * r + t * 3 + c] = 1.0 / r as f64;
        }
    }
    Tensor::new(vec![3, 3 * r], w).unwrap()
}

#[test]
fn default_pruning_keeps_eighteen_joints() {
    let x = wave(72, 25, 0);
    let (limbs, torso) = spatial_prune(&x, &BODY25_TORSO).unwrap();
    assert_eq!((limbs.joints(), torso.joints()), (18, 7));
    assert_eq!(refined_shape(72, 25, 3, 7).unwrap(), (24, 18));
    assert!(spatial_prune(&x, &[]).is_err());
    assert!(spatial_prune(&x, &(0..25).collect::<Vec<_>>()).is_err());
    assert!(spatial_prune(&x, &[3, 3]).is_err());
    assert!(spatial_prune(&x, &[25]).is_err());
    assert!(refined_shape(70, 25, 3, 7).is_err());
}

#[test]
fn averaging_pool_keeps_constant_input_constant() {
    for (r, value) in [(2, 0.7), (3, -1.3), (4, 0.1)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4 * r, 5, 3], value)).unwrap();
        let w = g.constant(averaging_kernel(r)).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = temporal_pool(&mut g, x, w, b, r).unwrap();
        assert_eq!(g.shape(y), &[4, 5, 3]);
        let first = g.value(y).data()[0];
        assert!(g.value(y).data().iter().all(|&v| v == first));
        assert!((first - value).abs() < 1e-15);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[7, 2, 3])).unwrap();
    let w = g.constant(averaging_kernel(3)).unwrap();
    let b = g.constant(Tensor::zeros(&[3])).unwrap();
    assert!(temporal_pool(&mut g, x, w, b, 3).is_err());
}

#[test]
fn root_tokens_average_pooled_torso() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = 2;
    let w = rand_tensor(&mut rng, &[4, 3 * r]);
    let b = rand_tensor(&mut rng, &[4]);
    let single = rand_tensor(&mut rng, &[6, 1, 3]);
    let mut g = Graph::new();
    let (wv, bv) = (g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let s = g.constant(single.clone()).unwrap();
    let root = root_features(&mut g, s, wv, bv, r).unwrap();
    let pooled = temporal_pool(&mut g, s, wv, bv, r).unwrap();
    assert_eq!(g.shape(root), &[3, 1, 4]);
    assert_eq!(g.value(root).data(), g.value(pooled).data());

    let same: Vec<f64> = single.data().chunks(3).flat_map(|c| c.repeat(3)).collect();
    let triple = g.constant(Tensor::new(vec![6, 3, 3], same).unwrap()).unwrap();
    let root3 = root_features(&mut g, triple, wv, bv, r).unwrap();
    assert!(g.value(root3).max_abs_diff(g.value(pooled)) < 1e-15);

    let empty = g.constant(Tensor::zeros(&[6, 0, 3])).unwrap();
    assert!(root_features(&mut g, empty, wv, bv, r).is_err());
}

#[test]
fn positional_tables_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = rand_tensor(&mut rng, &[4, 3, 2]);
    let ps = rand_tensor(&mut rng, &[1, 3, 2]);
    let pt = rand_tensor(&mut rng, &[4, 1, 2]);
    let mut g = Graph::new();
    let (ev, sv, tv) = (g.constant(e.clone()).unwrap(), g.constant(ps.clone()).unwrap(), g.constant(pt.clone()).unwrap());
    let out = add_positional(&mut g, ev, sv, tv).unwrap();
    let grid = TokenGrid::from_tensor(g.value(out), 1).unwrap();
    let src = TokenGrid::from_tensor(&e, 1).unwrap();
    for f in 0..4 {
        for j in 0..3 {
            for c in 0..2 {
                let want = src.token(f, j)[c] + pt.data()[f * 2 + c] + ps.data()[j * 2 + c];
                assert!((grid.token(f, j)[c] - want).abs() < 1e-15);
            }
        }
    }
    // same joint, frames 0 and 3: the difference is the temporal rows' difference
    for c in 0..2 {
        let d = grid.token(3, 1)[c] - grid.token(0, 1)[c] - (src.token(3, 1)[c] - src.token(0, 1)[c]);
        assert!((d - (pt.data()[3 * 2 + c] - pt.data()[c])).abs() < 1e-14);
    }
    let zs = g.constant(Tensor::zeros(&[1, 3, 2])).unwrap();
    let zt = g.constant(Tensor::zeros(&[4, 1, 2])).unwrap();
    let same = add_positional(&mut g, ev, zs, zt).unwrap();
    assert_eq!(g.value(same).data(), e.data());
    let bad = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
    assert!(add_positional(&mut g, ev, bad, tv).is_err());
}

#[test]
fn ball_mapping_matches_geometry_tokenwise() {
    let c = Curvature::new(-0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&mut rng, &[5, 2, 4]);
    let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 30.0).collect()).unwrap();
    let mut g = Graph::new();
    let v = g.constant(t.clone()).unwrap();
    let m = map_to_ball(&mut g, v, c).unwrap();
    let grid = TokenGrid::from_tensor(g.value(m), 1).unwrap();
    let src = TokenGrid::from_tensor(&t, 1).unwrap();
    let value_only = map_grid_to_ball(&src, c);
    for f in 0..5 {
        for j in 0..2 {
            let want = ball_project(exp_map_origin(src.token(f, j), c).unwrap().coords(), c).unwrap();
            for k in 0..4 {
                assert!((grid.token(f, j)[k] - want.coords()[k]).abs() < 1e-15);
            }
            for k in 0..4 {
                assert!((grid.token(f, j)[k] - value_only.token(f, j)[k]).abs() < 1e-15);
            }
            assert!(want.norm() < c.radius());
        }
    }
    let z = g.constant(Tensor::zeros(&[2, 2, 4])).unwrap();
    let zm = map_to_ball(&mut g, z, c).unwrap();
    assert!(g.value(zm).data().iter().all(|&v| v == 0.0));
}

/// Pool → positional tables → ball mapping on an `L′=2, J=3, C′=2` grid.
fn refine_chain(g: &mut Graph, x: Var, w: Var, b: Var, ps: Var, pt: Var) -> Result<Var> {
    let e = temporal_pool(g, x, w, b, 2)?;
    let e = add_positional(g, e, ps, pt)?;
    let p = map_to_ball(g, e, Curvature::default())?;
    let sq = g.mul(p, p)?;
    let wsum = g.constant(Tensor::new(vec![2, 3, 2], (0..12).map(|i| 0.3 + 0.1 * i as f64).collect())?)?;
    let s = g.mul(sq, wsum)?;
    g.sum(s)
}

#[test]
fn gradients_flow_through_refinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 6]);
    let b = rand_tensor(&mut rng, &[2]);
    let ps = rand_tensor(&mut rng, &[1, 3, 2]);
    let pt = rand_tensor(&mut rng, &[2, 1, 2]);
    let inputs = [&x, &w, &b, &ps, &pt];
    for slot in 0..5 {
        let r = finite_diff_check(
            |g, v| {
                let mut vars = Vec::new();
                for (i, t) in inputs.iter().enumerate() {
                    vars.push(if i == slot { v } else { g.constant((*t).clone())? });
                }
                refine_chain(g, vars[0], vars[1], vars[2], vars[3], vars[4])
            },
            inputs[slot],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "input {slot}: {}", r.max_rel_error);
    }
}

#[test]
fn default_refinement_shape() {
    let cfg = ModelConfig { enc_layers: 1, dec_layers: 1, ..ModelConfig::default() };
    let model = Model::new(cfg, 0).unwrap();
    let mut g = Graph::new();
    let mut bind = Binding::new(&model.store, true);
    let refined = refine_sample(&mut g, &mut bind, &model, &BODY25_TORSO, &wave(72, 25, 9)).unwrap();
    assert_eq!((refined.ball.frames(), refined.ball.joints(), refined.ball.channels()), (24, 18, 256));
    assert_eq!((refined.root.frames(), refined.root.joints(), refined.root.channels()), (24, 1, 256));
    assert_eq!(g.shape(refined.ball_flat), &[24 * 18, 256]);
    assert_eq!(refined.ball.frame_origin()[1], (3, 6));
    assert!(refined.ball.values().chunks(256).all(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt() < 1.0));
}

#[test]
fn sequence_tensor_layout() {
    let x = wave(2, 3, 5);
    let t = sequence_tensor(&x);
    assert_eq!(t.shape(), &[2, 3, 3]);
    assert_eq!(t.data()[(1 * 3 + 2) * 3 + 1], x.joint(1, 2)[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_partitions_the_joints(
        joints in 2usize..26,
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..8),
        seed in 0u64..100,
    ) {
        let mut torso: Vec<usize> = picks.iter().map(|p| p.index(joints)).collect();
        torso.sort_unstable();
        torso.dedup();
        prop_assume!(torso.len() < joints);
        let x = wave(3, joints, seed);
        let (limbs, t) = spatial_prune(&x, &torso).unwrap();
        prop_assert_eq!(limbs.joints() + t.joints(), joints);
        // each input joint appears exactly once across the two outputs
        let mut found = vec![0; joints];
        for (part, n) in [(&limbs, limbs.joints()), (&t, t.joints())] {
            for j in 0..n {
                let src = (0..joints).find(|&k| x.joint(0, k) == part.joint(0, j) && x.joint(2, k) == part.joint(2, j)).unwrap();
                found[src] += 1;
            }
        }
        prop_assert!(found.iter().all(|&c| c == 1));
        let (lp, jp) = refined_shape(6, joints, 3, torso.len()).unwrap();
        prop_assert_eq!((lp, jp), (2, limbs.joints()));
    }
}
