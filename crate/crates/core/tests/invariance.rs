mod common;

use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symspot::backbone::{AttentionBlock, Neighborhood};
use symspot::geom::Vec2;
use symspot::losses::{ccl_loss, ccl_pairs};
use symspot::metrics::score_document;
use symspot::model::{Model, ModelConfig, Sample};
use symspot::nn::{ParamStore, Session};
use symspot::points::build_point_set;
use symspot::synth::{generate_document, SynthConfig};
use symspot::tensor::{Tape, Tensor};
use symspot::vgio::{Document, Geometry, PanopticPrediction, Primitive};

fn dyadic_document(seed: u64, n: usize) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::new();
    while prims.len() < n {
        let c = Vec2::new(common::dyadic(&mut rng, 0, 100), common::dyadic(&mut rng, 0, 100));
        let p = match rng.gen_range(0..3) {
            0 => Primitive::line(c, Vec2::new(common::dyadic(&mut rng, 0, 100), common::dyadic(&mut rng, 0, 100))),
            1 => Primitive::circle(c, common::dyadic(&mut rng, 1, 10)),
            _ => Primitive::ellipse(c, common::dyadic(&mut rng, 1, 10), common::dyadic(&mut rng, 1, 10), 0.5),
        };
        if let Ok(p) = p {
            prims.push(p);
        }
    }
    Document {
        id: "dyadic".into(),
        width: 100.0,
        height: 100.0,
        categories: Vec::new(),
        primitives: prims,
    }
}

fn map_document(doc: &Document, f: impl Fn(Vec2) -> Vec2 + Copy, len: f64, turn: f64) -> Document {
    let primitives = doc
        .primitives
        .iter()
        .map(|p| {
            let g = match *p.geometry() {
                Geometry::Line { v1, v2 } => Geometry::Line { v1: f(v1), v2: f(v2) },
                Geometry::Arc { center, radius, a0, a1 } => Geometry::Arc {
                    center: f(center),
                    radius: radius * len,
                    a0: a0 + turn,
                    a1: a1 + turn,
                },
                Geometry::Circle { center, radius } => Geometry::Circle {
                    center: f(center),
                    radius: radius * len,
                },
                Geometry::Ellipse { center, rx, ry, rotation } => Geometry::Ellipse {
                    center: f(center),
                    rx: rx * len,
                    ry: ry * len,
                    rotation: rotation + turn,
                },
            };
            Primitive::new(g, p.semantic, p.instance).unwrap()
        })
        .collect();
    Document {
        primitives,
        ..doc.clone()
    }
}

fn circular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_leaves_features_unchanged(seed in any::<u64>(), tx in -64i32..64, ty in -64i32..64) {
        let doc = dyadic_document(seed, 30);
        let t = Vec2::new(tx as f64 * 1.25, ty as f64 * 0.5);
        let moved = map_document(&doc, |v| v + t, 1.0, 0.0);
        let (a, b) = (build_point_set(&doc), build_point_set(&moved));
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert_eq!(p.feature(), q.feature());
            prop_assert_eq!(p.position + t, q.position);
        }
    }

    #[test]
    fn translation_keeps_arc_features(seed in any::<u64>(), tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = common::random_document(&mut rng, 30, 100.0);
        let t = Vec2::new(tx, ty);
        let moved = map_document(&doc, |v| v + t, 1.0, 0.0);
        let (a, b) = (build_point_set(&doc), build_point_set(&moved));
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!(circular_gap(p.angle, q.angle) < 1e-9);
            prop_assert!((p.length - q.length).abs() < 1e-9);
            prop_assert_eq!(p.kind, q.kind);
        }
    }

    #[test]
    fn rotation_shifts_angles_clockwise(seed in any::<u64>(), theta in -7.0f64..7.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = common::random_document(&mut rng, 30, 100.0);
        let turned = map_document(&doc, |v| v.rotate(theta), 1.0, theta);
        let (a, b) = (build_point_set(&doc), build_point_set(&turned));
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((0.0..TAU).contains(&q.angle));
            if p.kind.is_closed() {
                prop_assert_eq!(q.angle, 0.0);
            } else {
                prop_assert!(circular_gap(q.angle, p.angle - theta) < 1e-9, "{} {} {}", p.angle, q.angle, theta);
            }
            prop_assert!((p.length - q.length).abs() < 1e-9);
            prop_assert_eq!(p.feature()[2..].to_vec(), q.feature()[2..].to_vec());
        }
    }

    #[test]
    fn scaling_scales_lengths_and_positions(seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = common::random_document(&mut rng, 30, 100.0);
        let scaled = map_document(&doc, |v| v * s, s, 0.0);
        let (a, b) = (build_point_set(&doc), build_point_set(&scaled));
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p.length * s - q.length).abs() < 1e-9 * (1.0 + q.length));
            prop_assert!((p.position * s).dist(q.position) < 1e-9 * (1.0 + q.position.norm()));
            if !p.kind.is_closed() {
                prop_assert!(circular_gap(p.angle, q.angle) < 1e-9);
            }
        }
    }

    #[test]
    fn pq_ignores_instance_ids(seed in 0u64..1000, noise in 0.0f64..0.4) {
        let cfg = SynthConfig::default();
        let doc = generate_document(&cfg, "d", seed).unwrap().document;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = PanopticPrediction::from_ground_truth(&doc);
        for e in &mut pred.entities {
            if rng.gen_bool(noise) {
                let c = &doc.categories[rng.gen_range(0..doc.categories.len())];
                e.semantic = Some(c.id);
                e.instance = if c.is_thing { rng.gen_range(0..4) } else { -1 };
            }
        }
        let mut ids: Vec<i64> = (0..64).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let mut renamed = pred.clone();
        for e in &mut renamed.entities {
            if e.instance >= 0 {
                e.instance = ids[e.instance as usize % 64] + 100;
            }
        }
        let mut relabeled_gt = doc.clone();
        for p in &mut relabeled_gt.primitives {
            if p.instance >= 0 {
                p.instance = 1000 - p.instance;
            }
        }
        let base = score_document(&doc, &pred).unwrap().quality();
        prop_assert_eq!(base, score_document(&doc, &renamed).unwrap().quality());
        prop_assert_eq!(base, score_document(&relabeled_gt, &pred).unwrap().quality());
    }
}

#[test]
fn attention_ignores_neighbor_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, k, d) = (20, 6, 16);
    let mut store = ParamStore::<f32>::new();
    let block = AttentionBlock::new(&mut store, "blk", d, true, &mut rng);
    let coords: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l = vec![i];
            while l.len() < k - (i % 3) {
                let j = rng.gen_range(0..n);
                if !l.contains(&j) {
                    l.push(j);
                }
            }
            l
        })
        .collect();
    let shuffled: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.rotate_left(1);
            l.reverse();
            l
        })
        .collect();
    let x: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |lists: &[Vec<usize>]| {
        let nb = Neighborhood::from_lists(lists);
        let rel = nb.relative(&coords, 1.0);
        let mut s = Session::new(&store, false);
        let xv = s.constant(Tensor::new(&[n, d], x.clone()).unwrap());
        let y = block.forward(&mut s, xv, &nb, &rel).unwrap();
        s.tape.value(y).data().to_vec()
    };
    for (a, b) in run(&lists).iter().zip(run(&shuffled)) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn ccl_vanishes_on_pure_neighborhoods() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 12;
    let knn: Vec<Vec<usize>> = (0..n).map(|i| (0..4).map(|o| (i + o) % n).collect()).collect();
    let conn: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 7) % n]).collect();
    let pairs = ccl_pairs(&knn, &conn, &vec![3u8; n]);
    assert_eq!(pairs.kept.len(), n);
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::new(&[n, 5], (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let l = ccl_loss(&mut tape, f, &pairs, 0.7).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn acm_only_changes_points_with_extra_connections() {
    let scfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let doc = common::random_document(&mut rng, 120, 100.0);
    let run = |acm: bool| {
        let mut cfg = ModelConfig::profile("toy", scfg.categories()).unwrap();
        cfg.backbone.use_acm = acm;
        cfg.epsilon = 3.0;
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let sample = Sample::prepare(&doc, &model.config, 0).unwrap();
        let mut s = Session::new(&model.store, false);
        let out = model.forward(&mut s, &sample, symspot::head::Masking::Predicted).unwrap();
        (s.tape.value(out.pyramid.first_stage).clone(), sample)
    };
    let (with, sample) = run(true);
    let (without, _) = run(false);
    let mut changed = 0;
    for i in 0..sample.len() {
        let m = sample.geometry.levels[0].knn.list(i);
        let extra = sample.conn.neighbors[i].iter().any(|j| !m.contains(j));
        if extra {
            assert_ne!(with.row(i), without.row(i), "point {i}");
            changed += 1;
        } else {
            assert_eq!(with.row(i), without.row(i), "point {i}");
        }
    }
    assert!(changed > 0);
}
