mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symspot::conngraph::{build_connections, raw_connections};
use symspot::geom::Vec2;
use symspot::head::knn_interpolate_mask;
use symspot::losses::hungarian_match;
use symspot::metrics::{match_segments, primitive_iou, SymbolSegment};
use symspot::tensor::Tensor;

use common::*;

#[test]
fn connections_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..=200);
        let doc = random_document(&mut rng, n, 200.0);
        let eps = rng.gen_range(0.5..4.0);
        let want = brute_connections(&doc.primitives, eps);
        assert_eq!(raw_connections(&doc.primitives, eps).unwrap(), want);
        let g = build_connections(&doc.primitives, eps, n.max(1), 0).unwrap();
        assert_eq!(g.neighbors, want);
    }
}

#[test]
fn capped_connections_are_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let doc = random_document(&mut rng, 150, 60.0);
    let full = brute_connections(&doc.primitives, 3.0);
    let g = build_connections(&doc.primitives, 3.0, 2, 5).unwrap();
    for (capped, all) in g.neighbors.iter().zip(&full) {
        assert_eq!(capped.len(), all.len().min(2));
        assert!(capped.iter().all(|j| all.contains(j)));
    }
}

fn random_sets(rng: &mut ChaCha8Rng) -> (Vec<Vec2>, Vec<Vec2>) {
    let n = rng.gen_range(1..60);
    let src: Vec<Vec2> = (0..n)
        .map(|_| Vec2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
        .collect();
    let m = rng.gen_range(1..30);
    let tgt = (0..m)
        .map(|_| match rng.gen_range(0..4) {
            0 => src[rng.gen_range(0..n)],
            1 => src[rng.gen_range(0..n)] + Vec2::new(1e-10, -1e-10),
            _ => Vec2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
        })
        .collect();
    (src, tgt)
}

#[test]
fn knn_interpolation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let (src, tgt) = random_sets(&mut rng);
        let level = rng.gen_range(0..4);
        let q = rng.gen_range(1..4);
        let rows: Vec<Vec<f64>> = (0..q).map(|_| (0..src.len()).map(|_| rng.gen()).collect()).collect();
        let mask = Tensor::from_rows(&rows).unwrap();
        let got = knn_interpolate_mask(&mask, &src, &tgt, level);
        assert_eq!(got.shape(), &[q, tgt.len()]);
        for (r, row) in rows.iter().enumerate() {
            let want = brute_interpolate(row, &src, &tgt, 4usize.pow(level as u32));
            for (a, b) in got.row(r).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn exact_match_takes_the_source_value() {
    let src = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
    let mask = Tensor::from_rows(&[vec![0.2, 0.7, 0.9]]).unwrap();
    let got = knn_interpolate_mask(&mask, &src, &src[1..2], 1);
    assert_eq!(got.data(), &[0.7]);
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..500 {
        let o = rng.gen_range(1..=8);
        let g = if o == 8 { rng.gen_range(1..=7) } else { rng.gen_range(1..=8) };
        let cost: Vec<Vec<f64>> = (0..o)
            .map(|_| (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs.len(), o.min(g));
        let mut seen_q = vec![false; o];
        let mut seen_g = vec![false; g];
        for &(q, t) in &m.pairs {
            assert!(!seen_q[q] && !seen_g[t]);
            seen_q[q] = true;
            seen_g[t] = true;
        }
        let unmatched: Vec<usize> = (0..o).filter(|&q| !seen_q[q]).collect();
        assert_eq!(m.unmatched, unmatched);
        let total: f64 = m.pairs.iter().map(|&(q, t)| cost[q][t]).sum();
        assert!((total - exhaustive_assignment(&cost)).abs() < 1e-9);
    }
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, labels: i64) -> Vec<SymbolSegment> {
    let groups = rng.gen_range(1..6);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for e in 0..n {
        if rng.gen_bool(0.8) {
            members[rng.gen_range(0..groups)].push(e);
        }
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, m)| SymbolSegment {
            label: rng.gen_range(0..labels),
            instance: i as i64,
            lengths: Vec::new(),
            members: m,
        })
        .collect()
}

#[test]
fn segment_matching_finds_every_qualifying_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..300 {
        let n = rng.gen_range(1..25);
        let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..50.0)).collect();
        let fill = |mut s: Vec<SymbolSegment>| {
            for seg in &mut s {
                seg.lengths = seg.members.iter().map(|&e| lengths[e]).collect();
            }
            s
        };
        let pred = fill(random_partition(&mut rng, n, 2));
        let gt = fill(random_partition(&mut rng, n, 2));
        let mut want = Vec::new();
        for (i, p) in pred.iter().enumerate() {
            for (j, g) in gt.iter().enumerate() {
                let iou = oracle_iou(&p.members, &g.members, &lengths);
                assert!((primitive_iou(p, g) - iou).abs() < 1e-12);
                if p.label == g.label && iou > 0.5 {
                    want.push((i, j));
                }
            }
        }
        let m = match_segments(&pred, &gt);
        let got: Vec<(usize, usize)> = m.matched.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, want);
        assert_eq!(m.unmatched_pred.len() + got.len(), pred.len());
        assert_eq!(m.unmatched_gt.len() + got.len(), gt.len());
    }
}
