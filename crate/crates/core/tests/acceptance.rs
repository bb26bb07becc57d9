//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::f64::consts::TAU;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symspot::backbone::{AttentionBlock, Neighborhood};
use symspot::conngraph::build_connections;
use symspot::geom::Vec2;
use symspot::head::{knn_interpolate_mask, DownsampleMode};
use symspot::losses::{ccl_loss, ccl_pairs, hungarian_match};
use symspot::metrics::{panoptic_quality, primitive_iou, score_document, SymbolSegment};
use symspot::nn::{ParamStore, Session};
use symspot::points::build_point_set;
use symspot::synth::{generate_corpus, SynthConfig};
use symspot::tensor::{Tape, Tensor};
use symspot::trainer::{
    checkpoint_base, evaluate, oracle_predictions, score_predictions, write_evaluation, TrainConfig, Trainer,
};
use symspot::vgio::{Document, PanopticPrediction, Primitive};

use common::grad;

const C1_DOCS: usize = 100;
const C1_MAX_PRIMS: usize = 200;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_SETS: usize = 1000;
const C2_TOL: f64 = 1e-12;
const C3_TRIALS: usize = 500;
const C3_MAX_SIDE: usize = 7;
const C4_TOL: f64 = 1e-12;
const C4_DOCS: usize = 50;
const C6_ANGLE_TOL: f64 = 1e-9;
const C6_ATTN_TOL: f64 = 1e-6;

const OVERFIT_DOCS: usize = 8;
const OVERFIT_MAX_EPOCHS: usize = 500;
const OVERFIT_EVAL_EVERY: usize = 10;
const OVERFIT_PQ: f64 = 0.95;
const OVERFIT_BUDGET: Duration = Duration::from_secs(20 * 60);

const SMOKE_TRAIN: usize = 200;
const SMOKE_EVAL: usize = 50;
const SMOKE_EPOCHS: usize = 40;
const SMOKE_LR: f64 = 3e-4;
const SMOKE_PQ: f64 = 0.60;

type Outcome = Result<String, String>;

fn report(id: usize, name: &str, start: Instant, r: &Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(d) => println!("C{id} PASS {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("C{id} FAIL {name}: {d} [{secs:.1}s]"),
    }
    r.is_ok()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn connections() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let docs: Vec<(Document, f64)> = (0..C1_DOCS)
        .map(|_| {
            let n = rng.gen_range(1..=C1_MAX_PRIMS);
            (common::random_document(&mut rng, n, 200.0), rng.gen_range(0.5..4.0))
        })
        .collect();
    let start = Instant::now();
    let mut edges = 0;
    for (i, (doc, eps)) in docs.iter().enumerate() {
        let want = common::brute_connections(&doc.primitives, *eps);
        let got = build_connections(&doc.primitives, *eps, C1_MAX_PRIMS, 0).map_err(|e| e.to_string())?;
        ensure(got.neighbors == want, || format!("document {i} differs from brute force"))?;
        edges += got.edge_count();
    }
    let t = start.elapsed();
    ensure(t < C1_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("{C1_DOCS} documents, {edges} directed edges, {:.2}s", t.as_secs_f64()))
}

fn interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut exact) = (0.0f64, 0usize);
    for _ in 0..C2_SETS {
        let n = rng.gen_range(1..60);
        let src: Vec<Vec2> = (0..n)
            .map(|_| Vec2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let tgt: Vec<Vec2> = (0..rng.gen_range(1..30))
            .map(|_| match rng.gen_range(0..4) {
                0 => {
                    exact += 1;
                    src[rng.gen_range(0..n)]
                }
                1 => {
                    exact += 1;
                    src[rng.gen_range(0..n)] + Vec2::new(1e-10, -1e-10)
                }
                _ => Vec2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
            })
            .collect();
        let level = rng.gen_range(0..4usize);
        let row: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let got = knn_interpolate_mask(&Tensor::from_rows(&[row.clone()]).unwrap(), &src, &tgt, level);
        let want = common::brute_interpolate(&row, &src, &tgt, 4usize.pow(level as u32));
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= C2_TOL, || format!("max deviation {worst:e}"))?;
    Ok(format!("{C2_SETS} sets, {exact} coincident targets, max deviation {worst:e}"))
}

fn matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..C3_TRIALS {
        let small = rng.gen_range(1..=C3_MAX_SIDE);
        let large = rng.gen_range(small..=C3_MAX_SIDE + 1);
        let (o, g) = if rng.gen_bool(0.5) { (small, large) } else { (large, small) };
        let cost: Vec<Vec<f64>> = (0..o).map(|_| (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let m = hungarian_match(&cost).map_err(|e| e.to_string())?;
        let total: f64 = m.pairs.iter().map(|&(q, t)| cost[q][t]).sum();
        let best = common::exhaustive_assignment(&cost);
        ensure(m.pairs.len() == o.min(g) && (total - best).abs() < 1e-9, || {
            format!("trial {trial} ({o}x{g}): {total} vs optimum {best}")
        })?;
    }
    Ok(format!("{C3_TRIALS} trials, min side <= {C3_MAX_SIDE}"))
}

fn metric_identities() -> Outcome {
    let seg = |members: Vec<usize>, lengths: Vec<f64>| SymbolSegment {
        label: 1,
        instance: 0,
        members,
        lengths,
    };
    let iou = primitive_iou(&seg(vec![1, 2], vec![1.0, 3.0]), &seg(vec![1, 3], vec![1.0, 1.0]));
    ensure((iou - 0.25).abs() < C4_TOL, || format!("worked IoU {iou}"))?;
    let q = panoptic_quality(&[0.8], 0, 1);
    ensure((q.pq - 0.8 * 2.0 / 3.0).abs() < C4_TOL && (q.rq - 2.0 / 3.0).abs() < C4_TOL, || {
        format!("worked PQ {q:?}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..200 {
        let tp: Vec<f64> = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0.5001..1.0)).collect();
        let q = panoptic_quality(&tp, rng.gen_range(0..10), rng.gen_range(0..10));
        ensure((q.pq - q.sq * q.rq).abs() < C4_TOL, || format!("PQ != SQ*RQ for {q:?}"))?;
    }
    let (docs, _) = generate_corpus(&SynthConfig { seed: 104, ..SynthConfig::default() }, C4_DOCS).unwrap();
    let (per_doc, corpus) = score_predictions(&docs, &oracle_predictions(&docs)).map_err(|e| e.to_string())?;
    ensure(corpus.pq == 1.0 && corpus.f1 == 1.0 && corpus.wf1 == 1.0, || format!("oracle corpus {corpus:?}"))?;
    for s in &per_doc {
        let (f1, wf1) = s.semantic.f1();
        ensure(s.quality().pq == 1.0 && f1 == 1.0 && wf1 == 1.0, || format!("oracle document {}", s.id))?;
    }
    Ok(format!("IoU {iou}, PQ {:.12}, oracle PQ/F1/wF1 = 1 on {C4_DOCS} documents", q.pq))
}

fn gradients() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut count = 0;
    for case in grad::op_cases(105) {
        let e = grad::check_op(&case);
        count += 1;
        if e > worst.0 {
            worst = (e, case.name);
        }
    }
    ensure(worst.0 < grad::TOL, || format!("op {} relative error {:e}", worst.1, worst.0))?;
    let r = grad::composite_check(10);
    ensure(r.points <= 16, || format!("toy has {} points", r.points))?;
    ensure(r.worst < grad::TOL, || format!("loss gradient {} relative error {:e}", r.worst_param, r.worst))?;
    Ok(format!(
        "{count} op cases (worst {:e}), full loss on {} points: {} elements, worst {:e}",
        worst.0, r.points, r.checked, r.worst
    ))
}

fn moved(doc: &Document, f: impl Fn(Vec2) -> Vec2 + Copy, turn: f64) -> Document {
    let primitives = doc
        .primitives
        .iter()
        .map(|p| Primitive::new(p.geometry().transformed(f, |l| l, |a| a + turn), p.semantic, p.instance).unwrap())
        .collect();
    Document {
        primitives,
        ..doc.clone()
    }
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    // translation: dyadic lines and closed kinds are exact in floating point
    for _ in 0..50 {
        let prims: Vec<Primitive> = (0..40)
            .filter_map(|i| {
                let c = Vec2::new(common::dyadic(&mut rng, 0, 100), common::dyadic(&mut rng, 0, 100));
                let r = common::dyadic(&mut rng, 1, 10);
                match i % 3 {
                    0 => Primitive::line(c, Vec2::new(common::dyadic(&mut rng, 0, 100), common::dyadic(&mut rng, 0, 100))),
                    1 => Primitive::circle(c, r),
                    _ => Primitive::ellipse(c, r, r * 0.5, 0.25),
                }
                .ok()
            })
            .collect();
        let doc = Document {
            id: "t".into(),
            width: 100.0,
            height: 100.0,
            categories: Vec::new(),
            primitives: prims,
        };
        let t = Vec2::new(common::dyadic(&mut rng, -50, 50), common::dyadic(&mut rng, -50, 50));
        let (a, b) = (build_point_set(&doc), build_point_set(&moved(&doc, |v| v + t, 0.0)));
        for (p, q) in a.points.iter().zip(&b.points) {
            ensure(p.feature() == q.feature() && p.position + t == q.position, || {
                format!("translation changed point {}", p.source_index)
            })?;
        }
    }
    // rotation covariance of α
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let doc = common::random_document(&mut rng, 40, 100.0);
        let theta = rng.gen_range(-TAU..TAU);
        let turned = moved(&doc, |v| v.rotate(theta), theta);
        let (a, b) = (build_point_set(&doc), build_point_set(&turned));
        for (p, q) in a.points.iter().zip(&b.points) {
            if !p.kind.is_closed() {
                let d = (q.angle - (p.angle - theta)).rem_euclid(TAU);
                worst = worst.max(d.min(TAU - d));
            }
            ensure(p.feature()[2..] == q.feature()[2..] && (p.length - q.length).abs() < C6_ANGLE_TOL, || {
                format!("rotation changed the length or kind of point {}", p.source_index)
            })?;
        }
    }
    ensure(worst < C6_ANGLE_TOL, || format!("angle deviation {worst:e}"))?;
    // PQ under instance renaming
    let (docs, _) = generate_corpus(&SynthConfig { seed: 106, ..SynthConfig::default() }, 20).unwrap();
    for doc in &docs {
        let mut pred = PanopticPrediction::from_ground_truth(doc);
        for e in &mut pred.entities {
            if rng.gen_bool(0.2) {
                e.semantic = None;
                e.instance = -1;
            }
        }
        let mut renamed = pred.clone();
        for e in &mut renamed.entities {
            if e.instance >= 0 {
                e.instance = 977 - 3 * e.instance;
            }
        }
        let a = score_document(doc, &pred).map_err(|e| e.to_string())?.quality();
        let b = score_document(doc, &renamed).map_err(|e| e.to_string())?.quality();
        ensure(a == b, || format!("renaming instances changed PQ on {}", doc.id))?;
    }
    // attention under neighbor reordering, single precision
    let (n, d) = (24, 16);
    let mut store = ParamStore::<f32>::new();
    let block = AttentionBlock::new(&mut store, "blk", d, true, &mut rng);
    let coords: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.gen(), rng.gen())).collect();
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l = vec![i];
            while l.len() < 8 - i % 3 {
                let j = rng.gen_range(0..n);
                if !l.contains(&j) {
                    l.push(j);
                }
            }
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
    let reversed: Vec<Vec<usize>> = lists.iter().map(|l| l.iter().rev().copied().collect()).collect();
    let attn = run(&lists)
        .iter()
        .zip(run(&reversed))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure((attn as f64) <= C6_ATTN_TOL, || format!("attention deviation {attn:e}"))?;
    // contrastive loss on label-pure neighborhoods
    let knn: Vec<Vec<usize>> = (0..n).map(|i| (0..4).map(|o| (i + o) % n).collect()).collect();
    let pairs = ccl_pairs(&knn, &vec![Vec::new(); n], &vec![0u8; n]);
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::new(&[n, 5], (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let l = ccl_loss(&mut tape, f, &pairs, 1.0).map_err(|e| e.to_string())?;
    let ccl = tape.value(l).item();
    ensure(ccl == 0.0, || format!("pure CCL = {ccl}"))?;
    Ok(format!(
        "translation exact, angle deviation {worst:.1e}, PQ renaming-invariant, attention deviation {attn:.1e}, pure CCL 0"
    ))
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: OVERFIT_MAX_EPOCHS,
        ..TrainConfig::default()
    }
}

struct OverfitRun {
    epochs: usize,
    pq: f64,
    loss5: f64,
    loss50: f64,
    elapsed: Duration,
}

/// Trains until the training-set PQ reaches the target (checked every few
/// epochs) and writes the final checkpoint and evaluation under `out`.
fn overfit_run(docs: &[Document], categories: &[symspot::vgio::Category], out: &Path) -> Result<OverfitRun, String> {
    let start = Instant::now();
    let cfg = overfit_config();
    let mut t = Trainer::<f32>::new(cfg.clone(), categories.to_vec()).map_err(|e| e.to_string())?;
    while t.epoch < cfg.epochs {
        t.run_epoch(docs).map_err(|e| e.to_string())?;
        if t.epoch % OVERFIT_EVAL_EVERY == 0 {
            let pq = evaluate(&t.model, docs, cfg.seed, 1).map_err(|e| e.to_string())?.1.corpus.pq;
            if pq >= OVERFIT_PQ {
                break;
            }
        }
    }
    t.save(&checkpoint_base(out)).map_err(|e| e.to_string())?;
    let (preds, rep) = evaluate(&t.model, docs, cfg.seed, 1).map_err(|e| e.to_string())?;
    write_evaluation(out, &preds, &rep).map_err(|e| e.to_string())?;
    let h = &t.history;
    Ok(OverfitRun {
        epochs: t.epoch,
        pq: rep.corpus.pq,
        loss5: h.get(4).map_or(f64::NAN, |r| r.total),
        loss50: h.get(49).map_or(f64::NAN, |r| r.total),
        elapsed: start.elapsed(),
    })
}

fn overfit(docs: &[Document], categories: &[symspot::vgio::Category], out: &Path) -> Outcome {
    let r = overfit_run(docs, categories, out)?;
    let detail = format!(
        "train PQ {:.4} after {} epochs in {:.0}s; loss epoch 5 {:.3} -> epoch 50 {:.3}",
        r.pq,
        r.epochs,
        r.elapsed.as_secs_f64(),
        r.loss5,
        r.loss50
    );
    ensure(r.pq >= OVERFIT_PQ && r.elapsed <= OVERFIT_BUDGET, || detail.clone())?;
    ensure(r.loss50 < r.loss5, || format!("loss did not trend down: {detail}"))?;
    Ok(detail)
}

fn smoke_config() -> TrainConfig {
    let mut c = TrainConfig {
        epochs: SMOKE_EPOCHS,
        lr: SMOKE_LR,
        ..TrainConfig::default()
    };
    for k in ["data.augment_rotate", "data.augment_flip", "data.augment_scale", "data.augment_shift"] {
        c.set(k, "true").unwrap();
    }
    c
}

fn smoke_pq(cfg: TrainConfig, train: &[Document], held: &[Document], categories: &[symspot::vgio::Category]) -> Result<f64, String> {
    let mut t = Trainer::<f32>::new(cfg.clone(), categories.to_vec()).map_err(|e| e.to_string())?;
    t.train(train, None, |_| {}).map_err(|e| e.to_string())?;
    Ok(evaluate(&t.model, held, cfg.seed, 1).map_err(|e| e.to_string())?.1.corpus.pq)
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure(x == y, || format!("{n} differs between runs"))?;
    }
    Ok(())
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize| filter.is_empty() || filter.iter().any(|f| f == &format!("c{id}") || f == &id.to_string());
    let mut all = true;
    let mut step = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            let start = Instant::now();
            let r = f();
            all &= report(id, name, start, &r);
        }
    };

    step(1, "connection oracle", &mut connections);
    step(2, "knn interpolation oracle", &mut interpolation);
    step(3, "matching oracle", &mut matching);
    step(4, "metric identities", &mut metric_identities);
    step(5, "gradient checks", &mut gradients);
    step(6, "invariance suite", &mut invariances);

    let scfg = SynthConfig::default();
    let categories = scfg.categories();
    let (overfit_docs, _) = generate_corpus(&scfg, OVERFIT_DOCS).unwrap();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    step(7, "overfit run", &mut || overfit(&overfit_docs, &categories, first.path()));

    let (smoke, _) = generate_corpus(&scfg, SMOKE_TRAIN + SMOKE_EVAL).unwrap();
    let (train, held) = smoke.split_at(SMOKE_TRAIN);
    let mut full_pq = None;
    step(8, "generalization smoke", &mut || {
        let pq = smoke_pq(smoke_config(), train, held, &categories)?;
        full_pq = Some(pq);
        let detail = format!("held-out PQ {pq:.4} after {SMOKE_EPOCHS} epochs (threshold {SMOKE_PQ})");
        ensure(pq >= SMOKE_PQ, || detail.clone())?;
        Ok(detail)
    });

    step(9, "ablation directions", &mut || {
        let full = match full_pq {
            Some(v) => v,
            None => smoke_pq(smoke_config(), train, held, &categories)?,
        };
        let baseline = smoke_pq(
            TrainConfig {
                use_acm: false,
                use_ccl: false,
                ..smoke_config()
            },
            train,
            held,
            &categories,
        )?;
        let bilinear = smoke_pq(
            TrainConfig {
                downsample: DownsampleMode::Bilinear,
                ..smoke_config()
            },
            train,
            held,
            &categories,
        )?;
        println!("    variant                  held-out PQ");
        println!("    acm+ccl, knn_interp      {full:.4}");
        println!("    baseline, knn_interp     {baseline:.4}");
        println!("    acm+ccl, bilinear        {bilinear:.4}");
        let mut flags = Vec::new();
        if full < baseline {
            flags.push(format!("INVERTED acm+ccl {full:.4} < baseline {baseline:.4}"));
        }
        if full < bilinear {
            flags.push(format!("INVERTED knn_interp {full:.4} < bilinear {bilinear:.4}"));
        }
        let detail = format!("acm+ccl {full:.4} vs baseline {baseline:.4}; knn_interp {full:.4} vs bilinear {bilinear:.4}");
        ensure(flags.is_empty(), || format!("{}; {detail}", flags.join("; ")))?;
        Ok(detail)
    });

    step(10, "determinism", &mut || {
        if !first.path().join("metrics.json").exists() {
            overfit_run(&overfit_docs, &categories, first.path())?;
        }
        overfit_run(&overfit_docs, &categories, second.path())?;
        files_equal(first.path(), second.path(), &["checkpoint.bin", "checkpoint.json", "metrics.json"])?;
        Ok("two overfit runs produced identical checkpoints and metric reports".into())
    });

    if !all {
        std::process::exit(1);
    }
}
