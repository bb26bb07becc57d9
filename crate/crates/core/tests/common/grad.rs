//! Finite-difference checks over every differentiable op and the full loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symspot::model::{LossOptions, Model, ModelConfig, Sample};
use symspot::nn::Session;
use symspot::synth::{generate_document, SynthConfig};
use symspot::tensor::gradcheck::{check, rel_error};
use symspot::tensor::{Result, Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar read-out `Σ w ⊙ y` with fixed weights, so every output element matters.
fn readout(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], -2.0, 2.0);
    let m = random(&mut rng, &[4, 5], -2.0, 2.0);
    let row = random(&mut rng, &[1, 4], -2.0, 2.0);
    let c = random(&mut rng, &[2, 4], -2.0, 2.0);
    let cube = random(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let pos = random(&mut rng, &[3, 4], 0.5, 3.0);
    let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn| cases.push(OpCase { name, inputs, f });
    add("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1])));
    add("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1])));
    add("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1])));
    add("div", vec![a.clone(), pos.clone()], Box::new(|t, v| t.div(v[0], v[1])));
    add("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7)));
    add("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.4)));
    add("scale_rows", vec![a.clone()], Box::new(|t, v| t.scale_rows(v[0], vec![0.5, -2.0, 3.0])));
    add("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0])));
    add("log", vec![pos.clone()], Box::new(|t, v| t.log(v[0])));
    add("sqrt", vec![pos], Box::new(|t, v| t.sqrt(v[0])));
    add("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0])));
    add("softplus", vec![a.clone()], Box::new(|t, v| t.softplus(v[0])));
    add("relu", vec![away], Box::new(|t, v| t.relu(v[0])));
    add("matmul", vec![a.clone(), m.clone()], Box::new(|t, v| t.matmul(v[0], v[1])));
    add("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0])));
    add("broadcast_rows", vec![row.clone()], Box::new(|t, v| t.broadcast_rows(v[0], 3)));
    add("add_rows", vec![a.clone(), row], Box::new(|t, v| t.add_rows(v[0], v[1])));
    add("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1])));
    add("scatter_add_rows", vec![a.clone()], Box::new(|t, v| t.scatter_add_rows(v[0], &[1, 1, 0], 3)));
    add("concat_rows", vec![a.clone(), c], Box::new(|t, v| t.concat(&[v[0], v[1]], 0)));
    add(
        "concat_cols",
        vec![a.clone(), m],
        Box::new(|t, v| {
            let mt = t.transpose(v[1])?;
            let head = t.gather_rows(mt, &[0, 1, 2])?;
            t.concat(&[v[0], head], 1)
        }),
    );
    add("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[6, 2])));
    add("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0])));
    add("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0])));
    add("sum_axis0", vec![a.clone()], Box::new(|t, v| t.sum_axis(v[0], 0)));
    add("sum_axis1", vec![a.clone()], Box::new(|t, v| t.sum_axis(v[0], 1)));
    add("mean_axis0", vec![a.clone()], Box::new(|t, v| t.mean_axis(v[0], 0)));
    add("mean_axis1", vec![a.clone()], Box::new(|t, v| t.mean_axis(v[0], 1)));
    add("max_axis0", vec![a.clone()], Box::new(|t, v| t.max_axis(v[0], 0)));
    add("max_axis1", vec![a.clone()], Box::new(|t, v| t.max_axis(v[0], 1)));
    add("softmax0", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 0)));
    add("softmax1", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 1)));
    add("log_softmax0", vec![a.clone()], Box::new(|t, v| t.log_softmax(v[0], 0)));
    add("log_softmax1", vec![a.clone()], Box::new(|t, v| t.log_softmax(v[0], 1)));
    add("layer_norm", vec![a.clone()], Box::new(|t, v| t.layer_norm(v[0])));
    add("softmax_neighbors", vec![cube.clone()], Box::new(|t, v| t.softmax(v[0], 1)));
    add("sum_neighbors", vec![cube], Box::new(|t, v| t.sum_axis(v[0], 1)));
    let _ = b;
    cases
}

/// Worst relative error of one op case.
pub fn check_op(case: &OpCase) -> f64 {
    check(&case.inputs, STEP, |t, v| {
        let y = (case.f)(t, v)?;
        readout(t, y)
    })
    .unwrap()
    .max_rel_error
}

/// A ≤16-point, 4-query double-precision model with generic (nonzero) biases.
pub fn toy_problem() -> (Model<f64>, Sample) {
    let scfg = SynthConfig {
        symbols_min: 2,
        symbols_max: 2,
        clutter: 2,
        ..SynthConfig::default()
    };
    let mut doc = generate_document(&scfg, "toy", 5).unwrap().document;
    doc.primitives.truncate(16);
    let mut cfg = ModelConfig::profile("toy", scfg.categories()).unwrap();
    cfg.backbone.channels = vec![8, 8, 8, 8];
    cfg.backbone.k_nn = 4;
    cfg.head.num_queries = 4;
    cfg.head.head_dim = 8;
    cfg.head.head_layers = 1;
    let mut model = Model::<f64>::new(cfg, 7).unwrap();
    // zero biases put zero-offset neighbor slots exactly on the ReLU kink
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..model.store.len() {
        if model.store.names()[k].ends_with(".bias") {
            for v in model.store.tensors_mut()[k].data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let sample = Sample::prepare(&doc, &model.config, 0).unwrap();
    (model, sample)
}

fn loss_value(model: &Model<f64>, sample: &Sample) -> f64 {
    let mut s = Session::new(&model.store, false);
    let (l, _) = model.loss(&mut s, sample, &LossOptions::default()).unwrap();
    s.tape.value(l).item()
}

pub struct CompositeReport {
    pub points: usize,
    pub checked: usize,
    pub informative: usize,
    pub worst: f64,
    pub worst_param: String,
}

/// Compares the analytic gradient of the full loss with central differences
/// on up to `per_tensor` random elements of every parameter tensor.
pub fn composite_check(per_tensor: usize) -> CompositeReport {
    let (mut model, sample) = toy_problem();
    let mut s = Session::new(&model.store, true);
    let (l, parts) = model.loss(&mut s, &sample, &LossOptions::default()).unwrap();
    assert!(parts.ccl > 0.0);
    let analytic = s.param_grads(&s.tape.backward(l).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut r = CompositeReport {
        points: sample.len(),
        checked: 0,
        informative: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    for (k, g) in analytic.iter().enumerate() {
        for _ in 0..g.len().min(per_tensor) {
            let e = rng.gen_range(0..g.len());
            let orig = model.store.tensors()[k].data()[e];
            model.store.tensors_mut()[k].data_mut()[e] = orig + STEP;
            let fp = loss_value(&model, &sample);
            model.store.tensors_mut()[k].data_mut()[e] = orig - STEP;
            let fm = loss_value(&model, &sample);
            model.store.tensors_mut()[k].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            r.checked += 1;
            if numeric.abs() > 1e-6 {
                r.informative += 1;
            }
            let err = rel_error(g[e], numeric, 1e-3);
            if err > r.worst {
                r.worst = err;
                r.worst_param = format!("{}[{e}]", model.store.names()[k]);
            }
        }
    }
    r
}
