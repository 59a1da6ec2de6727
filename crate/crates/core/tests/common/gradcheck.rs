//! Central finite-difference checks for every graph op and for the full
//! image-to-loss path.

use adoc_core::graph::{Graph, Var};
use adoc_core::{DomainId, DomainInit, Model, ModelConfig, Result, Tensor, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, so relu kinks are not straddled.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn scalarize(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 && g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = g.constant(random(&mut rng, &shape));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn eval(case: &OpCase, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out).unwrap();
    g.value(s).item().unwrap()
}

/// Worst relative error over the case's inputs.
pub fn check_op(case: &OpCase) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out).unwrap();
    g.backward(s).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            *n = (eval(case, &plus) - eval(case, &minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn op_cases() -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut r;
    let case = |name, inputs, build: Build| OpCase { name, inputs, build };
    vec![
        case("matmul", vec![random(r, &[3, 4]), random(r, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("transpose", vec![random(r, &[3, 4])], Box::new(|g, v| g.transpose(v[0]))),
        case("add", vec![random(r, &[2, 3]), random(r, &[2, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        case("mul", vec![random(r, &[2, 3]), random(r, &[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", vec![random(r, &[5])], Box::new(|g, v| g.scale(v[0], -1.7))),
        case("add_row_bias", vec![random(r, &[3, 4]), random(r, &[4])], Box::new(|g, v| g.add_row_bias(v[0], v[1]))),
        case("add_channel_bias", vec![random(r, &[2, 3, 3]), random(r, &[2])], Box::new(|g, v| g.add_channel_bias(v[0], v[1]))),
        case("relu", vec![away_from_zero(r, &[3, 4])], Box::new(|g, v| g.relu(v[0]))),
        case("sum", vec![random(r, &[3, 2])], Box::new(|g, v| g.sum(v[0]))),
        case("mean", vec![random(r, &[3, 2])], Box::new(|g, v| g.mean(v[0]))),
        case("conv2d 3x3 pad 1", vec![random(r, &[2, 5, 6]), random(r, &[3, 2, 3, 3])], Box::new(|g, v| g.conv2d(v[0], v[1], (1, 1), (1, 1)))),
        case("conv2d stride (2,1)", vec![random(r, &[2, 6, 5]), random(r, &[2, 2, 3, 3])], Box::new(|g, v| g.conv2d(v[0], v[1], (2, 1), (1, 1)))),
        case("conv2d 1x1 stride 2", vec![random(r, &[3, 4, 4]), random(r, &[2, 3, 1, 1])], Box::new(|g, v| g.conv2d(v[0], v[1], (2, 2), (0, 0)))),
        case("channel_norm", vec![random(r, &[3, 3, 4]), random(r, &[3]), random(r, &[3])], Box::new(|g, v| g.channel_norm(v[0], v[1], v[2], 1e-5))),
        case("layer_norm", vec![random(r, &[3, 5]), random(r, &[5]), random(r, &[5])], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        case("softmax_rows", vec![random(r, &[3, 4])], Box::new(|g, v| g.softmax_rows(v[0]))),
        case("log_softmax_rows", vec![random(r, &[3, 4])], Box::new(|g, v| g.log_softmax_rows(v[0]))),
        case("columns", vec![random(r, &[3, 6])], Box::new(|g, v| g.columns(v[0], 2, 3))),
        case("concat_cols", vec![random(r, &[3, 2]), random(r, &[3, 4])], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        case("collapse_height", vec![random(r, &[2, 3, 4])], Box::new(|g, v| g.collapse_height(v[0]))),
        case(
            "ctc_loss",
            vec![random(r, &[6, 4])],
            Box::new(|g, v| {
                let lp = g.log_softmax_rows(v[0])?;
                g.ctc_loss(lp, &[1, 3, 3])
            }),
        ),
        case(
            "ctc_loss repeated blank-heavy",
            vec![random(r, &[5, 3])],
            Box::new(|g, v| {
                let lp = g.log_softmax_rows(v[0])?;
                g.ctc_loss(lp, &[2])
            }),
        ),
    ]
}

/// Builds a tiny model with every parameter (adapters included) set to
/// non-trivial values and all of them trainable.
pub fn perturbed_tiny_model(seed: u64) -> (Model, DomainId) {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let d = m.register_domain("a", DomainInit::Random).unwrap();
    m.set_train_mode(TrainMode::Finetune(d)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.tensor_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (m, d)
}

/// Analytic vs central-difference gradient of the CTC loss of one image
/// with respect to every scalar parameter of a tiny model.
pub fn end_to_end_rel_err(seed: u64) -> f64 {
    let (mut m, d) = perturbed_tiny_model(seed);
    let cfg = m.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let image = random(&mut rng, &[1, cfg.image_height, cfg.image_width]);
    let label = [1u32, 2];
    m.store.zero_grads();
    m.accumulate_sample_grad(&image, &label, d, 1.0).unwrap();
    let ids = m.trainable_set(TrainMode::Finetune(d)).unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let loss = |m: &Model| {
        let lp = m.log_probs(&image, d).unwrap();
        adoc_core::ctc::ctc_loss(&lp, &label).unwrap()
    };
    let h = 1e-6;
    for id in ids {
        analytic.extend_from_slice(m.store.tensor(id).grad.as_ref().unwrap());
        for j in 0..m.store.tensor(id).len() {
            let orig = m.store.tensor(id).data()[j];
            m.store.tensor_mut(id).data_mut()[j] = orig + h;
            let up = loss(&m);
            m.store.tensor_mut(id).data_mut()[j] = orig - h;
            let down = loss(&m);
            m.store.tensor_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}
