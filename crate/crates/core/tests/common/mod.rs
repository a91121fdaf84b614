//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::cell::RefCell;
use std::path::Path;

use iseg::losses::{self, AlphaMode, ClassWeightVector, JointTargets, LossWeights};
use iseg::nn::{bind_params, forward, Graph, Head, Mode, Network, NetworkSpec, NormMode, Tensor, Var};
use iseg::scenegen::{generate_dataset, load_dataset, Dataset, GenConfig};
use iseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn dataset(dir: &Path, scenes: usize, rigs: usize, height: usize, width: usize, seed: u64) -> Dataset {
    let cfg = GenConfig {
        num_scenes: scenes,
        rigs_per_scene: rigs,
        num_classes: 4,
        height,
        width,
        master_seed: seed,
    };
    generate_dataset(&cfg, dir).unwrap();
    load_dataset(dir).unwrap()
}

/// Keeps values at least `gap` away from zero so ReLU kinks are not straddled.
fn away_from_zero(mut t: Tensor, gap: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item()
}

thread_local! {
    static RESULTS: RefCell<Vec<(String, f64)>> = const { RefCell::new(Vec::new()) };
}

/// Records the worst elementwise relative error of analytic against central differences.
fn check<F>(name: &str, f: F, inputs: Vec<Tensor>)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
    }
    RESULTS.with(|r| r.borrow_mut().push((name.to_string(), worst)));
}

fn t433(seed: u64) -> Tensor {
    random(&[4, 3, 3], seed, 0.1, 1.0)
}

/// Worst relative error per primitive and per loss.
pub fn gradient_cases() -> Vec<(String, f64)> {
    RESULTS.with(|r| r.borrow_mut().clear());
    elementwise_ops();
    per_sample_ops();
    spatial_ops();
    conv2d_gradients();
    batch_norm_gradients();
    softmax_gradients();
    loss_gradients();
    RESULTS.with(|r| std::mem::take(&mut *r.borrow_mut()))
}

fn elementwise_ops() {
    check("add", |g, v| { let x = g.add(v[0], v[1])?; let x = g.square(x); Ok(g.sum(x)) }, vec![t433(1), t433(2)]);
    check("sub", |g, v| { let x = g.sub(v[0], v[1])?; let x = g.square(x); Ok(g.mean(x)) }, vec![t433(3), t433(4)]);
    check("mul", |g, v| { let x = g.mul(v[0], v[1])?; Ok(g.sum(x)) }, vec![t433(5), t433(6)]);
    check("div", |g, v| { let x = g.div(v[0], v[1])?; Ok(g.sum(x)) }, vec![t433(7), t433(8)]);
    check("scale", |g, v| { let x = g.scale(v[0], -2.5); let x = g.square(x); Ok(g.mean(x)) }, vec![t433(9)]);
    check(
        "relu",
        |g, v| { let x = g.relu(v[0]); let x = g.square(x); Ok(g.sum(x)) },
        vec![away_from_zero(random(&[4, 3, 3], 10, -1.0, 1.0), 0.05)],
    );
}

fn per_sample_ops() {
    check(
        "sum_per_sample",
        |g, v| { let s = g.sum_per_sample(v[0])?; let s = g.square(s); Ok(g.sum(s)) },
        vec![t433(11)],
    );
    check(
        "scale_per_sample",
        |g, v| { let x = g.scale_per_sample(v[0], v[1])?; let x = g.square(x); Ok(g.sum(x)) },
        vec![t433(12), random(&[4], 13, 0.5, 2.0)],
    );
}

fn spatial_ops() {
    let x = random(&[2, 3, 3, 3], 20, -1.0, 1.0);
    let y = random(&[2, 2, 3, 3], 21, -1.0, 1.0);
    let probe = random(&[2, 3, 6, 6], 22, -1.0, 1.0);
    check(
        "upsample2x",
        move |g, v| {
            let u = g.upsample2x(v[0])?;
            let p = g.constant(probe.clone());
            let m = g.mul(u, p)?;
            let m = g.square(m);
            Ok(g.sum(m))
        },
        vec![x.clone()],
    );
    check(
        "concat",
        |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let c = g.square(c);
            let c = g.square(c);
            Ok(g.mean(c))
        },
        vec![x, y],
    );
}

fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        check(
            "conv2d",
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                let y = g.square(y);
                Ok(g.mean(y))
            },
            vec![
                random(&[2, 3, 5, 5], 30, -1.0, 1.0),
                random(&[4, 3, k, k], 31, -0.5, 0.5),
                random(&[4], 32, -0.5, 0.5),
            ],
        );
    }
}

fn batch_norm_gradients() {
    let probe = random(&[4, 3, 3, 3], 42, -1.0, 1.0);
    let p2 = probe.clone();
    check(
        "batch_norm/train",
        move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train { eps: 1e-5 })?;
            let p = g.constant(p2.clone());
            let m = g.mul(y, p)?;
            let m = g.square(m);
            Ok(g.sum(m))
        },
        vec![
            random(&[4, 3, 3, 3], 40, -1.0, 1.0),
            random(&[3], 41, 0.5, 1.5),
            random(&[3], 43, -0.5, 0.5),
        ],
    );
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 0.8];
    check(
        "batch_norm/eval",
        move |g, v| {
            let (y, _) = g.batch_norm(
                v[0],
                v[1],
                v[2],
                NormMode::Eval { running_mean: &mean, running_var: &var, eps: 1e-5 },
            )?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            let m = g.square(m);
            Ok(g.sum(m))
        },
        vec![
            random(&[4, 3, 3, 3], 44, -1.0, 1.0),
            random(&[3], 45, 0.5, 1.5),
            random(&[3], 46, -0.5, 0.5),
        ],
    );
}

fn softmax_gradients() {
    let probe = random(&[1, 4, 3, 3], 50, -1.0, 1.0);
    check(
        "softmax",
        move |g, v| {
            let s = g.softmax_channel(v[0])?;
            let p = g.constant(probe.clone());
            let m = g.mul(s, p)?;
            let m = g.square(m);
            Ok(g.sum(m))
        },
        vec![random(&[1, 4, 3, 3], 51, -2.0, 2.0)],
    );
}

fn labels() -> Vec<u8> {
    vec![0, 1, 2, 3, 1, 1, 0, 2, 3]
}

fn loss_gradients() {
    let w = LossWeights::default();
    check("mse", |g, v| losses::mse(g, v[0], v[1]), vec![t433(60), t433(61)]);
    for mode in [AlphaMode::Detached, AlphaMode::Differentiable] {
        check("smse", move |g, v| losses::smse(g, v[0], v[1], mode), vec![t433(62), t433(63)]);
        check(
            "combined",
            move |g, v| losses::combined_loss(g, v[0], v[1], &w, mode),
            vec![t433(64), t433(65)],
        );
        check(
            "intrinsic",
            move |g, v| losses::intrinsic_loss(g, v[0], v[1], v[2], v[3], &w, mode),
            vec![t433(66), t433(67), t433(68), t433(69)],
        );
    }
    let cw = ClassWeightVector::new(vec![1.0, 2.0, 0.5, 1.5]).unwrap();
    let cw2 = cw.clone();
    check(
        "cross_entropy",
        move |g, v| losses::cross_entropy(g, v[0], &labels(), &cw2),
        vec![random(&[1, 4, 3, 3], 70, -2.0, 2.0)],
    );
    let small = LossWeights { intrinsic_scale: 1.0, ..w };
    check(
        "joint",
        move |g, v| {
            let t = JointTargets {
                labels: &labels(),
                class_weights: &cw,
                reflectance: v[3],
                shading: v[4],
            };
            Ok(losses::joint_loss(g, v[0], v[1], v[2], &t, &small, AlphaMode::Detached)?.total)
        },
        vec![
            random(&[1, 4, 3, 3], 71, -2.0, 2.0),
            random(&[1, 3, 3, 3], 72, 0.1, 1.0),
            random(&[1, 1, 3, 3], 73, 0.1, 1.0),
            random(&[1, 3, 3, 3], 74, 0.1, 1.0),
            random(&[1, 1, 3, 3], 75, 0.1, 1.0),
        ],
    );
}

fn network_loss(net: &Network, x: &Tensor, rt: &Tensor, st: &Tensor, labels: &[u8], cw: &ClassWeightVector) -> f64 {
    let mut g = Graph::new();
    let params = bind_params(&mut g, &net.state, |_| false);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &net.spec, &net.state, &params, xv, Mode::Train).unwrap();
    let targets = JointTargets {
        labels,
        class_weights: cw,
        reflectance: g.constant(rt.clone()),
        shading: g.constant(st.clone()),
    };
    let w = LossWeights { intrinsic_scale: 1.0, ..LossWeights::default() };
    let l = losses::joint_loss(
        &mut g,
        out.segmentation.unwrap(),
        out.reflectance.unwrap(),
        out.shading.unwrap(),
        &targets,
        &w,
        AlphaMode::Detached,
    )
    .unwrap();
    g.value(l.total).item()
}

pub struct NetworkCheck {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

/// Whole-network check on a 2×3×16×16 batch; elements whose stencil straddles a ReLU switch are counted, not compared.
#[allow(clippy::needless_range_loop)]
pub fn network_gradient_check() -> NetworkCheck {
    let mut spec = NetworkSpec::new(&Head::ALL, 3);
    spec.encoder_features = vec![8, 16];
    let mut net = Network::new(spec, 21).unwrap();
    let x = random(&[2, 3, 16, 16], 1, 0.0, 1.0);
    let rt = random(&[2, 3, 16, 16], 2, 0.1, 1.0);
    let st = random(&[2, 1, 16, 16], 3, 0.1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.random_range(0..3u8)).collect();
    let cw = ClassWeightVector::new(vec![1.0, 2.0, 0.5]).unwrap();

    let mut g = Graph::new();
    let params = bind_params(&mut g, &net.state, |_| true);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &net.spec, &net.state, &params, xv, Mode::Train).unwrap();
    let targets = JointTargets {
        labels: &labels,
        class_weights: &cw,
        reflectance: g.constant(rt.clone()),
        shading: g.constant(st.clone()),
    };
    let w = LossWeights { intrinsic_scale: 1.0, ..LossWeights::default() };
    let l = losses::joint_loss(
        &mut g,
        out.segmentation.unwrap(),
        out.reflectance.unwrap(),
        out.shading.unwrap(),
        &targets,
        &w,
        AlphaMode::Detached,
    )
    .unwrap();
    let grads = g.backward(l.total).unwrap();
    let vars = params.vars().to_vec();

    let mut checked = 0;
    let mut kinks = 0;
    let mut worst: f64 = 0.0;
    for k in 0..net.state.params().len() {
        let p = net.state.params()[k].clone();
        if !p.kind.learnable() {
            continue;
        }
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(&p.shape));
        let n = p.data.len();
        for i in [0, n / 3, 2 * n / 3, n - 1] {
            let coarse = central_difference(&mut net, k, i, 1e-4, &x, &rt, &st, &labels, &cw);
            let fine = central_difference(&mut net, k, i, 1e-5, &x, &rt, &st, &labels, &cw);
            // The two step sizes disagree only when a ReLU switches inside the stencil.
            if (coarse - fine).abs() > 1e-4 * coarse.abs().max(fine.abs()).max(1e-2) {
                kinks += 1;
                continue;
            }
            let a = analytic.data()[i];
            let rel = (a - fine).abs() / a.abs().max(fine.abs()).max(1e-2);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            checked += 1;
        }
    }
    NetworkCheck { worst, checked, kinks }
}

#[allow(clippy::too_many_arguments)]
fn central_difference(
    net: &mut Network,
    k: usize,
    i: usize,
    h: f32,
    x: &Tensor,
    rt: &Tensor,
    st: &Tensor,
    labels: &[u8],
    cw: &ClassWeightVector,
) -> f64 {
    let orig = net.state.params()[k].data[i];
    net.state.params_mut()[k].data[i] = orig + h;
    let up = net.state.params()[k].data[i] as f64 - orig as f64;
    let lp = network_loss(net, x, rt, st, labels, cw);
    net.state.params_mut()[k].data[i] = orig - h;
    let down = orig as f64 - net.state.params()[k].data[i] as f64;
    let lm = network_loss(net, x, rt, st, labels, cw);
    net.state.params_mut()[k].data[i] = orig;
    (lp - lm) / (up + down)
}
