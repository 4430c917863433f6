//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass; it is the independent
//! oracle for the backward rules recorded by [`Graph`].

use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest error over all inputs, each measured as
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-10)`.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-10, f64::max);
    diff / scale
}

/// Compare `∂f/∂inputs` from the graph against central differences with step `eps`.
///
/// `f` must build a scalar from the leaves it is handed and be deterministic.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &leaves)?;
    let analytic = g.backward(out, &leaves)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        per_input.push(relative_error(grad.data(), &numeric));
    }
    Ok(GradCheck {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

/// Deterministic non-degenerate weights used to reduce tensors to scalars.
fn probe(len: usize) -> Vec<f64> {
    (0..len).map(|i| (1.3 * i as f64 + 0.2).cos() + 0.5).collect()
}

/// `Σ r ⊙ y` with fixed probe weights `r`.
pub fn probe_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(Tensor::new(shape.clone(), probe(shape.iter().product()))?);
    let ry = g.mul(y, r)?;
    Ok(g.sum(ry))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

type Builder = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Builder,
}

const SMALL: &[usize] = &[2, 3, 4];
const IMG: &[usize] = &[2, 3, 5, 4];
const IMG_EVEN: &[usize] = &[2, 2, 4, 6];

fn cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        OpCase { name: "add", shapes: &[SMALL, SMALL], domain: Any, build: |g, v| { let y = g.add(v[0], v[1])?; probe_sum(g, y) } },
        OpCase { name: "sub", shapes: &[SMALL, SMALL], domain: Any, build: |g, v| { let y = g.sub(v[0], v[1])?; probe_sum(g, y) } },
        OpCase { name: "mul", shapes: &[SMALL, SMALL], domain: Any, build: |g, v| { let y = g.mul(v[0], v[1])?; probe_sum(g, y) } },
        OpCase { name: "scale", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.scale(v[0], -1.7); probe_sum(g, y) } },
        OpCase { name: "add_scalar", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.add_scalar(v[0], 0.3); let y = g.mul(y, y)?; probe_sum(g, y) } },
        OpCase { name: "mul_const", shapes: &[SMALL], domain: Any, build: |g, v| { let m: std::sync::Arc<[f64]> = probe(24).into_iter().map(|x| x - 0.25).collect(); let y = g.mul_const(v[0], m)?; probe_sum(g, y) } },
        OpCase { name: "pow_rsqrt", shapes: &[SMALL], domain: Positive, build: |g, v| { let y = g.pow(v[0], -0.5, 1e-8)?; probe_sum(g, y) } },
        OpCase { name: "pow_cube", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.pow(v[0], 3.0, 0.0)?; probe_sum(g, y) } },
        OpCase { name: "leaky_relu", shapes: &[SMALL], domain: AwayFromZero, build: |g, v| { let y = g.leaky_relu(v[0], 0.2); probe_sum(g, y) } },
        OpCase { name: "sigmoid", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.sigmoid(v[0]); probe_sum(g, y) } },
        OpCase { name: "softplus", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.softplus(v[0]); probe_sum(g, y) } },
        OpCase { name: "sum", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.sum(y)) } },
        OpCase { name: "mean", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) } },
        OpCase { name: "reshape", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.reshape(v[0], &[4, 6])?; probe_sum(g, y) } },
        OpCase { name: "broadcast_to", shapes: &[&[2, 1, 3]], domain: Any, build: |g, v| { let y = g.broadcast_to(v[0], &[2, 4, 3])?; let y = g.mul(y, y)?; probe_sum(g, y) } },
        OpCase { name: "sum_to", shapes: &[SMALL], domain: Any, build: |g, v| { let y = g.sum_to(v[0], &[2, 1, 4])?; let y = g.mul(y, y)?; probe_sum(g, y) } },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Any, build: |g, v| { let y = g.matmul(v[0], v[1])?; probe_sum(g, y) } },
        OpCase { name: "transpose", shapes: &[&[3, 4]], domain: Any, build: |g, v| { let y = g.transpose(v[0])?; probe_sum(g, y) } },
        OpCase { name: "conv2d_3x3", shapes: &[IMG, &[4, 3, 3, 3], &[4]], domain: Any, build: |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; probe_sum(g, y) } },
        OpCase { name: "conv2d_strided", shapes: &[IMG, &[2, 3, 3, 3], &[2]], domain: Any, build: |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; probe_sum(g, y) } },
        OpCase { name: "conv2d_1x1", shapes: &[IMG, &[2, 3, 1, 1]], domain: Any, build: |g, v| { let y = g.conv2d(v[0], v[1], None, 1, 0)?; probe_sum(g, y) } },
        OpCase { name: "upsample", shapes: &[IMG], domain: Any, build: |g, v| { let y = g.upsample(v[0], 2)?; probe_sum(g, y) } },
        OpCase { name: "avg_pool", shapes: &[IMG_EVEN], domain: Any, build: |g, v| { let y = g.avg_pool(v[0], 2)?; probe_sum(g, y) } },
        OpCase { name: "concat", shapes: &[IMG, &[2, 1, 5, 4]], domain: Any, build: |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; probe_sum(g, y) } },
        OpCase { name: "narrow", shapes: &[IMG], domain: Any, build: |g, v| { let y = g.narrow(v[0], 1, 1, 2)?; probe_sum(g, y) } },
        OpCase { name: "embed", shapes: &[IMG], domain: Any, build: |g, v| { let y = g.embed(v[0], 1, 2, 6)?; probe_sum(g, y) } },
        OpCase { name: "instance_norm", shapes: &[IMG], domain: Any, build: |g, v| { let y = g.instance_norm(v[0], 1e-8)?; probe_sum(g, y) } },
        OpCase { name: "adain", shapes: &[IMG, IMG, IMG], domain: Any, build: |g, v| { let y = g.adain(v[0], v[1], v[2])?; probe_sum(g, y) } },
        OpCase { name: "pixel_norm", shapes: &[&[3, 5]], domain: Any, build: |g, v| { let y = g.pixel_norm(v[0], 1e-8)?; probe_sum(g, y) } },
        OpCase { name: "linear", shapes: &[&[3, 5], &[4, 5], &[4]], domain: Any, build: |g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; probe_sum(g, y) } },
        OpCase { name: "lerp", shapes: &[SMALL, SMALL], domain: Any, build: |g, v| { let y = g.lerp(v[0], v[1], 0.3)?; let y = g.mul(y, y)?; probe_sum(g, y) } },
        OpCase { name: "composite_3layer", shapes: &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3], &[4, 3, 3, 3], &[1, 4 * 9]], domain: Any, build: composite_three_layer },
    ]
}

/// conv → leaky-ReLU → strided conv → instance norm → linear.
fn composite_three_layer(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
    let h = g.leaky_relu(h, 0.2);
    let h = g.conv2d(h, v[3], None, 2, 1)?;
    let h = g.instance_norm(h, 1e-8)?;
    let n = g.shape(h)[0];
    let flat = g.reshape(h, &[n, 4 * 9])?;
    let y = g.linear(flat, v[4], None)?;
    let y = g.softplus(y);
    probe_sum(g, y)
}

fn sample(rng: &mut impl rand::Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..1.0);
            match domain {
                Domain::Any => u,
                Domain::Positive => 0.2 + 1.3 * u.abs(),
                Domain::AwayFromZero => u.signum() * (0.05 + u.abs()),
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Worst relative gradient error of one operator over `instances` random inputs.
#[derive(Clone, Debug)]
pub struct OperatorReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Finite-difference check of every differentiable operator on
/// `instances` seeded random inputs each.
pub fn operator_suite(seed: u64, instances: usize, eps: f64) -> Result<Vec<OperatorReport>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| sample(&mut rng, s, case.domain)).collect();
            let r = check_gradients(case.build, &inputs, eps)?;
            worst = worst.max(r.max_rel_err);
        }
        out.push(OperatorReport {
            name: case.name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Small conditioned critic used to validate double backpropagation:
/// conv → leaky-ReLU → instance norm → linear, evaluated on an input leaf
/// created inside the graph. Returns `mean_n ‖∂D/∂x_n‖²`.
pub fn r1_penalty_probe(g: &mut Graph, params: &[Var], x: &Tensor) -> Result<Var> {
    let xv = g.leaf(x.clone(), true);
    let h = g.conv2d(xv, params[0], Some(params[1]), 1, 1)?;
    let h = g.leaky_relu(h, 0.2);
    let h = g.instance_norm(h, 1e-8)?;
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
    let d = g.linear(flat, params[2], Some(params[3]))?;
    let norms = g.grad_norm_sq(d, xv)?;
    Ok(g.mean(norms))
}

/// Relative error of the parameter-gradient of the R1 probe against
/// finite differences, worst over `instances` random draws.
pub fn r1_double_backprop_suite(seed: u64, instances: usize, eps: f64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let x = sample(&mut rng, &[2, 2, 4, 4], Domain::Any);
        let params = vec![
            sample(&mut rng, &[3, 2, 3, 3], Domain::Any),
            sample(&mut rng, &[3], Domain::Any),
            sample(&mut rng, &[1, 3 * 16], Domain::Any),
            sample(&mut rng, &[1], Domain::Any),
        ];
        let r = check_gradients(|g, p| r1_penalty_probe(g, p, &x), &params, eps)?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(worst)
}
