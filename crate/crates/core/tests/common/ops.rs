//! Finite-difference checks shared by the gradient tests and the acceptance suite.

use flipsbir::autodiff::gradcheck::{central_difference, max_relative_error, FD_STEP};
use flipsbir::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 50;
pub const TOL: f64 = 1e-4;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d(sum(w ⊙ f(inputs)))/d(inputs) for a random weighting `w`, so that
/// every output element contributes a distinct coefficient.
pub fn check(seed: u64, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        random(&mut rng, tape.shape(out))
    };
    let eval = |inputs: &[Tensor], record: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if record { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };

    let (tape, vars, loss) = eval(inputs, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = central_difference(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i].data_mut().copy_from_slice(x);
                let (tape, _, loss) = eval(&probe, false);
                tape.value(loss).data()[0]
            },
            inputs[i].data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Worst error of one op family over all instances.
fn over_instances(name: &'static str, mut one: impl FnMut(u64, &mut ChaCha8Rng) -> f64) -> (&'static str, f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(one(seed, &mut rng));
    }
    (name, worst)
}

pub fn matmul() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("matmul", |s, rng| {
            let a = random(rng, &[5, 7]);
            let b = random(rng, &[7, 3]);
            check(s, &[a, b], |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
    ]
}

pub fn conv2d() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("conv2d", |s, rng| {
            let stride = 1 + (s % 2) as usize;
            let pad = (s % 3) as usize;
            let x = random(rng, &[2, 6, 5]);
            let k = random(rng, &[3, 2, 3, 2]);
            check(s, &[x, k], |t, v| t.conv2d(v[0], v[1], stride, pad).unwrap())
        }),
    ]
}

pub fn adaptive_avg_pool2d() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("adaptive_avg_pool2d", |s, rng| {
            let x = random(rng, &[2, 5, 7]);
            let (oh, ow) = (1 + (s % 3) as usize, 1 + (s % 4) as usize);
            check(s, &[x], |t, v| t.adaptive_avg_pool2d(v[0], oh, ow).unwrap())
        }),
    ]
}

pub fn relu_and_gelu() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("relu", |s, rng| {
            // keep inputs away from the kink
            let mut x = random(rng, &[12]);
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
            }
            check(s, &[x], |t, v| t.relu(v[0]))
        }),
        over_instances("gelu", |s, rng| {
            let x = random(rng, &[3, 4]);
            check(s, &[x], |t, v| t.gelu(v[0]))
        }),
    ]
}

pub fn elementwise_binary_and_scalar() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("add/sub/mul/scale", |s, rng| {
            let a = random(rng, &[3, 4]);
            let b = random(rng, &[3, 4]);
            check(s, &[a, b], |t, v| {
                let x = t.add(v[0], v[1]).unwrap();
                let y = t.mul(x, v[0]).unwrap();
                let z = t.sub(y, v[1]).unwrap();
                let z = t.scale(z, -1.7);
                t.add_scalar(z, 0.3)
            })
        }),
    ]
}

pub fn biases_and_reshape() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("channel bias", |s, rng| {
            let x = random(rng, &[3, 2, 2]);
            let b = random(rng, &[3]);
            check(s, &[x, b], |t, v| {
                let y = t.add_channel_bias(v[0], v[1]).unwrap();
                t.flatten(y).unwrap()
            })
        }),
        over_instances("row bias", |s, rng| {
            let x = random(rng, &[4, 3]);
            let b = random(rng, &[3]);
            check(s, &[x, b], |t, v| t.add_row_bias(v[0], v[1]).unwrap())
        }),
    ]
}

pub fn softmax() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("softmax", |s, rng| {
            let x = random(rng, &[3, 5]);
            check(s, &[x], |t, v| t.softmax(v[0]))
        }),
    ]
}

pub fn layer_norm() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("layer_norm", |s, rng| {
            let x = random(rng, &[4, 6]);
            let g = random(rng, &[6]);
            let b = random(rng, &[6]);
            check(s, &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())
        }),
    ]
}

pub fn reductions() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("sum/mean/sum_rows", |s, rng| {
            let x = random(rng, &[3, 4]);
            check(s, &[x], |t, v| {
                let r = t.sum_rows(v[0]);
                let m = t.mean(v[0]);
                let q = t.sum(v[0]);
                let mq = t.mul(m, q).unwrap();
                let r2 = t.mul(r, r).unwrap();
                let rs = t.sum(r2);
                t.add(rs, mq).unwrap()
            })
        }),
    ]
}

pub fn slicing_concat_gather_transpose() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("structural", |s, rng| {
            let a = random(rng, &[4, 5]);
            let b = random(rng, &[4, 2]);
            check(s, &[a, b], |t, v| {
                let left = t.slice_cols(v[0], 1, 4).unwrap();
                let cat = t.concat_cols(&[left, v[1], left]).unwrap();
                let top = t.slice_rows(cat, 0, 2).unwrap();
                let rows = t.concat_rows(&[top, cat]).unwrap();
                let g = t.gather_rows(rows, &[5, 0, 0, 3]).unwrap();
                let tr = t.transpose(g).unwrap();
                let flat = t.gather(tr, &[0, 7, 7, 20, 31], vec![5]).unwrap();
                let sq = t.mul(flat, flat).unwrap();
                t.reshape(sq, vec![1, 5]).unwrap()
            })
        }),
    ]
}

pub fn cross_entropy() -> Vec<(&'static str, f64)> {
    vec![
        over_instances("cross_entropy", |s, rng| {
            let x = random(rng, &[4, 6]);
            let labels: Vec<usize> = (0..4).map(|i| ((s as usize) + i * 5) % 6).collect();
            check(s, &[x], move |t, v| t.cross_entropy(v[0], &labels).unwrap())
        }),
    ]
}

/// Every op family with its worst relative error.
pub fn all() -> Vec<(&'static str, f64)> {
    [matmul, conv2d, adaptive_avg_pool2d, relu_and_gelu, elementwise_binary_and_scalar, biases_and_reshape, softmax, layer_norm, reductions, slicing_concat_gather_transpose, cross_entropy]
        .into_iter()
        .flat_map(|f| f())
        .collect()
}
