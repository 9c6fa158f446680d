use r2r_core::decom_net::DecomNet;
use r2r_core::denoise_net::DenoiseNet;
use r2r_core::layers::{Bound, ParamStore};
use r2r_core::relight_net::RelightNet;
use r2r_tensor::gradcheck::{numeric_gradient, relative_error};
use r2r_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-3;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Moves every bias off zero so pre-activations sit clear of ReLU kinks.
fn spread_biases(params: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".bias") {
            for v in params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Weighted sum of every output, a smooth scalar probe.
fn probe(outputs: &[Var<f64>], weights: &[Tensor<f64>]) -> Var<f64> {
    outputs
        .iter()
        .zip(weights)
        .map(|(o, w)| o.mul(&Var::constant(w.clone())).unwrap().sum())
        .reduce(|a, b| a.add(&b).unwrap())
        .unwrap()
}

/// Largest gradient error over the inputs and three sampled coordinates of
/// every parameter tensor.
fn network_gradient_error(
    params: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    forward: impl Fn(&Bound<f64>, &[Var<f64>]) -> Vec<Var<f64>>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let frozen = |params: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Vec<Var<f64>> {
        let vars: Vec<_> = xs.iter().map(|x| Var::constant(x.clone())).collect();
        forward(&params.bind_frozen(), &vars)
    };
    let outputs = frozen(params, inputs);
    let weights: Vec<_> = outputs
        .iter()
        .map(|o| uniform(o.shape(), -1.0, 1.0, rng))
        .collect();
    let loss = |params: &ParamStore<f64>, xs: &[Tensor<f64>]| {
        probe(&frozen(params, xs), &weights).value().item()
    };

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let grads = probe(&forward(&bound, &leaves), &weights)
        .backward()
        .unwrap();

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let numeric = numeric_gradient(&inputs[k], STEP, None, |t| {
            let mut xs = inputs.to_vec();
            xs[k] = t.clone();
            loss(params, &xs)
        });
        worst = worst.max(relative_error(grads.get(leaf).unwrap(), &numeric));
    }

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for id in params.ids().collect::<Vec<_>>() {
        let analytic = grads
            .get(bound.var(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        for _ in 0..3 {
            let at = rng.random_range(0..analytic.len());
            let orig = params.get(id).data()[at];
            params.get_mut(id).data_mut()[at] = orig + STEP;
            let plus = loss(params, inputs);
            params.get_mut(id).data_mut()[at] = orig - STEP;
            let minus = loss(params, inputs);
            params.get_mut(id).data_mut()[at] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[at];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    worst.max(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300))
}

#[test]
fn decom_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = DecomNet::<f64>::with_blocks(2, 3);
    spread_biases(&mut net.params, &mut rng);
    let image = uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut rng);
    let mut params = net.params.clone();
    let err = network_gradient_error(
        &mut params,
        &[image],
        |p, xs| {
            let (r, i) = net.forward(p, &xs[0]).unwrap();
            vec![r, i]
        },
        &mut rng,
    );
    assert!(err <= TOLERANCE, "decom gradient error {err:.2e}");
}

#[test]
fn denoise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut net = DenoiseNet::<f64>::new(4);
    spread_biases(&mut net.params, &mut rng);
    let r = uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut rng);
    let i = uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut rng);
    let mut params = net.params.clone();
    let err = network_gradient_error(
        &mut params,
        &[r, i],
        |p, xs| vec![net.forward(p, &xs[0], &xs[1]).unwrap()],
        &mut rng,
    );
    assert!(err <= TOLERANCE, "denoise gradient error {err:.2e}");
}

#[test]
fn relight_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut net = RelightNet::<f64>::new(5);
    spread_biases(&mut net.params, &mut rng);
    let r = uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut rng);
    let i = uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut rng);
    let mut params = net.params.clone();
    let err = network_gradient_error(
        &mut params,
        &[r, i],
        |p, xs| {
            let (illumination, image) = net.forward(p, &xs[0], &xs[1]).unwrap();
            vec![illumination, image]
        },
        &mut rng,
    );
    assert!(err <= TOLERANCE, "relight gradient error {err:.2e}");
}
