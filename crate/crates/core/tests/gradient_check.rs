use arblab::neural::{Activation, DenseNet, Loss};
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Identity),
        Just(Activation::Tanh),
        Just(Activation::Relu)
    ]
}

#[derive(Debug, Clone)]
struct Case {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn case() -> impl Strategy<Value = Case> {
    (prop::collection::vec(1usize..=5, 2..=4), 1usize..=3)
        .prop_flat_map(|(widths, batch)| {
            let depth = widths.len() - 1;
            let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            (
                Just(widths.clone()),
                prop::collection::vec(activation(), depth),
                prop::collection::vec(-1.0f64..1.0, count),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, widths[0]), batch),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, widths[depth]), batch),
            )
        })
        .prop_map(|(widths, activations, params, inputs, targets)| Case {
            widths,
            activations,
            params,
            inputs,
            targets,
        })
}

/// Smallest distance of any ReLU preactivation from the kink.
fn relu_margin(c: &Case) -> f64 {
    let net = DenseNet::from_flat(&c.widths, &c.activations, &c.params).unwrap();
    let mut margin = f64::INFINITY;
    for x in &c.inputs {
        let mut h = x.clone();
        let mut off = 0;
        for (l, act) in c.activations.iter().enumerate() {
            let (n_in, n_out) = (c.widths[l], c.widths[l + 1]);
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    c.params[off + n_in * n_out + o]
                        + (0..n_in)
                            .map(|i| c.params[off + o * n_in + i] * h[i])
                            .sum::<f64>()
                })
                .collect();
            off += n_in * n_out + n_out;
            if *act == Activation::Relu {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            h = z
                .into_iter()
                .map(|v| match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                    Activation::Identity => v,
                })
                .collect();
        }
        let direct = net.forward(x).unwrap();
        assert!(direct.iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
    }
    margin
}

fn central_difference(params: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let eps = 1e-5;
    let mut q = params.to_vec();
    q[i] += eps;
    let up = f(&q);
    q[i] -= 2.0 * eps;
    (up - f(&q)) / (2.0 * eps)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn backward_matches_central_differences(c in case(), rmse in any::<bool>()) {
        prop_assume!(relu_margin(&c) > 1e-3);
        let loss = if rmse { Loss::Rmse } else { Loss::Mse };
        let net = DenseNet::from_flat(&c.widths, &c.activations, &c.params).unwrap();
        let (grads, value) = net.backward(&c.inputs, &c.targets, loss).unwrap();
        prop_assert!((value - net.loss(&c.inputs, &c.targets, loss).unwrap()).abs() < 1e-12);
        let analytic = grads.flat();
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&c.params, i, |q| {
                DenseNet::from_flat(&c.widths, &c.activations, q).unwrap().loss(&c.inputs, &c.targets, loss).unwrap()
            });
            prop_assert!(rel_err(a, numeric) < 1e-4, "param {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn selected_output_gradient_matches(c in case(), picks in prop::collection::vec(0usize..8, 3)) {
        prop_assume!(relu_margin(&c) > 1e-3);
        let out_w = *c.widths.last().unwrap();
        let selected: Vec<usize> = picks.iter().take(c.inputs.len()).map(|p| p % out_w).collect();
        let targets: Vec<f64> = c.targets.iter().map(|t| t[0]).collect();
        let inputs: Vec<&[f64]> = c.inputs.iter().map(Vec::as_slice).collect();
        let net = DenseNet::from_flat(&c.widths, &c.activations, &c.params).unwrap();
        let (grads, _) = net.backward_selected(&inputs, &selected, &targets).unwrap();
        let loss = |q: &[f64]| {
            let n = DenseNet::from_flat(&c.widths, &c.activations, q).unwrap();
            inputs
                .iter()
                .zip(&selected)
                .zip(&targets)
                .map(|((x, &a), t)| (n.forward(x).unwrap()[a] - t).powi(2))
                .sum::<f64>()
                / inputs.len() as f64
        };
        let analytic = grads.flat();
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&c.params, i, loss);
            prop_assert!(rel_err(a, numeric) < 1e-4, "param {i}: {a} vs {numeric}");
        }
    }
}
