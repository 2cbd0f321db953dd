mod common;

use advrobust::metric::prediction::PredictionMode;
use advrobust::nn::ParamGrads;
use advrobust::ScalarObjective;
use common::*;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Gap between the largest and second largest entry of `v` under `key`.
fn gap(v: &[f64], key: impl Fn(f64) -> f64) -> f64 {
    let mut s: Vec<f64> = v.iter().map(|&x| key(x)).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[0] - s[1]
}

fn check(seed: u64, conv: bool, which: u8) -> Result<(), TestCaseError> {
    let mut rng = advrobust::rng(seed);
    let net = if conv { random_convnet(&mut rng) } else { random_mlp(&mut rng, 6) };
    let x = random_input(&mut rng, &net);
    let trace = net.trace(x.data()).unwrap();
    prop_assume!(kink_margin(&net, &trace) > 1e-3);
    let z = trace.logits().to_vec();
    let k = net.num_classes();
    let label = (seed as usize) % k;
    let soft: Vec<f64> = (0..k).map(|i| (i + 1) as f64).map(|v| v / (k * (k + 1) / 2) as f64).collect();
    // A reference drawn independently of z: one derived from z can coincide
    // with P(z), where the KL sits at its minimum and the gradient vanishes.
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let reference: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
    let obj = match which % 6 {
        0 => ScalarObjective::cross_entropy(label),
        1 => ScalarObjective::CrossEntropy { label, temperature: 7.0 },
        2 => ScalarObjective::SoftCrossEntropy { target: &soft, temperature: 3.0 },
        3 => {
            let others: Vec<f64> = z.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &v)| v).collect();
            prop_assume!(others.len() < 2 || gap(&others, |v| v) > 1e-3);
            ScalarObjective::CwMargin { label }
        }
        4 => {
            prop_assume!(gap(&z, f64::abs) > 1e-3);
            ScalarObjective::KlToReference { reference: &reference, mode: PredictionMode::normalized() }
        }
        _ => ScalarObjective::KlToReference { reference: &reference, mode: PredictionMode::Softmax },
    };

    let analytic = net.input_gradient(&x, &obj).unwrap();
    let numeric = fd_input_grad(&net, x.data(), &obj, H);
    let e = rel_err(analytic.grad.data(), &numeric);
    prop_assert!(grad_close(analytic.grad.data(), &numeric, TOL), "input gradient rel err {e}");

    let (_, grads) = net.param_gradient(&[x.data()], &[obj]).unwrap();
    let numeric = fd_param_grad(&net, x.data(), &obj, H);
    let analytic = flatten_grads(&grads);
    let e = rel_err(&analytic, &numeric);
    prop_assert!(grad_close(&analytic, &numeric, TOL), "parameter gradient rel err {e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, max_global_rejects: 4096, ..ProptestConfig::default() })]

    #[test]
    fn mlp_gradients_match_central_differences(seed in any::<u64>(), which in any::<u8>()) {
        check(seed, false, which)?;
    }

    #[test]
    fn conv_gradients_match_central_differences(seed in any::<u64>(), which in any::<u8>()) {
        check(seed, true, which)?;
    }

    #[test]
    fn batch_gradient_is_mean_of_single_gradients(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = advrobust::rng(seed);
        let net = random_mlp(&mut rng, 5);
        let xs: Vec<_> = (0..n).map(|_| random_input(&mut rng, &net)).collect();
        let objs: Vec<_> = (0..n).map(|i| ScalarObjective::cross_entropy(i % net.num_classes())).collect();
        let views: Vec<&[f64]> = xs.iter().map(|x| x.data()).collect();
        let (loss, batch) = net.param_gradient(&views, &objs).unwrap();

        let mut sum = ParamGrads::zeros_for(&net);
        let mut total = 0.0;
        for (x, o) in views.iter().zip(&objs) {
            let (l, g) = net.param_gradient(&[x], &[*o]).unwrap();
            sum.add_assign(&g);
            total += l;
        }
        sum.scale(1.0 / n as f64);
        prop_assert!((loss - total / n as f64).abs() < 1e-12);
        prop_assert!(rel_err(&flatten_grads(&batch), &flatten_grads(&sum)) < 1e-12);
    }
}
