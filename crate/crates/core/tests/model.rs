use lsdfn::conv::ConvParams;
use lsdfn::gradcheck::check_gradient;
use lsdfn::layer::{LsDfnConfig, LsDfnParams};
use lsdfn::model::{Layer, Sequential};
use lsdfn::rng::{gaussian_from, Rng};

/// Every parameter of a conv → ReLU → block (skip) → ReLU → conv stack
/// against central differences of `Σ Y·G`.
#[test]
fn stack_parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    let mut block = LsDfnConfig::new(3, 2, 3, 3, 1);
    block.in_channels = 3;
    let model = Sequential::new(vec![
        Layer::Conv(ConvParams::<f64>::gaussian(&mut rng, 3, 2, 3, 0.4).unwrap()),
        Layer::Relu,
        Layer::LsDfn {
            params: LsDfnParams::random(&block, &mut rng, 0.3).unwrap(),
            config: block,
            skip_concat: true,
        },
        Layer::Relu,
        Layer::Conv(ConvParams::gaussian(&mut rng, 2, 5, 3, 0.4).unwrap()),
    ]);
    let x = gaussian_from::<f64>(&mut rng, &[2, 2, 6, 5], 0.0, 1.0).unwrap();
    let g = gaussian_from::<f64>(&mut rng, &[2, 2, 6, 5], 0.0, 1.0).unwrap();
    let (_, tape) = model.forward(&x).unwrap();
    let (gx, grads) = model.backward(&g, &tape).unwrap();
    let analytic = grads.named_tensors();

    for (idx, (name, value)) in model.named_tensors().into_iter().enumerate() {
        let report = check_gradient(
            |probe| {
                let mut m = model.clone();
                *m.tensors_mut()[idx] = probe.clone();
                m.predict(&x)?.dot(&g)
            },
            value,
            analytic[idx].1,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert_eq!(analytic[idx].0, name);
        assert!(report.passed, "{name}: {:e} at {:?}", report.max_relative_error, report.worst_coordinate);
    }
    let report = check_gradient(|probe| model.predict(probe)?.dot(&g), &x, &gx, 1e-4, 1e-5).unwrap();
    assert!(report.passed, "input: {:e}", report.max_relative_error);
}
