mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segcascade::arch::ArchitectureSpec;
use segcascade::gradcheck::{compare, numerical_gradient, STEP};
use segcascade::loss::{LossCoefficients, Normalizer, TargetWeights};
use segcascade::model::{build_model, Batch, ModelVariant, Objective};
use segcascade::volume::Orientation;
use segcascade::Tensor;

#[test]
fn every_operation_matches_finite_differences() {
    let start = Instant::now();
    let reports = common::gradient_suite(11).unwrap();
    for r in &reports {
        assert!(
            r.passed(),
            "{}: worst relative error {:.3e} (tolerance {:.0e}), gradient scale {:.1e}",
            r.op,
            r.worst,
            r.tolerance,
            r.scale
        );
    }
    assert!(start.elapsed().as_secs() < 60, "suite took {:?}", start.elapsed());
}

const TOY_3D: &str = r#"
name = "toy3d"
dims = 3
input_channels = 2
classes = 3

[[layers]]
kind = "conv"
out = 3

[[layers]]
kind = "classify"
"#;

const TOY_2D_BUNDLE: &str = r#"
name = "toy2d"
dims = 2
input_channels = 2
classes = 3
batchnorm = true

[[subnetwork.layers]]
kind = "conv"
out = 2

[[layers]]
kind = "conv"
out = 3

[[layers]]
kind = "classify"
"#;

fn check_model(spec: &str, variant: ModelVariant, input: &[usize], objective: Objective) {
    let spec = ArchitectureSpec::from_toml_str(spec).unwrap();
    let mut model = build_model::<f64>(variant, &spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::from_fn(input, |_| rng.random_range(-1.0..1.0));
    let pixels = input.batch() * input.spatial().iter().product::<usize>();
    let batch = Batch {
        input,
        labels: (0..pixels).map(|i| (i % 3) as u8).collect(),
    };
    let analytic = model.training_pass(&batch, &objective).unwrap().gradient;
    let flat = Tensor::new(vec![analytic.len()], model.params.flat().to_vec()).unwrap();
    let numerical = numerical_gradient(&flat, STEP, |p| {
        model.params.flat_mut().copy_from_slice(p.data());
        Ok(model.training_pass(&batch, &objective)?.loss)
    })
    .unwrap();
    let analytic = Tensor::new(vec![analytic.len()], analytic).unwrap();
    assert!(
        compare(&analytic, &numerical, 1e-3).is_none(),
        "{:?}",
        compare(&analytic, &numerical, 1e-3)
    );
}

#[test]
fn two_layer_network_matches_finite_differences() {
    check_model(
        TOY_3D,
        ModelVariant::ThreeDStandard,
        &[1, 2, 4, 4, 3],
        Objective::Full {
            targets: TargetWeights::new(vec![0.4, 0.3, 0.3]).unwrap(),
            coefficients: None,
            normalizer: Normalizer::Voxels,
        },
    );
}

#[test]
fn bundle_with_batchnorm_and_auxiliary_heads_matches_finite_differences() {
    check_model(
        TOY_2D_BUNDLE,
        ModelVariant::TwoD1(Orientation::Axial),
        &[2, 2, 4, 4],
        Objective::Full {
            targets: TargetWeights::new(vec![0.5, 0.25, 0.25]).unwrap(),
            coefficients: Some(LossCoefficients::default_for(2)),
            normalizer: Normalizer::Pixels,
        },
    );
}
