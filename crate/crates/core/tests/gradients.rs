use eyetrack::blazegaze::gradcheck::{check_losses, check_model, tiny_arch};
use eyetrack::blazegaze::LossWeights;
use eyetrack::nn::gradcheck::{check_layer, randomize, random_tensor, CheckReport, DEFAULT_EPS};
use eyetrack::nn::{BlazeBlock, BlazeBlockSpec, Conv2d, ConvTranspose2d, Dense, DepthwiseConv2d, Layer, MaxPool2d};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn assert_ok(what: &str, seed: u64, r: &CheckReport) {
    assert!(r.max_rel_error < TOL, "{what} seed {seed}: rel error {:.3e} in {}", r.max_rel_error, r.worst);
    // Kink-straddling probes must stay rare or the check proves little.
    assert!(r.checked > 0 && r.skipped * 20 <= r.checked, "{what} seed {seed}: {} skipped of {}", r.skipped, r.checked);
}

fn per_seed(what: &str, mut f: impl FnMut(&mut ChaCha8Rng) -> CheckReport) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = f(&mut rng);
        assert_ok(what, seed, &r);
    }
}

fn with_random_params(mut layer: Layer, rng: &mut ChaCha8Rng) -> Layer {
    randomize(layer.params_mut(), 1.0, rng);
    layer
}

#[test]
fn conv2d() {
    per_seed("conv2d", |rng| {
        let l = Layer::Conv2d(Conv2d::new(3, 4, 3, 2, 1, true, rng).unwrap());
        check_layer(with_random_params(l, rng), &random_tensor(&[3, 7, 6], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn conv2d_pointwise() {
    per_seed("conv2d 1x1", |rng| {
        let l = Layer::Conv2d(Conv2d::new(5, 3, 1, 1, 0, true, rng).unwrap());
        check_layer(with_random_params(l, rng), &random_tensor(&[5, 4, 3], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn depthwise() {
    per_seed("depthwise", |rng| {
        let l = Layer::Depthwise(DepthwiseConv2d::new(3, 5, 1, 2, true, rng).unwrap());
        check_layer(with_random_params(l, rng), &random_tensor(&[3, 6, 7], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn conv_transpose() {
    per_seed("conv_transpose", |rng| {
        let l = Layer::ConvTranspose(ConvTranspose2d::new(3, 2, 4, 2, 1, true, rng).unwrap());
        check_layer(with_random_params(l, rng), &random_tensor(&[3, 3, 4], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn dense() {
    per_seed("dense", |rng| {
        let l = Layer::Dense(Dense::new(7, 4, rng).unwrap());
        check_layer(with_random_params(l, rng), &random_tensor(&[7], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn activations_and_pooling() {
    per_seed("relu", |rng| check_layer(Layer::Relu, &random_tensor(&[2, 3, 4], rng), DEFAULT_EPS, rng).unwrap());
    per_seed("sigmoid", |rng| check_layer(Layer::Sigmoid, &random_tensor(&[2, 3, 4], rng), DEFAULT_EPS, rng).unwrap());
    per_seed("maxpool", |rng| {
        check_layer(Layer::MaxPool(MaxPool2d { kernel: 2, stride: 2 }), &random_tensor(&[2, 4, 6], rng), DEFAULT_EPS, rng)
            .unwrap()
    });
    per_seed("reshape", |rng| {
        check_layer(Layer::Reshape(vec![24]), &random_tensor(&[2, 3, 4], rng), DEFAULT_EPS, rng).unwrap()
    });
}

#[test]
fn blaze_blocks() {
    let specs = [
        BlazeBlockSpec::single(4, 4, 1),
        BlazeBlockSpec::single(4, 6, 2),
        BlazeBlockSpec::double(4, 3, 4, 1),
        BlazeBlockSpec::double(4, 3, 6, 2),
    ];
    for spec in specs {
        per_seed(&format!("{spec:?}"), |rng| {
            let l = Layer::Blaze(Box::new(BlazeBlock::new(spec, rng).unwrap()));
            check_layer(with_random_params(l, rng), &random_tensor(&[4, 8, 16], rng), DEFAULT_EPS, rng).unwrap()
        });
    }
}

#[test]
fn losses() {
    per_seed("losses", |rng| check_losses(5, 6, DEFAULT_EPS, rng).unwrap());
}

#[test]
fn composed_model() {
    per_seed("model", |rng| check_model(tiny_arch(), 3, &LossWeights::default(), DEFAULT_EPS, 12, rng).unwrap());
}
