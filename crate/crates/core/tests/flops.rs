use eyetrack::blazegaze::{ArchConfig, BlazeGazeModel};
use eyetrack::nn::{Conv2d, Dense, DepthwiseConv2d, Layer, Sequential};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Conv 3→8 (3×3, stride 2, pad 1) on 3×16×16, depthwise 5×5 on 8×8×8,
/// then dense 512→10.
fn fixture() -> Sequential {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(3, 8, 3, 2, 1, true, &mut rng).unwrap()),
        Layer::Relu,
        Layer::Depthwise(DepthwiseConv2d::new(8, 5, 1, 2, true, &mut rng).unwrap()),
        Layer::Reshape(vec![512]),
        Layer::Dense(Dense::new(512, 10, &mut rng).unwrap()),
    ])
}

#[test]
fn three_layer_fixture_matches_hand_count() {
    // Per output element: in_channels·k² for the conv, k² for the
    // depthwise, inputs for the dense layer.
    let conv = 8 * 8 * 8 * (3 * 3 * 3);
    let depthwise = 8 * 8 * 8 * (5 * 5);
    let dense = 10 * 512;
    let macs = (conv + depthwise + dense) as u64;
    assert_eq!(macs, 31_744);
    let net = fixture();
    assert_eq!(net.macs(&[3, 16, 16]).unwrap(), macs);
    assert_eq!(net.flops(&[3, 16, 16]).unwrap(), 2 * macs);
    assert_eq!(net.param_count(), (8 * 27 + 8) + (8 * 25 + 8) + (512 * 10 + 10));
}

#[test]
fn counter_rejects_wrong_input_shape() {
    assert!(fixture().macs(&[4, 16, 16]).is_err());
}

#[test]
fn full_model_statistics() {
    let m = BlazeGazeModel::new(ArchConfig::full(), 0).unwrap();
    let n = m.inference_param_count();
    assert!((120_000..=200_000).contains(&n), "{n} parameters");
    let flops = m.encoder.flops(&m.arch.input_shape()).unwrap() + m.head.flops(&[m.arch.embedding_dim() + 12]).unwrap();
    assert_eq!(flops, 2 * m.inference_macs().unwrap());
}
