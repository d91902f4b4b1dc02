use eyetrack::blazegaze::gradcheck::tiny_arch;
use eyetrack::blazegaze::train::{train_stage1, Split, Stage1Config, TrainSample};
use eyetrack::blazegaze::{BlazeGazeModel, LossWeights};
use eyetrack::simulator::{make_user_dataset, CaptureConfig, SyntheticUser};
use eyetrack::PatchConfig;

fn samples(n_users: usize, per_user: usize) -> Vec<TrainSample> {
    let cfg = CaptureConfig { patch: PatchConfig { height: 8, width: 16, ..PatchConfig::reduced() }, ..CaptureConfig::default() };
    (0..n_users)
        .flat_map(|u| make_user_dataset(&SyntheticUser::new(&format!("s{u}"), 3), per_user, &cfg).unwrap())
        .map(|s| {
            let mut pose = [0.0; 12];
            pose[..9].copy_from_slice(&s.truth.rotation);
            pose[9..].copy_from_slice(&s.truth.translation);
            TrainSample { patch: s.patch.to_chw(), pose, gaze: s.truth.gaze, weight: 1.0 }
        })
        .collect()
}

fn train_curve(out: &eyetrack::blazegaze::train::Stage1Outcome) -> Vec<f64> {
    out.log.iter().filter(|r| r.split == Split::Train).map(|r| r.loss.total).collect()
}

#[test]
fn simulated_set_loss_halves_in_twenty_epochs() {
    let data = samples(4, 50);
    let out = train_stage1(BlazeGazeModel::new(tiny_arch(), 1).unwrap(), &data, &[], &Stage1Config::default()).unwrap();
    let curve = train_curve(&out);
    assert_eq!(curve.len(), 21);
    assert!(curve[20] <= 0.5 * curve[0], "{curve:?}");
}

#[test]
fn autoencoder_ablation_reconstruction_decreases() {
    let data = samples(2, 50);
    let cfg = Stage1Config { weights: LossWeights { beta_r: 1.0, beta_g: 0.0, beta_c: 0.0 }, ..Stage1Config::default() };
    let out = train_stage1(BlazeGazeModel::new(tiny_arch(), 2).unwrap(), &data, &[], &cfg).unwrap();
    let rec: Vec<f64> = out.log.iter().map(|r| r.loss.reconstruction).collect();
    for w in rec[1..].windows(2) {
        assert!(w[1] <= w[0], "{rec:?}");
    }
    assert!(out.log.iter().all(|r| r.loss.total == r.loss.reconstruction));
}

#[test]
fn seeded_rerun_is_bitwise_identical() {
    let data = samples(2, 20);
    let cfg = Stage1Config { epochs: 3, seed: 9, ..Stage1Config::default() };
    let a = train_stage1(BlazeGazeModel::new(tiny_arch(), 3).unwrap(), &data[..30], &data[30..], &cfg).unwrap();
    let b = train_stage1(BlazeGazeModel::new(tiny_arch(), 3).unwrap(), &data[..30], &data[30..], &cfg).unwrap();
    assert_eq!(a.model, b.model);
    let bits = |o: &eyetrack::blazegaze::train::Stage1Outcome| o.log.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
