use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tumorcast_nnet::{
    sgd_step, Checkpoint, InitScheme, LayerSpec, Network, NetworkSpec, SgdState, Shape, StreamSpec, Tensor,
    TrainConfig,
};

fn spec() -> NetworkSpec {
    NetworkSpec {
        name: "small".into(),
        streams: vec![StreamSpec {
            name: "invasion".into(),
            input: [9, 9, 3],
            layers: vec![
                LayerSpec::conv3(4),
                LayerSpec::Relu,
                LayerSpec::pool3s2(),
                LayerSpec::lrn_default(),
            ],
        }],
        trunk: vec![
            LayerSpec::Fc { out_units: 6 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Fc { out_units: 2 },
        ],
        init: InitScheme::Gaussian { std: 0.1 },
        seed: 21,
    }
}

fn trained() -> (Network<f32>, SgdState<f32>) {
    let mut net = Network::<f32>::new(&spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_vec(Shape::new(4, 9, 9, 3), (0..972).map(|v| ((v * 37) % 11) as f32 - 5.0).collect()).unwrap();
    let cfg = TrainConfig {
        lr0: 0.01,
        ..TrainConfig::default()
    };
    let mut state = SgdState::default();
    for _ in 0..3 {
        net.train_batch(std::slice::from_ref(&x), &[0, 1, 1, 0], &mut rng).unwrap();
        sgd_step(&mut net.params_mut(), &mut state, &cfg, 0);
    }
    (net, state)
}

#[test]
fn roundtrip_is_bit_exact_and_forward_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (net, state) = trained();
    let mut ckpt = Checkpoint::from_network(&net, vec![vec![0.25; 243]], 3, 99);
    ckpt.velocity = Some(state.flatten_f32());
    let path = dir.path().join("model.ckpt.json");
    ckpt.save(&path).unwrap();
    assert!(dir.path().join("model.ckpt.raw").exists());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let x = Tensor::from_vec(Shape::new(2, 9, 9, 3), (0..486).map(|v| (v % 13) as f32 * 0.5).collect()).unwrap();
    let before = net.infer(std::slice::from_ref(&x)).unwrap();
    let after = back.network::<f32>().unwrap().infer(std::slice::from_ref(&x)).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = trained();
    let ckpt = Checkpoint::from_network(&net, vec![], 1, 0);
    let path = dir.path().join("model.ckpt.json");
    ckpt.save(&path).unwrap();
    let raw = dir.path().join("model.ckpt.raw");
    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = trained();
    let path = dir.path().join("model.ckpt.json");
    Checkpoint::from_network(&net, vec![], 1, 0).save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
    std::fs::write(&path, text).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn training_is_bitwise_deterministic() {
    let (a, _) = trained();
    let (b, _) = trained();
    assert_eq!(a.export_f32(), b.export_f32());
}
