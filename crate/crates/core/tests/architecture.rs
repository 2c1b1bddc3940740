use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg::model::{forward, init_params, predict, MiniUNet, ModelConfig};
use sparseseg::task_store::Image;

/// 3×3 convolution with bias.
fn conv3(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

/// Two convolutions per block, each with an optional per-channel scale and shift.
fn block(cin: usize, cout: usize, norm: bool) -> usize {
    let extra = if norm { 2 * cout } else { 0 };
    conv3(cin, cout) + conv3(cout, cout) + 2 * extra
}

fn recipe_count(enc: [usize; 3], center: usize, classes: usize, norm: bool) -> usize {
    let mut total = 0;
    let mut cin = 1;
    for &c in &enc {
        total += block(cin, c, norm);
        cin = c;
    }
    total += block(cin, center, norm);
    let mut below = center;
    for &c in enc.iter().rev() {
        total += block(below + c, c, norm);
        below = c;
    }
    total + below * classes + classes
}

fn random_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn default_parameter_count_matches_block_recipe() {
    let config = ModelConfig::default();
    let params = init_params(&config, 0).unwrap();
    let expected = recipe_count(config.encoder_channels, config.center_channels, 2, false);
    assert_eq!(params.numel(), expected);
    // hand tally of the default layout
    let per_conv = [
        160, 2320, 4640, 9248, 18496, 36928, 73856, 147584, 110656, 36928, 27680, 9248, 6928, 2320, 34,
    ];
    assert_eq!(expected, per_conv.iter().sum::<usize>());
}

#[test]
fn normalized_parameter_count_matches_block_recipe() {
    let config = ModelConfig {
        encoder_channels: [4, 8, 16],
        center_channels: 24,
        normalization: true,
        ..ModelConfig::default()
    };
    let params = init_params(&config, 0).unwrap();
    assert_eq!(params.numel(), recipe_count([4, 8, 16], 24, 2, true));
}

#[test]
fn outputs_match_input_resolution() {
    for side in [64, 128] {
        let config = ModelConfig {
            encoder_channels: [4, 8, 16],
            center_channels: 16,
            input_side: side,
            ..ModelConfig::default()
        };
        let net = MiniUNet::new(config.clone()).unwrap();
        let params = init_params(&config, 1).unwrap();
        let img = random_image(side, 2);
        let scores = forward(&net, &params, &[&img]).unwrap();
        assert_eq!(scores.shape(), &[1, 2, side, side]);
        let masks = predict(&net, &params, &[&img]).unwrap();
        assert_eq!(masks[0].dims(), (side, side));
    }
}

#[test]
fn disabling_any_skip_changes_outputs() {
    let base = ModelConfig {
        encoder_channels: [4, 8, 16],
        center_channels: 16,
        input_side: 32,
        ..ModelConfig::default()
    };
    let params = init_params(&base, 3).unwrap();
    let img = random_image(32, 4);
    let reference = forward(&MiniUNet::new(base.clone()).unwrap(), &params, &[&img]).unwrap();
    for level in 0..3 {
        let mut skips = [true; 3];
        skips[level] = false;
        let config = ModelConfig {
            skip_connections: skips,
            ..base.clone()
        };
        let out = forward(&MiniUNet::new(config).unwrap(), &params, &[&img]).unwrap();
        let diff = out
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "skip {level}: max difference {diff}");
    }
}
