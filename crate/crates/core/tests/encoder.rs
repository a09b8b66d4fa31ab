use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvl::encoder::{
    self, encode_image, encode_images, encode_text, encode_with_contributions, load_checkpoint, save_checkpoint,
    EncoderConfig, ModelParams, MANIFEST_FILE, WEIGHTS_FILE,
};
use rvl::{Error, Image};

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Initialized params with every tensor jittered so biases and gains are
/// non-trivial.
fn random_params(config: &EncoderConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    p
}

fn rel_residual(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / encoder::norm(b)
}

#[test]
fn ledger_is_complete_on_random_images() {
    let config = EncoderConfig::default();
    let params = random_params(&config, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<Image> = (0..1000).map(|_| random_image(&mut rng, 32)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let mut worst = 0.0f64;
    for (e, ledger) in encode_images(&refs, &params, true).unwrap() {
        worst = worst.max(rel_residual(&ledger.unwrap().total(), &e.vector));
    }
    println!("worst completeness residual {worst:.3e}");
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn completeness_across_small_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (layers, heads) in [(1, 1), (2, 8), (8, 2), (3, 4)] {
        let config = EncoderConfig { layers, heads, width: 32, image_side: 16, patches: 4, ..Default::default() };
        let params = random_params(&config, layers as u64 * 10 + heads as u64);
        for _ in 0..5 {
            let img = random_image(&mut rng, 16);
            let (e, ledger) = encode_image(&img, &params, true).unwrap();
            let ledger = ledger.unwrap();
            assert_eq!((ledger.layers, ledger.heads, ledger.tokens), (layers, heads, 5));
            assert!(rel_residual(&ledger.total(), &e.vector) <= 1e-5);
        }
    }
}

#[test]
fn recording_does_not_perturb() {
    let config = EncoderConfig::default();
    let params = random_params(&config, 5);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(6), 32);
    let (a, none) = encode_image(&img, &params, false).unwrap();
    let (b, some) = encode_image(&img, &params, true).unwrap();
    assert!(none.is_none() && some.is_some());
    assert_eq!(a, b);
}

#[test]
fn batching_matches_single_calls() {
    let config = EncoderConfig::default();
    let params = random_params(&config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images: Vec<Image> = (0..5).map(|_| random_image(&mut rng, 32)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let batch = encode_images(&refs, &params, false).unwrap();
    for (img, (e, _)) in images.iter().zip(batch) {
        assert_eq!(encode_image(img, &params, false).unwrap().0, e);
    }
}

#[test]
fn zeroed_output_projection_silences_msa_terms() {
    let config = EncoderConfig::default();
    let mut params = random_params(&config, 9);
    for b in params.vision.blocks.clone() {
        params.get_mut(b.w_o).data_mut().fill(0.0);
        params.get_mut(b.b_o).data_mut().fill(0.0);
    }
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(10), 32);
    let (e, ledger) = encode_image(&img, &params, true).unwrap();
    let ledger = ledger.unwrap();
    for l in 0..config.layers {
        for m in 0..config.heads {
            for i in 0..config.tokens() {
                assert!(ledger.msa(l, m, i).iter().all(|&v| v == 0.0));
            }
        }
    }
    let mut expect = ledger.input_term.clone();
    for t in &ledger.mlp_terms {
        for (o, v) in expect.iter_mut().zip(t) {
            *o += v;
        }
    }
    assert!(rel_residual(&expect, &e.vector) <= 1e-12);
}

#[test]
fn contributions_match_ledger() {
    let config = EncoderConfig::default();
    let params = random_params(&config, 12);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(13), 32);
    let weights = [0.1, 0.2, 0.3, 0.4];
    let (_, ledger) = encode_image(&img, &params, true).unwrap();
    let ledger = ledger.unwrap();
    let (_, contrib) = encode_with_contributions(&[&img], &params, &weights).unwrap().pop().unwrap();
    for i in 0..config.patches {
        let mut expect = vec![0.0; config.joint_dim];
        for (l, w) in weights.iter().enumerate() {
            for (o, v) in expect.iter_mut().zip(ledger.msa_token(l, i + 1)) {
                *o += w * v;
            }
        }
        for (a, b) in contrib[i].iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn permuting_patches_permutes_token_axis_without_positions() {
    let config = EncoderConfig::default();
    let mut params = random_params(&config, 14);
    let pos = params.vision.pos;
    params.get_mut(pos).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = random_image(&mut rng, 32);
    // swap two grid cells
    let (a, b) = ((0usize, 1usize), (2usize, 3usize));
    let mut data = img.data().to_vec();
    for y in 0..8 {
        for x in 0..8 {
            for ch in 0..3 {
                let pa = ((a.0 * 8 + y) * 32 + a.1 * 8 + x) * 3 + ch;
                let pb = ((b.0 * 8 + y) * 32 + b.1 * 8 + x) * 3 + ch;
                data.swap(pa, pb);
            }
        }
    }
    let swapped = Image::new(32, data).unwrap();
    let la = encode_image(&img, &params, true).unwrap().1.unwrap();
    let lb = encode_image(&swapped, &params, true).unwrap().1.unwrap();
    let (ta, tb) = (1 + a.0 * 4 + a.1, 1 + b.0 * 4 + b.1);
    let perm = |i: usize| if i == ta { tb } else if i == tb { ta } else { i };
    for l in 0..config.layers {
        for m in 0..config.heads {
            for i in 0..config.tokens() {
                for (x, y) in la.msa(l, m, i).iter().zip(lb.msa(l, m, perm(i))) {
                    assert!((x - y).abs() <= 1e-10, "layer {l} head {m} token {i}");
                }
            }
        }
    }
}

#[test]
fn wrong_image_size_is_config_error() {
    let params = ModelParams::init(&EncoderConfig::default(), 1).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 16);
    assert!(matches!(encode_image(&img, &params, false), Err(Error::Config(_))));
}

#[test]
fn text_examples() {
    let params = random_params(&EncoderConfig::default(), 16);
    let a = encode_text(&[3, 4, 5], &params).unwrap();
    assert_eq!(a, encode_text(&[3, 4, 5], &params).unwrap());
    assert!(matches!(encode_text(&[], &params), Err(Error::Argument(_))));
    assert!(matches!(encode_text(&[1; 17], &params), Err(Error::Argument(_))));
    assert!(matches!(encode_text(&[64], &params), Err(Error::Argument(_))));
    // padding inside a batch leaves results unchanged
    let batch = encoder::encode_texts(&[&[3, 4, 5], &[7, 8, 9, 10, 11, 12]], &params).unwrap();
    assert_eq!(batch[0], a);
    let n = a.normalized();
    assert!(n.normalized && (n.norm() - 1.0).abs() <= 1e-9);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let params = random_params(&EncoderConfig::default(), 17);
    save_checkpoint(&params, None, dir.path()).unwrap();
    let (back, vocab) = load_checkpoint(dir.path()).unwrap();
    assert!(vocab.is_none());
    assert_eq!(back.config(), params.config());
    for (a, b) in back.tensors().iter().zip(params.tensors()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let blob = dir.path().join(WEIGHTS_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    std::fs::write(&blob, &bytes).unwrap();

    let man = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&man).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["tensors"][0]["shape"] = serde_json::json!([192, 63]);
    std::fs::write(&man, json.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
}
