use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

#[test]
fn unet_counts_fifteen_encoder_and_twelve_decoder_convs() {
    for rank in [Rank::Two, Rank::Three] {
        let net = build_unet(rank, 1).unwrap();
        assert_eq!(net.conv_count(Stage::Encoder), 15);
        assert_eq!(net.conv_count(Stage::Decoder), 12);
    }
}

#[test]
fn encoder_endpoint_at_full_width() {
    for kind in ModelKind::ALL {
        let net = build(kind, Rank::Three, 1).unwrap();
        let shapes = net.infer_shapes(&[1, 128, 128, 128, 4]).unwrap();
        assert_eq!(shapes[net.encoder_endpoint], vec![1, 8, 8, 8, 256], "{kind}");
        assert_eq!(shapes[net.output_layer()], vec![1, 128, 128, 128, 4], "{kind}");
    }
}

#[test]
fn width_scale_divides_schedule() {
    let net = build_unet(Rank::Two, 8).unwrap();
    let shapes = net.infer_shapes(&[2, 32, 32, 4]).unwrap();
    assert_eq!(shapes[net.encoder_endpoint], vec![2, 2, 2, 32]);
    assert!(matches!(build_unet(Rank::Two, 3), Err(ArchError::IndivisibleSchedule(3))));
    assert!(build_resnet(Rank::Two, 0).is_err());
}

#[test]
fn input_must_survive_pooling_pyramid() {
    let net = build_unet(Rank::Three, 16).unwrap();
    assert!(matches!(
        net.infer_shapes(&[1, 24, 32, 32, 4]),
        Err(ArchError::InputShape { .. })
    ));
    assert!(net.infer_shapes(&[1, 32, 32, 32, 3]).is_err());
    assert!(net.infer_shapes(&[1, 32, 32, 4]).is_err());
}

#[test]
fn resnet_shortcuts_span_three_convs() {
    for rank in [Rank::Two, Rank::Three] {
        let net = build_resnet(rank, 1).unwrap();
        let spans = net.residual_spans();
        assert_eq!(spans.len(), 9);
        assert!(spans.iter().all(|&s| s == resnet::RESIDUAL_SPAN));
    }
}

#[test]
fn factorized_kernels_preserve_shape() {
    let net = build_inception_v4(Rank::Two, 4).unwrap();
    let shapes = net.infer_shapes(&[1, 16, 16, 4]).unwrap();
    for (l, s) in net.layers.iter().zip(&shapes) {
        if l.name.ends_with("conv7x1") {
            let input = &shapes[l.inputs[0]];
            assert_eq!(s[..3], input[..3], "{}", l.name);
        }
    }
    assert!(net.layers.iter().any(|l| l.name == "enc1.block2.b1.conv7x1"));
}

#[test]
fn wide_kernel_on_narrow_map_errors() {
    let mut g = GraphBuilder::new(Rank::Two);
    let mut x = 0;
    for i in 0..3 {
        x = g.pool(format!("p{i}"), x, PoolMode::Max);
    }
    let y = g.conv("wide", x, vec![1, 7], 4, true);
    g.head(y);
    let net = g.finish(ModelKind::InceptionV4, 1, x);
    let err = net.infer_shapes(&[1, 16, 16, 4]).unwrap_err();
    assert!(matches!(err, ArchError::KernelExceedsExtent { kernel: 7, extent: 2, .. }), "{err}");
}

#[test]
fn branch_budget_split() {
    assert_eq!(split_branches(16, 4), vec![4, 4, 4, 4]);
    assert_eq!(split_branches(10, 4), vec![4, 2, 2, 2]);
    assert_eq!(split_branches(2, 4), vec![1, 1, 1, 1]);
    assert_eq!(split_branches(5, 2), vec![3, 2]);
}

#[test]
fn hybrid_pool_halves_space_and_doubles_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[1, 4, 4, 3], |i| i as f64));
    let y = hybrid_pool(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 6]);
    let odd = tape.leaf(Tensor::zeros(&[1, 5, 4, 3]));
    assert!(hybrid_pool(&mut tape, odd).is_err());
}

#[test]
fn forward_matches_inferred_shapes_and_yields_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in ModelKind::ALL {
        for (rank, input) in [(Rank::Two, vec![2, 16, 16, 4]), (Rank::Three, vec![1, 16, 16, 16, 4])] {
            let net = build(kind, rank, 16).unwrap();
            let params: ParamStore<f32> = net.init_params(&mut rng).unwrap();
            assert_eq!(params.numel(), net.param_count());
            let x = Tensor::from_fn(&input, |i| ((i * 7919) % 101) as f32 / 101.0);
            let p = net.predict(&params, &x).unwrap();
            let mut expect = input.clone();
            *expect.last_mut().unwrap() = OUT_CLASSES;
            assert_eq!(p.shape(), expect.as_slice(), "{kind} {rank}");
            for px in p.data().chunks_exact(OUT_CLASSES) {
                assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn summary_lists_every_layer() {
    let net = build_inception_v3(Rank::Three, 8).unwrap();
    let text = net.render_summary(&[1, 32, 32, 32, 4]).unwrap();
    assert_eq!(text.lines().count(), net.layers.len() + 2);
    assert!(text.contains("enc4.cat\tconcat branches\t1x2x2x2x32"));
}

#[test]
fn narrower_networks_have_fewer_parameters() {
    for kind in ModelKind::ALL {
        let wide = build(kind, Rank::Three, 1).unwrap().param_count();
        let narrow = build(kind, Rank::Three, 2).unwrap().param_count();
        assert!(narrow < wide, "{kind}: {narrow} vs {wide}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    use crate::loss::{total_loss, uniform_weights, FocalParams};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in ModelKind::ALL {
        // narrower widths leave single-channel branches that a dead ReLU can cut off
        let net = build(kind, Rank::Two, 2).unwrap();
        let mut params: ParamStore<f64> = net.init_params(&mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 16, 16, 4], |_| rng.random_range(-1.0..1.0)));
        let target = Tensor::from_fn(&[2, 16, 16, 4], |i| ((i / 4) % 4 == i % 4) as u8 as f64);
        let p = net.forward(&mut tape, &params, x, false, &mut rng).unwrap();
        let loss = total_loss(&mut tape, p, &target, &uniform_weights(4), FocalParams::default()).unwrap();
        tape.backward(loss.total).unwrap().write_params(&mut params);
        for prm in params.iter() {
            assert!(prm.grad.data().iter().any(|g| *g != 0.0), "{kind}: {} has no gradient", prm.name);
        }
    }
}
