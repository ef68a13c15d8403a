use super::forward::{
    assemble_context, base_logits_node, normalized_batch, resolve_cond, upscaler_context_node,
    BatchCond, CtxItem,
};
use super::*;
use crate::image::Image;
use crate::pyramid::split_corner;
use crate::rng;
use crate::tensor::Graph;

fn tiny_cfg(base: usize, target: usize, channels: usize, levels: usize) -> ModelConfig {
    ModelConfig {
        base_h: base,
        base_w: base,
        target_h: target,
        target_w: target,
        pixelcnn: PixelCnnConfig {
            layers: 2,
            hidden: 6,
            kernel: 3,
            first_kernel: 3,
            levels,
            channels,
        },
        upscaler: UpscalerConfig {
            kind: UpscalerKind::TypeA,
            resnet_layers: 2,
            hidden: 8,
            patch: 2,
            shallow_layers: 2,
            shallow_hidden: 6,
            levels,
            channels,
            separate_corner_weights: false,
        },
        cond: CondConfig::default(),
    }
}

fn zero_params(model: &mut MultiscaleModel) {
    for t in model.params.values_mut() {
        t.data_mut().fill(0.0);
    }
}

fn rand_image(c: usize, h: usize, w: usize, levels: u16, seed: u64) -> Image {
    let mut img = Image::zeros(c, h, w);
    for i in 0..img.data().len() {
        img.data_mut()[i] = (rng::stream_u64(seed, &[i as u64]) % levels as u64) as u16;
    }
    img
}

#[test]
fn zero_parameters_give_zero_logits() {
    let cfg = tiny_cfg(4, 8, 1, 4);
    let mut model = init_params(&cfg, 1).unwrap();
    zero_params(&mut model);
    let img = rand_image(1, 4, 4, 4, 2);
    let logits = base_logits(&model, &img, &Conditioning::none()).unwrap();
    assert_eq!(logits.shape(), [4, 4, 1, 4]);
    assert!(logits.data().iter().all(|&v| v == 0.0));

    let scale_img = rand_image(1, 8, 8, 4, 3);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let known = KnownCorners {
        ul: &ul,
        ur: None,
        ll: None,
    };
    let target = split_corner(&scale_img, Corner::Ur);
    let up = upscaler_logits(
        &model,
        1,
        Corner::Ur,
        &known,
        &Conditioning::none(),
        &target,
        0,
    )
    .unwrap();
    assert_eq!(up.shape(), [4, 4, 4]);
    assert!(up.data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny_cfg(2, 4, 1, 2);
    let a = init_params(&cfg, 7).unwrap();
    let b = init_params(&cfg, 7).unwrap();
    assert_eq!(a.params.len(), b.params.len());
    for (name, t) in &a.params {
        assert!(
            t.bits_eq(&b.params[name]),
            "{name} differs across same-seed inits"
        );
    }
    let c = init_params(&cfg, 8).unwrap();
    assert!(
        a.params.iter().any(|(n, t)| !t.bits_eq(&c.params[n])),
        "different seeds must differ somewhere"
    );
}

#[test]
fn deep_resnet_activations_stay_bounded_after_init() {
    let mut cfg = tiny_cfg(4, 8, 1, 4);
    cfg.upscaler.resnet_layers = 12;
    cfg.upscaler.hidden = 32;
    let model = init_params(&cfg, 5).unwrap();
    let scale_img = rand_image(1, 8, 8, 4, 6);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let item = CtxItem {
        ul: &ul,
        ur: None,
        ll: None,
        target: None,
    };
    let ctx = assemble_context(&[item], 4, 0, true).unwrap();
    let mut g = Graph::new();
    let ctx = g.leaf(ctx, false);
    let bc = resolve_cond(&cfg, &[&Conditioning::none()]).unwrap();
    let node = upscaler_context_node(&mut g, &model, 1, Corner::Ur, ctx, 0, &bc).unwrap();
    let v = g.value(node);
    assert!(v.all_finite());
    assert!(
        v.data().iter().all(|&x| x.abs() <= 10.0),
        "post-init activations escaped [-10, 10]"
    );
}

#[test]
fn residual_block_with_zeroed_inner_weights_is_identity() {
    let cfg = tiny_cfg(4, 8, 1, 4);
    let mut model = init_params(&cfg, 9).unwrap();
    // Zero both convs of every residual block; conv_in and head stay live.
    let names: Vec<String> = model
        .params
        .keys()
        .filter(|n| n.contains(".b") && (n.ends_with("kernel") || n.ends_with("bias")))
        .cloned()
        .collect();
    for n in names {
        model.params.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let scale_img = rand_image(1, 8, 8, 4, 10);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let item = CtxItem {
        ul: &ul,
        ur: None,
        ll: None,
        target: None,
    };
    let ctx = assemble_context(&[item], 4, 0, true).unwrap();

    // Features after the residual stack must equal conv_in's output alone.
    let mut g = Graph::new();
    let input = g.leaf(ctx.clone(), false);
    let feats = super::forward::encoder_forward(
        &mut g,
        &model.params,
        "up1",
        &model.up_plan.encoder,
        input,
        None,
        &[],
    )
    .unwrap();
    let mut g2 = Graph::new();
    let input2 = g2.leaf(ctx, false);
    let only_in = super::forward::encoder_forward(
        &mut g2,
        &model.params,
        "up1",
        &EncoderPlan {
            conv_in: model.up_plan.encoder.conv_in.clone(),
            blocks: vec![],
        },
        input2,
        None,
        &[],
    )
    .unwrap();
    assert!(g.value(feats).bits_eq(g2.value(only_in)));
}

#[test]
fn absent_conditioning_reproduces_unconditional_outputs() {
    let mut cfg = tiny_cfg(4, 8, 1, 4);
    cfg.cond.num_classes = Some(3);
    cfg.cond.spatial_channels = Some(2);
    cfg.cond.encoder_hidden = 4;
    cfg.cond.encoder_layers = 1;
    let mut model = init_params(&cfg, 11).unwrap();
    let img = rand_image(1, 4, 4, 4, 12);
    let before = base_logits(&model, &img, &Conditioning::none()).unwrap();

    // Poison every conditioning-only parameter; absent conditioning must
    // not see any of it.
    let names: Vec<String> = model
        .params
        .keys()
        .filter(|n| n.ends_with(".class") || n.starts_with("cond"))
        .cloned()
        .collect();
    assert!(!names.is_empty());
    for n in names {
        model.params.get_mut(&n).unwrap().data_mut().fill(123.456);
    }
    let after = base_logits(&model, &img, &Conditioning::none()).unwrap();
    assert!(before.bits_eq(&after));

    // And present conditioning must change something.
    let conditioned = base_logits(&model, &img, &Conditioning::class(1)).unwrap();
    assert!(!before.bits_eq(&conditioned));
}

#[test]
fn base_logits_ignore_raster_future_pixels() {
    let cfg = tiny_cfg(4, 4, 1, 4);
    let model = init_params(&cfg, 13).unwrap();
    let img = rand_image(1, 4, 4, 4, 14);
    let full = base_logits(&model, &img, &Conditioning::none()).unwrap();
    for pr in 0..4 {
        for pc in 0..4 {
            let mut perturbed = img.clone();
            let v = perturbed.at(0, pr, pc);
            perturbed.set(0, pr, pc, (v + 1) % 4);
            let got = base_logits(&model, &perturbed, &Conditioning::none()).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    // Raster-earlier pixels, and the perturbed pixel itself,
                    // keep bit-identical logits.
                    if (r, c) <= (pr, pc) {
                        for k in 0..4 {
                            let i = (r * 4 + c) * 4 + k;
                            assert_eq!(
                                full.data()[i].to_bits(),
                                got.data()[i].to_bits(),
                                "logits at ({r},{c}) moved when ({pr},{pc}) changed"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn rgb_channel_masking_blue_is_invisible_to_red_green() {
    let mut cfg = tiny_cfg(4, 4, 3, 4);
    cfg.pixelcnn.hidden = 6; // divides into 3 groups
    let model = init_params(&cfg, 15).unwrap();
    let img = rand_image(3, 4, 4, 4, 16);
    let full = base_logits(&model, &img, &Conditioning::none()).unwrap();
    for pr in 0..4 {
        for pc in 0..4 {
            let mut perturbed = img.clone();
            let v = perturbed.at(2, pr, pc);
            perturbed.set(2, pr, pc, (v + 1) % 4);
            let got = base_logits(&model, &perturbed, &Conditioning::none()).unwrap();
            for ch in 0..2 {
                for k in 0..4 {
                    let i = ((pr * 4 + pc) * 3 + ch) * 4 + k;
                    assert_eq!(
                        full.data()[i].to_bits(),
                        got.data()[i].to_bits(),
                        "channel {ch} at ({pr},{pc}) saw its own blue"
                    );
                }
            }
        }
    }
}

#[test]
fn later_corners_do_not_leak_into_earlier_logits() {
    let cfg = tiny_cfg(4, 8, 1, 4);
    let model = init_params(&cfg, 17).unwrap();
    let scale_img = rand_image(1, 8, 8, 4, 18);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let ur = split_corner(&scale_img, Corner::Ur);
    let ll = split_corner(&scale_img, Corner::Ll);
    let lr = split_corner(&scale_img, Corner::Lr);

    let eval_ur = |lr_img: &Image| {
        // UR's own context never includes LR; recomputing with a different
        // LR must be bit-identical. LR enters only via the images we do not
        // pass here, so this asserts the context assembly is honest.
        let _ = lr_img;
        upscaler_logits(
            &model,
            1,
            Corner::Ur,
            &KnownCorners {
                ul: &ul,
                ur: None,
                ll: None,
            },
            &Conditioning::none(),
            &ur,
            0,
        )
        .unwrap()
    };
    let mut lr2 = lr.clone();
    lr2.set(0, 0, 0, (lr.at(0, 0, 0) + 1) % 4);
    assert!(eval_ur(&lr).bits_eq(&eval_ur(&lr2)));

    // LL's context includes UL and UR but not LR.
    let eval_ll = |ur_img: &Image| {
        upscaler_logits(
            &model,
            1,
            Corner::Ll,
            &KnownCorners {
                ul: &ul,
                ur: Some(ur_img),
                ll: None,
            },
            &Conditioning::none(),
            &ll,
            0,
        )
        .unwrap()
    };
    let base_ll = eval_ll(&ur);
    let mut ur2 = ur.clone();
    ur2.set(0, 1, 1, (ur.at(0, 1, 1) + 1) % 4);
    assert!(
        !base_ll.bits_eq(&eval_ll(&ur2)),
        "UR must genuinely influence LL logits"
    );
}

#[test]
fn missing_prerequisite_corner_is_an_error() {
    let cfg = tiny_cfg(4, 8, 1, 4);
    let model = init_params(&cfg, 19).unwrap();
    let scale_img = rand_image(1, 8, 8, 4, 20);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let lr = split_corner(&scale_img, Corner::Lr);
    let err = upscaler_logits(
        &model,
        1,
        Corner::Lr,
        &KnownCorners {
            ul: &ul,
            ur: None,
            ll: None,
        },
        &Conditioning::none(),
        &lr,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, crate::Error::Geometry(_)), "{err}");
}

#[test]
fn batched_teacher_forcing_equals_single_item_passes() {
    // Losses and logits for all pixels of a group computed in one batched
    // pass must equal per-item evaluation.
    let cfg = tiny_cfg(4, 4, 1, 4);
    let model = init_params(&cfg, 21).unwrap();
    let imgs: Vec<Image> = (0..3).map(|i| rand_image(1, 4, 4, 4, 30 + i)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let batch = normalized_batch(&refs, 4).unwrap();
    let mut g = Graph::new();
    let batch = g.leaf(batch, false);
    let bc = BatchCond::none(3);
    let node = base_logits_node(&mut g, &model, batch, &bc).unwrap();
    let batched = g.value(node).clone();
    for (bi, img) in imgs.iter().enumerate() {
        let single = base_logits(&model, img, &Conditioning::none()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                for k in 0..4 {
                    let want = single.data()[(r * 4 + c) * 4 + k];
                    let got = batched.at4(bi, k, r, c);
                    assert_eq!(want.to_bits(), got.to_bits());
                }
            }
        }
    }
}

#[test]
fn type_b_logits_have_patch_layout_and_causality() {
    let mut cfg = tiny_cfg(4, 8, 1, 4);
    cfg.upscaler.kind = UpscalerKind::TypeB;
    cfg.upscaler.patch = 2;
    let model = init_params(&cfg, 22).unwrap();
    let scale_img = rand_image(1, 8, 8, 4, 23);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let ur = split_corner(&scale_img, Corner::Ur);
    let known = KnownCorners {
        ul: &ul,
        ur: None,
        ll: None,
    };
    let logits =
        upscaler_logits(&model, 1, Corner::Ur, &known, &Conditioning::none(), &ur, 0).unwrap();
    assert_eq!(logits.shape(), [4, 4, 4]);
    assert!(logits.all_finite());

    // Perturb the last pixel of patch (0,0); logits of that patch's first
    // pixel, and of every pixel in other patches, must be bit-unchanged.
    let mut ur2 = ur.clone();
    ur2.set(0, 1, 1, (ur.at(0, 1, 1) + 1) % 4);
    let logits2 = upscaler_logits(
        &model,
        1,
        Corner::Ur,
        &known,
        &Conditioning::none(),
        &ur2,
        0,
    )
    .unwrap();
    let row = |t: &crate::tensor::Tensor, r: usize, c: usize| -> Vec<u64> {
        (0..4)
            .map(|k| t.data()[(r * 4 + c) * 4 + k].to_bits())
            .collect()
    };
    assert_eq!(
        row(&logits, 0, 0),
        row(&logits2, 0, 0),
        "intra-patch past moved"
    );
    for (r, c) in [(0, 2), (1, 3), (2, 0), (3, 3)] {
        assert_eq!(
            row(&logits, r, c),
            row(&logits2, r, c),
            "cross-patch leak at ({r},{c})"
        );
    }
    // And the perturbed pixel's own logits must not see itself.
    assert_eq!(row(&logits, 1, 1), row(&logits2, 1, 1));
}

#[test]
fn separate_corner_weights_register_three_networks_per_scale() {
    let mut cfg = tiny_cfg(4, 8, 1, 4);
    cfg.upscaler.separate_corner_weights = true;
    let model = init_params(&cfg, 24).unwrap();
    for p in ["up1.ur.in.kernel", "up1.ll.in.kernel", "up1.lr.in.kernel"] {
        assert!(model.params.contains_key(p), "missing {p}");
    }
    assert!(!model.params.contains_key("up1.in.corner"));
    // Still evaluates.
    let scale_img = rand_image(1, 8, 8, 4, 25);
    let ul = crate::pyramid::subsample(&scale_img).unwrap();
    let ur = split_corner(&scale_img, Corner::Ur);
    let known = KnownCorners {
        ul: &ul,
        ur: None,
        ll: None,
    };
    upscaler_logits(&model, 1, Corner::Ur, &known, &Conditioning::none(), &ur, 0).unwrap();
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let mut cfg = tiny_cfg(4, 8, 3, 4);
    cfg.pixelcnn.hidden = 7; // not divisible by 3
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_cfg(2, 8, 1, 4);
    cfg.upscaler.kind = UpscalerKind::TypeB;
    cfg.upscaler.patch = 4; // scale-1 corners are 2x2
    assert!(cfg.validate().is_err());

    let cfg = tiny_cfg(4, 8, 1, 4);
    assert!(cfg.validate().is_ok());
}

#[test]
fn undeclared_conditioning_is_rejected() {
    let cfg = tiny_cfg(4, 4, 1, 4);
    let model = init_params(&cfg, 26).unwrap();
    let img = rand_image(1, 4, 4, 4, 27);
    let err = base_logits(&model, &img, &Conditioning::class(0)).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}
