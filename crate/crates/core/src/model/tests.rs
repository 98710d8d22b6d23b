use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{backward, ops::tests::rand_tensor};
use crate::prompts::{BoxPrompt, Polarity, PointPrompt, Scribble};
use crate::synth::{generate_case, SynthSpec};

fn small_config(encoder: EncoderVariant) -> ModelConfig {
    ModelConfig { patch_size: 16, depth: 2, encoder, transformer_blocks: 1, interaction_blocks: 1, ..Default::default() }
}

fn image(n: usize, seed: u64) -> Volume {
    let spec = SynthSpec { grid_size: [n; 3], radius_range: (2.0, 3.0), deformation_amplitude: 0.5, ..Default::default() };
    generate_case(&spec, seed).unwrap().image
}

fn pos(c: [usize; 3]) -> PointPrompt {
    PointPrompt { coord: c, label: Polarity::Positive }
}

fn neg(c: [usize; 3]) -> PointPrompt {
    PointPrompt { coord: c, label: Polarity::Negative }
}

fn state(n: usize, points: Vec<PointPrompt>, bbox: Option<BoxPrompt>) -> PromptState {
    PromptState::initial(Shape3::cube(n), points, vec![], bbox).unwrap()
}

#[test]
fn encoder_shape_contracts() {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    let p = m.bind_frozen();
    let enc = m.encode_image(&p, &image(32, 1)).unwrap();
    assert_eq!(enc.features.shape(), &[128, 4, 4, 4]);
    let skip_shapes: Vec<_> = enc.skips.iter().map(|s| s.shape().to_vec()).collect();
    assert_eq!(skip_shapes, vec![vec![8, 32, 32, 32], vec![16, 16, 16, 16], vec![32, 8, 8, 8]]);
    let f_d = m.decode(&p, &enc.features, &enc.skips);
    assert_eq!(f_d.shape(), &[8, 32, 32, 32]);
}

#[test]
fn vit_only_encoder_decodes_without_skips() {
    let m = Model::new(small_config(EncoderVariant::Vit), 0).unwrap();
    let p = m.bind_frozen();
    let enc = m.encode_image(&p, &image(16, 2)).unwrap();
    assert!(enc.skips.is_empty());
    let out = m.infer(&p, &enc, &state(16, vec![pos([8, 8, 8])], None)).unwrap();
    assert_eq!(out.refined.shape(), &[1, 16, 16, 16]);
}

#[test]
fn hybrid_with_zero_vit_projection_matches_cnn() {
    let mut hybrid = Model::new(small_config(EncoderVariant::Hybrid), 3).unwrap();
    let mut cnn = Model::new(small_config(EncoderVariant::Cnn), 4).unwrap();
    hybrid.zero_vit_projection();
    assert!(cnn.copy_matching_params(&hybrid) > 0);
    let img = image(16, 5);
    let a = hybrid.encode_image(&hybrid.bind_frozen(), &img).unwrap();
    let b = cnn.encode_image(&cnn.bind_frozen(), &img).unwrap();
    for (x, y) in a.features.data().iter().zip(b.features.data()) {
        assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
    }
}

#[test]
fn encoder_runs_once_per_episode() {
    let m = Model::new(small_config(EncoderVariant::Hybrid), 0).unwrap();
    let p = m.bind_frozen();
    let img = image(16, 6);
    let mut cache = EncoderCache::new();
    for _ in 0..4 {
        m.encode_image_cached(&p, &mut cache, "case-0", &img).unwrap();
    }
    assert_eq!(cache.forward_count(), 1);
    m.encode_image_cached(&p, &mut cache, "case-1", &img).unwrap();
    assert_eq!(cache.forward_count(), 2);
}

#[test]
fn token_counts() {
    let m = Model::new(small_config(EncoderVariant::Cnn), 0).unwrap();
    let p = m.bind_frozen();
    let (none, _) = m.encode_prompts(&p, &state(16, vec![], None), None);
    assert_eq!(none.prompt_count(), 0);
    assert_eq!(none.kinds, vec![TokenKind::Padding]);
    let bbox = BoxPrompt { min: [2, 2, 2], max: [9, 9, 9] };
    let (t, _) = m.encode_prompts(&p, &state(16, vec![pos([4, 4, 4]), neg([1, 1, 1])], Some(bbox)), None);
    assert_eq!(t.prompt_count(), 4);
    assert_eq!(t.tokens.shape(), &[4, 128]);
    let scribble = Scribble { voxels: (0..40).map(|i| [i % 16, 3, 3]).collect(), label: Polarity::Positive };
    let s = PromptState::initial(Shape3::cube(16), vec![], vec![scribble], None).unwrap();
    let (t, _) = m.encode_prompts(&p, &s, None);
    assert_eq!(t.prompt_count(), 16);
}

#[test]
fn subsample_keeps_order_and_bound() {
    let v: Vec<usize> = (0..40).collect();
    let s = subsample(&v, 16);
    assert_eq!(s.len(), 16);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(subsample(&v[..5], 16), v[..5].to_vec());
}

#[test]
fn forward_is_deterministic() {
    let img = image(16, 7);
    let st = state(16, vec![pos([8, 8, 8])], Some(BoxPrompt { min: [4, 4, 4], max: [12, 12, 12] }));
    let run = || {
        let m = Model::new(small_config(EncoderVariant::Hybrid), 9).unwrap();
        let p = m.bind_frozen();
        let enc = m.encode_image(&p, &img).unwrap();
        let o = m.infer(&p, &enc, &st).unwrap();
        (o.maps.data().to_vec(), o.refined.data().to_vec(), o.selected)
    };
    assert_eq!(run(), run());
}

#[test]
fn interaction_preserves_shapes_and_is_token_equivariant() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let p = m.bind_frozen();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let img = Var::constant(rand_tensor(&[128, 4, 4, 4], &mut r));
    let toks = rand_tensor(&[3, 128], &mut r);
    let (zx, zv) = m.interact(&p, &img, &Var::constant(toks.clone()));
    assert_eq!(zx.shape(), &[128, 4, 4, 4]);
    assert_eq!(zv.shape(), &[3, 128]);
    let perm = [2usize, 0, 1];
    let mut pdata = Vec::new();
    for &i in &perm {
        pdata.extend_from_slice(&toks.data()[i * 128..(i + 1) * 128]);
    }
    let (zx2, zv2) = m.interact(&p, &img, &Var::constant(Tensor::new(vec![3, 128], pdata)));
    for (a, b) in zx.data().iter().zip(zx2.data()) {
        assert!((a - b).abs() < 1e-4);
    }
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..128 {
            assert!((zv2.data()[k * 128 + c] - zv.data()[i * 128 + c]).abs() < 1e-4);
        }
    }
}

#[test]
fn zero_image_update_leaves_image_unchanged() {
    let mut m = Model::new(ModelConfig::default(), 1).unwrap();
    for id in m.image_update_param_ids() {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let p = m.bind_frozen();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let img = Var::constant(rand_tensor(&[128, 4, 4, 4], &mut r));
    let (zx, _) = m.interact(&p, &img, &Var::constant(rand_tensor(&[2, 128], &mut r)));
    assert_eq!(zx.data(), img.data());
}

#[test]
fn heads_and_selection() {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    let p = m.bind_frozen();
    let enc = m.encode_image(&p, &image(32, 8)).unwrap();
    let out = m.infer(&p, &enc, &state(32, vec![pos([16, 16, 16])], None)).unwrap();
    assert_eq!(out.maps.shape(), &[3, 32 * 32 * 32]);
    assert_eq!(out.scores.shape(), &[3, 1]);
    assert_eq!(out.selected, select_index(&out.score_values()));
    assert_eq!(out.selected_map.data(), out.candidate(out.selected).data());
    assert_eq!(select_index(&[0.2, 0.7, 0.7]), 1);
}

#[test]
fn corrective_contracts() {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    let p = m.bind_frozen();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let y = m.corrective_refine(&p, &Var::constant(rand_tensor(&[4, 32, 32, 32], &mut r))).unwrap();
    assert_eq!(y.shape(), &[1, 32, 32, 32]);
    assert!(m.corrective_refine(&p, &Var::constant(rand_tensor(&[3, 32, 32, 32], &mut r))).is_err());
    let (main, cor) = m.parameter_counts();
    assert!((cor as f64) / (main as f64) < 0.05, "{cor} / {main}");
}

#[test]
fn every_main_parameter_receives_gradient_through_two_iterations() {
    let m = Model::new(small_config(EncoderVariant::Hybrid), 0).unwrap();
    let p = m.bind();
    let enc = m.encode_image(&p, &image(16, 9)).unwrap();
    let s1 = state(16, vec![pos([8, 8, 8])], Some(BoxPrompt { min: [4, 4, 4], max: [12, 12, 12] }));
    let o1 = m.step(&p, &enc, &s1, None).unwrap();
    let s2 = s1.advance(vec![neg([2, 2, 2])], vec![], None, var_to_logits(&o1.selected_map, Shape3::cube(16))).unwrap();
    let o2 = m.step(&p, &enc, &s2, Some(&o1.selected_map)).unwrap();
    let loss = ops::add(&ops::sum(&ops::add(&o1.maps, &o2.maps)), &ops::sum(&ops::add(&o1.scores, &o2.scores)));
    let g = backward(&loss);
    for id in m.main_param_ids() {
        let name = m.params().name(id);
        // the padding and no-mask rows only get gradient when those paths are used
        if name.contains("no_mask") {
            continue;
        }
        assert!(g.param(id).is_some(), "{name} has no gradient");
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::new(small_config(EncoderVariant::Hybrid), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let img = image(16, 10);
    let st = state(16, vec![pos([8, 8, 8])], None);
    let run = |m: &Model| {
        let p = m.bind_frozen();
        let enc = m.encode_image(&p, &img).unwrap();
        m.infer(&p, &enc, &st).unwrap().refined.data().to_vec()
    };
    assert_eq!(run(&m), run(&back));
    assert!(Model::load_compatible(&path, &small_config(EncoderVariant::Cnn)).is_err());
}

#[test]
fn checkpoint_rejects_bad_version_and_unknown_tensors() {
    let m = Model::new(small_config(EncoderVariant::Cnn), 0).unwrap();
    let mut bytes = Vec::new();
    m.to_checkpoint(serde_json::Value::Null).write_to(&mut bytes).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let bumped = text.replacen("\"format_version\":1", "\"format_version\":99", 1);
    let err = Checkpoint::read_from(bumped.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut ck = m.to_checkpoint(serde_json::Value::Null);
    ck.tensors.push(("mystery".into(), Tensor::zeros(vec![2])));
    assert!(Model::from_checkpoint(&ck).is_err());
    let mut ck = m.to_checkpoint(serde_json::Value::Null);
    ck.tensors.push(("optim.m/x".into(), Tensor::zeros(vec![2])));
    assert!(Model::from_checkpoint(&ck).is_ok());
    let mut truncated = Vec::new();
    m.to_checkpoint(serde_json::Value::Null).write_to(&mut truncated).unwrap();
    truncated.truncate(truncated.len() - 3);
    assert!(Checkpoint::read_from(&truncated[..]).is_err());
}
