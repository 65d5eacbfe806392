mod common;

use common::{ids, small_frozen};
use qlab_core::data::{render, Color, Object, Scene, Shape};
use qlab_core::frozen::{build_frozen_bundle, build_or_load, FrozenBundle, LmKind, Recipe, VisionConfig};
use qlab_core::nn::{sweep_layers, BlockConfig};
use qlab_core::tensor::{Graph, Tensor};
use qlab_core::Error;

fn scene_image() -> Tensor<f32> {
    let s = Scene::new(0, 0, vec![Object { shape: Shape::Circle, color: Color::Red, row: 1, col: 2 }]).unwrap();
    render(&s)
}

#[test]
fn build_is_deterministic_and_seed_sensitive() {
    let cfg = small_frozen(LmKind::EncoderDecoder);
    let a = build_frozen_bundle(3, &cfg, &Recipe::tiny()).unwrap();
    let b = build_frozen_bundle(3, &cfg, &Recipe::tiny()).unwrap();
    let c = build_frozen_bundle(4, &cfg, &Recipe::tiny()).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(a.report, b.report);
    assert_ne!(a.fingerprint, c.fingerprint);
    assert!(a.store.is_frozen() && a.store.all_finite());
    a.verify().unwrap();
}

#[test]
fn divergent_recipe_is_a_training_error() {
    let cfg = small_frozen(LmKind::EncoderDecoder);
    let recipe = Recipe { lr: 1e3, lm_steps: 40, vision_steps: 40, ..Recipe::tiny() };
    assert!(matches!(build_frozen_bundle(1, &cfg, &recipe), Err(Error::Training(_))));
}

#[test]
fn vision_encode_rows_and_shape_checks() {
    let mut cfg = small_frozen(LmKind::EncoderDecoder);
    cfg.vision = VisionConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        block: BlockConfig { model_dim: 16, num_heads: 2, ff_dim: 32, num_layers: 2, max_seq_len: 24, vocab_size: 1 },
    };
    let b = FrozenBundle::init(0, &cfg).unwrap();
    let img = Tensor::<f32>::zeros(&[3, 16, 16]);
    let (f, states) = b.vision_encode(&img).unwrap();
    assert_eq!(f.shape(), &[17, 16]);
    assert_eq!(states.len(), 3);
    let (f2, _) = b.vision_encode(&img).unwrap();
    assert!(f.bitwise_eq(&f2));
    assert!(matches!(b.vision_encode(&Tensor::zeros(&[3, 32, 32])), Err(Error::Shape(_))));
}

#[test]
fn lm_encode_contracts() {
    let b = FrozenBundle::init(1, &small_frozen(LmKind::EncoderDecoder)).unwrap();
    let p = ids("describe the image");
    let (e1, states) = b.lm_encode(&p).unwrap();
    let (e2, _) = b.lm_encode(&p).unwrap();
    assert!(e1.bitwise_eq(&e2));
    assert_eq!(states.len(), 3);

    // An empty prefix concatenated in front changes nothing.
    let mut g = Graph::no_grad();
    let empty = b.embed_text(&mut g, &[], 0).unwrap();
    let text = b.embed_text(&mut g, &p, 0).unwrap();
    let x = g.concat_rows(&[empty, text]).unwrap();
    let (out, _) = b.encode_rows(&mut g, x, false).unwrap();
    assert!(g.value(out).bitwise_eq(&e1));

    let d = FrozenBundle::init(1, &small_frozen(LmKind::DecoderOnly)).unwrap();
    assert!(matches!(d.lm_encode(&p), Err(Error::Kind(_))));
}

#[test]
fn lm_decode_never_produces_frozen_gradients() {
    let b = FrozenBundle::init(2, &small_frozen(LmKind::EncoderDecoder)).unwrap();
    let (mem, _) = b.lm_encode(&ids("write a short caption")).unwrap();
    let logits = b.lm_decode(&mem, &[1, 40, 41]).unwrap();
    assert!(logits.is_finite());
    assert_eq!(logits.shape(), &[3, b.config.lm.vocab_size]);

    let mut g = Graph::new();
    let m = g.leaf(mem.clone().with_requires_grad(true));
    let l = b.decode_rows(&mut g, m, &[1, 40, 41]).unwrap();
    let loss = g.cross_entropy(l, &[40, 41, 2]).unwrap();
    g.backward(loss).unwrap();
    assert!(g.param_grads(&b.store).iter().all(|x| x.is_none()));
    assert!(g.grad(m).is_some());
    b.verify().unwrap();
    assert_eq!(b.current_fingerprint(), b.fingerprint);
}

#[test]
fn layer_states_for_both_kinds() {
    let p = ids("what color is the circle ?");
    for kind in [LmKind::EncoderDecoder, LmKind::DecoderOnly] {
        let b = FrozenBundle::init(3, &small_frozen(kind)).unwrap();
        let st = b.lm_layer_states(&p).unwrap();
        assert_eq!(st.len(), b.lm.depth() + 1);
        let mut g = Graph::no_grad();
        let e = b.embed_text(&mut g, &p, 0).unwrap();
        assert!(st.layer(0).unwrap().bitwise_eq(g.value(e)));
        assert!(matches!(st.layer(b.lm.depth() + 1), Err(Error::Range(_))));
    }
    assert_eq!(sweep_layers(6), vec![0, 2, 4, 6]);
}

#[test]
fn save_load_and_cache_preserve_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_frozen(LmKind::EncoderDecoder);
    let built = build_or_load(5, &cfg, &Recipe::tiny(), dir.path()).unwrap();
    let cached = build_or_load(5, &cfg, &Recipe::tiny(), dir.path()).unwrap();
    assert_eq!(built.fingerprint, cached.fingerprint);
    assert_eq!(built.report, cached.report);

    let img = scene_image();
    let (a, _) = built.vision_encode(&img).unwrap();
    let (b, _) = cached.vision_encode(&img).unwrap();
    assert!(a.bitwise_eq(&b));

    let p = dir.path().join("saved");
    built.save(&p).unwrap();
    let manifest = p.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let tampered = text.replace(&format!("{:016x}", built.fingerprint), "0000000000000001");
    std::fs::write(&manifest, tampered).unwrap();
    assert!(matches!(FrozenBundle::load(&p), Err(Error::Audit(_))));
}
