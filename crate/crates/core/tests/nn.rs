use qlab_core::nn::{
    sweep_layers, Attention, BlockConfig, CausalInput, CausalLm, Decoder, DecoderLayer, EncoderLayer, EncoderStack,
    FeedForward, Injection, LayerNorm, Linear, TokenEmbedding,
};
use qlab_core::tensor::{grad_check_store, GradCheckOptions, Graph, Init, Mask, Tensor, Var};
use qlab_core::{Error, ParamStore, Result, Rng};

fn cfg(layers: usize) -> BlockConfig {
    BlockConfig { model_dim: 8, num_heads: 2, ff_dim: 16, num_layers: layers, max_seq_len: 24, vocab_size: 13 }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::new(shape, Init::Normal { mean: 0.0, std: 1.0, rng }).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(x), &mut Rng::new(seed));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_grad_ok(name: &str, store: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) {
    let r = grad_check_store(store, f, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-4, "{name}: {} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn embedding_examples() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f64>::new();
    let emb = TokenEmbedding::new(&mut store, "emb", 13, 8, 24, &mut rng);
    let mut g = Graph::new();
    let e = emb.embed(&mut g, &store, &[]).unwrap();
    assert_eq!(g.shape(e), &[0, 8]);
    assert!(matches!(emb.embed(&mut g, &store, &[13]), Err(Error::Vocab(_))));
    assert!(matches!(emb.embed(&mut g, &store, &[1; 25]), Err(Error::Length(_))));
    let e = emb.embed(&mut g, &store, &[4, 4, 4]).unwrap();
    let v = g.value(e);
    assert_ne!(v.row(0), v.row(1));
    assert_ne!(v.row(1), v.row(2));
}

#[test]
fn single_position_attention_is_the_value_projection() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::<f64>::new();
    let att = Attention::new(&mut store, "a", 8, 6, 2, &mut rng);
    let mut g = Graph::new();
    let q = g.constant(randn(&[1, 8], &mut rng));
    let kv = g.constant(randn(&[1, 6], &mut rng));
    let out = att.forward(&mut g, &store, q, kv, None).unwrap();
    let v = att.value.forward(&mut g, &store, kv).unwrap();
    let want = att.out.forward(&mut g, &store, v).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn hand_set_two_by_two_attention() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::<f64>::new();
    let att = Attention::new(&mut store, "a", 2, 2, 1, &mut rng);
    let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    store.set(att.query.weight, eye.clone()).unwrap();
    store.set(att.key.weight, eye.clone()).unwrap();
    store.set(att.value.weight, Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    store.set(att.out.weight, eye.clone()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(eye);
    let out = att.forward(&mut g, &store, x, x, None).unwrap();

    let a = (0.5f64).sqrt();
    let p = a.exp() / (a.exp() + 1.0);
    let want = [p + 3.0 * (1.0 - p), 2.0 * p + 4.0 * (1.0 - p), (1.0 - p) + 3.0 * p, 2.0 * (1.0 - p) + 4.0 * p];
    for (got, want) in g.value(out).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn causal_mask_hides_future_positions() {
    let mut rng = Rng::new(4);
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "l", &cfg(1), &mut rng);
    let x = randn(&[6, 8], &mut rng);
    let mut y = x.clone();
    for c in 0..8 {
        y.data_mut()[4 * 8 + c] += 1.5;
    }
    let mask = Mask::causal(6);
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let o = layer.forward(&mut g, &store, v, Some(&mask)).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(x), run(y));
    for r in 0..4 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(4), b.row(4));
}

#[test]
fn stacks_capture_and_determinism() {
    let build = || {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f32>::new();
        let stack = EncoderStack::new(&mut store, "enc", &cfg(4), &mut rng);
        let x = Tensor::<f32>::new(&[5, 8], Init::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let (out, states) = stack.forward(&mut g, &store, xv, None, true).unwrap();
        let states = states.unwrap();
        assert_eq!(states.len(), 5);
        assert!(g.value(states[0]).bitwise_eq(&x));
        for s in &states {
            assert_eq!(g.shape(*s), &[5, 8]);
        }
        g.value(out).clone()
    };
    assert!(build().bitwise_eq(&build()));
}

#[test]
fn decoder_zero_memory_padding_and_causality() {
    let mut rng = Rng::new(6);
    let mut store = ParamStore::<f64>::new();
    let c = cfg(2);
    let emb = TokenEmbedding::new(&mut store, "emb", c.vocab_size, c.model_dim, c.max_seq_len, &mut rng);
    let dec = Decoder::new(&mut store, "dec", &c, &mut rng);
    for l in &dec.layers {
        // Zero memory rows then project to zero keys and values.
        assert!(store.get(l.cross_attn.key.bias).data().iter().all(|&v| v == 0.0));
        assert!(store.get(l.cross_attn.value.bias).data().iter().all(|&v| v == 0.0));
    }
    let logits = |mem_rows: usize, prefix: &[usize]| {
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(&[mem_rows, 8]));
        let o = dec.forward(&mut g, &store, &emb, prefix, m).unwrap();
        g.value(o).clone()
    };
    assert!(logits(3, &[1, 5, 7]).bitwise_eq(&logits(7, &[1, 5, 7])));

    let mut g = Graph::new();
    let m = g.constant(randn(&[4, 8], &mut rng));
    let a = dec.forward(&mut g, &store, &emb, &[1, 5, 7, 9], m).unwrap();
    let b = dec.forward(&mut g, &store, &emb, &[1, 5, 7, 2], m).unwrap();
    let (a, b) = (g.value(a).clone(), g.value(b).clone());
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(3), b.row(3));
    assert!(matches!(dec.forward(&mut g, &store, &emb, &[], m), Err(Error::Contract(_))));
}

#[test]
fn injection_at_zero_equals_embedding_concatenation() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::<f64>::new();
    let lm = CausalLm::new(&mut store, "lm", &cfg(3), &mut rng);
    let ids = [1, 4, 6, 8, 3];
    let prefix = randn(&[2, 8], &mut rng);
    for at in [0, 2, ids.len()] {
        let mut g = Graph::new();
        let p = g.constant(prefix.clone());
        let (injected, _) =
            lm.forward(&mut g, &store, CausalInput::Ids(&ids), Some(Injection { layer: 0, states: p, at })).unwrap();

        let text = lm.embedding.embed(&mut g, &store, &ids).unwrap();
        let pe = g.constant(qlab_core::nn::sinusoidal(qlab_core::nn::prefix_positions(2), 8));
        let pp = g.add(p, pe).unwrap();
        let head = g.slice_rows(text, 0, at).unwrap();
        let tail = g.slice_rows(text, at, ids.len() - at).unwrap();
        let cat = g.concat_rows(&[head, pp, tail]).unwrap();
        let (full, _) = lm.forward(&mut g, &store, CausalInput::States(cat), None).unwrap();
        let fh = g.slice_rows(full, 0, at).unwrap();
        let ft = g.slice_rows(full, at + 2, ids.len() - at).unwrap();
        let want = g.concat_rows(&[fh, ft]).unwrap();
        assert_eq!(g.value(injected).max_abs_diff(g.value(want)), 0.0, "at {at}");
    }

    let mut g = Graph::new();
    let (plain, states) = lm.forward(&mut g, &store, CausalInput::Ids(&ids), None).unwrap();
    let emb = lm.embedding.embed(&mut g, &store, &ids).unwrap();
    assert_eq!(states.len(), 4);
    assert!(g.value(states[0]).bitwise_eq(g.value(emb)));
    let (again, _) = lm.forward(&mut g, &store, CausalInput::States(emb), None).unwrap();
    assert!(g.value(plain).bitwise_eq(g.value(again)));

    let p = g.constant(prefix);
    let bad = lm.forward(&mut g, &store, CausalInput::Ids(&ids), Some(Injection { layer: 4, states: p, at: 0 }));
    assert!(matches!(bad, Err(Error::Contract(_))));
}

#[test]
fn every_block_passes_grad_check() {
    let mut rng = Rng::new(8);
    let c = cfg(2);
    let x = randn(&[4, 8], &mut rng);
    let mem = randn(&[3, 8], &mut rng);

    let mut s = ParamStore::<f64>::new();
    let lin = Linear::new(&mut s, "lin", 8, 5, &mut rng);
    assert_grad_ok("linear", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, st, xv)?;
        weighted_sum(g, y, 1)
    });

    let mut s = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut s, "ln", 8);
    s.set(ln.gain, randn(&[8], &mut rng)).unwrap();
    assert_grad_ok("layer norm", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = ln.forward(g, st, xv)?;
        weighted_sum(g, y, 2)
    });

    let mut s = ParamStore::<f64>::new();
    let ff = FeedForward::new(&mut s, "ff", 8, 16, &mut rng);
    assert_grad_ok("feed-forward", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = ff.forward(g, st, xv)?;
        weighted_sum(g, y, 3)
    });

    let mut s = ParamStore::<f64>::new();
    let att = Attention::new(&mut s, "att", 8, 8, 2, &mut rng);
    assert_grad_ok("cross attention", &s, |g, st| {
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let y = att.forward(g, st, xv, mv, None)?;
        weighted_sum(g, y, 4)
    });

    let mut s = ParamStore::<f64>::new();
    let emb = TokenEmbedding::new(&mut s, "emb", 13, 8, 24, &mut rng);
    assert_grad_ok("embedding", &s, |g, st| {
        let y = emb.embed(g, st, &[3, 1, 3, 9])?;
        weighted_sum(g, y, 5)
    });

    let mut s = ParamStore::<f64>::new();
    let enc = EncoderLayer::new(&mut s, "enc", &c, &mut rng);
    assert_grad_ok("encoder layer", &s, |g, st| {
        let xv = g.constant(x.clone());
        let m = Mask::causal(4);
        let y = enc.forward(g, st, xv, Some(&m))?;
        weighted_sum(g, y, 6)
    });

    let mut s = ParamStore::<f64>::new();
    let dl = DecoderLayer::new(&mut s, "dl", &c, &mut rng);
    assert_grad_ok("decoder layer", &s, |g, st| {
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let y = dl.forward(g, st, xv, mv, &Mask::causal(4))?;
        weighted_sum(g, y, 7)
    });

    let mut s = ParamStore::<f64>::new();
    let emb = TokenEmbedding::new(&mut s, "emb", c.vocab_size, 8, 24, &mut rng);
    let dec = Decoder::new(&mut s, "dec", &c, &mut rng);
    assert_grad_ok("decoder stack", &s, |g, st| {
        let mv = g.constant(mem.clone());
        let logits = dec.forward(g, st, &emb, &[1, 4, 7], mv)?;
        g.cross_entropy(logits, &[4, 7, 2])
    });

    let mut s = ParamStore::<f64>::new();
    let lm = CausalLm::new(&mut s, "lm", &c, &mut rng);
    let prefix = randn(&[2, 8], &mut rng);
    assert_grad_ok("causal lm with injection", &s, |g, st| {
        let p = g.constant(prefix.clone());
        let (logits, _) =
            lm.forward(g, st, CausalInput::Ids(&[1, 5, 6]), Some(Injection { layer: 1, states: p, at: 1 }))?;
        g.cross_entropy(logits, &[5, 6, 2])
    });
}

#[test]
fn sweep_indices_for_toy_depth() {
    assert_eq!(sweep_layers(6), vec![0, 2, 4, 6]);
}
