use super::*;
use crate::corpus::synth_speaker_corpus;
use crate::frontend::FrontendConfig;
use crate::nn::Gates;

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        widths: [2, 2, 2, 2, 2],
        blocks: [1, 1, 1, 1],
        se_reduction: 2,
        asp_hidden: 4,
        emb_dim: 6,
        n_speakers: 3,
        width_scale: 1.0,
        n_mels: 16,
    }
}

fn small(mode: Mode) -> ModelConfig {
    ModelConfig { widths: [4, 4, 8, 8, 8], blocks: [1, 1, 1, 1], asp_hidden: 8, emb_dim: 16, ..ModelConfig::new(mode, 5) }
}

fn ramp(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1009) as f64 / 504.5 - 1.0).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

#[test]
fn reference_widths_give_table_shapes() {
    let cfg = ModelConfig { widths: [16, 16, 32, 64, 128], ..ModelConfig::new(Mode::Unet, 4) };
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let x = ramp([2, 1, 64, 80], 0).cast::<f32>();
    let mut ctx = Ctx::train();
    let (feats, _) = model.arch.encoder.forward(&model.params, &mut ctx, &x).unwrap();
    assert_eq!(feats[0].shape, [2, 16, 32, 80]);
    assert_eq!(feats[1].shape, [2, 16, 32, 80]);
    assert_eq!(feats[2].shape, [2, 32, 16, 40]);
    assert_eq!(feats[3].shape, [2, 64, 8, 20]);
    assert_eq!(feats[4].shape, [2, 128, 8, 20]);
    let out = model.forward(&mut Ctx::train(), &x).unwrap();
    assert_eq!(out.enhanced.unwrap().shape, [2, 1, 64, 80]);
    assert_eq!(out.embeddings.len(), 2 * 256);
    assert_eq!(out.logits.len(), 2 * 4);
}

#[test]
fn reconstruction_shape_round_trips() {
    for mode in [Mode::Unet, Mode::Exunet] {
        let model = Model::<f64>::new(small(mode), 2).unwrap();
        for t in [1, 3, 4, 40, 57, 200] {
            let x = ramp([2, 1, 64, 200], t as u64).crop_frames(t);
            let out = model.forward(&mut Ctx::train(), &x).unwrap();
            assert_eq!(out.enhanced.unwrap().shape, x.shape, "mode {mode}, T={t}");
        }
    }
}

#[test]
fn baseline_has_no_reconstruction() {
    let model = Model::<f64>::new(small(Mode::Baseline), 2).unwrap();
    let out = model.forward(&mut Ctx::train(), &ramp([4, 1, 64, 16], 1)).unwrap();
    assert!(out.enhanced.is_none());
    assert_eq!(out.embeddings.len(), 4 * 16);
    assert_eq!(out.logits.len(), 4 * 5);
}

#[test]
fn zero_input_gives_zero_latent_in_eval() {
    let model = Model::<f64>::new(small(Mode::Baseline), 3).unwrap();
    let x = Tensor4::zeros([2, 1, 64, 16]);
    let (feats, _) = model.arch.encoder.forward(&model.params, &mut Ctx::eval(), &x).unwrap();
    assert!(feats[4].data.iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_frames_doubles_last_skip() {
    let model = Model::<f64>::new(small(Mode::Baseline), 3).unwrap();
    let f = |t| model.arch.encoder.forward(&model.params, &mut Ctx::train(), &ramp([1, 1, 64, t], 0)).unwrap().0[4].w();
    assert_eq!(2 * f(20), f(40));
}

#[test]
fn input_validation() {
    let model = Model::<f64>::new(small(Mode::Baseline), 3).unwrap();
    assert!(matches!(model.forward(&mut Ctx::train(), &Tensor4::zeros([1, 1, 32, 8])), Err(Error::Shape(_))));
    assert!(matches!(model.forward(&mut Ctx::train(), &Tensor4::zeros([1, 2, 64, 8])), Err(Error::Shape(_))));
    let mut bad = Tensor4::zeros([1, 1, 64, 8]);
    bad.data[3] = f64::NAN;
    assert!(matches!(model.forward(&mut Ctx::train(), &bad), Err(Error::Numerical(_))));
    let cfg = ModelConfig { n_mels: 60, ..small(Mode::Baseline) };
    assert!(matches!(Model::<f64>::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn initialization_is_seeded() {
    let a = Model::<f32>::new(small(Mode::Exunet), 11).unwrap();
    let b = Model::<f32>::new(small(Mode::Exunet), 11).unwrap();
    let c = Model::<f32>::new(small(Mode::Exunet), 12).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn counts_grow_with_each_system() {
    let counts: Vec<usize> = Mode::ALL.iter().map(|&m| count_params(&small(m)).unwrap()).collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn embedding_head_is_affine() {
    let model = Model::<f64>::new(small(Mode::Baseline), 4).unwrap();
    let fc = &model.arch.head.fc;
    let a: Vec<f64> = (0..fc.din).map(|i| (i as f64 * 0.3).sin()).collect();
    let b: Vec<f64> = (0..fc.din).map(|i| (i as f64 * 0.7).cos()).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let h = |v: &[f64]| fc.forward(&model.params, v).unwrap();
    let (ha, hb, hab, h0) = (h(&a), h(&b), h(&ab), h(&vec![0.0; fc.din]));
    assert_eq!(ha.len(), 16);
    for i in 0..16 {
        assert!((hab[i] - (ha[i] + hb[i] - h0[i])).abs() < 1e-12);
    }
    assert!(h0.iter().all(|&v| v == 0.0));
}

#[test]
fn extractor_path_differs_from_encoder_path() {
    let model = Model::<f64>::new(small(Mode::Exunet), 5).unwrap();
    let x = ramp([2, 1, 64, 12], 9);
    let full = model.forward(&mut Ctx::probe(), &x).unwrap().embeddings;
    let enc = model.encoder_embeddings(&mut Ctx::probe(), &x).unwrap();
    let diff: f64 = full.iter().zip(&enc).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn extractor_tolerates_zeroed_decoder_outputs() {
    let model = Model::<f64>::new(small(Mode::Exunet), 5).unwrap();
    let ext = model.arch.extractor.as_ref().unwrap();
    let o = ramp([2, 1, 64, 8], 2);
    let w = model.cfg.effective_widths();
    let inters = [
        Tensor4::zeros([2, w[3], 8, 2]),
        Tensor4::zeros([2, w[2], 16, 4]),
        Tensor4::zeros([2, w[1], 32, 8]),
        Tensor4::zeros([2, w[0], 32, 8]),
    ];
    let (lat, _) = ext.forward(&model.params, &mut Ctx::train(), &o, &inters).unwrap();
    assert_eq!(lat.shape, [2, w[4], 8, 2]);
    assert!(lat.is_finite());
}

#[test]
fn unet_embeds_without_decoder() {
    let full = Model::<f32>::new(small(Mode::Unet), 6).unwrap();
    let mut stripped = ParamStore::new();
    for p in full.params.iter().filter(|p| !p.name.starts_with("dec.")) {
        stripped.add(p.name.clone(), p.shape.clone(), p.value.clone(), p.kind);
    }
    let enc_only = Model::from_params(full.cfg.clone(), &stripped).unwrap();
    assert!(!enc_only.has_decoder());
    let x = ramp([1, 1, 64, 20], 4).cast::<f32>();
    assert_eq!(enc_only.embed(&x).unwrap(), full.embed(&x).unwrap());
    let missing = Model::<f32>::from_params(small(Mode::Exunet), &stripped);
    assert!(matches!(missing, Err(Error::MissingParam(_))));
}

#[test]
fn waveform_embeddings_are_deterministic() {
    let corpus = synth_speaker_corpus(2, 2, 0.5, 3).unwrap();
    let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
    for mode in Mode::ALL {
        let model = Model::<f32>::new(small(mode), 7).unwrap();
        let a = model.extract_embedding(&corpus.utterances[0], &fe).unwrap();
        let b = model.extract_embedding(&corpus.utterances[0], &fe).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }
    let model = Model::<f32>::new(ModelConfig::new(Mode::Exunet, 2), 7).unwrap();
    assert_eq!(model.extract_embedding(&corpus.utterances[1], &fe).unwrap().len(), 256);
}

/// Central differences of `loss` with respect to `count` entries of parameter `name`.
fn fd_check(model: &Model<f64>, name: &str, loss: impl Fn(&Model<f64>) -> f64, analytic: &Grads<f64>, count: usize) -> f64 {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let len = model.params.get(id).len();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for k in 0..count.min(len) {
        let idx = (k * 7919) % len;
        let mut m = model.clone();
        m.params.get_mut(id)[idx] += h;
        let up = loss(&m);
        m.params.get_mut(id)[idx] -= 2.0 * h;
        let down = loss(&m);
        let num = (up - down) / (2.0 * h);
        let ana = analytic.get(id)[idx];
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
    }
    worst
}

/// Forward pass that records the activation pattern for later replay.
fn recorded(model: &Model<f64>, x: &Tensor4<f64>) -> (ForwardOutputs<f64>, Gates) {
    let mut ctx = Ctx::probe().recording_gates();
    let out = model.forward(&mut ctx, x).unwrap();
    (out, ctx.take_gates().unwrap())
}

fn replayed(model: &Model<f64>, x: &Tensor4<f64>, gates: &Gates) -> ForwardOutputs<f64> {
    model.forward(&mut Ctx::probe().replaying_gates(gates.clone()), x).unwrap()
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(tiny(Mode::Unet), 8).unwrap();
    let x = ramp([2, 1, 16, 8], 3);
    let (out, gates) = recorded(&model, &x);
    let sq_norm = |m: &Model<f64>| replayed(m, &x, &gates).enhanced.unwrap().data.iter().map(|v| v * v).sum::<f64>();
    let d_o = out.enhanced.as_ref().unwrap().data.iter().map(|v| 2.0 * v).collect();
    let grads = model
        .backward(&out, &OutputGrads { enhanced: Some(Tensor4::from_vec(x.shape, d_o).unwrap()), ..Default::default() })
        .unwrap();
    for name in ["dec.db1.fuse.conv.weight", "dec.db2.up.tconv.weight", "dec.db3.stack.0.conv1.conv.weight", "dec.out.weight", "dec.out.bias", "enc.stem.conv.weight"] {
        let err = fd_check(&model, name, sq_norm, &grads, 12);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn extractor_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(tiny(Mode::Exunet), 9).unwrap();
    let x = ramp([3, 1, 16, 8], 5);
    let (out, gates) = recorded(&model, &x);
    let probe: Vec<f64> = (0..out.embeddings.len()).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let loss = |m: &Model<f64>| {
        let e = replayed(m, &x, &gates).embeddings;
        e.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
    };
    let grads = model.backward(&out, &OutputGrads { embeddings: Some(probe.clone()), ..Default::default() }).unwrap();
    for name in [
        "ext.fuse1.conv.weight",
        "ext.fuse4.bn.gamma",
        "ext.eb2.0.se.fc1.weight",
        "ext.eb3.0.shortcut.conv.weight",
        "dec.db2.fuse.conv.weight",
        "dec.out.weight",
        "enc.eb4.0.conv2.conv.weight",
        "head.asp.attn.weight",
        "head.asp.attn.score",
        "head.fc.bias",
    ] {
        let err = fd_check(&model, name, loss, &grads, 12);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(tiny(Mode::Baseline), 10).unwrap();
    let x = ramp([4, 1, 16, 6], 1);
    let (out, gates) = recorded(&model, &x);
    let probe: Vec<f64> = (0..out.logits.len()).map(|i| (i as f64 * 0.9).sin()).collect();
    let loss = |m: &Model<f64>| {
        let l = replayed(m, &x, &gates).logits;
        l.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
    };
    let grads = model.backward(&out, &OutputGrads { logits: Some(probe.clone()), ..Default::default() }).unwrap();
    for name in ["cls.weight", "cls.bias", "head.asp.attn.bias", "enc.eb1.0.conv1.conv.weight", "enc.stem.bn.beta"] {
        let err = fd_check(&model, name, loss, &grads, 12);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}
