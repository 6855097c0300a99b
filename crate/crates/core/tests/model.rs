mod common;

use bicap_core::model::{Bound, Direction, Mode, ModelConfig, ModelParams};
use bicap_core::numerics::{Graph, LookaheadConfig, OptimizerState, SeedTree};
use bicap_core::textpipe::{prepare_training_sequence, Report, Vocabulary, PAD, SOS, SEP, STOP, UNK};
use common::directional_check;
use rand::Rng;

fn vocab() -> Vocabulary {
    let mut t: Vec<String> = [PAD, SOS, SEP, UNK, STOP].iter().map(|s| s.to_string()).collect();
    t.extend(
        ["no", "edema", "mild", "effusion", "small", "there", "is", "clear", "lungs", "are", "heart", "normal", "size", "left", "right"]
            .iter()
            .map(|s| s.to_string()),
    );
    Vocabulary::from_tokens(t).unwrap()
}

fn tiny(v: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        context_len: 12,
        embed_dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        dropout: 0.1,
        encoder_channels: vec![2, 4],
        image_side: 16,
        grid_side: 4,
    }
}

fn image(seed: u64, side: usize) -> Vec<f64> {
    let mut rng = SeedTree::new(seed).rng();
    (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn sequence(v: &Vocabulary) -> bicap_core::textpipe::TokenSequence {
    prepare_training_sequence(&Report::new("No edema. Small left effusion.", "Heart is normal."), v, 12).unwrap()
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 11).unwrap();
    let img = image(5, 16);
    let seq = sequence(&v);
    for forward_only in [false, true] {
        let worst = directional_check(
            params.tensors(),
            |g, ids| {
                let b = Bound::from_nodes(ids.to_vec());
                let vis = params.encode_graph(g, &b, &img).unwrap();
                params.bicaption_loss_graph(g, &b, vis, &seq, &v, forward_only, &mut Mode::Eval).unwrap()
            },
            50,
            3,
        );
        assert!(worst <= 1e-4, "forward_only={forward_only}: {worst:e}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 12).unwrap();
    let (_, grads) = params.loss_and_grads(&image(6, 16), &sequence(&v), &v, false).unwrap();
    for (name, g) in params.names().iter().zip(&grads) {
        assert!(g.iter().any(|x| *x != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn forward_only_leaves_backward_decoder_untouched() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 12).unwrap();
    let (_, grads) = params.loss_and_grads(&image(6, 16), &sequence(&v), &v, true).unwrap();
    for (name, g) in params.names().iter().zip(&grads) {
        if name.starts_with("decoder.backward.") {
            assert!(g.iter().all(|x| *x == 0.0), "{name}");
        }
    }
}

#[test]
fn forward_decoder_is_causal() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 13).unwrap();
    let vis = params.encode_image(&image(7, 16)).unwrap();
    let base = sequence(&v);
    let c = 12;
    let vs = v.len();
    let logits = params.decoder_forward(&vis, &base, Direction::Forward).unwrap();
    for j in 1..base.valid_len {
        let mut changed = base.clone();
        changed.ids[j] = (changed.ids[j] + 3) % vs;
        let other = params.decoder_forward(&vis, &changed, Direction::Forward).unwrap();
        assert_eq!(&logits.data()[..j * vs], &other.data()[..j * vs], "positions before {j}");
        assert_ne!(&logits.data()[j * vs..(j + 1) * vs], &other.data()[j * vs..(j + 1) * vs]);
    }
    assert_eq!(logits.shape(), &[c, vs]);
}

#[test]
fn backward_decoder_only_sees_the_future() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 14).unwrap();
    let vis = params.encode_image(&image(8, 16)).unwrap();
    let base = sequence(&v);
    let n = base.valid_len;
    let vs = v.len();
    let logits = params.decoder_forward(&vis, &base, Direction::Backward).unwrap();
    for j in 0..n - 1 {
        let mut changed = base.clone();
        changed.ids[j] = (changed.ids[j] + 3) % vs;
        let other = params.decoder_forward(&vis, &changed, Direction::Backward).unwrap();
        assert_eq!(&logits.data()[(j + 1) * vs..n * vs], &other.data()[(j + 1) * vs..n * vs], "positions after {j}");
    }
}

#[test]
fn padding_never_changes_the_loss() {
    let v = vocab();
    let params = ModelParams::<f64>::init(&tiny(v.len()), 15).unwrap();
    let img = image(9, 16);
    let seq = sequence(&v);
    let mut noisy = seq.clone();
    for id in &mut noisy.ids[seq.valid_len..] {
        *id = 7;
    }
    assert_eq!(
        params.bicaption_loss(&img, &seq, &v, false).unwrap(),
        params.bicaption_loss(&img, &noisy, &v, false).unwrap()
    );
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_is_seeded() {
    let v = vocab();
    let params = ModelParams::<f32>::init(&tiny(v.len()), 16).unwrap();
    let img: Vec<f32> = image(1, 16).into_iter().map(|x| x as f32).collect();
    let seq = sequence(&v);
    let run = |seed: Option<u64>| {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let vis = params.encode_graph(&mut g, &b, &img).unwrap();
        let mut rng = SeedTree::new(seed.unwrap_or(0)).rng();
        let mut mode = match seed {
            Some(_) => Mode::Train(&mut rng),
            None => Mode::Eval,
        };
        let loss = params.bicaption_loss_graph(&mut g, &b, vis, &seq, &v, false, &mut mode).unwrap();
        g.value(loss)[0]
    };
    assert_eq!(run(None).to_bits(), run(None).to_bits());
    assert_eq!(run(Some(3)).to_bits(), run(Some(3)).to_bits());
    assert_ne!(run(Some(3)), run(Some(4)));
    assert_ne!(run(Some(3)), run(None));
}

#[test]
fn decoders_do_not_share_weights() {
    let v = vocab();
    let mut params = ModelParams::<f64>::init(&tiny(v.len()), 17).unwrap();
    let names = params.names().to_vec();
    for name in names.iter().filter(|n| n.starts_with("decoder.forward.")) {
        let src = params.get(name).unwrap().data().to_vec();
        let twin = name.replacen("forward", "backward", 1);
        params.get_mut(&twin).unwrap().data_mut().copy_from_slice(&src);
    }
    assert_eq!(params.decoder_distance(), 0.0);
    let (_, grads) = params.loss_and_grads(&image(2, 16), &sequence(&v), &v, false).unwrap();
    let mut opt = OptimizerState::new(params.tensors(), LookaheadConfig::default()).unwrap();
    let lrs = vec![0.01; grads.len()];
    opt.step(params.tensors_mut(), &grads, &lrs).unwrap();
    assert!(params.decoder_distance() > 0.0);
}

#[test]
fn fingerprint_tracks_groups() {
    let v = vocab();
    let mut params = ModelParams::<f32>::init(&tiny(v.len()), 18).unwrap();
    let enc = params.fingerprint(Some(bicap_core::model::ParamGroup::Encoder));
    let all = params.fingerprint(None);
    params.embedding_mut().data_mut()[0] += 1.0;
    assert_eq!(enc, params.fingerprint(Some(bicap_core::model::ParamGroup::Encoder)));
    assert_ne!(all, params.fingerprint(None));
}

#[test]
fn uniform_logits_give_log_vocabulary_loss() {
    let v = vocab();
    let mut params = ModelParams::<f64>::init(&tiny(v.len()), 2).unwrap();
    params.embedding_mut().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let img = image(1, 16);
    let seq = sequence(&v);
    let ln_v = (v.len() as f64).ln();
    let both = params.bicaption_loss(&img, &seq, &v, false).unwrap();
    let forward = params.bicaption_loss(&img, &seq, &v, true).unwrap();
    assert!((both - 2.0 * ln_v).abs() <= 1e-4, "{both}");
    assert!((forward - ln_v).abs() <= 1e-4, "{forward}");
}
