use std::collections::BTreeSet;

use bicap_core::data::*;
use bicap_core::evalmetrics::{lexicon_label, LabelLexicon};
use bicap_core::numerics::SeedTree;
use bicap_core::textpipe::*;
use proptest::prelude::*;

fn corpus(n: usize, seed: u64) -> SynthCorpus {
    synth_generate(&SynthConfig { n, seed, side: 32, ..SynthConfig::default() }).unwrap()
}

#[test]
fn report_labels_agree_with_the_lexicon() {
    let c = corpus(300, 1);
    let lexicon = LabelLexicon::for_classes(&c.classes).unwrap();
    for r in &c.manifest.records {
        let mut found = lexicon_label(&r.report().text(), &lexicon);
        let mut truth = r.labels.clone();
        found.sort();
        truth.sort();
        assert_eq!(found, truth, "{}", r.report().text());
    }
}

#[test]
fn prior_sentences_appear_at_the_configured_rate() {
    let n = 2000;
    let c = synth_generate(&SynthConfig { n, side: 16, ..SynthConfig::default() }).unwrap();
    let hits = c.manifest.records.iter().filter(|r| detect_prior_reference(&r.report().text())).count();
    let sigma = (0.4 * 0.6 / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - 0.4).abs() <= 3.0 * sigma, "{hits}");
    assert_eq!(c.stats().prior_reference_reports, hits);
}

#[test]
fn prior_removal_leaves_nothing_for_the_detector() {
    let c = corpus(200, 2);
    for r in &c.manifest.records {
        let cleaned = remove_prior_references(&r.report());
        assert!(!detect_prior_reference(&cleaned.text()));
        assert!(!cleaned.is_empty());
    }
}

#[test]
fn splits_are_patient_disjoint_and_deterministic() {
    let c = corpus(300, 3);
    let m = split_dataset(&c.manifest, [0.7, 0.15, 0.15], 5).unwrap();
    assert_eq!(m, split_dataset(&c.manifest, [0.7, 0.15, 0.15], 5).unwrap());
    let sets: Vec<BTreeSet<String>> = Split::ALL.iter().map(|s| m.split(*s).patients().into_iter().map(String::from).collect()).collect();
    for a in 0..3 {
        for b in a + 1..3 {
            assert!(sets[a].is_disjoint(&sets[b]));
        }
    }
    assert!(m.records.iter().all(|r| r.split.is_some()));
}

#[test]
fn written_corpora_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    corpus(20, 9).write(a.path()).unwrap();
    corpus(20, 9).write(b.path()).unwrap();
    for name in ["manifest.jsonl", "vocab.txt", "stats.json", "images/000000.pgm"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let m = DatasetManifest::read(&a.path().join("manifest.jsonl")).unwrap();
    let loaded = load_examples(a.path(), &m).unwrap();
    assert_eq!(loaded.len(), 20);
}

#[test]
fn normalized_training_images_have_unit_moments() {
    let c = corpus(50, 4);
    let s = c.stats();
    let mut values = Vec::new();
    for img in &c.images {
        values.extend(normalize_image(img, s.pixel_mean, s.pixel_std).unwrap().pixels().iter().map(|&v| v as f64));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    assert!(mean.abs() < 1e-3 && (var.sqrt() - 1.0).abs() < 1e-3, "{mean} {var}");
}

#[test]
fn augmentation_is_seeded_and_bounded() {
    let c = corpus(4, 6);
    let policy = AugmentPolicy::training(24, 0.2, 0.1);
    let root = SeedTree::new(1);
    let a = augment_image(&c.images[0], &policy, &mut root.rng()).unwrap();
    assert_eq!(a, augment_image(&c.images[0], &policy, &mut root.rng()).unwrap());
    assert_ne!(a, augment_image(&c.images[0], &policy, &mut root.child(1).rng()).unwrap());
    assert_eq!((a.width(), a.height()), (24, 24));
    assert!(a.pixels().iter().all(|v| v.is_finite() && v.abs() <= CLAMP));
    let small = Image::filled(10, 10, 0.5);
    assert!(matches!(augment_image(&small, &policy, &mut root.rng()), Err(DataError::ImageTooSmall { .. })));
}

fn word_vocab() -> Vocabulary {
    let words = ["no", "edema", "small", "left", "effusion", "ed", "##ema", "##s"];
    Vocabulary::from_tokens([PAD, SOS, SEP, UNK, STOP].into_iter().chain(words)).unwrap()
}

proptest! {
    #[test]
    fn tokenize_round_trips_known_words(idx in prop::collection::vec(0usize..5, 1..12), stops in prop::collection::vec(any::<bool>(), 12)) {
        let v = word_vocab();
        let pool = ["no", "edema", "small", "left", "effusion"];
        let mut text = String::new();
        for (i, w) in idx.iter().enumerate() {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(pool[*w]);
            if stops[i] {
                text.push('.');
            }
        }
        let ids = tokenize(&text, &v);
        prop_assert!(!ids.contains(&v.unk()));
        prop_assert_eq!(detokenize(&ids, &v).unwrap(), text);
    }

    #[test]
    fn framing_wraps_tokens_and_respects_context(n_words in 1usize..30, context in 3usize..40) {
        let v = word_vocab();
        let text = vec!["small"; n_words].join(" ");
        let seq = prepare_training_sequence(&Report::new(text, ""), &v, context).unwrap();
        prop_assert_eq!(seq.ids.len(), context);
        let valid = seq.valid();
        prop_assert_eq!(valid[0], v.sos());
        prop_assert_eq!(*valid.last().unwrap(), v.sep());
        prop_assert_eq!(valid.len(), (n_words + 2).min(context));
        prop_assert!(seq.ids[seq.valid_len..].iter().all(|&t| t == v.pad()));
    }

    #[test]
    fn split_fractions_cover_every_record(a in 0.1f64..0.8, seed in any::<u64>()) {
        let b = (1.0 - a) / 2.0;
        let c = corpus(60, 7);
        let m = split_dataset(&c.manifest, [a, b, 1.0 - a - b], seed).unwrap();
        let total: usize = Split::ALL.iter().map(|s| m.split(*s).len()).sum();
        prop_assert_eq!(total, 60);
    }
}
