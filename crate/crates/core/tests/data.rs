mod common;

use std::collections::BTreeMap;

use cmaclip::data::{
    batches, dataset_digest, load_manifest, split, synth_generate, write_embedding_file, write_manifest, Dataset,
    ExamplePair, ImageSource, SynthConfig, SynthTask, TextSource,
};
use cmaclip::encoders::{EmbeddingSequence, Modality, RawImage};
use cmaclip::pnm::encode_ppm;
use cmaclip::{Error, Tensor};

fn task(name: &str, n_classes: usize, rho: f64) -> SynthTask {
    SynthTask {
        name: name.into(),
        n_classes,
        text_relevance: rho,
    }
}

fn raw(p: &ExamplePair) -> (&RawImage, &str) {
    match (&p.image, &p.text) {
        (ImageSource::Raw(i), TextSource::Raw(t)) => (i, t),
        _ => panic!("synthetic pairs are raw"),
    }
}

#[test]
fn clean_signals_are_recoverable_by_both_oracles() {
    let cfg = SynthConfig::new(200, vec![task("a", 5, 1.0), task("b", 7, 1.0), task("c", 3, 1.0)], 0.0, 11);
    let pairs = synth_generate(&cfg).unwrap();
    for p in &pairs {
        let (img, text) = raw(p);
        for (k, t) in cfg.tasks.iter().enumerate() {
            let c = p.labels[&t.name];
            assert_eq!(common::keyword_lookup(text, k, t.n_classes), Some(c), "{}", p.id);
            assert_eq!(common::region_classify(img, cfg.region(k), t.n_classes), c, "{}", p.id);
            assert!(common::region_painted(img, cfg.region(k), c, t.n_classes));
        }
    }
}

#[test]
fn zero_relevance_leaves_no_keyword() {
    let cfg = SynthConfig::new(200, vec![task("a", 4, 0.0), task("b", 4, 1.0)], 0.5, 2);
    for p in synth_generate(&cfg).unwrap() {
        let (_, text) = raw(&p);
        assert!(!text.contains("task0_"), "{text}");
        assert!(text.contains("task1_"));
    }
}

#[test]
fn relevance_and_noise_rates_match_configuration() {
    let cfg = SynthConfig::preset("mrwpa-like", 3000, 5).unwrap();
    let pairs = synth_generate(&cfg).unwrap();
    let n = pairs.len() as f64;
    for (k, t) in cfg.tasks.iter().enumerate() {
        let with_kw = pairs
            .iter()
            .filter(|p| common::keyword_lookup(raw(p).1, k, t.n_classes).is_some())
            .count() as f64;
        let painted = pairs
            .iter()
            .filter(|p| common::region_painted(raw(p).0, cfg.region(k), p.labels[&t.name], t.n_classes))
            .count() as f64;
        assert!((with_kw / n - t.text_relevance).abs() < 0.03, "{} keyword rate {}", t.name, with_kw / n);
        assert!((painted / n - (1.0 - cfg.image_noise_rate)).abs() < 0.03, "{} painted rate {}", t.name, painted / n);
    }
}

#[test]
fn text_length_and_keyword_consistency() {
    let cfg = SynthConfig::preset("two-task", 300, 8).unwrap();
    for p in synth_generate(&cfg).unwrap() {
        let (_, text) = raw(&p);
        let words: Vec<&str> = text.split(' ').collect();
        let keywords = words.iter().filter(|w| w.starts_with("task")).count();
        let distractors = words.len() - keywords;
        assert!((cfg.min_distractors..=cfg.max_distractors).contains(&distractors));
        for (k, t) in cfg.tasks.iter().enumerate() {
            if let Some(c) = common::keyword_lookup(text, k, t.n_classes) {
                assert_eq!(c, p.labels[&t.name]);
            }
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let a = synth_generate(&SynthConfig::preset("mrwpa-like", 50, 9).unwrap()).unwrap();
    let b = synth_generate(&SynthConfig::preset("mrwpa-like", 50, 9).unwrap()).unwrap();
    let c = synth_generate(&SynthConfig::preset("mrwpa-like", 50, 10).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(dataset_digest(&a), dataset_digest(&b));
    assert_ne!(dataset_digest(&a), dataset_digest(&c));
}

#[test]
fn invalid_configurations_are_rejected() {
    let five: Vec<SynthTask> = (0..5).map(|k| task(&format!("t{k}"), 2, 0.5)).collect();
    assert!(synth_generate(&SynthConfig::new(10, five, 0.0, 0)).is_err());
    assert!(synth_generate(&SynthConfig::new(10, vec![task("a", 1, 0.5)], 0.0, 0)).is_err());
    assert!(synth_generate(&SynthConfig::new(10, vec![task("a", 3, 1.5)], 0.0, 0)).is_err());
    assert!(synth_generate(&SynthConfig::new(10, vec![task("a", 3, 0.5)], -0.1, 0)).is_err());
    assert!(SynthConfig::preset("imagenet", 10, 0).is_err());
}

#[test]
fn split_examples() {
    let pairs = synth_generate(&SynthConfig::preset("two-task", 10, 1).unwrap()).unwrap();
    let s = split(&pairs, [0.8, 0.1, 0.1], 4).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
    let all = split(&pairs, [1.0, 0.0, 0.0], 4).unwrap();
    assert_eq!(all.train.len(), 10);
    assert!(all.validation.is_empty() && all.test.is_empty());
    assert_eq!(split(&pairs, [0.8, 0.1, 0.1], 4).unwrap(), s);

    let mut ids: Vec<&str> = s.train.iter().chain(&s.validation).chain(&s.test).map(|p| p.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 10);

    assert!(split(&[], [0.8, 0.1, 0.1], 0).is_err());
    assert!(split(&pairs, [0.5, 0.1, 0.1], 0).is_err());
}

#[test]
fn batches_examples() {
    let sizes: Vec<usize> = batches(10, 4, 3, 0).iter().map(Vec::len).collect();
    assert_eq!(sizes, [4, 4, 2]);
    assert_eq!(batches(10, 4, 3, 0), batches(10, 4, 3, 0));
    assert_ne!(batches(10, 4, 3, 0), batches(10, 4, 3, 1));
    let mut flat: Vec<usize> = batches(37, 5, 9, 2).concat();
    flat.sort();
    assert_eq!(flat, (0..37).collect::<Vec<_>>());
}

#[test]
fn manifest_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::preset("mrwpa-like", 20, 3).unwrap();
    let mut pairs = synth_generate(&cfg).unwrap();
    pairs[1].labels.remove("stylelike");
    let emb = EmbeddingSequence::new(Tensor::full(&[5, 4], 0.25), Modality::Text, 0, 3).unwrap();
    pairs[2].text = TextSource::Embedded(emb);
    let data = Dataset {
        tasks: cfg.task_specs(),
        pairs,
    };
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path(), None).unwrap();
    assert_eq!(back, data);
    assert_eq!(dataset_digest(&back.pairs), dataset_digest(&data.pairs));
}

fn write(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn handcrafted_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let img = RawImage::filled(2, 2, [1.0, 0.0, 0.0]);
    std::fs::write(dir.path().join("red.ppm"), encode_ppm(&img)).unwrap();
    let emb = EmbeddingSequence::new(Tensor::full(&[3, 4], 0.5), Modality::Image, 0, 3).unwrap();
    write_embedding_file(&dir.path().join("img.rec"), &emb).unwrap();
    let path = write(
        dir.path(),
        "m.jsonl",
        concat!(
            r#"{"id":"a","text":"red shirt","image_path":"red.ppm","labels":{"color":2,"style":0}}"#,
            "\n",
            r#"{"id":"b","text":"blue","image_embedding_path":"img.rec","labels":{"color":1,"style":null}}"#,
            "\n\n",
            r#"{"id":"c","text":"","image_path":"red.ppm","labels":{"style":3}}"#,
            "\n"
        ),
    );
    let pairs = load_manifest(&path, Some(4)).unwrap();
    assert_eq!(pairs.len(), 3);
    let labels: Vec<BTreeMap<String, usize>> = pairs.iter().map(|p| p.labels.clone()).collect();
    assert_eq!(labels[0], BTreeMap::from([("color".into(), 2), ("style".into(), 0)]));
    assert_eq!(labels[1], BTreeMap::from([("color".into(), 1)]));
    assert_eq!(labels[2], BTreeMap::from([("style".into(), 3)]));
    assert_eq!(pairs[0].image, ImageSource::Raw(img));
    assert_eq!(pairs[1].image, ImageSource::Embedded(emb));

    let err = load_manifest(&path, Some(8)).unwrap_err();
    assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let good = r#"{"id":"a","text":"x","image_embedding_path":"e.rec","labels":{"t":0}}"#;
    let emb = EmbeddingSequence::new(Tensor::full(&[2, 4], 0.5), Modality::Image, 0, 2).unwrap();
    write_embedding_file(&d.join("e.rec"), &emb).unwrap();

    let cases = [
        (format!("{good}\n{{\"id\":\"b\",\"image_embedding_path\":\"e.rec\",\"labels\":{{\"t\":0}}}}\n"), 2, "text"),
        (format!("{good}\n{good}\n"), 2, "duplicate"),
        (format!("{good}\nnot json\n"), 2, ""),
        (format!("{{\"id\":\"z\",\"text\":\"x\",\"image_embedding_path\":\"e.rec\",\"labels\":{{\"t\":null}}}}\n"), 1, "no labels"),
        (format!("{good}\n\n{{\"id\":\"q\",\"text\":\"x\",\"image_path\":\"nope.ppm\",\"labels\":{{\"t\":0}}}}\n"), 3, "nope.ppm"),
        (format!("{{\"id\":\"a\",\"text\":\"x\",\"image_embedding_path\":\"e.rec\",\"labels\":{{}},\"extra\":1}}\n"), 1, "extra"),
    ];
    for (body, line, needle) in cases {
        let path = write(d, "m.jsonl", &body);
        match load_manifest(&path, None) {
            Err(e @ Error::Manifest { .. }) => {
                let Error::Manifest { line: got, ref msg } = e else { unreachable!() };
                assert_eq!(got, line, "{body}: {msg}");
                assert!(msg.contains(needle), "{msg} lacks {needle}");
            }
            other => panic!("{body}: {other:?}"),
        }
    }

    assert!(load_manifest(&write(d, "empty.jsonl", ""), None).unwrap().is_empty());
    let missing = load_manifest(&d.join("absent.jsonl"), None).unwrap_err();
    assert!(missing.to_string().contains("absent.jsonl"));
}

#[test]
fn write_manifest_rejects_unsafe_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = synth_generate(&SynthConfig::preset("two-task", 1, 0).unwrap()).unwrap();
    pairs[0].id = "../escape".into();
    assert!(write_manifest(dir.path(), &pairs).is_err());
}

#[test]
fn dataset_labels_must_match_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::preset("two-task", 4, 0).unwrap();
    let mut pairs = synth_generate(&cfg).unwrap();
    pairs[0].labels.insert("alpha".into(), 9);
    let data = Dataset {
        tasks: cfg.task_specs(),
        pairs,
    };
    data.save(dir.path()).unwrap();
    let err = Dataset::load(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");

    let mut pairs = synth_generate(&cfg).unwrap();
    pairs[3].labels.insert("gamma".into(), 0);
    Dataset {
        tasks: cfg.task_specs(),
        pairs,
    }
    .save(dir.path())
    .unwrap();
    let err = Dataset::load(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("gamma"), "{err}");
}
