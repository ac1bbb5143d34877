use relext_core::checkpoint::Checkpoint;
use relext_core::config::RunConfig;
use relext_core::corpus::{load_corpus, load_instances, write_instances, RelationVocab};
use relext_core::featurizer::Vocab;
use relext_core::model::ModelParams;
use relext_core::rng::{stream_rng, Stream};
use relext_core::synth::{generate_synth, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig { n_train_pairs: 150, n_test_pairs: 30, ..SynthConfig::default() }
}

#[test]
fn written_corpus_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synth(&small()).unwrap();
    let path = dir.path().join("train.jsonl");
    write_instances(&path, &corpus.train, &corpus.relations).unwrap();
    let rel_path = dir.path().join("rel.txt");
    corpus.relations.save(&rel_path).unwrap();
    let relations = RelationVocab::load(&rel_path).unwrap();
    assert_eq!(relations, corpus.relations);
    assert_eq!(load_instances(&path, &relations).unwrap(), corpus.train);
    let (bags, stats) = load_corpus(&path, &relations).unwrap();
    assert_eq!(bags, corpus.train_bags());
    assert_eq!(stats.instances, corpus.train.len());
    assert_eq!(stats.bags, bags.len());

    // schema: every line is an object with exactly these fields
    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["h", "relation", "t", "text"]);
        for side in ["h", "t"] {
            let e = obj[side].as_object().unwrap();
            assert!(e["name"].is_string() && e["id"].is_string());
            let pos = e["pos"].as_array().unwrap();
            assert_eq!(pos.len(), 2);
            let tokens = obj["text"].as_str().unwrap().split_whitespace().count() as u64;
            assert!(pos[0].as_u64().unwrap() < pos[1].as_u64().unwrap());
            assert!(pos[1].as_u64().unwrap() <= tokens);
        }
        assert!(relations.id(obj["relation"].as_str().unwrap()).is_some());
    }
}

#[test]
fn same_seed_same_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let c = generate_synth(&small()).unwrap();
        let p = dir.path().join(name);
        write_instances(&p, &c.train, &c.relations).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(write("a.jsonl"), write("b.jsonl"));
}

#[test]
fn malformed_lines_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = r#"{"text": "a b c", "h": {"name": "a", "id": "a", "pos": [0, 1]}, "t": {"name": "c", "id": "c", "pos": [2, 3]}, "relation": "NA"}"#;
    let out_of_range = r#"{"text": "a b", "h": {"name": "a", "id": "a", "pos": [0, 1]}, "t": {"name": "c", "id": "c", "pos": [2, 3]}, "relation": "NA"}"#;
    let relations = RelationVocab::new(vec!["NA".into()]).unwrap();
    std::fs::write(&path, format!("{good}\n{out_of_range}\n")).unwrap();
    match load_instances(&path, &relations) {
        Err(relext_core::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
    assert!(matches!(load_instances(&path, &relations), Err(relext_core::Error::Parse { line: 2, .. })));
    std::fs::write(&path, good.replace("\"NA\"", "\"unknown\"")).unwrap();
    assert!(matches!(load_instances(&path, &relations), Err(relext_core::Error::Parse { line: 1, .. })));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let run = RunConfig::parse("model.kernels = 5\nmodel.word_dim = 3\nmodel.pos_dim = 2").unwrap();
    let corpus = generate_synth(&small()).unwrap();
    let vocab = Vocab::build(corpus.train.iter());
    let model = run.model(corpus.relations.len());
    let params = ModelParams::init(&model, vocab.len(), &mut stream_rng(3, Stream::Init));
    let ckpt = Checkpoint { model, vocab, relations: corpus.relations.clone(), params };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_json(), ckpt.to_json());

    let mut broken: serde_json::Value = serde_json::from_str(&ckpt.to_json()).unwrap();
    broken["tables"][3]["shape"][0] = serde_json::json!(1);
    assert!(Checkpoint::from_json(&broken.to_string()).is_err());
    assert!(Checkpoint::from_json("{}").is_err());
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(&path, "# desk run\nseed = 4\nsynth.noise_rate = 0.1\nsynth.templates = between,after\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.synth.seed, 4);
    assert_eq!(cfg.synth.noise_rate, 0.1);
    assert_eq!(cfg.synth.templates.len(), 2);
    std::fs::write(&path, "seed = 4\nnot a pair\n").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(relext_core::Error::Parse { line: 2, .. })));
}
