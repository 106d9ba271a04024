mod common;

use common::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use strae::corpus::{Tokenizer, Vocabulary, UNK};
use strae::eval::{
    eval_similarity, export_embeddings, read_embeddings, spearman_rho, train_probe, train_probe_on_features,
    Embedder, Features, ModelEmbedder, ProbeConfig, ProbeExample, ProbeKind, ProbeTask, SimilarityKind,
    SimilarityPair, SimilarityTask,
};
use strae::model::{ModelKind, ModelParams, StructureSource};
use strae::trainer::init_params;

const WORDS: [&str; 12] = [
    "the", "cat", "dog", "sat", "ran", "on", "mat", "rug", "a", "big", "small", "slept",
];

fn vocab() -> Vocabulary {
    let sentence: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    Vocabulary::from_sentences(&[sentence], 0).unwrap()
}

fn params(vocab: &Vocabulary, seed: u64) -> ModelParams {
    init_params(ModelKind::Strae, 3, vocab.len(), 0.5, &mut rng(seed)).unwrap()
}

fn random_sentence(r: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
}

fn pairs_task(kind: SimilarityKind, items: &[(String, String)], seed: u64) -> SimilarityTask {
    let mut r = rng(seed);
    let pairs = items
        .iter()
        .map(|(a, b)| SimilarityPair {
            first: a.clone(),
            second: b.clone(),
            gold: r.gen_range(0.0..5.0),
        })
        .collect();
    SimilarityTask::new("t", kind, pairs).unwrap()
}

#[test]
fn spearman_matches_rank_oracle_on_tied_data() {
    let mut r = rng(3);
    let mut checked = 0;
    for _ in 0..1000 {
        let len = r.gen_range(2..30);
        // Coarse integer grids force frequent ties.
        let levels = r.gen_range(2..8);
        let xs: Vec<f64> = (0..len).map(|_| r.gen_range(0..levels) as f64).collect();
        let ys: Vec<f64> = (0..len).map(|_| r.gen_range(0..levels) as f64 * 0.5).collect();
        match spearman_rho(&xs, &ys) {
            Ok(rho) => {
                assert!((rho - common::spearman(&xs, &ys)).abs() < 1e-12);
                checked += 1;
            }
            Err(_) => {
                let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
                assert!(constant(&xs) || constant(&ys));
            }
        }
    }
    assert!(checked > 900);
}

#[test]
fn spearman_worked_example() {
    let (xs, ys) = ([1.0, 2.0, 2.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
    assert!((spearman_rho(&xs, &ys).unwrap() - common::spearman(&xs, &ys)).abs() < 1e-12);
}

#[test]
fn word_embeddings_are_psi_rows() {
    let v = vocab();
    let p = params(&v, 1);
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    assert_eq!(e.word("zebra").unwrap(), p.embedding().row_slice(v.unk_id()));
    assert_eq!(e.word(UNK).unwrap(), p.embedding().row_slice(v.unk_id()));
    assert_eq!(e.word("Cat").unwrap(), e.word("cat").unwrap());
    let w = e.word("dog").unwrap();
    assert_eq!(w, p.embedding().row_slice(v.id("dog")));
    // The ε in the cosine denominator shifts self-similarity by ε/‖w‖².
    assert!((strae::diffcore::cosine(&w, &w) - 1.0).abs() < 1e-7);
}

#[test]
fn sentence_embedding_contracts() {
    let v = vocab();
    let p = params(&v, 2);
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::RightBranching).unwrap();
    assert_eq!(e.sentence("mat").unwrap(), e.word("mat").unwrap());
    let a = e.sentence("the big cat sat on the mat").unwrap();
    assert_eq!(a, e.sentence("the big cat sat on the mat").unwrap());
    assert!(e.sentence("   ").is_err());

    let balanced = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    assert_ne!(a, balanced.sentence("the big cat sat on the mat").unwrap());
}

#[test]
fn similarity_extremes() {
    let v = vocab();
    let p = params(&v, 4);
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    let items: Vec<(String, String)> = WORDS.windows(2).map(|w| (w[0].to_string(), w[1].to_string())).collect();
    let mut task = pairs_task(SimilarityKind::Word, &items, 0);
    for pair in &mut task.pairs {
        pair.gold = strae::diffcore::cosine(&e.word(&pair.first).unwrap(), &e.word(&pair.second).unwrap());
    }
    assert!((eval_similarity(&task, &e).unwrap() - 1.0).abs() < 1e-12);

    let mut two = pairs_task(SimilarityKind::Word, &items[..2], 0);
    let c: Vec<f64> = two
        .pairs
        .iter()
        .map(|p| strae::diffcore::cosine(&e.word(&p.first).unwrap(), &e.word(&p.second).unwrap()))
        .collect();
    two.pairs[0].gold = if c[0] > c[1] { 0.0 } else { 1.0 };
    two.pairs[1].gold = 1.0 - two.pairs[0].gold;
    assert_eq!(eval_similarity(&two, &e).unwrap(), -1.0);
}

fn oracle_sentence(p: &ModelParams, v: &Vocabulary, text: &str) -> Vec<f64> {
    let ids: Vec<usize> = text.split(' ').map(|w| v.id(w)).collect();
    let ModelParams::Strae(s) = p else { unreachable!() };
    let shape = common::right_branching(0..ids.len());
    common::flatten(&common::encode(&shape, &ids, &s.embedding, &s.compose, s.n))
}

#[test]
fn sentence_similarity_matches_pipeline_oracle() {
    let v = vocab();
    let p = params(&v, 5);
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::RightBranching).unwrap();
    let mut r = rng(9);
    let items: Vec<(String, String)> = (0..10)
        .map(|_| {
            let (la, lb) = (r.gen_range(1..8), r.gen_range(1..8));
            (random_sentence(&mut r, la), random_sentence(&mut r, lb))
        })
        .collect();
    let task = pairs_task(SimilarityKind::Sentence, &items, 1);
    let model: Vec<f64> = task
        .pairs
        .iter()
        .map(|pair| common::cosine(&oracle_sentence(&p, &v, &pair.first), &oracle_sentence(&p, &v, &pair.second)))
        .collect();
    let gold: Vec<f64> = task.pairs.iter().map(|p| p.gold).collect();
    let expected = common::spearman(&model, &gold);
    assert!((eval_similarity(&task, &e).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn similarity_ignores_embedding_scale() {
    let v = vocab();
    let p = params(&v, 6);
    let mut scaled = p.clone();
    for (_, t) in scaled.tensors_mut() {
        if t.cols() == 9 {
            t.data_mut().iter_mut().for_each(|x| *x *= 3.5);
        }
    }
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    let s = ModelEmbedder::new(&scaled, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    let items: Vec<(String, String)> = (0..WORDS.len())
        .flat_map(|i| (i + 1..WORDS.len()).map(move |j| (WORDS[i].to_string(), WORDS[j].to_string())))
        .collect();
    let task = pairs_task(SimilarityKind::Word, &items, 2);
    assert!((eval_similarity(&task, &e).unwrap() - eval_similarity(&task, &s).unwrap()).abs() < 1e-12);
}

#[test]
fn exported_embeddings_round_trip() {
    let v = vocab();
    let p = params(&v, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    std::fs::write(&path, export_embeddings(&p, &v).unwrap()).unwrap();
    let table = read_embeddings(&path).unwrap();
    assert_eq!(table.dim, 9);
    assert_eq!(table.tokens, v.tokens());
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    for w in WORDS {
        assert_eq!(table.word(w).unwrap(), e.word(w).unwrap());
    }
    let items: Vec<(String, String)> = WORDS.windows(3).map(|w| (w[0].to_string(), w[2].to_string())).collect();
    let task = pairs_task(SimilarityKind::Word, &items, 3);
    assert!((eval_similarity(&task, &table).unwrap() - eval_similarity(&task, &e).unwrap()).abs() < 1e-12);
}

#[test]
fn malformed_embedding_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    for body in ["2 2\na 1 2\n", "1 2\na 1\n", "1 2\na 1 x\n", "2 1\na 1\na 2\n", ""] {
        std::fs::write(&path, body).unwrap();
        assert!(read_embeddings(&path).is_err(), "{body:?}");
    }
}

fn features(points: &[Vec<f64>], labels: Vec<usize>) -> Features {
    Features::new(points.to_vec(), labels).unwrap()
}

fn gaussian_points(r: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

fn quick_config() -> ProbeConfig {
    ProbeConfig {
        hidden: 64,
        lr: 1e-2,
        max_epochs: 100,
        patience: 15,
        batch_size: 32,
        seeds: vec![0],
    }
}

#[test]
fn probes_learn_a_linear_rule() {
    let mut r = rng(11);
    let w: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut split = |count| {
        let pts: Vec<Vec<f64>> = gaussian_points(&mut r, 3 * count, 8)
            .into_iter()
            .filter(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().abs() > 0.05)
            .take(count)
            .collect();
        let labels = pts
            .iter()
            .map(|x| usize::from(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0))
            .collect();
        features(&pts, labels)
    };
    let (train, dev, test) = (split(800), split(200), split(500));
    for kind in [ProbeKind::Single, ProbeKind::Pair] {
        let acc = train_probe_on_features(kind, &train, &dev, &test, &quick_config(), 0).unwrap();
        assert!(acc >= 0.99, "{kind:?}: {acc}");
    }
}

#[test]
fn probes_stay_at_chance_on_shuffled_labels() {
    let mut r = rng(12);
    let mut split = |count: usize| {
        let pts = gaussian_points(&mut r, count, 8);
        let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
        labels.shuffle(&mut r);
        features(&pts, labels)
    };
    let (train, dev, test) = (split(400), split(200), split(1000));
    let acc = train_probe_on_features(ProbeKind::Single, &train, &dev, &test, &quick_config(), 0).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}

#[test]
fn probe_training_leaves_parameters_untouched() {
    let v = vocab();
    let p = params(&v, 8);
    let before: Vec<Vec<u64>> = p
        .tensors()
        .iter()
        .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    let e = ModelEmbedder::new(&p, &v, Tokenizer::default(), StructureSource::Balanced).unwrap();
    let mut r = rng(13);
    let mut examples = |count: usize| -> Vec<ProbeExample> {
        (0..count)
            .map(|_| {
                let len = r.gen_range(2..6);
                let text = random_sentence(&mut r, len);
                let label = usize::from(text.contains("cat"));
                ProbeExample { text, text2: None, label }
            })
            .collect()
    };
    let task = ProbeTask::new("cats", ProbeKind::Single, examples(60), examples(20), examples(20)).unwrap();
    let config = ProbeConfig {
        seeds: vec![0, 1, 2],
        max_epochs: 5,
        ..quick_config()
    };
    let result = train_probe(&task, &e, &config).unwrap();
    assert_eq!(result.accuracies.len(), 3);
    assert_eq!(train_probe(&task, &e, &config).unwrap(), result);
    let after: Vec<Vec<u64>> = p
        .tensors()
        .iter()
        .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn probe_task_files_load_by_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("rte");
    for (suffix, body) in [
        ("train", "a cat\tthe dog\t1\nthe mat\ta rug\t0\n"),
        ("dev", "a big cat\tthe dog\t0\n"),
        ("test", "the cat\ta rug\t1\n"),
    ] {
        std::fs::write(prefix.with_extension(suffix), body).unwrap();
    }
    let task = ProbeTask::load(&prefix).unwrap();
    assert_eq!(task.kind, ProbeKind::Pair);
    assert_eq!(task.train.len(), 2);
    assert_eq!(task.test[0].text2.as_deref(), Some("a rug"));
    assert_eq!(task.name, "rte");
}

#[test]
fn similarity_task_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("simlex.tsv");
    std::fs::write(&path, "cat\tdog\t7.5\nmat\trug\t6\n\nsat\tran\t2.25\n").unwrap();
    let task = SimilarityTask::load(&path, SimilarityKind::Word).unwrap();
    assert_eq!(task.name, "simlex");
    assert_eq!(task.pairs.len(), 3);
    assert_eq!(task.pairs[2].gold, 2.25);
    std::fs::write(&path, "cat\tdog\n").unwrap();
    assert!(SimilarityTask::load(&path, SimilarityKind::Word).is_err());
    std::fs::write(&path, "cat\tdog\t1\n").unwrap();
    assert!(SimilarityTask::load(&path, SimilarityKind::Word).is_err());
}
