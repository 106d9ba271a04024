//! A seeded toy grammar for desk-scale experiments: sentences with gold
//! constituency trees and a word-similarity task built from corpus
//! co-occurrence statistics.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Constituent;
use crate::error::{Error, Result};
use crate::eval::{SimilarityKind, SimilarityPair, SimilarityTask};
use crate::io::write_atomic;

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that"];

const ANIMATE: &[&str] = &[
    "cat", "dog", "horse", "bird", "fox", "rabbit", "mouse", "wolf", "child", "farmer", "teacher", "girl", "boy",
];
const OBJECTS: &[&str] = &["table", "chair", "box", "book", "lamp", "rock", "cup", "bottle", "stone", "basket"];
const FOODS: &[&str] = &["apple", "bread", "cheese", "fish", "cake", "carrot", "soup", "rice"];
const PLACES: &[&str] = &["garden", "house", "forest", "river", "kitchen", "field", "hill", "road"];

const SIZE_ADJ: &[&str] = &["big", "small", "tiny", "huge", "tall", "short"];
const COLOR_ADJ: &[&str] = &["red", "green", "blue", "brown", "white", "black"];
const MOOD_ADJ: &[&str] = &["hungry", "sleepy", "happy", "angry", "brave"];
const TASTE_ADJ: &[&str] = &["fresh", "sweet", "warm", "salty"];

const EAT_VERBS: &[&str] = &["eats", "bites", "cooks", "tastes"];
const SOCIAL_VERBS: &[&str] = &["chases", "sees", "follows", "watches", "helps"];
const HANDLE_VERBS: &[&str] = &["pushes", "carries", "drops", "lifts", "breaks"];
const INTRANSITIVE: &[&str] = &["sleeps", "runs", "sings", "waits", "laughs"];

const PREPOSITIONS: &[&str] = &["in", "near", "behind", "under", "across"];
const ADVERBS: &[&str] = &["quickly", "slowly", "often", "never", "quietly"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum NounClass {
    Animate,
    Object,
    Food,
    Place,
}

impl NounClass {
    fn nouns(self) -> &'static [&'static str] {
        match self {
            NounClass::Animate => ANIMATE,
            NounClass::Object => OBJECTS,
            NounClass::Food => FOODS,
            NounClass::Place => PLACES,
        }
    }

    fn adjectives(self) -> [&'static [&'static str]; 2] {
        match self {
            NounClass::Animate => [SIZE_ADJ, MOOD_ADJ],
            NounClass::Object => [SIZE_ADJ, COLOR_ADJ],
            NounClass::Food => [TASTE_ADJ, COLOR_ADJ],
            NounClass::Place => [SIZE_ADJ, COLOR_ADJ],
        }
    }
}

/// Every word the grammar can produce.
pub fn grammar_words() -> Vec<&'static str> {
    [
        DETERMINERS, ANIMATE, OBJECTS, FOODS, PLACES, SIZE_ADJ, COLOR_ADJ, MOOD_ADJ, TASTE_ADJ, EAT_VERBS,
        SOCIAL_VERBS, HANDLE_VERBS, INTRANSITIVE, PREPOSITIONS, ADVERBS,
    ]
    .concat()
}

fn leaf(tag: &str, word: &str) -> Constituent {
    Constituent::Phrase {
        label: Some(tag.into()),
        children: vec![Constituent::Leaf(word.into())],
    }
}

fn phrase(label: &str, children: Vec<Constituent>) -> Constituent {
    Constituent::Phrase {
        label: Some(label.into()),
        children,
    }
}

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("word lists are non-empty")
}

struct Grammar<'r, R: Rng> {
    rng: &'r mut R,
}

impl<R: Rng> Grammar<'_, R> {
    fn noun_phrase(&mut self, class: NounClass, allow_pp: bool) -> Constituent {
        let mut kids = vec![leaf("DT", pick(self.rng, DETERMINERS))];
        let adjectives = match self.rng.gen_range(0..20) {
            0..=9 => 0,
            10..=16 => 1,
            _ => 2,
        };
        for group in class.adjectives().iter().take(adjectives) {
            kids.push(leaf("JJ", pick(self.rng, group)));
        }
        kids.push(leaf("NN", pick(self.rng, class.nouns())));
        let np = phrase("NP", kids);
        if allow_pp && self.rng.gen_bool(0.15) {
            phrase("NP", vec![np, self.prepositional()])
        } else {
            np
        }
    }

    fn prepositional(&mut self) -> Constituent {
        let p = leaf("IN", pick(self.rng, PREPOSITIONS));
        phrase("PP", vec![p, self.noun_phrase(NounClass::Place, false)])
    }

    fn verb_phrase(&mut self) -> Constituent {
        let (verbs, object) = match self.rng.gen_range(0..4) {
            0 => (EAT_VERBS, Some(NounClass::Food)),
            1 => (SOCIAL_VERBS, Some(NounClass::Animate)),
            2 => (HANDLE_VERBS, Some(NounClass::Object)),
            _ => (INTRANSITIVE, None),
        };
        let v = leaf("VB", pick(self.rng, verbs));
        let mut vp = match object {
            Some(class) => phrase("VP", vec![v, self.noun_phrase(class, true)]),
            None => phrase("VP", vec![v]),
        };
        if self.rng.gen_bool(0.3) {
            vp = phrase("VP", vec![leaf("RB", pick(self.rng, ADVERBS)), vp]);
        }
        if self.rng.gen_bool(0.3) {
            vp = phrase("VP", vec![vp, self.prepositional()]);
        }
        vp
    }

    fn sentence(&mut self) -> Constituent {
        let subject = self.noun_phrase(NounClass::Animate, true);
        phrase("S", vec![subject, self.verb_phrase()])
    }
}

/// Sentences drawn from the toy grammar, each with its gold tree.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskCorpus {
    pub sentences: Vec<Vec<String>>,
    pub trees: Vec<Constituent>,
}

impl DeskCorpus {
    pub fn generate(count: usize, seed: u64) -> Self {
        Self::generate_bounded(count, usize::MAX, seed)
    }

    /// Like [`DeskCorpus::generate`], but draws are discarded until `count`
    /// sentences of at most `max_len` tokens have been kept.
    pub fn generate_bounded(count: usize, max_len: usize, seed: u64) -> Self {
        assert!(max_len >= 3, "the grammar's shortest sentence has three tokens");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grammar = Grammar { rng: &mut rng };
        let mut trees = Vec::with_capacity(count);
        while trees.len() < count {
            let t = grammar.sentence();
            if t.leaf_count() <= max_len {
                trees.push(t);
            }
        }
        let sentences = trees
            .iter()
            .map(|t| t.leaves().into_iter().map(str::to_string).collect())
            .collect();
        DeskCorpus { sentences, trees }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn corpus_text(&self) -> String {
        self.sentences.iter().map(|s| s.join(" ") + "\n").collect()
    }

    pub fn tree_text(&self) -> String {
        self.trees.iter().map(|t| format!("{t}\n")).collect()
    }

    /// Writes `<stem>.txt` and `<stem>.trees` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let corpus = dir.join(format!("{stem}.txt"));
        let trees = dir.join(format!("{stem}.trees"));
        write_atomic(&corpus, self.corpus_text().as_bytes())?;
        write_atomic(&trees, self.tree_text().as_bytes())?;
        Ok((corpus, trees))
    }
}

/// Positive pointwise mutual information vectors over a symmetric context
/// window, keyed by word.
pub fn ppmi_vectors(sentences: &[Vec<String>], window: usize) -> BTreeMap<String, Vec<f64>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for w in s {
            index.entry(w.as_str()).or_insert(0);
        }
    }
    for (i, slot) in index.values_mut().enumerate() {
        *slot = i;
    }
    let v = index.len();
    let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
    for s in sentences {
        let ids: Vec<usize> = s.iter().map(|w| index[w.as_str()]).collect();
        for (i, &a) in ids.iter().enumerate() {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(ids.len());
            for (j, &b) in ids.iter().enumerate().take(hi).skip(lo) {
                if j != i {
                    *counts.entry((a, b)).or_default() += 1.0;
                }
            }
        }
    }
    let mut row = vec![0.0; v];
    let mut col = vec![0.0; v];
    let mut total = 0.0;
    for (&(a, b), &c) in &counts {
        row[a] += c;
        col[b] += c;
        total += c;
    }
    let mut vectors: Vec<Vec<f64>> = vec![vec![0.0; v]; v];
    for (&(a, b), &c) in &counts {
        let pmi = (c * total / (row[a] * col[b])).ln();
        vectors[a][b] = pmi.max(0.0);
    }
    index
        .into_iter()
        .map(|(w, i)| (w.to_string(), std::mem::take(&mut vectors[i])))
        .collect()
}

/// Word pairs scored by the cosine of their co-occurrence vectors. Only
/// words seen at least `min_count` times take part; every pair of them is
/// included.
pub fn cooccurrence_task(sentences: &[Vec<String>], window: usize, min_count: usize) -> Result<SimilarityTask> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for w in s {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let vectors = ppmi_vectors(sentences, window);
    let words: Vec<&str> = freq.iter().filter(|(_, &c)| c >= min_count).map(|(w, _)| *w).collect();
    let mut pairs = Vec::new();
    for (i, a) in words.iter().enumerate() {
        for b in &words[i + 1..] {
            pairs.push(SimilarityPair {
                first: a.to_string(),
                second: b.to_string(),
                gold: crate::diffcore::cosine(&vectors[*a], &vectors[*b]),
            });
        }
    }
    SimilarityTask::new("cooccurrence", SimilarityKind::Word, pairs)
}

/// Writes a similarity task as `first<TAB>second<TAB>gold` lines.
pub fn write_similarity_task(task: &SimilarityTask, path: &Path) -> Result<()> {
    let text: String = task
        .pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.first, p.second, p.gold))
        .collect();
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_bracketed_tree;

    #[test]
    fn generation_is_seeded() {
        let a = DeskCorpus::generate(50, 3);
        assert_eq!(a, DeskCorpus::generate(50, 3));
        assert_ne!(a, DeskCorpus::generate(50, 4));
    }

    #[test]
    fn bounded_generation_filters_the_same_stream() {
        let short = DeskCorpus::generate_bounded(40, 6, 9);
        let all = DeskCorpus::generate(2000, 9);
        let filtered: Vec<_> = all.sentences.into_iter().filter(|s| s.len() <= 6).take(40).collect();
        assert_eq!(short.sentences, filtered);
    }

    #[test]
    fn trees_print_and_parse_back() {
        let c = DeskCorpus::generate(200, 1);
        for (s, t) in c.sentences.iter().zip(&c.trees) {
            let parsed = parse_bracketed_tree(&t.to_string()).unwrap();
            assert_eq!(&parsed, t);
            assert_eq!(parsed.leaf_count(), s.len());
            assert!(s.len() >= 3);
            assert!(parsed.to_tree().is_ok());
        }
    }

    #[test]
    fn vocabulary_covers_the_grammar() {
        let c = DeskCorpus::generate(5000, 2);
        let seen: std::collections::HashSet<&str> = c.sentences.iter().flatten().map(String::as_str).collect();
        let words = grammar_words();
        assert!(words.iter().all(|w| seen.contains(w)));
        assert_eq!(seen.len(), words.len());
    }

    #[test]
    fn ppmi_separates_word_classes() {
        let c = DeskCorpus::generate(3000, 5);
        let task = cooccurrence_task(&c.sentences, 2, 5).unwrap();
        let gold = |a: &str, b: &str| {
            task.pairs
                .iter()
                .find(|p| (p.first == a && p.second == b) || (p.first == b && p.second == a))
                .unwrap()
                .gold
        };
        assert!(gold("cat", "dog") > gold("cat", "cheese"));
        assert!(gold("eats", "bites") > gold("eats", "sleeps"));
        assert!(gold("apple", "bread") > gold("apple", "quickly"));
    }
}
