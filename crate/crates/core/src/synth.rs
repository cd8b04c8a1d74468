//! Deterministic synthetic language pair for end-to-end experiments.
//!
//! The source and target languages are made of pseudo-words over disjoint
//! alphabets. Translation is a word-substitution cipher: each source word
//! maps to one target word, or to a two-word target phrase for a fraction
//! of the lexicon. Word order is kept. Source words are drawn from a Zipf
//! head plus a planted tail of rare words that occur only a few times in the
//! training split but recur in dev and test.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::dictionary::{BilingualDictionary, InfoKind};

pub const SRC_LANG: &str = "src";
pub const TGT_LANG: &str = "tgt";

const SRC_ONSETS: &[&str] = &["p", "t", "k", "m", "n", "s", "l", "f"];
const SRC_VOWELS: &[&str] = &["a", "i", "u"];
const TGT_ONSETS: &[&str] = &["b", "d", "g", "r", "v", "z", "h", "w"];
const TGT_VOWELS: &[&str] = &["e", "o", "y"];
const POS_TAGS: &[&str] = &["NOUN", "VERB", "ADJ"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Zipf-distributed frequent words.
    pub head_words: usize,
    /// Words planted fewer than `max_rare_count` times in training.
    pub rare_words: usize,
    pub max_rare_count: usize,
    /// Fraction of source words translated by a two-word phrase.
    pub phrase_fraction: f64,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a dev/test sentence carries a rare word.
    pub rare_in_eval: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_pairs: 2000,
            dev_pairs: 200,
            test_pairs: 200,
            head_words: 200,
            rare_words: 150,
            max_rare_count: 6,
            phrase_fraction: 0.1,
            zipf_exponent: 1.0,
            min_len: 4,
            max_len: 9,
            rare_in_eval: 0.6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthToy {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub dictionary: BilingualDictionary,
    /// Source words of the planted rare tail.
    pub rare_source: Vec<String>,
}

fn pseudo_words<R: Rng>(
    n: usize,
    onsets: &[&str],
    vowels: &[&str],
    rng: &mut R,
    taken: &mut BTreeSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", onsets.choose(rng).unwrap(), vowels.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn translate(words: &[usize], lexicon: &[String]) -> String {
    words.iter().map(|&w| lexicon[w].as_str()).collect::<Vec<_>>().join(" ")
}

pub fn generate(cfg: &SynthConfig) -> SynthToy {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_words = cfg.head_words + cfg.rare_words;
    let mut taken = BTreeSet::new();
    let source = pseudo_words(n_words, SRC_ONSETS, SRC_VOWELS, &mut rng, &mut taken);
    let n_phrase = (n_words as f64 * cfg.phrase_fraction).round() as usize;
    let mut tgt_pool = pseudo_words(n_words + n_phrase, TGT_ONSETS, TGT_VOWELS, &mut rng, &mut taken);
    // Phrase translations go to a shuffled subset of source words.
    let mut phrase_flags = vec![false; n_words];
    let mut idx: Vec<usize> = (0..n_words).collect();
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(n_phrase) {
        phrase_flags[i] = true;
    }
    let mut target = Vec::with_capacity(n_words);
    for &is_phrase in phrase_flags.iter() {
        let a = tgt_pool.pop().unwrap();
        target.push(if is_phrase {
            format!("{a} {}", tgt_pool.pop().unwrap())
        } else {
            a
        });
    }
    let pos: Vec<&str> = (0..n_words).map(|_| *POS_TAGS.choose(&mut rng).unwrap()).collect();

    let weights: Vec<f64> = (0..cfg.head_words)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        (0..len).map(|_| zipf.sample(rng)).collect()
    };

    let mut train: Vec<Vec<usize>> = (0..cfg.train_pairs).map(|_| sentence(&mut rng)).collect();
    // Plant each rare word 1..max_rare_count-1 times, in distinct sentences.
    let rare: Vec<usize> = (cfg.head_words..n_words).collect();
    for &w in &rare {
        if train.is_empty() {
            break;
        }
        let count = rng.gen_range(1..cfg.max_rare_count.max(2));
        let mut slots: Vec<usize> = (0..train.len()).collect();
        slots.shuffle(&mut rng);
        let mut planted = 0;
        for &s in &slots {
            if planted == count {
                break;
            }
            // Only overwrite head words so earlier plants keep their counts.
            let free: Vec<usize> = (0..train[s].len()).filter(|&p| train[s][p] < cfg.head_words).collect();
            if let Some(&pos) = free.choose(&mut rng) {
                train[s][pos] = w;
                planted += 1;
            }
        }
    }
    let held_out = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let mut s = sentence(rng);
                if !rare.is_empty() && rng.gen_bool(cfg.rare_in_eval) {
                    let pos = rng.gen_range(0..s.len());
                    s[pos] = *rare.choose(rng).unwrap();
                }
                s
            })
            .collect()
    };
    let dev = held_out(cfg.dev_pairs, &mut rng);
    let test = held_out(cfg.test_pairs, &mut rng);

    let corpus = |sents: &[Vec<usize>]| {
        let mut c = ParallelCorpus::new(SRC_LANG, TGT_LANG);
        c.pairs = sents
            .iter()
            .map(|s| (translate(s, &source), translate(s, &target)))
            .collect();
        c
    };

    let mut dictionary = BilingualDictionary::new();
    for i in 0..n_words {
        dictionary.insert(SRC_LANG, &source[i], InfoKind::Translation, vec![target[i].clone()]);
        dictionary.insert(SRC_LANG, &source[i], InfoKind::Pos, vec![pos[i].to_string()]);
        dictionary.insert(TGT_LANG, &target[i], InfoKind::Translation, vec![source[i].clone()]);
        dictionary.insert(TGT_LANG, &target[i], InfoKind::Pos, vec![pos[i].to_string()]);
    }

    SynthToy {
        train: corpus(&train),
        dev: corpus(&dev),
        test: corpus(&test),
        dictionary,
        rare_source: rare.iter().map(|&w| source[w].clone()).collect(),
    }
}
