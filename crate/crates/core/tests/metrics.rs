use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencdm::corpus::generate_story_corpus;
use tencdm::metrics::{diversity, memorization, FourGramIndex, MeanStd};

fn content(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|w| !matches!(*w, "<pad>" | "<bos>" | "<eos>"))
        .map(str::to_string)
        .collect()
}

fn grams(text: &str, n: usize) -> Vec<String> {
    let w = content(text);
    if w.len() < n {
        return vec![];
    }
    (0..=w.len() - n).map(|i| w[i..i + n].join(" ")).collect()
}

fn oracle_diversity(texts: &[String]) -> f64 {
    (2..=4)
        .map(|n| {
            let all: Vec<String> = texts.iter().flat_map(|t| grams(t, n)).collect();
            let unique: BTreeSet<&String> = all.iter().collect();
            unique.len() as f64 / all.len() as f64
        })
        .product()
}

fn oracle_memorization(texts: &[String], train: &[String]) -> f64 {
    let generated: Vec<String> = texts.iter().flat_map(|t| grams(t, 4)).collect();
    let found = generated
        .iter()
        .filter(|g| train.iter().any(|t| grams(t, 4).contains(g)))
        .count();
    found as f64 / generated.len() as f64
}

/// 100 texts: half corpus stories, half stories with shuffled words.
fn fixture(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stories = generate_story_corpus(seed, 100);
    stories
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i % 2 == 0 {
                s
            } else {
                let mut w: Vec<&str> = s.split_whitespace().collect();
                w.shuffle(&mut rng);
                w.join(" ")
            }
        })
        .collect()
}

#[test]
fn hand_computed_cases() {
    // "a a a a a": 1/4 · 1/3 · 1/2
    let d = diversity(&["a a a a a".to_string()]).unwrap();
    assert_eq!(d, 1.0 / 24.0);
    let d = diversity(&["a b c d".to_string(), "a b c d".to_string()]).unwrap();
    assert_eq!(d, 0.5 * 0.5 * 0.5);
}

#[test]
fn diversity_and_memorization_match_brute_force_on_fixtures() {
    let train = generate_story_corpus(1, 300);
    let index = FourGramIndex::new(&train);
    for seed in 0..5 {
        let texts = fixture(seed + 10);
        assert_eq!(texts.len(), 100);
        assert_eq!(diversity(&texts).unwrap(), oracle_diversity(&texts), "seed {seed}");
        assert_eq!(memorization(&texts, &index).unwrap(), oracle_memorization(&texts, &train), "seed {seed}");
    }
}

#[test]
fn training_texts_are_fully_memorized() {
    let train = generate_story_corpus(2, 100);
    assert_eq!(memorization(&train, &FourGramIndex::new(&train)).unwrap(), 1.0);
}

#[test]
fn mean_std_uses_sample_deviation() {
    let m = MeanStd::of(&[0.2, 0.4, 0.6, 0.8]);
    assert!((m.mean - 0.5).abs() < 1e-15);
    let want = ((0.09 + 0.01 + 0.01 + 0.09) / 3.0f64).sqrt();
    assert!((m.std - want).abs() < 1e-15);
}

fn texts() -> impl Strategy<Value = Vec<String>> {
    let word = prop::sample::select(vec!["tom", "ran", "to", "the", "park", ".", "<pad>", "<eos>"]);
    proptest::collection::vec(proptest::collection::vec(word, 4..12).prop_map(|w| w.join(" ")), 1..20)
}

proptest! {
    #[test]
    fn random_sets_match_oracles(gen in texts(), train in texts()) {
        let has = |n: usize| gen.iter().any(|t| !grams(t, n).is_empty());
        if (2..=4).all(has) {
            prop_assert_eq!(diversity(&gen).unwrap(), oracle_diversity(&gen));
            prop_assert_eq!(
                memorization(&gen, &FourGramIndex::new(&train)).unwrap(),
                oracle_memorization(&gen, &train)
            );
        } else {
            prop_assert!(diversity(&gen).is_err());
        }
    }

    #[test]
    fn metrics_are_fractions(gen in texts()) {
        if let Ok(d) = diversity(&gen) {
            prop_assert!(d > 0.0 && d <= 1.0);
        }
    }
}
