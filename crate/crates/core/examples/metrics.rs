//! Diversity and memorization of text sets against the story corpus.

use tencdm::corpus::{generate_story_corpus, split_corpus};
use tencdm::metrics::{diversity, memorization, FourGramIndex};

fn main() -> tencdm::Result<()> {
    let splits = split_corpus(&generate_story_corpus(1, 5000), 200, 200)?;
    let index = FourGramIndex::new(&splits.train);
    println!("training 4-grams: {}", index.len());

    let repeated = vec![splits.train[0].clone(); 50];
    let novel = vec!["the kite sang to a quiet horse at noon .".to_string()];
    let sets = [
        ("200 held-out stories", splits.test.clone()),
        ("one story 50 times", repeated),
        ("a sentence outside the corpus", novel),
    ];
    for (name, texts) in &sets {
        println!("{name:<32} div {:.3}  mem {:.3}", diversity(texts)?, memorization(texts, &index)?);
    }
    Ok(())
}
