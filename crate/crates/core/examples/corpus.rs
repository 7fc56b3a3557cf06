//! Generates the synthetic story corpus and a few paraphrase pairs, and
//! shows how texts become fixed-length token sequences.

use tencdm::corpus::{
    detokenize, duplicate_rate, generate_paraphrase_pairs, generate_story_corpus, split_corpus, tokenize,
    ParaphraseOptions, Vocab,
};
use tencdm::grammar::is_valid_story;

fn main() -> tencdm::Result<()> {
    let vocab = Vocab::synthetic();
    let stories = generate_story_corpus(1, 5000);
    let splits = split_corpus(&stories, 200, 200)?;
    println!("vocabulary: {} tokens", vocab.len());
    println!(
        "stories: {} generated, duplicate rate {:.3}, {} unique train / {} val / {} test",
        stories.len(),
        duplicate_rate(&stories),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let longest = stories.iter().map(|s| s.split_whitespace().count()).max().unwrap_or(0);
    println!("longest story: {longest} words\n");

    for s in stories.iter().take(3) {
        let seq = tokenize(s, 32, &vocab)?;
        println!("{s}\n  valid {}  ids {:?}", is_valid_story(s), &seq.ids[..seq.true_length]);
        assert_eq!(detokenize(&seq, &vocab), *s);
    }

    println!("\nparaphrase pairs:");
    for (src, tgt) in generate_paraphrase_pairs(2, 4, ParaphraseOptions { allow_identity: false }) {
        println!("  {src}  =>  {tgt}");
    }
    Ok(())
}
