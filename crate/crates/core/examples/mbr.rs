//! Minimum Bayes risk selection: the candidate closest on average to the
//! others wins.

use tencdm::sampler::{mbr_select, ngram_distance};

fn main() -> tencdm::Result<()> {
    let candidates: Vec<String> = [
        "tom went to the park . he was happy .",
        "tom went to the park . he was very happy .",
        "tom went the park park . happy he .",
        "anna bought a red kite .",
        "tom went to the park . she was happy .",
    ]
    .map(String::from)
    .to_vec();

    for (i, a) in candidates.iter().enumerate() {
        let risk: f64 = candidates
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| ngram_distance(a, b))
            .sum::<f64>()
            / (candidates.len() - 1) as f64;
        println!("{risk:.3}  {a}");
    }
    let best = mbr_select(&candidates)?;
    println!("selected: {}", candidates[best]);
    Ok(())
}
