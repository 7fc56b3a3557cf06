//! The synthetic story grammar and paraphrase rewrite rules.
//!
//! Stories are two or three sentences. Everything is lower case and the
//! full stop is its own token.
//!
//! ```text
//! STORY    := OPENER SENTENCE [SENTENCE]
//! OPENER   := NAME CLAUSE "."
//! SENTENCE := SUBJECT CLAUSE "."
//!           | "the" ANIMAL "ran to the" PLACE "."
//!           | "then" SUBJECT "went home ."
//! SUBJECT  := NAME | "he" | "she" | "they"
//! CLAUSE   := "went to the" PLACE
//!           | "saw a" ADJ ANIMAL
//!           | "bought a" ITEM
//!           | "liked to" ACTIVITY
//!           | "was very" FEELING
//!           | "gave the" ITEM "to" NAME
//!           | "played with the" ANIMAL
//!           | "ate the" FOOD
//! ```
//!
//! Several surface words fill more than one slot ("fish" is an animal, a
//! food and an activity; "watch" is an item and an activity; "cake"
//! is an item and a food; "happy" is an adjective and a feeling), so a
//! context-free embedding cannot tell their roles apart.
//!
//! Paraphrase targets are produced by a deterministic rewrite: clauses with
//! a passive form are turned around (`X bought a Y` becomes
//! `a Y was bought by X`, with subject pronouns switched to object form),
//! then every word in [`SYNONYMS`] is replaced.

pub const NAMES: &[&str] = &["tom", "anna", "max", "lily", "ben", "kate", "sam", "emma"];
pub const PRONOUNS: &[&str] = &["he", "she", "they"];
pub const PLACES: &[&str] = &["park", "store", "lake", "beach", "school", "market", "zoo", "farm"];
pub const ADJECTIVES: &[&str] = &["big", "small", "red", "happy", "old", "quiet", "funny", "brown"];
pub const ANIMALS: &[&str] = &["dog", "cat", "bird", "fish", "horse", "duck"];
pub const ITEMS: &[&str] = &["watch", "book", "ball", "hat", "kite", "ring", "cake"];
pub const ACTIVITIES: &[&str] = &["fish", "swim", "play", "watch", "run", "sing", "dance", "read"];
pub const FEELINGS: &[&str] = &["happy", "sad", "tired", "excited", "angry", "proud"];
pub const FOODS: &[&str] = &["cake", "apple", "bread", "fish", "soup", "pie"];

/// Canonical word → paraphrase replacement.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("big", "large"),
    ("small", "little"),
    ("happy", "glad"),
    ("sad", "upset"),
    ("tired", "sleepy"),
    ("angry", "mad"),
    ("store", "shop"),
    ("dog", "puppy"),
    ("cat", "kitten"),
    ("went", "walked"),
];

/// Words that only occur in paraphrase targets.
pub const PARAPHRASE_ONLY: &[&str] = &[
    "large", "little", "glad", "upset", "sleepy", "mad", "shop", "puppy", "kitten", "walked",
    "was", "by", "seen", "eaten", "got", "from", "him", "her", "them",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Name,
    Subject,
    Place,
    Adjective,
    Animal,
    Item,
    Activity,
    Feeling,
    Food,
}

impl Category {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Category::Name => NAMES,
            Category::Subject => &[],
            Category::Place => PLACES,
            Category::Adjective => ADJECTIVES,
            Category::Animal => ANIMALS,
            Category::Item => ITEMS,
            Category::Activity => ACTIVITIES,
            Category::Feeling => FEELINGS,
            Category::Food => FOODS,
        }
    }

    pub fn contains(self, word: &str) -> bool {
        match self {
            Category::Subject => NAMES.contains(&word) || PRONOUNS.contains(&word),
            c => c.words().contains(&word),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(&'static str),
    Fill(Category),
}

use Category::*;
use Slot::{Fill, Word};

/// Verb phrases that follow a subject.
pub const CLAUSES: &[&[Slot]] = &[
    &[Word("went"), Word("to"), Word("the"), Fill(Place)],
    &[Word("saw"), Word("a"), Fill(Adjective), Fill(Animal)],
    &[Word("bought"), Word("a"), Fill(Item)],
    &[Word("liked"), Word("to"), Fill(Activity)],
    &[Word("was"), Word("very"), Fill(Feeling)],
    &[Word("gave"), Word("the"), Fill(Item), Word("to"), Fill(Name)],
    &[Word("played"), Word("with"), Word("the"), Fill(Animal)],
    &[Word("ate"), Word("the"), Fill(Food)],
];

/// Complete sentences (without the full stop) that do not start with a
/// subject + clause.
pub const FIXED_SENTENCES: &[&[Slot]] = &[
    &[Word("the"), Fill(Animal), Word("ran"), Word("to"), Word("the"), Fill(Place)],
    &[Word("then"), Fill(Subject), Word("went"), Word("home")],
];

pub const FULL_STOP: &str = ".";

/// All word tokens the story and paraphrase grammars can emit, in a fixed
/// order without duplicates.
pub fn all_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    let mut push = |w: &'static str| {
        if !out.contains(&w) {
            out.push(w);
        }
    };
    push(FULL_STOP);
    for group in [NAMES, PRONOUNS, PLACES, ADJECTIVES, ANIMALS, ITEMS, ACTIVITIES, FEELINGS, FOODS] {
        group.iter().for_each(|w| push(w));
    }
    for pattern in CLAUSES.iter().chain(FIXED_SENTENCES) {
        for slot in pattern.iter() {
            if let Word(w) = slot {
                push(w);
            }
        }
    }
    PARAPHRASE_ONLY.iter().for_each(|w| push(w));
    out
}

fn matches(pattern: &[Slot], words: &[&str]) -> bool {
    pattern.len() == words.len()
        && pattern.iter().zip(words).all(|(slot, w)| match slot {
            Word(lit) => lit == w,
            Fill(cat) => cat.contains(w),
        })
}

fn is_clause(words: &[&str]) -> bool {
    CLAUSES.iter().any(|p| matches(p, words))
}

fn is_opener(words: &[&str]) -> bool {
    !words.is_empty() && NAMES.contains(&words[0]) && is_clause(&words[1..])
}

fn is_sentence(words: &[&str]) -> bool {
    (!words.is_empty() && Subject.contains(words[0]) && is_clause(&words[1..]))
        || FIXED_SENTENCES.iter().any(|p| matches(p, words))
}

/// Whether a whitespace-tokenized text is a story of the grammar above.
pub fn is_valid_story(text: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.last() != Some(&FULL_STOP) {
        return false;
    }
    let sentences: Vec<&[&str]> = words[..words.len() - 1].split(|w| *w == FULL_STOP).collect();
    if !(2..=3).contains(&sentences.len()) {
        return false;
    }
    is_opener(sentences[0]) && sentences[1..].iter().all(|s| is_sentence(s))
}

/// Whether `text` is a single sentence (subject + clause, or a fixed
/// sentence) ending in a full stop. Paraphrase sources have this form.
pub fn is_valid_sentence(text: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.last() == Some(&FULL_STOP) && is_sentence(&words[..words.len() - 1])
}

fn object_form(subject: &str) -> &str {
    match subject {
        "he" => "him",
        "she" => "her",
        "they" => "them",
        other => other,
    }
}

/// Rewrites one sentence (space separated, ending in ".") into its
/// paraphrase.
pub fn paraphrase(sentence: &str) -> String {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let body = &words[..words.len().saturating_sub(1)];
    let swapped: Vec<&str> = match body {
        [subj, "bought", "a", item] => vec!["a", item, "was", "bought", "by", object_form(subj)],
        [subj, "saw", "a", adj, animal] => vec!["a", adj, animal, "was", "seen", "by", object_form(subj)],
        [subj, "ate", "the", food] => vec!["the", food, "was", "eaten", "by", object_form(subj)],
        [subj, "gave", "the", item, "to", name] => {
            vec![name, "got", "the", item, "from", object_form(subj)]
        }
        other => other.to_vec(),
    };
    let mut out: Vec<&str> = swapped
        .into_iter()
        .map(|w| SYNONYMS.iter().find(|(from, _)| *from == w).map_or(w, |(_, to)| to))
        .collect();
    out.push(FULL_STOP);
    out.join(" ")
}
