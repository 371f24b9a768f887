//! Templated captions over a small closed vocabulary. Ten templates, each
//! mentioning most attributes, so a caption nearly pins down the face it
//! describes — which is what makes caption-based retrieval a meaningful test.

use super::{band3, AttributeVector};
use crate::{Error, Result};

pub const TEMPLATE_COUNT: u64 = 10;

pub const HAIR_COLOR_WORDS: [&str; 6] = ["black", "blond", "brown", "red", "gray", "blue"];
pub const SKIN_COLOR_WORDS: [&str; 4] = ["pale", "tan", "olive", "dark"];
pub const HAIR_LENGTH_WORDS: [&str; 3] = ["short", "medium", "long"];
pub const NOSE_WORDS: [&str; 3] = ["button", "soft", "pointy"];
pub const LIP_WORDS: [&str; 3] = ["thin", "balanced", "full"];
pub const AGE_WORDS: [&str; 3] = ["young", "adult", "elderly"];
pub const FACE_SHAPE_WORDS: [&str; 3] = ["narrow", "oval", "round"];
pub const MICRO_WORDS: [&str; 2] = ["smooth", "freckled"];
pub const GENDER_WORDS: [&str; 2] = ["man", "woman"];
pub const PRONOUNS: [&str; 2] = ["he", "she"];
pub const POSSESSIVES: [&str; 2] = ["his", "her"];

/// Closed caption vocabulary. Index 0 is the unknown-word token; encoders
/// map out-of-table words there.
pub const VOCAB: [&str; 45] = [
    "<unk>", "a", "and", "with", "has", "is", "looks", "face", "hair", "skin", "nose", "lips",
    "he", "she", "his", "her", "man", "woman", "black", "blond", "brown", "red", "gray", "blue",
    "pale", "tan", "olive", "dark", "short", "medium", "long", "button", "soft", "pointy", "thin",
    "balanced", "full", "young", "adult", "elderly", "narrow", "oval", "round", "smooth",
    "freckled",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn micro_word(density: f32) -> &'static str {
    MICRO_WORDS[usize::from(density >= 0.5)]
}

/// Lowercases, strips sentence punctuation, and maps each word to its
/// vocabulary id (0 for unknown words).
pub fn tokenize(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            let w: String = w
                .chars()
                .filter(|c| !matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
                .flat_map(char::to_lowercase)
                .collect();
            VOCAB.iter().position(|v| *v == w).unwrap_or(0)
        })
        .collect()
}

/// Normalized word-count vector over the vocabulary, the text encoder input.
pub fn bag_of_words(text: &str) -> Result<Vec<f32>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid("empty caption"));
    }
    let mut bag = vec![0.0f32; VOCAB.len()];
    for t in tokens.iter() {
        bag[*t] += 1.0;
    }
    let inv = 1.0 / tokens.len() as f32;
    for b in &mut bag {
        *b *= inv;
    }
    Ok(bag)
}

struct Words {
    p: &'static str,
    ps: &'static str,
    g: &'static str,
    hc: &'static str,
    sk: &'static str,
    hl: &'static str,
    ns: &'static str,
    lp: &'static str,
    ag: &'static str,
    fs: &'static str,
    mi: &'static str,
}

impl Words {
    fn of(a: &AttributeVector) -> Words {
        Words {
            p: PRONOUNS[a.gender],
            ps: POSSESSIVES[a.gender],
            g: GENDER_WORDS[a.gender],
            hc: HAIR_COLOR_WORDS[a.hair_color],
            sk: SKIN_COLOR_WORDS[a.skin_color],
            hl: HAIR_LENGTH_WORDS[band3(a.hair_length)],
            ns: NOSE_WORDS[band3(a.nose_size)],
            lp: LIP_WORDS[band3(a.lip_size)],
            ag: AGE_WORDS[band3(a.age)],
            fs: FACE_SHAPE_WORDS[band3(a.face_shape)],
            mi: micro_word(a.micro_density),
        }
    }
}

/// Fills the template selected by `template_seed` with the attribute words.
/// Deterministic: same (attrs, seed) gives the same string.
pub fn make_caption(attrs: &AttributeVector, template_seed: u64) -> String {
    let Words { p, ps, g, hc, sk, hl, ns, lp, ag, fs, mi } = Words::of(attrs);
    match template_seed % TEMPLATE_COUNT {
        0 => format!("{p} is a {ag} {g} with {hl} {hc} hair, {sk} skin, a {fs} face and a {ns} nose"),
        1 => format!("a {ag} {g} with {hc} hair, {mi} {sk} skin, {lp} lips and a {fs} face"),
        2 => format!("{p} has {hl} {hc} hair, a {ns} nose, {lp} lips and {mi} {sk} skin"),
        3 => format!("{ps} {fs} face has {mi} {sk} skin, a {ns} nose and {lp} lips, and {p} is {ag}"),
        4 => format!("a {fs} face {g} with {hl} {hc} hair and {sk} skin, {ag} and with a {ns} nose"),
        5 => format!("{p} is {ag} with {lp} lips, {mi} skin, {hl} {hc} hair and a {fs} face"),
        6 => format!("a {ag} {g} with a {ns} nose, a {fs} face, {hc} hair and {mi} {sk} skin"),
        7 => format!("{p} has {sk} skin, {hl} hair, {lp} lips and a {ns} nose, and {p} looks {ag}"),
        8 => format!("a {g} with {hl} {hc} hair, a {ns} nose, {lp} lips and a {fs} face"),
        _ => format!("{p} is a {g} with {mi} {sk} skin, {hc} hair and {lp} lips, and {p} looks {ag}"),
    }
}

/// All ten captions of a sample, one per template.
pub fn make_captions(attrs: &AttributeVector) -> Vec<String> {
    (0..TEMPLATE_COUNT).map(|t| make_caption(attrs, t)).collect()
}

/// True when every attribute word appearing in `text` is the word the
/// tables assign to `attrs` — the faithfulness invariant of the templater.
pub fn caption_is_faithful(text: &str, attrs: &AttributeVector) -> bool {
    let w = Words::of(attrs);
    let tables: [(&[&str], &str); 9] = [
        (&HAIR_COLOR_WORDS, w.hc),
        (&SKIN_COLOR_WORDS, w.sk),
        (&HAIR_LENGTH_WORDS, w.hl),
        (&NOSE_WORDS, w.ns),
        (&LIP_WORDS, w.lp),
        (&AGE_WORDS, w.ag),
        (&FACE_SHAPE_WORDS, w.fs),
        (&MICRO_WORDS, w.mi),
        (&GENDER_WORDS, w.g),
    ];
    for token in tokenize(text) {
        let word = VOCAB[token];
        for (table, expected) in tables {
            if table.contains(&word) && word != expected {
                return false;
            }
        }
        // Pronouns double as gender words.
        if PRONOUNS.contains(&word) && word != w.p {
            return false;
        }
        if POSSESSIVES.contains(&word) && word != w.ps {
            return false;
        }
    }
    true
}
