//! Deterministic pseudo-English text for experiments when no real corpus is
//! at hand: a fixed random lexicon, Zipf word frequencies and a sparse word
//! bigram table, rendered as sentences and paragraphs.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "pl", "ch", "th", "sh", "br",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "ie"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "rk"];

const LEXICON: usize = 1500;
const SUCCESSORS: usize = 12;

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-s))).expect("positive weights")
}

fn word<R: Rng>(rng: &mut R) -> String {
    let syllables = 1 + rng.random_range(0..3);
    (0..syllables)
        .map(|_| {
            let mut s = String::new();
            s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            s.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
            s.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            s
        })
        .collect()
}

/// `len` bytes of ASCII text, identical for identical `(len, seed)`.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..LEXICON).map(|_| word(&mut rng)).collect();
    let unigram = zipf(LEXICON, 1.1);
    // A word never lists itself as a successor, so runs of one word stay rare.
    let successors: Vec<Vec<usize>> = (0..LEXICON)
        .map(|w| {
            (0..SUCCESSORS)
                .map(|_| loop {
                    let next = unigram.sample(&mut rng);
                    if next != w {
                        break next;
                    }
                })
                .collect()
        })
        .collect();
    let pick = zipf(SUCCESSORS, 1.0);
    let mut out = Vec::with_capacity(len + 64);
    let mut prev = unigram.sample(&mut rng);
    while out.len() < len {
        let sentences = 3 + rng.random_range(0..5);
        for _ in 0..sentences {
            let words = 4 + rng.random_range(0..12);
            for w in 0..words {
                // Mostly follow the bigram table, sometimes restart from the unigram.
                prev = if rng.random_bool(0.8) {
                    successors[prev][pick.sample(&mut rng)]
                } else {
                    unigram.sample(&mut rng)
                };
                let text = lexicon[prev].as_bytes();
                if w == 0 {
                    out.push(text[0].to_ascii_uppercase());
                    out.extend_from_slice(&text[1..]);
                } else {
                    out.extend_from_slice(text);
                }
                if w + 1 < words {
                    out.push(if rng.random_bool(0.07) { b',' } else { b' ' });
                    if out.last() == Some(&b',') {
                        out.push(b' ');
                    }
                }
            }
            out.extend_from_slice(b". ");
        }
        out.pop();
        out.push(b'\n');
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_ascii_of_requested_length() {
        let a = synthetic_text(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 3));
        assert_ne!(a, synthetic_text(10_000, 4));
        assert!(a.iter().all(|b| b.is_ascii_graphic() || *b == b' ' || *b == b'\n'));
    }
}
