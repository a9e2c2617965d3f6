//! Pseudo-language text sampler.
//!
//! Each language seed fixes letter preferences, a syllable inventory and a
//! Zipf-weighted vocabulary, so two seeds give visibly different token
//! distributions over the same alphabet.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed;

const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u', 'y'];
const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'q', 'r', 's', 't', 'v', 'w', 'x', 'z',
];
const VOCAB_SIZE: usize = 600;

#[derive(Debug, Clone)]
pub struct Language {
    pub seed: u64,
    words: Vec<String>,
    word_weights: WeightedIndex<f64>,
}

fn weighted(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> WeightedIndex<f64> {
    // Log-normal preferences with a floor keep every symbol reachable.
    let w: Vec<f64> = (0..n).map(|_| (spread * rng.gen_range(-1.0..1.0f64)).exp() + 0.05).collect();
    WeightedIndex::new(w).unwrap()
}

impl Language {
    pub fn new(language_seed: u64) -> Self {
        let mut rng = seed::rng(language_seed, "language", 0);
        let vowel = weighted(&mut rng, VOWELS.len(), 1.2);
        let consonant = weighted(&mut rng, CONSONANTS.len(), 1.6);
        let coda_p = rng.gen_range(0.15..0.55);
        let cluster_p = rng.gen_range(0.0..0.25);
        let syllables = weighted(&mut rng, 4, 0.8);
        let mut words: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
        while words.len() < VOCAB_SIZE {
            let n = syllables.sample(&mut rng) + 1;
            let mut w = String::new();
            for _ in 0..n {
                if rng.gen_bool(0.85) {
                    w.push(CONSONANTS[consonant.sample(&mut rng)]);
                    if rng.gen_bool(cluster_p) {
                        w.push(CONSONANTS[consonant.sample(&mut rng)]);
                    }
                }
                w.push(VOWELS[vowel.sample(&mut rng)]);
                if rng.gen_bool(coda_p) {
                    w.push(CONSONANTS[consonant.sample(&mut rng)]);
                }
            }
            if w.len() <= 12 && !words.contains(&w) {
                words.push(w);
            }
        }
        let zipf: Vec<f64> = (0..words.len()).map(|r| 1.0 / (r as f64 + 2.7)).collect();
        Language { seed: language_seed, words, word_weights: WeightedIndex::new(zipf).unwrap() }
    }

    /// A line of roughly `min_len..=max_len` characters. Never empty and never
    /// longer than `max_len`.
    pub fn sample_line<R: Rng>(&self, rng: &mut R, min_len: usize, max_len: usize) -> String {
        let target = rng.gen_range(min_len..=max_len);
        let mut line = String::new();
        loop {
            let word = &self.words[self.word_weights.sample(rng)];
            let sep = usize::from(!line.is_empty());
            if !line.is_empty() && line.len() + sep + word.len() > max_len {
                break;
            }
            if sep == 1 {
                if rng.gen_bool(0.07) && line.len() + 2 + word.len() <= max_len {
                    line.push(',');
                }
                line.push(' ');
            }
            line.push_str(&word[..word.len().min(max_len - line.len())]);
            if line.len() >= target {
                break;
            }
        }
        if line.len() < max_len && rng.gen_bool(0.25) {
            line.push('.');
        }
        line
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lines_respect_length_bounds() {
        let lang = Language::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let l = lang.sample_line(&mut rng, 12, 30);
            assert!(!l.is_empty() && l.len() <= 30, "{l:?}");
            assert!(!l.starts_with(' ') && !l.ends_with(' '));
        }
    }

    #[test]
    fn seeds_give_different_vocabularies() {
        let a = Language::new(1);
        let b = Language::new(2);
        let shared = a.vocabulary().iter().take(50).filter(|w| b.vocabulary()[..50].contains(w)).count();
        assert!(shared < 10);
        assert_eq!(Language::new(1).vocabulary(), a.vocabulary());
    }
}
