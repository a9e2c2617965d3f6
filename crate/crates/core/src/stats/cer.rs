//! Character error rate over Unicode scalar values.

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over codepoints divided by `max(1, |reference|)`.
pub fn cer(hypothesis: &str, reference: &str) -> f64 {
    let h: Vec<char> = hypothesis.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    edit_distance(&h, &r) as f64 / r.len().max(1) as f64
}

/// Corpus-level CER: total edits over total reference length.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let (mut edits, mut len) = (0usize, 0usize);
    for (h, r) in pairs {
        let h: Vec<char> = h.chars().collect();
        let r: Vec<char> = r.chars().collect();
        edits += edit_distance(&h, &r);
        len += r.len();
    }
    edits as f64 / len.max(1) as f64
}
