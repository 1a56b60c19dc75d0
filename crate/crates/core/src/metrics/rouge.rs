/// Recall weight of ROUGE-L's F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// Longest common subsequence length, two-row dynamic programme.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-measure of one candidate against one reference.
pub fn rouge_l_single<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Best F-measure over references; 0 for an empty candidate or no references.
pub fn rouge_l<T: PartialEq>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    references
        .iter()
        .map(|r| rouge_l_single(candidate, r))
        .fold(0.0, f64::max)
}
