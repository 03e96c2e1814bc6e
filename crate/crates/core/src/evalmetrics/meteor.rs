use rust_stemmers::{Algorithm, Stemmer};

pub const ALPHA: f64 = 0.9;
pub const GAMMA: f64 = 0.5;
pub const BETA: f64 = 3.0;

/// Candidate-to-reference unigram alignment, as `(candidate position, reference position)`
/// sorted by candidate position.
pub type Alignment = Vec<(usize, usize)>;

/// Exact matches first, then stem matches among the leftovers. Within each stage a candidate
/// token prefers the reference slot that extends the previous pair into the same chunk, and
/// otherwise the free slot opening the longest run of agreeing tokens (earliest on ties).
pub fn align(candidate: &[String], reference: &[String], stemmer: &Stemmer) -> Alignment {
    let cand_stems: Vec<String> = candidate.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stems: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let mut ref_used = vec![false; reference.len()];
    let mut of_cand: Vec<Option<usize>> = vec![None; candidate.len()];
    let stages: [(&[String], &[String]); 2] = [(candidate, reference), (&cand_stems, &ref_stems)];
    for (c, r) in stages {
        for i in 0..c.len() {
            if of_cand[i].is_some() {
                continue;
            }
            let free = |j: usize| !ref_used[j] && r[j] == c[i];
            let continued = i.checked_sub(1).and_then(|p| of_cand[p]).map(|j| j + 1).filter(|&j| j < r.len() && free(j));
            let run = |j: usize| (0..).take_while(|&k| i + k < c.len() && j + k < r.len() && of_cand[i + k].is_none() && !ref_used[j + k] && c[i + k] == r[j + k]).count();
            let opening = (0..r.len()).filter(|&j| free(j)).fold(None, |best: Option<(usize, usize)>, j| {
                let len = run(j);
                match best {
                    Some((_, l)) if l >= len => best,
                    _ => Some((j, len)),
                }
            });
            if let Some(j) = continued.or(opening.map(|(j, _)| j)) {
                ref_used[j] = true;
                of_cand[i] = Some(j);
            }
        }
    }
    of_cand.into_iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect()
}

/// Runs of consecutive candidate positions mapped to consecutive reference positions.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
}

/// `F_mean · (1 − γ·(chunks/matches)^β)` with `F_mean = PR / (αP + (1−α)R)`.
pub fn meteor_from_counts(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks as f64 / m).powf(BETA);
    fmean * (1.0 - penalty)
}

/// Exact and stem matching only; synonym matching is not available.
pub struct MeteorLite {
    stemmer: Stemmer,
}

impl Default for MeteorLite {
    fn default() -> Self {
        Self { stemmer: Stemmer::create(Algorithm::English) }
    }
}

impl MeteorLite {
    pub fn single(&self, candidate: &[String], reference: &[String]) -> f64 {
        let a = align(candidate, reference, &self.stemmer);
        meteor_from_counts(a.len(), count_chunks(&a), candidate.len(), reference.len())
    }

    /// Best score over the references.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        references.iter().map(|r| self.single(candidate, r)).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_has_one_chunk() {
        let m = MeteorLite::default();
        for s in ["a chair", "a wooden chair with four legs", "x"] {
            let n = t(s).len() as f64;
            let v = m.score(&t(s), &[t(s)]);
            assert!((v - (1.0 - 0.5 / n.powi(3))).abs() < 1e-12, "{s}: {v}");
        }
    }

    #[test]
    fn hand_computed_values() {
        let m = MeteorLite::default();
        assert_eq!(m.score(&t("x y"), &[t("a b")]), 0.0);
        // P=1, R=1/2, F=10·(1/2)/(1/2+9)=10/19, one chunk of two
        let short = m.score(&t("a b"), &[t("a b c d")]);
        assert!((short - 10.0 / 19.0 * (1.0 - 0.5 / 8.0)).abs() < 1e-12);
        // P=1/2, R=1, F=10·(1/2)/(1+9/2)=10/11
        let long = m.score(&t("a b c d"), &[t("a b")]);
        assert!((long - 10.0 / 11.0 * (1.0 - 0.5 / 8.0)).abs() < 1e-12);
        assert!(short < long);
        // swapped order: two chunks of one
        let swapped = m.score(&t("b a"), &[t("a b")]);
        assert!((swapped - (1.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn stems_match_after_exact_words() {
        let m = MeteorLite::default();
        let a = align(&t("chairs with legs"), &t("a chair with leg"), &m.stemmer);
        assert_eq!(a, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(count_chunks(&a), 1);
        // the exact "chair" claims the reference slot before the stem stage sees "chairs"
        let a = align(&t("chairs chair"), &t("chair"), &m.stemmer);
        assert_eq!(a, vec![(1, 0)]);
    }

    #[test]
    fn repeated_words_prefer_contiguous_slots() {
        let m = MeteorLite::default();
        let a = align(&t("the red the blue"), &t("the blue the red"), &m.stemmer);
        assert_eq!(a, vec![(0, 2), (1, 3), (2, 0), (3, 1)]);
        assert_eq!(count_chunks(&a), 2);
        let a = align(&t("a red a red"), &t("a red a red"), &m.stemmer);
        assert_eq!(count_chunks(&a), 1);
    }
}
