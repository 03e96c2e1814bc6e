/// Length of the longest common subsequence, `O(|a|·|b|)` time and `O(|b|)` space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 against one reference.
pub fn rouge_l_single<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Best ROUGE-L F1 over the references.
pub fn rouge_l<T: PartialEq>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    references.iter().map(|r| rouge_l_single(candidate, r)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    pub(crate) fn brute_force_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for bits in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.len() > best && sub.iter().all(|x| it.any(|y| y == x)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn worked_examples() {
        assert_eq!(rouge_l(&toks("a red chair"), &[toks("a red chair")]), 1.0);
        let v = rouge_l(&toks("a b c d"), &[toks("a c d")]);
        assert!((v - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l(&toks("x y"), &[toks("a b")]), 0.0);
        assert_eq!(rouge_l(&toks(""), &[toks("a b")]), 0.0);
        assert_eq!(rouge_l(&toks("a b"), &[toks("z"), toks("a b"), toks("a")]), 1.0);
    }

    proptest! {
        #[test]
        fn lcs_matches_enumeration(a in prop::collection::vec(0u8..4, 0..=8), b in prop::collection::vec(0u8..4, 0..=8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_force_lcs(&a, &b));
            let f = rouge_l_single(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, rouge_l_single(&b, &a));
        }
    }
}
