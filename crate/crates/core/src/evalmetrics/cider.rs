use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

pub const SIGMA: f64 = 6.0;
pub const MAX_N: usize = 4;
pub const SCALE: f64 = 10.0;

type Ngram = Vec<u32>;

/// CIDEr-R scorer: TF-IDF n-gram cosine for `n = 1..=4` with a Gaussian length penalty and a
/// repetition penalty in place of count clipping. IDF comes from the reference sets only,
/// one document per scored item.
#[derive(Debug, Clone)]
pub struct CiderR {
    vocab: HashMap<String, u32>,
    doc_freq: HashMap<Ngram, usize>,
    num_docs: usize,
    pub sigma: f64,
}

fn ngram_counts(ids: &[u32], n: usize) -> BTreeMap<Ngram, f64> {
    let mut out = BTreeMap::new();
    for w in ids.windows(n) {
        *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
    }
    out
}

impl CiderR {
    pub fn new(reference_sets: &[Vec<Vec<String>>]) -> Self {
        // ids follow word order, so every sum below runs in an order independent of the pair list
        let words: BTreeSet<&String> = reference_sets.iter().flatten().flatten().collect();
        let vocab: HashMap<String, u32> = words.into_iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut doc_freq: HashMap<Ngram, usize> = HashMap::new();
        for refs in reference_sets {
            let mut seen: HashSet<Ngram> = HashSet::new();
            for r in refs {
                let ids: Vec<u32> = r.iter().map(|w| vocab[w]).collect();
                for n in 1..=MAX_N {
                    seen.extend(ids.windows(n).map(<[u32]>::to_vec));
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_default() += 1;
            }
        }
        Self { vocab, doc_freq, num_docs: reference_sets.len(), sigma: SIGMA }
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    fn idf(&self, g: &[u32]) -> f64 {
        let df = self.doc_freq.get(g).copied().unwrap_or(0);
        (self.num_docs.max(1) as f64).ln() - (df.max(1) as f64).ln()
    }

    /// Words outside the reference vocabulary get fresh ids local to this call.
    fn ids(&self, words: &[String], extra: &mut HashMap<String, u32>) -> Vec<u32> {
        words
            .iter()
            .map(|w| match self.vocab.get(w) {
                Some(&id) => id,
                None => {
                    let next = (self.vocab.len() + extra.len()) as u32;
                    *extra.entry(w.clone()).or_insert(next)
                }
            })
            .collect()
    }

    fn tfidf(&self, ids: &[u32], n: usize) -> (BTreeMap<Ngram, f64>, f64) {
        let mut v = ngram_counts(ids, n);
        for (g, x) in v.iter_mut() {
            *x *= self.idf(g);
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    }

    /// Mean over references, in `[0, SCALE]`.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if candidate.is_empty() || references.is_empty() {
            return 0.0;
        }
        let mut extra = HashMap::new();
        let c = self.ids(candidate, &mut extra);
        let cand_vecs: Vec<_> = (1..=MAX_N).map(|n| self.tfidf(&c, n)).collect();
        let mut total = 0.0;
        for r in references {
            let s = self.ids(r, &mut extra);
            let mut sim = 0.0;
            for (k, (vc, nc)) in cand_vecs.iter().enumerate() {
                let (vs, ns) = self.tfidf(&s, k + 1);
                if *nc > 0.0 && ns > 0.0 {
                    let dot: f64 = vc.iter().filter_map(|(g, x)| vs.get(g).map(|y| x * y)).sum();
                    sim += dot / (nc * ns);
                }
            }
            sim /= MAX_N as f64;
            total += SCALE * length_penalty(c.len(), s.len(), self.sigma) * repetition_penalty(&c, &s) * sim;
        }
        total / references.len() as f64
    }
}

/// `exp(-(l_c - l_s)² / (2σ²))`.
pub fn length_penalty(cand_len: usize, ref_len: usize, sigma: f64) -> f64 {
    let d = cand_len as f64 - ref_len as f64;
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// `exp(-excess / l_c)`, where `excess` counts candidate repetitions of a word beyond
/// `max(1, its count in the reference)`. Equals 1 when the candidate repeats nothing more
/// often than the reference does.
pub fn repetition_penalty(candidate: &[u32], reference: &[u32]) -> f64 {
    let mut counts: HashMap<u32, (usize, usize)> = HashMap::new();
    for &w in candidate {
        counts.entry(w).or_default().0 += 1;
    }
    for &w in reference {
        if let Some(e) = counts.get_mut(&w) {
            e.1 += 1;
        }
    }
    let excess: usize = counts.values().map(|&(c, s)| c.saturating_sub(s.max(1))).sum();
    (-(excess as f64) / candidate.len() as f64).exp()
}

/// Scores each `(candidate, references)` pair with IDF built from all reference sets.
pub fn cider_r(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<f64> {
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let scorer = CiderR::new(&refs);
    pairs.iter().map(|(c, r)| scorer.score(c, r)).collect()
}
