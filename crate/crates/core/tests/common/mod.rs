#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Deserialize)]
pub struct CiderFixturePair {
    pub candidate: String,
    pub references: Vec<String>,
    pub expected: f64,
}

#[derive(Debug, Deserialize)]
pub struct CiderFixture {
    pub sigma: f64,
    pub max_n: usize,
    pub scale: f64,
    pub pairs: Vec<CiderFixturePair>,
}

pub fn cider_fixture() -> CiderFixture {
    serde_json::from_str(&std::fs::read_to_string(fixture("cider_r_pairs.json")).unwrap()).unwrap()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_force_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<u32> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut k = 0;
        for &y in b {
            if k < sub.len() && sub[k] == y {
                k += 1;
            }
        }
        if k == sub.len() {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(c: &[u32], r: &[u32]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = brute_force_lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, q) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * q / (p + q)
}

/// Minimum total cost over every injection of the smaller side into the larger.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let p = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    fn go(cost: &[Vec<f64>], i: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let rows = if transpose { cost[0].len() } else { cost.len() };
        if i == rows {
            return 0.0;
        }
        let cols = used.len();
        let mut best = f64::INFINITY;
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                let c = if transpose { cost[j][i] } else { cost[i][j] };
                best = best.min(c + go(cost, i + 1, used, transpose));
                used[j] = false;
            }
        }
        best
    }
    if p <= g {
        go(cost, 0, &mut vec![false; g], false)
    } else {
        go(cost, 0, &mut vec![false; p], true)
    }
}

fn grams(toks: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for i in 0..=toks.len() - n {
            *m.entry(toks[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// String-keyed CIDEr-R, written from the definition independently of the library scorer.
pub fn oracle_cider(pairs: &[(Vec<String>, Vec<Vec<String>>)], sigma: f64) -> Vec<f64> {
    let n_docs = pairs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for (_, refs) in pairs {
        let mut seen = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(grams(r, n).into_keys());
            }
        }
        for k in seen {
            *df.entry(k).or_insert(0.0) += 1.0;
        }
    }
    let weigh = |toks: &[String], n: usize| -> (BTreeMap<String, f64>, f64) {
        let v: BTreeMap<String, f64> = grams(toks, n)
            .into_iter()
            .map(|(k, c)| {
                let d = df.get(&k).copied().unwrap_or(0.0).max(1.0);
                let w = c * (n_docs.max(1.0).ln() - d.ln());
                (k, w)
            })
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };
    pairs
        .iter()
        .map(|(c, refs)| {
            if c.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for s in refs {
                let mut sim = 0.0;
                for n in 1..=4 {
                    let (vc, nc) = weigh(c, n);
                    let (vs, ns) = weigh(s, n);
                    if nc > 0.0 && ns > 0.0 {
                        let dot: f64 = vc.iter().map(|(k, x)| x * vs.get(k).unwrap_or(&0.0)).sum();
                        sim += dot / (nc * ns);
                    }
                }
                let dl = c.len() as f64 - s.len() as f64;
                let lp = (-dl * dl / (2.0 * sigma * sigma)).exp();
                let mut excess = 0.0;
                let uniq: BTreeSet<&String> = c.iter().collect();
                for w in uniq {
                    let in_c = c.iter().filter(|x| *x == w).count() as f64;
                    let in_s = s.iter().filter(|x| *x == w).count() as f64;
                    excess += (in_c - in_s.max(1.0)).max(0.0);
                }
                let rp = (-excess / c.len() as f64).exp();
                total += 10.0 * lp * rp * sim / 4.0;
            }
            total / refs.len() as f64
        })
        .collect()
}

use mlcap::captioning::CaptionerConfig;
use mlcap::consistency::ProjectorConfig;
use mlcap::corpus::CorpusSpec;
use mlcap::harness::RunConfig;
use mlcap::segmentation::SegmenterConfig;

/// Small dimensions everywhere so whole runs finish in seconds.
pub fn micro_config(out_dir: &std::path::Path, num_scenes: usize) -> RunConfig {
    RunConfig {
        out_dir: out_dir.to_path_buf(),
        seg_epochs: 3,
        cap_epochs: 3,
        batch_size_scenes: 2,
        beams: 2,
        train_fraction: 0.6,
        val_fraction: 0.2,
        corpus: CorpusSpec { num_scenes, objects_per_scene: [2, 3], ..Default::default() },
        segmenter: SegmenterConfig { num_queries: 10, dim: 16, heads: 2, ff_dim: 32, refine_rounds: 1, ..Default::default() },
        captioner: CaptionerConfig { embed_dim: 16, heads: 2, ff_dim: 32, query_dim: 16, feature_dim: 16, max_len: 40, ..Default::default() },
        projector: ProjectorConfig { embed_dim: 8, heads: 2, ff_dim: 16, num_semantic_classes: 8, max_len: 40, ..Default::default() },
        ..Default::default()
    }
}
