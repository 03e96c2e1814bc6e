use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, FeedForward, Graph, LayerNorm, Linear, Matrix, MultiHeadAttention, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// width of the refined instance queries
    pub query_dim: usize,
    /// width of the segmenter's dense voxel features
    pub feature_dim: usize,
    pub beams: usize,
    pub length_penalty: f64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            layers: 1,
            heads: 4,
            ff_dim: 512,
            max_len: 48,
            vocab_size: 0,
            query_dim: 128,
            feature_dim: 128,
            beams: 5,
            length_penalty: 1.0,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        if self.vocab_size <= 4 || self.max_len == 0 || self.layers == 0 || self.beams == 0 {
            return Err(Error::Config("captioner needs a vocabulary, max_len, layers and beams".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm transformer decoder. The caption-aware query occupies position 0;
/// caption tokens follow, so output row `i` predicts token `i + 1` of the caption.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: CaptionerConfig,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
}

/// Graph handles of one decoder pass.
pub struct DecoderPass {
    pub logits: Var,
    pub hidden: Var,
    pub self_weights: Vec<Var>,
    pub cross_weights: Vec<Var>,
}

/// Cross-attention source: context rows plus which of them are real.
#[derive(Clone, Copy)]
pub struct ContextRef<'a> {
    pub rows: Var,
    pub mask: &'a AttentionMask,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &CaptionerConfig) -> Self {
        let d = cfg.embed_dim;
        let token_embed = store.add_normal(rng, format!("{name}.token_embed"), cfg.vocab_size, d, 0.1);
        let pos_embed = store.add_normal(rng, format!("{name}.pos_embed"), cfg.max_len, d, 0.02);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = format!("{name}.block{i}");
                Block {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{n}.self"), d, d, cfg.heads),
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{n}.cross"), d, d, cfg.heads),
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), d),
                    ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d, cfg.ff_dim),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), d);
        let head = Linear::new(store, rng, &format!("{name}.head"), d, cfg.vocab_size);
        Self { cfg: cfg.clone(), token_embed, pos_embed, blocks, final_ln, head }
    }

    /// Runs the decoder over `[query; inputs]`. Returns `1 + inputs.len()` rows.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Option<ContextRef>, inputs: &[u32]) -> Result<DecoderPass> {
        let rows = inputs.len() + 1;
        if rows > self.cfg.max_len {
            return Err(Error::Shape(format!("sequence of {rows} positions exceeds max_len {}", self.cfg.max_len)));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let mut x = query;
        if !inputs.is_empty() {
            let table = g.param(self.token_embed);
            let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
            let emb = g.gather(table, &ids);
            x = g.concat_rows(&[query, emb]);
        }
        let pos_table = g.param(self.pos_embed);
        let pos = g.slice_rows(pos_table, 0, rows);
        x = g.add(x, pos);
        let context = context.filter(|c| g.shape(c.rows).0 > 0);
        let mut self_weights = Vec::new();
        let mut cross_weights = Vec::new();
        for b in &self.blocks {
            let h = b.ln_self.forward(g, x);
            let a = b.self_attn.forward(g, h, h, &AttentionMask::Causal);
            self_weights.extend(a.weights);
            x = g.add(x, a.output);
            // an empty context contributes nothing
            if let Some(ctx) = context {
                let h = b.ln_cross.forward(g, x);
                let a = b.cross_attn.forward(g, h, ctx.rows, ctx.mask);
                cross_weights.extend(a.weights);
                x = g.add(x, a.output);
            }
            let h = b.ln_ffn.forward(g, x);
            let f = b.ffn.forward(g, h);
            x = g.add(x, f);
        }
        let hidden = self.final_ln.forward(g, x);
        let logits = self.head.forward(g, hidden);
        Ok(DecoderPass { logits, hidden, self_weights, cross_weights })
    }

    /// Teacher forcing on a target `t_1..t_T`: inputs are `[query, t_1..t_{T-1}]`,
    /// giving `T` logits rows (row `i` predicts `t_{i+1}`) and `T` hidden rows.
    pub fn teacher_forced(&self, g: &mut Graph, query: Var, context: Option<ContextRef>, tokens: &[u32]) -> Result<DecoderPass> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("teacher forcing needs at least one target token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        self.forward(g, query, context, &tokens[..tokens.len() - 1])
    }

    fn next_log_probs(&self, store: &ParamStore, query: &Matrix, context: Option<&(Matrix, AttentionMask)>, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let q = g.constant(query.clone());
        let ctx = context.map(|(m, mask)| (g.constant(m.clone()), mask));
        let pass = self.forward(&mut g, q, ctx.map(|(rows, mask)| ContextRef { rows, mask }), prefix)?;
        let logits = g.value(pass.logits);
        let row = logits.row(logits.rows - 1);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|x| x - lse).collect())
    }

    /// Hidden states of `tokens` under teacher forcing, outside any training graph.
    pub fn hidden_states(&self, store: &ParamStore, query: &Matrix, context: Option<&(Matrix, AttentionMask)>, tokens: &[u32]) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let q = g.constant(query.clone());
        let ctx = context.map(|(m, mask)| (g.constant(m.clone()), mask));
        let pass = self.teacher_forced(&mut g, q, ctx.map(|(rows, mask)| ContextRef { rows, mask }), tokens)?;
        Ok(g.value(pass.hidden).clone())
    }
}

/// A finished decode: generated tokens (ending in EOS unless `max_len` was hit)
/// and the teacher-forced hidden states of exactly those tokens.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub hidden: Matrix,
    pub score: f64,
}

pub fn decode_greedy(
    dec: &Decoder,
    store: &ParamStore,
    query: &Matrix,
    context: Option<&(Matrix, AttentionMask)>,
    max_len: usize,
) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let max_len = max_len.min(dec.cfg.max_len);
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let lp = dec.next_log_probs(store, query, context, &tokens)?;
        let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        score += lp[best];
        tokens.push(best as u32);
        if best as u32 == EOS {
            break;
        }
    }
    let hidden = dec.hidden_states(store, query, context, &tokens)?;
    Ok(Decoded { tokens, hidden, score })
}

struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Length-normalised beam search. Each step keeps the `beams` best extensions;
/// an EOS extension among them finishes its hypothesis. Search stops once
/// `beams` hypotheses have finished or `max_len` tokens were generated. Ties
/// prefer the lower beam index, then the lower token id.
pub fn decode_beam(
    dec: &Decoder,
    store: &ParamStore,
    query: &Matrix,
    context: Option<&(Matrix, AttentionMask)>,
    beams: usize,
    max_len: usize,
) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    if beams == 0 {
        return Err(Error::Config("beam count must be positive".into()));
    }
    let max_len = max_len.min(dec.cfg.max_len);
    let alpha = dec.cfg.length_penalty;
    let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() && finished.len() < beams {
        // (total, beam, token logp, token)
        let mut cands: Vec<(f64, usize, f64, u32)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            let lp = dec.next_log_probs(store, query, context, &h.tokens)?;
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (h.score + l, b, l, t as u32)));
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(y.2.partial_cmp(&x.2).unwrap_or(Ordering::Equal))
                .then(x.3.cmp(&y.3))
        });
        let mut next = Vec::new();
        for &(score, b, _, t) in cands.iter().take(beams) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            if t == EOS || tokens.len() >= max_len {
                finished.push(Hyp { tokens, score });
            } else {
                next.push(Hyp { tokens, score });
            }
        }
        live = next;
    }
    let best = finished
        .into_iter()
        .chain(live)
        .fold(None::<(f64, Hyp)>, |acc, h| {
            let s = normalized(h.score, h.tokens.len(), alpha);
            match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, h)),
            }
        })
        .map(|(_, h)| h)
        .expect("beam search always yields a hypothesis");
    let hidden = dec.hidden_states(store, query, context, &best.tokens)?;
    Ok(Decoded { tokens: best.tokens, hidden, score: best.score })
}
