//! Incremental decoding with a key/value cache and grammar-restricted sampling.

use rand::Rng;

use super::linalg::{dot, vec_mat};
use super::transformer::{gelu, PositionMap};
use super::{restricted_log_softmax, Head, Policy};
use crate::error::{Error, Result};
use crate::tokenizer::{
    allowed_tokens, target_role, Direction, GrammarState, TokenId, TokenSeq, BOX_TOKENS,
    MAX_LAYOUT_BOXES, VOCAB_SIZE,
};
use crate::world::CELLS;

const LN_EPS: f64 = 1e-5;

/// Per-layer keys and values for the positions consumed so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    rows_of: PositionMap,
    /// Final normalized hidden state of the last consumed position.
    last_hidden: Vec<f64>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax over the allowed set; ties go to the lowest token id.
    Greedy,
    Sample { temperature: f64 },
}

/// Target tokens of one decode (ending with `EOS`) and their log-probabilities
/// under the grammar-restricted, renormalized distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

fn max_target_len(direction: Direction) -> usize {
    match direction {
        Direction::Und => BOX_TOKENS * MAX_LAYOUT_BOXES + 1,
        Direction::Gen => CELLS + 1,
    }
}

fn layer_norm_vec(x: &[f64], gain: &[f64], bias: &[f64], y: &mut [f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        y[j] = (x[j] - mean) * r * gain[j] + bias[j];
    }
}

impl Policy {
    /// Runs the prompt through the batched forward pass and keeps its keys
    /// and values.
    pub fn prefill(&self, ids: &[TokenId]) -> Result<KvCache> {
        let cfg = &self.arch.config;
        let d = cfg.d_model;
        let fwd = self.forward_rows(ids, Vec::new())?;
        let t = ids.len();
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        for layer in &fwd.layers {
            let mut k = vec![0.0; cfg.context * d];
            let mut v = vec![0.0; cfg.context * d];
            for i in 0..t {
                let row = &layer.qkv[i * 3 * d..(i + 1) * 3 * d];
                k[i * d..(i + 1) * d].copy_from_slice(&row[d..2 * d]);
                v[i * d..(i + 1) * d].copy_from_slice(&row[2 * d..]);
            }
            keys.push(k);
            values.push(v);
        }
        Ok(KvCache {
            keys,
            values,
            len: t,
            rows_of: PositionMap::for_tokens(ids),
            last_hidden: fwd.hidden[(t - 1) * d..].to_vec(),
        })
    }

    /// Consumes one more token.
    pub fn step(&self, cache: &mut KvCache, token: TokenId) -> Result<()> {
        let cfg = &self.arch.config;
        let off = &self.arch.offsets;
        let p = &self.params;
        let (d, f, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let pos = cache.len;
        let row = cache.rows_of.row(pos);
        if row >= cfg.context {
            return Err(Error::Length { len: row + 1, context: cfg.context });
        }
        if token as usize >= VOCAB_SIZE {
            return Err(Error::Contract(format!("token id {token} outside vocabulary")));
        }
        let mut x: Vec<f64> = (0..d)
            .map(|j| p[off.tok_emb + token as usize * d + j] + p[off.pos_emb + row * d + j])
            .collect();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut att = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut u = vec![0.0; f];
        let mut scores = vec![0.0; pos + 1];
        for (l, lo) in off.layers.iter().enumerate() {
            layer_norm_vec(&x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], &mut h);
            vec_mat(&h, &p[lo.wqkv..lo.wqkv + d * 3 * d], &p[lo.bqkv..][..3 * d], &mut qkv);
            let (keys, values) = (&mut cache.keys[l], &mut cache.values[l]);
            keys[pos * d..(pos + 1) * d].copy_from_slice(&qkv[d..2 * d]);
            values[pos * d..(pos + 1) * d].copy_from_slice(&qkv[2 * d..]);
            for hd in 0..nh {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=pos {
                    let s = dot(q, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[hd * dh..(hd + 1) * dh];
                out.fill(0.0);
                for j in 0..=pos {
                    let w = scores[j] / sum;
                    let vrow = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (o, &v) in out.iter_mut().zip(vrow) {
                        *o += w * v;
                    }
                }
            }
            vec_mat(&att, &p[lo.wo..lo.wo + d * d], &p[lo.bo..][..d], &mut y);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            layer_norm_vec(&x, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], &mut h);
            vec_mat(&h, &p[lo.w1..lo.w1 + d * f], &p[lo.b1..][..f], &mut u);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            vec_mat(&u, &p[lo.w2..lo.w2 + f * d], &p[lo.b2..][..d], &mut y);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
        layer_norm_vec(&x, &p[off.lnf_g..][..d], &p[off.lnf_b..][..d], &mut cache.last_hidden);
        cache.len = pos + 1;
        Ok(())
    }

    /// Scores for the next token after everything in `cache`.
    pub fn next_logits(&self, cache: &KvCache, head: Head) -> [f64; VOCAB_SIZE] {
        let d = self.arch.config.d_model;
        let (w, b) = self.arch.offsets.head(head);
        let mut out = [0.0; VOCAB_SIZE];
        vec_mat(
            &cache.last_hidden,
            &self.params[w..w + d * VOCAB_SIZE],
            &self.params[b..b + VOCAB_SIZE],
            &mut out,
        );
        out
    }

    fn decode_from<R: Rng + ?Sized>(
        &self,
        mut cache: KvCache,
        direction: Direction,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Sampled> {
        let head = Head::for_role(target_role(direction)).expect("targets have a head");
        let mut state = GrammarState::start(direction);
        let mut out = Sampled {
            tokens: Vec::new(),
            logprobs: Vec::new(),
        };
        loop {
            let logits = self.next_logits(&cache, head);
            let mask = allowed_tokens(state);
            let (token, logprob) = match decoding {
                Decoding::Greedy => {
                    let lp = restricted_log_softmax(&logits, &mask, 1.0);
                    let mut best = None;
                    for v in 0..VOCAB_SIZE {
                        if mask[v] && best.is_none_or(|b: usize| logits[v] > logits[b]) {
                            best = Some(v);
                        }
                    }
                    let v = best.expect("grammar always allows a token");
                    (v as TokenId, lp[v])
                }
                Decoding::Sample { temperature } => {
                    let lp = restricted_log_softmax(&logits, &mask, temperature);
                    let draw: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = None;
                    for v in 0..VOCAB_SIZE {
                        if mask[v] {
                            acc += lp[v].exp();
                            chosen = Some(v);
                            if draw < acc {
                                break;
                            }
                        }
                    }
                    let v = chosen.expect("grammar always allows a token");
                    (v as TokenId, lp[v])
                }
            };
            out.tokens.push(token);
            out.logprobs.push(logprob);
            state = state.advance(token);
            if state.is_done() {
                return Ok(out);
            }
            self.step(&mut cache, token)?;
        }
    }
}

fn check_prompt(policy: &Policy, prompt: &TokenSeq, direction: Direction, decoding: Decoding) -> Result<()> {
    let len = PositionMap::for_tokens(&prompt.ids).row(prompt.len() + max_target_len(direction) - 1) + 1;
    let context = policy.config().context;
    if len > context {
        return Err(Error::Length { len, context });
    }
    if prompt.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
    }
    Ok(())
}

/// Decodes one target region after `prompt` under the direction's grammar.
pub fn sample<R: Rng + ?Sized>(
    policy: &Policy,
    prompt: &TokenSeq,
    direction: Direction,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Sampled> {
    check_prompt(policy, prompt, direction, decoding)?;
    let cache = policy.prefill(&prompt.ids)?;
    policy.decode_from(cache, direction, decoding, rng)
}

/// `n` independent decodes sharing one prompt prefill.
pub fn sample_group<R: Rng + ?Sized>(
    policy: &Policy,
    prompt: &TokenSeq,
    direction: Direction,
    decoding: Decoding,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sampled>> {
    check_prompt(policy, prompt, direction, decoding)?;
    let cache = policy.prefill(&prompt.ids)?;
    (0..n)
        .map(|_| policy.decode_from(cache.clone(), direction, decoding, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{build_prompt, decode_layout, encode_image, with_targets, DecodeMode};
    use crate::world::GridImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Policy {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        Policy::new(cfg, 3).unwrap()
    }

    #[test]
    fn incremental_matches_full_forward() {
        let policy = small();
        let prompt = build_prompt(Direction::Und, &encode_image(&GridImage::blank())[..40]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample(&policy, &prompt, Direction::Und, Decoding::Sample { temperature: 1.0 }, &mut rng).unwrap();
        let seq = with_targets(&prompt, Direction::Und, &s.tokens);
        let fwd = policy.forward(&seq).unwrap();
        let masks = crate::model::target_masks(Direction::Und, &s.tokens).unwrap();
        for (r, mask) in masks.iter().enumerate() {
            let lp = restricted_log_softmax(fwd.logits.row(r), mask, 1.0);
            let y = s.tokens[r] as usize;
            assert!((lp[y] - s.logprobs[r]).abs() < 1e-10, "row {r}");
        }
    }

    #[test]
    fn incremental_matches_full_forward_for_generation() {
        let policy = small();
        use crate::world::{BoxSpec, Layout};
        let layout = Layout::new(vec![BoxSpec::new(2, 1, 1, 5, 4), BoxSpec::new(5, 8, 9, 15, 16)]);
        let layout = crate::tokenizer::encode_layout(&layout).unwrap();
        let prompt = build_prompt(Direction::Gen, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample(&policy, &prompt, Direction::Gen, Decoding::Sample { temperature: 1.0 }, &mut rng).unwrap();
        let seq = with_targets(&prompt, Direction::Gen, &s.tokens);
        let fwd = policy.forward(&seq).unwrap();
        let masks = crate::model::target_masks(Direction::Gen, &s.tokens).unwrap();
        for (r, mask) in masks.iter().enumerate() {
            let lp = restricted_log_softmax(fwd.logits.row(r), mask, 1.0);
            let y = s.tokens[r] as usize;
            assert!((lp[y] - s.logprobs[r]).abs() < 1e-10, "row {r}");
        }
    }

    #[test]
    fn samples_parse_strictly() {
        let policy = small();
        let prompt = build_prompt(Direction::Und, &encode_image(&GridImage::blank()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in sample_group(&policy, &prompt, Direction::Und, Decoding::Sample { temperature: 1.5 }, 20, &mut rng).unwrap() {
            assert!(decode_layout(&s.tokens, DecodeMode::Strict).is_ok());
            assert!(s.logprobs.iter().all(|&lp| lp <= 0.0 && lp.is_finite()));
        }
    }

    #[test]
    fn cold_temperature_equals_greedy() {
        let policy = small();
        let prompt = build_prompt(Direction::Und, &encode_image(&GridImage::blank()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let greedy = sample(&policy, &prompt, Direction::Und, Decoding::Greedy, &mut rng).unwrap();
        let cold = sample(&policy, &prompt, Direction::Und, Decoding::Sample { temperature: 1e-4 }, &mut rng).unwrap();
        assert_eq!(greedy.tokens, cold.tokens);
    }

    #[test]
    fn rejects_bad_temperature() {
        let policy = small();
        let prompt = build_prompt(Direction::Gen, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample(&policy, &prompt, Direction::Gen, Decoding::Sample { temperature: 0.0 }, &mut rng).is_err());
    }
}
