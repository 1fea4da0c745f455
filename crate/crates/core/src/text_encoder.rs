//! Small BERT-style encoder: learned token and position embeddings, post-norm
//! transformer blocks, and the final hidden state at the `[CLS]` position as
//! the review embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, param_group};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::TokenizedReview;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 2000,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 16,
            dropout: 0.1,
        }
    }
}

impl TextEncoderConfig {
    /// bert-base dimensions: 768 wide, 12 layers, 12 heads, 3072 FFN, 128
    /// tokens.
    pub fn paper_scale() -> Self {
        TextEncoderConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_len: 128,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_len,
        ];
        if extents.contains(&0) {
            return Err(Error::Config(format!(
                "text encoder extents must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the 4 reserved ids".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "text dropout {} is outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

param_group! {
    /// One transformer block. Projections are `[d_model, d_model]` and act on
    /// row vectors (`x . W`).
    pub struct EncoderLayerParams {
        wq, wk, wv, wo,
        ff1_w, ff1_b, ff2_w, ff2_b,
        ln1_gamma, ln1_beta, ln2_gamma, ln2_beta,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams<P> {
    pub token_embedding: P,
    pub position_embedding: P,
    pub layers: Vec<EncoderLayerParams<P>>,
}

impl<P> TextEncoderParams<P> {
    pub fn map<'s, Q>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P) -> Q) -> TextEncoderParams<Q> {
        TextEncoderParams {
            token_embedding: f(nn::join(prefix, "token_embedding"), &self.token_embedding),
            position_embedding: f(nn::join(prefix, "position_embedding"), &self.position_embedding),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&nn::join(prefix, &format!("layer{i}")), f))
                .collect(),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(nn::join(prefix, "token_embedding"), &self.token_embedding);
        f(nn::join(prefix, "position_embedding"), &self.position_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&nn::join(prefix, &format!("layer{i}")), f);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut P)) {
        f(nn::join(prefix, "token_embedding"), &mut self.token_embedding);
        f(nn::join(prefix, "position_embedding"), &mut self.position_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&nn::join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Embeddings ~ N(0, 0.02), projections Glorot-uniform, FFN biases 0,
/// layer-norm gains 1 and biases 0.
pub fn init_text_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &TextEncoderConfig,
    rng: &mut R,
) -> Result<TextEncoderParams<Tensor<T>>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let token_embedding = nn::normal([cfg.vocab_size, d], 0.02, rng);
    let position_embedding = nn::normal([cfg.max_len, d], 0.02, rng);
    let layers = (0..cfg.n_layers)
        .map(|_| EncoderLayerParams {
            wq: nn::glorot_uniform(d, d, rng),
            wk: nn::glorot_uniform(d, d, rng),
            wv: nn::glorot_uniform(d, d, rng),
            wo: nn::glorot_uniform(d, d, rng),
            ff1_w: nn::glorot_uniform(d, cfg.d_ff, rng),
            ff1_b: Tensor::zeros([cfg.d_ff]),
            ff2_w: nn::glorot_uniform(cfg.d_ff, d, rng),
            ff2_b: Tensor::zeros([d]),
            ln1_gamma: Tensor::ones([d]),
            ln1_beta: Tensor::zeros([d]),
            ln2_gamma: Tensor::ones([d]),
            ln2_beta: Tensor::zeros([d]),
        })
        .collect();
    Ok(TextEncoderParams {
        token_embedding,
        position_embedding,
        layers,
    })
}

pub struct BlockOutput {
    pub out: Var,
    /// Attention probabilities per head, each `[L, L]` (query rows).
    pub attention: Vec<Var>,
}

/// One post-norm transformer block over `x: [L, d_model]`.
///
/// Keys at positions with `mask == 0` receive a score of -1e9 before the
/// softmax, so they get exactly zero attention weight.
pub fn encoder_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    mask: &[u8],
    layer: &EncoderLayerParams<Var>,
    cfg: &TextEncoderConfig,
    training: bool,
    rng: &mut R,
) -> Result<BlockOutput> {
    let (len, d) = match tape.shape(x) {
        &[l, d] => (l, d),
        other => {
            return Err(Error::Dimension(format!(
                "encoder block expects [L, d_model], got {other:?}"
            )))
        }
    };
    if d != cfg.d_model || mask.len() != len {
        return Err(Error::Dimension(format!(
            "encoder block: input [{len}, {d}] with mask of length {} for d_model {}",
            mask.len(),
            cfg.d_model
        )));
    }
    let mut bias = Vec::with_capacity(len * len);
    for _ in 0..len {
        bias.extend(mask.iter().map(|&m| {
            if m == 0 {
                T::from_f64_lossy(MASKED_SCORE)
            } else {
                T::zero()
            }
        }));
    }
    let bias = tape.constant(Tensor::new([len, len], bias)?);

    let q = tape.matmul(x, layer.wq)?;
    let k = tape.matmul(x, layer.wk)?;
    let v = tape.matmul(x, layer.wv)?;
    let dh = cfg.d_head();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attention = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores)?;
        attention.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads)?
    };
    let attn = tape.matmul(merged, layer.wo)?;
    let attn = tape.dropout(attn, cfg.dropout, training, rng)?;
    let res = tape.add(x, attn)?;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let h1 = tape.layer_norm(res, layer.ln1_gamma, layer.ln1_beta, eps)?;

    let ff = tape.matmul(h1, layer.ff1_w)?;
    let ff = tape.add_bias(ff, layer.ff1_b)?;
    let ff = tape.relu(ff)?;
    let ff = tape.matmul(ff, layer.ff2_w)?;
    let ff = tape.add_bias(ff, layer.ff2_b)?;
    let ff = tape.dropout(ff, cfg.dropout, training, rng)?;
    let res = tape.add(h1, ff)?;
    let out = tape.layer_norm(res, layer.ln2_gamma, layer.ln2_beta, eps)?;
    Ok(BlockOutput { out, attention })
}

/// Embeds a tokenized review and returns the final hidden state at the
/// `[CLS]` position, length `d_model`.
pub fn encode_text<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    params: &TextEncoderParams<Var>,
    cfg: &TextEncoderConfig,
    review: &TokenizedReview,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if review.ids.len() != cfg.max_len || review.mask.len() != cfg.max_len {
        return Err(Error::Dimension(format!(
            "review has {} ids but the encoder expects {}",
            review.ids.len(),
            cfg.max_len
        )));
    }
    let tokens = tape.embedding(params.token_embedding, &review.ids)?;
    let positions: Vec<usize> = (0..cfg.max_len).collect();
    let pos = tape.embedding(params.position_embedding, &positions)?;
    let mut x = tape.add(tokens, pos)?;
    for layer in &params.layers {
        x = encoder_block(tape, x, &review.mask, layer, cfg, training, rng)?.out;
    }
    tape.select_row(x, 0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check_reference;
    use crate::text::{CLS, PAD, SEP};

    fn tiny() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_len: 6,
            dropout: 0.1,
        }
    }

    fn review(ids: &[usize], max_len: usize) -> TokenizedReview {
        let mut full = ids.to_vec();
        full.resize(max_len, PAD);
        TokenizedReview {
            mask: (0..max_len).map(|i| u8::from(i < ids.len())).collect(),
            ids: full,
            true_length: ids.len(),
        }
    }

    fn params(seed: u64) -> TextEncoderParams<Tensor<f32>> {
        init_text_encoder(&tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn encode(p: &TextEncoderParams<Tensor<f32>>, r: &TokenizedReview) -> Tensor<f32> {
        let mut tape = Tape::new();
        let bound = p.map("", &mut |_, t| tape.param(t));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode_text(&mut tape, &bound, &tiny(), r, false, &mut rng).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn init_is_deterministic_and_gains_start_at_one() {
        assert_eq!(params(3), params(3));
        assert_ne!(params(3), params(4));
        let p = params(3);
        for l in &p.layers {
            assert!(l.ln1_gamma.data().iter().all(|&g| g == 1.0));
            assert!(l.ln2_gamma.data().iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn glorot_weights_are_centred() {
        let cfg = TextEncoderConfig {
            d_model: 100,
            n_heads: 1,
            n_layers: 1,
            ..tiny()
        };
        let p: TextEncoderParams<Tensor<f64>> =
            init_text_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = p.layers[0].wq.data();
        assert_eq!(w.len(), 10_000);
        let bound = (6.0f64 / 200.0).sqrt();
        let sigma = bound / 3f64.sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma / (w.len() as f64).sqrt(), "{mean}");
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn config_validation() {
        assert!(TextEncoderConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(TextEncoderConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(TextEncoderConfig::default().validate().is_ok());
        assert!(TextEncoderConfig::paper_scale().validate().is_ok());
    }

    #[test]
    fn singleton_attention_is_exactly_one() {
        let cfg = TextEncoderConfig {
            n_heads: 1,
            ..tiny()
        };
        let p: TextEncoderParams<Tensor<f32>> =
            init_text_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let bound = p.map("", &mut |_, t| tape.param(t));
        let x = tape.constant(nn::normal([1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encoder_block(&mut tape, x, &[1], &bound.layers[0], &cfg, false, &mut rng).unwrap();
        assert_eq!(tape.value(out.attention[0]).data(), &[1.0]);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let p = params(9);
        let mut tape = Tape::new();
        let bound = p.map("", &mut |_, t| tape.param(t));
        let row = nn::normal::<f32, _>([1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut data = row.data().to_vec();
        data.extend_from_slice(row.data());
        let x = tape.constant(Tensor::new([2, 8], data).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encoder_block(&mut tape, x, &[1, 1], &bound.layers[0], &tiny(), false, &mut rng)
            .unwrap();
        let v = tape.value(out.out).data();
        assert_eq!(&v[..8], &v[8..]);
    }

    #[test]
    fn output_is_d_model_and_pad_ids_are_isolated() {
        let p = params(1);
        let r = review(&[CLS, 5, 7, SEP], 6);
        let a = encode(&p, &r);
        assert_eq!(a.shape(), &[8]);

        let mut changed = r.clone();
        changed.ids[5] = 11; // still masked out
        let b = encode(&p, &changed);
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
        // eval mode is bitwise deterministic
        assert_eq!(encode(&p, &r), a);

        let mut bad = r.clone();
        bad.ids[1] = 12;
        let mut tape = Tape::new();
        let bound = p.map("", &mut |_, t| tape.param(t));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            encode_text(&mut tape, &bound, &tiny(), &bad, false, &mut rng),
            Err(Error::Index { id: 12, .. })
        ));
        let short = review(&[CLS, SEP], 4);
        assert!(matches!(
            encode_text(&mut tape, &bound, &tiny(), &short, false, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let p = params(4);
        let r = review(&[CLS, 4, 9, 2, SEP], 6);
        let mut tape = Tape::new();
        let bound = p.map("", &mut |_, t| tape.param(t));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode_text(&mut tape, &bound, &tiny(), &r, true, &mut rng).unwrap();
        let w = tape.constant(nn::normal([8], 1.0, &mut ChaCha8Rng::seed_from_u64(8)));
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        bound.visit("text", &mut |name, v| {
            let g = tape.grad(*v).expect(&name);
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
        });
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = tiny();
        let p: TextEncoderParams<Tensor<f32>> =
            init_text_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut inputs = vec![nn::normal::<f32, _>([4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1))];
        p.layers[0].visit("", &mut |_, t| inputs.push(t.clone()));

        fn block<T: Scalar>(tape: &mut Tape<'_, T>, v: &[Var], cfg: &TextEncoderConfig) -> Result<Var> {
            let l = EncoderLayerParams {
                wq: v[1], wk: v[2], wv: v[3], wo: v[4],
                ff1_w: v[5], ff1_b: v[6], ff2_w: v[7], ff2_b: v[8],
                ln1_gamma: v[9], ln1_beta: v[10], ln2_gamma: v[11], ln2_beta: v[12],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = encoder_block(tape, v[0], &[1, 1, 1, 0], &l, cfg, false, &mut rng)?.out;
            let w = tape.constant(nn::normal([4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let m = tape.mul(out, w)?;
            tape.sum(m)
        }
        let errs = grad_check_reference(
            |t, v| block(t, v, &cfg),
            |t, v| block(t, v, &cfg),
            &inputs,
            1e-6,
            false,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
    }
}
