use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::attend;
use super::batch::{AttnMask, MaskPlan, SeqBatch};
use super::config::{DecoderInput, Memory, ModelConfig, Pooling};
use super::weights::{step_width, ModelWeights};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::ingest::{EntitySequence, FittedSchema};

/// Entity id and its pooled embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub entity: String,
    pub vector: Vec<f64>,
}

/// Train/eval switch plus the per-sequence dropout streams.
///
/// Each batch row owns an RNG seeded independently, so a row draws the same
/// dropout masks whether it is processed in a full batch or in a shard.
pub struct ForwardCtx {
    train: bool,
    p: f64,
    rngs: Vec<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            p: 0.0,
            rngs: Vec::new(),
        }
    }

    pub fn train(dropout: f64, row_seeds: &[u64]) -> Self {
        Self {
            train: true,
            p: dropout,
            rngs: row_seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout on a tensor whose leading axis is the batch.
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if !self.train || self.p == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let rows = shape[0];
        if rows != self.rngs.len() {
            return Err(Error::shape("dropout", &shape, &[self.rngs.len()]));
        }
        let per_row = g.value(x).numel() / rows.max(1);
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mut mask = Vec::with_capacity(rows * per_row);
        for rng in &mut self.rngs {
            for _ in 0..per_row {
                let drop = rng.random::<f64>() < self.p;
                mask.push(if drop { T::zero() } else { keep });
            }
        }
        let m = g.constant(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }
}

/// Per-column reconstruction outputs: `[b, t, 1]` per numeric column and
/// `[b, t, |vocab|+1]` logits per categorical column.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub numeric: Vec<Var>,
    pub categorical: Vec<Var>,
}

/// Weights together with the configuration and schema they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub fitted: FittedSchema,
    pub weights: ModelWeights<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, fitted: FittedSchema, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ModelWeights::init(&config, &fitted, &mut rng)?;
        Ok(Self {
            config,
            fitted,
            weights,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        fitted: FittedSchema,
        weights: ModelWeights<T>,
    ) -> Result<Self> {
        config.validate()?;
        weights.check_layout(&config, &fitted)?;
        Ok(Self {
            config,
            fitted,
            weights,
        })
    }

    /// Records every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, T> {
        let vars = self
            .weights
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { model: self, vars }
    }

    pub fn batch(&self, seqs: &[&EntitySequence]) -> Result<SeqBatch> {
        let f = &self.fitted;
        let widths = [
            f.numerical.len(),
            f.categorical.len(),
            f.static_numerical.len(),
            f.static_categorical.len(),
        ];
        SeqBatch::with_widths(seqs, self.config.t, widths)
    }

    /// Inference-mode encoder output `[b, t, hidden]`.
    pub fn encode(&self, batch: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut ctx = ForwardCtx::eval();
        let x = p.project_inputs(&mut g, batch, None)?;
        let enc = p.encoder_forward(&mut g, x, batch, &mut ctx)?;
        Ok(g.value(enc).clone())
    }

    /// One ν_E per sequence, in input order. Runs in inference mode.
    pub fn embed(&self, seqs: &[EntitySequence]) -> Result<Vec<EmbeddingRecord>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let refs: Vec<&EntitySequence> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let mut ctx = ForwardCtx::eval();
            let x = p.project_inputs(&mut g, &batch, None)?;
            let enc = p.encoder_forward(&mut g, x, &batch, &mut ctx)?;
            let e = p.embed_head(&mut g, enc, &batch)?;
            let data = g.value(e).to_f64_vec();
            let width = self.config.emb_out;
            for (i, name) in batch.entities.iter().enumerate() {
                let vector = data[i * width..(i + 1) * width].to_vec();
                if vector.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite embedding for `{name}`")));
                }
                out.push(EmbeddingRecord {
                    entity: name.clone(),
                    vector,
                });
            }
        }
        Ok(out)
    }
}

/// A model's parameters recorded on one graph.
pub struct Bound<'m, T> {
    model: &'m Model<T>,
    vars: Vec<Var>,
}

impl<'m, T: Real> Bound<'m, T> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.model
            .weights
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::SchemaMismatch(format!("no parameter `{name}`")))
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(w)?)?;
        g.add_bias(y, self.var(b)?)
    }

    /// Builds `concat(i/t, numericals, embeddings)` per position (zero at pad
    /// and masked positions) and projects it to the hidden width.
    pub fn project_inputs(
        &self,
        g: &mut Graph<T>,
        batch: &SeqBatch,
        plan: Option<&MaskPlan>,
    ) -> Result<Var> {
        let fitted = &self.model.fitted;
        let t = self.cfg().t;
        if batch.t != t
            || batch.n_num != fitted.numerical.len()
            || batch.n_cat != fitted.categorical.len()
        {
            return Err(Error::SchemaMismatch(format!(
                "batch (t={}, {} numeric, {} categorical) does not match model (t={t}, {} numeric, {} categorical)",
                batch.t,
                batch.n_num,
                batch.n_cat,
                fitted.numerical.len(),
                fitted.categorical.len()
            )));
        }
        if let Some(p) = plan {
            if p.b != batch.b || p.t != t {
                return Err(Error::shape("mask plan", &[p.b, p.t], &[batch.b, t]));
            }
        }
        let (b, n) = (batch.b, batch.n_num);
        let keep: Vec<bool> = (0..b * t)
            .map(|p| batch.real[p] && !plan.is_some_and(|m| m.marked[p]))
            .collect();

        let w = 1 + n;
        let mut dense = vec![T::zero(); b * t * w];
        for p in 0..b * t {
            if !keep[p] {
                continue;
            }
            let pos = p % t + 1;
            dense[p * w] = T::lit(pos as f64 / t as f64);
            for c in 0..n {
                dense[p * w + 1 + c] = T::lit(batch.numeric[p * n + c]);
            }
        }
        let mut parts = vec![g.constant(Tensor::new(&[b, t, w], dense)?)];
        for (c, vocab) in fitted.categorical.iter().enumerate() {
            let table = self.var(&format!("emb.{}", vocab.name))?;
            parts.push(g.embedding(table, &batch.codes_of(c), &keep, &[b, t])?);
        }
        let x = g.concat(&parts, 2)?;
        self.linear(g, x, "input.w", "input.b")
    }

    /// The decoder's input: `projected` itself, or a projection of the
    /// position scalars alone.
    pub fn decoder_inputs(&self, g: &mut Graph<T>, batch: &SeqBatch, projected: Var) -> Result<Var> {
        if self.cfg().decoder_input == DecoderInput::Masked {
            return Ok(projected);
        }
        let (b, t) = (batch.b, batch.t);
        let w = step_width(&self.model.fitted);
        let mut dense = vec![T::zero(); b * t * w];
        for p in 0..b * t {
            if batch.real[p] {
                dense[p * w] = T::lit((p % t + 1) as f64 / t as f64);
            }
        }
        let x = g.constant(Tensor::new(&[b, t, w], dense)?);
        self.linear(g, x, "input.w", "input.b")
    }

    /// Multi-head attention of `h` over `context` followed by the output
    /// projection `W^O`.
    pub fn multi_head(
        &self,
        g: &mut Graph<T>,
        h: Var,
        context: Var,
        mask: Var,
        prefix: &str,
    ) -> Result<Var> {
        let heads = self.cfg().heads;
        let dk = self.cfg().d_k();
        let q = g.matmul(h, self.var(&format!("{prefix}.q"))?)?;
        let k = g.matmul(context, self.var(&format!("{prefix}.k"))?)?;
        let v = g.matmul(context, self.var(&format!("{prefix}.v"))?)?;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (lo, hi) = (i * dk, (i + 1) * dk);
            let (qi, ki, vi) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 2, lo, hi)?, g.slice(k, 2, lo, hi)?, g.slice(v, 2, lo, hi)?)
            };
            outs.push(attend(g, qi, ki, vi, mask)?.out);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
        g.matmul(cat, self.var(&format!("{prefix}.o"))?)
    }

    /// Post-norm residual wrapper: `LN(x + dropout(y))`.
    fn residual(
        &self,
        g: &mut Graph<T>,
        x: Var,
        y: Var,
        norm: &str,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let y = ctx.dropout(g, y)?;
        let s = g.add(x, y)?;
        g.layer_norm(
            s,
            self.var(&format!("{norm}.gamma"))?,
            self.var(&format!("{norm}.beta"))?,
        )
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.relu(h)?;
        self.linear(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Self-attention + FFN blocks over the projected input. Pad keys are masked.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        batch: &SeqBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mask = g.constant(AttnMask::for_batch(batch, false).additive());
        let mut x = ctx.dropout(g, input)?;
        for l in 0..self.cfg().layers {
            let a = self.multi_head(g, x, x, mask, &format!("enc.{l}.attn"))?;
            x = self.residual(g, x, a, &format!("enc.{l}.ln1"), ctx)?;
            let f = self.ffn(g, x, &format!("enc.{l}.ff"))?;
            x = self.residual(g, x, f, &format!("enc.{l}.ln2"), ctx)?;
        }
        Ok(x)
    }

    /// Cross-attention keys for the decoder and their additive mask.
    pub fn decoder_memory(
        &self,
        g: &mut Graph<T>,
        enc_out: Var,
        batch: &SeqBatch,
    ) -> Result<(Var, Var)> {
        let (b, t, h) = (batch.b, batch.t, self.cfg().hidden);
        let seq_mask = AttnMask::for_batch(batch, false);
        if self.cfg().memory == Memory::Sequence {
            return Ok((enc_out, g.constant(seq_mask.additive())));
        }
        let nu = self.embed_head(g, enc_out, batch)?;
        let slot = self.linear(g, nu, "latent.w", "latent.b")?;
        let slot = g.reshape(slot, &[b, 1, h])?;
        if self.cfg().memory == Memory::Embedding {
            return Ok((slot, g.constant(AttnMask::full(b, t, 1).additive())));
        }
        let mut mask = AttnMask::full(b, t, t + 1);
        for row in 0..b * t {
            for k in 0..t {
                mask.allowed[row * (t + 1) + k] = seq_mask.allowed[row * t + k];
            }
        }
        let memory = g.concat(&[enc_out, slot], 1)?;
        Ok((memory, g.constant(mask.additive())))
    }

    /// Causal self-attention, cross-attention over the memory built from
    /// `enc_out`, and FFN blocks.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        enc_out: Var,
        batch: &SeqBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let causal = g.constant(AttnMask::for_batch(batch, true).additive());
        let (memory, cross) = self.decoder_memory(g, enc_out, batch)?;
        let mut x = ctx.dropout(g, input)?;
        for l in 0..self.cfg().layers {
            let a = self.multi_head(g, x, x, causal, &format!("dec.{l}.self"))?;
            x = self.residual(g, x, a, &format!("dec.{l}.ln1"), ctx)?;
            let c = self.multi_head(g, x, memory, cross, &format!("dec.{l}.cross"))?;
            x = self.residual(g, x, c, &format!("dec.{l}.ln2"), ctx)?;
            let f = self.ffn(g, x, &format!("dec.{l}.ff"))?;
            x = self.residual(g, x, f, &format!("dec.{l}.ln3"), ctx)?;
        }
        Ok(x)
    }

    pub fn reconstruction_heads(&self, g: &mut Graph<T>, dec_out: Var) -> Result<Predictions> {
        let fitted = &self.model.fitted;
        let mut numeric = Vec::with_capacity(fitted.numerical.len());
        for s in &fitted.numerical {
            let p = format!("head.num.{}", s.name);
            numeric.push(self.linear(g, dec_out, &format!("{p}.w"), &format!("{p}.b"))?);
        }
        let mut categorical = Vec::with_capacity(fitted.categorical.len());
        for v in &fitted.categorical {
            let p = format!("head.cat.{}", v.name);
            categorical.push(self.linear(g, dec_out, &format!("{p}.w"), &format!("{p}.b"))?);
        }
        Ok(Predictions {
            numeric,
            categorical,
        })
    }

    /// Pools the encoder output, appends the statics and applies the two
    /// dense layers, giving `[b, emb_out]`.
    pub fn embed_head(&self, g: &mut Graph<T>, enc_out: Var, batch: &SeqBatch) -> Result<Var> {
        let (b, t) = (batch.b, batch.t);
        let pooled = match self.cfg().pooling {
            Pooling::Mean => {
                let mut w = vec![T::zero(); b * t];
                for bi in 0..b {
                    let n = batch.real_in_row(bi);
                    if n > 0 {
                        let inv = T::one() / T::lit(n as f64);
                        for ti in 0..t {
                            if batch.real[bi * t + ti] {
                                w[bi * t + ti] = inv;
                            }
                        }
                    }
                }
                g.weighted_pool(enc_out, &w)?
            }
            Pooling::Last => {
                let w: Vec<T> = (0..b * t)
                    .map(|p| {
                        if p % t == t - 1 && batch.real[p] {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                g.weighted_pool(enc_out, &w)?
            }
            Pooling::Max => g.max_pool(enc_out, &batch.real)?,
        };

        let fitted = &self.model.fitted;
        let mut parts = vec![pooled];
        if batch.n_static_num != fitted.static_numerical.len()
            || batch.n_static_cat != fitted.static_categorical.len()
        {
            return Err(Error::SchemaMismatch("static columns do not match model".into()));
        }
        if batch.n_static_num > 0 {
            let data = batch.static_numeric.iter().map(|&v| T::lit(v)).collect();
            parts.push(g.constant(Tensor::new(&[b, batch.n_static_num], data)?));
        }
        for (c, vocab) in fitted.static_categorical.iter().enumerate() {
            let table = self.var(&format!("emb_static.{}", vocab.name))?;
            let codes: Vec<u32> = (0..b)
                .map(|bi| batch.static_codes[bi * batch.n_static_cat + c])
                .collect();
            parts.push(g.embedding(table, &codes, &vec![true; b], &[b])?);
        }
        let x = if parts.len() == 1 {
            pooled
        } else {
            g.concat(&parts, 1)?
        };
        let h = self.linear(g, x, "embed.w1", "embed.b1")?;
        let h = g.relu(h)?;
        self.linear(g, h, "embed.w2", "embed.b2")
    }
}
