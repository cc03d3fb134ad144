use std::collections::HashMap;

use rand::Rng;

use super::config::{Memory, ModelConfig};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ingest::FittedSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
    /// Linear-layer bias, uniform in ±1/√fan_in.
    Bias(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

/// Width of the per-position input vector: position scalar, numericals and
/// categorical embeddings.
pub fn step_width(fitted: &FittedSchema) -> usize {
    1 + fitted.numerical.len() + fitted.categorical.iter().map(|v| v.embed_dim).sum::<usize>()
}

/// Width of the non-sequential vector appended after pooling.
pub fn statics_width(fitted: &FittedSchema) -> usize {
    fitted.static_numerical.len()
        + fitted
            .static_categorical
            .iter()
            .map(|v| v.embed_dim)
            .sum::<usize>()
}

fn attention(prefix: &str, h: usize, out: &mut Vec<ParamSpec>) {
    // Per-head projections W_i^Q, W_i^K, W_i^V are stored side by side as
    // column blocks of one hidden × hidden matrix each.
    for m in ["q", "k", "v", "o"] {
        out.push(spec(format!("{prefix}.{m}"), &[h, h], Init::Xavier));
    }
}

fn norm(prefix: &str, h: usize, out: &mut Vec<ParamSpec>) {
    out.push(spec(format!("{prefix}.gamma"), &[h], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), &[h], Init::Zeros));
}

fn ffn(prefix: &str, h: usize, ff: usize, out: &mut Vec<ParamSpec>) {
    out.push(spec(format!("{prefix}.w1"), &[h, ff], Init::Xavier));
    out.push(spec(format!("{prefix}.b1"), &[ff], Init::Bias(h)));
    out.push(spec(format!("{prefix}.w2"), &[ff, h], Init::Xavier));
    out.push(spec(format!("{prefix}.b2"), &[h], Init::Bias(ff)));
}

/// Ordered parameter layout for a config and fitted schema.
pub(crate) fn layout(cfg: &ModelConfig, fitted: &FittedSchema) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let mut out = Vec::new();
    for v in &fitted.categorical {
        out.push(spec(format!("emb.{}", v.name), &[v.table_rows(), v.embed_dim], Init::Embedding));
    }
    for v in &fitted.static_categorical {
        out.push(spec(
            format!("emb_static.{}", v.name),
            &[v.table_rows(), v.embed_dim],
            Init::Embedding,
        ));
    }
    out.push(spec("input.w".into(), &[step_width(fitted), h], Init::Xavier));
    out.push(spec("input.b".into(), &[h], Init::Bias(step_width(fitted))));
    for l in 0..cfg.layers {
        attention(&format!("enc.{l}.attn"), h, &mut out);
        norm(&format!("enc.{l}.ln1"), h, &mut out);
        ffn(&format!("enc.{l}.ff"), h, cfg.ff_dim, &mut out);
        norm(&format!("enc.{l}.ln2"), h, &mut out);
    }
    for l in 0..cfg.layers {
        attention(&format!("dec.{l}.self"), h, &mut out);
        norm(&format!("dec.{l}.ln1"), h, &mut out);
        attention(&format!("dec.{l}.cross"), h, &mut out);
        norm(&format!("dec.{l}.ln2"), h, &mut out);
        ffn(&format!("dec.{l}.ff"), h, cfg.ff_dim, &mut out);
        norm(&format!("dec.{l}.ln3"), h, &mut out);
    }
    for s in &fitted.numerical {
        out.push(spec(format!("head.num.{}.w", s.name), &[h, 1], Init::Xavier));
        out.push(spec(format!("head.num.{}.b", s.name), &[1], Init::Bias(h)));
    }
    for v in &fitted.categorical {
        out.push(spec(format!("head.cat.{}.w", v.name), &[h, v.table_rows()], Init::Xavier));
        out.push(spec(format!("head.cat.{}.b", v.name), &[v.table_rows()], Init::Bias(h)));
    }
    let e = cfg.emb_out;
    out.push(spec("embed.w1".into(), &[h + statics_width(fitted), e], Init::Xavier));
    out.push(spec("embed.b1".into(), &[e], Init::Bias(h + statics_width(fitted))));
    out.push(spec("embed.w2".into(), &[e, e], Init::Xavier));
    out.push(spec("embed.b2".into(), &[e], Init::Bias(e)));
    if cfg.memory != Memory::Sequence {
        out.push(spec("latent.w".into(), &[e, h], Init::Xavier));
        out.push(spec("latent.b".into(), &[h], Init::Bias(e)));
    }
    out
}

/// All learnable parameters, in a fixed order, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelWeights<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, fitted: &FittedSchema, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut named = Vec::new();
        for p in layout(cfg, fitted) {
            let n: usize = p.shape.iter().product();
            let data: Vec<T> = match p.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Bias(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect()
                }
                Init::Xavier => {
                    let bound = (6.0 / (p.shape[0] + p.shape[1]) as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect()
                }
                Init::Embedding => {
                    let d = p.shape[1];
                    (0..n)
                        .map(|i| {
                            // row 0 (padding / out-of-vocabulary) starts at zero
                            if i < d {
                                T::zero()
                            } else {
                                T::lit(rng.random_range(-0.05..0.05))
                            }
                        })
                        .collect()
                }
            };
            named.push((p.name, Tensor::new(&p.shape, data)?));
        }
        Self::from_named(named)
    }

    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(named.len());
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (n, t)) in named.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::SchemaMismatch(format!("duplicate parameter `{n}`")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Checks names and shapes against the layout implied by `cfg` and `fitted`.
    pub fn check_layout(&self, cfg: &ModelConfig, fitted: &FittedSchema) -> Result<()> {
        let want = layout(cfg, fitted);
        if want.len() != self.names.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} parameters, found {}",
                want.len(),
                self.names.len()
            )));
        }
        for (p, (n, t)) in want.iter().zip(self.iter()) {
            if &p.name != n || p.shape != t.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "parameter `{n}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
