use taskvec_autodiff::{objective, value_and_grad, ParamVector, Rng, Tape, Tensor, Var};

use super::Backend;
use crate::label::{Label, LabelKind, LabeledSet, PAD};
use crate::surrogate::{train_loop, TrainConfig};
use crate::{Error, Result};

/// Bag-of-tokens linear model: a different architecture from the surrogate.
///
/// Features are normalized token counts. Class and distribution outputs use
/// a `vocab × classes` softmax layer, scalars a linear read-out. Token outputs
/// score position `i` from the bag, the token at `i` and a per-position bias.
#[derive(Clone, Debug)]
pub struct BagModel {
    kind: LabelKind,
    vocab: usize,
    classes: usize,
    seq_len: usize,
    params: ParamVector,
}

impl BagModel {
    pub fn init(kind: LabelKind, vocab: usize, classes: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || classes < 2 || seq_len == 0 {
            return Err(Error::Argument("bag model needs vocab > 0, classes ≥ 2, seq_len > 0".into()));
        }
        let mut rng = Rng::derive(seed, 0xba6);
        let mut normal = |shape: Vec<usize>, std: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect())
        };
        let std = 1.0 / (vocab as f64).sqrt();
        let mut params = ParamVector::new();
        match kind {
            LabelKind::Class | LabelKind::Distribution => {
                params.register("weight", normal(vec![vocab, classes], std)?)?;
                params.register("bias", Tensor::zeros(&[1, classes]))?;
            }
            LabelKind::Scalar => {
                params.register("weight", normal(vec![vocab, 1], std)?)?;
                params.register("bias", Tensor::zeros(&[1, 1]))?;
            }
            LabelKind::Tokens => {
                params.register("bag", normal(vec![vocab, vocab], std)?)?;
                params.register("copy", normal(vec![vocab, vocab], std)?)?;
                params.register("position", Tensor::zeros(&[seq_len, vocab]))?;
            }
        }
        Ok(Self {
            kind,
            vocab,
            classes,
            seq_len,
            params,
        })
    }

    fn features(&self, input: &[u32]) -> Tensor {
        let mut f = vec![0.0; self.vocab];
        let real: Vec<u32> = input.iter().copied().filter(|&t| t != PAD).collect();
        for &t in &real {
            f[t as usize] += 1.0 / real.len() as f64;
        }
        Tensor::new(vec![1, self.vocab], f).expect("feature row")
    }

    fn logits<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &[u32]) -> Var<'t> {
        let bag = tape.constant(self.features(input));
        match self.kind {
            LabelKind::Tokens => {
                let ids: Vec<usize> = (0..self.seq_len)
                    .map(|i| input.get(i).copied().unwrap_or(PAD) as usize)
                    .collect();
                p[1].gather_rows(&ids).add_row(bag.matmul(p[0])).add(p[2])
            }
            _ => bag.matmul(p[0]).add_row(p[1]),
        }
    }

    fn log_prob_var<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &[u32], label: &Label) -> Var<'t> {
        let z = self.logits(tape, p, input);
        match label {
            Label::Class(c) => {
                let mut w = vec![0.0; self.classes];
                w[*c] = 1.0;
                z.log_softmax_rows().weighted_sum(&w)
            }
            Label::Distribution(q) => z.log_softmax_rows().weighted_sum(q),
            Label::Scalar(y) => z.add_scalar(-y).square().scale(-0.5).sum(),
            Label::Tokens(target) => {
                let mut w = vec![0.0; self.seq_len * self.vocab];
                for (i, &t) in target.iter().enumerate() {
                    if t != PAD {
                        w[i * self.vocab + t as usize] = 1.0;
                    }
                }
                z.log_softmax_rows().weighted_sum(&w)
            }
        }
    }

    /// Adam on the negative mean log-likelihood of `data`.
    pub fn train(&self, data: &LabeledSet, cfg: &TrainConfig) -> Result<Self> {
        if data.kind()? != self.kind {
            return Err(Error::Contract(format!("bag model emits {} but data holds {}", self.kind, data.kind()?)));
        }
        for ex in &data.examples {
            ex.label.validate(self.classes, self.seq_len, self.vocab)?;
            if ex.tokens.iter().any(|&t| t as usize >= self.vocab) {
                return Err(Error::Contract("token id outside bag-model vocabulary".into()));
            }
        }
        let params = train_loop(self.params.clone(), data.len(), cfg, 0xba6, |_, batch, params| {
            let scale = -1.0 / batch.len() as f64;
            let f = objective(|tape, v| {
                batch
                    .iter()
                    .map(|&i| self.log_prob_var(tape, v, &data.examples[i].tokens, &data.examples[i].label))
                    .reduce(|a, b| a.add(b))
                    .expect("non-empty batch")
                    .scale(scale)
            });
            Ok(value_and_grad(f, params)?.1)
        })?;
        Ok(Self { params, ..self.clone() })
    }
}

impl Backend for BagModel {
    fn kind(&self) -> LabelKind {
        self.kind
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        if input.iter().any(|&t| t as usize >= self.vocab) {
            return Err(Error::Contract("token id outside bag-model vocabulary".into()));
        }
        let tape = Tape::new();
        let p: Vec<Var<'_>> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let z = self.logits(&tape, &p, input);
        let out = match self.kind {
            LabelKind::Class => Label::Class(crate::surrogate::argmax(z.value().data())),
            LabelKind::Distribution => Label::Distribution(z.softmax_rows(None).value().into_data()),
            LabelKind::Scalar => Label::Scalar(z.item()),
            LabelKind::Tokens => Label::Tokens(
                z.value()
                    .data()
                    .chunks(self.vocab)
                    .map(|r| crate::surrogate::argmax(r) as u32)
                    .collect(),
            ),
        };
        if let Some(prim) = tape.poisoned() {
            return Err(Error::Numeric(format!("bag model: non-finite value in `{prim}`")));
        }
        Ok(out)
    }
}
