//! The surrogate base model: a small pre-norm transformer encoder with a class
//! head, a Gaussian regression head and a fixed-length token head.
//!
//! Every task embedding is computed through one surrogate checkpoint, which
//! is what makes dataset and model embeddings comparable.

mod checkpoint;
mod prefix;
mod train;

pub use checkpoint::{canonical_json, SurrogateCheckpoint, CHECKPOINT_MAGIC};
pub use prefix::PrefixParams;
pub use train::{
    fine_tune_full, fine_tune_prefix, masked_lm_loss, pretrain_masked, TrainConfig,
    DEFAULT_PREFIX_INIT_STD,
};
pub(crate) use train::train_loop;

use serde::{Deserialize, Serialize};
use taskvec_autodiff::{Tape, Tensor, Var};

use crate::label::{Example, Label, LabelKind, FIRST_CONTENT, PAD};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            width: 32,
            layers: 2,
            heads: 2,
            ff_width: 64,
            max_len: 32,
            classes: 8,
            seq_len: 8,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab", self.vocab),
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("max_len", self.max_len),
            ("classes", self.classes),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("surrogate `{name}` must be positive")));
        }
        if self.vocab <= FIRST_CONTENT as usize {
            return Err(Error::Argument(format!(
                "vocab {} leaves no content ids after the reserved pad/mask/separator",
                self.vocab
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.seq_len > self.max_len {
            return Err(Error::Argument(format!(
                "seq_len {} exceeds max_len {}",
                self.seq_len, self.max_len
            )));
        }
        if self.classes < 2 {
            return Err(Error::Argument("class head needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Parameter count derived tensor by tensor.
    pub fn param_count(&self) -> usize {
        param_specs(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Checks tokens and label of one example against this architecture.
    pub fn validate_example(&self, example: &Example) -> Result<()> {
        self.validate_tokens(&example.tokens)?;
        example.label.validate(self.classes, self.seq_len, self.vocab)
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_len {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary {}", self.vocab)));
        }
        if tokens.iter().all(|&t| t == PAD) {
            return Err(Error::Contract("token sequence is all padding".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with std `scale / sqrt(fan_in)`.
    Normal { scale: f64, fan_in: usize },
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Canonical registration order of the surrogate's tensors.
pub(crate) fn param_specs(c: &SurrogateConfig) -> Vec<ParamSpec> {
    let d = c.width;
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    let emb = Init::Normal { scale: 1.0, fan_in: 1 };
    let dense = |fan_in| Init::Normal { scale: 1.0, fan_in };
    add("tok_emb".into(), vec![c.vocab, d], emb);
    add("pos_emb".into(), vec![c.max_len, d], emb);
    for l in 0..c.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        add(p("ln1.gain"), vec![1, d], Init::Ones);
        add(p("ln1.bias"), vec![1, d], Init::Zeros);
        for m in ["query", "key", "value", "out"] {
            add(p(&format!("attn.{m}.weight")), vec![d, d], dense(d));
            add(p(&format!("attn.{m}.bias")), vec![1, d], Init::Zeros);
        }
        add(p("ln2.gain"), vec![1, d], Init::Ones);
        add(p("ln2.bias"), vec![1, d], Init::Zeros);
        add(p("ff.in.weight"), vec![d, c.ff_width], dense(d));
        add(p("ff.in.bias"), vec![1, c.ff_width], Init::Zeros);
        add(p("ff.out.weight"), vec![c.ff_width, d], dense(c.ff_width));
        add(p("ff.out.bias"), vec![1, d], Init::Zeros);
    }
    add("final_ln.gain".into(), vec![1, d], Init::Ones);
    add("final_ln.bias".into(), vec![1, d], Init::Zeros);
    add("head.class.weight".into(), vec![d, c.classes], dense(d));
    add("head.class.bias".into(), vec![1, c.classes], Init::Zeros);
    add("head.scalar.weight".into(), vec![d, 1], dense(d));
    add("head.scalar.bias".into(), vec![1, 1], Init::Zeros);
    add("head.tokens.weight".into(), vec![d, c.vocab], dense(d));
    add("head.tokens.bias".into(), vec![1, c.vocab], Init::Zeros);
    specs
}

const PER_LAYER: usize = 16;

/// Forward-graph builder for one configuration. Parameter vars are passed in
/// canonical order (see [`param_specs`]).
#[derive(Clone, Copy, Debug)]
pub struct Surrogate {
    config: SurrogateConfig,
}

/// Final hidden states plus which rows hold real (non-pad) tokens.
pub struct Encoded<'t> {
    pub hidden: Var<'t>,
    pub real: Vec<bool>,
}

impl Surrogate {
    pub fn new(config: SurrogateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    fn layer(&self, l: usize, k: usize) -> usize {
        2 + l * PER_LAYER + k
    }

    fn tail(&self, k: usize) -> usize {
        2 + self.config.layers * PER_LAYER + k
    }

    /// Runs the encoder over `tokens`, padded with pad ids to at least
    /// `min_rows` rows. `prefix` holds `[K_0, V_0, K_1, V_1, …]` vars of
    /// shape `p × width`; pad keys are masked, prefix keys never are.
    pub fn encode<'t>(
        &self,
        p: &[Var<'t>],
        prefix: Option<&[Var<'t>]>,
        tokens: &[u32],
        min_rows: usize,
    ) -> Encoded<'t> {
        let c = &self.config;
        let n = tokens.len().max(min_rows);
        let ids: Vec<usize> = (0..n)
            .map(|i| tokens.get(i).copied().unwrap_or(PAD) as usize)
            .collect();
        let real: Vec<bool> = ids.iter().map(|&t| t != PAD as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = p[0].gather_rows(&ids).add(p[1].gather_rows(&positions));

        let prefix = prefix.filter(|pv| !pv.is_empty());
        let prefix_len = prefix.map_or(0, |pv| pv[0].rows());
        let key_mask: Vec<bool> = std::iter::repeat_n(false, prefix_len)
            .chain(real.iter().map(|r| !r))
            .collect();
        let dh = c.head_width();
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..c.layers {
            let w = |k| p[self.layer(l, k)];
            let h = x.layer_norm_rows(LN_EPS).mul_row(w(0)).add_row(w(1));
            let q = h.matmul(w(2)).add_row(w(3));
            let mut k = h.matmul(w(4)).add_row(w(5));
            let mut v = h.matmul(w(6)).add_row(w(7));
            if let Some(pv) = prefix {
                k = pv[2 * l].concat_rows(k);
                v = pv[2 * l + 1].concat_rows(v);
            }
            let heads: Vec<Var<'t>> = (0..c.heads)
                .map(|hd| {
                    let (qh, kh, vh) = if c.heads == 1 {
                        (q, k, v)
                    } else {
                        (q.slice_cols(hd * dh, dh), k.slice_cols(hd * dh, dh), v.slice_cols(hd * dh, dh))
                    };
                    qh.matmul_nt(kh)
                        .scale(scale)
                        .softmax_rows(Some(&key_mask))
                        .matmul(vh)
                })
                .collect();
            let attn = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads) };
            x = x.add(attn.matmul(w(8)).add_row(w(9)));

            let h = x.layer_norm_rows(LN_EPS).mul_row(w(10)).add_row(w(11));
            let f = h.matmul(w(12)).add_row(w(13)).gelu().matmul(w(14)).add_row(w(15));
            x = x.add(f);
        }
        let hidden = x
            .layer_norm_rows(LN_EPS)
            .mul_row(p[self.tail(0)])
            .add_row(p[self.tail(1)]);
        Encoded { hidden, real }
    }

    /// Mean of the real rows, `1 × width`.
    pub fn pooled<'t>(&self, enc: &Encoded<'t>) -> Var<'t> {
        enc.hidden.masked_mean_rows(&enc.real)
    }

    pub fn class_logits<'t>(&self, p: &[Var<'t>], pooled: Var<'t>) -> Var<'t> {
        pooled.matmul(p[self.tail(2)]).add_row(p[self.tail(3)])
    }

    pub fn scalar_mean<'t>(&self, p: &[Var<'t>], pooled: Var<'t>) -> Var<'t> {
        pooled.matmul(p[self.tail(4)]).add_row(p[self.tail(5)])
    }

    /// Token logits for each row of `rows` (`rows × vocab`).
    pub fn token_logits<'t>(&self, p: &[Var<'t>], rows: Var<'t>) -> Var<'t> {
        rows.matmul(p[self.tail(6)]).add_row(p[self.tail(7)])
    }

    /// `log P(y|x)` as a graph node. The example must already be validated.
    ///
    /// Class: log-softmax at the index. Distribution: `Σ q·log p`.
    /// Scalar: `−(y−μ)²/2`. Tokens: sum of per-position log-softmax over
    /// non-pad label positions.
    pub fn log_prob_var<'t>(&self, p: &[Var<'t>], prefix: Option<&[Var<'t>]>, example: &Example) -> Var<'t> {
        let c = &self.config;
        match &example.label {
            Label::Class(idx) => {
                let enc = self.encode(p, prefix, &example.tokens, 0);
                let mut w = vec![0.0; c.classes];
                w[*idx] = 1.0;
                self.class_logits(p, self.pooled(&enc)).log_softmax_rows().weighted_sum(&w)
            }
            Label::Distribution(q) => {
                let enc = self.encode(p, prefix, &example.tokens, 0);
                self.class_logits(p, self.pooled(&enc)).log_softmax_rows().weighted_sum(q)
            }
            Label::Scalar(y) => {
                let enc = self.encode(p, prefix, &example.tokens, 0);
                self.scalar_mean(p, self.pooled(&enc))
                    .add_scalar(-y)
                    .square()
                    .scale(-0.5)
                    .sum()
            }
            Label::Tokens(target) => {
                let enc = self.encode(p, prefix, &example.tokens, c.seq_len);
                let rows = enc.hidden.slice_rows(0, c.seq_len);
                let mut w = vec![0.0; c.seq_len * c.vocab];
                for (i, &t) in target.iter().enumerate() {
                    if t != PAD {
                        w[i * c.vocab + t as usize] = 1.0;
                    }
                }
                self.token_logits(p, rows).log_softmax_rows().weighted_sum(&w)
            }
        }
    }

    /// Model output of the requested kind for one input.
    pub fn predict_var<'t>(&self, p: &[Var<'t>], prefix: Option<&[Var<'t>]>, tokens: &[u32], kind: LabelKind) -> Label {
        let c = &self.config;
        match kind {
            LabelKind::Class | LabelKind::Distribution => {
                let enc = self.encode(p, prefix, tokens, 0);
                let probs = self.class_logits(p, self.pooled(&enc)).softmax_rows(None).value();
                if kind == LabelKind::Distribution {
                    Label::Distribution(probs.into_data())
                } else {
                    Label::Class(argmax(probs.data()))
                }
            }
            LabelKind::Scalar => {
                let enc = self.encode(p, prefix, tokens, 0);
                Label::Scalar(self.scalar_mean(p, self.pooled(&enc)).value().data()[0])
            }
            LabelKind::Tokens => {
                let enc = self.encode(p, prefix, tokens, c.seq_len);
                let logits = self.token_logits(p, enc.hidden.slice_rows(0, c.seq_len)).value();
                Label::Tokens(logits.data().chunks(c.vocab).map(|r| argmax(r) as u32).collect())
            }
        }
    }
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn constants<'t>(tape: &'t Tape, tensors: &[Tensor]) -> Vec<Var<'t>> {
    tensors.iter().map(|t| tape.constant(t.clone())).collect()
}

/// `log P(y|x)` under `ckpt`, optionally with prefix-augmented attention.
pub fn log_prob(ckpt: &SurrogateCheckpoint, prefix: Option<&PrefixParams>, example: &Example) -> Result<f64> {
    ckpt.config.validate_example(example)?;
    if let Some(pre) = prefix {
        pre.check_against(&ckpt.config)?;
    }
    let model = Surrogate::new(ckpt.config)?;
    let tape = Tape::new();
    let p = constants(&tape, ckpt.params.tensors());
    let pv = prefix.map(|pre| constants(&tape, pre.params.tensors()));
    let out = model.log_prob_var(&p, pv.as_deref(), example);
    if let Some(prim) = tape.poisoned() {
        return Err(Error::Numeric(format!("non-finite value in `{prim}`")));
    }
    Ok(out.item())
}

/// The checkpoint's prediction of `kind` for `tokens`.
pub fn predict(ckpt: &SurrogateCheckpoint, prefix: Option<&PrefixParams>, tokens: &[u32], kind: LabelKind) -> Result<Label> {
    ckpt.config.validate_tokens(tokens)?;
    let model = Surrogate::new(ckpt.config)?;
    let tape = Tape::new();
    let p = constants(&tape, ckpt.params.tensors());
    let pv = prefix.map(|pre| constants(&tape, pre.params.tensors()));
    let out = model.predict_var(&p, pv.as_deref(), tokens, kind);
    if let Some(prim) = tape.poisoned() {
        return Err(Error::Numeric(format!("non-finite value in `{prim}`")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use taskvec_autodiff::{finite_diff_grad, max_relative_error, objective, value_and_grad};

    fn tiny() -> SurrogateConfig {
        SurrogateConfig {
            vocab: 12,
            width: 4,
            layers: 1,
            heads: 2,
            ff_width: 6,
            max_len: 8,
            classes: 3,
            seq_len: 3,
        }
    }

    #[test]
    fn default_parameter_count_matches_formula() {
        let c = SurrogateConfig::default();
        let (v, d, t, f, cl) = (c.vocab, c.width, c.max_len, c.ff_width, c.classes);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let expected = v * d + t * d + c.layers * per_layer + 2 * d + (d * cl + cl) + (d + 1) + (d * v + v);
        assert_eq!(c.param_count(), expected);
        assert_eq!(expected, 22_633);
        let ckpt = SurrogateCheckpoint::init(c, 7).unwrap();
        assert_eq!(ckpt.params.numel(), expected);
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = SurrogateConfig { heads: 3, ..SurrogateConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Argument(_))));
        let c = SurrogateConfig { seq_len: 40, ..SurrogateConfig::default() };
        assert!(c.validate().is_err());
        let c = SurrogateConfig { vocab: 3, ..SurrogateConfig::default() };
        assert!(c.validate().is_err());
        assert!(SurrogateCheckpoint::init(c, 1).is_err());
    }

    #[test]
    fn zero_class_head_gives_uniform_log_prob() {
        let c = SurrogateConfig::default();
        let mut ckpt = SurrogateCheckpoint::init(c, 3).unwrap();
        for name in ["head.class.weight", "head.class.bias"] {
            let i = ckpt.params.position(name).unwrap();
            ckpt.params.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for class in 0..8 {
            let ex = Example::new(vec![5, 9, 12], Label::Class(class));
            let lp = log_prob(&ckpt, None, &ex).unwrap();
            assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_at_predicted_mean_is_zero() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 4).unwrap();
        let tokens = vec![3, 14, 15, 9, 2, 6];
        let Label::Scalar(mu) = predict(&ckpt, None, &tokens, LabelKind::Scalar).unwrap() else {
            panic!()
        };
        let lp = log_prob(&ckpt, None, &Example::new(tokens, Label::Scalar(mu))).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn own_distribution_gives_negative_entropy() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 5).unwrap();
        let tokens = vec![7, 8, 9, 40];
        let Label::Distribution(p) = predict(&ckpt, None, &tokens, LabelKind::Distribution).unwrap() else {
            panic!()
        };
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let lp = log_prob(&ckpt, None, &Example::new(tokens, Label::Distribution(p))).unwrap();
        assert!((lp + entropy).abs() < 1e-12, "{lp} vs {}", -entropy);
    }

    #[test]
    fn class_probabilities_normalize() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 6).unwrap();
        let total: f64 = (0..8)
            .map(|k| log_prob(&ckpt, None, &Example::new(vec![4, 4, 20, 33], Label::Class(k))).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn padding_does_not_change_class_output() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 8).unwrap();
        let a = log_prob(&ckpt, None, &Example::new(vec![5, 6, 7], Label::Class(2))).unwrap();
        let b = log_prob(&ckpt, None, &Example::new(vec![5, 6, 7, PAD, PAD], Label::Class(2))).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn incompatible_labels_are_contract_errors() {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 9).unwrap();
        for label in [
            Label::Class(8),
            Label::Distribution(vec![1.0, 0.0]),
            Label::Tokens(vec![3; 9]),
        ] {
            let err = log_prob(&ckpt, None, &Example::new(vec![4, 5], label)).unwrap_err();
            assert!(matches!(err, Error::Contract(_)), "{err:?}");
        }
        assert!(log_prob(&ckpt, None, &Example::new(vec![], Label::Class(0))).is_err());
        assert!(log_prob(&ckpt, None, &Example::new(vec![PAD, PAD], Label::Class(0))).is_err());
    }

    #[test]
    fn empty_prefix_is_bit_identical_to_vanilla() {
        let c = SurrogateConfig::default();
        let ckpt = SurrogateCheckpoint::init(c, 10).unwrap();
        let empty = PrefixParams::empty();
        for label in [Label::Class(3), Label::Scalar(0.7), Label::Tokens(vec![4, 5, 6])] {
            let ex = Example::new(vec![9, 10, 11, 12, 13], label);
            let a = log_prob(&ckpt, None, &ex).unwrap();
            let b = log_prob(&ckpt, Some(&empty), &ex).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        let c = tiny();
        let ckpt = SurrogateCheckpoint::init(c, 2).unwrap();
        let prefix = PrefixParams::init(&c, 2, 5, 0.3).unwrap();
        let model = Surrogate::new(c).unwrap();
        let labels = [
            Label::Class(1),
            Label::Distribution(vec![0.2, 0.5, 0.3]),
            Label::Scalar(1.3),
            Label::Tokens(vec![4, PAD, 7]),
        ];
        for label in labels {
            let ex = Example::new(vec![3, 8, PAD, 11, 5], label);
            c.validate_example(&ex).unwrap();
            let f = objective(|_, v| model.log_prob_var(v, None, &ex));
            let (_, g) = value_and_grad(f, &ckpt.params).unwrap();
            let fd = finite_diff_grad(f, &ckpt.params, 1e-5).unwrap();
            let err = max_relative_error(&g, &fd, 1e-3);
            assert!(err < 1e-6, "{:?}: {err:e}", ex.label);

            let backbone = ckpt.params.tensors().to_vec();
            let fp = objective(|t, v| {
                let p = constants(t, &backbone);
                model.log_prob_var(&p, Some(v), &ex)
            });
            let (_, g) = value_and_grad(fp, &prefix.params).unwrap();
            let fd = finite_diff_grad(fp, &prefix.params, 1e-5).unwrap();
            let err = max_relative_error(&g, &fd, 1e-3);
            assert!(err < 1e-6, "prefix {:?}: {err:e}", ex.label);
        }
    }
}
