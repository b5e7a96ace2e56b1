use serde::{Deserialize, Serialize};
use taskvec_autodiff::{adam_step, value_and_grad, AdamConfig, AdamState, ParamVector, Rng, Tape, Var};

use super::{constants, PrefixParams, Surrogate, SurrogateCheckpoint};
use crate::label::{LabeledSet, MASK, PAD};
use crate::{Error, Result};

pub const DEFAULT_PREFIX_INIT_STD: f64 = 0.02;

/// Fraction of non-pad tokens replaced by the mask id during pretraining.
const MASK_RATE: f64 = 0.15;

/// Adam fine-tuning recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Recipe for dataset embeddings.
    pub fn dataset(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Recipe for model embeddings over the unsupervised pool.
    pub fn model(seed: u64) -> Self {
        Self {
            epochs: 1,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Shuffled mini-batch Adam over `n` items. `step` returns the batch loss
/// gradient at the given parameters.
pub(crate) fn train_loop<F>(mut params: ParamVector, n: usize, cfg: &TrainConfig, stream: u64, step: F) -> Result<ParamVector>
where
    F: Fn(usize, &[usize], &ParamVector) -> Result<ParamVector>,
{
    cfg.validate()?;
    let mut state = AdamState::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = Rng::derive(cfg.seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let grads = step(epoch, batch, &params)?;
            let (next, next_state) = adam_step(&state, &params, &grads)?;
            params = next;
            state = next_state;
        }
    }
    Ok(params)
}

fn check_data(ckpt: &SurrogateCheckpoint, data: &LabeledSet) -> Result<()> {
    data.kind()?;
    data.examples
        .iter()
        .try_for_each(|ex| ckpt.config.validate_example(ex))
}

fn sum_vars<'t>(terms: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
    terms
        .into_iter()
        .reduce(|a, b| a.add(b))
        .expect("non-empty batch")
}

/// Fine-tunes every surrogate weight on `data` by maximizing mean `log P(y|x)`.
pub fn fine_tune_full(ckpt: &SurrogateCheckpoint, data: &LabeledSet, cfg: &TrainConfig) -> Result<SurrogateCheckpoint> {
    check_data(ckpt, data)?;
    let model = Surrogate::new(ckpt.config)?;
    let params = train_loop(ckpt.params.clone(), data.len(), cfg, 1, |_, batch, params| {
        let scale = -1.0 / batch.len() as f64;
        let (_, g) = value_and_grad(
            |_: &Tape, v: &[Var<'_>]| {
                sum_vars(batch.iter().map(|&i| model.log_prob_var(v, None, &data.examples[i]))).scale(scale)
            },
            params,
        )?;
        Ok(g)
    })?;
    ckpt.with_params(params)
}

/// Trains a fresh length-`prefix_len` prefix on `data` with the backbone
/// frozen.
pub fn fine_tune_prefix(
    ckpt: &SurrogateCheckpoint,
    data: &LabeledSet,
    prefix_len: usize,
    init_std: f64,
    cfg: &TrainConfig,
) -> Result<PrefixParams> {
    check_data(ckpt, data)?;
    let init = PrefixParams::init(&ckpt.config, prefix_len, cfg.seed, init_std)?;
    let model = Surrogate::new(ckpt.config)?;
    let backbone = ckpt.params.tensors();
    let params = train_loop(init.params, data.len(), cfg, 2, |_, batch, params| {
        let scale = -1.0 / batch.len() as f64;
        let (_, g) = value_and_grad(
            |tape: &Tape, v: &[Var<'_>]| {
                let p = constants(tape, backbone);
                sum_vars(batch.iter().map(|&i| model.log_prob_var(&p, Some(v), &data.examples[i]))).scale(scale)
            },
            params,
        )?;
        Ok(g)
    })?;
    Ok(PrefixParams {
        len: prefix_len,
        params,
    })
}

/// Replaces a random subset of non-pad tokens with the mask id; at least one
/// position is always masked. Returns the corrupted input and the positions.
fn mask_tokens(tokens: &[u32], rng: &mut Rng) -> (Vec<u32>, Vec<usize>) {
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != PAD).collect();
    let mut masked: Vec<usize> = candidates.iter().copied().filter(|_| rng.bernoulli(MASK_RATE)).collect();
    if masked.is_empty() {
        masked.push(candidates[rng.below(candidates.len())]);
    }
    let mut input = tokens.to_vec();
    for &i in &masked {
        input[i] = MASK;
    }
    (input, masked)
}

/// Mean negative log-likelihood of the original tokens at masked positions.
fn masked_loss<'t>(model: &Surrogate, p: &[Var<'t>], original: &[u32], input: &[u32], positions: &[usize]) -> Var<'t> {
    let vocab = model.config().vocab;
    let enc = model.encode(p, None, input, 0);
    let rows = enc.hidden.gather_rows(positions);
    let mut w = vec![0.0; positions.len() * vocab];
    for (r, &i) in positions.iter().enumerate() {
        w[r * vocab + original[i] as usize] = -1.0 / positions.len() as f64;
    }
    model.token_logits(p, rows).log_softmax_rows().weighted_sum(&w)
}

fn check_texts(ckpt: &SurrogateCheckpoint, texts: &[Vec<u32>]) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::Argument("no texts to pretrain on".into()));
    }
    texts.iter().try_for_each(|t| ckpt.config.validate_tokens(t))
}

/// Masked-token pretraining over unlabeled texts.
pub fn pretrain_masked(ckpt: &SurrogateCheckpoint, texts: &[Vec<u32>], cfg: &TrainConfig) -> Result<SurrogateCheckpoint> {
    check_texts(ckpt, texts)?;
    let model = Surrogate::new(ckpt.config)?;
    let params = train_loop(ckpt.params.clone(), texts.len(), cfg, 3, |epoch, batch, params| {
        let mut rng = Rng::derive(cfg.seed ^ taskvec_autodiff::mix(epoch as u64), batch[0] as u64);
        let masked: Vec<(Vec<u32>, Vec<usize>)> = batch.iter().map(|&i| mask_tokens(&texts[i], &mut rng)).collect();
        let scale = 1.0 / batch.len() as f64;
        let (_, g) = value_and_grad(
            |_: &Tape, v: &[Var<'_>]| {
                sum_vars(
                    batch
                        .iter()
                        .zip(&masked)
                        .map(|(&i, (input, pos))| masked_loss(&model, v, &texts[i], input, pos)),
                )
                .scale(scale)
            },
            params,
        )?;
        Ok(g)
    })?;
    ckpt.with_params(params)
}

/// Mean masked-token loss with masks drawn from `seed`.
pub fn masked_lm_loss(ckpt: &SurrogateCheckpoint, texts: &[Vec<u32>], seed: u64) -> Result<f64> {
    check_texts(ckpt, texts)?;
    let model = Surrogate::new(ckpt.config)?;
    let mut rng = Rng::derive(seed, 4);
    let mut total = 0.0;
    for text in texts {
        let (input, pos) = mask_tokens(text, &mut rng);
        let tape = Tape::new();
        let p = constants(&tape, ckpt.params.tensors());
        let loss = masked_loss(&model, &p, text, &input, &pos);
        if let Some(prim) = tape.poisoned() {
            return Err(Error::Numeric(format!("non-finite value in `{prim}`")));
        }
        total += loss.item();
    }
    Ok(total / texts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{Example, Label};
    use crate::surrogate::{log_prob, SurrogateConfig};

    fn small() -> SurrogateConfig {
        SurrogateConfig {
            vocab: 16,
            width: 8,
            layers: 1,
            heads: 2,
            ff_width: 16,
            max_len: 8,
            classes: 2,
            seq_len: 4,
        }
    }

    fn toy() -> LabeledSet {
        LabeledSet::new(
            (0..24)
                .map(|i| {
                    let c = i % 2;
                    Example::new(vec![3 + c as u32, 5 + (i % 5) as u32, 3 + c as u32], Label::Class(c))
                })
                .collect(),
        )
    }

    fn mean_lp(ckpt: &SurrogateCheckpoint, prefix: Option<&PrefixParams>, data: &LabeledSet) -> f64 {
        data.examples.iter().map(|e| log_prob(ckpt, prefix, e).unwrap()).sum::<f64>() / data.len() as f64
    }

    #[test]
    fn full_fine_tuning_raises_likelihood() {
        let ckpt = SurrogateCheckpoint::init(small(), 1).unwrap();
        let data = toy();
        let cfg = TrainConfig {
            epochs: 10,
            lr: 1e-2,
            ..TrainConfig::dataset(3)
        };
        let tuned = fine_tune_full(&ckpt, &data, &cfg).unwrap();
        assert!(mean_lp(&tuned, None, &data) > mean_lp(&ckpt, None, &data) + 0.1);
        let again = fine_tune_full(&ckpt, &data, &cfg).unwrap();
        assert_eq!(tuned.fingerprint(), again.fingerprint());
    }

    #[test]
    fn prefix_tuning_raises_likelihood_and_freezes_backbone() {
        let ckpt = SurrogateCheckpoint::init(small(), 2).unwrap();
        let before = ckpt.to_bytes().unwrap();
        let data = toy();
        let cfg = TrainConfig {
            epochs: 10,
            lr: 5e-2,
            ..TrainConfig::dataset(4)
        };
        let prefix = fine_tune_prefix(&ckpt, &data, 4, DEFAULT_PREFIX_INIT_STD, &cfg).unwrap();
        assert_eq!(ckpt.to_bytes().unwrap(), before);
        assert_eq!(prefix.numel(), 2 * 4 * 8);
        assert!(mean_lp(&ckpt, Some(&prefix), &data) > mean_lp(&ckpt, None, &data));
    }

    #[test]
    fn zero_prefix_length_rejected() {
        let ckpt = SurrogateCheckpoint::init(small(), 2).unwrap();
        let err = fine_tune_prefix(&ckpt, &toy(), 0, 0.02, &TrainConfig::dataset(0)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        let ckpt = SurrogateCheckpoint::init(small(), 2).unwrap();
        let data = LabeledSet::new(vec![
            Example::new(vec![3], Label::Class(0)),
            Example::new(vec![4], Label::Scalar(1.0)),
        ]);
        assert!(fine_tune_full(&ckpt, &data, &TrainConfig::dataset(0)).is_err());
    }

    #[test]
    fn masking_always_hides_a_real_token() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let (input, pos) = mask_tokens(&[7, PAD, 9], &mut rng);
            assert!(!pos.is_empty());
            assert!(pos.iter().all(|&i| i != 1));
            assert_eq!(input[1], PAD);
            assert!(pos.iter().all(|&i| input[i] == MASK));
        }
    }

    #[test]
    fn pretraining_lowers_masked_loss() {
        let ckpt = SurrogateCheckpoint::init(small(), 5).unwrap();
        let texts: Vec<Vec<u32>> = (0..32u32).map(|i| vec![3 + i % 4, 7, 3 + i % 4, 7, 3 + i % 4]).collect();
        let cfg = TrainConfig {
            epochs: 8,
            lr: 1e-2,
            ..TrainConfig::dataset(6)
        };
        let trained = pretrain_masked(&ckpt, &texts, &cfg).unwrap();
        let before = masked_lm_loss(&ckpt, &texts, 9).unwrap();
        let after = masked_lm_loss(&trained, &texts, 9).unwrap();
        assert!(after < before - 0.2, "{before} -> {after}");
        assert!(matches!(pretrain_masked(&ckpt, &[], &cfg), Err(Error::Argument(_))));
    }
}
