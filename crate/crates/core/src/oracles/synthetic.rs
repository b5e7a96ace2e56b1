use serde::{Deserialize, Serialize};
use taskvec_autodiff::mix;

use super::Backend;
use crate::label::{Label, LabelKind, FIRST_CONTENT, PAD};
use crate::surrogate::{predict, PrefixParams, SurrogateCheckpoint};
use crate::Result;

/// Returns the first `seq_len` input tokens.
#[derive(Clone, Debug)]
pub struct EchoModel {
    pub seq_len: usize,
}

impl EchoModel {
    pub fn new(seq_len: usize) -> Self {
        Self { seq_len }
    }
}

impl Backend for EchoModel {
    fn kind(&self) -> LabelKind {
        LabelKind::Tokens
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        Ok(Label::Tokens(input.iter().take(self.seq_len).copied().collect()))
    }
}

/// Same output for every input.
#[derive(Clone, Debug)]
pub struct ConstantModel {
    pub output: Label,
}

impl Backend for ConstantModel {
    fn kind(&self) -> LabelKind {
        self.output.kind()
    }

    fn predict(&self, _: Option<&[u32]>, _: &[u32]) -> Result<Label> {
        Ok(self.output.clone())
    }
}

/// Class `c` is voted for by token `FIRST_CONTENT + c`; the most frequent
/// voting token wins, ties to the lower class, no votes give class 0.
#[derive(Clone, Debug)]
pub struct MajorityTokenModel {
    pub classes: usize,
}

impl MajorityTokenModel {
    pub fn new(classes: usize) -> Self {
        Self { classes }
    }

    pub fn classify(classes: usize, input: &[u32]) -> usize {
        let mut counts = vec![0usize; classes];
        for &t in input {
            if let Some(c) = (t as usize).checked_sub(FIRST_CONTENT as usize) {
                if c < classes {
                    counts[c] += 1;
                }
            }
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best
    }
}

impl Backend for MajorityTokenModel {
    fn kind(&self) -> LabelKind {
        LabelKind::Class
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        Ok(Label::Class(Self::classify(self.classes, input)))
    }
}

/// Binary linear token scorer: class 1 iff `bias + Σ weight[token] > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconModel {
    /// Indexed by token id; missing ids weigh zero.
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

impl LexiconModel {
    pub fn score(&self, input: &[u32]) -> f64 {
        self.bias
            + input
                .iter()
                .filter(|&&t| t != PAD)
                .map(|&t| self.weights.get(t as usize).copied().unwrap_or(0.0))
                .sum::<f64>()
    }

    pub fn classify(&self, input: &[u32]) -> usize {
        usize::from(self.score(input) > 0.0)
    }
}

impl Backend for LexiconModel {
    fn kind(&self) -> LabelKind {
        LabelKind::Class
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        Ok(Label::Class(self.classify(input)))
    }
}

/// A trained surrogate-architecture model, optionally prefix-conditioned.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub ckpt: SurrogateCheckpoint,
    pub prefix: Option<PrefixParams>,
    pub kind: LabelKind,
}

impl Backend for SurrogateModel {
    fn kind(&self) -> LabelKind {
        self.kind
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        let input = &input[..input.len().min(self.ckpt.config.max_len)];
        predict(&self.ckpt, self.prefix.as_ref(), input, self.kind)
    }
}

/// Routing entry of a [`SimulatedLlm`]: this prompt makes the model follow
/// task `task` with probability `accuracy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub prompt: Vec<u32>,
    pub task: usize,
    pub accuracy: f64,
}

/// A prompt-conditioned classifier with known ground truth.
///
/// For a routed prompt the answer is the routed task's label with
/// probability `accuracy` and a different class otherwise; independently,
/// with probability `noise` the answer is replaced by a uniform class.
/// Unrouted prompts answer uniformly at random. All randomness is a hash of
/// `(seed, prompt, input)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedLlm {
    pub tasks: Vec<LexiconModel>,
    pub routes: Vec<Route>,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
}

fn hash_tokens(seed: u64, tokens: &[u32]) -> u64 {
    tokens
        .iter()
        .fold(mix(seed ^ tokens.len() as u64), |h, &t| mix(h ^ u64::from(t)))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl SimulatedLlm {
    pub fn route(&self, prompt: &[u32]) -> Option<&Route> {
        self.routes.iter().find(|r| r.prompt == prompt)
    }

    pub fn answer(&self, prompt: &[u32], input: &[u32]) -> usize {
        let h = mix(hash_tokens(self.seed, prompt) ^ hash_tokens(!self.seed, input));
        let uniform = |k: u64| (mix(h ^ k) % self.classes as u64) as usize;
        let Some(route) = self.route(prompt) else {
            return uniform(1);
        };
        if unit(mix(h ^ 2)) < self.noise {
            return uniform(3);
        }
        let truth = self.tasks[route.task].classify(input);
        if unit(mix(h ^ 4)) < route.accuracy {
            truth
        } else {
            let other = (mix(h ^ 5) % (self.classes as u64 - 1)) as usize;
            if other >= truth {
                other + 1
            } else {
                other
            }
        }
    }
}

impl Backend for SimulatedLlm {
    fn kind(&self) -> LabelKind {
        LabelKind::Class
    }

    fn accepts_prompt(&self) -> bool {
        true
    }

    fn predict(&self, prompt: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        Ok(Label::Class(self.answer(prompt.unwrap_or(&[]), input)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_examples() {
        assert_eq!(MajorityTokenModel::classify(8, &[3, 3, 3, 3, 3, 4]), 0);
        assert_eq!(MajorityTokenModel::classify(8, &[5, 4, 4, 5]), 1);
        assert_eq!(MajorityTokenModel::classify(8, &[40, 41]), 0);
        assert_eq!(MajorityTokenModel::classify(8, &[10, 10, 3]), 7);
    }

    #[test]
    fn constant_ignores_input() {
        let m = ConstantModel { output: Label::Scalar(2.5) };
        assert_eq!(m.predict(None, &[3]).unwrap(), m.predict(None, &[9, 9, 9]).unwrap());
    }

    #[test]
    fn lexicon_positive_tokens_give_positive_class() {
        let mut weights = vec![0.0; 16];
        weights[7] = 1.0;
        weights[8] = -1.0;
        let m = LexiconModel { weights, bias: 0.0 };
        assert_eq!(m.classify(&[7, 7, 3]), 1);
        assert_eq!(m.classify(&[8, 3]), 0);
    }

    fn llm(accuracy: [f64; 2], noise: f64) -> SimulatedLlm {
        let mut a = vec![0.0; 20];
        let mut b = vec![0.0; 20];
        for t in 3..20 {
            a[t] = if t % 2 == 0 { 1.0 } else { -1.0 };
            b[t] = if t < 11 { 1.0 } else { -1.0 };
        }
        SimulatedLlm {
            tasks: vec![LexiconModel { weights: a, bias: 0.1 }, LexiconModel { weights: b, bias: 0.1 }],
            routes: vec![
                Route { prompt: vec![30], task: 0, accuracy: accuracy[0] },
                Route { prompt: vec![31], task: 1, accuracy: accuracy[1] },
            ],
            noise,
            classes: 2,
            seed: 17,
        }
    }

    fn probes(n: usize) -> Vec<Vec<u32>> {
        let mut rng = taskvec_autodiff::Rng::new(5);
        (0..n).map(|_| (0..9).map(|_| 3 + rng.below(17) as u32).collect()).collect()
    }

    #[test]
    fn routed_accuracy_matches_configuration() {
        let m = llm([0.9, 0.7], 0.0);
        let xs = probes(4000);
        for (prompt, task, acc) in [(30, 0, 0.9), (31, 1, 0.7)] {
            let hits = xs.iter().filter(|x| m.answer(&[prompt], x) == m.tasks[task].classify(x)).count();
            let observed = hits as f64 / xs.len() as f64;
            assert!((observed - acc).abs() < 0.03, "{prompt}: {observed}");
        }
    }

    #[test]
    fn noise_pulls_toward_chance() {
        let m = llm([1.0, 1.0], 0.2);
        let xs = probes(4000);
        let hits = xs.iter().filter(|x| m.answer(&[30], x) == m.tasks[0].classify(x)).count();
        let observed = hits as f64 / xs.len() as f64;
        assert!((observed - 0.9).abs() < 0.03, "{observed}");
    }

    #[test]
    fn answers_are_deterministic() {
        let m = llm([0.6, 0.6], 0.1);
        for x in probes(50) {
            assert_eq!(m.answer(&[30], &x), m.clone().answer(&[30], &x));
        }
    }
}
