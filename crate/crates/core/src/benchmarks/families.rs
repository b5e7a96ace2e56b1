use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use taskvec_autodiff::Rng;

use crate::label::{Example, Label, LabelKind, LabeledSet, FIRST_CONTENT, MASK, SEP};
use crate::oracles::{LexiconModel, MajorityTokenModel};
use crate::{Error, Result};

/// Token ids used by every generator lie below this bound.
pub const FAMILY_VOCAB: u32 = 64;
/// Length of `fill-mask-seq` inputs and labels.
pub const FILL_MASK_LEN: usize = 8;
/// Classes of `majority-class`; the other class families are binary.
pub const MAJORITY_CLASSES: usize = 4;
/// Upper end of the `token-count-regression` target range.
pub const COUNT_MAX: f64 = 3.0;

const CONTENT: u32 = FAMILY_VOCAB - FIRST_CONTENT;
const PARITY_TOKEN: u32 = 5;
const HEAVY_END: u32 = FIRST_CONTENT + 8;
const LEXICON_STREAM: u64 = 0x5e47;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    MajorityClass,
    Parity,
    PairMatch,
    TokenCountRegression,
    FillMaskSeq,
    SentimentLexicon,
}

impl FamilyId {
    pub const ALL: [FamilyId; 6] = [
        FamilyId::MajorityClass,
        FamilyId::Parity,
        FamilyId::PairMatch,
        FamilyId::TokenCountRegression,
        FamilyId::FillMaskSeq,
        FamilyId::SentimentLexicon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyId::MajorityClass => "majority-class",
            FamilyId::Parity => "parity",
            FamilyId::PairMatch => "pair-match",
            FamilyId::TokenCountRegression => "token-count-regression",
            FamilyId::FillMaskSeq => "fill-mask-seq",
            FamilyId::SentimentLexicon => "sentiment-lexicon",
        }
    }

    pub fn kind(self) -> LabelKind {
        match self {
            FamilyId::TokenCountRegression => LabelKind::Scalar,
            FamilyId::FillMaskSeq => LabelKind::Tokens,
            _ => LabelKind::Class,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            FamilyId::MajorityClass => MAJORITY_CLASSES,
            _ => 2,
        }
    }

    /// The family's labeling rule applied to an arbitrary input.
    pub fn label(self, input: &[u32]) -> Label {
        match self {
            FamilyId::MajorityClass => Label::Class(MajorityTokenModel::classify(MAJORITY_CLASSES, input)),
            FamilyId::Parity => Label::Class(input.iter().filter(|&&t| t == PARITY_TOKEN).count() % 2),
            FamilyId::PairMatch => {
                let eq = match input.iter().position(|&t| t == SEP) {
                    Some(i) => input[..i] == input[i + 1..],
                    None => false,
                };
                Label::Class(eq as usize)
            }
            FamilyId::TokenCountRegression => {
                let heavy = input.iter().filter(|&&t| (FIRST_CONTENT..HEAVY_END).contains(&t)).count();
                Label::Scalar((heavy as f64 / 4.0).min(COUNT_MAX))
            }
            FamilyId::FillMaskSeq => Label::Tokens(fill_mask_answer(input)),
            FamilyId::SentimentLexicon => Label::Class(sentiment_lexicon().classify(input)),
        }
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FamilyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyId::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task family `{s}`")))
    }
}

/// The fixed lexicon of `sentiment-lexicon`: each content token weighs
/// -1, 0 or +1 with probabilities 1/4, 1/2, 1/4.
pub fn sentiment_lexicon() -> LexiconModel {
    let mut rng = Rng::new(LEXICON_STREAM);
    let mut weights = vec![0.0; FAMILY_VOCAB as usize];
    for w in &mut weights[FIRST_CONTENT as usize..] {
        *w = match rng.below(4) {
            0 => -1.0,
            1 => 1.0,
            _ => 0.0,
        };
    }
    LexiconModel { weights, bias: 0.0 }
}

fn content(offset: u32) -> u32 {
    FIRST_CONTENT + offset % CONTENT
}

/// Recovers an arithmetic sequence from its unmasked entries; inputs that
/// are not a masked progression come back as their first positions.
fn fill_mask_answer(input: &[u32]) -> Vec<u32> {
    let known: Vec<(usize, u32)> = input
        .iter()
        .take(FILL_MASK_LEN)
        .enumerate()
        .filter(|(_, &t)| t != MASK)
        .map(|(i, &t)| (i, t))
        .collect();
    if let [(i, a), (j, b), ..] = known[..] {
        let di = (j - i) as u32;
        let delta = (b + CONTENT - a) % CONTENT;
        if let Some(step) = (1..=3).find(|s| (s * di) % CONTENT == delta) {
            let start = (a - FIRST_CONTENT + CONTENT * 8 - step * i as u32) % CONTENT;
            let seq: Vec<u32> = (0..FILL_MASK_LEN as u32).map(|k| content(start + k * step)).collect();
            if known.iter().all(|&(k, t)| seq[k] == t) {
                return seq;
            }
        }
    }
    input.iter().take(FILL_MASK_LEN).copied().collect()
}

/// Generator parameters. The output is a pure function of these fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    pub family: FamilyId,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    /// Probability that a label is replaced by a uniformly random one.
    #[serde(default)]
    pub noise: f64,
    /// Zipf exponent of the content-token distribution; 0 is uniform.
    #[serde(default)]
    pub skew: f64,
}

impl TaskFamily {
    pub fn new(family: FamilyId, seed: u64, train: usize, test: usize) -> Self {
        Self {
            family,
            seed,
            train,
            test,
            noise: 0.0,
            skew: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::Argument("train and test sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Argument(format!("noise {} outside [0, 1]", self.noise)));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::Argument(format!("skew {} must be finite and non-negative", self.skew)));
        }
        Ok(())
    }
}

struct Sampler {
    rng: Rng,
    cdf: Vec<f64>,
}

impl Sampler {
    fn new(seed: u64, skew: f64) -> Self {
        let mut cdf = Vec::with_capacity(CONTENT as usize);
        let mut total = 0.0;
        for k in 0..CONTENT {
            total += 1.0 / ((k + 1) as f64).powf(skew);
            cdf.push(total);
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { rng: Rng::new(seed), cdf }
    }

    fn token(&mut self) -> u32 {
        let u = self.rng.uniform();
        let k = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        FIRST_CONTENT + k as u32
    }

    fn tokens(&mut self, n: usize) -> Vec<u32> {
        (0..n).map(|_| self.token()).collect()
    }

    fn len(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }
}

/// One input of `family` before labeling.
fn draw_input(family: FamilyId, s: &mut Sampler) -> Vec<u32> {
    match family {
        FamilyId::MajorityClass => {
            let n = s.len(6, 12);
            let mut x = s.tokens(n);
            let c = s.rng.below(MAJORITY_CLASSES) as u32;
            for _ in 0..n.div_ceil(3) {
                let i = s.rng.below(n);
                x[i] = FIRST_CONTENT + c;
            }
            x
        }
        FamilyId::Parity => {
            let n = s.len(4, 10);
            (0..n)
                .map(|_| {
                    if s.rng.bernoulli(0.3) {
                        PARITY_TOKEN
                    } else {
                        loop {
                            let t = s.token();
                            if t != PARITY_TOKEN {
                                break t;
                            }
                        }
                    }
                })
                .collect()
        }
        FamilyId::PairMatch => {
            let h = s.len(2, 5);
            let a = s.tokens(h);
            let mut b = a.clone();
            if s.rng.bernoulli(0.5) {
                let i = s.rng.below(h);
                while b[i] == a[i] {
                    b[i] = s.token();
                }
            }
            let mut x = a;
            x.push(SEP);
            x.extend(b);
            x
        }
        FamilyId::TokenCountRegression => {
            let n = s.len(4, 12);
            let rate = 0.8 * s.rng.uniform();
            (0..n)
                .map(|_| {
                    if s.rng.bernoulli(rate) {
                        FIRST_CONTENT + s.rng.below((HEAVY_END - FIRST_CONTENT) as usize) as u32
                    } else {
                        HEAVY_END + s.rng.below((FAMILY_VOCAB - HEAVY_END) as usize) as u32
                    }
                })
                .collect()
        }
        FamilyId::FillMaskSeq => {
            let start = s.token() - FIRST_CONTENT;
            let step = 1 + s.rng.below(3) as u32;
            let mut x: Vec<u32> = (0..FILL_MASK_LEN as u32).map(|k| content(start + k * step)).collect();
            let masks = s.len(1, 3);
            let mut positions: Vec<usize> = (0..FILL_MASK_LEN).collect();
            s.rng.shuffle(&mut positions);
            for &i in &positions[..masks] {
                x[i] = MASK;
            }
            x
        }
        FamilyId::SentimentLexicon => {
            let n = s.len(4, 12);
            s.tokens(n)
        }
    }
}

fn noisy_label(family: FamilyId, s: &mut Sampler) -> Label {
    match family.kind() {
        LabelKind::Scalar => Label::Scalar(COUNT_MAX * s.rng.uniform()),
        LabelKind::Tokens => Label::Tokens(s.tokens(FILL_MASK_LEN)),
        _ => Label::Class(s.rng.below(family.classes())),
    }
}

/// Draws `n` inputs of `family` that are pairwise distinct.
pub fn family_inputs(family: FamilyId, seed: u64, skew: f64, n: usize) -> Result<Vec<Vec<u32>>> {
    let mut s = Sampler::new(seed, skew);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 50 * n + 1000 {
            return Err(Error::Argument(format!(
                "{family} cannot produce {n} distinct inputs at skew {skew}"
            )));
        }
        let x = draw_input(family, &mut s);
        if seen.insert(x.clone()) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Generates disjoint train and test splits.
pub fn gen_family(spec: &TaskFamily) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let inputs = family_inputs(spec.family, spec.seed, spec.skew, spec.train + spec.test)?;
    let mut noise = Sampler::new(spec.seed ^ 0x6e6f697365, 0.0);
    let examples: Vec<Example> = inputs
        .into_iter()
        .map(|x| {
            let label = if noise.rng.bernoulli(spec.noise) {
                noisy_label(spec.family, &mut noise)
            } else {
                spec.family.label(&x)
            };
            Example::new(x, label)
        })
        .collect();
    let mut examples = examples;
    let test = examples.split_off(spec.train);
    Ok((LabeledSet::new(examples), LabeledSet::new(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_labels() {
        assert_eq!(FamilyId::Parity.label(&[5, 9, 5, 5]), Label::Class(1));
        assert_eq!(FamilyId::Parity.label(&[5, 5]), Label::Class(0));
        assert_eq!(FamilyId::PairMatch.label(&[7, 8, SEP, 7, 8]), Label::Class(1));
        assert_eq!(FamilyId::PairMatch.label(&[7, 8, SEP, 8, 7]), Label::Class(0));
        assert_eq!(FamilyId::TokenCountRegression.label(&[3, 4, 40, 10]), Label::Scalar(0.75));
        assert_eq!(FamilyId::MajorityClass.label(&[6, 6, 3, 20]), Label::Class(3));
        assert_eq!(
            FamilyId::FillMaskSeq.label(&[10, MASK, 14, 16, MASK, 20, 22, 24]),
            Label::Tokens(vec![10, 12, 14, 16, 18, 20, 22, 24])
        );
        assert_eq!(
            FamilyId::FillMaskSeq.label(&[62, 63, MASK, 4, 5, 6, 7, 8]),
            Label::Tokens(vec![62, 63, 3, 4, 5, 6, 7, 8])
        );
    }

    #[test]
    fn deterministic_and_disjoint() {
        for family in FamilyId::ALL {
            let spec = TaskFamily::new(family, 9, 50, 30);
            let (train, test) = gen_family(&spec).unwrap();
            assert_eq!((train.len(), test.len()), (50, 30));
            assert_eq!(gen_family(&spec).unwrap(), (train.clone(), test.clone()));
            let seen: HashSet<&[u32]> = train.inputs().collect();
            assert!(test.inputs().all(|x| !seen.contains(x)), "{family}");
            for ex in train.examples.iter().chain(&test.examples) {
                assert_eq!(ex.label, family.label(&ex.tokens), "{family}");
                assert!(ex.tokens.iter().all(|&t| t < FAMILY_VOCAB));
            }
        }
    }

    #[test]
    fn labels_are_not_constant() {
        for family in FamilyId::ALL {
            let (train, _) = gen_family(&TaskFamily::new(family, 1, 200, 1)).unwrap();
            let first = &train.examples[0].label;
            assert!(train.examples.iter().any(|e| &e.label != first), "{family}");
            if family.kind() == LabelKind::Class {
                for c in 0..family.classes() {
                    let n = train.examples.iter().filter(|e| e.label == Label::Class(c)).count();
                    assert!(n >= 20, "{family} class {c}: {n}");
                }
            }
        }
    }

    #[test]
    fn full_noise_randomizes_labels() {
        let mut spec = TaskFamily::new(FamilyId::Parity, 2, 400, 1);
        spec.noise = 1.0;
        let (train, _) = gen_family(&spec).unwrap();
        let agree = train.examples.iter().filter(|e| e.label == FamilyId::Parity.label(&e.tokens)).count();
        assert!((120..280).contains(&agree), "{agree}");
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!("sudoku".parse::<FamilyId>(), Err(Error::Argument(_))));
        assert_eq!("pair-match".parse::<FamilyId>().unwrap(), FamilyId::PairMatch);
    }
}
