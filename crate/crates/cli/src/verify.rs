//! Quick invariant suite behind `taskvec verify`. Smaller than the
//! acceptance suite so it finishes in seconds on one core.

use std::collections::BTreeMap;

use taskvec::benchmarks::ndcg;
use taskvec::extractors::{cosine_similarity, taskemb_extract, taskemb_fisher, ExtractorConfig, Method, Origin};
use taskvec::label::{Example, Label, LabeledSet, FIRST_CONTENT, PAD};
use taskvec::oracles::protocol::{parse_reply, serve, Reply};
use taskvec::oracles::MajorityTokenModel;
use taskvec::surrogate::{Surrogate, SurrogateCheckpoint, SurrogateConfig, TrainConfig};
use taskvec::Error;
use taskvec_autodiff::{finite_diff_grad5, max_relative_error, objective, value_and_grad, Rng};

const GRAD_CONFIGS: usize = 12;
const GRAD_STEP: f64 = 3e-5;
const GRAD_REL_FLOOR: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-6;
const FISHER_SETS: usize = 4;
const FISHER_TOL: f64 = 1e-10;
/// NDCG of order (c, b, a) under relevance a=3, b=2, c=1.
const NDCG_EXPECTED: f64 = 0.789_998_004_246_035_8;
const NDCG_TOL: f64 = 1e-5;

pub type Outcome = Result<String, String>;

type Check = (&'static str, fn() -> Outcome);

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Outcome,
}

impl CheckResult {
    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(d) => format!("PASS {}: {d}", self.name),
            Err(d) => format!("FAIL {}: {d}", self.name),
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_config(rng: &mut Rng) -> SurrogateConfig {
    let heads = 1 + rng.below(2);
    SurrogateConfig {
        vocab: 8 + rng.below(8),
        width: heads * (2 + rng.below(2)),
        layers: 1 + rng.below(2),
        heads,
        ff_width: 2 + rng.below(5),
        max_len: 4 + rng.below(5),
        classes: 2 + rng.below(3),
        seq_len: 1 + rng.below(3),
    }
}

fn random_tokens(rng: &mut Rng, c: &SurrogateConfig) -> Vec<u32> {
    let len = 1 + rng.below(c.max_len);
    (0..len)
        .map(|i| if i > 0 && rng.bernoulli(0.15) { PAD } else { FIRST_CONTENT + rng.below(c.vocab - FIRST_CONTENT as usize) as u32 })
        .collect()
}

fn random_labels(rng: &mut Rng, c: &SurrogateConfig) -> [Label; 4] {
    let raw: Vec<f64> = (0..c.classes).map(|_| 0.1 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    [
        Label::Class(rng.below(c.classes)),
        Label::Distribution(raw.iter().map(|x| x / total).collect()),
        Label::Scalar(2.0 * rng.normal()),
        Label::Tokens((0..c.seq_len).map(|_| rng.below(c.vocab) as u32).collect()),
    ]
}

fn gradient() -> Outcome {
    let mut rng = Rng::new(0x7e51);
    let mut worst = 0.0f64;
    for i in 0..GRAD_CONFIGS {
        let c = random_config(&mut rng);
        let ckpt = SurrogateCheckpoint::init(c, i as u64).map_err(err)?;
        let model = Surrogate::new(c).map_err(err)?;
        let tokens = random_tokens(&mut rng, &c);
        for label in random_labels(&mut rng, &c) {
            let ex = Example::new(tokens.clone(), label);
            let f = objective(|_, v| model.log_prob_var(v, None, &ex));
            let (_, g) = value_and_grad(f, &ckpt.params).map_err(err)?;
            let fd = finite_diff_grad5(f, &ckpt.params, GRAD_STEP).map_err(err)?;
            let e = max_relative_error(&g, &fd, GRAD_REL_FLOOR);
            if !(e <= GRAD_REL_TOL) {
                return Err(format!("config {i} {}: relative error {e:e} > {GRAD_REL_TOL:e}", ex.label.kind()));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("{GRAD_CONFIGS} configs × 4 label kinds, max relative error {worst:.2e}"))
}

fn fisher() -> Outcome {
    let mut rng = Rng::new(0xf15e);
    let mut worst = 0.0f64;
    for s in 0..FISHER_SETS {
        let c = random_config(&mut rng);
        let ckpt = SurrogateCheckpoint::init(c, s as u64).map_err(err)?;
        let model = Surrogate::new(c).map_err(err)?;
        let data = LabeledSet::new(
            (0..1 + rng.below(6))
                .map(|_| Example::new(random_tokens(&mut rng, &c), Label::Class(rng.below(c.classes))))
                .collect(),
        );
        let fast = taskemb_fisher(&ckpt, &data).map_err(err)?;
        let mut naive = vec![0.0; fast.len()];
        for ex in &data.examples {
            let (_, g) = value_and_grad(objective(|_, v| model.log_prob_var(v, None, ex)), &ckpt.params).map_err(err)?;
            for (acc, x) in naive.iter_mut().zip(g.tensors().iter().flat_map(|t| t.data())) {
                *acc += x * x / data.len() as f64;
            }
        }
        let dev = fast.iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !(dev <= FISHER_TOL) {
            return Err(format!("set {s}: deviation {dev:e} > {FISHER_TOL:e}"));
        }
        worst = worst.max(dev);
    }
    Ok(format!("{FISHER_SETS} sets, max deviation {worst:.1e}"))
}

fn small() -> SurrogateConfig {
    SurrogateConfig {
        vocab: 12,
        width: 4,
        layers: 1,
        heads: 2,
        ff_width: 4,
        max_len: 6,
        classes: 2,
        seq_len: 2,
    }
}

fn shared_space() -> Outcome {
    let ckpt = SurrogateCheckpoint::init(small(), 1).map_err(err)?;
    let data = LabeledSet::new((0..6).map(|i| Example::new(vec![3 + i % 5, 4 + i % 3], Label::Class((i % 2) as usize))).collect());
    let cfg = ExtractorConfig::new(Method::TaskEmb, TrainConfig { epochs: 1, ..TrainConfig::dataset(3) });
    let a = taskemb_extract(&ckpt, &data, &cfg, Origin::dataset("d")).map_err(err)?;
    let b = taskemb_extract(&ckpt, &data, &cfg, Origin::dataset("d")).map_err(err)?;
    if a.payload() != b.payload() {
        return Err("repeated extraction is not bit-identical".into());
    }
    let self_sim = cosine_similarity(&a, &b).map_err(err)?;
    if self_sim != 1.0 {
        return Err(format!("self similarity {self_sim}"));
    }
    let other = SurrogateCheckpoint::init(small(), 2).map_err(err)?;
    let c = taskemb_extract(&other, &data, &cfg, Origin::dataset("d")).map_err(err)?;
    match cosine_similarity(&a, &c) {
        Err(Error::IncompatibleSpace(_)) => Ok(format!("dim {}, repeat bit-identical, foreign surrogate rejected", a.dim())),
        other => Err(format!("foreign surrogate gave {other:?}")),
    }
}

fn protocol() -> Outcome {
    let input = "{\"type\":\"hello\"}\n{\"type\":\"predict\",\"id\":0,\"input\":[3,3,4]}\nnot json\n{\"type\":\"bye\"}\n{\"type\":\"hello\"}\n";
    let mut out = Vec::new();
    serve(input.as_bytes(), &mut out, &MajorityTokenModel::new(2), "verify").map_err(err)?;
    let text = String::from_utf8(out).map_err(err)?;
    let replies: Vec<Reply> = text.lines().map(parse_reply).collect::<Result<_, _>>().map_err(err)?;
    match replies.as_slice() {
        [Reply::Hello { .. }, Reply::Result { id: 0, .. }, Reply::Error { .. }] => Ok("hello, predict, malformed line, bye".into()),
        other => Err(format!("unexpected replies {other:?}")),
    }
}

fn metrics() -> Outcome {
    let rel: BTreeMap<String, f64> = [("a", 3.0), ("b", 2.0), ("c", 1.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let order: Vec<String> = ["c", "b", "a"].iter().map(|s| s.to_string()).collect();
    let v = ndcg(&order, &rel).map_err(err)?.value;
    if (v - NDCG_EXPECTED).abs() > NDCG_TOL {
        return Err(format!("ndcg {v} vs {NDCG_EXPECTED}"));
    }
    Ok(format!("ndcg {v:.6}"))
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: [Check; 5] = [
        ("gradient", gradient),
        ("fisher", fisher),
        ("shared-space", shared_space),
        ("protocol", protocol),
        ("metrics", metrics),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckResult { name, outcome: f() })
        .collect()
}
