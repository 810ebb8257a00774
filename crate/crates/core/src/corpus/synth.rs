//! Synthetic paper/idea corpora with planted score functions.
//!
//! Ideas are built from short sentence templates whose adjective slots are filled either
//! with neutral words or with marker words for one of the three dimensions. Each
//! dimension's score is a saturating function of its marker density, so every label in
//! the corpus is an exactly known function of the text.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::ScoreRanges;
use super::text::{detokenize, tokenize};
use super::{Corpus, DimScores, IdeaRecord, PaperRecord, Section};
use crate::rng::rng_from;

/// Marker vocabularies and the planted score function over them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub novelty: Vec<String>,
    pub feasibility: Vec<String>,
    pub effectiveness: Vec<String>,
    /// Marker density (markers per idea token) at which a dimension reaches 1.
    pub saturation: f64,
    /// Feasibility is scaled by `1 − penalty · novelty`; 0 makes the dimensions orthogonal.
    pub feasibility_penalty: f64,
    /// Upper bound of the per-idea marker rate drawn for each dimension.
    pub max_rate: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            novelty: words(&["quantum", "hyperbolic", "causal", "neuromorphic", "topological", "symbolic"]),
            feasibility: words(&["lightweight", "cheap", "small", "public", "efficient", "modest"]),
            effectiveness: words(&["robust", "significant", "strong", "consistent", "reliable", "substantial"]),
            saturation: 0.1,
            feasibility_penalty: 0.5,
            max_rate: 0.3,
        }
    }
}

impl MarkerSpec {
    /// Same markers with no coupling between novelty and feasibility.
    pub fn orthogonal() -> Self {
        Self {
            feasibility_penalty: 0.0,
            ..Self::default()
        }
    }

    pub fn markers(&self, dim: super::Dimension) -> &[String] {
        match dim {
            super::Dimension::Novelty => &self.novelty,
            super::Dimension::Feasibility => &self.feasibility,
            super::Dimension::Effectiveness => &self.effectiveness,
        }
    }

    /// Planted scores of a token sequence.
    pub fn score_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> DimScores {
        let n = tokens.len().max(1) as f64;
        let count = |set: &[String]| {
            tokens
                .iter()
                .filter(|t| set.iter().any(|m| m == t.as_ref()))
                .count() as f64
        };
        let level = |c: f64| (c / n / self.saturation).min(1.0);
        let novelty = level(count(&self.novelty));
        let feasibility = level(count(&self.feasibility)) * (1.0 - self.feasibility_penalty * novelty);
        let effectiveness = level(count(&self.effectiveness));
        DimScores {
            novelty,
            feasibility,
            effectiveness,
            overall: Some((novelty + feasibility + effectiveness) / 3.0),
        }
    }
}

/// Planted scores of an idea's full text.
pub fn planted_scores(spec: &MarkerSpec, idea: &IdeaRecord) -> DimScores {
    spec.score_tokens(&tokenize(&idea.full_text()))
}

/// Word pools and sentence templates. `{A}` is an adjective slot, `{T}` the paper topic
/// and `{X}` a noun.
#[derive(Clone, Debug)]
pub struct Templates {
    pub topics: Vec<&'static str>,
    pub nouns: Vec<&'static str>,
    pub neutral: Vec<&'static str>,
    pub method: Vec<&'static str>,
    pub experiment: Vec<&'static str>,
    pub abstracts: Vec<&'static str>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            topics: vec![
                "graph", "vision", "language", "speech", "protein", "robot", "molecule", "music",
                "climate", "medical", "code", "tabular",
            ],
            nouns: vec!["attention", "layers", "features", "embeddings", "objectives", "priors", "kernels", "memories"],
            neutral: vec!["standard", "typical", "deep", "large", "common", "basic"],
            method: vec![
                "we propose a {A} {A} {T} model .",
                "the {A} model uses {A} {X} for {A} {T} data .",
                "we add {A} {X} to the {A} encoder .",
                "our {A} method learns {A} {X} from {A} {T} signals .",
                "a {A} decoder refines the {A} {X} .",
            ],
            experiment: vec![
                "we evaluate on {A} {A} {T} benchmarks .",
                "we compare with {A} baselines on {A} {T} tasks .",
                "we measure {A} {X} under {A} settings .",
                "results should show {A} {A} gains .",
                "we train {A} models with {A} budgets .",
            ],
            abstracts: vec![
                "we study {T} {X} . we report results on {T} benchmarks .",
                "this paper analyzes {X} for {T} data . experiments cover {T} tasks .",
                "we revisit {T} models with {X} . our findings hold on {T} benchmarks .",
            ],
        }
    }
}

/// Marker probabilities for the adjective slots of one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IdeaRates {
    pub novelty: f64,
    pub feasibility: f64,
    pub effectiveness: f64,
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn fill(
    rng: &mut ChaCha8Rng,
    tpl: &Templates,
    spec: &MarkerSpec,
    template: &str,
    topic: &str,
    rates: IdeaRates,
) -> Vec<String> {
    template
        .split(' ')
        .map(|slot| match slot {
            "{T}" => topic.to_string(),
            "{X}" => pick(rng, &tpl.nouns).to_string(),
            "{A}" => {
                let u: f64 = rng.gen();
                let choose = |set: &[String], rng: &mut ChaCha8Rng| set[rng.gen_range(0..set.len())].clone();
                if u < rates.novelty {
                    choose(&spec.novelty, rng)
                } else if u < rates.novelty + rates.feasibility {
                    choose(&spec.feasibility, rng)
                } else if u < rates.novelty + rates.feasibility + rates.effectiveness {
                    choose(&spec.effectiveness, rng)
                } else {
                    pick(rng, &tpl.neutral).to_string()
                }
            }
            w => w.to_string(),
        })
        .collect()
}

/// Generates `(method_text, experiment_plan_text)` with one rate triple per sentence;
/// the first `method_sentences` rates go to the method.
pub fn synth_idea(
    rng: &mut ChaCha8Rng,
    tpl: &Templates,
    spec: &MarkerSpec,
    topic: &str,
    rates: &[IdeaRates],
    method_sentences: usize,
) -> (String, String) {
    let mut method = Vec::new();
    let mut plan = Vec::new();
    for (i, r) in rates.iter().enumerate() {
        let (pool, out) = if i < method_sentences {
            (&tpl.method, &mut method)
        } else {
            (&tpl.experiment, &mut plan)
        };
        let template = pick(rng, pool);
        out.extend(fill(rng, tpl, spec, template, topic, *r));
    }
    (detokenize(&method), detokenize(&plan))
}

/// Builds a scored corpus of `n` papers, each with one idea. Scores are stored as raw
/// values on the default 1–10 scale and normalize back to the planted scores.
pub fn synth_corpus(seed: u64, n: usize, spec: &MarkerSpec) -> Corpus {
    let tpl = Templates::default();
    let ranges = ScoreRanges::default();
    let mut papers = Vec::with_capacity(n);
    let mut ideas = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = rng_from(&[seed, k as u64]);
        let topic = pick(&mut rng, &tpl.topics);
        let noun = pick(&mut rng, &tpl.nouns);
        let abstract_tpl = pick(&mut rng, &tpl.abstracts);
        let abstract_text = detokenize(
            &abstract_tpl
                .split(' ')
                .map(|w| match w {
                    "{T}" => topic,
                    "{X}" => noun,
                    w => w,
                })
                .collect::<Vec<_>>(),
        );
        let mut cited: Vec<String> = (0..k).map(|j| format!("paper-{j:05}")).collect();
        cited.shuffle(&mut rng);
        cited.truncate(rng.gen_range(0..=3usize));
        let paper_id = format!("paper-{k:05}");
        papers.push(PaperRecord {
            id: paper_id.clone(),
            title: format!("{topic} {noun} study"),
            abstract_text: abstract_text.clone(),
            sections: vec![
                Section {
                    name: "introduction".into(),
                    text: abstract_text,
                },
                Section {
                    name: "method".into(),
                    text: format!("we use {noun} for {topic} problems."),
                },
            ],
            cited_ids: cited,
            venue_tag: if rng.gen_bool(0.5) { "synth-2023" } else { "synth-2024" }.into(),
        });

        let rates = IdeaRates {
            novelty: rng.gen_range(0.0..spec.max_rate),
            feasibility: rng.gen_range(0.0..spec.max_rate),
            effectiveness: rng.gen_range(0.0..spec.max_rate),
        };
        let method_n = rng.gen_range(2..=4usize);
        let plan_n = rng.gen_range(2..=4usize);
        let (method, plan) = synth_idea(&mut rng, &tpl, spec, topic, &vec![rates; method_n + plan_n], method_n);
        let idea = IdeaRecord::new(format!("idea-{k:05}"), paper_id, method, plan);
        let s = planted_scores(spec, &idea);
        scores.push(ranges.denormalize(&idea.id, &s));
        ideas.push(idea);
    }
    Corpus {
        seed: Some(seed),
        papers,
        ideas,
        scores,
        ranges,
        split: None,
        marker_spec: Some(spec.clone()),
    }
}
