//! Paper/idea/score records and everything that produces or reshapes them.

mod filter;
mod io;
mod split;
mod synth;
pub mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{filter_records, Entry, FilterConfig, RejectReason};
pub use io::{
    load_records, records_to_bytes, save_records, Corpus, CorpusManifest, Record, ScoreRanges,
    ScoreRecord, SplitIds, IDEAS_FILE, MANIFEST_FILE, PAPERS_FILE, SCHEMA_VERSION, SCORES_FILE,
};
pub use split::{split_corpus, CorpusSplit, SplitFractions};
pub use synth::{planted_scores, synth_corpus, synth_idea, IdeaRates, MarkerSpec, Templates};

/// One of the three quality dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "N")]
    Novelty,
    #[serde(rename = "F")]
    Feasibility,
    #[serde(rename = "E")]
    Effectiveness,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::Novelty,
        Dimension::Feasibility,
        Dimension::Effectiveness,
    ];

    pub fn index(self) -> usize {
        match self {
            Dimension::Novelty => 0,
            Dimension::Feasibility => 1,
            Dimension::Effectiveness => 2,
        }
    }

    /// Single-letter tag used in checkpoint slice names.
    pub fn tag(self) -> &'static str {
        match self {
            Dimension::Novelty => "N",
            Dimension::Feasibility => "F",
            Dimension::Effectiveness => "E",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Novelty => "novelty",
            Dimension::Feasibility => "feasibility",
            Dimension::Effectiveness => "effectiveness",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "N" | "n" | "novelty" => Some(Dimension::Novelty),
            "F" | "f" | "feasibility" => Some(Dimension::Feasibility),
            "E" | "e" | "effectiveness" => Some(Dimension::Effectiveness),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub text: String,
}

/// A supporting paper.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub sections: Vec<Section>,
    pub cited_ids: Vec<String>,
    pub venue_tag: String,
}

/// A research idea: a methodology followed by an experiment plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdeaRecord {
    pub id: String,
    pub source_paper_id: String,
    pub method_text: String,
    pub experiment_plan_text: String,
    pub sentences: Vec<String>,
}

impl IdeaRecord {
    /// Builds an idea whose sentences are segmented from its two text fields.
    pub fn new(
        id: impl Into<String>,
        source_paper_id: impl Into<String>,
        method_text: impl Into<String>,
        experiment_plan_text: impl Into<String>,
    ) -> Self {
        let method_text = method_text.into();
        let experiment_plan_text = experiment_plan_text.into();
        let mut sentences = text::sentences(&method_text);
        sentences.extend(text::sentences(&experiment_plan_text));
        Self {
            id: id.into(),
            source_paper_id: source_paper_id.into(),
            method_text,
            experiment_plan_text,
            sentences,
        }
    }

    /// Method and experiment plan joined by a single space.
    pub fn full_text(&self) -> String {
        match (self.method_text.is_empty(), self.experiment_plan_text.is_empty()) {
            (false, false) => format!("{} {}", self.method_text, self.experiment_plan_text),
            (false, true) => self.method_text.clone(),
            _ => self.experiment_plan_text.clone(),
        }
    }
}

/// Normalized (novelty, feasibility, effectiveness) labels in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimScores {
    pub novelty: f64,
    pub feasibility: f64,
    pub effectiveness: f64,
    pub overall: Option<f64>,
}

impl DimScores {
    pub fn get(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Novelty => self.novelty,
            Dimension::Feasibility => self.feasibility,
            Dimension::Effectiveness => self.effectiveness,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.novelty, self.feasibility, self.effectiveness]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for (name, v) in [
            ("novelty", self.novelty),
            ("feasibility", self.feasibility),
            ("effectiveness", self.effectiveness),
        ] {
            if !in_unit(v) {
                return Err(format!("{name} score {v} outside [0, 1]"));
            }
        }
        if let Some(o) = self.overall {
            if !in_unit(o) {
                return Err(format!("overall score {o} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Maps `raw ∈ [lo, hi]` affinely onto `[0, 1]`.
pub fn normalize_score(raw: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degenerate score range [{lo}, {hi}]"
        )));
    }
    if !(lo..=hi).contains(&raw) {
        return Err(Error::InvalidArgument(format!(
            "raw score {raw} outside [{lo}, {hi}]"
        )));
    }
    if raw == hi {
        return Ok(1.0);
    }
    Ok((raw - lo) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(normalize_score(1.0, 1.0, 10.0).unwrap(), 0.0);
        assert_eq!(normalize_score(10.0, 1.0, 10.0).unwrap(), 1.0);
        // (6 - 1) / (10 - 1) = 5/9
        let v = normalize_score(6.0, 1.0, 10.0).unwrap();
        assert!((v - 5.0 / 9.0).abs() < 1e-15);
        assert!((v - 0.555_555_555_555_555_6).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_bad_ranges() {
        assert!(normalize_score(5.0, 10.0, 1.0).is_err());
        assert!(normalize_score(5.0, 3.0, 3.0).is_err());
        assert!(normalize_score(0.5, 1.0, 10.0).is_err());
        assert!(normalize_score(10.5, 1.0, 10.0).is_err());
    }

    #[test]
    fn idea_sentences_cover_method_then_plan() {
        let idea = IdeaRecord::new("i", "p", "We do A. Then B.", "We test C.");
        assert_eq!(idea.sentences, vec!["We do A.", "Then B.", "We test C."]);
        assert_eq!(
            text::normalize_whitespace(&idea.sentences.join(" ")),
            text::normalize_whitespace(&idea.full_text())
        );
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_monotone(lo in -100.0f64..100.0, width in 0.001f64..100.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let hi = lo + width;
            let (ra, rb) = (lo + a * width, lo + b * width);
            let (ra, rb) = (ra.min(hi), rb.min(hi));
            let (na, nb) = (normalize_score(ra, lo, hi).unwrap(), normalize_score(rb, lo, hi).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&na));
            if ra < rb { proptest::prop_assert!(na <= nb); }
        }
    }
}
