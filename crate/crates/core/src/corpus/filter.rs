//! Screening filters applied before records enter training.

use std::collections::HashSet;

use super::io::ScoreRecord;
use super::text::normalize_whitespace;
use super::{IdeaRecord, PaperRecord};

/// A paper with its idea and (optionally) the idea's raw scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub paper: PaperRecord,
    pub idea: IdeaRecord,
    pub scores: Option<ScoreRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    EmptyField,
    TooFewSentences,
    Duplicate,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyField => "empty-field",
            RejectReason::TooFewSentences => "too-few-sentences",
            RejectReason::Duplicate => "duplicate",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_sentences: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_sentences: 2 }
    }
}

/// Splits entries into kept and rejected. The first occurrence of a duplicated idea
/// text (compared after whitespace normalization) is kept.
pub fn filter_records(
    entries: Vec<Entry>,
    cfg: &FilterConfig,
) -> (Vec<Entry>, Vec<(Entry, RejectReason)>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for e in entries {
        let empty = e.paper.abstract_text.trim().is_empty()
            || e.idea.method_text.trim().is_empty()
            || e.idea.experiment_plan_text.trim().is_empty();
        if empty {
            rejected.push((e, RejectReason::EmptyField));
            continue;
        }
        if e.idea.sentences.len() < cfg.min_sentences {
            rejected.push((e, RejectReason::TooFewSentences));
            continue;
        }
        let key = normalize_whitespace(&e.idea.full_text());
        if !seen.insert(key) {
            rejected.push((e, RejectReason::Duplicate));
            continue;
        }
        kept.push(e);
    }
    (kept, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, method: &str, plan: &str) -> Entry {
        Entry {
            paper: PaperRecord {
                id: format!("p-{id}"),
                title: "t".into(),
                abstract_text: "abstract.".into(),
                sections: vec![],
                cited_ids: vec![],
                venue_tag: "v".into(),
            },
            idea: IdeaRecord::new(id, format!("p-{id}"), method, plan),
            scores: None,
        }
    }

    #[test]
    fn empty_method_is_rejected() {
        let (kept, rej) = filter_records(vec![entry("a", "", "We test. Twice.")], &FilterConfig::default());
        assert!(kept.is_empty());
        assert_eq!(rej[0].1.as_str(), "empty-field");
    }

    #[test]
    fn second_duplicate_is_rejected() {
        let (kept, rej) = filter_records(
            vec![entry("a", "Do X.", "Test Y."), entry("b", "Do  X.", " Test Y.")],
            &FilterConfig::default(),
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].idea.id, "a");
        assert_eq!(rej[0].0.idea.id, "b");
        assert_eq!(rej[0].1, RejectReason::Duplicate);
    }

    #[test]
    fn clean_record_is_kept_and_filter_is_idempotent() {
        let entries = vec![
            entry("a", "Do X.", "Test Y."),
            entry("b", "Do Z.", "Short"),
            entry("c", "Only one.", ""),
        ];
        let cfg = FilterConfig::default();
        let (kept, _) = filter_records(entries, &cfg);
        assert_eq!(kept.len(), 2);
        let (again, rej) = filter_records(kept.clone(), &cfg);
        assert_eq!(again, kept);
        assert!(rej.is_empty());
    }

    #[test]
    fn too_few_sentences() {
        let cfg = FilterConfig { min_sentences: 3 };
        let (_, rej) = filter_records(vec![entry("a", "Do X.", "Test Y.")], &cfg);
        assert_eq!(rej[0].1, RejectReason::TooFewSentences);
    }
}
