//! Line-delimited JSON corpus files and the corpus directory layout:
//! `papers.jsonl`, `ideas.jsonl`, `scores.jsonl` and `manifest.json`.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synth::MarkerSpec;
use super::text::normalize_whitespace;
use super::{normalize_score, DimScores, IdeaRecord, PaperRecord};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const PAPERS_FILE: &str = "papers.jsonl";
pub const IDEAS_FILE: &str = "ideas.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A corpus line type with an id and self-contained invariants.
pub trait Record: Serialize + DeserializeOwned {
    fn id(&self) -> &str;
    fn validate(&self) -> std::result::Result<(), String>;
}

impl Record for PaperRecord {
    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.abstract_text.trim().is_empty() {
            return Err("empty abstract".into());
        }
        let mut seen = HashSet::new();
        for c in &self.cited_ids {
            if !seen.insert(c) {
                return Err(format!("cited id `{c}` listed twice"));
            }
        }
        Ok(())
    }
}

impl Record for IdeaRecord {
    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.sentences.is_empty() {
            return Err("idea has no sentences".into());
        }
        let joined = normalize_whitespace(&self.sentences.join(" "));
        let full = normalize_whitespace(&self.full_text());
        if joined != full {
            return Err("sentences do not cover method and experiment plan text".into());
        }
        Ok(())
    }
}

/// Raw (unnormalized) scores of one idea.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub idea_id: String,
    pub novelty: f64,
    pub feasibility: f64,
    pub effectiveness: f64,
    pub overall: Option<f64>,
}

impl Record for ScoreRecord {
    fn id(&self) -> &str {
        &self.idea_id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let all = [Some(self.novelty), Some(self.feasibility), Some(self.effectiveness), self.overall];
        if all.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite score".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LineOut<'a, T> {
    v: u32,
    seed: Option<u64>,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct LineIn<T> {
    v: u32,
    seed: Option<u64>,
    #[serde(flatten)]
    record: T,
}

/// Reads one record per line, validating each and rejecting duplicate ids.
/// Returns the records in file order and the generating seed, if recorded.
pub fn load_records<R: Record>(path: &Path) -> Result<(Vec<R>, Option<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut seed: Option<Option<u64>> = None;
    let body = text.strip_suffix('\n').unwrap_or(&text);
    if body.is_empty() {
        return Ok((out, None));
    }
    for (i, line) in body.split('\n').enumerate() {
        let line_no = i + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let parsed: LineIn<R> = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if parsed.v != SCHEMA_VERSION {
            return Err(parse_err(format!("unsupported schema version {}", parsed.v)));
        }
        match seed {
            None => seed = Some(parsed.seed),
            Some(s) if s != parsed.seed => {
                return Err(parse_err(format!("seed {:?} differs from file seed {s:?}", parsed.seed)))
            }
            _ => {}
        }
        parsed.record.validate().map_err(parse_err)?;
        let id = parsed.record.id().to_string();
        if let Some(&first) = seen.get(&id) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id,
                first,
                second: line_no,
            });
        }
        seen.insert(id, line_no);
        out.push(parsed.record);
    }
    Ok((out, seed.flatten()))
}

/// Serializes records one per line (each line newline-terminated).
pub fn records_to_bytes<R: Record>(records: &[R], seed: Option<u64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut buf,
            &LineOut {
                v: SCHEMA_VERSION,
                seed,
                record: r,
            },
        )?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn save_records<R: Record>(path: &Path, records: &[R], seed: Option<u64>) -> Result<()> {
    let bytes = records_to_bytes(records, seed)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Raw-score range of each dimension, used to normalize onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRanges {
    pub novelty: (f64, f64),
    pub feasibility: (f64, f64),
    pub effectiveness: (f64, f64),
    pub overall: (f64, f64),
}

impl Default for ScoreRanges {
    fn default() -> Self {
        Self {
            novelty: (1.0, 10.0),
            feasibility: (1.0, 10.0),
            effectiveness: (1.0, 10.0),
            overall: (1.0, 10.0),
        }
    }
}

impl ScoreRanges {
    pub fn normalize(&self, raw: &ScoreRecord) -> Result<DimScores> {
        let n = |v: f64, (lo, hi): (f64, f64)| {
            normalize_score(v, lo, hi).map_err(|e| Error::InvalidRecord {
                id: raw.idea_id.clone(),
                msg: e.to_string(),
            })
        };
        Ok(DimScores {
            novelty: n(raw.novelty, self.novelty)?,
            feasibility: n(raw.feasibility, self.feasibility)?,
            effectiveness: n(raw.effectiveness, self.effectiveness)?,
            overall: raw.overall.map(|o| n(o, self.overall)).transpose()?,
        })
    }

    /// Inverse of [`ScoreRanges::normalize`].
    pub fn denormalize(&self, idea_id: &str, s: &DimScores) -> ScoreRecord {
        let d = |v: f64, (lo, hi): (f64, f64)| lo + (hi - lo) * v;
        ScoreRecord {
            idea_id: idea_id.to_string(),
            novelty: d(s.novelty, self.novelty),
            feasibility: d(s.feasibility, self.feasibility),
            effectiveness: d(s.effectiveness, self.effectiveness),
            overall: s.overall.map(|o| d(o, self.overall)),
        }
    }
}

/// Split membership by id: SFT pairs and reward examples by idea id, prompts by paper id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub sft: Vec<String>,
    pub reward: Vec<String>,
    pub prompts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub v: u32,
    pub seed: Option<u64>,
    pub ranges: ScoreRanges,
    pub split: Option<SplitIds>,
    pub marker_spec: Option<MarkerSpec>,
}

/// A validated corpus directory held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: Option<u64>,
    pub papers: Vec<PaperRecord>,
    pub ideas: Vec<IdeaRecord>,
    pub scores: Vec<ScoreRecord>,
    pub ranges: ScoreRanges,
    pub split: Option<SplitIds>,
    pub marker_spec: Option<MarkerSpec>,
}

impl Corpus {
    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            v: SCHEMA_VERSION,
            seed: self.seed,
            ranges: self.ranges,
            split: self.split.clone(),
            marker_spec: self.marker_spec.clone(),
        }
    }

    /// Checks cross-record invariants: unique ids, resolvable references, scores in range.
    pub fn validate(&self) -> Result<()> {
        let mut papers = HashSet::new();
        for p in &self.papers {
            p.validate().map_err(|msg| Error::InvalidRecord { id: p.id.clone(), msg })?;
            if !papers.insert(p.id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: p.id.clone(),
                    msg: "duplicate paper id".into(),
                });
            }
        }
        let mut ideas = HashSet::new();
        for i in &self.ideas {
            i.validate().map_err(|msg| Error::InvalidRecord { id: i.id.clone(), msg })?;
            if !papers.contains(i.source_paper_id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: i.id.clone(),
                    msg: format!("source paper `{}` not in corpus", i.source_paper_id),
                });
            }
            if !ideas.insert(i.id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: i.id.clone(),
                    msg: "duplicate idea id".into(),
                });
            }
        }
        for s in &self.scores {
            if !ideas.contains(s.idea_id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: s.idea_id.clone(),
                    msg: "scores for unknown idea".into(),
                });
            }
            self.ranges.normalize(s)?;
        }
        if let Some(split) = &self.split {
            for id in split.sft.iter().chain(&split.reward) {
                if !ideas.contains(id.as_str()) {
                    return Err(Error::InvalidRecord {
                        id: id.clone(),
                        msg: "split references unknown idea".into(),
                    });
                }
            }
            for id in &split.prompts {
                if !papers.contains(id.as_str()) {
                    return Err(Error::InvalidRecord {
                        id: id.clone(),
                        msg: "split references unknown paper".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn paper(&self, id: &str) -> Option<&PaperRecord> {
        self.papers.iter().find(|p| p.id == id)
    }

    pub fn idea(&self, id: &str) -> Option<&IdeaRecord> {
        self.ideas.iter().find(|i| i.id == id)
    }

    /// Normalized scores of an idea.
    pub fn scores_of(&self, idea_id: &str) -> Option<Result<DimScores>> {
        self.scores
            .iter()
            .find(|s| s.idea_id == idea_id)
            .map(|s| self.ranges.normalize(s))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_records(&dir.join(PAPERS_FILE), &self.papers, self.seed)?;
        save_records(&dir.join(IDEAS_FILE), &self.ideas, self.seed)?;
        save_records(&dir.join(SCORES_FILE), &self.scores, self.seed)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let (papers, _) = load_records(&dir.join(PAPERS_FILE))?;
        let (ideas, _) = load_records(&dir.join(IDEAS_FILE))?;
        let (scores, _) = load_records(&dir.join(SCORES_FILE))?;
        let corpus = Self {
            seed: manifest.seed,
            papers,
            ideas,
            scores,
            ranges: manifest.ranges,
            split: manifest.split,
            marker_spec: manifest.marker_spec,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Digest over the serialized record files and manifest.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = records_to_bytes(&self.papers, self.seed)?;
        bytes.extend(records_to_bytes(&self.ideas, self.seed)?);
        bytes.extend(records_to_bytes(&self.scores, self.seed)?);
        bytes.extend(serde_json::to_vec_pretty(&self.manifest())?);
        Ok(sha256_hex(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Section;

    fn paper(id: &str) -> PaperRecord {
        PaperRecord {
            id: id.into(),
            title: "t".into(),
            abstract_text: "an abstract.".into(),
            sections: vec![Section {
                name: "intro".into(),
                text: "x".into(),
            }],
            cited_ids: vec![],
            venue_tag: "v".into(),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("papers.jsonl");
        std::fs::write(&p, "").unwrap();
        let (recs, seed) = load_records::<PaperRecord>(&p).unwrap();
        assert!(recs.is_empty());
        assert_eq!(seed, None);
    }

    #[test]
    fn single_record_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("papers.jsonl");
        save_records(&p, &[paper("p1")], Some(7)).unwrap();
        let first = std::fs::read(&p).unwrap();
        let (recs, seed) = load_records::<PaperRecord>(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(seed, Some(7));
        save_records(&p, &recs, seed).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("papers.jsonl");
        save_records(&p, &[paper("a"), paper("b"), paper("a")], None).unwrap();
        match load_records::<PaperRecord>(&p) {
            Err(Error::DuplicateId { id, first, second, .. }) => {
                assert_eq!((id.as_str(), first, second), ("a", 1, 3));
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("papers.jsonl");
        let mut bytes = records_to_bytes(&[paper("a")], None).unwrap();
        bytes.extend_from_slice(b"{not json}\n");
        std::fs::write(&p, bytes).unwrap();
        match load_records::<PaperRecord>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("papers.jsonl");
        let mut bad = paper("a");
        bad.abstract_text = "  ".into();
        save_records(&p, &[bad], None).unwrap();
        assert!(matches!(load_records::<PaperRecord>(&p), Err(Error::Parse { line: 1, .. })));
    }
}
