//! Disjoint SFT / reward / prompt subsets.

use rand::seq::SliceRandom;

use super::io::SplitIds;
use super::{Corpus, DimScores, IdeaRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub sft: f64,
    pub reward: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { sft: 0.25, reward: 0.5 }
    }
}

/// Resolved split. Member sets are pairwise disjoint by record id.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub sft_pairs: Vec<(PaperRecord, IdeaRecord)>,
    pub rl_set: Vec<(IdeaRecord, DimScores)>,
    pub eval_set: Vec<PaperRecord>,
    pub seed: u64,
}

/// Partitions the corpus papers (with their ideas) into SFT, reward and prompt groups.
/// The remainder after the SFT and reward fractions becomes the prompt group.
pub fn split_corpus(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<SplitIds> {
    if fractions.sft < 0.0 || fractions.reward < 0.0 || fractions.sft + fractions.reward > 1.0 {
        return Err(Error::InvalidArgument(format!("bad split fractions {fractions:?}")));
    }
    let mut order: Vec<usize> = (0..corpus.papers.len()).collect();
    order.shuffle(&mut rng_from(&[seed, 0x5917]));
    let n = order.len() as f64;
    let n_sft = (fractions.sft * n).round() as usize;
    let n_reward = ((fractions.reward * n).round() as usize).min(order.len() - n_sft);
    let mut ids = SplitIds::default();
    for (rank, &pi) in order.iter().enumerate() {
        let paper = &corpus.papers[pi];
        let ideas = corpus.ideas.iter().filter(|i| i.source_paper_id == paper.id);
        if rank < n_sft {
            ids.sft.extend(ideas.map(|i| i.id.clone()));
        } else if rank < n_sft + n_reward {
            ids.reward.extend(ideas.map(|i| i.id.clone()));
        } else {
            ids.prompts.push(paper.id.clone());
        }
    }
    ids.sft.sort();
    ids.reward.sort();
    ids.prompts.sort();
    Ok(ids)
}

impl Corpus {
    /// Materializes the stored split.
    pub fn resolve_split(&self) -> Result<CorpusSplit> {
        let ids = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Missing("corpus manifest has no split".into()))?;
        let idea = |id: &str| {
            self.idea(id)
                .ok_or_else(|| Error::InvalidRecord { id: id.into(), msg: "unknown idea".into() })
        };
        let paper = |id: &str| {
            self.paper(id)
                .ok_or_else(|| Error::InvalidRecord { id: id.into(), msg: "unknown paper".into() })
        };
        let mut sft_pairs = Vec::new();
        for id in &ids.sft {
            let i = idea(id)?;
            sft_pairs.push((paper(&i.source_paper_id)?.clone(), i.clone()));
        }
        let mut rl_set = Vec::new();
        for id in &ids.reward {
            let s = self.scores_of(id).ok_or_else(|| Error::InvalidRecord {
                id: id.clone(),
                msg: "reward example without scores".into(),
            })??;
            rl_set.push((idea(id)?.clone(), s));
        }
        let eval_set = ids.prompts.iter().map(|id| paper(id).cloned()).collect::<Result<_>>()?;
        Ok(CorpusSplit {
            sft_pairs,
            rl_set,
            eval_set,
            seed: self.seed.unwrap_or(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, MarkerSpec};
    use std::collections::HashSet;

    #[test]
    fn split_is_disjoint_for_many_seeds() {
        let corpus = synth_corpus(1, 60, &MarkerSpec::default());
        for seed in 0..32u64 {
            let mut c = corpus.clone();
            c.split = Some(split_corpus(&c, SplitFractions::default(), seed).unwrap());
            let s = c.resolve_split().unwrap();
            let mut seen = HashSet::new();
            for (p, i) in &s.sft_pairs {
                assert!(seen.insert(p.id.clone()));
                assert!(seen.insert(i.id.clone()));
            }
            for (i, _) in &s.rl_set {
                assert!(seen.insert(i.id.clone()));
                assert!(seen.insert(i.source_paper_id.clone()));
            }
            for p in &s.eval_set {
                assert!(seen.insert(p.id.clone()), "seed {seed}: {} reused", p.id);
            }
            assert_eq!(s.sft_pairs.len() + s.rl_set.len() + s.eval_set.len(), 60);
        }
    }
}
