//! Glue between corpus records and the trainable components.

use crate::corpus::{Corpus, Dimension};
use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::reward::{train_reward, RewardConfig, RewardExample, RewardModel, RewardSet, RewardTrace, RewardTrainConfig};

/// Every paper title, abstract and idea text of a corpus.
pub fn corpus_texts(corpus: &Corpus) -> Vec<String> {
    let mut texts: Vec<String> = corpus
        .papers
        .iter()
        .map(|p| format!("{} {}", p.title, p.abstract_text))
        .collect();
    texts.extend(corpus.ideas.iter().map(|i| i.full_text()));
    texts
}

pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocab> {
    Vocab::build(&corpus_texts(corpus), max_size)
}

/// Reward examples of the listed ideas for one dimension, with normalized targets.
pub fn reward_examples(corpus: &Corpus, model: &RewardModel, idea_ids: &[String]) -> Result<Vec<RewardExample>> {
    idea_ids
        .iter()
        .map(|id| {
            let idea = corpus
                .idea(id)
                .ok_or_else(|| Error::InvalidRecord { id: id.clone(), msg: "unknown idea".into() })?;
            let scores = corpus
                .scores_of(id)
                .ok_or_else(|| Error::InvalidRecord { id: id.clone(), msg: "idea has no scores".into() })??;
            let paper = corpus.paper(&idea.source_paper_id);
            Ok(RewardExample {
                tokens: model.encode_text(paper, &idea.full_text()),
                target: scores.get(model.dimension),
            })
        })
        .collect()
}

/// Trains one reward model per dimension on the listed ideas.
pub fn train_reward_set(
    corpus: &Corpus,
    vocab: &Vocab,
    config: &RewardConfig,
    train: &RewardTrainConfig,
    idea_ids: &[String],
) -> Result<(RewardSet, Vec<RewardTrace>)> {
    let mut models = Vec::new();
    let mut traces = Vec::new();
    for dim in Dimension::ALL {
        let mut m = RewardModel::new(dim, config.clone(), vocab.clone())?;
        let examples = reward_examples(corpus, &m, idea_ids)?;
        traces.push(train_reward(&mut m, &examples, train)?);
        models.push(m);
    }
    Ok((RewardSet { models }, traces))
}
