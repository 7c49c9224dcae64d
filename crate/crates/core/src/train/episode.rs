use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{Label, StudyRecord};
use crate::error::{Error, Result};

/// One support/query draw, as indices into the training set. Both lists
/// hold positives first, then negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws `n_support + n_query` records per class uniformly without
/// replacement and splits each draw into support and query.
pub fn sample_episode<R: Rng + ?Sized>(
    train: &[StudyRecord],
    n_support: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_support == 0 || n_query == 0 {
        return Err(Error::Config("support and query sizes must be positive".into()));
    }
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in train.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| Error::Data(format!("training record `{}` has no label", r.id)))?;
        pools[label.index()].push(i);
    }
    let needed = n_support + n_query;
    for label in [Label::Positive, Label::Negative] {
        let available = pools[label.index()].len();
        if available < needed {
            return Err(Error::InsufficientClass {
                class: if label.is_positive() { "positive" } else { "negative" },
                needed,
                available,
            });
        }
    }
    let mut episode = Episode {
        support: Vec::with_capacity(2 * n_support),
        query: Vec::with_capacity(2 * n_query),
    };
    for pool in &pools {
        let drawn = sample(rng, pool.len(), needed);
        for (k, j) in drawn.iter().enumerate() {
            if k < n_support {
                episode.support.push(pool[j]);
            } else {
                episode.query.push(pool[j]);
            }
        }
    }
    Ok(episode)
}

impl Episode {
    /// Labels of the support records, in support order.
    pub fn support_labels(&self, train: &[StudyRecord]) -> Result<Vec<Label>> {
        labels_at(train, &self.support)
    }

    pub fn query_labels(&self, train: &[StudyRecord]) -> Result<Vec<Label>> {
        labels_at(train, &self.query)
    }

    /// Checks class balance and support/query disjointness against `train`.
    pub fn check(&self, train: &[StudyRecord], n_support: usize, n_query: usize) -> Result<()> {
        for (name, part, n) in [("support", &self.support, n_support), ("query", &self.query, n_query)] {
            let labels = labels_at(train, part)?;
            let pos = labels.iter().filter(|l| l.is_positive()).count();
            if pos != n || labels.len() - pos != n {
                return Err(Error::Invalid(format!(
                    "{name} holds {pos} positives and {} negatives, expected {n} each",
                    labels.len() - pos
                )));
            }
        }
        let ids: std::collections::HashSet<&str> = self.support.iter().map(|&i| train[i].id.as_str()).collect();
        if let Some(&i) = self.query.iter().find(|&&i| ids.contains(train[i].id.as_str())) {
            return Err(Error::Invalid(format!("record `{}` is in both support and query", train[i].id)));
        }
        Ok(())
    }
}

fn labels_at(train: &[StudyRecord], idx: &[usize]) -> Result<Vec<Label>> {
    idx.iter()
        .map(|&i| {
            let r = train
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("episode index {i} out of range")))?;
            r.label
                .ok_or_else(|| Error::Data(format!("training record `{}` has no label", r.id)))
        })
        .collect()
}
