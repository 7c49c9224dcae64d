//! Positive-class metrics, the keyword-rule baseline, logistic regression on
//! frozen embeddings, and model evaluation over labeled splits.

mod logreg;
mod metrics;
mod rules;

pub use logreg::{logistic_objective, logistic_regression_fit, LogRegFit};
pub use metrics::{confusion, EvalReport};
pub use rules::{keyword_match, KeywordRuleSet};

use crate::corpus::{labels_of, StudyRecord};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::proto::DistanceMetric;

/// Classifies every record of `eval_set` with `checkpoint` and reports
/// positive-class metrics.
///
/// `metric` overrides the checkpoint's distance for prototype variants.
pub fn evaluate_variant(
    checkpoint: &Checkpoint,
    prototype_set: Option<&[StudyRecord]>,
    eval_set: &[StudyRecord],
    metric: Option<DistanceMetric>,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let truth = labels_of(eval_set)?;
    let mut model = checkpoint.clone();
    if let Some(m) = metric {
        model.metric = m;
    }
    let scorer = model.scorer(prototype_set)?;
    let predicted = scorer.classify_all(&model.embed(eval_set)?)?;
    confusion(&predicted, &truth)
}
