//! ROC-AUC evaluation: frame-level for the detector, clip-label-level for
//! the tagger.
//!
//! The AUC is computed by the rank-sum (Mann–Whitney) formulation with tied
//! scores counted as half: the probability that a random positive outranks a
//! random negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parallel scores and binary ground truth, tagged with what is being
/// ranked.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
    pub context: &'static str,
}

impl ScoredSet {
    pub fn new(context: &'static str) -> Self {
        ScoredSet {
            scores: Vec::new(),
            truth: Vec::new(),
            context,
        }
    }

    pub fn push(&mut self, score: f64, positive: bool) {
        self.scores.push(score);
        self.truth.push(positive);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.truth.iter().filter(|t| **t).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }
}

/// Area under the ROC curve via rank sums; ties contribute one half.
///
/// Errors when the ground truth contains only one class, where the AUC is
/// undefined.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let n = set.len();
    let n_pos = set.n_pos();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(format!(
            "AUC undefined for {}: {} positives, {} negatives",
            set.context, n_pos, n_neg
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .expect("scores must be comparable (no NaN)")
    });
    // Average ranks over tie groups, then sum the positives' ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if set.truth[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One evaluation summary; serialised into `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub auc_micro: f64,
    /// Mean of per-group AUCs (per recording for frames, per class for
    /// tags); absent when no group had both classes present.
    pub auc_macro: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub excluded_classes: Vec<String>,
}

/// Frame-level detector evaluation against strong labels.
///
/// `recordings` pairs each recording's unpadded per-frame scores with its
/// any-class activity grid. All frames are pooled into one ranking
/// (micro-average); the per-recording mean AUC is reported alongside.
pub fn eval_when_frames(recordings: &[(Vec<f32>, Vec<bool>)]) -> Result<EvalReport> {
    if recordings.is_empty() {
        return Err(Error::Eval("no recordings to evaluate".into()));
    }
    let mut pooled = ScoredSet::new("when-frames");
    let mut per_recording = Vec::new();
    for (scores, truth) in recordings {
        if scores.len() != truth.len() {
            return Err(Error::Eval(format!(
                "score/truth length mismatch: {} vs {}",
                scores.len(),
                truth.len()
            )));
        }
        let mut local = ScoredSet::new("when-frames");
        for (&s, &t) in scores.iter().zip(truth) {
            pooled.push(s as f64, t);
            local.push(s as f64, t);
        }
        if local.n_pos() > 0 && local.n_neg() > 0 {
            per_recording.push(auc(&local)?);
        }
    }
    let micro = auc(&pooled)?;
    let macro_auc = if per_recording.is_empty() {
        None
    } else {
        Some(per_recording.iter().sum::<f64>() / per_recording.len() as f64)
    };
    Ok(EvalReport {
        task: "when-frames".into(),
        auc_micro: micro,
        auc_macro: macro_auc,
        n_pos: pooled.n_pos(),
        n_neg: pooled.n_neg(),
        excluded_classes: Vec::new(),
    })
}

/// Clip-level tagger evaluation: every (recording, class) pair becomes one
/// scored element. Classes with no positive clip in the whole test set are
/// excluded from the pool and reported by name.
pub fn eval_who_cliplabels(
    class_names: &[String],
    predictions: &[Vec<f32>],
    targets: &[Vec<bool>],
) -> Result<EvalReport> {
    let n_classes = class_names.len();
    if predictions.len() != targets.len() {
        return Err(Error::Eval(format!(
            "prediction/target clip count mismatch: {} vs {}",
            predictions.len(),
            targets.len()
        )));
    }
    let mut excluded = Vec::new();
    let mut active = vec![false; n_classes];
    for c in 0..n_classes {
        if targets.iter().any(|t| t[c]) {
            active[c] = true;
        } else {
            excluded.push(class_names[c].clone());
        }
    }
    let mut pooled = ScoredSet::new("who-cliplabels");
    let mut per_class = Vec::new();
    for c in 0..n_classes {
        if !active[c] {
            continue;
        }
        let mut local = ScoredSet::new("who-cliplabels");
        for (p, t) in predictions.iter().zip(targets) {
            pooled.push(p[c] as f64, t[c]);
            local.push(p[c] as f64, t[c]);
        }
        if local.n_pos() > 0 && local.n_neg() > 0 {
            per_class.push(auc(&local)?);
        }
    }
    let micro = auc(&pooled)?;
    let macro_auc = if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    };
    Ok(EvalReport {
        task: "who-cliplabels".into(),
        auc_micro: micro,
        auc_macro: macro_auc,
        n_pos: pooled.n_pos(),
        n_neg: pooled.n_neg(),
        excluded_classes: excluded,
    })
}

/// Quadratic-time reference: count positive-over-negative pairs directly,
/// ties as half. Kept alongside the rank implementation as its oracle.
pub fn auc_pairwise_oracle(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_pos();
    let n_neg = set.n_neg();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("AUC undefined".into()));
    }
    let mut wins = 0.0f64;
    for (i, &ti) in set.truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in set.truth.iter().enumerate() {
            if tj {
                continue;
            }
            if set.scores[i] > set.scores[j] {
                wins += 1.0;
            } else if set.scores[i] == set.scores[j] {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}
