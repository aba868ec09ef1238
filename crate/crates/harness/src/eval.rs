//! Classification and similarity-matching evaluation reports.

use serde::{Deserialize, Serialize};

use sta_core::adapt::predict_one;
use sta_core::encoder::Model;
use sta_core::error::{Error, Result};
use sta_core::parallel::map_batch;
use sta_core::synthvideo::{ActionClass, VideoSample, VsmAnswer, VsmTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub total: usize,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// Counts; rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Fraction of all samples classified as the temporal mirror of their
    /// true class.
    pub mirror_error_rate: f64,
    /// Mirror-confused mass over all off-diagonal mass (0 when error-free).
    pub mirror_share_of_errors: f64,
    pub seed: u64,
    pub split: String,
}

impl EvalReport {
    /// Accounting identities: rows sum to per-class counts and the accuracy
    /// is trace over total.
    pub fn check_identities(&self) -> Result<()> {
        let k = self.classes.len();
        let mut trace = 0;
        let mut total = 0;
        for (i, row) in self.confusion.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Contract("confusion matrix is not square".into()));
            }
            let row_sum: usize = row.iter().sum();
            if row_sum != self.per_class[i].support {
                return Err(Error::Contract(format!(
                    "row {i} sums to {row_sum}, support is {}",
                    self.per_class[i].support
                )));
            }
            trace += row[i];
            total += row_sum;
        }
        if total != self.total {
            return Err(Error::Contract("confusion total != sample total".into()));
        }
        let acc = trace as f64 / total as f64;
        if (acc - self.accuracy).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "accuracy {} != trace/total {acc}",
                self.accuracy
            )));
        }
        Ok(())
    }
}

/// Builds the report from per-sample argmax predictions.
pub fn evaluate(
    model: &Model,
    samples: &[VideoSample],
    classes: &[ActionClass],
    seed: u64,
    split: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let preds: Vec<Result<usize>> = map_batch(samples, |s| predict_one(model, &s.clip));
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (sample, pred) in samples.iter().zip(preds) {
        let pred = pred?;
        if sample.label >= k || pred >= k {
            return Err(Error::Data(format!(
                "label {} or prediction {pred} out of range for {k} classes",
                sample.label
            )));
        }
        confusion[sample.label][pred] += 1;
    }
    Ok(report_from_confusion(confusion, classes, seed, split))
}

pub fn report_from_confusion(
    confusion: Vec<Vec<usize>>,
    classes: &[ActionClass],
    seed: u64,
    split: &str,
) -> EvalReport {
    let k = classes.len();
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();

    let mut per_class = Vec::with_capacity(k);
    for i in 0..k {
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][i]).sum();
        per_class.push(ClassMetrics {
            class: classes[i].name().to_string(),
            support,
            precision: if predicted > 0 {
                confusion[i][i] as f64 / predicted as f64
            } else {
                0.0
            },
            recall: if support > 0 {
                confusion[i][i] as f64 / support as f64
            } else {
                0.0
            },
        });
    }

    let mut mirror_errors = 0usize;
    let mut all_errors = 0usize;
    for i in 0..k {
        let mirror_idx = classes.iter().position(|c| *c == classes[i].mirror());
        for j in 0..k {
            if i != j {
                all_errors += confusion[i][j];
                if Some(j) == mirror_idx {
                    mirror_errors += confusion[i][j];
                }
            }
        }
    }

    EvalReport {
        accuracy: trace as f64 / total as f64,
        total,
        classes: classes.iter().map(|c| c.name().to_string()).collect(),
        per_class,
        confusion,
        mirror_error_rate: mirror_errors as f64 / total as f64,
        mirror_share_of_errors: if all_errors > 0 {
            mirror_errors as f64 / all_errors as f64
        } else {
            0.0
        },
        seed,
        split: split.to_string(),
    }
}

// ── visual similarity matching ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VsmReport {
    pub tau: f64,
    pub accuracy: f64,
    pub positive_accuracy: f64,
    pub negative_accuracy: f64,
    pub total: usize,
    pub positives: usize,
    /// Validation-split accuracies over the full threshold grid.
    pub sweep: Vec<SweepPoint>,
    pub seed: u64,
}

/// Cosine similarities of the query against both references, one row per
/// triplet. Embeddings are L2-normalized, so the dot product suffices.
pub fn triplet_similarities(model: &Model, triplets: &[VsmTriplet]) -> Result<Vec<(f64, f64, VsmAnswer)>> {
    let sims: Vec<Result<(f64, f64, VsmAnswer)>> = map_batch(triplets, |t| {
        let q = model.clip_embedding(&t.query.clip)?;
        let r1 = model.clip_embedding(&t.ref1.clip)?;
        let r2 = model.clip_embedding(&t.ref2.clip)?;
        let dot = |a: &sta_core::Tensor, b: &sta_core::Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        Ok((dot(&q, &r1), dot(&q, &r2), t.answer))
    });
    sims.into_iter().collect()
}

/// Argmax reference when the best similarity clears the threshold, else none.
/// An exact tie resolves to the first reference.
pub fn decide(s1: f64, s2: f64, tau: f64) -> VsmAnswer {
    if s1.max(s2) >= tau {
        if s2 > s1 {
            VsmAnswer::Ref2
        } else {
            VsmAnswer::Ref1
        }
    } else {
        VsmAnswer::None
    }
}

pub fn vsm_accuracy_at(sims: &[(f64, f64, VsmAnswer)], tau: f64) -> (f64, f64, f64) {
    let mut hits = 0;
    let mut pos_hits = 0;
    let mut pos_total = 0;
    let mut neg_hits = 0;
    let mut neg_total = 0;
    for (s1, s2, answer) in sims {
        let got = decide(*s1, *s2, tau);
        let hit = got == *answer;
        hits += hit as usize;
        if *answer == VsmAnswer::None {
            neg_total += 1;
            neg_hits += hit as usize;
        } else {
            pos_total += 1;
            pos_hits += hit as usize;
        }
    }
    let frac = |h: usize, t: usize| if t > 0 { h as f64 / t as f64 } else { 0.0 };
    (
        frac(hits, sims.len()),
        frac(pos_hits, pos_total),
        frac(neg_hits, neg_total),
    )
}

/// Best threshold on the validation similarities; ties go to the smallest tau.
pub fn sweep_tau(val_sims: &[(f64, f64, VsmAnswer)], grid: &[f64]) -> (f64, Vec<SweepPoint>) {
    let mut best = (grid[0], f64::NEG_INFINITY);
    let mut sweep = Vec::with_capacity(grid.len());
    for &tau in grid {
        let (acc, _, _) = vsm_accuracy_at(val_sims, tau);
        sweep.push(SweepPoint { tau, accuracy: acc });
        if acc > best.1 {
            best = (tau, acc);
        }
    }
    (best.0, sweep)
}
