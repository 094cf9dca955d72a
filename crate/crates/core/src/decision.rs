//! Accept/reject bookkeeping and the harmonic-mean threshold search.
//!
//! A prediction is *correct* when its predicted label equals the truth.
//! Crossing correctness with the accept decision gives four counts:
//! correctly accepted (CA), correctly rejected (CR), incorrectly rejected
//! (IR) and incorrectly accepted (IA). The optimizer picks the threshold
//! maximizing the harmonic mean of CA% and CR%.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionQuad {
    pub ca: usize,
    pub cr: usize,
    pub ir: usize,
    pub ia: usize,
}

impl ConfusionQuad {
    pub fn correct(&self) -> usize {
        self.ca + self.ir
    }

    pub fn incorrect(&self) -> usize {
        self.cr + self.ia
    }

    pub fn total(&self) -> usize {
        self.correct() + self.incorrect()
    }

    pub fn accepted(&self) -> usize {
        self.ca + self.ia
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Accept iff score ≥ θ (probabilities, p-values).
    ScoreAtLeast,
    /// Accept iff score ≤ θ (uncertainties).
    ScoreAtMost,
}

impl ThresholdKind {
    pub fn accepts(self, score: f64, theta: f64) -> bool {
        match self {
            ThresholdKind::ScoreAtLeast => score >= theta,
            ThresholdKind::ScoreAtMost => score <= theta,
        }
    }
}

pub fn tally(scores: &[f64], kind: ThresholdKind, theta: f64, predicted: &[u8], truth: &[u8]) -> Result<ConfusionQuad> {
    check_len(scores.len(), predicted.len())?;
    check_len(scores.len(), truth.len())?;
    let mut q = ConfusionQuad::default();
    for i in 0..scores.len() {
        let accept = kind.accepts(scores[i], theta);
        match (predicted[i] == truth[i], accept) {
            (true, true) => q.ca += 1,
            (true, false) => q.ir += 1,
            (false, false) => q.cr += 1,
            (false, true) => q.ia += 1,
        }
    }
    Ok(q)
}

/// Percentages of each outcome within its correctness group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub ca_pct: f64,
    pub cr_pct: f64,
    pub ir_pct: f64,
    pub ia_pct: f64,
    /// No correct predictions: CA% and IR% are conventionally 0.
    pub degenerate_correct: bool,
    /// No incorrect predictions: CR% and IA% are conventionally 0.
    pub degenerate_incorrect: bool,
}

impl Rates {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_correct || self.degenerate_incorrect
    }
}

pub fn rates(q: &ConfusionQuad) -> Rates {
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Rates {
        ca_pct: pct(q.ca, q.correct()),
        ir_pct: pct(q.ir, q.correct()),
        cr_pct: pct(q.cr, q.incorrect()),
        ia_pct: pct(q.ia, q.incorrect()),
        degenerate_correct: q.correct() == 0,
        degenerate_incorrect: q.incorrect() == 0,
    }
}

pub fn harmonic(ca_pct: f64, cr_pct: f64) -> f64 {
    let s = ca_pct + cr_pct;
    if s > 0.0 {
        2.0 * ca_pct * cr_pct / s
    } else {
        0.0
    }
}

/// Candidate thresholds for the exhaustive search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GridSpec {
    /// Distinct observed scores, midpoints between neighbours, and one
    /// sentinel below the minimum and above the maximum.
    #[default]
    FromScores,
    Uniform {
        lo: f64,
        hi: f64,
        points: usize,
    },
    Explicit {
        thetas: Vec<f64>,
    },
}

impl GridSpec {
    pub fn thetas(&self, scores: &[f64]) -> Result<Vec<f64>> {
        let grid = match self {
            GridSpec::FromScores => {
                let mut u: Vec<f64> = scores.to_vec();
                u.sort_by(f64::total_cmp);
                u.dedup();
                if u.is_empty() {
                    return Err(Error::invalid("cannot derive a grid from no scores"));
                }
                let mut g = Vec::with_capacity(2 * u.len() + 1);
                g.push(u[0] - 1.0);
                for w in u.windows(2) {
                    g.push(w[0]);
                    g.push(0.5 * (w[0] + w[1]));
                }
                g.push(u[u.len() - 1]);
                g.push(u[u.len() - 1] + 1.0);
                g
            }
            GridSpec::Uniform { lo, hi, points } => {
                if *points == 0 || !(lo <= hi) {
                    return Err(Error::invalid("uniform grid needs points >= 1 and lo <= hi"));
                }
                if *points == 1 {
                    vec![*lo]
                } else {
                    let step = (hi - lo) / (*points - 1) as f64;
                    (0..*points).map(|k| lo + step * k as f64).collect()
                }
            }
            GridSpec::Explicit { thetas } => {
                if thetas.is_empty() {
                    return Err(Error::invalid("explicit grid is empty"));
                }
                thetas.clone()
            }
        };
        if grid.iter().any(|t| t.is_nan()) {
            return Err(Error::invalid("grid contains NaN"));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub kind: ThresholdKind,
    pub theta: f64,
    pub h: f64,
    pub quad: ConfusionQuad,
    pub ca_pct: f64,
    pub cr_pct: f64,
    pub ir_pct: f64,
    pub ia_pct: f64,
}

impl ThresholdResult {
    fn from_quad(kind: ThresholdKind, theta: f64, quad: ConfusionQuad) -> Self {
        let r = rates(&quad);
        ThresholdResult {
            kind,
            theta,
            h: harmonic(r.ca_pct, r.cr_pct),
            quad,
            ca_pct: r.ca_pct,
            cr_pct: r.cr_pct,
            ir_pct: r.ir_pct,
            ia_pct: r.ia_pct,
        }
    }
}

/// One point of a trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub ca_pct: f64,
    pub cr_pct: f64,
    pub h: f64,
}

/// Scores sorted ascending with prefix counts of correct predictions, so
/// each threshold costs one binary search.
struct SortedProblem {
    scores: Vec<f64>,
    correct_prefix: Vec<usize>,
    n_correct: usize,
}

impl SortedProblem {
    fn new(scores: &[f64], predicted: &[u8], truth: &[u8]) -> Result<Self> {
        check_len(scores.len(), predicted.len())?;
        check_len(scores.len(), truth.len())?;
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores contain NaN"));
        }
        let mut pairs: Vec<(f64, bool)> = (0..scores.len())
            .map(|i| (scores[i], predicted[i] == truth[i]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut correct_prefix = Vec::with_capacity(pairs.len() + 1);
        correct_prefix.push(0);
        for &(_, c) in &pairs {
            correct_prefix.push(correct_prefix.last().unwrap() + usize::from(c));
        }
        Ok(SortedProblem {
            n_correct: *correct_prefix.last().unwrap(),
            scores: pairs.into_iter().map(|p| p.0).collect(),
            correct_prefix,
        })
    }

    fn quad(&self, kind: ThresholdKind, theta: f64) -> ConfusionQuad {
        let n = self.scores.len();
        let n_incorrect = n - self.n_correct;
        // Accepted rows form a suffix (at least) or a prefix (at most).
        let (acc_correct, acc_total) = match kind {
            ThresholdKind::ScoreAtLeast => {
                let k = self.scores.partition_point(|&s| s < theta);
                (self.n_correct - self.correct_prefix[k], n - k)
            }
            ThresholdKind::ScoreAtMost => {
                let k = self.scores.partition_point(|&s| s <= theta);
                (self.correct_prefix[k], k)
            }
        };
        let acc_incorrect = acc_total - acc_correct;
        ConfusionQuad {
            ca: acc_correct,
            ir: self.n_correct - acc_correct,
            ia: acc_incorrect,
            cr: n_incorrect - acc_incorrect,
        }
    }
}

/// Rates at every grid point, in grid order.
pub fn sweep(
    scores: &[f64],
    kind: ThresholdKind,
    predicted: &[u8],
    truth: &[u8],
    grid: &GridSpec,
) -> Result<Vec<SweepPoint>> {
    let problem = SortedProblem::new(scores, predicted, truth)?;
    let thetas = grid.thetas(scores)?;
    Ok(thetas
        .into_iter()
        .map(|theta| {
            let r = ThresholdResult::from_quad(kind, theta, problem.quad(kind, theta));
            SweepPoint {
                theta,
                ca_pct: r.ca_pct,
                cr_pct: r.cr_pct,
                h: r.h,
            }
        })
        .collect())
}

const H_TIE: f64 = 1e-12;

/// Exhaustive search for the threshold maximizing H = harmonic(CA%, CR%).
///
/// Ties in H go to the threshold accepting the most predictions, then to
/// the smallest θ for `ScoreAtLeast` and the largest for `ScoreAtMost`.
pub fn optimize_threshold(
    scores: &[f64],
    kind: ThresholdKind,
    predicted: &[u8],
    truth: &[u8],
    grid: &GridSpec,
) -> Result<ThresholdResult> {
    let problem = SortedProblem::new(scores, predicted, truth)?;
    let n = scores.len();
    if problem.n_correct == 0 || problem.n_correct == n {
        return Err(Error::Degenerate(format!(
            "{} correct of {n} predictions; CA%/CR% need both correct and incorrect examples, \
             fall back to a fixed threshold",
            problem.n_correct
        )));
    }
    let mut best: Option<ThresholdResult> = None;
    for theta in grid.thetas(scores)? {
        let cand = ThresholdResult::from_quad(kind, theta, problem.quad(kind, theta));
        let better = match &best {
            None => true,
            Some(b) => {
                if cand.h > b.h + H_TIE {
                    true
                } else if cand.h < b.h - H_TIE {
                    false
                } else if cand.quad.accepted() != b.quad.accepted() {
                    cand.quad.accepted() > b.quad.accepted()
                } else {
                    match kind {
                        ThresholdKind::ScoreAtLeast => cand.theta < b.theta,
                        ThresholdKind::ScoreAtMost => cand.theta > b.theta,
                    }
                }
            }
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Result of the rejection-budget alternative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedResult {
    pub theta: f64,
    /// F1 (percent) of the accepted predictions, malware as positive.
    pub f1: f64,
    pub rejection_rate: f64,
    pub quad: ConfusionQuad,
}

/// Maximizes the F1 of accepted predictions subject to a rejection rate of
/// at most `max_rejection`. Ties go to the threshold accepting more.
pub fn optimize_constrained_f1(
    scores: &[f64],
    kind: ThresholdKind,
    predicted: &[u8],
    truth: &[u8],
    max_rejection: f64,
    grid: &GridSpec,
) -> Result<ConstrainedResult> {
    check_len(scores.len(), predicted.len())?;
    check_len(scores.len(), truth.len())?;
    if scores.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    if !(0.0..=1.0).contains(&max_rejection) {
        return Err(Error::invalid("rejection budget must lie in [0,1]"));
    }
    let n = scores.len() as f64;
    let mut best: Option<ConstrainedResult> = None;
    for theta in grid.thetas(scores)? {
        let (mut tp, mut fp, mut fneg, mut accepted) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..scores.len() {
            if !kind.accepts(scores[i], theta) {
                continue;
            }
            accepted += 1;
            match (predicted[i], truth[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
        let rejection_rate = 1.0 - accepted as f64 / n;
        if rejection_rate > max_rejection + 1e-12 {
            continue;
        }
        let denom = 2 * tp + fp + fneg;
        let f1 = if denom == 0 {
            0.0
        } else {
            100.0 * 2.0 * tp as f64 / denom as f64
        };
        let quad = tally(scores, kind, theta, predicted, truth)?;
        let cand = ConstrainedResult {
            theta,
            f1,
            rejection_rate,
            quad,
        };
        let better = best.as_ref().is_none_or(|b| {
            cand.f1 > b.f1 + H_TIE || ((cand.f1 - b.f1).abs() <= H_TIE && cand.quad.accepted() > b.quad.accepted())
        });
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::invalid("no threshold satisfies the rejection budget"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_example() {
        let q = tally(&[0.9, 0.4], ThresholdKind::ScoreAtLeast, 0.5, &[1, 0], &[1, 0]).unwrap();
        assert_eq!(
            q,
            ConfusionQuad {
                ca: 1,
                ir: 1,
                cr: 0,
                ia: 0
            }
        );
        let q = tally(
            &[0.9, 0.4, 0.7],
            ThresholdKind::ScoreAtLeast,
            0.1,
            &[1, 0, 1],
            &[1, 0, 1],
        )
        .unwrap();
        assert_eq!(
            q,
            ConfusionQuad {
                ca: 3,
                ..Default::default()
            }
        );
        assert!(tally(&[0.1], ThresholdKind::ScoreAtMost, 0.5, &[1, 0], &[1]).is_err());
    }

    #[test]
    fn at_most_uses_inclusive_bound() {
        let q = tally(
            &[0.2, 0.5, 0.8],
            ThresholdKind::ScoreAtMost,
            0.5,
            &[1, 1, 0],
            &[1, 0, 1],
        )
        .unwrap();
        assert_eq!(
            q,
            ConfusionQuad {
                ca: 1,
                ia: 1,
                cr: 1,
                ir: 0
            }
        );
    }

    #[test]
    fn rate_examples() {
        let r = rates(&ConfusionQuad {
            ca: 90,
            ir: 10,
            cr: 8,
            ia: 2,
        });
        assert_eq!((r.ca_pct, r.cr_pct, r.ir_pct, r.ia_pct), (90.0, 80.0, 10.0, 20.0));
        assert!(!r.is_degenerate());
        let r = rates(&ConfusionQuad {
            ca: 5,
            ir: 1,
            cr: 0,
            ia: 0,
        });
        assert_eq!(r.cr_pct, 0.0);
        assert!(r.degenerate_incorrect);
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic(100.0, 100.0), 100.0);
        assert_eq!(harmonic(42.0, 0.0), 0.0);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
        assert!((harmonic(80.0, 60.0) - 9600.0 / 140.0).abs() < 1e-12);
    }

    #[test]
    fn separable_scores_pick_smallest_perfect_theta() {
        let scores = [1.0, 1.0, 0.0, 1.0, 0.0];
        let pred = [1, 0, 1, 1, 0];
        let truth = [1, 0, 0, 1, 1];
        let grid = GridSpec::Uniform {
            lo: 0.0,
            hi: 1.0,
            points: 11,
        };
        let r = optimize_threshold(&scores, ThresholdKind::ScoreAtLeast, &pred, &truth, &grid).unwrap();
        assert_eq!(r.h, 100.0);
        assert!((r.theta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_point_grid() {
        let grid = GridSpec::Explicit { thetas: vec![0.37] };
        let r = optimize_threshold(&[0.2, 0.9], ThresholdKind::ScoreAtLeast, &[0, 1], &[1, 1], &grid).unwrap();
        assert_eq!(r.theta, 0.37);
    }

    #[test]
    fn degenerate_inputs_are_refused() {
        let all_right = optimize_threshold(
            &[0.2, 0.9],
            ThresholdKind::ScoreAtLeast,
            &[1, 1],
            &[1, 1],
            &GridSpec::FromScores,
        );
        assert!(matches!(all_right, Err(Error::Degenerate(_))));
        let all_wrong = optimize_threshold(
            &[0.2, 0.9],
            ThresholdKind::ScoreAtLeast,
            &[0, 0],
            &[1, 1],
            &GridSpec::FromScores,
        );
        assert!(matches!(all_wrong, Err(Error::Degenerate(_))));
    }

    #[test]
    fn constrained_f1_respects_budget() {
        let scores = [0.95, 0.9, 0.8, 0.6, 0.55, 0.3, 0.2, 0.1];
        let pred = [1, 1, 0, 1, 0, 1, 0, 1];
        let truth = [1, 1, 0, 1, 0, 0, 1, 0];
        let r = optimize_constrained_f1(
            &scores,
            ThresholdKind::ScoreAtLeast,
            &pred,
            &truth,
            0.15,
            &GridSpec::FromScores,
        )
        .unwrap();
        assert!(r.rejection_rate <= 0.15);
        let loose = optimize_constrained_f1(
            &scores,
            ThresholdKind::ScoreAtLeast,
            &pred,
            &truth,
            0.5,
            &GridSpec::FromScores,
        )
        .unwrap();
        assert!(loose.f1 >= r.f1);
        assert_eq!(loose.f1, 100.0);
    }
}
