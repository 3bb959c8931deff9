//! Equal error rate on the ROC convex hull.
//!
//! Operating points are swept from the strictest threshold down; every
//! convex combination of two points is reachable by randomising between
//! their thresholds, so the EER is where the lower convex hull of the points
//! in (false-accept, false-reject) space meets the diagonal. Between the two
//! hull vertices bracketing that crossing the rates are interpolated
//! linearly.

use std::fmt;

use super::ScoreSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub far: f64,
    pub frr: f64,
    /// Scores at or above this value are accepted.
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Operating points from "accept nothing" to "accept everything", one per
/// distinct score.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    let n_t = scores.n_target();
    let n_n = scores.n_nontarget();
    if n_t == 0 || n_n == 0 {
        return Err(Error::invalid("EER needs at least one target and one non-target trial"));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .scores
        .iter()
        .zip(&scores.trials)
        .map(|(s, t)| (*s, t.target))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nt, nn) = (n_t as f64, n_n as f64);
    let mut points = Vec::with_capacity(pairs.len() + 1);
    points.push(RocPoint {
        far: 0.0,
        frr: 1.0,
        threshold: f64::INFINITY,
    });
    let (mut acc_t, mut acc_n) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                acc_t += 1;
            } else {
                acc_n += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            far: acc_n as f64 / nn,
            frr: 1.0 - acc_t as f64 / nt,
            threshold: s,
        });
    }
    Ok(points)
}

fn cross(o: &RocPoint, a: &RocPoint, b: &RocPoint) -> f64 {
    (a.far - o.far) * (b.frr - o.frr) - (a.frr - o.frr) * (b.far - o.far)
}

/// Lower-left convex hull of points already ordered by increasing FAR and
/// decreasing FRR.
fn lower_hull(points: &[RocPoint]) -> Vec<RocPoint> {
    let mut hull: Vec<RocPoint> = Vec::with_capacity(points.len());
    for p in points {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull
}

/// Equal error rate and the threshold at which it is reached.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    let points = roc_points(scores)?;
    let hull = lower_hull(&points);
    let max_score = scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let finite = |t: f64| if t.is_finite() { t } else { max_score };
    for w in hull.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let da = a.frr - a.far;
        let db = b.frr - b.far;
        if da >= 0.0 && db <= 0.0 {
            // FRR - FAR moves linearly from da to db along the segment
            let alpha = if da == db { 0.0 } else { da / (da - db) };
            let eer = a.far + alpha * (b.far - a.far);
            let (ta, tb) = (finite(a.threshold), finite(b.threshold));
            return Ok(Eer {
                eer,
                threshold: ta + alpha * (tb - ta),
            });
        }
    }
    unreachable!("the hull runs from (0, 1) to (1, 0) and must cross the diagonal")
}

/// Key-value summary printed by the evaluation command.
#[derive(Clone, Debug, PartialEq)]
pub struct EerReport {
    pub protocol: Option<String>,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    pub threshold: f64,
}

impl EerReport {
    pub fn from_scores(scores: &ScoreSet, protocol: Option<&str>) -> Result<Self> {
        let e = compute_eer(scores)?;
        Ok(Self {
            protocol: protocol.map(str::to_string),
            n_target: scores.n_target(),
            n_nontarget: scores.n_nontarget(),
            eer: e.eer,
            threshold: e.threshold,
        })
    }
}

impl fmt::Display for EerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol {}", self.protocol.as_deref().unwrap_or("none"))?;
        writeln!(f, "n_target {}", self.n_target)?;
        writeln!(f, "n_nontarget {}", self.n_nontarget)?;
        writeln!(f, "eer {:.4}", self.eer)?;
        writeln!(f, "eer_percent {:.2}", self.eer * 100.0)?;
        writeln!(f, "threshold {:.6}", self.threshold)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_trial_hand_case() {
        let s = ScoreSet::from_scores(&[0.8, 0.6], &[0.7, 0.2]).unwrap();
        let e = compute_eer(&s).unwrap();
        assert!((e.eer - 0.25).abs() < 1e-12);
        assert!((oracle::brute_force_eer(&s) - 0.25).abs() < 1e-12);
        // crossing halfway between the 0.8 and 0.6 operating points
        assert!((e.threshold - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_is_zero() {
        let s = ScoreSet::from_scores(&[1.0; 5], &[0.0; 7]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().eer, 0.0);
    }

    #[test]
    fn inverted_scores_give_one() {
        let s = ScoreSet::from_scores(&[0.0; 3], &[1.0; 3]).unwrap();
        // the hull falls back to the trivial operating points
        assert!((compute_eer(&s).unwrap().eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(compute_eer(&ScoreSet::from_scores(&[0.1], &[]).unwrap()).is_err());
        assert!(compute_eer(&ScoreSet::from_scores(&[], &[0.1]).unwrap()).is_err());
    }

    #[test]
    fn coin_flip_labels_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut t, mut n) = (Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let s: f64 = rng.gen();
            if rng.gen_bool(0.5) {
                t.push(s)
            } else {
                n.push(s)
            }
        }
        let e = compute_eer(&ScoreSet::from_scores(&t, &n).unwrap()).unwrap();
        assert!((e.eer - 0.5).abs() <= 0.01, "{}", e.eer);
    }

    #[test]
    fn report_format() {
        let s = ScoreSet::from_scores(&[0.8, 0.6], &[0.7, 0.2]).unwrap();
        let r = EerReport::from_scores(&s, Some("vox1-o")).unwrap().to_string();
        assert!(r.contains("eer 0.2500\n"));
        assert!(r.contains("eer_percent 25.00\n"));
        assert!(r.starts_with("protocol vox1-o\nn_target 2\nn_nontarget 2\n"));
    }

    fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40, 1usize..40, any::<u64>(), 1u32..20).prop_map(|(nt, nn, seed, levels)| {
            // a few quantisation levels force ties
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = |rng: &mut ChaCha8Rng, shift: f64| ((rng.gen::<f64>() + shift) * levels as f64).round();
            let t = (0..nt).map(|_| q(&mut rng, 0.3)).collect();
            let n = (0..nn).map(|_| q(&mut rng, 0.0)).collect();
            (t, n)
        })
    }

    proptest! {
        #[test]
        fn matches_oracle((t, n) in score_sets()) {
            let s = ScoreSet::from_scores(&t, &n).unwrap();
            let fast = compute_eer(&s).unwrap().eer;
            prop_assert!((fast - oracle::brute_force_eer(&s)).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_increasing_maps((t, n) in score_sets()) {
            let s = ScoreSet::from_scores(&t, &n).unwrap();
            let map = |v: &Vec<f64>| v.iter().map(|x| (x * 0.3).exp() * 2.0 - 7.0).collect::<Vec<_>>();
            let m = ScoreSet::from_scores(&map(&t), &map(&n)).unwrap();
            prop_assert!((compute_eer(&s).unwrap().eer - compute_eer(&m).unwrap().eer).abs() < 1e-12);
        }
    }
}
