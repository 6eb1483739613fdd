//! Calibration and selective-prediction metrics.
//!
//! All functions take any slice of [`Scored`] items: a confidence `r ∈ [0,1]`
//! and a correctness flag. `aurc`, `risk_coverage_points` and `roc_points`
//! need a strict ordering of confidences and refuse exact ties; use
//! [`noisy_average`] to break them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PredictionRecord;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_NOISE_SIGMA: f64 = 1e-6;
pub const DEFAULT_NOISE_REPEATS: usize = 10;

pub trait Scored {
    fn confidence(&self) -> f64;
    fn correct(&self) -> bool;
}

impl Scored for PredictionRecord {
    fn confidence(&self) -> f64 {
        self.confidence
    }
    fn correct(&self) -> bool {
        self.correct
    }
}

impl Scored for (f64, bool) {
    fn confidence(&self) -> f64 {
        self.0
    }
    fn correct(&self) -> bool {
        self.1
    }
}

impl<T: Scored + ?Sized> Scored for &T {
    fn confidence(&self) -> f64 {
        (**self).confidence()
    }
    fn correct(&self) -> bool {
        (**self).correct()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Aurc,
    Auroc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

impl CurvePoint {
    fn new(x: f64, y: f64) -> Self {
        CurvePoint { x, y }
    }
}

/// One calibration bin; accuracy and confidence are `None` when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub index: usize,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub aurc: f64,
    /// `None` when every record is correct or every record is wrong.
    pub auroc: Option<f64>,
    pub bins: Vec<BinStat>,
    pub noise_sigma: f64,
    pub noise_repeats: usize,
    pub seed: u64,
}

fn check<S: Scored>(records: &[S]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records".into()));
    }
    if let Some(bad) = records.iter().find(|r| !r.confidence().is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite confidence {}", bad.confidence())));
    }
    Ok(())
}

fn check_unit<S: Scored>(records: &[S]) -> Result<()> {
    check(records)?;
    match records.iter().find(|r| !(0.0..=1.0).contains(&r.confidence())) {
        Some(bad) => Err(Error::InvalidInput(format!("confidence {} outside [0, 1]", bad.confidence()))),
        None => Ok(()),
    }
}

/// Records sorted by descending confidence; errors on exact ties.
fn strict_order<S: Scored>(records: &[S]) -> Result<Vec<&S>> {
    check(records)?;
    let mut sorted: Vec<&S> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    if sorted.windows(2).any(|w| w[0].confidence() == w[1].confidence()) {
        return Err(Error::TiesPresent);
    }
    Ok(sorted)
}

pub fn accuracy<S: Scored>(records: &[S]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records".into()));
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// 1-based bin with `(m-1)/M < r <= m/M`; `r = 0` lands in bin 1.
pub fn bin_index(r: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut idx = ((r * mf).ceil() as usize).clamp(1, m);
    if idx > 1 && r <= (idx - 1) as f64 / mf {
        idx -= 1;
    }
    if idx < m && r > idx as f64 / mf {
        idx += 1;
    }
    idx
}

pub fn calibration_bins<S: Scored>(records: &[S], m: usize) -> Result<Vec<BinStat>> {
    check_unit(records)?;
    if m == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let mut sums = vec![(0usize, 0usize, 0.0f64); m];
    for r in records {
        let slot = &mut sums[bin_index(r.confidence(), m) - 1];
        slot.0 += 1;
        slot.1 += r.correct() as usize;
        slot.2 += r.confidence();
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, hits, conf))| BinStat {
            index: i + 1,
            count,
            accuracy: (count > 0).then(|| hits as f64 / count as f64),
            confidence: (count > 0).then(|| conf / count as f64),
        })
        .collect())
}

/// Expected calibration error with `m` equal-width bins, each weighted by
/// its share of the records.
pub fn ece<S: Scored>(records: &[S], m: usize) -> Result<f64> {
    let bins = calibration_bins(records, m)?;
    let n = records.len() as f64;
    Ok(bins
        .iter()
        .filter_map(|b| Some(b.count as f64 / n * (b.accuracy? - b.confidence?).abs()))
        .sum())
}

/// `(K/N, Acc(top K))` for `K = 1..=N`, most confident first.
pub fn risk_coverage_points<S: Scored>(records: &[S]) -> Result<Vec<CurvePoint>> {
    let sorted = strict_order(records)?;
    let n = sorted.len() as f64;
    let mut hits = 0usize;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            hits += r.correct() as usize;
            let k = (i + 1) as f64;
            CurvePoint::new(k / n, hits as f64 / k)
        })
        .collect())
}

/// Mean selective accuracy over all coverage levels.
pub fn aurc<S: Scored>(records: &[S]) -> Result<f64> {
    let points = risk_coverage_points(records)?;
    Ok(points.iter().map(|p| p.y).sum::<f64>() / points.len() as f64)
}

fn class_counts<S: Scored>(records: &[S]) -> Result<(usize, usize)> {
    let pos = records.iter().filter(|r| r.correct()).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    Ok((pos, neg))
}

/// Probability that a correct record outranks an incorrect one, counting
/// ties as one half.
pub fn auroc<S: Scored>(records: &[S]) -> Result<f64> {
    check(records)?;
    let (pos, neg) = class_counts(records)?;
    let mut sorted: Vec<&S> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence().total_cmp(&b.confidence()));
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for group in sorted.chunk_by(|a, b| a.confidence() == b.confidence()) {
        let p = group.iter().filter(|r| r.correct()).count();
        let q = group.len() - p;
        wins += p as f64 * neg_below as f64 + 0.5 * (p * q) as f64;
        neg_below += q;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// `(FPR, TPR)` from `(0, 0)` to `(1, 1)` as the threshold drops past each
/// confidence.
pub fn roc_points<S: Scored>(records: &[S]) -> Result<Vec<CurvePoint>> {
    check(records)?;
    let (pos, neg) = class_counts(records)?;
    let sorted = strict_order(records)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![CurvePoint::new(0.0, 0.0)];
    for r in sorted {
        if r.correct() {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(CurvePoint::new(fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a curve given in nondecreasing `x`.
pub fn trapezoid(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].y + w[1].y) / 2.0)
        .sum()
}

pub fn metric<S: Scored>(records: &[S], which: Metric) -> Result<f64> {
    match which {
        Metric::Aurc => aurc(records),
        Metric::Auroc => auroc(records),
    }
}

/// Mean of `which` over `repeats` copies of the records, each with i.i.d.
/// `N(0, sigma²)` noise added to every confidence. Repeat `i` draws from
/// stream `i` of a ChaCha generator seeded with `seed`.
pub fn noisy_average<S: Scored>(records: &[S], which: Metric, sigma: f64, repeats: usize, seed: u64) -> Result<f64> {
    check(records)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be >= 1".into()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut mean = 0.0;
    for k in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let noisy: Vec<(f64, bool)> = records
            .iter()
            .map(|r| {
                let eps = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (r.confidence() + eps, r.correct())
            })
            .collect();
        let x = metric(&noisy, which)?;
        mean += (x - mean) / (k + 1) as f64;
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bins: usize,
    pub sigma: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bins: DEFAULT_BINS,
            sigma: DEFAULT_NOISE_SIGMA,
            repeats: DEFAULT_NOISE_REPEATS,
            seed: 0,
        }
    }
}

/// Accuracy, ECE, and noise-averaged AURC and AUROC.
pub fn summarize<S: Scored>(records: &[S], opts: &EvalOptions) -> Result<EvalSummary> {
    let auroc = match noisy_average(records, Metric::Auroc, opts.sigma, opts.repeats, opts.seed) {
        Ok(v) => Some(v),
        Err(Error::UndefinedAuroc) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalSummary {
        n: records.len(),
        accuracy: accuracy(records)?,
        ece: ece(records, opts.bins)?,
        aurc: noisy_average(records, Metric::Aurc, opts.sigma, opts.repeats, opts.seed)?,
        auroc,
        bins: calibration_bins(records, opts.bins)?,
        noise_sigma: opts.sigma,
        noise_repeats: opts.repeats,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(pairs: &[(f64, u8)]) -> Vec<(f64, bool)> {
        pairs.iter().map(|&(r, c)| (r, c == 1)).collect()
    }

    /// Bin membership read straight off the interval definition.
    fn oracle_ece(records: &[(f64, bool)], m: usize) -> f64 {
        let n = records.len() as f64;
        let mut total = 0.0;
        for b in 1..=m {
            let members: Vec<&(f64, bool)> = records
                .iter()
                .filter(|(r, _)| {
                    let lo = (b - 1) as f64 / m as f64;
                    let hi = b as f64 / m as f64;
                    (*r > lo && *r <= hi) || (b == 1 && *r == 0.0)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let acc = members.iter().filter(|x| x.1).count() as f64 / k;
            let conf = members.iter().map(|x| x.0).sum::<f64>() / k;
            total += k / n * (acc - conf).abs();
        }
        total
    }

    fn oracle_aurc(records: &[(f64, bool)]) -> f64 {
        let n = records.len();
        let mut acc_sum = 0.0;
        for k in 1..=n {
            // top-k by repeated selection of the maximum remaining confidence
            let mut taken = vec![false; n];
            let mut hits = 0;
            for _ in 0..k {
                let best = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&i, &j| records[i].0.partial_cmp(&records[j].0).unwrap())
                    .unwrap();
                taken[best] = true;
                hits += records[best].1 as usize;
            }
            acc_sum += hits as f64 / k as f64;
        }
        acc_sum / n as f64
    }

    fn oracle_auroc(records: &[(f64, bool)]) -> f64 {
        let (mut score, mut pairs) = (0.0, 0.0);
        for p in records.iter().filter(|r| r.1) {
            for q in records.iter().filter(|r| !r.1) {
                pairs += 1.0;
                score += if p.0 > q.0 {
                    1.0
                } else if p.0 == q.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        score / pairs
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&recs(&[(1.0, 1), (1.0, 1)]), 10).unwrap(), 0.0);
        let r = recs(&[(0.95, 1), (0.85, 1), (0.65, 0), (0.30, 0)]);
        assert!((ece(&r, 10).unwrap() - 0.2875).abs() < 1e-12);
        assert!((ece(&r, 10).unwrap() - oracle_ece(&r, 10)).abs() < 1e-12);
        assert_eq!(ece(&recs(&[(0.5, 0)]), 10).unwrap(), 0.5);
        assert!(matches!(ece::<(f64, bool)>(&[], 10), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.30000000000000004, 10), 4);
        assert_eq!(bin_index(1.0, 10), 10);
        assert_eq!(bin_index(1e-300, 10), 1);
        for i in 1..=10 {
            assert_eq!(bin_index(i as f64 / 10.0, 10), i);
        }
    }

    #[test]
    fn aurc_examples() {
        assert_eq!(aurc(&recs(&[(0.9, 1), (0.5, 1), (0.1, 1)])).unwrap(), 1.0);
        let r = recs(&[(0.9, 1), (0.8, 1), (0.7, 0)]);
        assert!((aurc(&r).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        let r = recs(&[(0.9, 0), (0.8, 1), (0.7, 1)]);
        assert!((aurc(&r).unwrap() - 0.3888888888888889).abs() < 1e-12);
        assert!(matches!(aurc(&recs(&[(0.5, 1), (0.5, 0)])), Err(Error::TiesPresent)));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&recs(&[(0.9, 1), (0.2, 0)])).unwrap(), 1.0);
        assert_eq!(auroc(&recs(&[(0.9, 1), (0.8, 0), (0.3, 1)])).unwrap(), 0.5);
        assert!(matches!(auroc(&recs(&[(0.9, 1), (0.3, 1)])), Err(Error::UndefinedAuroc)));
        assert_eq!(auroc(&recs(&[(0.5, 1), (0.5, 0)])).unwrap(), 0.5);
    }

    #[test]
    fn curve_examples() {
        let rc = risk_coverage_points(&recs(&[(0.9, 1), (0.8, 1), (0.7, 0)])).unwrap();
        let expect = [(1.0 / 3.0, 1.0), (2.0 / 3.0, 1.0), (1.0, 2.0 / 3.0)];
        for (p, (x, y)) in rc.iter().zip(expect) {
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12);
        }
        assert_eq!(risk_coverage_points(&recs(&[(0.4, 1)])).unwrap(), vec![CurvePoint::new(1.0, 1.0)]);

        let roc = roc_points(&recs(&[(0.9, 1), (0.1, 0)])).unwrap();
        assert_eq!(
            roc,
            vec![CurvePoint::new(0.0, 0.0), CurvePoint::new(0.0, 1.0), CurvePoint::new(1.0, 1.0)]
        );
        let roc = roc_points(&recs(&[(0.9, 1), (0.8, 0), (0.3, 1)])).unwrap();
        assert!((trapezoid(&roc) - 0.5).abs() < 1e-12);
        assert!(matches!(roc_points(&recs(&[(0.5, 1), (0.5, 0)])), Err(Error::TiesPresent)));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&recs(&[(0.1, 1), (0.2, 1), (0.3, 0), (0.4, 1)])).unwrap(), 0.75);
        assert!(accuracy::<(f64, bool)>(&[]).is_err());
        assert_eq!(accuracy(&recs(&[(0.1, 1)])).unwrap(), 1.0);
    }

    #[test]
    fn noise_examples() {
        let r = recs(&[(0.9, 1), (0.8, 0), (0.3, 1)]);
        assert_eq!(noisy_average(&r, Metric::Aurc, 0.0, 10, 1).unwrap(), aurc(&r).unwrap());
        assert_eq!(noisy_average(&r, Metric::Auroc, 0.0, 7, 1).unwrap(), auroc(&r).unwrap());
        let a = noisy_average(&r, Metric::Aurc, 1e-6, 10, 42).unwrap();
        assert_eq!(a, noisy_average(&r, Metric::Aurc, 1e-6, 10, 42).unwrap());

        let tied = recs(&[(0.5, 1), (0.5, 0)]);
        let v = noisy_average(&tied, Metric::Auroc, 1e-6, 10_000, 3).unwrap();
        assert!((v - 0.5).abs() <= 0.02, "{v}");
        // Monte-Carlo oracle: fraction of draws where the correct record's
        // noise exceeds the incorrect one's.
        let normal = Normal::new(0.0, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let wins = (0..10_000)
            .filter(|_| normal.sample(&mut rng) > normal.sample(&mut rng))
            .count();
        assert!((v - wins as f64 / 10_000.0).abs() < 0.03);
    }

    #[test]
    fn summary_reports_undefined_auroc() {
        let s = summarize(&recs(&[(0.9, 1), (0.6, 1)]), &EvalOptions::default()).unwrap();
        assert_eq!(s.auroc, None);
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.bins.len(), 10);
        assert_eq!(s.bins.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    fn distinct_records(max: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::btree_set(0u32..1_000_000, 1..max).prop_flat_map(|set| {
            let n = set.len();
            (Just(set), prop::collection::vec(any::<bool>(), n)).prop_map(|(set, cs)| {
                set.into_iter()
                    .zip(cs)
                    .map(|(k, c)| (k as f64 / 1_000_000.0, c))
                    .collect()
            })
        })
    }

    fn grid_records() -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::vec((0u32..=20, any::<bool>()), 1..60)
            .prop_map(|v| v.into_iter().map(|(k, c)| (k as f64 / 20.0, c)).collect())
    }

    proptest! {
        #[test]
        fn ece_matches_oracle(r in grid_records(), m in 1usize..15) {
            let got = ece(&r, m).unwrap();
            prop_assert!((got - oracle_ece(&r, m)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
            let bins = calibration_bins(&r, m).unwrap();
            let weight: f64 = bins.iter().map(|b| b.count as f64 / r.len() as f64).sum();
            prop_assert!((weight - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aurc_matches_oracle(r in distinct_records(40)) {
            prop_assert!((aurc(&r).unwrap() - oracle_aurc(&r)).abs() < 1e-12);
        }

        #[test]
        fn auroc_matches_oracle_and_roc(r in distinct_records(40)) {
            match auroc(&r) {
                Ok(v) => {
                    prop_assert!((v - oracle_auroc(&r)).abs() < 1e-12);
                    let area = trapezoid(&roc_points(&r).unwrap());
                    prop_assert!((area - v).abs() < 1e-9);
                }
                Err(e) => prop_assert!(matches!(e, Error::UndefinedAuroc)),
            }
        }

        #[test]
        fn auroc_with_ties_matches_oracle(r in grid_records()) {
            if let Ok(v) = auroc(&r) {
                prop_assert!((v - oracle_auroc(&r)).abs() < 1e-12);
            }
        }

        #[test]
        fn correct_first_maximizes_aurc(r in distinct_records(30)) {
            let mut conf: Vec<f64> = r.iter().map(|x| x.0).collect();
            conf.sort_by(|a, b| b.total_cmp(a));
            let mut flags: Vec<bool> = r.iter().map(|x| x.1).collect();
            flags.sort_by(|a, b| b.cmp(a));
            let best: Vec<(f64, bool)> = conf.into_iter().zip(flags).collect();
            prop_assert!(aurc(&best).unwrap() >= aurc(&r).unwrap() - 1e-12);
        }

        #[test]
        fn permutation_invariant(r in distinct_records(30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = r.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aurc(&r).unwrap(), aurc(&shuffled).unwrap());
            prop_assert!((ece(&r, 10).unwrap() - ece(&shuffled, 10).unwrap()).abs() < 1e-12);
            prop_assert_eq!(accuracy(&r).unwrap(), accuracy(&shuffled).unwrap());
            if let Ok(v) = auroc(&r) {
                prop_assert_eq!(v, auroc(&shuffled).unwrap());
            }
        }

        #[test]
        fn curves_are_monotone_in_x(r in distinct_records(30)) {
            let rc = risk_coverage_points(&r).unwrap();
            prop_assert!(rc.windows(2).all(|w| w[0].x <= w[1].x));
            if let Ok(roc) = roc_points(&r) {
                prop_assert!(roc.windows(2).all(|w| w[0].x <= w[1].x));
                prop_assert_eq!(roc.last().copied(), Some(CurvePoint::new(1.0, 1.0)));
            }
        }
    }
}
