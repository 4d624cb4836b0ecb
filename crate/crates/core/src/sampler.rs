//! Positive/negative minibatch construction for the second-stage heads.
//!
//! *Soft* sampling honors the ratio only when enough positives exist and
//! otherwise fills the batch with negatives. *Hard* sampling enforces the
//! ratio by repeating positives, recorded as per-entry multiplicities.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::geometry::ProposalLabel;
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    Soft,
    Hard,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::Policy(format!(
                "sampling mode must be soft or hard, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

/// Positive:negative parts, written `P:N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub pos: usize,
    pub neg: usize,
}

impl Ratio {
    pub fn new(pos: usize, neg: usize) -> Result<Self> {
        if pos == 0 || neg == 0 {
            return Err(Error::Policy(format!(
                "ratio parts must be positive, got {pos}:{neg}"
            )));
        }
        Ok(Self { pos, neg })
    }

    pub fn positive_fraction(&self) -> f64 {
        self.pos as f64 / (self.pos + self.neg) as f64
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Policy(format!("ratio must look like \"P:N\", got {s:?}"));
        let (p, n) = s.trim().split_once(':').ok_or_else(bad)?;
        let p = p.trim().parse().map_err(|_| bad())?;
        let n = n.trim().parse().map_err(|_| bad())?;
        Ratio::new(p, n)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.pos, self.neg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub ratio: Ratio,
    pub batch_size: usize,
}

impl SamplingPolicy {
    pub fn new(mode: SamplingMode, ratio: Ratio, batch_size: usize) -> Result<Self> {
        let p = Self {
            mode,
            ratio,
            batch_size,
        };
        if batch_size < ratio.pos + ratio.neg || p.pos_target() == 0 {
            return Err(Error::Policy(format!(
                "batch size {batch_size} too small for ratio {ratio}"
            )));
        }
        Ok(p)
    }

    /// `floor(B * pos / (pos + neg))`.
    pub fn pos_target(&self) -> usize {
        self.batch_size * self.ratio.pos / (self.ratio.pos + self.ratio.neg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    /// `(proposal index, multiplicity)`, positives first, each group in
    /// ascending index order.
    pub entries: Vec<(usize, usize)>,
    pub pos_count_unique: usize,
    pub pos_count_effective: usize,
    pub neg_count: usize,
}

impl SampledBatch {
    pub fn len_effective(&self) -> usize {
        self.pos_count_effective + self.neg_count
    }
}

pub fn count_positives(batch: &SampledBatch) -> (usize, usize) {
    (batch.pos_count_unique, batch.pos_count_effective)
}

fn split<T>(labels: &[ProposalLabel<T>]) -> (Vec<usize>, Vec<usize>)
where
    T: crate::Scalar,
{
    (0..labels.len()).partition(|&i| labels[i].is_positive())
}

/// Picks `k` of `pool` uniformly without replacement, returned sorted.
fn pick(pool: &[usize], k: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut out: Vec<usize> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

fn check_total(available: usize, policy: &SamplingPolicy) -> Result<()> {
    if available < policy.batch_size {
        return Err(Error::NotEnoughProposals {
            needed: policy.batch_size,
            available,
        });
    }
    Ok(())
}

/// Soft sampling: `min(N+, pos_target)` positives and negatives for the
/// rest of the batch. If negatives run short the remainder is filled with
/// further positives so the batch always holds exactly `B` entries.
pub fn sample_soft<T: crate::Scalar>(
    labels: &[ProposalLabel<T>],
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<SampledBatch> {
    check_total(labels.len(), policy)?;
    let (pos, neg) = split(labels);
    let mut rng = rng_from(seed);
    let b = policy.batch_size;
    let want_pos = pos.len().min(policy.pos_target());
    let want_neg = (b - want_pos).min(neg.len());
    let want_pos = b - want_neg;
    let pos_sel = pick(&pos, want_pos, &mut rng);
    let neg_sel = pick(&neg, want_neg, &mut rng);
    Ok(SampledBatch {
        pos_count_unique: pos_sel.len(),
        pos_count_effective: pos_sel.len(),
        neg_count: neg_sel.len(),
        entries: pos_sel.into_iter().chain(neg_sel).map(|i| (i, 1)).collect(),
    })
}

/// Hard sampling: when `0 < N+ < pos_target`, every positive is repeated so
/// the multiplicities sum to `pos_target` exactly (differing by at most one,
/// extra copies on the lowest indices). Otherwise identical to soft.
pub fn sample_hard<T: crate::Scalar>(
    labels: &[ProposalLabel<T>],
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<SampledBatch> {
    check_total(labels.len(), policy)?;
    let (pos, neg) = split(labels);
    let target = policy.pos_target();
    if pos.is_empty() || pos.len() >= target {
        return sample_soft(labels, policy, seed);
    }
    let mut rng = rng_from(seed);
    let base = target / pos.len();
    let extra = target % pos.len();
    let neg_sel = pick(&neg, policy.batch_size - target, &mut rng);
    let entries = pos
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, base + usize::from(k < extra)))
        .chain(neg_sel.iter().map(|&i| (i, 1)))
        .collect();
    Ok(SampledBatch {
        entries,
        pos_count_unique: pos.len(),
        pos_count_effective: target,
        neg_count: neg_sel.len(),
    })
}

pub fn sample<T: crate::Scalar>(
    labels: &[ProposalLabel<T>],
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<SampledBatch> {
    match policy.mode {
        SamplingMode::Soft => sample_soft(labels, policy, seed),
        SamplingMode::Hard => sample_hard(labels, policy, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: usize, neg: usize) -> Vec<ProposalLabel<f64>> {
        let p = ProposalLabel {
            class_id: 1,
            max_iou: 0.8,
            matched_gt: Some(0),
            nearest_class: Some(1),
            regression_target: Some([0.0; 4]),
        };
        // interleave so positives are not a prefix
        let mut out = Vec::new();
        let (mut a, mut b) = (pos, neg);
        while a + b > 0 {
            if a > 0 {
                out.push(p);
                a -= 1;
            }
            if b > 0 {
                out.push(ProposalLabel::background());
                b -= 1;
            }
        }
        out
    }

    fn policy(mode: SamplingMode, p: usize, n: usize, b: usize) -> SamplingPolicy {
        SamplingPolicy::new(mode, Ratio::new(p, n).unwrap(), b).unwrap()
    }

    fn check_labels(batch: &SampledBatch, l: &[ProposalLabel<f64>]) {
        let npos = batch.pos_count_unique;
        for (k, &(i, m)) in batch.entries.iter().enumerate() {
            assert_eq!(l[i].is_positive(), k < npos);
            assert!(m >= 1);
            if !l[i].is_positive() {
                assert_eq!(m, 1);
            }
        }
    }

    #[test]
    fn soft_examples() {
        let pol = policy(SamplingMode::Soft, 1, 3, 512);
        assert_eq!(pol.pos_target(), 128);
        let l = labels(200, 800);
        let b = sample_soft(&l, &pol, 1).unwrap();
        assert_eq!((b.pos_count_unique, b.neg_count), (128, 384));
        check_labels(&b, &l);
        let l = labels(40, 800);
        let b = sample_soft(&l, &pol, 1).unwrap();
        assert_eq!((b.pos_count_unique, b.neg_count), (40, 472));
        assert_eq!(count_positives(&b), (40, 40));
        let b = sample_soft(&labels(0, 800), &pol, 1).unwrap();
        assert_eq!((b.pos_count_unique, b.neg_count), (0, 512));
        assert_eq!(count_positives(&b), (0, 0));
    }

    #[test]
    fn hard_examples() {
        let pol = policy(SamplingMode::Hard, 1, 1, 8);
        let l = labels(1, 20);
        let b = sample_hard(&l, &pol, 3).unwrap();
        assert_eq!(b.entries[0].1, 4);
        assert_eq!(b.neg_count, 4);
        assert_eq!(count_positives(&b), (1, 4));
        check_labels(&b, &l);

        let pol = policy(SamplingMode::Hard, 1, 3, 512);
        let b = sample_hard(&labels(200, 800), &pol, 3).unwrap();
        assert_eq!(count_positives(&b), (128, 128));
        assert!(b.entries.iter().all(|&(_, m)| m == 1));
        let b = sample_hard(&labels(0, 800), &pol, 3).unwrap();
        assert_eq!((b.pos_count_effective, b.neg_count), (0, 512));
    }

    #[test]
    fn hard_spreads_copies_evenly_from_lowest_index() {
        let pol = policy(SamplingMode::Hard, 1, 1, 20);
        let l = labels(3, 30);
        let b = sample_hard(&l, &pol, 0).unwrap();
        let m: Vec<usize> = b.entries[..3].iter().map(|e| e.1).collect();
        assert_eq!(m, vec![4, 3, 3]);
        assert!(b.entries[0].0 < b.entries[1].0);
    }

    #[test]
    fn too_few_proposals_is_an_error() {
        let pol = policy(SamplingMode::Soft, 1, 3, 64);
        assert!(matches!(
            sample_soft(&labels(10, 20), &pol, 0),
            Err(Error::NotEnoughProposals { needed: 64, available: 30 })
        ));
        let pol = policy(SamplingMode::Hard, 1, 3, 64);
        assert!(sample_hard(&labels(10, 20), &pol, 0).is_err());
    }

    #[test]
    fn short_negatives_are_topped_up_with_positives() {
        let pol = policy(SamplingMode::Soft, 1, 9, 100);
        let b = sample_soft(&labels(80, 50), &pol, 0).unwrap();
        assert_eq!(b.neg_count, 50);
        assert_eq!(b.pos_count_effective, 50);
        assert_eq!(b.len_effective(), 100);
    }

    #[test]
    fn policy_and_ratio_validation() {
        assert_eq!("1:9".parse::<Ratio>().unwrap(), Ratio::new(1, 9).unwrap());
        assert!("1-9".parse::<Ratio>().is_err());
        assert!("0:3".parse::<Ratio>().is_err());
        assert!(SamplingPolicy::new(SamplingMode::Soft, Ratio::new(1, 9).unwrap(), 5).is_err());
        assert!(SamplingPolicy::new(SamplingMode::Soft, Ratio::new(1, 9).unwrap(), 10).is_ok());
        assert_eq!("hard".parse::<SamplingMode>().unwrap(), SamplingMode::Hard);
    }

    #[test]
    fn exhaustive_conservation_small_batch() {
        for mode in [SamplingMode::Soft, SamplingMode::Hard] {
            let pol = policy(mode, 1, 3, 32);
            for npos in 0..=32 {
                let l = labels(npos, 40);
                let b = sample(&l, &pol, npos as u64).unwrap();
                assert_eq!(b.len_effective(), 32);
                let total: usize = b.entries.iter().map(|e| e.1).sum();
                assert_eq!(total, 32);
                check_labels(&b, &l);
                match mode {
                    SamplingMode::Soft => {
                        assert_eq!(b.pos_count_effective, npos.min(8));
                        assert!(b.entries.iter().all(|e| e.1 == 1));
                    }
                    SamplingMode::Hard if npos > 0 => assert_eq!(b.pos_count_effective, 8),
                    SamplingMode::Hard => assert_eq!(b.pos_count_effective, 0),
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let pol = policy(SamplingMode::Soft, 1, 3, 64);
        let l = labels(50, 200);
        assert_eq!(sample_soft(&l, &pol, 9).unwrap(), sample_soft(&l, &pol, 9).unwrap());
        assert_ne!(sample_soft(&l, &pol, 9).unwrap(), sample_soft(&l, &pol, 10).unwrap());
    }
}
