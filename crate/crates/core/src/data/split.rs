//! Stratified train/validation/test assignment.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::math;

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];
const MIN_RECORDS: usize = 10;
const MIN_STRATUM: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRecord {
    pub id: String,
    /// Composite stratification key, e.g. `"sex=F|age=3"`.
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
    /// `(from, into)` for every stratum too small to split on its own.
    pub merged_strata: Vec<(String, String)>,
}

impl SplitSpec {
    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`; ties go to the earlier part.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| math::floor(q + 1e-9) as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// BFS over strata and columns. Returns the flips `(stratum, column, raised)`
/// that add one unit to stratum `start` and one unit to a column below target.
fn augmenting_path(
    start: usize,
    can_raise: &[[bool; 3]],
    raised: &[[bool; 3]],
    column: &[usize; 3],
    target: &[usize; 3],
) -> Option<Vec<(usize, usize, bool)>> {
    // parent of column k: the stratum that reached it
    let mut col_from: [Option<usize>; 3] = [None; 3];
    // parent of stratum s: the column it was reached from
    let mut st_from: Vec<Option<usize>> = vec![None; raised.len()];
    let mut visited_st = vec![false; raised.len()];
    visited_st[start] = true;
    let mut queue = alloc::collections::VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for k in 0..3 {
            if col_from[k].is_some() || !can_raise[s][k] || raised[s][k] {
                continue;
            }
            col_from[k] = Some(s);
            if column[k] < target[k] {
                let mut path = Vec::new();
                let mut kk = k;
                loop {
                    let st = col_from[kk].unwrap();
                    path.push((st, kk, true));
                    match st_from[st] {
                        Some(prev) => {
                            path.push((st, prev, false));
                            kk = prev;
                        }
                        None => return Some(path),
                    }
                }
            }
            for (s2, r) in raised.iter().enumerate() {
                if r[k] && !visited_st[s2] {
                    visited_st[s2] = true;
                    st_from[s2] = Some(k);
                    queue.push_back(s2);
                }
            }
        }
    }
    None
}

/// Splits records 0.7/0.15/0.15 (or `ratios`) within each stratum, rounding by
/// largest remainder so that both the global split sizes and each stratum's
/// split sizes are within one element of their exact quotas.
pub fn make_split(records: &[SplitRecord], ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if records.len() < MIN_RECORDS {
        return Err(config_err!("need at least {MIN_RECORDS} records to split, got {}", records.len()));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split ratios must be non-negative and sum to 1, got {ratios:?}"));
    }
    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        strata.entry(r.stratum.clone()).or_default().push(r.id.clone());
    }
    let mut seen: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("duplicate record ids".into()));
    }

    let mut merged_strata = Vec::new();
    while strata.len() > 1 {
        let Some(small) = strata.iter().find(|(_, ids)| ids.len() < MIN_STRATUM).map(|(k, _)| k.clone()) else {
            break;
        };
        let into = strata
            .range(..small.clone())
            .next_back()
            .or_else(|| strata.range(small.clone()..).nth(1))
            .map(|(k, _)| k.clone())
            .unwrap();
        log::warn!("stratum {small:?} has fewer than {MIN_STRATUM} records; merging into {into:?}");
        let ids = strata.remove(&small).unwrap();
        strata.get_mut(&into).unwrap().extend(ids);
        merged_strata.push((small, into));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<String>> = strata.into_values().collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    let target = apportion(records.len(), ratios);
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(groups.len());
    let mut leftover: Vec<usize> = Vec::with_capacity(groups.len());
    let mut candidates = Vec::new();
    for (s, g) in groups.iter().enumerate() {
        let quotas = ratios.map(|r| r * g.len() as f64);
        let floors = quotas.map(|q| math::floor(q + 1e-9) as usize);
        leftover.push(g.len() - floors.iter().sum::<usize>());
        for k in 0..3 {
            candidates.push((quotas[k] - floors[k] as f64, s, k));
        }
        alloc.push(floors);
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut column: [usize; 3] = [0, 1, 2].map(|k| alloc.iter().map(|a| a[k]).sum());
    let mut raised = vec![[false; 3]; groups.len()];
    for &(frac, s, k) in &candidates {
        if frac > 1e-9 && leftover[s] > 0 && column[k] < target[k] {
            raised[s][k] = true;
            leftover[s] -= 1;
            column[k] += 1;
        }
    }
    // Greedy can strand a unit when the only open column was already raised for
    // this stratum; reroute along an augmenting path instead.
    let can_raise: Vec<[bool; 3]> = candidates.iter().fold(vec![[false; 3]; groups.len()], |mut acc, &(f, s, k)| {
        acc[s][k] = f > 1e-9;
        acc
    });
    for s in 0..groups.len() {
        while leftover[s] > 0 {
            let path = augmenting_path(s, &can_raise, &raised, &column, &target)
                .ok_or_else(|| Error::Data("no consistent rounding of split sizes".into()))?;
            column[path[0].1] += 1;
            for (st, k, on) in path {
                raised[st][k] = on;
            }
            leftover[s] -= 1;
        }
    }
    for (a, r) in alloc.iter_mut().zip(&raised) {
        for k in 0..3 {
            a[k] += r[k] as usize;
        }
    }

    let mut parts: [Vec<String>; 3] = Default::default();
    for (g, a) in groups.into_iter().zip(&alloc) {
        let mut it = g.into_iter();
        for k in 0..3 {
            parts[k].extend(it.by_ref().take(a[k]));
        }
    }
    let [train, val, test] = parts;
    Ok(SplitSpec { train, val, test, ratios, seed, merged_strata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use proptest::prelude::*;

    fn records(n: usize, strata: usize) -> Vec<SplitRecord> {
        (0..n).map(|i| SplitRecord { id: format!("s{i:03}"), stratum: format!("k{}", i % strata) }).collect()
    }

    fn sizes(s: &SplitSpec) -> [usize; 3] {
        [s.train.len(), s.val.len(), s.test.len()]
    }

    #[test]
    fn hundred_two_strata() {
        let recs = records(100, 2);
        let s = make_split(&recs, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(sizes(&s), [70, 15, 15]);
        for k in ["k0", "k1"] {
            let ids: Vec<&String> = recs.iter().filter(|r| r.stratum == k).map(|r| &r.id).collect();
            let c = s.parts().map(|p| p.iter().filter(|id| ids.contains(id)).count());
            assert_eq!(c[0], 35);
            assert!((7..=8).contains(&c[1]) && (7..=8).contains(&c[2]), "{c:?}");
        }
    }

    #[test]
    fn twenty_records_rounding() {
        // Enumerated by hand: quotas 14, 3, 3 are already integral.
        assert_eq!(apportion(20, DEFAULT_RATIOS), [14, 3, 3]);
        let s = make_split(&records(20, 1), DEFAULT_RATIOS, 9).unwrap();
        assert_eq!(sizes(&s), [14, 3, 3]);
    }

    #[test]
    fn apportion_small_cases() {
        // 11 * (0.7, 0.15, 0.15) = (7.7, 1.65, 1.65): floors 7,1,1; two left -> train, val
        assert_eq!(apportion(11, DEFAULT_RATIOS), [8, 2, 1]);
        assert_eq!(apportion(13, DEFAULT_RATIOS), [9, 2, 2]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let recs = records(40, 3);
        assert_eq!(make_split(&recs, DEFAULT_RATIOS, 4).unwrap(), make_split(&recs, DEFAULT_RATIOS, 4).unwrap());
        assert_ne!(make_split(&recs, DEFAULT_RATIOS, 4).unwrap().train, make_split(&recs, DEFAULT_RATIOS, 5).unwrap().train);
    }

    #[test]
    fn small_stratum_is_merged() {
        let mut recs = records(20, 1);
        recs[0].stratum = "a-rare".into();
        let s = make_split(&recs, DEFAULT_RATIOS, 0).unwrap();
        assert_eq!(s.merged_strata, [("a-rare".into(), "k0".into())]);
        assert_eq!(sizes(&s), [14, 3, 3]);
    }

    #[test]
    fn too_few_records() {
        assert!(make_split(&records(9, 1), DEFAULT_RATIOS, 0).is_err());
    }

    proptest! {
        #[test]
        fn disjoint_cover_and_proportional(n in 10usize..120, k in 1usize..5, seed in 0u64..1000) {
            let recs = records(n, k);
            let s = make_split(&recs, DEFAULT_RATIOS, seed).unwrap();
            let mut all: Vec<&String> = s.parts().iter().flat_map(|p| p.iter()).collect();
            all.sort();
            let mut ids: Vec<&String> = recs.iter().map(|r| &r.id).collect();
            ids.sort();
            prop_assert_eq!(all, ids);
            let sz = sizes(&s);
            for j in 0..3 {
                prop_assert!((sz[j] as f64 - DEFAULT_RATIOS[j] * n as f64).abs() < 1.0 + 1e-9);
            }
            if s.merged_strata.is_empty() {
                for st in 0..k {
                    let ids: Vec<&String> = recs.iter().filter(|r| r.stratum == format!("k{st}")).map(|r| &r.id).collect();
                    for (j, p) in s.parts().iter().enumerate() {
                        let c = p.iter().filter(|id| ids.contains(id)).count();
                        prop_assert!((c as f64 - DEFAULT_RATIOS[j] * ids.len() as f64).abs() < 1.0 + 1e-9);
                    }
                }
            }
        }
    }
}
