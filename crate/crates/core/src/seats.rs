//! Highest-averages seat apportionment with a legal threshold.
//!
//! [`dhondt_allocate`] hands out seats one at a time to the largest quotient
//! `votes / (seats + 1)`. [`jefferson_allocate`] reaches the same result by
//! searching for the price per seat at which demand meets supply, and is kept
//! as an independent check.
//!
//! Ties between equal quotients go to the party with more votes, then to the
//! party listed first.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProvinceVotes {
    pub province: u32,
    /// Votes per party, aligned with the party list passed to [`allocate_nation`].
    pub votes: Vec<f64>,
    pub contingent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeatAllocation {
    pub parties: Vec<String>,
    pub provinces: Vec<(u32, Vec<u32>)>,
    pub national: Vec<u32>,
}

impl SeatAllocation {
    pub fn total(&self) -> u32 {
        self.national.iter().sum()
    }

    pub fn seats_of(&self, party: &str) -> Option<u32> {
        self.parties
            .iter()
            .position(|p| p == party)
            .map(|i| self.national[i])
    }
}

fn validate(votes: &[f64], contingent: u32, threshold: f64) -> Result<()> {
    if contingent == 0 {
        return Err(Error::InvalidInput("contingent must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} outside [0, 1)"
        )));
    }
    if let Some(v) = votes.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!("invalid vote count {v}")));
    }
    Ok(())
}

/// Indices of parties with positive votes whose share reaches the threshold.
fn eligible(votes: &[f64], threshold: f64) -> Result<Vec<usize>> {
    let total: f64 = votes.iter().sum();
    let out: Vec<usize> = (0..votes.len())
        .filter(|&i| votes[i] > 0.0 && votes[i] / total >= threshold)
        .collect();
    if out.is_empty() {
        return Err(Error::NoEligibleParty { threshold });
    }
    Ok(out)
}

/// Compares the next quotients of parties `a` and `b` without dividing;
/// `Greater` means `a` has precedence.
fn precedence(votes: &[f64], seats: &[u32], a: usize, b: usize) -> Ordering {
    let qa = votes[a] * f64::from(seats[b] + 1);
    let qb = votes[b] * f64::from(seats[a] + 1);
    qa.partial_cmp(&qb)
        .unwrap_or(Ordering::Equal)
        .then(votes[a].partial_cmp(&votes[b]).unwrap_or(Ordering::Equal))
        .then(b.cmp(&a))
}

pub fn dhondt_allocate(votes: &[f64], contingent: u32, threshold: f64) -> Result<Vec<u32>> {
    validate(votes, contingent, threshold)?;
    let pool = eligible(votes, threshold)?;
    let mut seats = vec![0u32; votes.len()];
    for _ in 0..contingent {
        let best = pool
            .iter()
            .copied()
            .reduce(|a, b| {
                if precedence(votes, &seats, b, a) == Ordering::Greater {
                    b
                } else {
                    a
                }
            })
            .expect("pool is non-empty");
        seats[best] += 1;
    }
    Ok(seats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JeffersonOutcome {
    pub seats: Vec<u32>,
    /// Highest price per seat (votes) at which every party affords its seats.
    pub price: f64,
}

/// Divisor method: bisect on the price per seat until floor-demand meets the
/// contingent, then settle any residual seats at the critical price.
pub fn jefferson_allocate(votes: &[f64], contingent: u32, threshold: f64) -> Result<JeffersonOutcome> {
    validate(votes, contingent, threshold)?;
    let pool = eligible(votes, threshold)?;
    let k = u64::from(contingent);
    let demand = |price: f64| -> u64 {
        pool.iter()
            .map(|&i| (votes[i] / price).floor() as u64)
            .sum()
    };

    let vmax = pool.iter().map(|&i| votes[i]).fold(0.0, f64::max);
    // demand(hi) <= k < demand(lo)
    let mut hi = vmax * 2.0;
    let mut lo = vmax / (k as f64 + 1.0) / pool.len() as f64;
    while demand(lo) <= k {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if demand(mid) > k {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }

    let mut seats = vec![0u32; votes.len()];
    for &i in &pool {
        seats[i] = (votes[i] / hi).floor() as u32;
    }
    let mut assigned: u64 = seats.iter().map(|&s| u64::from(s)).sum();
    // Parties whose next seat becomes affordable at the critical price.
    while assigned < k {
        let best = pool
            .iter()
            .copied()
            .reduce(|a, b| {
                if precedence(votes, &seats, b, a) == Ordering::Greater {
                    b
                } else {
                    a
                }
            })
            .expect("pool is non-empty");
        seats[best] += 1;
        assigned += 1;
    }
    let price = pool
        .iter()
        .filter(|&&i| seats[i] > 0)
        .map(|&i| votes[i] / f64::from(seats[i]))
        .fold(f64::INFINITY, f64::min);
    Ok(JeffersonOutcome { seats, price })
}

/// Allocates each province independently and sums the national chamber.
pub fn allocate_nation(
    parties: &[String],
    provinces: &[ProvinceVotes],
    threshold: f64,
) -> Result<SeatAllocation> {
    let mut seen = HashSet::new();
    let mut national = vec![0u32; parties.len()];
    let mut out = Vec::with_capacity(provinces.len());
    for p in provinces {
        if !seen.insert(p.province) {
            return Err(Error::InvalidInput(format!(
                "duplicate province {}",
                p.province
            )));
        }
        if p.votes.len() != parties.len() {
            return Err(Error::InvalidInput(format!(
                "province {} has {} vote entries for {} parties",
                p.province,
                p.votes.len(),
                parties.len()
            )));
        }
        let seats = dhondt_allocate(&p.votes, p.contingent, threshold)?;
        for (n, s) in national.iter_mut().zip(&seats) {
            *n += s;
        }
        out.push((p.province, seats));
    }
    Ok(SeatAllocation {
        parties: parties.to_vec(),
        provinces: out,
        national,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Lists every quotient v/d and takes the top `k`, breaking ties by the
    /// documented rule. Kept deliberately naive.
    fn enumerate_quotients(votes: &[f64], k: u32, threshold: f64) -> Vec<u32> {
        let total: f64 = votes.iter().sum();
        let mut q: Vec<(f64, f64, usize)> = Vec::new();
        for (i, &v) in votes.iter().enumerate() {
            if v > 0.0 && v / total >= threshold {
                for d in 1..=k {
                    q.push((v / f64::from(d), v, i));
                }
            }
        }
        q.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(b.1.partial_cmp(&a.1).unwrap())
                .then(a.2.cmp(&b.2))
        });
        let mut seats = vec![0; votes.len()];
        for &(_, _, i) in q.iter().take(k as usize) {
            seats[i] += 1;
        }
        seats
    }

    #[test]
    fn single_party_takes_everything() {
        assert_eq!(dhondt_allocate(&[1234.0], 7, 0.03).unwrap(), vec![7]);
        let j = jefferson_allocate(&[1234.0], 7, 0.03).unwrap();
        assert_eq!(j.seats, vec![7]);
        assert!(j.price > 0.0 && j.price <= 1234.0 / 7.0 + 1e-9);
    }

    #[test]
    fn small_example() {
        let v = [100.0, 80.0, 30.0];
        assert_eq!(enumerate_quotients(&v, 5, 0.0), vec![3, 2, 0]);
        assert_eq!(dhondt_allocate(&v, 5, 0.0).unwrap(), vec![3, 2, 0]);
        let j = jefferson_allocate(&v, 5, 0.0).unwrap();
        assert_eq!(j.seats, vec![3, 2, 0]);
        assert!(j.price > 30.0 && j.price <= 33.34, "price {}", j.price);
    }

    #[test]
    fn threshold_excludes_small_parties() {
        let v = [960.0, 25.0, 15.0];
        assert_eq!(dhondt_allocate(&v, 10, 0.03).unwrap(), vec![10, 0, 0]);
        assert_eq!(jefferson_allocate(&v, 10, 0.03).unwrap().seats, vec![10, 0, 0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            dhondt_allocate(&[1.0, 1.0], 0, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            dhondt_allocate(&[1.0, -1.0], 3, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            dhondt_allocate(&[0.0, 0.0], 3, 0.0),
            Err(Error::NoEligibleParty { .. })
        ));
        // every party has 1/40 = 2.5% of the vote
        assert!(matches!(
            dhondt_allocate(&[1.0; 40], 3, 0.03),
            Err(Error::NoEligibleParty { .. })
        ));
    }

    #[test]
    fn ties_prefer_larger_party_then_canon_order() {
        // 60/2 == 30/1 for the last seat
        assert_eq!(dhondt_allocate(&[60.0, 30.0], 2, 0.0).unwrap(), vec![2, 0]);
        assert_eq!(dhondt_allocate(&[50.0, 50.0], 1, 0.0).unwrap(), vec![1, 0]);
        assert_eq!(jefferson_allocate(&[60.0, 30.0], 2, 0.0).unwrap().seats, vec![2, 0]);
        assert_eq!(jefferson_allocate(&[50.0, 50.0, 50.0], 2, 0.0).unwrap().seats, vec![1, 1, 0]);
    }

    #[test]
    fn nation_is_additive_and_rejects_duplicates() {
        let parties: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let p = ProvinceVotes { province: 1, votes: vec![100.0, 80.0, 30.0], contingent: 5 };
        let one = allocate_nation(&parties, std::slice::from_ref(&p), 0.0).unwrap();
        let two = allocate_nation(&parties, &[p.clone(), ProvinceVotes { province: 2, ..p.clone() }], 0.0).unwrap();
        for (a, b) in one.national.iter().zip(&two.national) {
            assert_eq!(2 * a, *b);
        }
        assert_eq!(two.total(), 10);
        assert!(allocate_nation(&parties, &[p.clone(), p], 0.0).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, u32, f64)> {
        (
            prop::collection::vec(1u32..100_000, 2..9),
            1u32..41,
            prop::sample::select(vec![0.0, 0.03, 0.05]),
        )
            .prop_map(|(v, k, t)| (v.into_iter().map(f64::from).collect(), k, t))
    }

    proptest! {
        #[test]
        fn dhondt_matches_enumeration((v, k, t) in instance()) {
            match dhondt_allocate(&v, k, t) {
                Ok(s) => prop_assert_eq!(s, enumerate_quotients(&v, k, t)),
                Err(Error::NoEligibleParty { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn conservation_and_scale_invariance((v, k, t) in instance(), c in 0.001f64..1000.0) {
            if let Ok(s) = dhondt_allocate(&v, k, t) {
                prop_assert_eq!(s.iter().sum::<u32>(), k);
                let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
                let s2 = dhondt_allocate(&scaled, k, t).unwrap();
                // scaling can perturb exact quotient ties; only compare when none exist
                let total: f64 = v.iter().sum();
                let tie_free = {
                    let mut q: Vec<f64> = v.iter().filter(|x| **x / total >= t)
                        .flat_map(|x| (1..=k).map(move |d| x / f64::from(d))).collect();
                    q.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    q.len() <= k as usize || q[k as usize - 1] != q[k as usize]
                };
                if tie_free {
                    prop_assert_eq!(s, s2);
                }
            }
        }

        #[test]
        fn monotone_in_own_votes((v, k, t) in instance(), who in 0usize..8, extra in 1u32..50_000) {
            let who = who % v.len();
            if let Ok(before) = dhondt_allocate(&v, k, t) {
                let mut more = v.clone();
                more[who] += f64::from(extra);
                let after = dhondt_allocate(&more, k, t).unwrap();
                prop_assert!(after[who] >= before[who]);
            }
        }
    }
}
