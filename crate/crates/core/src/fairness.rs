//! Fair division of a scarce supply among claimants.
//!
//! Three divisible rules are provided: proportional, constrained equal awards
//! and the contested garment rule. [`round_indivisible`] turns a fractional
//! allocation into whole items by flooring and handing the leftover units out
//! along a [`PriorityOrder`].
//!
//! All arithmetic is exact. When the supply covers every claim the rules
//! simply return the claims.

use std::collections::{BTreeMap, BTreeSet};

use num::traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::BuyerId;
use crate::rational::{self, Rational};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FairnessError {
    #[error("supply must be non-negative, got {0}")]
    NegativeSupply(Rational),
    #[error("demand of {0} must be non-negative")]
    NegativeDemand(BuyerId),
    #[error("positive supply with all demands zero")]
    Degenerate,
    #[error("rounding surplus {surplus} exceeds the {eligible} buyers with a fractional share")]
    InfeasibleRounding { surplus: u64, eligible: usize },
    #[error("priority order does not list exactly the allocated buyers")]
    PriorityMismatch,
    #[error("buyer {0} appears more than once")]
    DuplicateBuyer(BuyerId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimsProblem {
    supply: Rational,
    demands: BTreeMap<BuyerId, Rational>,
}

impl ClaimsProblem {
    pub fn new(
        supply: Rational,
        demands: impl IntoIterator<Item = (BuyerId, Rational)>,
    ) -> Result<Self, FairnessError> {
        if supply.is_negative() {
            return Err(FairnessError::NegativeSupply(supply));
        }
        let mut map = BTreeMap::new();
        for (id, d) in demands {
            if d.is_negative() {
                return Err(FairnessError::NegativeDemand(id));
            }
            if map.insert(id, d).is_some() {
                return Err(FairnessError::DuplicateBuyer(id));
            }
        }
        Ok(Self {
            supply,
            demands: map,
        })
    }

    pub fn supply(&self) -> &Rational {
        &self.supply
    }

    pub fn demands(&self) -> &BTreeMap<BuyerId, Rational> {
        &self.demands
    }

    pub fn total_demand(&self) -> Rational {
        self.demands.values().sum()
    }

    /// Supply no larger than the sum of claims.
    pub fn is_crisis(&self) -> bool {
        self.supply <= self.total_demand()
    }

    fn with_supply(&self, supply: Rational) -> Self {
        Self {
            supply,
            demands: self.demands.clone(),
        }
    }

    fn halved(&self) -> Self {
        let two = rational::int(2);
        Self {
            supply: self.supply.clone(),
            demands: self.demands.iter().map(|(id, d)| (*id, d / &two)).collect(),
        }
    }
}

/// Buyer to share of the supply.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Allocation {
    shares: BTreeMap<BuyerId, Rational>,
}

impl Allocation {
    pub fn from_shares(shares: BTreeMap<BuyerId, Rational>) -> Self {
        Self { shares }
    }

    pub fn share(&self, id: BuyerId) -> Rational {
        self.shares.get(&id).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn shares(&self) -> &BTreeMap<BuyerId, Rational> {
        &self.shares
    }

    pub fn total(&self) -> Rational {
        self.shares.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BuyerId, &Rational)> {
        self.shares.iter()
    }
}

/// Whole-item allocation produced by [`round_indivisible`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundedAllocation {
    pub shares: BTreeMap<BuyerId, u64>,
}

impl RoundedAllocation {
    pub fn share(&self, id: BuyerId) -> u64 {
        self.shares.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.shares.values().sum()
    }
}

/// A strict ranking of buyers used to hand out rounding surplus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityOrder(Vec<BuyerId>);

impl PriorityOrder {
    pub fn new(order: Vec<BuyerId>) -> Result<Self, FairnessError> {
        let mut seen = BTreeSet::new();
        for id in &order {
            if !seen.insert(*id) {
                return Err(FairnessError::DuplicateBuyer(*id));
            }
        }
        Ok(Self(order))
    }

    pub fn ascending(ids: impl IntoIterator<Item = BuyerId>) -> Self {
        let set: BTreeSet<BuyerId> = ids.into_iter().collect();
        Self(set.into_iter().collect())
    }

    pub fn as_slice(&self) -> &[BuyerId] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessRule {
    Proportional,
    ConstrainedEqual,
    #[default]
    ContestedGarment,
}

impl FairnessRule {
    pub fn apply(self, p: &ClaimsProblem) -> Result<Allocation, FairnessError> {
        match self {
            FairnessRule::Proportional => proportional_distribution(p),
            FairnessRule::ConstrainedEqual => Ok(constrained_equal_distribution(p)),
            FairnessRule::ContestedGarment => Ok(contested_garment_distribution(p)),
        }
    }
}

fn full_satisfaction(p: &ClaimsProblem) -> Option<Allocation> {
    (p.supply >= p.total_demand()).then(|| Allocation {
        shares: p.demands.clone(),
    })
}

pub fn proportional_distribution(p: &ClaimsProblem) -> Result<Allocation, FairnessError> {
    let total = p.total_demand();
    if total.is_zero() {
        if p.supply.is_zero() {
            return Ok(Allocation {
                shares: p.demands.clone(),
            });
        }
        return Err(FairnessError::Degenerate);
    }
    if let Some(all) = full_satisfaction(p) {
        return Ok(all);
    }
    let shares = p
        .demands
        .iter()
        .map(|(id, d)| (*id, &p.supply * d / &total))
        .collect();
    Ok(Allocation { shares })
}

/// Constrained equal awards by the recursive rule: while some claim is below
/// the equal split of what is left, pay it in full and recurse on the rest.
pub fn constrained_equal_distribution(p: &ClaimsProblem) -> Allocation {
    if let Some(all) = full_satisfaction(p) {
        return all;
    }
    let mut shares = BTreeMap::new();
    let mut remaining: Vec<(BuyerId, Rational)> =
        p.demands.iter().map(|(id, d)| (*id, d.clone())).collect();
    let mut supply = p.supply.clone();
    loop {
        if remaining.is_empty() {
            break;
        }
        let split = &supply / rational::uint(remaining.len() as u64);
        let below = remaining
            .iter()
            .enumerate()
            .filter(|(_, (_, d))| *d < split)
            .min_by(|a, b| a.1 .1.cmp(&b.1 .1))
            .map(|(i, _)| i);
        match below {
            Some(i) => {
                let (id, d) = remaining.remove(i);
                supply -= &d;
                shares.insert(id, d);
            }
            None => {
                for (id, _) in remaining.drain(..) {
                    shares.insert(id, split.clone());
                }
            }
        }
    }
    Allocation { shares }
}

/// The award cap λ with Σ min(d_b, λ) = supply, for a crisis instance.
/// Returns the largest claim when the supply covers everything.
pub fn equal_award_level(p: &ClaimsProblem) -> Rational {
    let mut demands: Vec<&Rational> = p.demands.values().collect();
    demands.sort();
    if p.supply >= p.total_demand() {
        return demands
            .last()
            .map(|d| (*d).clone())
            .unwrap_or_else(Rational::zero);
    }
    // Walk the sorted claims; between consecutive claims the filled amount is
    // affine in λ with slope equal to the number of claims still uncapped.
    let mut paid = Rational::zero();
    let n = demands.len();
    for (i, d) in demands.iter().enumerate() {
        let uncapped = rational::uint((n - i) as u64);
        let at_d = &paid + *d * &uncapped;
        if at_d >= p.supply {
            return (&p.supply - &paid) / uncapped;
        }
        paid += *d;
    }
    unreachable!("supply below total demand is reached before the last claim")
}

/// Constrained equal awards via the threshold characterisation.
pub fn constrained_equal_by_threshold(p: &ClaimsProblem) -> Allocation {
    let level = equal_award_level(p);
    let shares = p
        .demands
        .iter()
        .map(|(id, d)| (*id, d.clone().min(level.clone())))
        .collect();
    Allocation { shares }
}

/// Contested garment rule: equal awards on half-claims while the supply is at
/// most half the claims, otherwise claims minus the rule applied to the losses.
pub fn contested_garment_distribution(p: &ClaimsProblem) -> Allocation {
    if let Some(all) = full_satisfaction(p) {
        return all;
    }
    let total = p.total_demand();
    if &p.supply * rational::int(2) <= total {
        return constrained_equal_distribution(&p.halved());
    }
    let loss = constrained_equal_distribution(&p.with_supply(&total - &p.supply).halved());
    let shares = p
        .demands
        .iter()
        .map(|(id, d)| (*id, d - loss.share(*id)))
        .collect();
    Allocation { shares }
}

/// Applies `rule` to each part independently and merges the results.
pub fn apply_by_parts(
    rule: FairnessRule,
    parts: &[ClaimsProblem],
) -> Result<Allocation, FairnessError> {
    let mut shares = BTreeMap::new();
    for part in parts {
        for (id, s) in rule.apply(part)?.shares {
            if shares.insert(id, s).is_some() {
                return Err(FairnessError::DuplicateBuyer(id));
            }
        }
    }
    Ok(Allocation { shares })
}

/// Floors every share, then gives one extra unit to each of the first buyers
/// in `order` whose share had a positive fractional part, until the floored
/// total reaches ⌊Σ shares⌋.
pub fn round_indivisible(
    a: &Allocation,
    order: &PriorityOrder,
) -> Result<RoundedAllocation, FairnessError> {
    let listed: BTreeSet<BuyerId> = order.0.iter().copied().collect();
    let allocated: BTreeSet<BuyerId> = a.shares.keys().copied().collect();
    if listed != allocated || listed.len() != order.0.len() {
        return Err(FairnessError::PriorityMismatch);
    }
    let mut shares: BTreeMap<BuyerId, u64> = a
        .shares
        .iter()
        .map(|(id, s)| (*id, rational::floor_u64(s)))
        .collect();
    let floored: u64 = shares.values().sum();
    let target = rational::floor_u64(&a.total());
    let surplus = target - floored;
    let eligible: Vec<BuyerId> = order
        .0
        .iter()
        .copied()
        .filter(|id| !rational::is_integral(&a.shares[id]))
        .collect();
    if surplus as usize > eligible.len() {
        return Err(FairnessError::InfeasibleRounding {
            surplus,
            eligible: eligible.len(),
        });
    }
    for id in eligible.into_iter().take(surplus as usize) {
        *shares.get_mut(&id).expect("listed buyer") += 1;
    }
    Ok(RoundedAllocation { shares })
}
