//! A crisis episode as a sequence of couple-auction Markets.
//!
//! Supply, demands and Good utilities stay fixed. Before each Market the
//! Rights are re-issued by the fairness rule; after it, every buyer that sold
//! Rights on net carries the proceeds into the next Market as earmarked cash,
//! which raises its willingness to pay by the same amount.

use std::collections::BTreeMap;

use num::traits::{Signed, Zero};
use thiserror::Error;

use crate::auction::{run_auction_with_earmarks, AuctionError, AuctionOutcome, AuctionTrace};
use crate::fairness::{round_indivisible, ClaimsProblem, FairnessError, PriorityOrder};
use crate::ids::BuyerId;
use crate::market::{frustration, BuyerSpec, Frustration, Scenario};
use crate::rational::{self, Rational};

/// Willingness to pay after a shift by carried funds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftedWillingness<'a> {
    pub buyer: &'a BuyerSpec,
    pub shift: Rational,
}

impl ShiftedWillingness<'_> {
    /// `w'(z) = w(z) + y` for `z ≥ 1`; `w'(0) = 0`.
    pub fn at(&self, z: u64) -> Rational {
        if z == 0 {
            Rational::zero()
        } else {
            self.buyer.willingness_to_pay(z) + &self.shift
        }
    }
}

pub fn update_willingness<'a>(b: &'a BuyerSpec, y: &Rational) -> ShiftedWillingness<'a> {
    ShiftedWillingness {
        buyer: b,
        shift: y.clone(),
    }
}

/// One finished Market of an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarketRecord {
    pub index: u32,
    pub issued: BTreeMap<BuyerId, u64>,
    /// Earmarked cash each buyer entered the Market with.
    pub earmarks: BTreeMap<BuyerId, Rational>,
    pub outcome: AuctionOutcome,
    pub trace: AuctionTrace,
    /// Net Right sale proceeds at terminal prices, floored at zero.
    pub proceeds: BTreeMap<BuyerId, Rational>,
    pub frustration: BTreeMap<BuyerId, Frustration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EpisodeState {
    pub markets: Vec<MarketRecord>,
    /// Earmarked cash available for the next Market.
    pub carried: BTreeMap<BuyerId, Rational>,
}

impl EpisodeState {
    pub fn frustration_series(&self, b: BuyerId) -> Vec<Frustration> {
        self.markets
            .iter()
            .map(|m| {
                m.frustration
                    .get(&b)
                    .cloned()
                    .unwrap_or(Frustration::NoRights)
            })
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EpisodeFailure {
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("market {market} failed: {cause}")]
pub struct EpisodeError {
    pub market: u32,
    pub cause: EpisodeFailure,
    /// Markets completed before the failure.
    pub partial: Box<EpisodeState>,
}

/// Integer Rights for one Market: the fairness rule on the total Good
/// against the demands, rounded with priority by ascending buyer id.
pub fn issue_rights(s: &Scenario) -> Result<BTreeMap<BuyerId, u64>, FairnessError> {
    let problem = ClaimsProblem::new(
        rational::uint(s.total_good()),
        s.buyers.iter().map(|b| (b.id, rational::uint(b.demand))),
    )?;
    let shares = s.fairness.apply(&problem)?;
    let order = PriorityOrder::ascending(s.buyers.iter().map(|b| b.id));
    Ok(round_indivisible(&shares, &order)?.shares)
}

/// Net Rights sold times the terminal Right price.
fn right_proceeds(outcome: &AuctionOutcome, b: BuyerId, issued: u64) -> Rational {
    let kept = outcome.loose_rights.get(&b).copied().unwrap_or(0) + outcome.couples_held(b);
    if issued > kept {
        rational::uint(issued - kept) * &outcome.solution.prices.right
    } else {
        Rational::zero()
    }
}

/// Runs `markets` consecutive Markets of the scenario.
pub fn run_episode(s: &Scenario, markets: u32) -> Result<EpisodeState, EpisodeError> {
    let mut state = EpisodeState {
        markets: Vec::new(),
        carried: s.buyers.iter().map(|b| (b.id, Rational::zero())).collect(),
    };
    for index in 1..=markets {
        let fail = |cause: EpisodeFailure, state: &EpisodeState| EpisodeError {
            market: index,
            cause,
            partial: Box::new(state.clone()),
        };
        let issued = issue_rights(s).map_err(|e| fail(e.into(), &state))?;
        let mut market = s.clone();
        for b in &mut market.buyers {
            b.rights = issued[&b.id];
        }
        let earmarks = state.carried.clone();
        let (outcome, trace) =
            run_auction_with_earmarks(&market, &earmarks).map_err(|e| fail(e.into(), &state))?;
        let mut proceeds = BTreeMap::new();
        let mut frustrations = BTreeMap::new();
        for b in &market.buyers {
            let y = right_proceeds(&outcome, b.id, b.rights);
            let left = outcome
                .earmark_left
                .get(&b.id)
                .cloned()
                .unwrap_or_else(Rational::zero);
            debug_assert!(!left.is_negative());
            state.carried.insert(b.id, left + &y);
            proceeds.insert(b.id, y);
            frustrations.insert(
                b.id,
                frustration(
                    &rational::uint(b.rights),
                    &rational::uint(outcome.couples_held(b.id)),
                ),
            );
        }
        state.markets.push(MarketRecord {
            index,
            issued,
            earmarks,
            outcome,
            trace,
            proceeds,
            frustration: frustrations,
        });
    }
    Ok(state)
}
