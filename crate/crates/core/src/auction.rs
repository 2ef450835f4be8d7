//! Ascending auction over Couples (one Good paired with one Right).
//!
//! Prices start at `π_G = π_R = 1`, `π_C = 2`. Within an iteration every
//! couple is tagged either at the current price `π_C` or at the raised price
//! `(1 + ε) π_C`. Buyers are visited in ascending id order; a buyer whose
//! optimal couple count `s` is at least its holding `o` buys up to `s − o₊`
//! couples at `π_C` (its own first, then other holders, then freshly composed
//! pairs of loose Good and Right) and pays `(1 + ε) π_C` for each. When no
//! couple is left at `π_C` the iteration ends, every price grows by `1 + ε`
//! and holders of endowed Good or Right receive the matching top-up. Trading
//! stops after a round in which nobody buys; cash is then swept into whole
//! Money items and the sub-unit residue goes to the system.
//!
//! Endowed Good and Rights are pre-paid: their holders start with one unit of
//! cash per item, so composing a couple from loose items costs the system
//! nothing. Optional earmarked cash (carried from an earlier market) can only
//! be spent on couples and never becomes Money.

use std::collections::BTreeMap;

use num::traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{BuyerId, Participant, SellerId};
use crate::market::{
    frustration, validate_scenario, Basket, BuyerSpec, Frustration, Prices, Scenario, Solution,
    ValidationReport,
};
use crate::rational::{self, Rational};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuctionError {
    #[error("scenario failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("earmark given for unknown buyer {0}")]
    UnknownEarmark(BuyerId),
}

/// Result of the optimal-basket computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasketChoice {
    pub couples: u64,
    /// Whole Money items bought with the free cash left over.
    pub money_items: u64,
}

fn overflow(count: u64, price: &Rational, earmark: &Rational) -> Rational {
    let cost = price * rational::uint(count);
    if &cost > earmark {
        cost - earmark
    } else {
        Rational::zero()
    }
}

/// Couple count maximising `u(C, x) + λ · (free money left)` for
/// `x · price ≤ budget`, where the first `earmark` of spending is drawn from
/// cash that carries no Money utility. Ties go to the smaller count.
///
/// The objective is concave in `x`, so scanning upward until the gain stops
/// being positive finds the maximum.
pub fn optimal_basket(
    b: &BuyerSpec,
    price: &Rational,
    budget: &Rational,
    earmark: &Rational,
) -> BasketChoice {
    assert!(price.is_positive(), "couple price must be positive");
    let slope = &b.money_utility.slope;
    let mut x = 0u64;
    loop {
        let next = x + 1;
        if price * rational::uint(next) > *budget {
            break;
        }
        let extra_cost = overflow(next, price, earmark) - overflow(x, price, earmark);
        let gain = b.good_utility.marginal(next) - slope * extra_cost;
        if !gain.is_positive() {
            break;
        }
        x = next;
    }
    let spent = price * rational::uint(x);
    let earmark_left = if earmark > &spent {
        earmark - &spent
    } else {
        Rational::zero()
    };
    let free_left = budget - &spent - earmark_left;
    BasketChoice {
        couples: x,
        money_items: rational::floor_u64(&free_left),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoupleItem {
    pub id: u32,
    pub good_item: u32,
    pub good_origin: SellerId,
    pub right_item: u32,
    pub right_origin: BuyerId,
    pub owner: BuyerId,
    /// Tagged at `(1 + ε) π_C` in the current iteration.
    pub raised: bool,
    /// Part of the purchase price paid from earmarked cash.
    pub earmark_paid: Rational,
    /// Acquisition sequence number; lower is older.
    pub acquired: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooseGood {
    pub item: u32,
    pub holder: SellerId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooseRight {
    pub item: u32,
    pub holder: BuyerId,
}

/// Mutable auction state. Every participant's cash already includes the
/// surplus credited for its endowed Good or Rights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuctionState {
    pub prices: Prices,
    pub epsilon: Rational,
    pub iteration: u32,
    pub round: u32,
    pub cash: BTreeMap<Participant, Rational>,
    pub earmark: BTreeMap<BuyerId, Rational>,
    /// Surplus credited so far (initial pre-payment plus top-ups).
    pub surplus: BTreeMap<Participant, Rational>,
    pub couples: Vec<CoupleItem>,
    pub loose_goods: Vec<LooseGood>,
    pub loose_rights: Vec<LooseRight>,
    endowed_goods: BTreeMap<SellerId, u64>,
    endowed_rights: BTreeMap<BuyerId, u64>,
    next_seq: u64,
}

impl AuctionState {
    /// Initial state: unit prices, cash `m^b + r^b` for buyers and `g_s` for
    /// sellers, every Good and Right loose.
    pub fn new(s: &Scenario, earmarks: &BTreeMap<BuyerId, Rational>) -> Self {
        let mut cash = BTreeMap::new();
        let mut surplus = BTreeMap::new();
        let mut loose_rights = Vec::new();
        let mut loose_goods = Vec::new();
        let mut buyers: Vec<&BuyerSpec> = s.buyers.iter().collect();
        buyers.sort_by_key(|b| b.id);
        let mut item = 0u32;
        for b in &buyers {
            let p = Participant::Buyer(b.id);
            cash.insert(p, rational::uint(b.money + b.rights));
            surplus.insert(p, rational::uint(b.rights));
            for _ in 0..b.rights {
                item += 1;
                loose_rights.push(LooseRight { item, holder: b.id });
            }
        }
        let mut sellers: Vec<_> = s.sellers.iter().collect();
        sellers.sort_by_key(|x| x.id);
        let mut item = 0u32;
        for x in &sellers {
            let p = Participant::Seller(x.id);
            cash.insert(p, rational::uint(x.good));
            surplus.insert(p, rational::uint(x.good));
            for _ in 0..x.good {
                item += 1;
                loose_goods.push(LooseGood { item, holder: x.id });
            }
        }
        let earmark = buyers
            .iter()
            .map(|b| {
                (
                    b.id,
                    earmarks.get(&b.id).cloned().unwrap_or_else(Rational::zero),
                )
            })
            .collect();
        Self {
            prices: Prices::initial(),
            epsilon: s.epsilon.clone(),
            iteration: 0,
            round: 0,
            cash,
            earmark,
            surplus,
            couples: Vec::new(),
            loose_goods,
            loose_rights,
            endowed_goods: sellers.iter().map(|x| (x.id, x.good)).collect(),
            endowed_rights: buyers.iter().map(|b| (b.id, b.rights)).collect(),
            next_seq: 0,
        }
    }

    pub fn raised_price(&self) -> Rational {
        &self.prices.couple * (Rational::one() + &self.epsilon)
    }

    pub fn held(&self, b: BuyerId) -> u64 {
        self.couples.iter().filter(|c| c.owner == b).count() as u64
    }

    pub fn held_raised(&self, b: BuyerId) -> u64 {
        self.couples
            .iter()
            .filter(|c| c.owner == b && c.raised)
            .count() as u64
    }

    fn cash_of(&self, p: Participant) -> Rational {
        self.cash.get(&p).cloned().unwrap_or_else(Rational::zero)
    }

    fn earmark_of(&self, b: BuyerId) -> Rational {
        self.earmark.get(&b).cloned().unwrap_or_else(Rational::zero)
    }

    /// Cash plus the value at `π_C` of the couples held; the earmarked part
    /// is returned separately.
    pub fn budget(&self, b: BuyerId) -> (Rational, Rational) {
        let price = &self.prices.couple;
        let mut total = self.cash_of(Participant::Buyer(b)) + self.earmark_of(b);
        let mut earmarked = self.earmark_of(b);
        for c in self.couples.iter().filter(|c| c.owner == b) {
            total += price;
            earmarked += c.earmark_paid.clone().min(price.clone());
        }
        (total, earmarked)
    }

    /// Free cash plus earmarked cash across all participants.
    pub fn total_cash(&self) -> Rational {
        self.cash.values().sum::<Rational>() + self.earmark.values().sum::<Rational>()
    }

    pub fn total_surplus(&self) -> Rational {
        self.surplus.values().sum()
    }

    /// Whether any couple can still be bought at `π_C`.
    pub fn couple_available(&self) -> bool {
        self.couples.iter().any(|c| !c.raised)
            || (!self.loose_goods.is_empty() && !self.loose_rights.is_empty())
    }

    fn credit(&mut self, p: Participant, amount: &Rational) {
        *self.cash.entry(p).or_insert_with(Rational::zero) += amount;
    }

    /// Draws `amount` from earmark first, then free cash; returns the
    /// earmarked part.
    fn charge(&mut self, b: BuyerId, amount: &Rational) -> Rational {
        let earmark = self.earmark.entry(b).or_insert_with(Rational::zero);
        let from_earmark = earmark.clone().min(amount.clone());
        *earmark -= &from_earmark;
        let rest = amount - &from_earmark;
        let cash = self
            .cash
            .entry(Participant::Buyer(b))
            .or_insert_with(Rational::zero);
        *cash -= rest;
        assert!(!cash.is_negative(), "buyer {b} overdrawn");
        from_earmark
    }

    /// Returns `amount` to the owner of a couple, earmarked share first.
    fn refund(&mut self, owner: BuyerId, amount: &Rational, earmark_paid: &Rational) {
        let to_earmark = earmark_paid.clone().min(amount.clone());
        *self.earmark.entry(owner).or_insert_with(Rational::zero) += &to_earmark;
        self.credit(Participant::Buyer(owner), &(amount - to_earmark));
    }

    fn can_afford(&self, b: BuyerId, refund: &Rational) -> bool {
        self.cash_of(Participant::Buyer(b)) + self.earmark_of(b) + refund >= self.raised_price()
    }

    /// Next couple on sale at `π_C` for buyer `b`.
    fn next_source(&self, b: BuyerId) -> Option<SourcePick> {
        let own = self
            .couples
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.raised && c.owner == b)
            .min_by_key(|(_, c)| c.acquired);
        if let Some((i, _)) = own {
            return Some(SourcePick::Held(i));
        }
        let other = self
            .couples
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.raised)
            .min_by_key(|(_, c)| (c.owner, c.acquired));
        if let Some((i, _)) = other {
            return Some(SourcePick::Held(i));
        }
        if self.loose_goods.is_empty() {
            return None;
        }
        let right = self
            .loose_rights
            .iter()
            .position(|r| r.holder == b)
            .or_else(|| (!self.loose_rights.is_empty()).then_some(0))?;
        Some(SourcePick::Compose { right, good: 0 })
    }

    /// Executes one acquisition decided elsewhere (the live auction or a
    /// trace replay) and returns its record.
    fn acquire(&mut self, b: BuyerId, pick: SourcePick) -> Acquisition {
        let pay = self.raised_price();
        let price = self.prices.couple.clone();
        self.next_seq += 1;
        let seq = self.next_seq;
        match pick {
            SourcePick::Held(i) => {
                let (owner, earmark_paid) = {
                    let c = &self.couples[i];
                    (c.owner, c.earmark_paid.clone())
                };
                self.refund(owner, &price, &earmark_paid);
                let used = self.charge(b, &pay);
                let c = &mut self.couples[i];
                c.owner = b;
                c.raised = true;
                c.earmark_paid = used;
                c.acquired = seq;
                Acquisition {
                    couple: c.id,
                    source: Source::Held {
                        owner,
                        refund: price,
                    },
                }
            }
            SourcePick::Compose { right, good } => {
                let r = self.loose_rights.remove(right);
                let g = self.loose_goods.remove(good);
                let used = self.charge(b, &pay);
                let id = self.couples.len() as u32 + 1;
                self.couples.push(CoupleItem {
                    id,
                    good_item: g.item,
                    good_origin: g.holder,
                    right_item: r.item,
                    right_origin: r.holder,
                    owner: b,
                    raised: true,
                    earmark_paid: used,
                    acquired: seq,
                });
                Acquisition {
                    couple: id,
                    source: Source::Composed {
                        good_item: g.item,
                        good_holder: g.holder,
                        right_item: r.item,
                        right_holder: r.holder,
                    },
                }
            }
        }
    }

    /// Multiplies every price by `1 + ε`, credits the top-ups at the old
    /// prices and clears all raised tags.
    fn raise(&mut self) -> Vec<Credit> {
        let mut topups = Vec::new();
        let good_topup = &self.epsilon * &self.prices.good;
        let right_topup = &self.epsilon * &self.prices.right;
        let rights: Vec<_> = self.endowed_rights.iter().map(|(k, v)| (*k, *v)).collect();
        for (b, n) in rights {
            if n > 0 {
                let amount = &right_topup * rational::uint(n);
                let p = Participant::Buyer(b);
                self.credit(p, &amount);
                *self.surplus.entry(p).or_insert_with(Rational::zero) += &amount;
                topups.push(Credit {
                    participant: p,
                    amount,
                });
            }
        }
        let goods: Vec<_> = self.endowed_goods.iter().map(|(k, v)| (*k, *v)).collect();
        for (x, n) in goods {
            if n > 0 {
                let amount = &good_topup * rational::uint(n);
                let p = Participant::Seller(x);
                self.credit(p, &amount);
                *self.surplus.entry(p).or_insert_with(Rational::zero) += &amount;
                topups.push(Credit {
                    participant: p,
                    amount,
                });
            }
        }
        let factor = Rational::one() + &self.epsilon;
        self.prices.good *= &factor;
        self.prices.right *= &factor;
        self.prices.couple *= &factor;
        for c in &mut self.couples {
            c.raised = false;
        }
        topups
    }

    /// Returns unsold endowment items to their holders (withdrawing the
    /// pre-paid cash at the current price) and sweeps cash into Money items.
    fn settle(&mut self) -> Settlement {
        let mut withdrawn = Vec::new();
        for r in std::mem::take(&mut self.loose_rights) {
            let p = Participant::Buyer(r.holder);
            let price = self.prices.right.clone();
            *self.cash.get_mut(&p).expect("holder") -= &price;
            withdrawn.push(Withdrawal {
                participant: p,
                item: r.item,
                amount: price,
            });
        }
        for g in std::mem::take(&mut self.loose_goods) {
            let p = Participant::Seller(g.holder);
            let price = self.prices.good.clone();
            *self.cash.get_mut(&p).expect("holder") -= &price;
            withdrawn.push(Withdrawal {
                participant: p,
                item: g.item,
                amount: price,
            });
        }
        let mut sweep = Vec::new();
        let mut system_residue = Rational::zero();
        for (p, cash) in &self.cash {
            let items = rational::floor_u64(cash);
            let residue = cash - rational::uint(items);
            system_residue += &residue;
            sweep.push(MoneySweep {
                participant: *p,
                money_items: items,
                residue,
            });
        }
        Settlement {
            withdrawn,
            sweep,
            system_residue,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourcePick {
    Held(usize),
    Compose { right: usize, good: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// Bought back from a holder at the current price.
    Held {
        owner: BuyerId,
        #[serde(with = "rational::serde_str")]
        refund: Rational,
    },
    /// Composed from a loose endowed Good and Right; nobody is paid.
    Composed {
        good_item: u32,
        good_holder: SellerId,
        right_item: u32,
        right_holder: BuyerId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acquisition {
    pub couple: u32,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credit {
    pub participant: Participant,
    #[serde(with = "rational::serde_str")]
    pub amount: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Withdrawal {
    pub participant: Participant,
    pub item: u32,
    #[serde(with = "rational::serde_str")]
    pub amount: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoneySweep {
    pub participant: Participant,
    pub money_items: u64,
    #[serde(with = "rational::serde_str")]
    pub residue: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Settlement {
    withdrawn: Vec<Withdrawal>,
    sweep: Vec<MoneySweep>,
    system_residue: Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasketAction {
    /// `s < o`: keep the current holding.
    Skip,
    Outbid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// A full round passed without any purchase.
    NoPurchases,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuctionEvent {
    IterationStarted {
        iteration: u32,
        #[serde(with = "rational::serde_str")]
        price_good: Rational,
        #[serde(with = "rational::serde_str")]
        price_right: Rational,
        #[serde(with = "rational::serde_str")]
        price_couple: Rational,
    },
    RoundStarted {
        iteration: u32,
        round: u32,
    },
    BasketChosen {
        buyer: BuyerId,
        held: u64,
        held_raised: u64,
        #[serde(with = "rational::serde_str")]
        budget: Rational,
        #[serde(with = "rational::serde_str")]
        earmarked: Rational,
        couples: u64,
        action: BasketAction,
    },
    Outbid {
        buyer: BuyerId,
        #[serde(with = "rational::serde_str")]
        price: Rational,
        acquisitions: Vec<Acquisition>,
    },
    /// No couple is left at `π_C`; the iteration stops mid-round.
    IterationCut {
        iteration: u32,
        round: u32,
        buyer: BuyerId,
    },
    PricesRaised {
        #[serde(with = "rational::serde_str")]
        price_good: Rational,
        #[serde(with = "rational::serde_str")]
        price_right: Rational,
        #[serde(with = "rational::serde_str")]
        price_couple: Rational,
        topups: Vec<Credit>,
    },
    Terminated {
        reason: TerminationReason,
        withdrawn: Vec<Withdrawal>,
        sweep: Vec<MoneySweep>,
        #[serde(with = "rational::serde_str")]
        system_residue: Rational,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuctionTrace {
    pub events: Vec<AuctionEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuctionOutcome {
    pub solution: Solution,
    pub frustration: BTreeMap<BuyerId, Frustration>,
    pub iterations: u32,
    /// Rounds started in each iteration, in order.
    pub rounds: Vec<u32>,
    /// Cash per participant just before the Money sweep.
    pub final_cash: BTreeMap<Participant, Rational>,
    /// Earmarked cash not spent by the end of trading.
    pub earmark_left: BTreeMap<BuyerId, Rational>,
    /// Couples each buyer holds at the raised tag `(1 + ε) π_C`.
    pub raised_holdings: BTreeMap<BuyerId, u64>,
    /// Rights each buyer still holds loose (never coupled).
    pub loose_rights: BTreeMap<BuyerId, u64>,
    pub system_residue: Rational,
}

impl AuctionOutcome {
    pub fn couples_held(&self, b: BuyerId) -> u64 {
        self.solution
            .baskets
            .get(&Participant::Buyer(b))
            .map(|k| k.couples)
            .unwrap_or(0)
    }
}

pub fn run_auction(s: &Scenario) -> Result<(AuctionOutcome, AuctionTrace), AuctionError> {
    run_auction_with_earmarks(s, &BTreeMap::new())
}

/// Runs the auction with extra earmarked cash per buyer.
pub fn run_auction_with_earmarks(
    s: &Scenario,
    earmarks: &BTreeMap<BuyerId, Rational>,
) -> Result<(AuctionOutcome, AuctionTrace), AuctionError> {
    let report = validate_scenario(s);
    if !report.is_valid() {
        return Err(AuctionError::Invalid(report));
    }
    if let Some(b) = earmarks.keys().find(|b| s.buyer(**b).is_none()) {
        return Err(AuctionError::UnknownEarmark(*b));
    }
    let mut buyers: Vec<&BuyerSpec> = s.buyers.iter().collect();
    buyers.sort_by_key(|b| b.id);

    let mut state = AuctionState::new(s, earmarks);
    let mut trace = AuctionTrace::default();
    let mut rounds = Vec::new();

    'iterations: loop {
        state.iteration += 1;
        state.round = 0;
        rounds.push(0);
        trace.events.push(AuctionEvent::IterationStarted {
            iteration: state.iteration,
            price_good: state.prices.good.clone(),
            price_right: state.prices.right.clone(),
            price_couple: state.prices.couple.clone(),
        });
        loop {
            state.round += 1;
            *rounds.last_mut().expect("pushed") += 1;
            trace.events.push(AuctionEvent::RoundStarted {
                iteration: state.iteration,
                round: state.round,
            });
            let mut purchased = false;
            for b in &buyers {
                let held = state.held(b.id);
                let held_raised = state.held_raised(b.id);
                let (budget, earmarked) = state.budget(b.id);
                let choice = optimal_basket(b, &state.prices.couple, &budget, &earmarked);
                let action = if choice.couples < held {
                    BasketAction::Skip
                } else {
                    BasketAction::Outbid
                };
                trace.events.push(AuctionEvent::BasketChosen {
                    buyer: b.id,
                    held,
                    held_raised,
                    budget,
                    earmarked,
                    couples: choice.couples,
                    action,
                });
                if action == BasketAction::Skip {
                    continue;
                }
                let wanted = choice.couples - held_raised;
                let mut acquisitions = Vec::new();
                while (acquisitions.len() as u64) < wanted {
                    let Some(pick) = state.next_source(b.id) else {
                        break;
                    };
                    let refund = match pick {
                        SourcePick::Held(i) if state.couples[i].owner == b.id => {
                            state.prices.couple.clone()
                        }
                        _ => Rational::zero(),
                    };
                    if !state.can_afford(b.id, &refund) {
                        break;
                    }
                    acquisitions.push(state.acquire(b.id, pick));
                }
                if acquisitions.is_empty() {
                    continue;
                }
                purchased = true;
                trace.events.push(AuctionEvent::Outbid {
                    buyer: b.id,
                    price: state.raised_price(),
                    acquisitions,
                });
                if !state.couple_available() {
                    trace.events.push(AuctionEvent::IterationCut {
                        iteration: state.iteration,
                        round: state.round,
                        buyer: b.id,
                    });
                    let topups = state.raise();
                    trace.events.push(AuctionEvent::PricesRaised {
                        price_good: state.prices.good.clone(),
                        price_right: state.prices.right.clone(),
                        price_couple: state.prices.couple.clone(),
                        topups,
                    });
                    continue 'iterations;
                }
            }
            if !purchased {
                break 'iterations;
            }
        }
    }

    let outcome = finish(s, &mut state, &mut trace, rounds);
    Ok((outcome, trace))
}

fn finish(
    s: &Scenario,
    state: &mut AuctionState,
    trace: &mut AuctionTrace,
    rounds: Vec<u32>,
) -> AuctionOutcome {
    let mut loose_rights: BTreeMap<BuyerId, u64> = BTreeMap::new();
    for r in &state.loose_rights {
        *loose_rights.entry(r.holder).or_default() += 1;
    }
    let mut loose_goods: BTreeMap<SellerId, u64> = BTreeMap::new();
    for g in &state.loose_goods {
        *loose_goods.entry(g.holder).or_default() += 1;
    }
    let settlement = state.settle();
    let final_cash = state.cash.clone();
    trace.events.push(AuctionEvent::Terminated {
        reason: TerminationReason::NoPurchases,
        withdrawn: settlement.withdrawn.clone(),
        sweep: settlement.sweep.clone(),
        system_residue: settlement.system_residue.clone(),
    });
    let mut baskets = BTreeMap::new();
    let mut frustrations = BTreeMap::new();
    let mut raised_holdings = BTreeMap::new();
    for sweep in &settlement.sweep {
        let mut basket = Basket {
            money: sweep.money_items,
            residual_cash: sweep.residue.clone(),
            ..Basket::default()
        };
        match sweep.participant {
            Participant::Buyer(b) => {
                basket.couples = state.held(b);
                basket.right = loose_rights.get(&b).copied().unwrap_or(0);
                raised_holdings.insert(b, state.held_raised(b));
                let rights = s.buyer(b).map(|x| x.rights).unwrap_or(0);
                frustrations.insert(
                    b,
                    frustration(&rational::uint(rights), &rational::uint(basket.couples)),
                );
            }
            Participant::Seller(x) => {
                basket.good = loose_goods.get(&x).copied().unwrap_or(0);
            }
        }
        baskets.insert(sweep.participant, basket);
    }
    AuctionOutcome {
        solution: Solution {
            prices: state.prices.clone(),
            baskets,
        },
        frustration: frustrations,
        iterations: state.iteration,
        rounds,
        final_cash,
        earmark_left: state.earmark.clone(),
        raised_holdings,
        loose_rights,
        system_residue: settlement.system_residue,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("event {index}: {detail}")]
    Mismatch { index: usize, detail: String },
    #[error("trace ended before termination")]
    Truncated,
}

/// State reconstructed from a trace, plus total cash after every event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub state: AuctionState,
    pub cash_after_event: Vec<Rational>,
    /// Index of the first `PricesRaised` event, if any.
    pub first_raise: Option<usize>,
    pub loose_goods_after_first_raise: Option<usize>,
    pub final_money: BTreeMap<Participant, u64>,
}

/// Re-applies the trace's purchases and price raises to a fresh state built
/// from the scenario, recomputing every payment, refund and top-up and
/// checking them against the recorded values.
pub fn replay(
    s: &Scenario,
    earmarks: &BTreeMap<BuyerId, Rational>,
    trace: &AuctionTrace,
) -> Result<Replay, ReplayError> {
    let mut state = AuctionState::new(s, earmarks);
    let mut cash_after_event = Vec::with_capacity(trace.events.len());
    let mut first_raise = None;
    let mut loose_goods_after_first_raise = None;
    let mut final_money = None;
    for (index, event) in trace.events.iter().enumerate() {
        let mismatch = |detail: String| ReplayError::Mismatch { index, detail };
        match event {
            AuctionEvent::IterationStarted {
                iteration,
                price_couple,
                ..
            } => {
                state.iteration = *iteration;
                if price_couple != &state.prices.couple {
                    return Err(mismatch(format!(
                        "iteration starts at {price_couple}, replay has {}",
                        state.prices.couple
                    )));
                }
            }
            AuctionEvent::RoundStarted { round, .. } => state.round = *round,
            AuctionEvent::BasketChosen {
                buyer,
                held,
                held_raised,
                budget,
                ..
            } => {
                if state.held(*buyer) != *held
                    || state.held_raised(*buyer) != *held_raised
                    || state.budget(*buyer).0 != *budget
                {
                    return Err(mismatch(format!("holdings of {buyer} diverge")));
                }
            }
            AuctionEvent::Outbid {
                buyer,
                price,
                acquisitions,
            } => {
                if price != &state.raised_price() {
                    return Err(mismatch(format!("outbid price {price} is not (1+ε)π_C")));
                }
                for a in acquisitions {
                    let pick = match &a.source {
                        Source::Held { owner, refund } => {
                            if refund != &state.prices.couple {
                                return Err(mismatch(format!("refund {refund} is not π_C")));
                            }
                            let i = state
                                .couples
                                .iter()
                                .position(|c| c.id == a.couple && c.owner == *owner && !c.raised)
                                .ok_or_else(|| {
                                    mismatch(format!(
                                        "couple {} not on sale from {owner}",
                                        a.couple
                                    ))
                                })?;
                            SourcePick::Held(i)
                        }
                        Source::Composed {
                            good_item,
                            right_item,
                            ..
                        } => {
                            let good = state
                                .loose_goods
                                .iter()
                                .position(|g| g.item == *good_item)
                                .ok_or_else(|| mismatch(format!("good {good_item} not loose")))?;
                            let right = state
                                .loose_rights
                                .iter()
                                .position(|r| r.item == *right_item)
                                .ok_or_else(|| mismatch(format!("right {right_item} not loose")))?;
                            SourcePick::Compose { right, good }
                        }
                    };
                    let refund = match pick {
                        SourcePick::Held(i) if state.couples[i].owner == *buyer => {
                            state.prices.couple.clone()
                        }
                        _ => Rational::zero(),
                    };
                    if !state.can_afford(*buyer, &refund) {
                        return Err(mismatch(format!(
                            "{buyer} cannot afford couple {}",
                            a.couple
                        )));
                    }
                    let done = state.acquire(*buyer, pick);
                    if done.couple != a.couple {
                        return Err(mismatch(format!(
                            "composed couple id {} differs",
                            done.couple
                        )));
                    }
                }
            }
            AuctionEvent::IterationCut { .. } => {
                if state.couple_available() {
                    return Err(mismatch("iteration cut while couples remain".into()));
                }
            }
            AuctionEvent::PricesRaised {
                price_couple,
                topups,
                ..
            } => {
                let computed = state.raise();
                if &computed != topups || price_couple != &state.prices.couple {
                    return Err(mismatch("price raise or top-ups differ".into()));
                }
                if first_raise.is_none() {
                    first_raise = Some(index);
                    loose_goods_after_first_raise = Some(state.loose_goods.len());
                }
            }
            AuctionEvent::Terminated {
                withdrawn,
                sweep,
                system_residue,
                ..
            } => {
                let settlement = state.settle();
                if &settlement.withdrawn != withdrawn
                    || &settlement.sweep != sweep
                    || &settlement.system_residue != system_residue
                {
                    return Err(mismatch("terminal settlement differs".into()));
                }
                final_money = Some(
                    sweep
                        .iter()
                        .map(|m| (m.participant, m.money_items))
                        .collect(),
                );
            }
        }
        cash_after_event.push(state.total_cash());
    }
    let final_money = final_money.ok_or(ReplayError::Truncated)?;
    Ok(Replay {
        state,
        cash_after_event,
        first_raise,
        loose_goods_after_first_raise,
        final_money,
    })
}
