//! Random scenario generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use crisis_core::fairness::FairnessRule;
use crisis_core::ids::{BuyerId, Participant, SellerId};
use crisis_core::market::{
    validate_scenario, BuyerSpec, Commodity, LinearMoneyUtility, PiecewiseConcaveUtility, Scenario,
    SellerSpec, Violation,
};
use crisis_core::rational::{self, ratio, Rational};
use crisis_core::seller::{
    BuyerOrder, EconConstants, EpisodeConfig, MarketBuyer, SellerEpisode, SellerMarketRecord,
    SupplyRule,
};
use crisis_core::sequence::issue_rights;
use num::traits::{Signed, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Limits {
    pub max_buyers: usize,
    pub max_sellers: usize,
    pub max_money: u64,
    pub max_rights: u64,
    /// Cap on the total Good in the market.
    pub max_good: u64,
    pub epsilons: Vec<Rational>,
    /// Every unit up to the Rights is worth more than twice its Money, not
    /// just the cumulative amount.
    pub strict_marginals: bool,
}

impl Limits {
    pub fn wide() -> Self {
        Self {
            max_buyers: 8,
            max_sellers: 4,
            max_money: 10_000,
            max_rights: 4,
            max_good: 32,
            epsilons: vec![ratio(1, 4), ratio(1, 10)],
            strict_marginals: false,
        }
    }

    pub fn strict(self) -> Self {
        Self {
            strict_marginals: true,
            ..self
        }
    }

    pub fn desk() -> Self {
        Self {
            max_buyers: 3,
            max_sellers: 2,
            max_money: 100,
            max_rights: 3,
            max_good: 6,
            epsilons: vec![ratio(1, 4), ratio(1, 10)],
            strict_marginals: false,
        }
    }
}

fn slope(rng: &mut impl Rng) -> Rational {
    [rational::one(), ratio(1, 2), rational::int(2), ratio(3, 2)][rng.gen_range(0..4)].clone()
}

/// Money drawn log-uniformly between `lo` and `hi`.
fn money(rng: &mut impl Rng, lo: u64, hi: u64) -> u64 {
    let lo = lo.max(1);
    if lo >= hi {
        return lo;
    }
    let x = rng.gen_range((lo as f64).ln()..=(hi as f64).ln()).exp();
    (x.round() as u64).clamp(lo, hi)
}

/// Non-increasing integer marginals, the first few large enough that Good
/// is worth more than twice the Money for up to `rights` units.
fn marginals(
    rng: &mut impl Rng,
    rights: u64,
    lambda: &Rational,
    top: u64,
    strict: bool,
) -> Vec<Rational> {
    let len = rights as usize + rng.gen_range(0..=2);
    let len = len.max(1);
    let floor = rational::floor_u64(&(lambda * rational::int(2))) + 1;
    let top = top.max(floor + 1);
    let mut v: Vec<u64> = (0..len)
        .map(|k| {
            let lo = if strict && (k as u64) < rights {
                floor
            } else {
                0
            };
            rng.gen_range(lo..=top)
        })
        .collect();
    v[0] = rng.gen_range(floor..=top);
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.into_iter().map(rational::uint).collect()
}

fn buyer(
    rng: &mut impl Rng,
    id: u32,
    rights: u64,
    demand: u64,
    eps: &Rational,
    lim: &Limits,
) -> BuyerSpec {
    let lambda = slope(rng);
    let min_money =
        (4 * demand.max(rights)).max(rational::floor_u64(&(rational::int(2) / eps)) + 1);
    let m = money(rng, min_money, lim.max_money.max(min_money));
    // Keep total Good utility comfortably below λ m / 2.
    let budget = rational::floor_u64(&(&lambda * rational::uint(m) / rational::int(2)));
    let cap = (budget / (demand.max(rights) + 2).max(1)).max(3).min(400);
    BuyerSpec {
        id: BuyerId(id),
        money: m,
        rights,
        demand,
        good_utility: PiecewiseConcaveUtility::new(marginals(
            rng,
            demand.max(rights),
            &lambda,
            cap,
            lim.strict_marginals,
        )),
        money_utility: LinearMoneyUtility::new(lambda),
    }
}

fn split_good(rng: &mut impl Rng, total: u64, sellers: usize) -> Vec<SellerSpec> {
    let mut goods = vec![0u64; sellers];
    for _ in 0..total {
        goods[rng.gen_range(0..sellers)] += 1;
    }
    goods
        .into_iter()
        .enumerate()
        .map(|(i, good)| SellerSpec {
            id: SellerId(i as u32 + 1),
            good,
        })
        .collect()
}

/// A single-market scenario that passes validation. Rights are drawn per
/// buyer and the sellers jointly own exactly as much Good.
pub fn random_scenario(rng: &mut impl Rng, lim: &Limits) -> Scenario {
    loop {
        let eps = lim.epsilons.choose(rng).expect("an epsilon").clone();
        let nb = rng.gen_range(1..=lim.max_buyers);
        let ns = rng.gen_range(1..=lim.max_sellers);
        let mut buyers = Vec::new();
        let mut total = 0;
        for id in 1..=nb as u32 {
            let r = rng.gen_range(0..=lim.max_rights).min(lim.max_good - total);
            total += r;
            let d = r + rng.gen_range(0..=1);
            buyers.push(buyer(rng, id, r, d.max(1), &eps, lim));
        }
        let s = Scenario {
            buyers,
            sellers: split_good(rng, total, ns),
            epsilon: eps,
            markets: 1,
            fairness: FairnessRule::ContestedGarment,
            seed: rng.gen(),
        };
        if validate_scenario(&s).is_valid() {
            return s;
        }
    }
}

/// An episode scenario: fixed supply below total demand, Rights issued by
/// the fairness rule. Every buyer is valid at its full demand, so any
/// re-issue stays valid.
pub fn random_episode(rng: &mut impl Rng, lim: &Limits, markets: u32) -> Scenario {
    loop {
        let eps = lim.epsilons.choose(rng).expect("an epsilon").clone();
        let nb = rng.gen_range(1..=lim.max_buyers);
        let ns = rng.gen_range(1..=lim.max_sellers);
        let buyers: Vec<BuyerSpec> = (1..=nb as u32)
            .map(|id| {
                let d = rng.gen_range(1..=lim.max_rights);
                buyer(rng, id, d, d, &eps, lim)
            })
            .collect();
        let demand: u64 = buyers.iter().map(|b| b.demand).sum();
        let supply = rng.gen_range(1..=demand.min(lim.max_good));
        let rule = [
            FairnessRule::ContestedGarment,
            FairnessRule::ConstrainedEqual,
            FairnessRule::Proportional,
        ][rng.gen_range(0..3)];
        let mut s = Scenario {
            buyers,
            sellers: split_good(rng, supply, ns),
            epsilon: eps,
            markets,
            fairness: rule,
            seed: rng.gen(),
        };
        let buyer_level = validate_scenario(&s)
            .violations
            .iter()
            .all(|v| matches!(v, Violation::RightsGoodMismatch { .. }));
        if !buyer_level {
            continue;
        }
        let Ok(issued) = issue_rights(&s) else {
            continue;
        };
        for b in &mut s.buyers {
            b.rights = issued[&b.id];
        }
        if validate_scenario(&s).is_valid() {
            return s;
        }
    }
}

/// A seller-market episode with quarter-unit incomes and demands.
pub fn random_seller_config(rng: &mut impl Rng) -> EpisodeConfig {
    let nb = rng.gen_range(1..=6);
    let ns = rng.gen_range(1..=4);
    EpisodeConfig {
        markets: rng.gen_range(1..=10),
        buyers: (1..=nb)
            .map(|id| MarketBuyer {
                id: BuyerId(id),
                income: ratio(rng.gen_range(0..=8), 4),
                demand: ratio(rng.gen_range(1..=12), 4),
            })
            .collect(),
        sellers: (1..=ns).map(SellerId).collect(),
        supply: SupplyRule {
            base: ratio(rng.gen_range(1..=8), 8),
            std_dev: ratio(rng.gen_range(0..=4), 40),
        },
        constants: EconConstants::default(),
        seed: rng.gen(),
    }
}

fn fail(market: u32, what: impl std::fmt::Display) -> String {
    format!("market {market}: {what}")
}

/// Money and Good conservation across every Market of the episode.
pub fn check_conservation(cfg: &EpisodeConfig, ep: &SellerEpisode) -> Result<(), String> {
    let mut money = Rational::zero();
    let mut good = Rational::zero();
    let income: Rational = cfg.buyers.iter().map(|b| &b.income).sum();
    for m in &ep.markets {
        let supplied: Rational = m.supply.values().sum();
        let consumed: Rational = m.consumed.values().sum();
        money += &income;
        good = good + supplied - consumed;
        let held_money: Rational = m.holdings.values().map(|h| &h.money).sum();
        let held_good: Rational = m.holdings.values().map(|h| &h.good).sum();
        if held_money != money {
            return Err(fail(m.index, format!("money {held_money} != {money}")));
        }
        if held_good != good {
            return Err(fail(m.index, format!("good {held_good} != {good}")));
        }
        if m.holdings
            .values()
            .any(|h| h.money.is_negative() || h.good.is_negative())
        {
            return Err(fail(m.index, "negative holding"));
        }
    }
    Ok(())
}

/// Rights discipline: a bought Right is immediately followed by the Good it
/// pairs with, no buyer ever holds Good beyond its usable Rights, and Right
/// sales stay within the escrowed offers.
pub fn check_pairing(m: &SellerMarketRecord) -> Result<(), String> {
    let mut usable = m.issued.clone();
    let mut escrow: BTreeMap<BuyerId, Rational> = BTreeMap::new();
    for o in &m.right_offers {
        *usable
            .get_mut(&o.buyer)
            .ok_or_else(|| fail(m.index, "offer without issue"))? -= &o.quantity;
        escrow.insert(o.buyer, o.quantity.clone());
    }
    for (i, t) in m.trades.iter().enumerate() {
        let Participant::Buyer(to) = t.to else {
            return Err(fail(m.index, format!("trade {} goes to a seller", t.step)));
        };
        match t.commodity {
            Commodity::Right => {
                let Participant::Buyer(from) = t.from else {
                    return Err(fail(m.index, "Right sold by a seller"));
                };
                let left = escrow
                    .get_mut(&from)
                    .ok_or_else(|| fail(m.index, "unoffered Right sold"))?;
                *left -= &t.quantity;
                if left.is_negative() {
                    return Err(fail(m.index, format!("{from} oversold Rights")));
                }
                let next = m.trades.get(i + 1);
                let paired = next.is_some_and(|n| {
                    n.commodity == Commodity::Good && n.to == t.to && n.quantity == t.quantity
                });
                if !paired {
                    return Err(fail(
                        m.index,
                        format!("Right trade {} is not paired", t.step),
                    ));
                }
                *usable.entry(to).or_insert_with(Rational::zero) += &t.quantity;
            }
            Commodity::Good => {
                let u = usable.entry(to).or_insert_with(Rational::zero);
                *u -= &t.quantity;
                if u.is_negative() {
                    return Err(fail(m.index, format!("{to} holds Good beyond its Rights")));
                }
            }
            other => return Err(fail(m.index, format!("unexpected {other} trade"))),
        }
    }
    Ok(())
}

/// Matching order: Good offers are taken in ascending price, a paired Right
/// always comes from the cheapest compatible offer still open, and every
/// trade is within the buyer's caps at the ask price.
pub fn check_cheapest_first(m: &SellerMarketRecord) -> Result<(), String> {
    let mut escrow: BTreeMap<BuyerId, (Rational, Rational)> = m
        .right_offers
        .iter()
        .map(|o| (o.buyer, (o.quantity.clone(), o.price.clone())))
        .collect();
    let asks: BTreeMap<SellerId, Rational> = m
        .good_offers
        .iter()
        .map(|o| (o.seller, o.price.clone()))
        .collect();
    let orders: BTreeMap<BuyerId, &BuyerOrder> = m.orders.iter().map(|o| (o.buyer, o)).collect();
    let mut last_good: Option<Rational> = None;
    for t in &m.trades {
        let Participant::Buyer(to) = t.to else {
            continue;
        };
        let order = orders
            .get(&to)
            .ok_or_else(|| fail(m.index, format!("{to} traded without order")))?;
        match (t.commodity, t.from) {
            (Commodity::Good, Participant::Seller(s)) => {
                if asks.get(&s) != Some(&t.price) {
                    return Err(fail(
                        m.index,
                        format!("Good trade {} not at {s}'s ask", t.step),
                    ));
                }
                if t.price > order.good_cap {
                    return Err(fail(m.index, format!("Good trade {} above cap", t.step)));
                }
                if last_good.as_ref().is_some_and(|p| &t.price < p) {
                    return Err(fail(
                        m.index,
                        format!("Good trade {} cheaper than an earlier one", t.step),
                    ));
                }
                last_good = Some(t.price.clone());
            }
            (Commodity::Right, Participant::Buyer(from)) => {
                let cheapest = escrow
                    .iter()
                    .filter(|(b, (q, p))| **b != to && q.is_positive() && p <= &order.right_cap)
                    .map(|(_, (_, p))| p.clone())
                    .min()
                    .ok_or_else(|| fail(m.index, "Right bought with no open offer"))?;
                let (q, p) = escrow.get_mut(&from).expect("checked by pairing");
                if *p != t.price || t.price != cheapest {
                    return Err(fail(
                        m.index,
                        format!(
                            "Right trade {} at {} skips cheaper {cheapest}",
                            t.step, t.price
                        ),
                    ));
                }
                *q -= &t.quantity;
            }
            _ => {
                return Err(fail(
                    m.index,
                    format!("trade {} has the wrong counterparty", t.step),
                ))
            }
        }
    }
    Ok(())
}

pub fn check_seller_episode(cfg: &EpisodeConfig, ep: &SellerEpisode) -> Result<(), String> {
    check_conservation(cfg, ep)?;
    for m in &ep.markets {
        check_pairing(m)?;
        check_cheapest_first(m)?;
    }
    Ok(())
}
