//! Seller-driven double auction with tradable Rights.
//!
//! Each Market: buyers receive income and sellers receive supply, sellers
//! post Good offers, buyers declare demands, Rights are issued by the
//! contested garment rule on the offered Good, buyers post Right offers and
//! orders, and the book is cleared cheapest offer first. A buyer spends its
//! own Rights before buying a Right alongside each further unit of Good.
//! Unsold Rights expire at the end of the Market.
//!
//! Quantities are divisible rationals here. Supply noise is a normal draw
//! (`rand_distr`'s ziggurat sampler) from a ChaCha8 stream seeded with the
//! episode seed, truncated at zero and quantised to 1e-6; clearing ties use
//! a second stream of the same seed.

use std::collections::BTreeMap;

use num::traits::{One, Signed, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairness::{contested_garment_distribution, Allocation, ClaimsProblem, FairnessError};
use crate::ids::{BuyerId, Participant, SellerId};
use crate::market::{frustration, Commodity, Frustration};
use crate::rational::{self, ratio, Rational};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SellerOffer {
    pub seller: SellerId,
    pub quantity: Rational,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RightOffer {
    pub buyer: BuyerId,
    pub quantity: Rational,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuyerOrder {
    pub buyer: BuyerId,
    pub good_volume: Rational,
    pub good_cap: Rational,
    pub right_volume: Rational,
    pub right_cap: Rational,
}

/// Quantity and unit price proposed by a strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub quantity: Rational,
    pub price: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconConstants {
    #[serde(with = "rational::serde_str")]
    pub c_store: Rational,
    #[serde(with = "rational::serde_str")]
    pub c_end_supply: Rational,
    #[serde(with = "rational::serde_str")]
    pub c_in_stock: Rational,
    #[serde(with = "rational::serde_str")]
    pub c_missing: Rational,
    #[serde(with = "rational::serde_str")]
    pub c_money: Rational,
}

impl Default for EconConstants {
    fn default() -> Self {
        Self {
            c_store: ratio(-1, 2),
            c_end_supply: ratio(1, 10),
            c_in_stock: rational::int(2),
            c_missing: rational::int(-1),
            c_money: ratio(1, 10),
        }
    }
}

/// Per-Market supply of each seller: `base + Normal(0, std_dev)`, cut at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplyRule {
    #[serde(with = "rational::serde_str")]
    pub base: Rational,
    #[serde(with = "rational::serde_str")]
    pub std_dev: Rational,
}

impl Default for SupplyRule {
    fn default() -> Self {
        Self {
            base: ratio(1, 4),
            std_dev: ratio(1, 40),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBuyer {
    pub id: BuyerId,
    #[serde(with = "rational::serde_str")]
    pub income: Rational,
    #[serde(with = "rational::serde_str")]
    pub demand: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub markets: u32,
    pub buyers: Vec<MarketBuyer>,
    pub sellers: Vec<SellerId>,
    pub supply: SupplyRule,
    pub constants: EconConstants,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        let incomes = [ratio(1, 1), ratio(5, 4), ratio(3, 2), ratio(1, 4)];
        let demands = [ratio(1, 2), ratio(1, 2), ratio(1, 2), ratio(5, 2)];
        Self {
            markets: 10,
            buyers: incomes
                .into_iter()
                .zip(demands)
                .enumerate()
                .map(|(i, (income, demand))| MarketBuyer {
                    id: BuyerId(i as u32 + 1),
                    income,
                    demand,
                })
                .collect(),
            sellers: (1..=4).map(SellerId).collect(),
            supply: SupplyRule::default(),
            constants: EconConstants::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("at least one market is required")]
    NoMarkets,
    #[error("demand of {0} must be positive")]
    NonPositiveDemand(BuyerId),
    #[error("income of {0} must be non-negative")]
    NegativeIncome(BuyerId),
    #[error("supply base and deviation must be non-negative")]
    NegativeSupply,
    #[error("participant {0} listed twice")]
    Duplicate(Participant),
}

pub fn validate_config(cfg: &EpisodeConfig) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    if cfg.markets == 0 {
        errors.push(ConfigError::NoMarkets);
    }
    let mut seen = std::collections::BTreeSet::new();
    for b in &cfg.buyers {
        if !b.demand.is_positive() {
            errors.push(ConfigError::NonPositiveDemand(b.id));
        }
        if b.income.is_negative() {
            errors.push(ConfigError::NegativeIncome(b.id));
        }
        if !seen.insert(Participant::Buyer(b.id)) {
            errors.push(ConfigError::Duplicate(Participant::Buyer(b.id)));
        }
    }
    for s in &cfg.sellers {
        if !seen.insert(Participant::Seller(*s)) {
            errors.push(ConfigError::Duplicate(Participant::Seller(*s)));
        }
    }
    if cfg.supply.base.is_negative() || cfg.supply.std_dev.is_negative() {
        errors.push(ConfigError::NegativeSupply);
    }
    errors
}

pub fn draw_supply(rule: &SupplyRule, rng: &mut ChaCha8Rng) -> Rational {
    let normal = Normal::new(
        rational::to_f64(&rule.base),
        rational::to_f64(&rule.std_dev),
    )
    .expect("validated deviation");
    let g: f64 = normal.sample(rng);
    rational::from_f64_quantized(g.max(0.0), 6)
}

/// Rights for one Market: the contested garment rule on the offered Good.
pub fn issue_rights(
    offered: &Rational,
    demands: &BTreeMap<BuyerId, Rational>,
) -> Result<Allocation, FairnessError> {
    let problem = ClaimsProblem::new(
        offered.clone(),
        demands.iter().map(|(k, v)| (*k, v.clone())),
    )?;
    if offered.is_positive() && problem.total_demand().is_zero() {
        return Err(FairnessError::Degenerate);
    }
    Ok(contested_garment_distribution(&problem))
}

fn terminal(t: u32, markets: u32) -> bool {
    t == markets
}

pub fn seller_utility(
    delta_money: &Rational,
    good: &Rational,
    t: u32,
    markets: u32,
    c: &EconConstants,
) -> Rational {
    let mut u = delta_money + &c.c_store * good;
    if terminal(t, markets) {
        u += &c.c_end_supply * good;
    }
    u
}

pub fn buyer_utility(
    good: &Rational,
    demand: &Rational,
    money: &Rational,
    t: u32,
    markets: u32,
    c: &EconConstants,
) -> Rational {
    let ratio = good / demand;
    let covered = ratio.clone().min(Rational::one());
    let missing = (Rational::one() - ratio).max(Rational::zero());
    let mut u = &c.c_in_stock * covered + &c.c_missing * missing;
    if terminal(t, markets) {
        u += &c.c_money * money;
    }
    u
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Holding {
    pub money: Rational,
    pub good: Rational,
}

/// Holdings during clearing. `rights` are the buyer's usable Rights: issued
/// minus escrowed offers plus purchases.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Holdings {
    pub participants: BTreeMap<Participant, Holding>,
    pub rights: BTreeMap<BuyerId, Rational>,
}

impl Holdings {
    pub fn total_money(&self) -> Rational {
        self.participants.values().map(|h| &h.money).sum()
    }

    pub fn total_good(&self) -> Rational {
        self.participants.values().map(|h| &h.good).sum()
    }

    fn get_mut(&mut self, p: Participant) -> &mut Holding {
        self.participants.entry(p).or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trade {
    pub step: u32,
    pub commodity: Commodity,
    pub quantity: Rational,
    pub price: Rational,
    pub from: Participant,
    pub to: Participant,
}

fn min3(a: Rational, b: Rational, c: Rational) -> Rational {
    a.min(b).min(c)
}

struct OrderState {
    order: BuyerOrder,
    good_left: Rational,
    right_left: Rational,
}

/// Matches orders against offers, cheapest offer first. Equal-price offers
/// are visited in a random order and the order served by each fill is drawn
/// at random among the compatible ones. Trades execute at the ask price.
pub fn clear_market(
    offers: &[SellerOffer],
    right_offers: &[RightOffer],
    orders: &[BuyerOrder],
    holdings: &mut Holdings,
    rng: &mut ChaCha8Rng,
) -> Vec<Trade> {
    let mut goods: Vec<(SellerOffer, Rational)> = offers
        .iter()
        .map(|o| (o.clone(), o.quantity.clone()))
        .collect();
    goods.shuffle(rng);
    goods.sort_by(|a, b| a.0.price.cmp(&b.0.price));
    let mut rights: Vec<(RightOffer, Rational)> = right_offers
        .iter()
        .map(|o| (o.clone(), o.quantity.clone()))
        .collect();
    rights.shuffle(rng);
    rights.sort_by(|a, b| a.0.price.cmp(&b.0.price));
    let mut states: Vec<OrderState> = orders
        .iter()
        .map(|o| OrderState {
            order: o.clone(),
            good_left: o.good_volume.clone(),
            right_left: o.right_volume.clone(),
        })
        .collect();

    let mut trades = Vec::new();
    let mut step = 0u32;
    for (offer, left) in &mut goods {
        loop {
            if !left.is_positive() {
                break;
            }
            let fills: Vec<(usize, Fill)> = states
                .iter()
                .enumerate()
                .filter_map(|(i, st)| plan_fill(st, offer, left, &rights, holdings).map(|f| (i, f)))
                .collect();
            if fills.is_empty() {
                break;
            }
            let (i, fill) = fills[rng.gen_range(0..fills.len())].clone();
            let st = &mut states[i];
            let buyer = st.order.buyer;
            let to = Participant::Buyer(buyer);
            let seller = Participant::Seller(offer.seller);
            let q = fill.quantity;
            if let Some(r) = fill.right {
                let (roffer, rleft) = &mut rights[r];
                let cost = &q * &roffer.price;
                holdings.get_mut(to).money -= &cost;
                holdings.get_mut(Participant::Buyer(roffer.buyer)).money += &cost;
                *rleft -= &q;
                st.right_left -= &q;
                *holdings.rights.entry(buyer).or_insert_with(Rational::zero) += &q;
                step += 1;
                trades.push(Trade {
                    step,
                    commodity: Commodity::Right,
                    quantity: q.clone(),
                    price: roffer.price.clone(),
                    from: Participant::Buyer(roffer.buyer),
                    to,
                });
            }
            let cost = &q * &offer.price;
            holdings.get_mut(to).money -= &cost;
            holdings.get_mut(to).good += &q;
            let sh = holdings.get_mut(seller);
            sh.money += &cost;
            sh.good -= &q;
            *holdings.rights.get_mut(&buyer).expect("buyer rights") -= &q;
            *left -= &q;
            st.good_left -= &q;
            step += 1;
            trades.push(Trade {
                step,
                commodity: Commodity::Good,
                quantity: q,
                price: offer.price.clone(),
                from: seller,
                to,
            });
        }
    }
    trades
}

#[derive(Debug, Clone)]
struct Fill {
    quantity: Rational,
    /// Index of the Right offer paired with the Good, if any.
    right: Option<usize>,
}

fn plan_fill(
    st: &OrderState,
    offer: &SellerOffer,
    left: &Rational,
    rights: &[(RightOffer, Rational)],
    holdings: &Holdings,
) -> Option<Fill> {
    if st.order.good_cap < offer.price || !st.good_left.is_positive() {
        return None;
    }
    let buyer = st.order.buyer;
    let money = holdings
        .participants
        .get(&Participant::Buyer(buyer))
        .map(|h| h.money.clone())
        .unwrap_or_else(Rational::zero);
    let own = holdings
        .rights
        .get(&buyer)
        .cloned()
        .unwrap_or_else(Rational::zero);
    if own.is_positive() {
        let q = min3(left.clone(), st.good_left.clone(), own).min(&money / &offer.price);
        return q.is_positive().then_some(Fill {
            quantity: q,
            right: None,
        });
    }
    if !st.right_left.is_positive() {
        return None;
    }
    let r = rights.iter().position(|(ro, rl)| {
        rl.is_positive() && ro.buyer != buyer && ro.price <= st.order.right_cap
    })?;
    let (ro, rl) = &rights[r];
    let unit = &offer.price + &ro.price;
    let q = min3(left.clone(), st.good_left.clone(), st.right_left.clone())
        .min(rl.clone())
        .min(&money / unit);
    q.is_positive().then_some(Fill {
        quantity: q,
        right: Some(r),
    })
}

/// What a seller strategy sees.
#[derive(Debug, Clone)]
pub struct SellerView<'a> {
    pub market: u32,
    pub markets: u32,
    pub seller: SellerId,
    pub holding: &'a Holding,
}

/// What a buyer strategy sees. `issued` and the offer books fill in as the
/// Market progresses.
#[derive(Debug, Clone)]
pub struct BuyerView<'a> {
    pub market: u32,
    pub markets: u32,
    pub buyer: &'a MarketBuyer,
    pub holding: &'a Holding,
    pub issued: Option<&'a Rational>,
    pub good_offers: &'a [SellerOffer],
    pub right_offers: &'a [RightOffer],
}

/// Decision-making for one participant. Defaults do nothing and declare the
/// true demand.
pub trait AgentStrategy {
    fn seller_offer(&mut self, _view: &SellerView) -> Option<Quote> {
        None
    }

    fn declared_demand(&mut self, view: &BuyerView) -> Rational {
        view.buyer.demand.clone()
    }

    fn right_offer(&mut self, _view: &BuyerView) -> Option<Quote> {
        None
    }

    fn order(&mut self, _view: &BuyerView) -> Option<BuyerOrder> {
        None
    }

    /// Called after each episode with the participant's summed utility.
    fn end_episode(&mut self, _utility: &Rational) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Pass;

impl AgentStrategy for Pass {}

/// Fixed prices: sellers offer their whole stock at `good_ask`; buyers order
/// their missing demand at `good_cap` and sell the Rights they cannot afford
/// to use at `right_ask`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthfulFixed {
    pub good_ask: Rational,
    pub good_cap: Rational,
    pub right_ask: Rational,
    pub right_cap: Rational,
}

impl Default for TruthfulFixed {
    fn default() -> Self {
        Self {
            good_ask: rational::int(2),
            good_cap: rational::int(4),
            right_ask: ratio(1, 2),
            right_cap: rational::int(1),
        }
    }
}

impl TruthfulFixed {
    fn missing(view: &BuyerView) -> Rational {
        (&view.buyer.demand - &view.holding.good).max(Rational::zero())
    }

    fn surplus_rights(&self, view: &BuyerView) -> Rational {
        let issued = view.issued.cloned().unwrap_or_else(Rational::zero);
        let affordable = (&view.holding.money / &self.good_cap).min(Self::missing(view));
        (issued - affordable).max(Rational::zero())
    }
}

impl AgentStrategy for TruthfulFixed {
    fn seller_offer(&mut self, view: &SellerView) -> Option<Quote> {
        view.holding.good.is_positive().then(|| Quote {
            quantity: view.holding.good.clone(),
            price: self.good_ask.clone(),
        })
    }

    fn right_offer(&mut self, view: &BuyerView) -> Option<Quote> {
        let q = self.surplus_rights(view);
        q.is_positive().then(|| Quote {
            quantity: q,
            price: self.right_ask.clone(),
        })
    }

    fn order(&mut self, view: &BuyerView) -> Option<BuyerOrder> {
        let want = Self::missing(view);
        if !want.is_positive() {
            return None;
        }
        let issued = view.issued.cloned().unwrap_or_else(Rational::zero);
        let right_volume = if self.surplus_rights(view).is_positive() {
            Rational::zero()
        } else {
            (&want - issued).max(Rational::zero())
        };
        Some(BuyerOrder {
            buyer: view.buyer.id,
            right_volume,
            good_volume: want,
            good_cap: self.good_cap.clone(),
            right_cap: self.right_cap.clone(),
        })
    }
}

/// [`TruthfulFixed`] whose prices move by `±delta` between episodes, keeping
/// the direction while utility does not drop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HillClimb {
    pub base: TruthfulFixed,
    pub delta: Rational,
    pub direction: i64,
    last: Option<Rational>,
}

impl HillClimb {
    pub fn new(base: TruthfulFixed, delta: Rational) -> Self {
        Self {
            base,
            delta,
            direction: 1,
            last: None,
        }
    }
}

impl Default for HillClimb {
    fn default() -> Self {
        Self::new(TruthfulFixed::default(), ratio(1, 10))
    }
}

impl AgentStrategy for HillClimb {
    fn seller_offer(&mut self, view: &SellerView) -> Option<Quote> {
        self.base.seller_offer(view)
    }

    fn right_offer(&mut self, view: &BuyerView) -> Option<Quote> {
        self.base.right_offer(view)
    }

    fn order(&mut self, view: &BuyerView) -> Option<BuyerOrder> {
        self.base.order(view)
    }

    fn end_episode(&mut self, utility: &Rational) {
        if self.last.as_ref().is_some_and(|last| utility < last) {
            self.direction = -self.direction;
        }
        self.last = Some(utility.clone());
        let step = &self.delta * rational::int(self.direction);
        let floor = self.delta.clone();
        let b = &mut self.base;
        b.good_ask = (&b.good_ask + &step).max(floor.clone());
        b.good_cap = (&b.good_cap + &step).max(floor.clone());
        b.right_ask = (&b.right_ask + &step).max(Rational::zero());
        b.right_cap = (&b.right_cap + &step).max(Rational::zero());
    }
}

/// One strategy per participant.
pub struct Strategies {
    pub agents: BTreeMap<Participant, Box<dyn AgentStrategy>>,
}

impl Strategies {
    pub fn uniform<F>(cfg: &EpisodeConfig, mut make: F) -> Self
    where
        F: FnMut(Participant) -> Box<dyn AgentStrategy>,
    {
        let mut agents = BTreeMap::new();
        for b in &cfg.buyers {
            let p = Participant::Buyer(b.id);
            agents.insert(p, make(p));
        }
        for s in &cfg.sellers {
            let p = Participant::Seller(*s);
            agents.insert(p, make(p));
        }
        Self { agents }
    }

    pub fn pass(cfg: &EpisodeConfig) -> Self {
        Self::uniform(cfg, |_| Box::new(Pass))
    }

    pub fn truthful(cfg: &EpisodeConfig) -> Self {
        Self::uniform(cfg, |_| Box::new(TruthfulFixed::default()))
    }

    pub fn hill_climb(cfg: &EpisodeConfig) -> Self {
        Self::uniform(cfg, |_| Box::new(HillClimb::default()))
    }
}

/// A strategy output the mechanism had to correct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjustment {
    pub market: u32,
    pub participant: Participant,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SellerMarketRecord {
    pub index: u32,
    pub supply: BTreeMap<SellerId, Rational>,
    pub good_offers: Vec<SellerOffer>,
    pub declared: BTreeMap<BuyerId, Rational>,
    pub issued: BTreeMap<BuyerId, Rational>,
    pub right_offers: Vec<RightOffer>,
    pub orders: Vec<BuyerOrder>,
    pub trades: Vec<Trade>,
    pub consumed: BTreeMap<BuyerId, Rational>,
    /// Holdings at the end of the Market, after consumption.
    pub holdings: BTreeMap<Participant, Holding>,
    pub money_earned: BTreeMap<Participant, Rational>,
    pub utilities: BTreeMap<Participant, Rational>,
    pub frustration: BTreeMap<BuyerId, Frustration>,
}

impl SellerMarketRecord {
    pub fn good_bought(&self, b: BuyerId) -> Rational {
        self.trades
            .iter()
            .filter(|t| t.commodity == Commodity::Good && t.to == Participant::Buyer(b))
            .map(|t| &t.quantity)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SellerEpisode {
    pub markets: Vec<SellerMarketRecord>,
    pub adjustments: Vec<Adjustment>,
}

impl SellerEpisode {
    pub fn total_utility(&self, p: Participant) -> Rational {
        self.markets
            .iter()
            .filter_map(|m| m.utilities.get(&p))
            .sum()
    }

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
pub enum SellerMarketError {
    #[error("invalid configuration: {0:?}")]
    Config(Vec<ConfigError>),
    #[error("no strategy for {0}")]
    MissingStrategy(Participant),
    #[error("market {market}: {source}")]
    Fairness { market: u32, source: FairnessError },
}

fn clamp_quote(
    q: Quote,
    max_quantity: &Rational,
    positive_price: bool,
    market: u32,
    participant: Participant,
    adjustments: &mut Vec<Adjustment>,
) -> Option<Quote> {
    let mut note = |text: String| {
        adjustments.push(Adjustment {
            market,
            participant,
            note: text,
        })
    };
    let bad_price = if positive_price {
        !q.price.is_positive()
    } else {
        q.price.is_negative()
    };
    if bad_price {
        note(format!("dropped offer with price {}", q.price));
        return None;
    }
    let mut quantity = q.quantity;
    if quantity.is_negative() {
        note(format!("offer quantity {quantity} raised to 0"));
        quantity = Rational::zero();
    }
    if &quantity > max_quantity {
        note(format!("offer quantity {quantity} cut to {max_quantity}"));
        quantity = max_quantity.clone();
    }
    quantity.is_positive().then_some(Quote {
        quantity,
        price: q.price,
    })
}

fn clamp_non_negative(
    value: Rational,
    what: &str,
    market: u32,
    participant: Participant,
    adjustments: &mut Vec<Adjustment>,
) -> Rational {
    if value.is_negative() {
        adjustments.push(Adjustment {
            market,
            participant,
            note: format!("{what} {value} raised to 0"),
        });
        Rational::zero()
    } else {
        value
    }
}

/// Runs one episode of `cfg.markets` Markets with the given strategies.
pub fn run_seller_episode(
    cfg: &EpisodeConfig,
    strategies: &mut Strategies,
) -> Result<SellerEpisode, SellerMarketError> {
    let errors = validate_config(cfg);
    if !errors.is_empty() {
        return Err(SellerMarketError::Config(errors));
    }
    let mut buyers = cfg.buyers.clone();
    buyers.sort_by_key(|b| b.id);
    let mut sellers = cfg.sellers.clone();
    sellers.sort();
    for p in buyers
        .iter()
        .map(|b| Participant::Buyer(b.id))
        .chain(sellers.iter().map(|s| Participant::Seller(*s)))
    {
        if !strategies.agents.contains_key(&p) {
            return Err(SellerMarketError::MissingStrategy(p));
        }
    }

    let mut supply_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clear_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    clear_rng.set_stream(1);

    let mut holdings = Holdings::default();
    for b in &buyers {
        holdings.get_mut(Participant::Buyer(b.id));
    }
    for s in &sellers {
        holdings.get_mut(Participant::Seller(*s));
    }
    let mut records = Vec::new();
    let mut adjustments = Vec::new();
    let markets = cfg.markets;

    for t in 1..=markets {
        let money_before: BTreeMap<Participant, Rational> = holdings
            .participants
            .iter()
            .map(|(p, h)| (*p, h.money.clone()))
            .collect();
        for b in &buyers {
            holdings.get_mut(Participant::Buyer(b.id)).money += &b.income;
        }
        let mut supply = BTreeMap::new();
        for s in &sellers {
            let g = draw_supply(&cfg.supply, &mut supply_rng);
            holdings.get_mut(Participant::Seller(*s)).good += &g;
            supply.insert(*s, g);
        }

        let mut good_offers = Vec::new();
        for s in &sellers {
            let p = Participant::Seller(*s);
            let holding = holdings.participants[&p].clone();
            let view = SellerView {
                market: t,
                markets,
                seller: *s,
                holding: &holding,
            };
            let agent = strategies.agents.get_mut(&p).expect("checked");
            if let Some(q) = agent.seller_offer(&view) {
                if let Some(q) = clamp_quote(q, &holding.good, true, t, p, &mut adjustments) {
                    good_offers.push(SellerOffer {
                        seller: *s,
                        quantity: q.quantity,
                        price: q.price,
                    });
                }
            }
        }

        let mut declared = BTreeMap::new();
        for b in &buyers {
            let p = Participant::Buyer(b.id);
            let holding = holdings.participants[&p].clone();
            let view = BuyerView {
                market: t,
                markets,
                buyer: b,
                holding: &holding,
                issued: None,
                good_offers: &good_offers,
                right_offers: &[],
            };
            let d = strategies
                .agents
                .get_mut(&p)
                .expect("checked")
                .declared_demand(&view);
            let d = clamp_non_negative(d, "declared demand", t, p, &mut adjustments);
            declared.insert(b.id, d);
        }
        let offered: Rational = good_offers.iter().map(|o| &o.quantity).sum();
        let issued = issue_rights(&offered, &declared)
            .map_err(|source| SellerMarketError::Fairness { market: t, source })?
            .shares()
            .clone();

        let mut right_offers = Vec::new();
        for b in &buyers {
            let p = Participant::Buyer(b.id);
            let holding = holdings.participants[&p].clone();
            let view = BuyerView {
                market: t,
                markets,
                buyer: b,
                holding: &holding,
                issued: Some(&issued[&b.id]),
                good_offers: &good_offers,
                right_offers: &[],
            };
            let agent = strategies.agents.get_mut(&p).expect("checked");
            if let Some(q) = agent.right_offer(&view) {
                if let Some(q) = clamp_quote(q, &issued[&b.id], false, t, p, &mut adjustments) {
                    right_offers.push(RightOffer {
                        buyer: b.id,
                        quantity: q.quantity,
                        price: q.price,
                    });
                }
            }
        }
        holdings.rights = issued.clone();
        for ro in &right_offers {
            *holdings.rights.get_mut(&ro.buyer).expect("issued") -= &ro.quantity;
        }

        let mut orders = Vec::new();
        for b in &buyers {
            let p = Participant::Buyer(b.id);
            let holding = holdings.participants[&p].clone();
            let view = BuyerView {
                market: t,
                markets,
                buyer: b,
                holding: &holding,
                issued: Some(&issued[&b.id]),
                good_offers: &good_offers,
                right_offers: &right_offers,
            };
            let Some(mut o) = strategies.agents.get_mut(&p).expect("checked").order(&view) else {
                continue;
            };
            if o.buyer != b.id {
                adjustments.push(Adjustment {
                    market: t,
                    participant: p,
                    note: "order buyer id corrected".into(),
                });
                o.buyer = b.id;
            }
            o.good_volume =
                clamp_non_negative(o.good_volume, "good volume", t, p, &mut adjustments);
            o.good_cap = clamp_non_negative(o.good_cap, "good cap", t, p, &mut adjustments);
            o.right_volume =
                clamp_non_negative(o.right_volume, "right volume", t, p, &mut adjustments);
            o.right_cap = clamp_non_negative(o.right_cap, "right cap", t, p, &mut adjustments);
            if o.right_volume.is_positive() && right_offers.iter().any(|r| r.buyer == b.id) {
                adjustments.push(Adjustment {
                    market: t,
                    participant: p,
                    note: "right order dropped while selling Rights".into(),
                });
                o.right_volume = Rational::zero();
            }
            orders.push(o);
        }

        let trades = clear_market(
            &good_offers,
            &right_offers,
            &orders,
            &mut holdings,
            &mut clear_rng,
        );
        holdings.rights.clear();

        let mut consumed = BTreeMap::new();
        let mut utilities = BTreeMap::new();
        let mut frustrations = BTreeMap::new();
        let mut money_earned = BTreeMap::new();
        for b in &buyers {
            let p = Participant::Buyer(b.id);
            let h = holdings.get_mut(p);
            let eaten = h.good.clone().min(b.demand.clone());
            h.good -= &eaten;
            let u = buyer_utility(&eaten, &b.demand, &h.money, t, markets, &cfg.constants);
            utilities.insert(p, u);
            consumed.insert(b.id, eaten);
            let bought: Rational = trades
                .iter()
                .filter(|x| x.commodity == Commodity::Good && x.to == p)
                .map(|x| &x.quantity)
                .sum();
            frustrations.insert(b.id, frustration(&issued[&b.id], &bought));
        }
        for p in holdings.participants.keys() {
            let before = money_before.get(p).cloned().unwrap_or_else(Rational::zero);
            money_earned.insert(*p, &holdings.participants[p].money - before);
        }
        for s in &sellers {
            let p = Participant::Seller(*s);
            let h = &holdings.participants[&p];
            utilities.insert(
                p,
                seller_utility(&money_earned[&p], &h.good, t, markets, &cfg.constants),
            );
        }
        records.push(SellerMarketRecord {
            index: t,
            supply,
            good_offers,
            declared,
            issued,
            right_offers,
            orders,
            trades,
            consumed,
            holdings: holdings.participants.clone(),
            money_earned,
            utilities,
            frustration: frustrations,
        });
    }

    let episode = SellerEpisode {
        markets: records,
        adjustments,
    };
    for (p, agent) in strategies.agents.iter_mut() {
        agent.end_episode(&episode.total_utility(*p));
    }
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::int;

    fn demands(v: &[Rational]) -> BTreeMap<BuyerId, Rational> {
        v.iter()
            .enumerate()
            .map(|(i, d)| (BuyerId(i as u32 + 1), d.clone()))
            .collect()
    }

    fn table_demands() -> BTreeMap<BuyerId, Rational> {
        demands(&[ratio(1, 2), ratio(1, 2), ratio(1, 2), ratio(5, 2)])
    }

    #[test]
    fn issue_rights_examples() {
        let a = issue_rights(&int(1), &table_demands()).unwrap();
        assert!(a.shares().values().all(|s| *s == ratio(1, 4)));
        let a = issue_rights(&int(0), &table_demands()).unwrap();
        assert!(a.shares().values().all(|s| s.is_zero()));
        let a = issue_rights(&int(4), &table_demands()).unwrap();
        assert_eq!(a.shares(), &table_demands());
        assert_eq!(
            issue_rights(&int(1), &demands(&[int(0), int(0)])),
            Err(FairnessError::Degenerate)
        );
    }

    #[test]
    fn surplus_rights_go_to_largest_claim() {
        // Above the uniform share only the 5/2 claim keeps growing.
        let a = issue_rights(&int(2), &table_demands()).unwrap();
        assert_eq!(a.share(BuyerId(4)), ratio(5, 4));
        assert_eq!(a.share(BuyerId(1)), ratio(1, 4));
    }

    #[test]
    fn utility_examples() {
        let c = EconConstants::default();
        assert_eq!(seller_utility(&int(3), &int(2), 1, 10, &c), int(2));
        assert_eq!(seller_utility(&int(0), &int(0), 1, 10, &c), int(0));
        assert_eq!(seller_utility(&int(0), &int(2), 10, 10, &c), ratio(-4, 5));
        let d = ratio(1, 2);
        assert_eq!(buyer_utility(&d, &d, &int(5), 1, 10, &c), int(2));
        assert_eq!(buyer_utility(&int(0), &d, &int(5), 1, 10, &c), int(-1));
        assert_eq!(buyer_utility(&d, &d, &int(1), 10, 10, &c), ratio(21, 10));
    }

    fn book(buyer_money: Rational, rights: Rational) -> Holdings {
        let mut h = Holdings::default();
        h.participants.insert(
            Participant::Buyer(BuyerId(1)),
            Holding {
                money: buyer_money,
                good: int(0),
            },
        );
        h.participants.insert(
            Participant::Seller(SellerId(1)),
            Holding {
                money: int(0),
                good: int(1),
            },
        );
        h.rights.insert(BuyerId(1), rights);
        h
    }

    fn order(cap: i64) -> BuyerOrder {
        BuyerOrder {
            buyer: BuyerId(1),
            good_volume: int(1),
            good_cap: int(cap),
            right_volume: int(0),
            right_cap: int(0),
        }
    }

    #[test]
    fn clearing_examples() {
        let offer = SellerOffer {
            seller: SellerId(1),
            quantity: int(1),
            price: int(3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let mut h = book(int(10), int(1));
        let trades = clear_market(&[offer.clone()], &[], &[order(4)], &mut h, &mut rng);
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].price, int(3));
        assert_eq!(
            h.participants[&Participant::Buyer(BuyerId(1))].money,
            int(7)
        );

        let mut h = book(int(10), int(1));
        assert!(clear_market(&[offer.clone()], &[], &[order(2)], &mut h, &mut rng).is_empty());

        let mut h = book(int(10), int(0));
        assert!(clear_market(&[offer], &[], &[order(4)], &mut h, &mut rng).is_empty());
    }

    #[test]
    fn right_bought_alongside_good() {
        let offer = SellerOffer {
            seller: SellerId(1),
            quantity: int(1),
            price: int(2),
        };
        let right = RightOffer {
            buyer: BuyerId(2),
            quantity: int(1),
            price: ratio(1, 2),
        };
        let mut h = book(int(10), ratio(1, 4));
        h.participants
            .insert(Participant::Buyer(BuyerId(2)), Holding::default());
        let mut o = order(4);
        o.right_volume = int(1);
        o.right_cap = int(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trades = clear_market(&[offer], &[right], &[o], &mut h, &mut rng);
        let kinds: Vec<_> = trades
            .iter()
            .map(|t| (t.commodity, t.quantity.clone()))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (Commodity::Good, ratio(1, 4)),
                (Commodity::Right, ratio(3, 4)),
                (Commodity::Good, ratio(3, 4)),
            ]
        );
        assert_eq!(
            h.participants[&Participant::Buyer(BuyerId(2))].money,
            ratio(3, 8)
        );
    }

    #[test]
    fn cheapest_offer_first() {
        let offers = vec![
            SellerOffer {
                seller: SellerId(1),
                quantity: int(1),
                price: int(3),
            },
            SellerOffer {
                seller: SellerId(2),
                quantity: int(1),
                price: int(1),
            },
        ];
        let mut h = book(int(10), int(1));
        h.participants.insert(
            Participant::Seller(SellerId(2)),
            Holding {
                money: int(0),
                good: int(1),
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trades = clear_market(&offers, &[], &[order(4)], &mut h, &mut rng);
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].price, int(1));
    }

    #[test]
    fn supply_noise_is_seeded() {
        let rule = SupplyRule::default();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..5).map(|_| draw_supply(&rule, &mut a)).collect();
        let ys: Vec<_> = (0..5).map(|_| draw_supply(&rule, &mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|g| !g.is_negative()));
    }

    #[test]
    fn pass_strategies_do_nothing() {
        let cfg = EpisodeConfig::default();
        let episode = run_seller_episode(&cfg, &mut Strategies::pass(&cfg)).unwrap();
        assert_eq!(episode.markets.len(), 10);
        for m in &episode.markets {
            assert!(m.trades.is_empty());
            for b in &cfg.buyers {
                assert_eq!(
                    m.utilities[&Participant::Buyer(b.id)],
                    int(-1) + terminal_money(m, b, &cfg)
                );
            }
        }
    }

    fn terminal_money(m: &SellerMarketRecord, b: &MarketBuyer, cfg: &EpisodeConfig) -> Rational {
        if m.index == cfg.markets {
            &cfg.constants.c_money * &m.holdings[&Participant::Buyer(b.id)].money
        } else {
            Rational::zero()
        }
    }

    #[test]
    fn truthful_episode_trades_and_is_deterministic() {
        let cfg = EpisodeConfig {
            seed: 11,
            ..EpisodeConfig::default()
        };
        let a = run_seller_episode(&cfg, &mut Strategies::truthful(&cfg)).unwrap();
        let b = run_seller_episode(&cfg, &mut Strategies::truthful(&cfg)).unwrap();
        assert_eq!(a, b);
        assert!(a.markets.iter().any(|m| !m.trades.is_empty()));
        assert!(a
            .markets
            .iter()
            .any(|m| m.trades.iter().any(|t| t.commodity == Commodity::Right)));
    }

    #[test]
    fn hill_climb_reverses_on_loss() {
        let mut h = HillClimb::default();
        h.end_episode(&int(5));
        assert_eq!(h.base.good_ask, ratio(21, 10));
        h.end_episode(&int(3));
        assert_eq!(h.direction, -1);
        assert_eq!(h.base.good_ask, int(2));
    }

    #[test]
    fn bad_strategy_output_is_clamped() {
        struct Greedy;
        impl AgentStrategy for Greedy {
            fn seller_offer(&mut self, _: &SellerView) -> Option<Quote> {
                Some(Quote {
                    quantity: int(100),
                    price: int(1),
                })
            }
        }
        let cfg = EpisodeConfig {
            markets: 1,
            ..EpisodeConfig::default()
        };
        let mut strategies = Strategies::uniform(&cfg, |p| match p {
            Participant::Seller(_) => Box::new(Greedy),
            Participant::Buyer(_) => Box::new(Pass),
        });
        let episode = run_seller_episode(&cfg, &mut strategies).unwrap();
        assert_eq!(episode.adjustments.len(), 4);
        let m = &episode.markets[0];
        for o in &m.good_offers {
            assert_eq!(o.quantity, m.supply[&o.seller]);
        }
    }
}
