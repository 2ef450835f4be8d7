//! The three-commodity market: participants, utilities, scenario validation
//! and the feasibility / equilibrium predicates on solutions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num::traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairness::FairnessRule;
use crate::ids::{BuyerId, Participant, SellerId};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Commodity {
    Good,
    Right,
    Money,
    /// One Good paired with one Right; only exists inside the couple auction.
    Couple,
}

impl fmt::Display for Commodity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Commodity::Good => "good",
            Commodity::Right => "right",
            Commodity::Money => "money",
            Commodity::Couple => "couple",
        })
    }
}

/// Concave utility for whole items given by its marginal values
/// `v(1) ≥ v(2) ≥ … ≥ 0`; marginals past the end are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PiecewiseConcaveUtility {
    #[serde(with = "rational::serde_vec_str")]
    marginals: Vec<Rational>,
}

impl PiecewiseConcaveUtility {
    /// Stores the marginals as given; [`Self::shape_violations`] reports
    /// negative or increasing entries.
    pub fn new(marginals: Vec<Rational>) -> Self {
        Self { marginals }
    }

    pub fn marginals(&self) -> &[Rational] {
        &self.marginals
    }

    /// Value of the `k`-th item (1-based); zero for `k == 0` or past the end.
    pub fn marginal(&self, k: u64) -> Rational {
        if k == 0 {
            return Rational::zero();
        }
        self.marginals
            .get((k - 1) as usize)
            .cloned()
            .unwrap_or_else(Rational::zero)
    }

    pub fn value(&self, x: u64) -> Rational {
        let n = (x as usize).min(self.marginals.len());
        self.marginals[..n].iter().sum()
    }

    /// Number of items with a positive marginal value.
    pub fn saturation(&self) -> u64 {
        self.marginals
            .iter()
            .take_while(|v| v.is_positive())
            .count() as u64
    }

    pub fn shape_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, v) in self.marginals.iter().enumerate() {
            if v.is_negative() {
                out.push(format!("marginal {} is negative ({v})", i + 1));
            }
        }
        for (i, w) in self.marginals.windows(2).enumerate() {
            if w[1] > w[0] {
                out.push(format!(
                    "marginal {} ({}) exceeds marginal {} ({})",
                    i + 2,
                    w[1],
                    i + 1,
                    w[0]
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearMoneyUtility {
    #[serde(with = "rational::serde_str")]
    pub slope: Rational,
}

impl LinearMoneyUtility {
    pub fn new(slope: Rational) -> Self {
        Self { slope }
    }

    pub fn value(&self, amount: &Rational) -> Rational {
        &self.slope * amount
    }
}

impl Default for LinearMoneyUtility {
    fn default() -> Self {
        Self {
            slope: Rational::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuyerSpec {
    pub id: BuyerId,
    pub money: u64,
    pub rights: u64,
    pub demand: u64,
    pub good_utility: PiecewiseConcaveUtility,
    pub money_utility: LinearMoneyUtility,
}

impl BuyerSpec {
    pub fn willingness_to_pay(&self, x: u64) -> Rational {
        willingness_to_pay(self, x)
    }

    fn is_degenerate(&self) -> bool {
        self.money == 0 && self.rights == 0 && self.demand == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SellerSpec {
    pub id: SellerId,
    pub good: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    Couple,
    Seller,
}

/// Everything the couple auction and the market sequence need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub buyers: Vec<BuyerSpec>,
    pub sellers: Vec<SellerSpec>,
    pub epsilon: Rational,
    pub markets: u32,
    pub fairness: FairnessRule,
    pub seed: u64,
}

impl Scenario {
    pub fn total_money(&self) -> u64 {
        self.buyers.iter().map(|b| b.money).sum()
    }

    pub fn total_rights(&self) -> u64 {
        self.buyers.iter().map(|b| b.rights).sum()
    }

    pub fn total_good(&self) -> u64 {
        self.sellers.iter().map(|s| s.good).sum()
    }

    pub fn buyer(&self, id: BuyerId) -> Option<&BuyerSpec> {
        self.buyers.iter().find(|b| b.id == id)
    }

    pub fn seller(&self, id: SellerId) -> Option<&SellerSpec> {
        self.sellers.iter().find(|s| s.id == id)
    }

    pub fn participants(&self) -> Vec<Participant> {
        let mut out: Vec<Participant> = self
            .buyers
            .iter()
            .map(|b| Participant::Buyer(b.id))
            .collect();
        out.extend(self.sellers.iter().map(|s| Participant::Seller(s.id)));
        out.sort();
        out
    }
}

/// `w_b(x) = u_b(G, x) / λ_b`: the money worth as much as `x` items of Good.
pub fn willingness_to_pay(b: &BuyerSpec, x: u64) -> Rational {
    b.good_utility.value(x) / &b.money_utility.slope
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frustration {
    Ratio(Rational),
    /// No rights were assigned, so the ratio is undefined.
    NoRights,
}

impl Frustration {
    pub fn ratio(&self) -> Option<&Rational> {
        match self {
            Frustration::Ratio(q) => Some(q),
            Frustration::NoRights => None,
        }
    }
}

/// `max(0, r − p) / r`.
pub fn frustration(rights: &Rational, purchased: &Rational) -> Frustration {
    if !rights.is_positive() {
        return Frustration::NoRights;
    }
    let shortfall = rights - purchased;
    if shortfall.is_positive() {
        Frustration::Ratio(shortfall / rights)
    } else {
        Frustration::Ratio(Rational::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateBuyer(BuyerId),
    DuplicateSeller(SellerId),
    UtilityShape {
        buyer: BuyerId,
        detail: String,
    },
    NonPositiveMoneySlope(BuyerId),
    ZeroDemand(BuyerId),
    /// m^b < 4 r^b.
    MoneyBelowFourRights {
        buyer: BuyerId,
        money: u64,
        rights: u64,
    },
    /// u(G, x) ≤ 2 u(M, x) for some x ≤ r^b.
    GoodNotWorthTwice {
        buyer: BuyerId,
        x: u64,
    },
    /// u(M, m) ≤ u(M, m − x) + u(G, x) for some x ≥ m^b / 2.
    GoodOutweighsHalfMoney {
        buyer: BuyerId,
        x: u64,
    },
    /// A buyer without money that still holds rights or demand.
    MoneylessBuyer(BuyerId),
    EpsilonOutOfRange(Rational),
    /// ε ≤ 2 / m^b.
    EpsilonTooSmall {
        buyer: BuyerId,
        money: u64,
    },
    RightsGoodMismatch {
        rights: u64,
        good: u64,
    },
    NoMarkets,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateBuyer(b) => write!(f, "buyer {b} declared twice"),
            Violation::DuplicateSeller(s) => write!(f, "seller {s} declared twice"),
            Violation::UtilityShape { buyer, detail } => {
                write!(f, "buyer {buyer}: good utility {detail}")
            }
            Violation::NonPositiveMoneySlope(b) => {
                write!(f, "buyer {b}: money utility slope must be positive")
            }
            Violation::ZeroDemand(b) => write!(f, "buyer {b}: demand must be positive"),
            Violation::MoneyBelowFourRights {
                buyer,
                money,
                rights,
            } => write!(
                f,
                "buyer {buyer}: money {money} is below four times its {rights} rights"
            ),
            Violation::GoodNotWorthTwice { buyer, x } => write!(
                f,
                "buyer {buyer}: utility of {x} Good is not above twice the utility of {x} Money"
            ),
            Violation::GoodOutweighsHalfMoney { buyer, x } => write!(
                f,
                "buyer {buyer}: {x} Good is worth at least as much as {x} Money"
            ),
            Violation::MoneylessBuyer(b) => {
                write!(
                    f,
                    "buyer {b}: zero money requires zero rights and zero demand"
                )
            }
            Violation::EpsilonOutOfRange(e) => write!(f, "epsilon {e} must lie in (0, 1)"),
            Violation::EpsilonTooSmall { buyer, money } => {
                write!(f, "epsilon must exceed 2/{money} for buyer {buyer}")
            }
            Violation::RightsGoodMismatch { rights, good } => {
                write!(f, "{rights} rights issued for {good} items of Good")
            }
            Violation::NoMarkets => write!(f, "market count must be at least 1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Buyers with no money, rights or demand; valid but inert.
    pub degenerate: Vec<BuyerId>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_buyer(b: &BuyerSpec, epsilon: &Rational, out: &mut Vec<Violation>) {
    for detail in b.good_utility.shape_violations() {
        out.push(Violation::UtilityShape {
            buyer: b.id,
            detail,
        });
    }
    let slope = &b.money_utility.slope;
    if !slope.is_positive() {
        out.push(Violation::NonPositiveMoneySlope(b.id));
        return;
    }
    if b.money == 0 {
        if !b.is_degenerate() {
            out.push(Violation::MoneylessBuyer(b.id));
        }
        return;
    }
    if b.demand == 0 {
        out.push(Violation::ZeroDemand(b.id));
    }
    if b.money < 4 * b.rights {
        out.push(Violation::MoneyBelowFourRights {
            buyer: b.id,
            money: b.money,
            rights: b.rights,
        });
    }
    let two = rational::int(2);
    if let Some(x) = (1..=b.rights)
        .find(|&x| b.good_utility.value(x) <= &two * b.money_utility.value(&rational::uint(x)))
    {
        out.push(Violation::GoodNotWorthTwice { buyer: b.id, x });
    }
    // u(M, m) > u(M, m − x) + u(G, x) reduces to u(G, x) < λ x. Past
    // max(m, #marginals) the left side is constant, so that bound suffices.
    let start = b.money.div_ceil(2);
    let end = start
        .max(b.money)
        .max(b.good_utility.marginals().len() as u64);
    let mut value = b.good_utility.value(start);
    for x in start..=end {
        if x > start {
            value += b.good_utility.marginal(x);
        }
        if value >= slope * rational::uint(x) {
            out.push(Violation::GoodOutweighsHalfMoney { buyer: b.id, x });
            break;
        }
    }
    if epsilon * rational::uint(b.money) <= two {
        out.push(Violation::EpsilonTooSmall {
            buyer: b.id,
            money: b.money,
        });
    }
}

/// Checks the market assumptions for every buyer plus the scenario-wide
/// constraints, collecting every violation.
pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = BTreeSet::new();
    for b in &s.buyers {
        if !seen.insert(b.id) {
            report.violations.push(Violation::DuplicateBuyer(b.id));
        }
    }
    let mut seen = BTreeSet::new();
    for x in &s.sellers {
        if !seen.insert(x.id) {
            report.violations.push(Violation::DuplicateSeller(x.id));
        }
    }
    if !(s.epsilon.is_positive() && s.epsilon < Rational::one()) {
        report
            .violations
            .push(Violation::EpsilonOutOfRange(s.epsilon.clone()));
    }
    if s.markets == 0 {
        report.violations.push(Violation::NoMarkets);
    }
    for b in &s.buyers {
        if b.is_degenerate() && b.money_utility.slope.is_positive() {
            report.degenerate.push(b.id);
        }
        check_buyer(b, &s.epsilon, &mut report.violations);
    }
    let (rights, good) = (s.total_rights(), s.total_good());
    if rights != good {
        report
            .violations
            .push(Violation::RightsGoodMismatch { rights, good });
    }
    report
}

/// Item counts held by one participant.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Basket {
    pub good: u64,
    pub right: u64,
    pub couples: u64,
    pub money: u64,
    /// Cash below one unit that could not buy a Money item.
    pub residual_cash: Rational,
}

impl Basket {
    /// Good held in any form (loose or inside couples).
    pub fn total_good(&self) -> u64 {
        self.good + self.couples
    }

    pub fn total_right(&self) -> u64 {
        self.right + self.couples
    }

    pub fn price(&self, prices: &Prices) -> Rational {
        &prices.good * rational::uint(self.good)
            + &prices.right * rational::uint(self.right)
            + &prices.couple * rational::uint(self.couples)
            + rational::uint(self.money)
    }
}

/// Unit prices; Money is always worth one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prices {
    pub good: Rational,
    pub right: Rational,
    pub couple: Rational,
}

impl Prices {
    pub fn initial() -> Self {
        Self {
            good: rational::one(),
            right: rational::one(),
            couple: rational::int(2),
        }
    }

    pub fn money(&self) -> Rational {
        rational::one()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub prices: Prices,
    pub baskets: BTreeMap<Participant, Basket>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StructuralError {
    #[error("basket for unknown participant {0}")]
    UnknownParticipant(Participant),
    #[error("baskets hold {held} items of {commodity} but only {available} exist")]
    Oversubscribed {
        commodity: Commodity,
        held: u64,
        available: u64,
    },
}

pub fn endowment_price(p: Participant, prices: &Prices, s: &Scenario) -> Option<Rational> {
    match p {
        Participant::Buyer(id) => s
            .buyer(id)
            .map(|b| rational::uint(b.money) + &prices.right * rational::uint(b.rights)),
        Participant::Seller(id) => s.seller(id).map(|x| &prices.good * rational::uint(x.good)),
    }
}

/// Utility of a basket: buyers value Good (loose or coupled) and Money,
/// sellers only Money at slope one.
pub fn basket_utility(p: Participant, basket: &Basket, s: &Scenario) -> Option<Rational> {
    match p {
        Participant::Buyer(id) => s.buyer(id).map(|b| {
            b.good_utility.value(basket.total_good())
                + b.money_utility.value(&rational::uint(basket.money))
        }),
        Participant::Seller(id) => s.seller(id).map(|_| rational::uint(basket.money)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasketCheck {
    pub price: Rational,
    pub endowment_price: Rational,
    pub within_budget: bool,
    pub rights_cover_good: bool,
}

impl BasketCheck {
    pub fn feasible(&self) -> bool {
        self.within_budget && self.rights_cover_good
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibilityReport {
    pub baskets: BTreeMap<Participant, BasketCheck>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.baskets.values().all(BasketCheck::feasible)
    }
}

fn check_structure(sol: &Solution, s: &Scenario) -> Result<(), StructuralError> {
    let known: BTreeSet<Participant> = s.participants().into_iter().collect();
    for p in sol.baskets.keys() {
        if !known.contains(p) {
            return Err(StructuralError::UnknownParticipant(*p));
        }
    }
    let sum = |f: fn(&Basket) -> u64| sol.baskets.values().map(f).sum::<u64>();
    let checks = [
        (Commodity::Good, sum(Basket::total_good), s.total_good()),
        (Commodity::Right, sum(Basket::total_right), s.total_rights()),
        (Commodity::Money, sum(|b| b.money), s.total_money()),
    ];
    for (commodity, held, available) in checks {
        if held > available {
            return Err(StructuralError::Oversubscribed {
                commodity,
                held,
                available,
            });
        }
    }
    Ok(())
}

/// A solution is feasible when every basket costs no more than the
/// participant's endowment and holds no more Good than Rights.
pub fn is_feasible(sol: &Solution, s: &Scenario) -> Result<FeasibilityReport, StructuralError> {
    check_structure(sol, s)?;
    let mut baskets = BTreeMap::new();
    for (p, basket) in &sol.baskets {
        let price = basket.price(&sol.prices);
        let endowment_price = endowment_price(*p, &sol.prices, s).expect("checked above");
        baskets.insert(
            *p,
            BasketCheck {
                within_budget: price <= endowment_price,
                rights_cover_good: basket.good <= basket.right,
                price,
                endowment_price,
            },
        );
    }
    Ok(FeasibilityReport { baskets })
}

/// Largest search the exhaustive equilibrium oracle will attempt.
pub const ORACLE_SEARCH_CAP: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("oracle search space of {size} baskets exceeds the cap of {cap}")]
pub struct OracleInapplicable {
    pub size: u64,
    pub cap: u64,
}

/// Best utility `p` can reach with a feasible basket at `prices`, by
/// enumerating every Good/Right count pair and filling the rest with Money.
///
/// Exponential-free but still brute force; meant for small instances.
pub fn optimal_feasible_utility(
    p: Participant,
    prices: &Prices,
    s: &Scenario,
) -> Result<Option<Rational>, OracleInapplicable> {
    let (goods, rights, money) = (s.total_good(), s.total_rights(), s.total_money());
    let size = (goods + 1).saturating_mul(rights + 1);
    if size > ORACLE_SEARCH_CAP {
        return Err(OracleInapplicable {
            size,
            cap: ORACLE_SEARCH_CAP,
        });
    }
    let Some(budget) = endowment_price(p, prices, s) else {
        return Ok(None);
    };
    let mut best: Option<Rational> = None;
    for g in 0..=goods {
        for r in g..=rights {
            let cost = &prices.good * rational::uint(g) + &prices.right * rational::uint(r);
            if cost > budget {
                continue;
            }
            let left = &budget - &cost;
            let basket = Basket {
                good: g,
                right: r,
                couples: 0,
                money: rational::floor_u64(&left).min(money),
                residual_cash: Rational::zero(),
            };
            let u = basket_utility(p, &basket, s).expect("participant exists");
            if best.as_ref().is_none_or(|b| &u > b) {
                best = Some(u);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EquilibriumVerdict {
    Equilibrium,
    NotEquilibrium(Vec<(Participant, String)>),
    OracleInapplicable(OracleInapplicable),
}

impl EquilibriumVerdict {
    pub fn is_equilibrium(&self) -> bool {
        matches!(self, EquilibriumVerdict::Equilibrium)
    }
}

/// Exact equilibrium test: every basket is feasible, costs exactly its
/// endowment, and no feasible basket at these prices is strictly better.
/// Participants without a basket are treated as holding nothing.
pub fn is_equilibrium(sol: &Solution, s: &Scenario) -> Result<EquilibriumVerdict, StructuralError> {
    let feasibility = is_feasible(sol, s)?;
    let mut reasons = Vec::new();
    for p in s.participants() {
        let basket = sol.baskets.get(&p).cloned().unwrap_or_default();
        let check = match feasibility.baskets.get(&p) {
            Some(c) => c.clone(),
            None => {
                let endowment_price = endowment_price(p, &sol.prices, s).expect("known");
                BasketCheck {
                    price: Rational::zero(),
                    within_budget: true,
                    rights_cover_good: true,
                    endowment_price,
                }
            }
        };
        if !check.feasible() {
            reasons.push((p, "basket is not feasible".to_string()));
            continue;
        }
        if check.price != check.endowment_price {
            reasons.push((
                p,
                format!(
                    "basket costs {} but endowment is worth {}",
                    check.price, check.endowment_price
                ),
            ));
        }
        let held = basket_utility(p, &basket, s).expect("known");
        match optimal_feasible_utility(p, &sol.prices, s) {
            Err(e) => return Ok(EquilibriumVerdict::OracleInapplicable(e)),
            Ok(Some(best)) if best > held => {
                reasons.push((p, format!("utility {held} below attainable {best}")));
            }
            Ok(_) => {}
        }
    }
    Ok(if reasons.is_empty() {
        EquilibriumVerdict::Equilibrium
    } else {
        EquilibriumVerdict::NotEquilibrium(reasons)
    })
}
