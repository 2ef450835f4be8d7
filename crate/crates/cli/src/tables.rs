//! The four CSV result tables.
//!
//! | file | columns |
//! |------|---------|
//! | `prices.csv` | `market,series,participant,price,price_decimal` |
//! | `frustration.csv` | `market,buyer,rights,purchased,frustration,frustration_decimal` |
//! | `trades.csv` | `market,step,commodity,quantity,price,price_decimal,from,to` |
//! | `holdings.csv` | `market,participant,role,good,right,couples,money,residual,earmark,utility,utility_decimal` |
//!
//! Exact values are `p/q` strings; `*_decimal` columns round half away from
//! zero to six places. A buyer with no Rights has frustration `none`.

use std::path::Path;

use crisis_core::auction::{AuctionEvent, Source};
use crisis_core::ids::{BuyerId, Participant};
use crisis_core::market::{basket_utility, Commodity, Frustration, Scenario};
use crisis_core::rational::{self, Rational};
use crisis_core::seller::SellerEpisode;
use crisis_core::sequence::EpisodeState;
use serde::Serialize;

pub const DECIMALS: usize = 6;

fn dec(q: &Rational) -> String {
    rational::decimal(q, DECIMALS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PriceRow {
    pub market: u32,
    pub series: String,
    pub participant: String,
    pub price: String,
    pub price_decimal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrustrationRow {
    pub market: u32,
    pub buyer: String,
    pub rights: String,
    pub purchased: String,
    pub frustration: String,
    pub frustration_decimal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TradeRow {
    pub market: u32,
    pub step: u32,
    pub commodity: String,
    pub quantity: String,
    pub price: String,
    pub price_decimal: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HoldingRow {
    pub market: u32,
    pub participant: String,
    pub role: String,
    pub good: String,
    pub right: String,
    pub couples: String,
    pub money: String,
    pub residual: String,
    pub earmark: String,
    pub utility: String,
    pub utility_decimal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResultTables {
    pub prices: Vec<PriceRow>,
    pub frustration: Vec<FrustrationRow>,
    pub trades: Vec<TradeRow>,
    pub holdings: Vec<HoldingRow>,
}

fn price_row(market: u32, series: &str, participant: String, price: &Rational) -> PriceRow {
    PriceRow {
        market,
        series: series.into(),
        participant,
        price: rational::exact(price),
        price_decimal: dec(price),
    }
}

fn frustration_row(
    market: u32,
    b: BuyerId,
    rights: &Rational,
    bought: &Rational,
    f: &Frustration,
) -> FrustrationRow {
    let (exact, decimal) = match f.ratio() {
        Some(r) => (rational::exact(r), dec(r)),
        None => ("none".to_string(), "none".to_string()),
    };
    FrustrationRow {
        market,
        buyer: b.to_string(),
        rights: rational::exact(rights),
        purchased: rational::exact(bought),
        frustration: exact,
        frustration_decimal: decimal,
    }
}

fn role(p: Participant) -> &'static str {
    match p {
        Participant::Buyer(_) => "buyer",
        Participant::Seller(_) => "seller",
    }
}

/// Tables for a couple-auction episode.
pub fn couple_tables(s: &Scenario, episode: &EpisodeState) -> ResultTables {
    let mut t = ResultTables::default();
    for m in &episode.markets {
        let market = m.index;
        let prices = &m.outcome.solution.prices;
        t.prices
            .push(price_row(market, "good", String::new(), &prices.good));
        t.prices
            .push(price_row(market, "right", String::new(), &prices.right));
        t.prices
            .push(price_row(market, "couple", String::new(), &prices.couple));

        for (b, f) in &m.frustration {
            let rights = rational::uint(m.issued[b]);
            let bought = rational::uint(m.outcome.couples_held(*b));
            t.frustration
                .push(frustration_row(market, *b, &rights, &bought, f));
        }

        for (step, event) in m.trace.events.iter().enumerate() {
            let AuctionEvent::Outbid {
                buyer,
                price,
                acquisitions,
            } = event
            else {
                continue;
            };
            for a in acquisitions {
                let from = match &a.source {
                    Source::Held { owner, .. } => owner.to_string(),
                    Source::Composed {
                        good_holder,
                        right_holder,
                        ..
                    } => {
                        format!("{good_holder}+{right_holder}")
                    }
                };
                t.trades.push(TradeRow {
                    market,
                    step: step as u32,
                    commodity: Commodity::Couple.to_string(),
                    quantity: "1".into(),
                    price: rational::exact(price),
                    price_decimal: dec(price),
                    from,
                    to: buyer.to_string(),
                });
            }
        }

        let mut market_scenario = s.clone();
        for b in &mut market_scenario.buyers {
            b.rights = m.issued[&b.id];
        }
        for (p, basket) in &m.outcome.solution.baskets {
            let utility =
                basket_utility(*p, basket, &market_scenario).unwrap_or_else(rational::zero);
            let earmark = match p {
                Participant::Buyer(b) => m
                    .outcome
                    .earmark_left
                    .get(b)
                    .cloned()
                    .unwrap_or_else(rational::zero),
                Participant::Seller(_) => rational::zero(),
            };
            t.holdings.push(HoldingRow {
                market,
                participant: p.to_string(),
                role: role(*p).into(),
                good: basket.good.to_string(),
                right: basket.right.to_string(),
                couples: basket.couples.to_string(),
                money: basket.money.to_string(),
                residual: rational::exact(&basket.residual_cash),
                earmark: rational::exact(&earmark),
                utility: rational::exact(&utility),
                utility_decimal: dec(&utility),
            });
        }
    }
    t
}

/// Tables for a seller-market episode. Prices are the posted asks and bids.
pub fn seller_tables(episode: &SellerEpisode) -> ResultTables {
    let mut t = ResultTables::default();
    for m in &episode.markets {
        let market = m.index;
        for o in &m.good_offers {
            t.prices.push(price_row(
                market,
                "good_ask",
                Participant::Seller(o.seller).to_string(),
                &o.price,
            ));
        }
        for o in &m.right_offers {
            t.prices.push(price_row(
                market,
                "right_ask",
                Participant::Buyer(o.buyer).to_string(),
                &o.price,
            ));
        }
        for o in &m.orders {
            let p = Participant::Buyer(o.buyer).to_string();
            t.prices
                .push(price_row(market, "good_bid", p.clone(), &o.good_cap));
            t.prices
                .push(price_row(market, "right_bid", p, &o.right_cap));
        }

        for (b, f) in &m.frustration {
            t.frustration.push(frustration_row(
                market,
                *b,
                &m.issued[b],
                &m.good_bought(*b),
                f,
            ));
        }

        for x in &m.trades {
            t.trades.push(TradeRow {
                market,
                step: x.step,
                commodity: x.commodity.to_string(),
                quantity: rational::exact(&x.quantity),
                price: rational::exact(&x.price),
                price_decimal: dec(&x.price),
                from: x.from.to_string(),
                to: x.to.to_string(),
            });
        }

        for (p, h) in &m.holdings {
            let utility = m.utilities.get(p).cloned().unwrap_or_else(rational::zero);
            t.holdings.push(HoldingRow {
                market,
                participant: p.to_string(),
                role: role(*p).into(),
                good: rational::exact(&h.good),
                right: "0".into(),
                couples: "0".into(),
                money: rational::exact(&h.money),
                residual: "0".into(),
                earmark: "0".into(),
                utility: rational::exact(&utility),
                utility_decimal: dec(&utility),
            });
        }
    }
    t
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const PRICE_COLUMNS: [&str; 5] = ["market", "series", "participant", "price", "price_decimal"];
pub const FRUSTRATION_COLUMNS: [&str; 6] = [
    "market",
    "buyer",
    "rights",
    "purchased",
    "frustration",
    "frustration_decimal",
];
pub const TRADE_COLUMNS: [&str; 8] = [
    "market",
    "step",
    "commodity",
    "quantity",
    "price",
    "price_decimal",
    "from",
    "to",
];
pub const HOLDING_COLUMNS: [&str; 11] = [
    "market",
    "participant",
    "role",
    "good",
    "right",
    "couples",
    "money",
    "residual",
    "earmark",
    "utility",
    "utility_decimal",
];

impl ResultTables {
    /// Writes all four tables into `dir`; empty tables still get a header.
    pub fn write(&self, dir: &Path) -> Result<(), csv::Error> {
        write_csv(&dir.join("prices.csv"), &PRICE_COLUMNS, &self.prices)?;
        write_csv(
            &dir.join("frustration.csv"),
            &FRUSTRATION_COLUMNS,
            &self.frustration,
        )?;
        write_csv(&dir.join("trades.csv"), &TRADE_COLUMNS, &self.trades)?;
        write_csv(&dir.join("holdings.csv"), &HOLDING_COLUMNS, &self.holdings)?;
        Ok(())
    }
}
