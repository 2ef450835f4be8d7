//! TOML scenario files.
//!
//! ```toml
//! version = 1
//! mechanism = "couple"      # or "seller"
//! markets = 1
//! seed = 0
//!
//! [couple]
//! epsilon = "1/4"
//! fairness = "contested-garment"
//!
//! [[couple.buyers]]
//! id = 1
//! money = 10
//! rights = 1
//! demand = 1
//! marginals = ["3"]
//! money_slope = "1"
//!
//! [[couple.sellers]]
//! id = 1
//! good = 1
//! ```
//!
//! A `[seller_market]` section configures the seller-driven mechanism. Every
//! rational is a string (`"p/q"` or an integer); unknown keys are rejected.

use std::path::Path;

use crisis_core::fairness::FairnessRule;
use crisis_core::ids::{BuyerId, SellerId};
use crisis_core::market::{
    BuyerSpec, LinearMoneyUtility, Mechanism, PiecewiseConcaveUtility, Scenario, SellerSpec,
};
use crisis_core::rational::{self, Rational};
use crisis_core::seller::{EconConstants, EpisodeConfig, MarketBuyer, SupplyRule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("mechanism {0:?} needs a [{1}] section")]
    MissingSection(Mechanism, &'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub mechanism: Mechanism,
    pub markets: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple: Option<CoupleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seller_market: Option<SellerSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleSection {
    #[serde(with = "rational::serde_str")]
    pub epsilon: Rational,
    #[serde(default)]
    pub fairness: FairnessRule,
    #[serde(default)]
    pub buyers: Vec<BuyerEntry>,
    #[serde(default)]
    pub sellers: Vec<SellerEntry>,
}

fn one() -> Rational {
    rational::one()
}

fn is_one(q: &Rational) -> bool {
    *q == rational::one()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuyerEntry {
    pub id: u32,
    pub money: u64,
    pub rights: u64,
    pub demand: u64,
    #[serde(with = "rational::serde_vec_str")]
    pub marginals: Vec<Rational>,
    #[serde(
        default = "one",
        skip_serializing_if = "is_one",
        with = "rational::serde_str"
    )]
    pub money_slope: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SellerEntry {
    pub id: u32,
    pub good: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Pass,
    #[default]
    Truthful,
    HillClimb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SellerSection {
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Episodes played before the reported one; only hill-climb learns.
    #[serde(default)]
    pub warmup_episodes: u32,
    #[serde(default)]
    pub supply: SupplyRule,
    #[serde(default)]
    pub constants: EconConstants,
    pub buyers: Vec<MarketBuyer>,
    pub sellers: Vec<u32>,
}

impl ScenarioFile {
    pub fn parse(text: &str, path: &str) -> Result<Self, FileError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|source| FileError::Parse {
            path: path.into(),
            source,
        })?;
        if file.version != FORMAT_VERSION {
            return Err(FileError::Version(file.version));
        }
        file.check_sections()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| FileError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::parse(&text, &shown)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn check_sections(&self) -> Result<(), FileError> {
        match self.mechanism {
            Mechanism::Couple if self.couple.is_none() => {
                Err(FileError::MissingSection(Mechanism::Couple, "couple"))
            }
            Mechanism::Seller if self.seller_market.is_none() => Err(FileError::MissingSection(
                Mechanism::Seller,
                "seller_market",
            )),
            _ => Ok(()),
        }
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            version: FORMAT_VERSION,
            mechanism: Mechanism::Couple,
            markets: s.markets,
            seed: s.seed,
            couple: Some(CoupleSection {
                epsilon: s.epsilon.clone(),
                fairness: s.fairness,
                buyers: s
                    .buyers
                    .iter()
                    .map(|b| BuyerEntry {
                        id: b.id.0,
                        money: b.money,
                        rights: b.rights,
                        demand: b.demand,
                        marginals: b.good_utility.marginals().to_vec(),
                        money_slope: b.money_utility.slope.clone(),
                    })
                    .collect(),
                sellers: s
                    .sellers
                    .iter()
                    .map(|x| SellerEntry {
                        id: x.id.0,
                        good: x.good,
                    })
                    .collect(),
            }),
            seller_market: None,
        }
    }

    pub fn from_episode_config(cfg: &EpisodeConfig, strategy: StrategyKind) -> Self {
        Self {
            version: FORMAT_VERSION,
            mechanism: Mechanism::Seller,
            markets: cfg.markets,
            seed: cfg.seed,
            couple: None,
            seller_market: Some(SellerSection {
                strategy,
                warmup_episodes: 0,
                supply: cfg.supply.clone(),
                constants: cfg.constants.clone(),
                buyers: cfg.buyers.clone(),
                sellers: cfg.sellers.iter().map(|s| s.0).collect(),
            }),
        }
    }

    /// The couple-auction scenario; `None` without a `[couple]` section.
    pub fn scenario(&self) -> Option<Scenario> {
        let c = self.couple.as_ref()?;
        Some(Scenario {
            buyers: c
                .buyers
                .iter()
                .map(|b| BuyerSpec {
                    id: BuyerId(b.id),
                    money: b.money,
                    rights: b.rights,
                    demand: b.demand,
                    good_utility: PiecewiseConcaveUtility::new(b.marginals.clone()),
                    money_utility: LinearMoneyUtility::new(b.money_slope.clone()),
                })
                .collect(),
            sellers: c
                .sellers
                .iter()
                .map(|x| SellerSpec {
                    id: SellerId(x.id),
                    good: x.good,
                })
                .collect(),
            epsilon: c.epsilon.clone(),
            markets: self.markets,
            fairness: c.fairness,
            seed: self.seed,
        })
    }

    /// The seller-market configuration; `None` without a `[seller_market]`
    /// section.
    pub fn episode_config(&self) -> Option<EpisodeConfig> {
        let m = self.seller_market.as_ref()?;
        Some(EpisodeConfig {
            markets: self.markets,
            buyers: m.buyers.clone(),
            sellers: m.sellers.iter().map(|s| SellerId(*s)).collect(),
            supply: m.supply.clone(),
            constants: m.constants.clone(),
            seed: self.seed,
        })
    }
}
