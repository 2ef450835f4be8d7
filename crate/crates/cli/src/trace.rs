//! JSON-lines run traces.
//!
//! A couple-auction trace holds, for every Market, a `header` line with the
//! Market's scenario (Rights as issued for that Market) and the earmarked
//! cash each buyer entered with, followed by one `event` line per auction
//! event. Events record decisions; `trace-replay` recomputes every payment,
//! refund and top-up from the header and checks them against the record.
//! Seller-market runs write one `seller_trade` line per trade.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crisis_core::auction::{replay, AuctionEvent, AuctionTrace, Replay, ReplayError};
use crisis_core::ids::{BuyerId, Participant};
use crisis_core::rational::{self, Rational};
use crisis_core::seller::SellerEpisode;
use crisis_core::sequence::EpisodeState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario_file::{FileError, ScenarioFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Earmark {
    pub buyer: BuyerId,
    #[serde(with = "rational::serde_str")]
    pub amount: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceLine {
    Header {
        market: u32,
        scenario: ScenarioFile,
        earmarks: Vec<Earmark>,
    },
    Event {
        market: u32,
        event: AuctionEvent,
    },
    SellerTrade {
        market: u32,
        step: u32,
        commodity: String,
        #[serde(with = "rational::serde_str")]
        quantity: Rational,
        #[serde(with = "rational::serde_str")]
        price: Rational,
        from: Participant,
        to: Participant,
    },
}

pub fn couple_lines(episode: &EpisodeState, base: &ScenarioFile) -> Vec<TraceLine> {
    let mut lines = Vec::new();
    for m in &episode.markets {
        let mut scenario = base.clone();
        if let Some(c) = scenario.couple.as_mut() {
            for b in &mut c.buyers {
                b.rights = m.issued[&BuyerId(b.id)];
            }
        }
        scenario.markets = 1;
        lines.push(TraceLine::Header {
            market: m.index,
            scenario,
            earmarks: m
                .earmarks
                .iter()
                .map(|(b, a)| Earmark {
                    buyer: *b,
                    amount: a.clone(),
                })
                .collect(),
        });
        for e in &m.trace.events {
            lines.push(TraceLine::Event {
                market: m.index,
                event: e.clone(),
            });
        }
    }
    lines
}

pub fn seller_lines(episode: &SellerEpisode) -> Vec<TraceLine> {
    episode
        .markets
        .iter()
        .flat_map(|m| {
            m.trades.iter().map(move |t| TraceLine::SellerTrade {
                market: m.index,
                step: t.step,
                commodity: t.commodity.to_string(),
                quantity: t.quantity.clone(),
                price: t.price.clone(),
                from: t.from,
                to: t.to,
            })
        })
        .collect()
}

pub fn write_lines(w: &mut impl Write, lines: &[TraceLine]) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut *w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {0}: cannot read trace")]
    Io(usize, #[source] std::io::Error),
    #[error("trace is empty")]
    Empty,
    #[error("line {0}: event before any header")]
    Orphan(usize),
    #[error("seller-market traces record trades only and cannot be replayed")]
    SellerTrace,
    #[error("market {market} header: {source}")]
    Header { market: u32, source: FileError },
    #[error("market {market} header has no [couple] section")]
    NotCouple { market: u32 },
    #[error("market {market}: {source}")]
    Replay { market: u32, source: ReplayError },
}

impl TraceError {
    /// Malformed input (as opposed to a trace that fails verification).
    pub fn is_malformed(&self) -> bool {
        !matches!(self, TraceError::Replay { .. })
    }
}

pub fn read_lines(r: impl BufRead) -> Result<Vec<TraceLine>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| TraceError::Io(i + 1, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TraceError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Replays every Market of a couple-auction trace.
pub fn replay_lines(lines: &[TraceLine]) -> Result<Vec<(u32, Replay)>, TraceError> {
    if lines.is_empty() {
        return Err(TraceError::Empty);
    }
    let mut results = Vec::new();
    let mut current: Option<(u32, ScenarioFile, BTreeMap<BuyerId, Rational>, AuctionTrace)> = None;
    let finish = |cur: (u32, ScenarioFile, BTreeMap<BuyerId, Rational>, AuctionTrace)| {
        let (market, file, earmarks, trace) = cur;
        file.check_sections()
            .map_err(|source| TraceError::Header { market, source })?;
        let s = file.scenario().ok_or(TraceError::NotCouple { market })?;
        replay(&s, &earmarks, &trace)
            .map(|r| (market, r))
            .map_err(|source| TraceError::Replay { market, source })
    };
    for (i, line) in lines.iter().enumerate() {
        match line {
            TraceLine::Header {
                market,
                scenario,
                earmarks,
            } => {
                if let Some(cur) = current.take() {
                    results.push(finish(cur)?);
                }
                let earmarks = earmarks
                    .iter()
                    .map(|e| (e.buyer, e.amount.clone()))
                    .collect();
                current = Some((*market, scenario.clone(), earmarks, AuctionTrace::default()));
            }
            TraceLine::Event { event, .. } => match current.as_mut() {
                Some(cur) => cur.3.events.push(event.clone()),
                None => return Err(TraceError::Orphan(i + 1)),
            },
            TraceLine::SellerTrade { .. } => return Err(TraceError::SellerTrace),
        }
    }
    if let Some(cur) = current.take() {
        results.push(finish(cur)?);
    }
    Ok(results)
}
