//! Command implementations and exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error, unreadable or malformed input, invalid override |
//! | 3 | scenario validation failure, or a trace that fails replay |
//! | 4 | runtime or output failure |

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crisis_core::market::{validate_scenario, Mechanism};
use crisis_core::rational::{self, Rational};
use crisis_core::seller::{run_seller_episode, validate_config, SellerMarketError, Strategies};
use crisis_core::sequence::{run_episode, EpisodeFailure};
use thiserror::Error;

use crate::scenario_file::{FileError, ScenarioFile, StrategyKind};
use crate::tables::{couple_tables, seller_tables};
use crate::trace::{couple_lines, read_lines, replay_lines, seller_lines, write_lines};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::File(_) => 2,
            AppError::Invalid(_) => 3,
            AppError::Runtime(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub markets: Option<u32>,
    pub epsilon: Option<String>,
    pub mechanism: Option<Mechanism>,
}

impl Overrides {
    pub fn apply(&self, file: &mut ScenarioFile) -> Result<(), AppError> {
        if let Some(seed) = self.seed {
            file.seed = seed;
        }
        if let Some(t) = self.markets {
            if t == 0 {
                return Err(AppError::Usage("--markets must be at least 1".into()));
            }
            file.markets = t;
        }
        if let Some(text) = &self.epsilon {
            let eps: Rational =
                rational::parse(text).map_err(|e| AppError::Usage(format!("--epsilon: {e}")))?;
            let c = file
                .couple
                .as_mut()
                .ok_or_else(|| AppError::Usage("--epsilon needs a [couple] section".into()))?;
            c.epsilon = eps;
        }
        if let Some(m) = self.mechanism {
            file.mechanism = m;
        }
        file.check_sections()?;
        Ok(())
    }
}

/// Human-readable validation report; `Err` lists every violation.
pub fn validate(file: &ScenarioFile) -> Result<String, AppError> {
    match file.mechanism {
        Mechanism::Couple => {
            let s = file.scenario().expect("checked section");
            let report = validate_scenario(&s);
            if !report.is_valid() {
                return Err(AppError::Invalid(report.to_string()));
            }
            let mut msg = format!(
                "valid couple scenario: {} buyers, {} sellers, {} Good",
                s.buyers.len(),
                s.sellers.len(),
                s.total_good()
            );
            if !report.degenerate.is_empty() {
                let ids: Vec<String> = report.degenerate.iter().map(|b| b.to_string()).collect();
                msg.push_str(&format!(" (degenerate buyers: {})", ids.join(", ")));
            }
            Ok(msg)
        }
        Mechanism::Seller => {
            let cfg = file.episode_config().expect("checked section");
            let errors = validate_config(&cfg);
            if !errors.is_empty() {
                let lines: Vec<String> = errors.iter().map(|e| format!("  - {e}")).collect();
                return Err(AppError::Invalid(format!(
                    "invalid seller market:\n{}",
                    lines.join("\n")
                )));
            }
            Ok(format!(
                "valid seller market: {} buyers, {} sellers, {} markets",
                cfg.buyers.len(),
                cfg.sellers.len(),
                cfg.markets
            ))
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(format!("{}: {e}", path.display()))
}

fn write_trace(dir: &Path, lines: &[crate::trace::TraceLine]) -> Result<(), AppError> {
    let path = dir.join("trace.jsonl");
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    write_lines(&mut BufWriter::new(f), lines).map_err(|e| io_err(&path, e))
}

/// Runs the scenario and writes the four tables plus `trace.jsonl` to `out`.
pub fn run(path: &Path, overrides: &Overrides, out: &Path) -> Result<String, AppError> {
    let mut file = ScenarioFile::load(path)?;
    overrides.apply(&mut file)?;
    validate(&file)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    match file.mechanism {
        Mechanism::Couple => {
            let s = file.scenario().expect("checked section");
            let episode = run_episode(&s, file.markets).map_err(|e| match e.cause {
                EpisodeFailure::Auction(_) | EpisodeFailure::Fairness(_) => {
                    AppError::Invalid(e.to_string())
                }
            })?;
            couple_tables(&s, &episode)
                .write(out)
                .map_err(|e| io_err(out, e))?;
            write_trace(out, &couple_lines(&episode, &file))?;
            let last = episode.markets.last().expect("at least one market");
            Ok(format!(
                "{} market(s); final couple price {}",
                episode.markets.len(),
                rational::exact(&last.outcome.solution.prices.couple)
            ))
        }
        Mechanism::Seller => {
            let cfg = file.episode_config().expect("checked section");
            let section = file.seller_market.as_ref().expect("checked section");
            let mut strategies = match section.strategy {
                StrategyKind::Pass => Strategies::pass(&cfg),
                StrategyKind::Truthful => Strategies::truthful(&cfg),
                StrategyKind::HillClimb => Strategies::hill_climb(&cfg),
            };
            let seller_err = |e: SellerMarketError| match e {
                SellerMarketError::Config(_) => AppError::Invalid(e.to_string()),
                _ => AppError::Runtime(e.to_string()),
            };
            for _ in 0..section.warmup_episodes {
                run_seller_episode(&cfg, &mut strategies).map_err(seller_err)?;
            }
            let episode = run_seller_episode(&cfg, &mut strategies).map_err(seller_err)?;
            seller_tables(&episode)
                .write(out)
                .map_err(|e| io_err(out, e))?;
            write_trace(out, &seller_lines(&episode))?;
            let trades: usize = episode.markets.iter().map(|m| m.trades.len()).sum();
            Ok(format!(
                "{} market(s); {trades} trades; {} strategy adjustments",
                episode.markets.len(),
                episode.adjustments.len()
            ))
        }
    }
}

/// Replays a couple-auction trace and summarises each Market.
pub fn trace_replay(path: &PathBuf) -> Result<String, AppError> {
    let f = File::open(path).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
    let lines = read_lines(BufReader::new(f)).map_err(|e| AppError::Usage(e.to_string()))?;
    let replays = replay_lines(&lines).map_err(|e| {
        if e.is_malformed() {
            AppError::Usage(e.to_string())
        } else {
            AppError::Invalid(e.to_string())
        }
    })?;
    let mut out = Vec::new();
    for (market, r) in &replays {
        let p = &r.state.prices;
        let money: u64 = r.final_money.values().sum();
        out.push(format!(
            "market {market}: replay ok; prices good {} right {} couple {}; {} couples; {money} Money items",
            rational::exact(&p.good),
            rational::exact(&p.right),
            rational::exact(&p.couple),
            r.state.couples.len()
        ));
    }
    Ok(out.join("\n"))
}
