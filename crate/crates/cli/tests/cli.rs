use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crisis_cli::scenario_file::ScenarioFile;
use crisis_core::auction::{run_auction, AuctionEvent, Source};
use crisis_core::ids::{BuyerId, Participant, SellerId};
use crisis_core::market::basket_utility;
use crisis_core::rational::{self, Rational};
use serde::Deserialize;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn crisis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crisis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[derive(Deserialize)]
struct Step {
    event: String,
    price: String,
    buyer_cash: String,
    seller_cash: String,
}

#[derive(Deserialize)]
struct Terminal {
    price_good: String,
    price_right: String,
    price_couple: String,
    iterations: u32,
    buyer_couples: u64,
    buyer_cash: String,
    seller_cash: String,
    buyer_money: u64,
    buyer_residue: String,
    seller_money: u64,
    seller_residue: String,
    buyer_utility: String,
}

#[derive(Deserialize)]
struct HandTrace {
    step: Vec<Step>,
    terminal: Terminal,
}

fn q(s: &str) -> Rational {
    rational::parse(s).unwrap()
}

/// Follows the cash of both participants through the recorded decisions
/// and compares every step with the hand-worked fixture.
#[test]
fn desk_matches_hand_trace() {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk_hand_trace.toml"),
    )
    .unwrap();
    let hand: HandTrace = toml::from_str(&text).unwrap();
    let s = ScenarioFile::load(&scenario("couple_desk.scn"))
        .unwrap()
        .scenario()
        .unwrap();
    let (outcome, trace) = run_auction(&s).unwrap();

    let b = Participant::Buyer(BuyerId(1));
    let seller = Participant::Seller(SellerId(1));
    let mut cash: BTreeMap<Participant, Rational> =
        [(b, rational::int(11)), (seller, rational::one())].into();
    let mut steps = hand.step.iter();
    for e in &trace.events {
        let (name, price) = match e {
            AuctionEvent::Outbid {
                buyer,
                price,
                acquisitions,
            } => {
                for a in acquisitions {
                    *cash.get_mut(&Participant::Buyer(*buyer)).unwrap() -= price;
                    if let Source::Held { owner, refund } = &a.source {
                        *cash.get_mut(&Participant::Buyer(*owner)).unwrap() += refund;
                    }
                }
                ("outbid", price.clone())
            }
            AuctionEvent::PricesRaised {
                price_couple,
                topups,
                ..
            } => {
                for t in topups {
                    *cash.get_mut(&t.participant).unwrap() += &t.amount;
                }
                ("prices_raised", price_couple.clone())
            }
            _ => continue,
        };
        let want = steps.next().expect("fixture lists every step");
        assert_eq!(name, want.event);
        assert_eq!(price, q(&want.price), "{name}");
        assert_eq!(cash[&b], q(&want.buyer_cash), "{name} buyer");
        assert_eq!(cash[&seller], q(&want.seller_cash), "{name} seller");
    }
    assert!(steps.next().is_none());

    let t = &hand.terminal;
    let p = &outcome.solution.prices;
    assert_eq!(
        (&p.good, &p.right, &p.couple),
        (&q(&t.price_good), &q(&t.price_right), &q(&t.price_couple))
    );
    assert_eq!(outcome.iterations, t.iterations);
    assert_eq!(outcome.couples_held(BuyerId(1)), t.buyer_couples);
    assert_eq!(outcome.final_cash[&b], q(&t.buyer_cash));
    assert_eq!(outcome.final_cash[&seller], q(&t.seller_cash));
    let bb = &outcome.solution.baskets[&b];
    let sb = &outcome.solution.baskets[&seller];
    assert_eq!(
        (bb.money, &bb.residual_cash),
        (t.buyer_money, &q(&t.buyer_residue))
    );
    assert_eq!(
        (sb.money, &sb.residual_cash),
        (t.seller_money, &q(&t.seller_residue))
    );
    assert_eq!(basket_utility(b, bb, &s).unwrap(), q(&t.buyer_utility));
}

#[test]
fn validate_reports_success_and_failure() {
    let out = crisis(&["validate", path(&scenario("couple_desk.scn"))]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("valid couple scenario"));
    assert_eq!(
        code(&crisis(&["validate", path(&scenario("table1.scn"))])),
        0
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    let text = std::fs::read_to_string(scenario("couple_desk.scn")).unwrap();
    std::fs::write(&bad, text.replace("money = 10", "money = 3")).unwrap();
    let out = crisis(&["validate", path(&bad)]);
    assert_eq!(code(&out), 3);
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_and_parse_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let desk = scenario("couple_desk.scn");
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&desk),
            "--epsilon",
            "x",
            "--out",
            path(&out_dir)
        ])),
        2
    );
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&desk),
            "--markets",
            "0",
            "--out",
            path(&out_dir)
        ])),
        2
    );
    assert_eq!(
        code(&crisis(&[
            "validate",
            path(&dir.path().join("missing.scn"))
        ])),
        2
    );
    assert_eq!(code(&crisis(&["frobnicate"])), 2);
    let t1 = scenario("table1.scn");
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&t1),
            "--mechanism",
            "couple",
            "--out",
            path(&out_dir)
        ])),
        2
    );

    let odd = dir.path().join("odd.scn");
    let text = std::fs::read_to_string(&desk).unwrap();
    std::fs::write(
        &odd,
        text.replace("markets = 1", "markets = 1\nflavour = 1"),
    )
    .unwrap();
    assert_eq!(code(&crisis(&["validate", path(&odd)])), 2);
}

#[test]
fn invalid_override_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = crisis(&[
        "run",
        path(&scenario("couple_desk.scn")),
        "--epsilon",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 3);
}

const TABLES: [&str; 4] = [
    "prices.csv",
    "frustration.csv",
    "trades.csv",
    "holdings.csv",
];

fn assert_tables(dir: &Path) {
    for t in TABLES {
        let text = std::fs::read_to_string(dir.join(t)).unwrap_or_else(|_| panic!("{t} missing"));
        assert!(
            text.lines()
                .next()
                .is_some_and(|h| h.starts_with("market,")),
            "{t} header"
        );
    }
    assert!(dir.join("trace.jsonl").exists());
}

#[test]
fn run_writes_all_tables() {
    let dir = tempfile::tempdir().unwrap();
    let couple = dir.path().join("couple");
    let out = crisis(&[
        "run",
        path(&scenario("couple_desk.scn")),
        "--markets",
        "2",
        "--out",
        path(&couple),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_tables(&couple);
    let prices = std::fs::read_to_string(couple.join("prices.csv")).unwrap();
    assert!(prices.contains("1,couple,,25/8,3.125000"));

    // Passing agents never trade; the trades table is header-only.
    let pass = dir.path().join("pass.scn");
    let text = std::fs::read_to_string(scenario("table1.scn")).unwrap();
    std::fs::write(
        &pass,
        text.replace("strategy = \"truthful\"", "strategy = \"pass\""),
    )
    .unwrap();
    let seller = dir.path().join("seller");
    assert_eq!(
        code(&crisis(&["run", path(&pass), "--out", path(&seller)])),
        0
    );
    assert_tables(&seller);
    assert_eq!(
        std::fs::read_to_string(seller.join("trades.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = scenario("table1.scn");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(
            code(&crisis(&[
                "run",
                path(&t1),
                "--seed",
                "7",
                "--out",
                path(d)
            ])),
            0
        );
    }
    for f in TABLES.iter().copied().chain(["trace.jsonl"]) {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&t1),
            "--seed",
            "8",
            "--out",
            path(&c)
        ])),
        0
    );
    assert_ne!(
        std::fs::read(a.join("trades.csv")).unwrap(),
        std::fs::read(c.join("trades.csv")).unwrap()
    );
}

#[test]
fn trace_replay_accepts_runs_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&scenario("couple_desk.scn")),
            "--markets",
            "3",
            "--out",
            path(&out)
        ])),
        0
    );
    let trace = out.join("trace.jsonl");
    let ok = crisis(&["trace-replay", path(&trace)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().count(), 3);

    let text = std::fs::read_to_string(&trace).unwrap();
    let forged = dir.path().join("forged.jsonl");
    std::fs::write(
        &forged,
        text.replacen("\"amount\":\"1/4\"", "\"amount\":\"1/3\"", 1),
    )
    .unwrap();
    assert_eq!(code(&crisis(&["trace-replay", path(&forged)])), 3);

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"record\":\"event\"\n").unwrap();
    assert_eq!(code(&crisis(&["trace-replay", path(&broken)])), 2);

    let seller = dir.path().join("seller");
    assert_eq!(
        code(&crisis(&[
            "run",
            path(&scenario("table1.scn")),
            "--out",
            path(&seller)
        ])),
        0
    );
    assert_eq!(
        code(&crisis(&[
            "trace-replay",
            path(&seller.join("trace.jsonl"))
        ])),
        2
    );
}

#[test]
fn table1_scenario_matches_published_configuration() {
    let cfg = ScenarioFile::load(&scenario("table1.scn"))
        .unwrap()
        .episode_config()
        .unwrap();
    let pairs: Vec<(Rational, Rational)> = cfg
        .buyers
        .iter()
        .map(|b| (b.income.clone(), b.demand.clone()))
        .collect();
    let want: Vec<(Rational, Rational)> =
        [("1", "1/2"), ("5/4", "1/2"), ("6/4", "1/2"), ("1/4", "5/2")]
            .iter()
            .map(|(i, d)| (q(i), q(d)))
            .collect();
    assert_eq!(pairs, want);
    assert_eq!(cfg.sellers.len(), 4);
    assert_eq!(cfg.markets, 10);
    let c = &cfg.constants;
    let got = [
        &c.c_store,
        &c.c_end_supply,
        &c.c_in_stock,
        &c.c_missing,
        &c.c_money,
    ];
    let want = ["-1/2", "1/10", "2", "-1", "1/10"].map(q);
    assert_eq!(got.map(Clone::clone), want);
    assert_eq!(
        (cfg.supply.base.clone(), cfg.supply.std_dev.clone()),
        (q("1/4"), q("1/40"))
    );
}
