use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BuyerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SellerId(pub u32);

/// Any market participant. Buyers order before sellers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Participant {
    Buyer(BuyerId),
    Seller(SellerId),
}

impl fmt::Display for BuyerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

impl fmt::Display for SellerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Buyer(b) => b.fmt(f),
            Participant::Seller(s) => s.fmt(f),
        }
    }
}

impl std::str::FromStr for Participant {
    type Err = String;

    /// Parses the display form (`b3`, `s1`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_at(s.len().min(1));
        let n: u32 = rest.parse().map_err(|_| format!("bad participant {s:?}"))?;
        match kind {
            "b" => Ok(Participant::Buyer(BuyerId(n))),
            "s" => Ok(Participant::Seller(SellerId(n))),
            _ => Err(format!("bad participant {s:?}")),
        }
    }
}

impl Serialize for Participant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Participant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
