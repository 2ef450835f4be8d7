//! Fair allocation of scarce Good under a crisis: claims rules, the Couple
//! auction, repeated markets and a seller-driven market with Rights.

pub mod auction;
pub mod fairness;
pub mod ids;
pub mod market;
pub mod rational;
pub mod seller;
pub mod sequence;
