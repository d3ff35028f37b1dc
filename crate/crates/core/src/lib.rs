pub mod config;
pub mod controller;
pub mod dynamics;
pub mod funnel;
pub mod harness;
pub mod lp;
pub mod pwa;
pub mod trajopt;
