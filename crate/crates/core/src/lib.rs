//! Monte Carlo simulator for RF energy harvesting in cell-free massive MIMO
//! networks of UAV access points assisted by reconfigurable intelligent
//! surfaces.
//!
//! A campaign places users, draws Rician channels, estimates them from
//! pilots, transfers energy with MRT precoders, picks downlink powers that
//! maximize the worst user's uplink spectral efficiency and pools the
//! results into CDFs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod geometry;
pub mod powerctl;
pub mod ris;
pub mod sim;
pub mod wpt;
