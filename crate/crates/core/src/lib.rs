// NaN must fail range checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod executive;
pub mod fusion;
pub mod gateway;
pub mod manip;
pub mod mas;
pub mod nav;
pub mod netsim;
pub mod percept;
pub mod supervise;
pub mod world;
