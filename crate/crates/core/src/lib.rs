//! Discrete-event simulation of SIP/RTP voice calls over 802.11a and
//! 802.11b WLANs, with FTP and CBR background load.

pub mod apps;
pub mod config;
pub mod engine;
pub mod mac;
pub mod metrics;
pub mod mobility;
pub mod network;
pub mod radio;
pub mod scenario;
pub mod sip;
pub mod stack;
pub mod voip;
