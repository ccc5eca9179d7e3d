// SPDX-License-Identifier: Apache-2.0

//! Container-based SDN network emulator.
//!
//! Every node of an emulated network (host, whitebox switch, controller) runs
//! in its own container. The [`fabric`] wires container network namespaces
//! together with veth pairs, GRE/VXLAN tunnels and a management bus; the
//! [`orchestrator`] turns a [`topology::Topology`] into a live
//! [`orchestrator::Emulation`]; [`shell`] drives it interactively or from an
//! experiment file; [`metrics`] runs the scalability and fidelity
//! measurements.

pub mod fabric;
pub mod metrics;
pub mod orchestrator;
pub mod ovsdb;
pub mod par;
pub mod runtime;
pub mod shell;
pub mod topology;
