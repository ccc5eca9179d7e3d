// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::net::Ipv4Addr;

use proptest::prelude::*;
use vemul::fabric::{MacAddr, MgmtAllocator};
use vemul::metrics::{mean, parse_ping};
use vemul::orchestrator::ControllerTarget;
use vemul::par::{self, Mode};
use vemul::shell::Command;
use vemul::topology::{generate, Family, NodeKind, Probes, TopologyFile};

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Star), Just(Family::Mesh), Just(Family::Tree)]
}

proptest! {
    #[test]
    fn generated_topologies_are_valid(f in family(), s in 2usize..48, probes in any::<bool>()) {
        let p = if probes { Probes::Attach } else { Probes::None };
        let t = generate(f, s, p).unwrap();
        prop_assert_eq!(t.count_kind(NodeKind::WhiteboxSwitch), s);
        prop_assert_eq!(t.inter_switch_links(), f.link_count(s));
        prop_assert!(t.is_valid(), "{:?}", t.validate());
        prop_assert!(t.same_structure(&generate(f, s, p).unwrap()), "deterministic");
    }

    #[test]
    fn topology_files_round_trip(f in family(), s in 2usize..20) {
        let t = generate(f, s, Probes::Attach).unwrap();
        let doc = TopologyFile::from_topology(&t);
        let again = TopologyFile::parse(&doc.to_toml()).unwrap();
        prop_assert_eq!(&again, &doc);
    }

    #[test]
    fn macs_are_local_unicast(run in "[a-f0-9]{8}", node in "[a-z][a-z0-9]{0,8}", port in 0u32..64) {
        let m = MacAddr::derive(&run, &node, &format!("data{port}"));
        prop_assert_eq!(m.0[0] & 1, 0);
        prop_assert_eq!(m.0[0] & 2, 2);
        prop_assert_eq!(m, MacAddr::derive(&run, &node, &format!("data{port}")));
        prop_assert_eq!(m.to_string().parse::<MacAddr>().unwrap(), m);
    }

    #[test]
    fn management_addresses_are_distinct(n in 1usize..300) {
        let mut a = MgmtAllocator::new(Ipv4Addr::new(172, 31, 0, 0), 16);
        let mut seen = HashSet::new();
        for _ in 0..n {
            let ip = a.allocate().unwrap();
            prop_assert_ne!(ip, a.gateway());
            prop_assert!(seen.insert(ip));
        }
    }

    #[test]
    fn command_parsing_never_panics(line in any::<String>()) {
        let _ = Command::parse(&line);
    }

    #[test]
    fn ping_parsing_never_panics(text in any::<String>()) {
        let _ = parse_ping(&text);
    }

    #[test]
    fn controller_target_round_trip(a in any::<[u8; 4]>(), port in 1u16..) {
        let t = ControllerTarget { ip: Ipv4Addr::from(a), port };
        prop_assert_eq!(t.to_string().parse::<ControllerTarget>().unwrap(), t);
    }

    #[test]
    fn fanout_modes_agree(v in prop::collection::vec(-1e6f64..1e6, 0..200)) {
        let seq = par::map(Mode::Sequential, &v, |x| x * 2.0);
        let parl = par::map(Mode::Parallel, &v, |x| x * 2.0);
        prop_assert_eq!(seq, parl);
        let a = par::sum(Mode::Sequential, &v, |x| *x);
        let b = par::sum(Mode::Parallel, &v, |x| *x);
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
    }

    #[test]
    fn mean_is_order_independent(mut v in prop::collection::vec(0.0f64..1e4, 1..50)) {
        let m = mean(&v).unwrap();
        v.reverse();
        let r = mean(&v).unwrap();
        prop_assert!((m - r).abs() <= 1e-9 * m.abs().max(1.0));
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
    }
}
