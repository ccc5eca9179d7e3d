// SPDX-License-Identifier: Apache-2.0

//! Deterministic generators for the evaluated topology families.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HostRole, IpConfig, LinkSpec, NodeKind, NodeSpec, Topology, TopologyError};

/// Switch counts of the scalability sweep.
pub const REFERENCE_SWEEP_SIZES: [usize; 7] = [9, 17, 33, 65, 129, 257, 513];

/// Background client/server pairs on the fidelity tree, as host indices.
/// Every pair spans two edge switches, so all background traffic crosses the core.
pub const FIDELITY_BACKGROUND_PAIRS: [(usize, usize); 7] =
    [(2, 9), (3, 10), (4, 11), (5, 12), (6, 13), (7, 14), (8, 15)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Star,
    Mesh,
    Tree,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Star, Family::Mesh, Family::Tree];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Star => "star",
            Family::Mesh => "mesh",
            Family::Tree => "tree",
        }
    }

    /// Inter-switch link count for `switches` switches.
    pub fn link_count(self, switches: usize) -> usize {
        match self {
            Family::Star | Family::Tree => switches.saturating_sub(1),
            Family::Mesh => switches * switches.saturating_sub(1) / 2,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "star" => Ok(Family::Star),
            "mesh" => Ok(Family::Mesh),
            "tree" => Ok(Family::Tree),
            other => Err(format!("unknown topology family `{other}`")),
        }
    }
}

/// Whether generators attach the two probe hosts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probes {
    Attach,
    None,
}

fn switch_names(count: usize) -> Vec<String> {
    let width = count.to_string().len();
    (1..=count).map(|i| format!("s{i:0width$}")).collect()
}

struct Builder {
    topology: Topology,
    next_link: usize,
}

impl Builder {
    fn new() -> Self {
        Self {
            topology: Topology::runnable(),
            next_link: 1,
        }
    }

    fn switch(&mut self, name: &str) {
        self.topology
            .add_node(NodeSpec::whitebox(name))
            .expect("generated switch names are unique");
    }

    fn host(&mut self, index: u8, role: HostRole) -> String {
        let name = format!("h{index}");
        let ip = IpConfig {
            addr: Ipv4Addr::new(10, 0, 0, index),
            prefix_len: 24,
        };
        self.topology
            .add_node(NodeSpec::host(&name, ip).with_role(role))
            .expect("generated host names are unique");
        name
    }

    fn link(&mut self, a: &str, b: &str) {
        let name = format!("l{}", self.next_link);
        self.next_link += 1;
        self.topology
            .add_link(LinkSpec::veth(name, a, b))
            .expect("generated links reference existing nodes");
    }

    fn attach_probes(&mut self) {
        if let Some((a, b)) = probe_pair(&self.topology) {
            let h1 = self.host(1, HostRole::Client);
            let h2 = self.host(2, HostRole::Server);
            self.link(&a, &h1);
            self.link(&b, &h2);
        }
    }
}

fn check_size(family: Family, switch_count: usize) -> Result<(), TopologyError> {
    if switch_count < 2 {
        return Err(TopologyError::SizeTooSmall {
            family: family.as_str(),
            got: switch_count,
            min: 2,
        });
    }
    Ok(())
}

pub fn generate(
    family: Family,
    switch_count: usize,
    probes: Probes,
) -> Result<Topology, TopologyError> {
    check_size(family, switch_count)?;
    let names = switch_names(switch_count);
    let mut b = Builder::new();
    for n in &names {
        b.switch(n);
    }
    match family {
        Family::Star => {
            for leaf in &names[1..] {
                b.link(&names[0], leaf);
            }
        }
        Family::Tree => {
            // heap layout: switch i (1-based) hangs below switch i / 2
            for i in 2..=switch_count {
                b.link(&names[i / 2 - 1], &names[i - 1]);
            }
        }
        Family::Mesh => {
            for i in 0..switch_count {
                for j in i + 1..switch_count {
                    b.link(&names[i], &names[j]);
                }
            }
        }
    }
    if probes == Probes::Attach {
        match family {
            // every pair is at distance 1; lowest names win
            Family::Mesh => {
                let h1 = b.host(1, HostRole::Client);
                let h2 = b.host(2, HostRole::Server);
                b.link(&names[0], &h1);
                b.link(&names[1], &h2);
            }
            Family::Star | Family::Tree => b.attach_probes(),
        }
    }
    Ok(b.topology)
}

/// Hub switch plus `switch_count - 1` leaves, with probe hosts.
pub fn generate_star(switch_count: usize) -> Result<Topology, TopologyError> {
    generate(Family::Star, switch_count, Probes::Attach)
}

/// Binary tree filled breadth-first, with probe hosts.
pub fn generate_tree(switch_count: usize) -> Result<Topology, TopologyError> {
    generate(Family::Tree, switch_count, Probes::Attach)
}

/// Complete graph over the switches, with probe hosts.
pub fn generate_mesh(switch_count: usize) -> Result<Topology, TopologyError> {
    generate(Family::Mesh, switch_count, Probes::Attach)
}

/// Two switches at maximum distance in the switch graph. Ties go to the
/// lexicographically lowest `(first, second)` name pair.
pub fn probe_pair(topology: &Topology) -> Option<(String, String)> {
    let switches: Vec<&str> = topology
        .nodes_of_kind(NodeKind::WhiteboxSwitch)
        .map(|n| n.name.as_str())
        .collect();
    if switches.len() < 2 {
        return None;
    }
    let adj = topology.adjacency();
    let mut best: Option<(usize, &str, &str)> = None;
    for &src in &switches {
        let mut dist: HashMap<&str, usize> = HashMap::from([(src, 0)]);
        let mut queue = VecDeque::from([src]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n];
            for &m in &adj[n] {
                if topology.node(m).map(|s| s.kind) != Some(NodeKind::WhiteboxSwitch) {
                    continue;
                }
                if !dist.contains_key(m) {
                    dist.insert(m, d + 1);
                    queue.push_back(m);
                }
            }
        }
        for &dst in &switches {
            if dst <= src {
                continue;
            }
            let Some(&d) = dist.get(dst) else { continue };
            let better = match best {
                None => true,
                Some((bd, ba, bb)) => d > bd || (d == bd && (src, dst) < (ba, bb)),
            };
            if better {
                best = Some((d, src, dst));
            }
        }
    }
    best.map(|(_, a, b)| (a.to_string(), b.to_string()))
}

/// The two-host, one-switch, one-controller example network.
pub fn single_switch() -> Topology {
    let mut t = Topology::runnable();
    let ip = |s: &str| IpConfig::from_parts(s, "24").expect("static address");
    t.add_node(NodeSpec::whitebox("sw1")).unwrap();
    t.add_node(NodeSpec::host("h1", ip("10.0.0.1"))).unwrap();
    t.add_node(NodeSpec::host("h2", ip("10.0.0.2"))).unwrap();
    t.add_link(LinkSpec::veth("l1", "sw1", "h1")).unwrap();
    t.add_link(LinkSpec::veth("l2", "sw1", "h2")).unwrap();
    t.add_node(NodeSpec::controller("ctl1")).unwrap();
    t
}

/// Core switch `s1`, edge switches `s2..s5`, four hosts per edge switch
/// (`h1..h4` on `s2`, ..., `h13..h16` on `s5`).
pub fn fidelity_tree() -> Topology {
    let mut b = Builder::new();
    let names = switch_names(5);
    for n in &names {
        b.switch(n);
    }
    for edge in &names[1..] {
        b.link(&names[0], edge);
    }
    let mut roles = HashMap::from([(1usize, HostRole::Client), (16, HostRole::Server)]);
    for (client, server) in FIDELITY_BACKGROUND_PAIRS {
        roles.insert(client, HostRole::Client);
        roles.insert(server, HostRole::Server);
    }
    for i in 1..=16usize {
        let host = b.host(i as u8, roles[&i]);
        let edge = &names[1 + (i - 1) / 4];
        b.link(edge, &host);
    }
    b.topology
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::LinkClass;

    /// Level sizes of a breadth-first filled binary tree, by direct enumeration.
    fn bfs_fill_levels(n: usize) -> Vec<usize> {
        let mut levels = Vec::new();
        let mut remaining = n;
        let mut capacity = 1;
        while remaining > 0 {
            let here = remaining.min(capacity);
            levels.push(here);
            remaining -= here;
            capacity *= 2;
        }
        levels
    }

    /// Depth of every switch measured by BFS from the root over generated links.
    fn measured_levels(t: &Topology) -> Vec<usize> {
        let adj = t.adjacency();
        let root = t.nodes().next().unwrap().name.as_str();
        let mut depth: HashMap<&str, usize> = HashMap::from([(root, 0)]);
        let mut q = VecDeque::from([root]);
        while let Some(n) = q.pop_front() {
            for &m in &adj[n] {
                if t.node(m).unwrap().kind != NodeKind::WhiteboxSwitch {
                    continue;
                }
                if !depth.contains_key(m) {
                    depth.insert(m, depth[n] + 1);
                    q.push_back(m);
                }
            }
        }
        let max = *depth.values().max().unwrap();
        let mut levels = vec![0; max + 1];
        for d in depth.values() {
            levels[*d] += 1;
        }
        levels
    }

    #[test]
    fn tree_level_oracle_frozen() {
        assert_eq!(bfs_fill_levels(9), vec![1, 2, 4, 2]);
        assert_eq!(bfs_fill_levels(33), vec![1, 2, 4, 8, 16, 2]);
        assert_eq!(bfs_fill_levels(2), vec![1, 1]);
    }

    #[test]
    fn tree_shape_matches_oracle() {
        for s in [2, 3, 9, 33, 100] {
            let t = generate(Family::Tree, s, Probes::None).unwrap();
            assert_eq!(measured_levels(&t), bfs_fill_levels(s), "S={s}");
            assert_eq!(t.link_count(), s - 1);
        }
        let t = generate_tree(33).unwrap();
        assert_eq!(measured_levels(&t).len() - 1, 5);
        assert_eq!(t.inter_switch_links(), 32);
    }

    #[test]
    fn star_counts() {
        let t = generate_star(9).unwrap();
        assert_eq!(t.count_kind(NodeKind::WhiteboxSwitch), 9);
        assert_eq!(t.inter_switch_links(), 8);
        assert_eq!(t.count_kind(NodeKind::Host), 2);
        assert_eq!(t.link_count(), 10);
        assert_eq!(generate_star(17).unwrap().inter_switch_links(), 16);
        assert!(matches!(
            generate_star(1),
            Err(TopologyError::SizeTooSmall { got: 1, .. })
        ));
    }

    #[test]
    fn star_probes_on_distinct_leaves() {
        let t = generate_star(9).unwrap();
        let attach: Vec<&str> = t
            .links()
            .filter(|l| l.endpoint_b.starts_with('h'))
            .map(|l| l.endpoint_a.as_str())
            .collect();
        assert_eq!(attach, vec!["s2", "s3"]);
    }

    #[test]
    fn mesh_counts() {
        assert_eq!(generate_mesh(9).unwrap().inter_switch_links(), 36);
        assert_eq!(generate_mesh(3).unwrap().inter_switch_links(), 3);
        assert_eq!(generate_mesh(17).unwrap().inter_switch_links(), 136);
    }

    #[test]
    fn mesh_shortcut_agrees_with_search() {
        for s in 2..8 {
            let bare = generate(Family::Mesh, s, Probes::None).unwrap();
            let names = switch_names(s);
            assert_eq!(
                probe_pair(&bare),
                Some((names[0].clone(), names[1].clone()))
            );
        }
    }

    #[test]
    fn tree_probes_at_max_distance() {
        // S=9: s8 (depth 3) and s6/s7 (depth 2 under the other subtree) are 5 hops apart
        let bare = generate(Family::Tree, 9, Probes::None).unwrap();
        assert_eq!(probe_pair(&bare), Some(("s6".into(), "s8".into())));
        // full tree of 7: the first leaf below each child of the root
        let bare = generate(Family::Tree, 7, Probes::None).unwrap();
        assert_eq!(probe_pair(&bare), Some(("s4".into(), "s6".into())));
    }

    #[test]
    fn zero_padded_names_sort_numerically() {
        let names = switch_names(17);
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names[0], "s01");
    }

    #[test]
    fn fidelity_tree_shape() {
        let t = fidelity_tree();
        assert_eq!(t.count_kind(NodeKind::WhiteboxSwitch), 5);
        assert_eq!(t.count_kind(NodeKind::Host), 16);
        assert_eq!(t.link_count(), 20);
        assert!(t.links().all(|l| l.class == LinkClass::PointToPoint));
        let edge_of = |h: &str| {
            t.links()
                .find(|l| l.endpoint_b == h)
                .map(|l| l.endpoint_a.clone())
                .unwrap()
        };
        assert_ne!(edge_of("h1"), edge_of("h16"));
        for (a, b) in FIDELITY_BACKGROUND_PAIRS {
            assert_ne!(edge_of(&format!("h{a}")), edge_of(&format!("h{b}")));
        }
        assert!(t.is_valid());
    }

    #[test]
    fn single_switch_is_valid() {
        let t = single_switch();
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.link_count(), 2);
        assert!(t.validate().is_empty());
    }
}
