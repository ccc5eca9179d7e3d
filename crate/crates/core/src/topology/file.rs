// SPDX-License-Identifier: Apache-2.0

//! TOML topology documents.
//!
//! ```toml
//! [[nodes]]
//! name = "h1"
//! kind = "host"
//! ip = "10.0.0.1"
//! mask = "24"
//!
//! [[links]]
//! name = "l1"
//! a = "sw1"
//! b = "h1"
//! model = "veth"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    HostRole, ImageSet, IpConfig, LinkClass, LinkModel, LinkSpec, NodeKind, NodeSpec,
    ResourceLimits, Topology, TopologyError,
};

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// A `mask` may be written either as `24` or `"24"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mask {
    Number(u8),
    Text(String),
}

impl Mask {
    fn as_string(&self) -> String {
        match self {
            Mask::Number(n) => n.to_string(),
            Mask::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_quota: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tunnel_key: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(default)]
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
}

fn field_err(field: String, reason: impl Into<String>) -> FileError {
    FileError::Field {
        field,
        reason: reason.into(),
    }
}

impl TopologyFile {
    pub fn parse(text: &str) -> Result<Self, FileError> {
        toml::from_str(text).map_err(|e| FileError::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Builds a runnable topology, filling missing images from `images`.
    pub fn to_topology(&self, images: &ImageSet) -> Result<Topology, FileError> {
        let mut topology = Topology::runnable();
        for (i, entry) in self.nodes.iter().enumerate() {
            topology.add_node(entry.to_spec(i, images)?)?;
        }
        for (i, entry) in self.links.iter().enumerate() {
            topology.add_link(entry.to_spec(i)?)?;
        }
        Ok(topology)
    }

    pub fn from_topology(topology: &Topology) -> Self {
        let nodes = topology
            .nodes()
            .map(|n| NodeEntry {
                name: n.name.clone(),
                kind: n.kind.as_str().into(),
                image: Some(n.image.clone()),
                ip: n.ip_config.map(|c| c.addr.to_string()),
                mask: n.ip_config.map(|c| Mask::Number(c.prefix_len)),
                role: match n.role {
                    HostRole::None => None,
                    HostRole::Client => Some("client".into()),
                    HostRole::Server => Some("server".into()),
                },
                cpu_quota: n.limits.and_then(|l| l.cpu_quota),
                memory_bytes: n.limits.and_then(|l| l.memory_bytes),
            })
            .collect();
        let links = topology
            .links()
            .map(|l| match l.class {
                LinkClass::PointToPoint => LinkEntry {
                    name: l.name.clone(),
                    a: Some(l.endpoint_a.clone()),
                    b: Some(l.endpoint_b.clone()),
                    model: Some(l.model.as_str().into()),
                    class: None,
                    members: None,
                    tunnel_key: l.tunnel_key,
                },
                LinkClass::Bus => LinkEntry {
                    name: l.name.clone(),
                    class: Some("bus".into()),
                    members: Some(l.members.clone()),
                    ..Default::default()
                },
            })
            .collect();
        Self { nodes, links }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology documents always serialize")
    }
}

impl NodeEntry {
    fn to_spec(&self, index: usize, images: &ImageSet) -> Result<NodeSpec, FileError> {
        let at = |f: &str| format!("nodes[{index}].{f}");
        let kind: NodeKind = self
            .kind
            .parse()
            .map_err(|e: String| field_err(at("kind"), e))?;
        let image = self
            .image
            .clone()
            .unwrap_or_else(|| images.for_kind(kind).to_string());
        let mut spec = NodeSpec::new(&self.name, kind, image);
        spec.ip_config = match (&self.ip, &self.mask) {
            (Some(ip), mask) => {
                let mask = mask
                    .as_ref()
                    .map(Mask::as_string)
                    .unwrap_or_else(|| "24".into());
                Some(IpConfig::from_parts(ip, &mask).map_err(|e| field_err(at("ip"), e))?)
            }
            (None, Some(_)) => return Err(field_err(at("mask"), "given without `ip`")),
            (None, None) => None,
        };
        if let Some(role) = &self.role {
            spec.role = role.parse().map_err(|e: String| field_err(at("role"), e))?;
        }
        if self.cpu_quota.is_some() || self.memory_bytes.is_some() {
            spec.limits = Some(ResourceLimits {
                cpu_quota: self.cpu_quota,
                memory_bytes: self.memory_bytes,
            });
        }
        Ok(spec)
    }
}

impl LinkEntry {
    fn to_spec(&self, index: usize) -> Result<LinkSpec, FileError> {
        let at = |f: &str| format!("links[{index}].{f}");
        let class: LinkClass = match &self.class {
            Some(c) => c.parse().map_err(|e: String| field_err(at("class"), e))?,
            None => LinkClass::PointToPoint,
        };
        let model: LinkModel = match &self.model {
            Some(m) => m.parse().map_err(|e: String| field_err(at("model"), e))?,
            None => LinkModel::Veth,
        };
        match class {
            LinkClass::PointToPoint => {
                let a = self
                    .a
                    .clone()
                    .ok_or_else(|| field_err(at("a"), "is required"))?;
                let b = self
                    .b
                    .clone()
                    .ok_or_else(|| field_err(at("b"), "is required"))?;
                if self.members.is_some() {
                    return Err(field_err(at("members"), "only valid for bus links"));
                }
                Ok(LinkSpec {
                    name: self.name.clone(),
                    endpoint_a: a,
                    endpoint_b: b,
                    model,
                    class,
                    members: Vec::new(),
                    tunnel_key: self.tunnel_key,
                })
            }
            LinkClass::Bus => {
                let members = self
                    .members
                    .clone()
                    .ok_or_else(|| field_err(at("members"), "is required for bus links"))?;
                Ok(LinkSpec {
                    tunnel_key: self.tunnel_key,
                    model,
                    ..LinkSpec::bus(&self.name, members)
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::single_switch;

    const SAMPLE: &str = r#"
[[nodes]]
name = "sw1"
kind = "whitebox-switch"

[[nodes]]
name = "h1"
kind = "host"
ip = "10.0.0.1"
mask = "24"

[[nodes]]
name = "h2"
kind = "host"
ip = "10.0.0.2"
mask = 24
role = "server"
cpu_quota = 0.5
memory_bytes = 268435456

[[nodes]]
name = "ctl1"
kind = "controller"
image = "onosproject/onos:2.7.0"

[[links]]
name = "l1"
a = "sw1"
b = "h1"
model = "veth"

[[links]]
name = "l2"
a = "sw1"
b = "h2"
"#;

    #[test]
    fn parses_example() {
        let t = TopologyFile::parse(SAMPLE)
            .unwrap()
            .to_topology(&ImageSet::default())
            .unwrap();
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.link_count(), 2);
        assert!(t.is_valid());
        let h2 = t.node("h2").unwrap();
        assert_eq!(h2.role, HostRole::Server);
        assert_eq!(h2.limits.unwrap().cpu_quota, Some(0.5));
        assert_eq!(t.node("sw1").unwrap().image, ImageSet::default().switch);
        assert_eq!(t.node("ctl1").unwrap().image, "onosproject/onos:2.7.0");
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = "[[nodes]]\nname = \"a\"\nkind = \"host\"\ncolour = \"red\"\n";
        let err = TopologyFile::parse(doc).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let err = TopologyFile::parse("extra = 1\n").unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn bad_field_is_named() {
        let doc = "[[nodes]]\nname = \"a\"\nkind = \"router\"\n";
        let err = TopologyFile::parse(doc)
            .unwrap()
            .to_topology(&ImageSet::default())
            .unwrap_err();
        assert!(err.to_string().contains("nodes[0].kind"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let t = single_switch();
        let text = TopologyFile::from_topology(&t).to_toml();
        let back = TopologyFile::parse(&text)
            .unwrap()
            .to_topology(&ImageSet::default())
            .unwrap();
        assert!(t.same_structure(&back));
    }
}
