// SPDX-License-Identifier: MIT OR Apache-2.0

//! Addressing for residual-stream writers and residual checkpoints.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// A component that adds a term to the residual stream.
///
/// Textual form (case-insensitive on parse): `EMB`, `POS`, `L{layer}H{head}`,
/// `BIAS{layer}`, `MLP{layer}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentId {
    Embed,
    PosEmbed,
    Head { layer: usize, head: usize },
    /// The attention output bias `b_O` of a layer, kept apart from the heads.
    AttnBias(usize),
    Mlp(usize),
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::Embed | ComponentId::PosEmbed => None,
            ComponentId::Head { layer, .. } | ComponentId::AttnBias(layer) | ComponentId::Mlp(layer) => {
                Some(layer)
            }
        }
    }

    /// Index of the first checkpoint that contains this component's output.
    pub fn written_at(&self) -> usize {
        match *self {
            ComponentId::Embed | ComponentId::PosEmbed => ResidCheckpoint::PreAttn(0).index(),
            ComponentId::Head { layer, .. } | ComponentId::AttnBias(layer) => {
                ResidCheckpoint::Mid(layer).index()
            }
            ComponentId::Mlp(layer) => ResidCheckpoint::Post(layer).index(),
        }
    }

    /// True when this component has been added to the stream by `ckpt`.
    pub fn is_in(&self, ckpt: ResidCheckpoint) -> bool {
        self.written_at() <= ckpt.index()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = match *self {
            ComponentId::Embed | ComponentId::PosEmbed => true,
            ComponentId::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            ComponentId::AttnBias(layer) | ComponentId::Mlp(layer) => layer < cfg.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidComponent(format!(
                "{self} does not exist in a model with {} layers and {} heads",
                cfg.n_layers, cfg.n_heads
            )))
        }
    }

    /// Every component of a model, in the order they are written.
    pub fn all(cfg: &ModelConfig) -> Vec<ComponentId> {
        let mut out = vec![ComponentId::Embed, ComponentId::PosEmbed];
        for layer in 0..cfg.n_layers {
            out.extend((0..cfg.n_heads).map(|h| ComponentId::head(layer, h)));
            out.push(ComponentId::AttnBias(layer));
            out.push(ComponentId::Mlp(layer));
        }
        out
    }

    fn sort_key(&self) -> (usize, usize, usize) {
        match *self {
            ComponentId::Embed => (0, 0, 0),
            ComponentId::PosEmbed => (0, 1, 0),
            ComponentId::Head { layer, head } => (3 * layer + 1, 0, head),
            ComponentId::AttnBias(layer) => (3 * layer + 1, 1, 0),
            ComponentId::Mlp(layer) => (3 * layer + 2, 0, 0),
        }
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ComponentId::Embed => f.write_str("EMB"),
            ComponentId::PosEmbed => f.write_str("POS"),
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::AttnBias(layer) => write!(f, "BIAS{layer}"),
            ComponentId::Mlp(layer) => write!(f, "MLP{layer}"),
        }
    }
}

fn parse_index(s: &str, whole: &str) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::InvalidComponent(format!("cannot parse `{whole}`")));
    }
    s.parse()
        .map_err(|_| Error::InvalidComponent(format!("cannot parse `{whole}`")))
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        if up == "EMB" {
            return Ok(ComponentId::Embed);
        }
        if up == "POS" {
            return Ok(ComponentId::PosEmbed);
        }
        if let Some(rest) = up.strip_prefix("MLP") {
            return Ok(ComponentId::Mlp(parse_index(rest, s)?));
        }
        if let Some(rest) = up.strip_prefix("BIAS") {
            return Ok(ComponentId::AttnBias(parse_index(rest, s)?));
        }
        if let Some(rest) = up.strip_prefix('L') {
            if let Some((layer, head)) = rest.split_once('H') {
                return Ok(ComponentId::head(parse_index(layer, s)?, parse_index(head, s)?));
            }
        }
        Err(Error::InvalidComponent(format!(
            "cannot parse `{s}` (expected EMB, POS, L<l>H<h>, BIAS<l> or MLP<l>)"
        )))
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A snapshot point of the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidCheckpoint {
    /// Before the attention block of a layer (`resid_pre_n`).
    PreAttn(usize),
    /// After attention, before the MLP (`resid_mid_n`).
    Mid(usize),
    /// After the MLP (`resid_post_n`).
    Post(usize),
}

impl ResidCheckpoint {
    pub fn index(&self) -> usize {
        match *self {
            ResidCheckpoint::PreAttn(l) => 3 * l,
            ResidCheckpoint::Mid(l) => 3 * l + 1,
            ResidCheckpoint::Post(l) => 3 * l + 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => ResidCheckpoint::PreAttn(i / 3),
            1 => ResidCheckpoint::Mid(i / 3),
            _ => ResidCheckpoint::Post(i / 3),
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            ResidCheckpoint::PreAttn(l) | ResidCheckpoint::Mid(l) | ResidCheckpoint::Post(l) => l,
        }
    }

    pub fn all(cfg: &ModelConfig) -> Vec<ResidCheckpoint> {
        (0..3 * cfg.n_layers).map(Self::from_index).collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer() < cfg.n_layers {
            Ok(())
        } else {
            Err(Error::InvalidComponent(format!(
                "{self} does not exist in a model with {} layers",
                cfg.n_layers
            )))
        }
    }
}

impl Ord for ResidCheckpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.index().cmp(&other.index())
    }
}

impl PartialOrd for ResidCheckpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ResidCheckpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ResidCheckpoint::PreAttn(l) => write!(f, "resid_pre_{l}"),
            ResidCheckpoint::Mid(l) => write!(f, "resid_mid_{l}"),
            ResidCheckpoint::Post(l) => write!(f, "resid_post_{l}"),
        }
    }
}

impl FromStr for ResidCheckpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parse = |rest: &str| parse_index(rest, s);
        if let Some(rest) = lower.strip_prefix("resid_pre_") {
            Ok(ResidCheckpoint::PreAttn(parse(rest)?))
        } else if let Some(rest) = lower.strip_prefix("resid_mid_") {
            Ok(ResidCheckpoint::Mid(parse(rest)?))
        } else if let Some(rest) = lower.strip_prefix("resid_post_") {
            Ok(ResidCheckpoint::Post(parse(rest)?))
        } else {
            Err(Error::InvalidComponent(format!("cannot parse checkpoint `{s}`")))
        }
    }
}

impl Serialize for ResidCheckpoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResidCheckpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_grammar() {
        assert_eq!("L0H2".parse::<ComponentId>().unwrap(), ComponentId::head(0, 2));
        assert_eq!("l12h7".parse::<ComponentId>().unwrap(), ComponentId::head(12, 7));
        assert_eq!("mlp3".parse::<ComponentId>().unwrap(), ComponentId::Mlp(3));
        assert_eq!("Bias1".parse::<ComponentId>().unwrap(), ComponentId::AttnBias(1));
        assert_eq!("emb".parse::<ComponentId>().unwrap(), ComponentId::Embed);
        assert_eq!("POS".parse::<ComponentId>().unwrap(), ComponentId::PosEmbed);
        for bad in ["", "L", "LH", "L1", "L1H", "H2", "MLP", "MLPx", "L-1H2", "L1H2x"] {
            assert!(bad.parse::<ComponentId>().is_err(), "{bad}");
        }
        for c in [
            ComponentId::Embed,
            ComponentId::PosEmbed,
            ComponentId::head(3, 1),
            ComponentId::AttnBias(2),
            ComponentId::Mlp(0),
        ] {
            assert_eq!(c.to_string().parse::<ComponentId>().unwrap(), c);
        }
    }

    #[test]
    fn validation_against_config() {
        let cfg = ModelConfig::tiny(2, 16, 4, 10, 8);
        assert!(ComponentId::head(1, 3).validate(&cfg).is_ok());
        assert!(ComponentId::head(2, 0).validate(&cfg).is_err());
        assert!(ComponentId::head(0, 4).validate(&cfg).is_err());
        assert!(ComponentId::Mlp(9).validate(&cfg).is_err());
        assert!(ResidCheckpoint::Post(2).validate(&cfg).is_err());
    }

    #[test]
    fn write_order() {
        let cfg = ModelConfig::tiny(2, 16, 2, 10, 8);
        let all = ComponentId::all(&cfg);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        assert!(ComponentId::Embed.is_in(ResidCheckpoint::PreAttn(0)));
        assert!(!ComponentId::head(0, 1).is_in(ResidCheckpoint::PreAttn(0)));
        assert!(ComponentId::head(0, 1).is_in(ResidCheckpoint::Mid(0)));
        assert!(!ComponentId::Mlp(0).is_in(ResidCheckpoint::Mid(0)));
        assert!(ComponentId::Mlp(0).is_in(ResidCheckpoint::PreAttn(1)));
    }

    #[test]
    fn checkpoint_names() {
        let cfg = ModelConfig::tiny(2, 16, 2, 10, 8);
        let names: Vec<String> = ResidCheckpoint::all(&cfg).iter().map(|c| c.to_string()).collect();
        assert_eq!(
            names,
            [
                "resid_pre_0",
                "resid_mid_0",
                "resid_post_0",
                "resid_pre_1",
                "resid_mid_1",
                "resid_post_1"
            ]
        );
        for n in names {
            assert_eq!(n.parse::<ResidCheckpoint>().unwrap().to_string(), n);
        }
    }
}
