use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Shipped region map for the 63-channel montage returned by
/// [`default_montage_63`].
pub const DEFAULT_GROUP_MAP_63: &str = include_str!("../../data/channel_groups_63.txt");

/// Reserved key that permits a channel to belong to several regions.
const OVERLAP_KEY: &str = "allow_overlap";

/// Channel order of the 63-channel extended 10-20 montage (reference FCz
/// removed), front to back.
pub fn default_montage_63() -> Vec<String> {
    [
        "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "Fz", "F2", "F4",
        "F6", "F8", "FT9", "FT7", "FC5", "FC3", "FC1", "FC2", "FC4", "FC6", "FT8", "FT10", "T7",
        "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "TP9", "TP7", "CP5", "CP3", "CP1", "CPz",
        "CP2", "CP4", "CP6", "TP8", "TP10", "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
        "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Region name → channel names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroupMap {
    groups: BTreeMap<String, Vec<String>>,
    allow_overlap: bool,
}

impl ChannelGroupMap {
    /// Parses `region = ch, ch, ...` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = BTreeMap::new();
        let mut allow_overlap = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("channel map line {}: expected `region = channels`", lineno + 1))
            })?;
            let key = key.trim();
            if key == OVERLAP_KEY {
                allow_overlap = match value.trim() {
                    "true" | "yes" => true,
                    "false" | "no" => false,
                    other => return Err(Error::Format(format!("bad {OVERLAP_KEY} value {other:?}"))),
                };
                continue;
            }
            let channels: Vec<String> = value
                .split(',')
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty())
                .collect();
            if channels.is_empty() {
                return Err(Error::Format(format!("region {key:?} lists no channels")));
            }
            if groups.insert(key.to_string(), channels).is_some() {
                return Err(Error::Format(format!("region {key:?} defined twice")));
            }
        }
        let map = Self { groups, allow_overlap };
        if !map.allow_overlap {
            let mut seen = BTreeMap::new();
            for (region, chans) in &map.groups {
                for ch in chans {
                    if let Some(prev) = seen.insert(ch.clone(), region.clone()) {
                        if &prev != region {
                            return Err(Error::Format(format!(
                                "channel {ch} is in both {prev} and {region} but overlap is not declared"
                            )));
                        }
                    }
                }
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::parse(&text)
    }

    pub fn default_63() -> Self {
        Self::parse(DEFAULT_GROUP_MAP_63).expect("shipped channel map parses")
    }

    pub fn regions(&self) -> impl Iterator<Item = &String> {
        self.groups.keys()
    }

    pub fn group(&self, region: &str) -> Option<&[String]> {
        self.groups.get(region).map(|v| v.as_slice())
    }

    pub fn allows_overlap(&self) -> bool {
        self.allow_overlap
    }

    /// Every listed channel must exist in `channel_names`.
    pub fn validate_against(&self, channel_names: &[String]) -> Result<()> {
        let known: BTreeSet<&str> = channel_names.iter().map(|s| s.as_str()).collect();
        for (region, chans) in &self.groups {
            for ch in chans {
                if !known.contains(ch.as_str()) {
                    return Err(Error::Config(format!(
                        "region {region} lists channel {ch} absent from the montage"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Indices into `channel_names` of the union of `regions`, in montage order.
    pub fn select_indices(&self, regions: &[String], channel_names: &[String]) -> Result<Vec<usize>> {
        let mut wanted = BTreeSet::new();
        for r in regions {
            let chans = self
                .groups
                .get(r)
                .ok_or_else(|| Error::Config(format!("unknown region {r:?}")))?;
            wanted.extend(chans.iter().map(|s| s.as_str()));
        }
        self.validate_against(channel_names)?;
        let idx: Vec<usize> = channel_names
            .iter()
            .enumerate()
            .filter(|(_, n)| wanted.contains(n.as_str()))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::EmptySelection);
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_partitions_the_montage() {
        let map = ChannelGroupMap::default_63();
        let montage = default_montage_63();
        assert_eq!(montage.len(), 63);
        map.validate_against(&montage).unwrap();
        let total: usize = map.regions().map(|r| map.group(r).unwrap().len()).sum();
        assert_eq!(total, 63);
        assert_eq!(map.group("occipital").unwrap().len(), 17);
    }

    #[test]
    fn undeclared_overlap_is_rejected() {
        assert!(ChannelGroupMap::parse("a = X, Y\nb = Y").is_err());
        let m = ChannelGroupMap::parse("allow_overlap = true\na = X, Y\nb = Y").unwrap();
        assert!(m.allows_overlap());
    }

    #[test]
    fn unknown_region_is_config_error() {
        let map = ChannelGroupMap::default_63();
        let err = map
            .select_indices(&["limbic".to_string()], &default_montage_63())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
