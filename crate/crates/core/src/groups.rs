//! Dangerous-permission groups and corpus partitioning.
//!
//! An app belongs to every group whose permission list intersects its
//! requested permissions. Apps matching no dangerous group belong to
//! [`GroupId::Others`] alone. `Sensors` is defined but only assigned when
//! explicitly enabled.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::manifest::PermissionSet;

/// The built-in mapping file.
pub const DEFAULT_MAPPING: &str = include_str!("../data/permission_groups.txt");
/// The API level 26 dangerous-permission list: the default mapping plus
/// READ_PHONE_NUMBERS, ANSWER_PHONE_CALLS and WRITE_CALL_LOG under Phone.
pub const PLATFORM_MAPPING: &str = include_str!("../data/permission_groups_platform.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    Calendar,
    Camera,
    Contacts,
    Location,
    Microphone,
    Phone,
    Sensors,
    Sms,
    Storage,
    Others,
}

impl GroupId {
    pub const ALL: [GroupId; 10] = [
        GroupId::Calendar,
        GroupId::Camera,
        GroupId::Contacts,
        GroupId::Location,
        GroupId::Microphone,
        GroupId::Phone,
        GroupId::Sensors,
        GroupId::Sms,
        GroupId::Storage,
        GroupId::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupId::Calendar => "Calendar",
            GroupId::Camera => "Camera",
            GroupId::Contacts => "Contacts",
            GroupId::Location => "Location",
            GroupId::Microphone => "Microphone",
            GroupId::Phone => "Phone",
            GroupId::Sensors => "Sensors",
            GroupId::Sms => "SMS",
            GroupId::Storage => "Storage",
            GroupId::Others => "Others",
        }
    }

    pub fn is_dangerous(self) -> bool {
        self != GroupId::Others
    }

    /// The groups a default pipeline runs over: everything except Sensors
    /// unless `include_sensors` is set.
    pub fn pipeline_groups(include_sensors: bool) -> Vec<GroupId> {
        GroupId::ALL
            .into_iter()
            .filter(|g| include_sensors || *g != GroupId::Sensors)
            .collect()
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("mapping line {line}: {msg}")]
    Mapping { line: usize, msg: String },
    #[error("duplicate app id {0:?}")]
    DuplicateAppId(String),
    #[error("assignment for {0:?} is empty or mixes Others with dangerous groups")]
    InvalidAssignment(String),
}

impl FromStr for GroupId {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupId::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GroupError::UnknownGroup(s.to_string()))
    }
}

/// Group → permission table, loaded from the line-oriented mapping format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMapping {
    version: u32,
    groups: BTreeMap<GroupId, Vec<String>>,
    index: HashMap<String, GroupId>,
}

impl Default for GroupMapping {
    fn default() -> Self {
        GroupMapping::parse(DEFAULT_MAPPING).expect("built-in mapping is valid")
    }
}

impl GroupMapping {
    pub fn platform() -> Self {
        GroupMapping::parse(PLATFORM_MAPPING).expect("built-in mapping is valid")
    }

    pub fn parse(text: &str) -> Result<Self, GroupError> {
        let mut version = None;
        let mut current: Option<GroupId> = None;
        let mut groups: BTreeMap<GroupId, Vec<String>> = BTreeMap::new();
        let mut index = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| GroupError::Mapping { line: line_no, msg };
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| err(format!("bad version {v:?}")))?,
                );
            } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let group: GroupId = name.parse()?;
                if group == GroupId::Others {
                    return Err(err(
                        "Others is the fallback group and takes no permissions".into()
                    ));
                }
                groups.entry(group).or_default();
                current = Some(group);
            } else {
                let group =
                    current.ok_or_else(|| err("permission before any group heading".into()))?;
                if let Some(prev) = index.insert(line.to_string(), group) {
                    return Err(err(format!("{line} already listed under {prev}")));
                }
                groups.entry(group).or_default().push(line.to_string());
            }
        }
        let version = version.ok_or(GroupError::Mapping {
            line: 0,
            msg: "missing version line".into(),
        })?;
        Ok(Self {
            version,
            groups,
            index,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("version {}\n", self.version);
        for (group, perms) in &self.groups {
            s.push_str(&format!("\n[{group}]\n"));
            for p in perms {
                s.push_str(p);
                s.push('\n');
            }
        }
        s
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn group_of(&self, permission: &str) -> Option<GroupId> {
        self.index.get(permission).copied()
    }

    pub fn permissions(&self, group: GroupId) -> &[String] {
        self.groups.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every mapped permission with its group.
    pub fn entries(&self) -> impl Iterator<Item = (&str, GroupId)> {
        self.groups
            .iter()
            .flat_map(|(g, perms)| perms.iter().map(move |p| (p.as_str(), *g)))
    }
}

/// Stateless group assignment over a fixed mapping.
#[derive(Debug, Clone, Default)]
pub struct Grouper {
    pub mapping: GroupMapping,
    pub include_sensors: bool,
}

impl Grouper {
    pub fn new(mapping: GroupMapping, include_sensors: bool) -> Self {
        Self {
            mapping,
            include_sensors,
        }
    }

    pub fn assign_groups(&self, perms: &PermissionSet) -> BTreeSet<GroupId> {
        let mut groups: BTreeSet<GroupId> = perms
            .iter()
            .filter_map(|p| self.mapping.group_of(p))
            .filter(|g| self.include_sensors || *g != GroupId::Sensors)
            .collect();
        if groups.is_empty() {
            groups.insert(GroupId::Others);
        }
        groups
    }

    pub fn assignment(&self, app_id: &str, perms: &PermissionSet) -> GroupAssignment {
        GroupAssignment {
            app_id: app_id.to_string(),
            groups: self.assign_groups(perms),
        }
    }
}

/// Assignment with the default mapping and Sensors excluded.
pub fn assign_groups(perms: &PermissionSet) -> BTreeSet<GroupId> {
    use std::sync::OnceLock;
    static DEFAULT: OnceLock<Grouper> = OnceLock::new();
    DEFAULT.get_or_init(Grouper::default).assign_groups(perms)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub app_id: String,
    pub groups: BTreeSet<GroupId>,
}

impl GroupAssignment {
    pub fn new(app_id: impl Into<String>, groups: BTreeSet<GroupId>) -> Result<Self, GroupError> {
        let app_id = app_id.into();
        let mixed = groups.contains(&GroupId::Others) && groups.len() > 1;
        if groups.is_empty() || mixed {
            return Err(GroupError::InvalidAssignment(app_id));
        }
        Ok(Self { app_id, groups })
    }
}

/// Buckets app ids by group, preserving input order inside each bucket.
/// Every group has a bucket, possibly empty.
pub fn partition_corpus(
    assignments: &[GroupAssignment],
) -> Result<BTreeMap<GroupId, Vec<String>>, GroupError> {
    let mut seen = HashSet::new();
    let mut buckets: BTreeMap<GroupId, Vec<String>> =
        GroupId::ALL.into_iter().map(|g| (g, Vec::new())).collect();
    for a in assignments {
        if !seen.insert(a.app_id.as_str()) {
            return Err(GroupError::DuplicateAppId(a.app_id.clone()));
        }
        for g in &a.groups {
            buckets.entry(*g).or_default().push(a.app_id.clone());
        }
    }
    Ok(buckets)
}
