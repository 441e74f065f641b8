//! Requested-permission extraction from `AndroidManifest.xml`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use crate::axml::{encode_manifest, parse_axml, AxmlError};

pub const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

/// Elements whose `android:name` is a requested permission.
pub const PERMISSION_ELEMENTS: &[&str] = &[
    "uses-permission",
    "uses-permission-sdk-23",
    "uses-permission-sdk-m",
];

/// Requested permissions of one app: trimmed, case-preserved, de-duplicated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PermissionSet(BTreeSet<String>);

impl PermissionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a permission; blank names are dropped.
    pub fn insert(&mut self, name: &str) -> bool {
        let name = name.trim();
        if name.is_empty() {
            return false;
        }
        self.0.insert(name.to_string())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    /// Comma-joined form used in corpus files; `-` for the empty set.
    pub fn to_field(&self) -> String {
        if self.0.is_empty() {
            "-".to_string()
        } else {
            self.0.iter().cloned().collect::<Vec<_>>().join(",")
        }
    }

    pub fn from_field(field: &str) -> Self {
        if field.trim() == "-" {
            return Self::new();
        }
        field.split(',').collect()
    }
}

impl<S: AsRef<str>> FromIterator<S> for PermissionSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut set = PermissionSet::new();
        for p in iter {
            set.insert(p.as_ref());
        }
        set
    }
}

impl fmt::Display for PermissionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_field())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed XML: {0}")]
pub struct MalformedXml(pub String);

/// Parses a plain-text manifest.
///
/// The `name` attribute is matched by local name, so manifests that bind the
/// Android namespace under an unusual prefix or spelling still resolve.
pub fn parse_manifest_text(text: &str) -> Result<PermissionSet, MalformedXml> {
    let doc = roxmltree::Document::parse(text).map_err(|e| MalformedXml(e.to_string()))?;
    let mut set = PermissionSet::new();
    for node in doc.descendants().filter(|n| n.is_element()) {
        if !PERMISSION_ELEMENTS.contains(&node.tag_name().name()) {
            continue;
        }
        let name = node
            .attributes()
            .find(|a| a.name() == "name" && a.namespace() == Some(ANDROID_NS))
            .or_else(|| node.attributes().find(|a| a.name() == "name"));
        if let Some(attr) = name {
            set.insert(attr.value());
        }
    }
    Ok(set)
}

/// Renders a text manifest requesting `perms`, in set order.
pub fn render_manifest_text(package: &str, perms: &PermissionSet) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    s.push_str(&format!(
        "<manifest xmlns:android=\"{ANDROID_NS}\"\n    package=\"{package}\">\n"
    ));
    for p in perms.iter() {
        s.push_str(&format!("    <uses-permission android:name=\"{p}\" />\n"));
    }
    s.push_str("    <application android:label=\"app\" />\n</manifest>\n");
    s
}

/// Dispatches on the first bytes: binary XML chunk header or text.
pub fn parse_manifest_bytes(bytes: &[u8]) -> Result<PermissionSet, ManifestError> {
    if crate::axml::looks_binary(bytes) {
        Ok(parse_axml(bytes)?)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| ManifestError::Xml(MalformedXml(e.to_string())))?;
        Ok(parse_manifest_text(text)?)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error(transparent)]
    Axml(#[from] AxmlError),
    #[error(transparent)]
    Xml(#[from] MalformedXml),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_phone_listing() {
        let text = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android"
    package="com.android.app.callApp">
    <uses-permission android:name="android.permission.CALL_PHONE" />
</manifest>"#;
        let set = parse_manifest_text(text).unwrap();
        assert_eq!(
            set,
            PermissionSet::from_iter(["android.permission.CALL_PHONE"])
        );
    }

    #[test]
    fn capitalised_namespace_still_resolves() {
        let text = r#"<manifest xmlns:Android="http://schemas.Android.com/apk/res/Android" package="x">
  <uses-permission Android:name="android.permission.CALL_PHONE"/></manifest>"#;
        assert!(parse_manifest_text(text)
            .unwrap()
            .contains("android.permission.CALL_PHONE"));
    }

    #[test]
    fn empty_and_duplicate() {
        assert!(parse_manifest_text("<manifest/>").unwrap().is_empty());
        let dup = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android">
<uses-permission android:name="android.permission.SEND_SMS"/>
<uses-permission android:name=" android.permission.SEND_SMS "/>
<uses-permission-sdk-23 android:name="android.permission.CAMERA"/>
</manifest>"#;
        let set = parse_manifest_text(dup).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn malformed_text() {
        assert!(parse_manifest_text("<manifest>").is_err());
    }

    #[test]
    fn field_form() {
        let set: PermissionSet = ["b", "a", "a"].into_iter().collect();
        assert_eq!(set.to_field(), "a,b");
        assert_eq!(PermissionSet::from_field("a,b"), set);
        assert_eq!(PermissionSet::from_field("-"), PermissionSet::new());
        assert_eq!(PermissionSet::new().to_field(), "-");
    }
}
