//! Body-region taxonomy and per-modality class sets.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Anatomical body region.
///
/// Declaration order is the canonical class order used for probability
/// vectors and score files. `AbdomenChest` is an internal training class for
/// slices straddling the diaphragm and is always merged away before output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodyRegion {
    Abdomen,
    Breast,
    Calf,
    Chest,
    Elbow,
    Foot,
    Forearm,
    Hand,
    Head,
    Arm,
    Knee,
    Neck,
    Pelvis,
    Shoulder,
    CervicalSpine,
    ThoracicSpine,
    LumbarSpine,
    Thigh,
    AbdomenChest,
}

impl BodyRegion {
    pub const ALL: [BodyRegion; 19] = [
        BodyRegion::Abdomen,
        BodyRegion::Breast,
        BodyRegion::Calf,
        BodyRegion::Chest,
        BodyRegion::Elbow,
        BodyRegion::Foot,
        BodyRegion::Forearm,
        BodyRegion::Hand,
        BodyRegion::Head,
        BodyRegion::Arm,
        BodyRegion::Knee,
        BodyRegion::Neck,
        BodyRegion::Pelvis,
        BodyRegion::Shoulder,
        BodyRegion::CervicalSpine,
        BodyRegion::ThoracicSpine,
        BodyRegion::LumbarSpine,
        BodyRegion::Thigh,
        BodyRegion::AbdomenChest,
    ];

    /// The 18 regions that may appear in final output.
    pub fn output_regions() -> impl Iterator<Item = BodyRegion> {
        Self::ALL.into_iter().filter(|r| *r != BodyRegion::AbdomenChest)
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyRegion::Abdomen => "Abdomen",
            BodyRegion::Breast => "Breast",
            BodyRegion::Calf => "Calf",
            BodyRegion::Chest => "Chest",
            BodyRegion::Elbow => "Elbow",
            BodyRegion::Foot => "Foot",
            BodyRegion::Forearm => "Forearm",
            BodyRegion::Hand => "Hand",
            BodyRegion::Head => "Head",
            BodyRegion::Arm => "Arm",
            BodyRegion::Knee => "Knee",
            BodyRegion::Neck => "Neck",
            BodyRegion::Pelvis => "Pelvis",
            BodyRegion::Shoulder => "Shoulder",
            BodyRegion::CervicalSpine => "CervicalSpine",
            BodyRegion::ThoracicSpine => "ThoracicSpine",
            BodyRegion::LumbarSpine => "LumbarSpine",
            BodyRegion::Thigh => "Thigh",
            BodyRegion::AbdomenChest => "AbdomenChest",
        }
    }

    /// Human-readable label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            BodyRegion::CervicalSpine => "Cervical spine",
            BodyRegion::ThoracicSpine => "Thoracic spine",
            BodyRegion::LumbarSpine => "Lumbar spine",
            BodyRegion::AbdomenChest => "Abdomen-chest",
            other => other.name(),
        }
    }

    /// DICOM BodyPartExamined defined term for the region.
    pub fn dicom_body_part(self) -> &'static str {
        match self {
            BodyRegion::Abdomen => "ABDOMEN",
            BodyRegion::Breast => "BREAST",
            BodyRegion::Calf => "LEG",
            BodyRegion::Chest => "CHEST",
            BodyRegion::Elbow => "ELBOW",
            BodyRegion::Foot => "FOOT",
            BodyRegion::Forearm => "FOREARM",
            BodyRegion::Hand => "HAND",
            BodyRegion::Head => "HEAD",
            BodyRegion::Arm => "ARM",
            BodyRegion::Knee => "KNEE",
            BodyRegion::Neck => "NECK",
            BodyRegion::Pelvis => "PELVIS",
            BodyRegion::Shoulder => "SHOULDER",
            BodyRegion::CervicalSpine => "CSPINE",
            BodyRegion::ThoracicSpine => "TSPINE",
            BodyRegion::LumbarSpine => "LSPINE",
            BodyRegion::Thigh => "THIGH",
            BodyRegion::AbdomenChest => "CHESTABDOMEN",
        }
    }

    pub fn canonical_index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BodyRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown body region `{0}`")]
pub struct UnknownRegion(pub String);

impl FromStr for BodyRegion {
    type Err = UnknownRegion;

    /// Accepts canonical names case-insensitively, ignoring spaces, `_` and `-`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        BodyRegion::ALL
            .into_iter()
            .find(|r| r.name().to_lowercase() == key)
            .ok_or_else(|| UnknownRegion(s.to_string()))
    }
}

/// Imaging modality as recorded in (0008,0060).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Modality {
    Ct,
    Mr,
    Other(String),
}

impl Modality {
    pub fn as_str(&self) -> &str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
            Modality::Other(s) => s,
        }
    }
}

impl From<String> for Modality {
    fn from(s: String) -> Self {
        match s.trim().to_ascii_uppercase().as_str() {
            "CT" => Modality::Ct,
            "MR" | "MRI" => Modality::Mr,
            _ => Modality::Other(s.trim().to_string()),
        }
    }
}

impl From<&str> for Modality {
    fn from(s: &str) -> Self {
        Modality::from(s.to_string())
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> Self {
        m.as_str().to_string()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered set of classes a probability vector is defined over.
///
/// Cheap to clone; predictions for a whole series share one allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet(Arc<[BodyRegion]>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassSetError {
    #[error("class set is empty")]
    Empty,
    #[error("class {0} listed more than once")]
    Duplicate(BodyRegion),
    #[error("classes are not in canonical order at {0}")]
    NotCanonical(BodyRegion),
}

impl ClassSet {
    /// Builds a class set; classes must be distinct and in canonical order.
    pub fn new(regions: Vec<BodyRegion>) -> Result<Self, ClassSetError> {
        if regions.is_empty() {
            return Err(ClassSetError::Empty);
        }
        for pair in regions.windows(2) {
            if pair[0] == pair[1] {
                return Err(ClassSetError::Duplicate(pair[1]));
            }
            if pair[0] > pair[1] {
                return Err(ClassSetError::NotCanonical(pair[1]));
            }
        }
        Ok(ClassSet(regions.into()))
    }

    /// Internal (pre-merge) class set of the trained network for a modality:
    /// CT drops Breast, both keep AbdomenChest.
    pub fn internal(modality: &Modality) -> Self {
        let regions: Vec<BodyRegion> = BodyRegion::ALL
            .into_iter()
            .filter(|r| *modality != Modality::Ct || *r != BodyRegion::Breast)
            .collect();
        ClassSet(regions.into())
    }

    /// Output class set for a modality (internal set minus AbdomenChest).
    pub fn output(modality: &Modality) -> Self {
        let regions: Vec<BodyRegion> = Self::internal(modality)
            .iter()
            .filter(|r| *r != BodyRegion::AbdomenChest)
            .collect();
        ClassSet(regions.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<BodyRegion> {
        self.0.get(index).copied()
    }

    pub fn index_of(&self, region: BodyRegion) -> Option<usize> {
        self.0.binary_search(&region).ok()
    }

    pub fn contains(&self, region: BodyRegion) -> bool {
        self.index_of(region).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = BodyRegion> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[BodyRegion] {
        &self.0
    }

    pub fn names(&self) -> Vec<String> {
        self.iter().map(|r| r.name().to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ct_set_excludes_breast() {
        let ct = ClassSet::internal(&Modality::Ct);
        assert_eq!(ct.len(), 18);
        assert!(!ct.contains(BodyRegion::Breast));
        assert!(ct.contains(BodyRegion::AbdomenChest));
        assert_eq!(ClassSet::output(&Modality::Ct).len(), 17);
        assert_eq!(ClassSet::output(&Modality::Mr).len(), 18);
        assert_eq!(ClassSet::internal(&Modality::Mr).len(), 19);
    }

    #[test]
    fn canonical_order_ends_with_abdomen_chest() {
        assert_eq!(BodyRegion::ALL[18], BodyRegion::AbdomenChest);
        for (i, r) in BodyRegion::ALL.iter().enumerate() {
            assert_eq!(r.canonical_index(), i);
        }
    }

    #[test]
    fn parse_region_names() {
        assert_eq!("cervical spine".parse::<BodyRegion>().unwrap(), BodyRegion::CervicalSpine);
        assert_eq!("KNEE".parse::<BodyRegion>().unwrap(), BodyRegion::Knee);
        assert_eq!("Abdomen_Chest".parse::<BodyRegion>().unwrap(), BodyRegion::AbdomenChest);
        assert!("spleen".parse::<BodyRegion>().is_err());
    }

    #[test]
    fn class_set_rejects_bad_order() {
        assert_eq!(
            ClassSet::new(vec![BodyRegion::Knee, BodyRegion::Abdomen]),
            Err(ClassSetError::NotCanonical(BodyRegion::Abdomen))
        );
        assert_eq!(
            ClassSet::new(vec![BodyRegion::Knee, BodyRegion::Knee]),
            Err(ClassSetError::Duplicate(BodyRegion::Knee))
        );
        assert_eq!(ClassSet::new(vec![]), Err(ClassSetError::Empty));
    }

    #[test]
    fn modality_parse() {
        assert_eq!(Modality::from("ct"), Modality::Ct);
        assert_eq!(Modality::from("MR"), Modality::Mr);
        assert_eq!(Modality::from("US"), Modality::Other("US".into()));
    }
}
