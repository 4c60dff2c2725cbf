use serde::{Deserialize, Serialize};

use crate::metastore::ChangeType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptionKind {
    PropagateAdd,
    Ignore,
    MapWithDefault,
    DropTarget,
    RenameConfirm,
    TypeWiden,
    NewDimension,
}

impl OptionKind {
    pub const ALL: [OptionKind; 7] = [
        OptionKind::PropagateAdd,
        OptionKind::Ignore,
        OptionKind::MapWithDefault,
        OptionKind::DropTarget,
        OptionKind::RenameConfirm,
        OptionKind::TypeWiden,
        OptionKind::NewDimension,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptionKind::PropagateAdd => "PROPAGATE_ADD",
            OptionKind::Ignore => "IGNORE",
            OptionKind::MapWithDefault => "MAP_WITH_DEFAULT",
            OptionKind::DropTarget => "DROP_TARGET",
            OptionKind::RenameConfirm => "RENAME_CONFIRM",
            OptionKind::TypeWiden => "TYPE_WIDEN",
            OptionKind::NewDimension => "NEW_DIMENSION",
        }
    }

    /// Whether this kind may answer a change of type `ct`.
    pub fn compatible_with(self, ct: ChangeType) -> bool {
        use ChangeType::*;
        use OptionKind::*;
        match self {
            PropagateAdd | NewDimension => matches!(ct, AttributeAdded | DatasetAdded),
            Ignore => !matches!(ct, RenameCandidate),
            MapWithDefault | DropTarget => matches!(ct, AttributeRemoved | DatasetRemoved),
            RenameConfirm => ct == RenameCandidate,
            TypeWiden => ct == AttributeTypeChanged,
        }
    }
}

impl std::fmt::Display for OptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        OptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::Error::InvalidParameter(format!("unknown option kind {s:?}")))
    }
}

/// Built-in rule table used when no enabled rule is registered.
pub fn default_option_kinds(ct: ChangeType) -> Vec<OptionKind> {
    use ChangeType::*;
    use OptionKind::*;
    match ct {
        AttributeAdded => vec![PropagateAdd, Ignore, NewDimension],
        AttributeRemoved => vec![MapWithDefault, DropTarget, Ignore],
        AttributeTypeChanged => vec![TypeWiden, Ignore],
        RenameCandidate => vec![RenameConfirm],
        DatasetAdded => vec![Ignore],
        DatasetRemoved => vec![DropTarget, Ignore],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_respect_compatibility() {
        for ct in ChangeType::ALL {
            let kinds = default_option_kinds(ct);
            assert!(!kinds.is_empty());
            assert!(kinds.iter().all(|k| k.compatible_with(ct)), "{ct:?}");
        }
    }

    #[test]
    fn compatibility_table() {
        assert!(OptionKind::NewDimension.compatible_with(ChangeType::DatasetAdded));
        assert!(!OptionKind::TypeWiden.compatible_with(ChangeType::AttributeAdded));
        assert!(!OptionKind::Ignore.compatible_with(ChangeType::RenameCandidate));
        assert!(OptionKind::DropTarget.compatible_with(ChangeType::DatasetRemoved));
    }
}
