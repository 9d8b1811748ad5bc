//! String identifiers used across the service.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Returns true when `s` is a usable identifier: non-empty, at most 128 bytes,
/// ASCII alphanumerics plus `_`, `-` and `.`, not starting with `.`.
pub fn is_valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && !s.starts_with('.')
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            pub fn is_valid(&self) -> bool {
                is_valid_identifier(&self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a registered dataset (confidential file plus its synthetic twin).
    DatasetId
);
string_id!(
    /// Identifier of a research project.
    ProjectId
);
string_id!(
    /// Identifier of a proposal; stable across revisions.
    ProposalId
);
string_id!(
    /// Identifier of a query within a proposal.
    QueryId
);
