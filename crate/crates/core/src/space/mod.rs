//! Hyperparameter domains, the tagged specification tree and its split into
//! disjoint model spaces.
//!
//! A specification document is a JSON tree. Internal nodes look like
//! `{"node": name, "tag": "group"|"exclusive"|"optional", "children": [...]}`
//! and leaves like `{"leaf": name, "domain": {"kind": ..., ...}}`.

mod domain;
mod tree;

pub use domain::{Domain, DomainKind, Value};
pub use tree::{Assignment, ModelSpace, SpecError, SpecNode, SpecTree, Tag};

/// Parses and validates a specification document.
pub fn parse_spec(document: &str) -> Result<SpecTree, SpecError> {
    SpecTree::parse(document)
}

/// Reads and parses a specification file.
pub fn load_spec(path: &std::path::Path) -> Result<SpecTree, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|e| SpecError::Structure {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    SpecTree::parse(&text)
}
