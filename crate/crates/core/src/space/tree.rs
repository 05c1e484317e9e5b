use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use super::domain::{Domain, DomainKind, Value};

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("malformed spec document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("{path}: unknown node tag {tag:?}")]
    UnknownTag { path: String, tag: String },
    #[error("{path}: {reason}")]
    Domain { path: String, reason: String },
    #[error("{path}: duplicate sibling name {name:?}")]
    DuplicateName { path: String, name: String },
    #[error("{path}: {reason}")]
    Structure { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Group,
    Exclusive,
    Optional,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecNode {
    Internal { name: String, tag: Tag, children: Vec<SpecNode> },
    Leaf { name: String, domain: Domain },
}

impl SpecNode {
    pub fn name(&self) -> &str {
        match self {
            SpecNode::Internal { name, .. } | SpecNode::Leaf { name, .. } => name,
        }
    }

    fn leaf_count(&self) -> usize {
        match self {
            SpecNode::Leaf { .. } => 1,
            SpecNode::Internal { children, .. } => children.iter().map(SpecNode::leaf_count).sum(),
        }
    }
}

/// A validated, tagged search-space tree. Leaf domains carry their full path as id.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecTree {
    pub root: SpecNode,
}

/// One disjoint model produced by [`SpecTree::split`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpace {
    pub model_id: String,
    pub domains: Vec<Domain>,
}

/// A sampled hyperparameter vector for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub model_id: String,
    pub values: BTreeMap<String, Value>,
}

impl ModelSpace {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        let values = self.domains.iter().map(|d| (d.id.clone(), d.sample(rng))).collect();
        Assignment { model_id: self.model_id.clone(), values }
    }

    /// Checks that `values` has exactly this model's keys, each inside its domain.
    pub fn check_values(&self, values: &BTreeMap<String, Value>) -> Result<(), String> {
        if values.len() != self.domains.len() {
            return Err(format!(
                "expected {} values for model {}, got {}",
                self.domains.len(),
                self.model_id,
                values.len()
            ));
        }
        for d in &self.domains {
            match values.get(&d.id) {
                None => return Err(format!("missing value for {}", d.id)),
                Some(v) if !d.contains(v) => {
                    return Err(format!("value {v} outside domain of {}", d.id))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

impl SpecTree {
    pub fn parse(document: &str) -> Result<Self, SpecError> {
        let json: Json = serde_json::from_str(document)?;
        let root = match &json {
            Json::Object(obj) if obj.contains_key("leaf") => {
                // A bare leaf is wrapped in an implicit root group.
                let leaf = parse_node(&json, "root")?;
                SpecNode::Internal { name: "root".into(), tag: Tag::Group, children: vec![leaf] }
            }
            _ => parse_node(&json, "")?,
        };
        Ok(Self { root })
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaf_count()
    }

    /// All leaf domains in tree order.
    pub fn leaves(&self) -> Vec<&Domain> {
        fn walk<'a>(n: &'a SpecNode, out: &mut Vec<&'a Domain>) {
            match n {
                SpecNode::Leaf { domain, .. } => out.push(domain),
                SpecNode::Internal { children, .. } => children.iter().for_each(|c| walk(c, out)),
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Splits the tree into its disjoint model spaces.
    ///
    /// Every exclusive node keeps exactly one child and every optional node is
    /// either kept whole or dropped; nested tags only branch when their
    /// ancestor branch is present. The result is ordered by choice vector,
    /// with "included" sorting before "excluded".
    pub fn split(&self) -> Vec<ModelSpace> {
        expand(&self.root)
            .into_iter()
            .map(|v| {
                let model_id = if v.tokens.is_empty() {
                    self.root.name().to_string()
                } else {
                    v.tokens.join("/")
                };
                ModelSpace { model_id, domains: v.domains }
            })
            .collect()
    }
}

#[derive(Clone, Default)]
struct Variant {
    tokens: Vec<String>,
    domains: Vec<Domain>,
}

fn product(children: &[SpecNode]) -> Vec<Variant> {
    let mut acc = vec![Variant::default()];
    for child in children {
        let options = expand(child);
        let mut next = Vec::with_capacity(acc.len() * options.len());
        for prefix in &acc {
            for opt in &options {
                let mut v = prefix.clone();
                v.tokens.extend(opt.tokens.iter().cloned());
                v.domains.extend(opt.domains.iter().cloned());
                next.push(v);
            }
        }
        acc = next;
    }
    acc
}

fn expand(node: &SpecNode) -> Vec<Variant> {
    match node {
        SpecNode::Leaf { domain, .. } => {
            vec![Variant { tokens: vec![], domains: vec![domain.clone()] }]
        }
        SpecNode::Internal { tag: Tag::Group, children, .. } => product(children),
        SpecNode::Internal { name, tag: Tag::Exclusive, children } => children
            .iter()
            .flat_map(|child| {
                expand(child).into_iter().map(move |mut v| {
                    v.tokens.insert(0, format!("{name}={}", child.name()));
                    v
                })
            })
            .collect(),
        SpecNode::Internal { name, tag: Tag::Optional, children } => {
            let mut out: Vec<Variant> = product(children)
                .into_iter()
                .map(|mut v| {
                    v.tokens.insert(0, format!("{name}=included"));
                    v
                })
                .collect();
            out.push(Variant { tokens: vec![format!("{name}=excluded")], domains: vec![] });
            out
        }
    }
}

fn join(parent: &str, name: &str) -> String {
    if parent.is_empty() {
        name.to_string()
    } else {
        format!("{parent}/{name}")
    }
}

fn field<'a>(obj: &'a Map<String, Json>, key: &str, path: &str) -> Result<&'a Json, SpecError> {
    obj.get(key).ok_or_else(|| SpecError::Structure {
        path: path.to_string(),
        reason: format!("missing field {key:?}"),
    })
}

fn name_of(obj: &Map<String, Json>, key: &str, parent: &str) -> Result<String, SpecError> {
    let path = if parent.is_empty() { "<root>" } else { parent };
    match field(obj, key, path)? {
        Json::String(s) if !s.is_empty() && !s.contains('/') => Ok(s.clone()),
        other => Err(SpecError::Structure {
            path: path.to_string(),
            reason: format!("{key:?} must be a non-empty string without '/', got {other}"),
        }),
    }
}

fn parse_node(json: &Json, parent: &str) -> Result<SpecNode, SpecError> {
    let here = if parent.is_empty() { "<root>" } else { parent };
    let obj = json.as_object().ok_or_else(|| SpecError::Structure {
        path: here.to_string(),
        reason: format!("expected an object, got {json}"),
    })?;

    if obj.contains_key("leaf") {
        let name = name_of(obj, "leaf", parent)?;
        let path = join(parent, &name);
        let kind: DomainKind = serde_json::from_value(field(obj, "domain", &path)?.clone())
            .map_err(|e| SpecError::Domain { path: path.clone(), reason: e.to_string() })?;
        kind.validate().map_err(|reason| SpecError::Domain { path: path.clone(), reason })?;
        return Ok(SpecNode::Leaf { name, domain: Domain::new(path, kind) });
    }

    let name = name_of(obj, "node", parent)?;
    let path = join(parent, &name);
    let tag = match field(obj, "tag", &path)? {
        Json::String(t) => match t.as_str() {
            "group" => Tag::Group,
            "exclusive" => Tag::Exclusive,
            "optional" => Tag::Optional,
            other => return Err(SpecError::UnknownTag { path, tag: other.to_string() }),
        },
        other => return Err(SpecError::UnknownTag { path, tag: other.to_string() }),
    };
    let raw_children = match field(obj, "children", &path)? {
        Json::Array(items) => items,
        other => {
            return Err(SpecError::Structure {
                path,
                reason: format!("\"children\" must be an array, got {other}"),
            })
        }
    };
    if tag != Tag::Group && raw_children.is_empty() {
        return Err(SpecError::Structure {
            path,
            reason: format!("{tag:?} node needs at least one child").to_lowercase(),
        });
    }
    let mut children: Vec<SpecNode> = Vec::with_capacity(raw_children.len());
    for raw in raw_children {
        let child = parse_node(raw, &path)?;
        if children.iter().any(|c| c.name() == child.name()) {
            return Err(SpecError::DuplicateName { path, name: child.name().to_string() });
        }
        children.push(child);
    }
    Ok(SpecNode::Internal { name, tag, children })
}
