//! Attribute preprocessing: one-hot expansion and semantic identities.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Flavor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Binary,
    /// Categorical column with the given number of values.
    Categorical(u32),
}

impl ColumnKind {
    fn width(self) -> usize {
        match self {
            ColumnKind::Binary => 1,
            ColumnKind::Categorical(k) => k as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl AttributeSchema {
    pub fn expanded_len(&self) -> usize {
        self.columns.iter().map(|(_, k)| k.width()).sum()
    }

    /// Names of the expanded coordinates; categorical columns become `name=value`.
    pub fn expanded_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .flat_map(|(name, kind)| match kind {
                ColumnKind::Binary => vec![name.clone()],
                ColumnKind::Categorical(k) => (0..*k).map(|v| format!("{name}={v}")).collect(),
            })
            .collect()
    }
}

/// Expands raw rows column by column: binary columns pass through, a
/// categorical column of arity `k` becomes `k` indicator coordinates.
pub fn one_hot_expand(raw: &[Vec<u32>], schema: &AttributeSchema) -> Result<Vec<Vec<u8>>> {
    raw.iter()
        .enumerate()
        .map(|(row, values)| {
            if values.len() != schema.columns.len() {
                return Err(Error::Schema(format!(
                    "row {row} has {} columns, schema declares {}",
                    values.len(),
                    schema.columns.len()
                )));
            }
            let mut out = Vec::with_capacity(schema.expanded_len());
            for (&v, (name, kind)) in values.iter().zip(&schema.columns) {
                match *kind {
                    ColumnKind::Binary if v <= 1 => out.push(v as u8),
                    ColumnKind::Categorical(k) if v < k => {
                        out.extend((0..k).map(|i| u8::from(i == v)));
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "row {row}, column {name}: value {v} outside declared arity {}",
                            kind.width().max(2)
                        )))
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Gives every image a semantic identity: images with equal attribute vectors
/// share one id, ids are dense in first-occurrence order. Returns the id count.
pub fn assign_semantic_ids(manifest: &mut DatasetManifest) -> Result<usize> {
    if manifest.flavor != Flavor::ReidStyle {
        return Err(Error::Argument(
            "semantic identities apply to reid-style datasets only".into(),
        ));
    }
    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    for identity in &mut manifest.identities {
        for image in &mut identity.images {
            let next = seen.len();
            let id = *seen.entry(image.attributes.clone()).or_insert(next);
            image.semantic_id = Some(id);
        }
    }
    Ok(seen.len())
}
