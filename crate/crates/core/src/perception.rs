//! The perception agent Φ: turns raw records (JSON objects or CSV rows) into
//! schema-conformant [`StructuredInput`]s.
//!
//! Missing values are handled by an explicit per-feature [`ImputationPolicy`];
//! anything that cannot be read as the declared kind is an error, never a
//! silent coercion. The only coercions performed are the lossless ones a CSV
//! cell needs: a numeric string to a number, and `"true"`/`"false"` to a
//! boolean.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tree::{Dataset, TreeError};
use crate::types::{canonical_json, digest, FeatureKind, FeatureValue, Schema, StructuredInput};

/// Column / key names with a reserved meaning in flat records.
pub const ID_KEY: &str = "_id";
pub const TEXT_KEY: &str = "_text";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("feature `{0}` is missing")]
    MissingFeature(String),
    #[error("feature `{feature}`: cannot read {got} as {expected}")]
    TypeMismatch {
        feature: String,
        expected: FeatureKind,
        got: String,
    },
    #[error("feature `{feature}`: unknown category `{symbol}`")]
    UnknownCategory { feature: String, symbol: String },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` has no observed values to fit")]
    EmptyColumn(String),
    #[error("cannot fit an imputer on an empty dataset")]
    EmptyDataset,
    #[error("imputation policy has no rule for feature `{0}`")]
    Uncovered(String),
    #[error("feature `{feature}`: {reason}")]
    InvalidPolicy { feature: String, reason: String },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("record {0} has no label")]
    MissingLabel(usize),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Dataset(#[from] TreeError),
}

impl PerceptionError {
    pub fn kind(&self) -> &'static str {
        match self {
            PerceptionError::MissingFeature(_) => "missing_feature",
            PerceptionError::TypeMismatch { .. } => "type_mismatch",
            PerceptionError::UnknownCategory { .. } => "unknown_category",
            PerceptionError::UnknownFeature(_) => "unknown_feature",
            PerceptionError::EmptyColumn(_) => "empty_column",
            PerceptionError::EmptyDataset => "empty_dataset",
            PerceptionError::Uncovered(_) | PerceptionError::InvalidPolicy { .. } => "invalid_policy",
            PerceptionError::DuplicateKey(_) => "duplicate_key",
            PerceptionError::MissingLabel(_) => "missing_label",
            PerceptionError::Malformed(_) => "malformed_input",
            PerceptionError::Dataset(e) => e.kind(),
        }
    }
}

/// The raw input `x₀`: scalar-or-null fields keyed by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(deserialize_with = "unique_keys")]
    pub fields: BTreeMap<String, Value>,
    #[serde(default)]
    pub text: Option<String>,
}

fn unique_keys<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Value>, D::Error> {
    struct Unique;
    impl<'de> Visitor<'de> for Unique {
        type Value = BTreeMap<String, Value>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object with unique keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, Value>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate key `{k}`")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }
    d.deserialize_map(Unique)
}

impl RawRecord {
    pub fn new(fields: BTreeMap<String, Value>) -> Self {
        Self {
            id: None,
            fields,
            text: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    /// Builds a record from a flat JSON object, where `_id` and `_text` carry
    /// the identifier and free text.
    pub fn from_flat(object: &serde_json::Map<String, Value>) -> Result<Self, PerceptionError> {
        let mut fields = BTreeMap::new();
        let mut id = None;
        let mut text = None;
        for (k, v) in object {
            match k.as_str() {
                ID_KEY => id = Some(scalar_string(k, v)?),
                TEXT_KEY => text = Some(scalar_string(k, v)?),
                _ => {
                    fields.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(Self { id, fields, text })
    }

    /// The identifier carried into provenance: the declared id, or a content
    /// digest of the record when none was given.
    pub fn source_id(&self) -> String {
        match &self.id {
            Some(id) => id.clone(),
            None => format!("sha256:{}", &digest(canonical_json(self).as_bytes())[..16]),
        }
    }
}

fn scalar_string(key: &str, v: &Value) -> Result<String, PerceptionError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(PerceptionError::Malformed(format!("`{key}` must be a string"))),
    }
}

/// Parses a JSON document holding one flat object, or a `RawRecord` with an
/// explicit `fields` object.
pub fn record_from_json(text: &str) -> Result<RawRecord, PerceptionError> {
    let StrictValue(v) = serde_json::from_str(text).map_err(|e| PerceptionError::Malformed(e.to_string()))?;
    record_from_value(&v)
}

/// A JSON value whose objects, at any depth, have no repeated keys.
struct StrictValue(Value);

impl<'de> Deserialize<'de> for StrictValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StrictValue;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON value")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<StrictValue, A::Error> {
                let mut out = serde_json::Map::new();
                while let Some((k, StrictValue(v))) = map.next_entry::<String, StrictValue>()? {
                    if out.contains_key(&k) {
                        return Err(serde::de::Error::custom(format!("duplicate key `{k}`")));
                    }
                    out.insert(k, v);
                }
                Ok(StrictValue(Value::Object(out)))
            }

            fn visit_seq<A: serde::de::SeqAccess<'de>>(self, mut seq: A) -> Result<StrictValue, A::Error> {
                let mut out = Vec::new();
                while let Some(StrictValue(v)) = seq.next_element()? {
                    out.push(v);
                }
                Ok(StrictValue(Value::Array(out)))
            }

            fn visit_bool<E>(self, b: bool) -> Result<StrictValue, E> {
                Ok(StrictValue(Value::Bool(b)))
            }

            fn visit_i64<E>(self, n: i64) -> Result<StrictValue, E> {
                Ok(StrictValue(n.into()))
            }

            fn visit_u64<E>(self, n: u64) -> Result<StrictValue, E> {
                Ok(StrictValue(n.into()))
            }

            fn visit_f64<E>(self, n: f64) -> Result<StrictValue, E> {
                Ok(StrictValue(serde_json::Number::from_f64(n).map_or(Value::Null, Value::Number)))
            }

            fn visit_str<E>(self, s: &str) -> Result<StrictValue, E> {
                Ok(StrictValue(Value::String(s.into())))
            }

            fn visit_string<E>(self, s: String) -> Result<StrictValue, E> {
                Ok(StrictValue(Value::String(s)))
            }

            fn visit_unit<E>(self) -> Result<StrictValue, E> {
                Ok(StrictValue(Value::Null))
            }

            fn visit_none<E>(self) -> Result<StrictValue, E> {
                Ok(StrictValue(Value::Null))
            }
        }
        d.deserialize_any(V)
    }
}

pub fn record_from_value(v: &Value) -> Result<RawRecord, PerceptionError> {
    match v {
        Value::Object(o) if o.get("fields").is_some_and(Value::is_object) => {
            RawRecord::deserialize(v).map_err(|e| PerceptionError::Malformed(e.to_string()))
        }
        Value::Object(o) => RawRecord::from_flat(o),
        _ => Err(PerceptionError::Malformed("a record must be a JSON object".into())),
    }
}

/// One record per non-blank line.
pub fn records_from_json_lines(text: &str) -> Result<Vec<RawRecord>, PerceptionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| record_from_json(l).map_err(|e| PerceptionError::Malformed(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads CSV with a header row. Empty cells are missing values.
pub fn records_from_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>, PerceptionError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| PerceptionError::Malformed(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for h in &header {
        if !seen.insert(h) {
            return Err(PerceptionError::DuplicateKey(h.clone()));
        }
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| PerceptionError::Malformed(e.to_string()))?;
        let mut object = serde_json::Map::new();
        for (h, cell) in header.iter().zip(row.iter()) {
            let v = if cell.is_empty() {
                Value::Null
            } else {
                Value::String(cell.to_string())
            };
            object.insert(h.clone(), v);
        }
        let mut record = RawRecord::from_flat(&object)?;
        // an empty id or text cell means "absent"
        record.id = record.id.filter(|s| !s.is_empty());
        record.text = record.text.filter(|s| !s.is_empty());
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ImputationRule {
    Reject,
    FillConstant { value: FeatureValue },
    FillMedian,
    FillMode,
}

/// A rule for every schema feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationPolicy {
    pub rules: BTreeMap<String, ImputationRule>,
}

impl ImputationPolicy {
    pub fn uniform(schema: &Schema, rule: ImputationRule) -> Self {
        Self {
            rules: schema.features().iter().map(|f| (f.name.clone(), rule.clone())).collect(),
        }
    }

    pub fn reject_all(schema: &Schema) -> Self {
        Self::uniform(schema, ImputationRule::Reject)
    }

    /// Median for numerics, mode for everything else.
    pub fn fill_all(schema: &Schema) -> Self {
        Self {
            rules: schema
                .features()
                .iter()
                .map(|f| {
                    let rule = if f.kind == FeatureKind::Numeric {
                        ImputationRule::FillMedian
                    } else {
                        ImputationRule::FillMode
                    };
                    (f.name.clone(), rule)
                })
                .collect(),
        }
    }

    pub fn with(mut self, feature: impl Into<String>, rule: ImputationRule) -> Self {
        self.rules.insert(feature.into(), rule);
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), PerceptionError> {
        if let Some(extra) = self.rules.keys().find(|k| schema.feature_index(k).is_none()) {
            return Err(PerceptionError::UnknownFeature(extra.clone()));
        }
        for (i, f) in schema.features().iter().enumerate() {
            let invalid = |reason: &str| PerceptionError::InvalidPolicy {
                feature: f.name.clone(),
                reason: reason.into(),
            };
            match self.rules.get(&f.name) {
                None => return Err(PerceptionError::Uncovered(f.name.clone())),
                Some(ImputationRule::FillMedian) if f.kind != FeatureKind::Numeric => {
                    return Err(invalid("fill_median applies only to numeric features"))
                }
                Some(ImputationRule::FillMode) if f.kind == FeatureKind::Numeric => {
                    return Err(invalid("fill_mode applies only to categorical or boolean features"))
                }
                Some(ImputationRule::FillConstant { value }) => {
                    if value.is_missing() || schema.check_value(i, value).is_err() {
                        return Err(invalid("fill_constant value does not conform to the feature"));
                    }
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// A policy together with the statistics it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedImputer {
    pub policy: ImputationPolicy,
    /// Fill value per feature for every fill_* rule.
    pub fills: BTreeMap<String, FeatureValue>,
}

impl FittedImputer {
    /// Wraps a policy that needs no statistics (reject / fill_constant only).
    pub fn without_statistics(schema: &Schema, policy: ImputationPolicy) -> Result<Self, PerceptionError> {
        policy.validate(schema)?;
        let mut fills = BTreeMap::new();
        for (name, rule) in &policy.rules {
            match rule {
                ImputationRule::FillConstant { value } => {
                    fills.insert(name.clone(), value.clone());
                }
                ImputationRule::FillMedian | ImputationRule::FillMode => {
                    return Err(PerceptionError::InvalidPolicy {
                        feature: name.clone(),
                        reason: "fill_median and fill_mode need a fitted dataset".into(),
                    })
                }
                ImputationRule::Reject => {}
            }
        }
        Ok(Self { policy, fills })
    }

    pub fn reject_all(schema: &Schema) -> Self {
        Self {
            policy: ImputationPolicy::reject_all(schema),
            fills: BTreeMap::new(),
        }
    }
}

/// Mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        v[n / 2 - 1] / 2.0 + v[n / 2] / 2.0
    })
}

/// Most frequent symbol; ties go to the lexicographically smallest.
pub fn mode<'a>(values: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (s, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((s, c));
        }
    }
    best.map(|(s, _)| s.to_string())
}

/// Fits medians and modes on the non-missing training values.
pub fn fit_imputer(
    dataset: &[RawRecord],
    schema: &Schema,
    policy: ImputationPolicy,
) -> Result<FittedImputer, PerceptionError> {
    policy.validate(schema)?;
    if dataset.is_empty() {
        return Err(PerceptionError::EmptyDataset);
    }
    let mut fills = BTreeMap::new();
    for (i, f) in schema.features().iter().enumerate() {
        let rule = &policy.rules[&f.name];
        if let ImputationRule::FillConstant { value } = rule {
            fills.insert(f.name.clone(), value.clone());
            continue;
        }
        if !matches!(rule, ImputationRule::FillMedian | ImputationRule::FillMode) {
            continue;
        }
        let mut observed = Vec::new();
        for r in dataset {
            let v = coerce(schema, i, r.fields.get(&f.name).unwrap_or(&Value::Null))?;
            if !v.is_missing() {
                observed.push(v);
            }
        }
        let fill = match rule {
            ImputationRule::FillMedian => {
                let xs: Vec<f64> = observed.iter().filter_map(FeatureValue::as_f64).collect();
                median(&xs).map(FeatureValue::Numeric)
            }
            _ => {
                let symbols: Vec<String> = observed.iter().map(ToString::to_string).collect();
                mode(symbols.iter().map(String::as_str)).map(|s| match f.kind {
                    FeatureKind::Boolean => FeatureValue::Boolean(s == "true"),
                    _ => FeatureValue::Categorical(s),
                })
            }
        };
        let fill = fill.ok_or_else(|| PerceptionError::EmptyColumn(f.name.clone()))?;
        fills.insert(f.name.clone(), fill);
    }
    Ok(FittedImputer { policy, fills })
}

/// Reads one raw scalar as the declared kind of feature `index`. `null`
/// becomes `Missing`.
pub fn coerce(schema: &Schema, index: usize, raw: &Value) -> Result<FeatureValue, PerceptionError> {
    let def = &schema.features()[index];
    let mismatch = || PerceptionError::TypeMismatch {
        feature: def.name.clone(),
        expected: def.kind,
        got: match raw {
            Value::String(s) => format!("string {s:?}"),
            other => other.to_string(),
        },
    };
    let value = match (def.kind, raw) {
        (_, Value::Null) => return Ok(FeatureValue::Missing),
        (FeatureKind::Numeric, Value::Number(n)) => FeatureValue::Numeric(n.as_f64().ok_or_else(mismatch)?),
        (FeatureKind::Numeric, Value::String(s)) => {
            FeatureValue::Numeric(s.trim().parse::<f64>().map_err(|_| mismatch())?)
        }
        (FeatureKind::Boolean, Value::Bool(b)) => FeatureValue::Boolean(*b),
        (FeatureKind::Boolean, Value::String(s)) => match s.as_str() {
            "true" => FeatureValue::Boolean(true),
            "false" => FeatureValue::Boolean(false),
            _ => return Err(mismatch()),
        },
        (FeatureKind::Categorical, Value::String(s)) => {
            if def.category_index(s).is_none() {
                return Err(PerceptionError::UnknownCategory {
                    feature: def.name.clone(),
                    symbol: s.clone(),
                });
            }
            FeatureValue::Categorical(s.clone())
        }
        _ => return Err(mismatch()),
    };
    if let FeatureValue::Numeric(v) = value {
        if !v.is_finite() {
            return Err(mismatch());
        }
    }
    Ok(value)
}

/// Φ: validates, imputes and orders a raw record.
pub fn normalize(record: &RawRecord, schema: &Schema, imputer: &FittedImputer) -> Result<StructuredInput, PerceptionError> {
    if let Some(unknown) = record.fields.keys().find(|k| schema.feature_index(k).is_none()) {
        return Err(PerceptionError::UnknownFeature(unknown.clone()));
    }
    let mut features = Vec::with_capacity(schema.len());
    for (i, f) in schema.features().iter().enumerate() {
        let mut v = coerce(schema, i, record.fields.get(&f.name).unwrap_or(&Value::Null))?;
        if v.is_missing() {
            v = match imputer.policy.rules.get(&f.name) {
                Some(ImputationRule::Reject) | None => return Err(PerceptionError::MissingFeature(f.name.clone())),
                Some(_) => imputer
                    .fills
                    .get(&f.name)
                    .cloned()
                    .ok_or_else(|| PerceptionError::EmptyColumn(f.name.clone()))?,
            };
        }
        features.push(v);
    }
    Ok(StructuredInput {
        features,
        text_abstraction: record.text.clone(),
        source_id: record.source_id(),
    })
}

/// The inverse view of [`normalize`]: a record that normalizes back to `x`.
pub fn to_record(x: &StructuredInput, schema: &Schema) -> RawRecord {
    RawRecord {
        id: Some(x.source_id.clone()),
        fields: schema
            .features()
            .iter()
            .zip(&x.features)
            .map(|(f, v)| (f.name.clone(), v.to_json()))
            .collect(),
        text: x.text_abstraction.clone(),
    }
}

/// Normalizes labeled records into a training set. The label is read from the
/// field named by the schema's label.
pub fn labeled_dataset(records: &[RawRecord], schema: &Schema, imputer: &FittedImputer) -> Result<Dataset, PerceptionError> {
    let label_name = &schema.label().name;
    let mut rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut r = r.clone();
        let label = match r.fields.remove(label_name) {
            Some(Value::String(s)) => s,
            Some(Value::Bool(b)) => b.to_string(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(PerceptionError::MissingLabel(i)),
        };
        rows.push(normalize(&r, schema, imputer)?);
        labels.push(label);
    }
    Ok(Dataset::new(schema.clone(), rows, &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FeatureDef, LabelDef};
    use serde_json::json;

    fn schema() -> Schema {
        Schema::new(
            vec![
                FeatureDef::numeric("hr"),
                FeatureDef::categorical("sex", ["f", "m"]),
                FeatureDef::boolean("fever"),
            ],
            LabelDef {
                name: "dx".into(),
                vocabulary: vec!["sepsis".into(), "healthy".into()],
            },
        )
        .unwrap()
    }

    fn rec(v: Value) -> RawRecord {
        record_from_value(&v).unwrap()
    }

    #[test]
    fn exact_record_keeps_values_in_schema_order() {
        let s = schema();
        let r = rec(json!({"fever": true, "sex": "m", "hr": 90, "_id": "p1", "_text": "note"}));
        let x = normalize(&r, &s, &FittedImputer::reject_all(&s)).unwrap();
        assert_eq!(
            x.features,
            vec![
                FeatureValue::Numeric(90.0),
                FeatureValue::Categorical("m".into()),
                FeatureValue::Boolean(true)
            ]
        );
        assert_eq!(x.source_id, "p1");
        assert_eq!(x.text_abstraction.as_deref(), Some("note"));
    }

    #[test]
    fn fitted_median_fills_missing_hr() {
        let s = schema();
        let train: Vec<_> = [70, 75, 82, 90, 110]
            .iter()
            .map(|hr| rec(json!({"hr": hr, "sex": "f", "fever": false})))
            .collect();
        let imp = fit_imputer(&train, &s, ImputationPolicy::fill_all(&s)).unwrap();
        // oracle: sorted {70,75,82,90,110}, middle element
        assert_eq!(imp.fills["hr"], FeatureValue::Numeric(82.0));
        let x = normalize(&rec(json!({"sex": "m", "fever": true})), &s, &imp).unwrap();
        assert_eq!(x.features[0], FeatureValue::Numeric(82.0));
    }

    #[test]
    fn medians_and_modes() {
        assert_eq!(median(&[7.0]), Some(7.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mode(["a", "a", "b"]).as_deref(), Some("a"));
        assert_eq!(mode(["b", "a"]).as_deref(), Some("a"));
    }

    #[test]
    fn error_classes() {
        let s = schema();
        let imp = FittedImputer::reject_all(&s);
        let err = |v: Value| normalize(&rec(v), &s, &imp).unwrap_err();
        assert!(matches!(
            err(json!({"hr": "high", "sex": "m", "fever": true})),
            PerceptionError::TypeMismatch { .. }
        ));
        assert!(matches!(
            err(json!({"hr": 1, "sex": "x", "fever": true})),
            PerceptionError::UnknownCategory { .. }
        ));
        assert!(matches!(err(json!({"sex": "m", "fever": true})), PerceptionError::MissingFeature(_)));
        assert!(matches!(
            err(json!({"hr": 1, "sex": "m", "fever": 1})),
            PerceptionError::TypeMismatch { .. }
        ));
        assert!(matches!(
            err(json!({"hr": 1, "sex": "m", "fever": true, "bp": 3})),
            PerceptionError::UnknownFeature(_)
        ));
        assert!(matches!(
            err(json!({"hr": "1e999", "sex": "m", "fever": true})),
            PerceptionError::TypeMismatch { .. }
        ));
    }

    #[test]
    fn empty_column_and_bad_policies() {
        let s = schema();
        let train = vec![rec(json!({"sex": "f", "fever": false}))];
        assert_eq!(
            fit_imputer(&train, &s, ImputationPolicy::fill_all(&s)),
            Err(PerceptionError::EmptyColumn("hr".into()))
        );
        let bad = ImputationPolicy::reject_all(&s).with("sex", ImputationRule::FillMedian);
        assert!(matches!(bad.validate(&s), Err(PerceptionError::InvalidPolicy { .. })));
        let mut partial = ImputationPolicy::reject_all(&s);
        partial.rules.remove("hr");
        assert_eq!(partial.validate(&s), Err(PerceptionError::Uncovered("hr".into())));
        assert_eq!(
            fit_imputer(&[], &s, ImputationPolicy::reject_all(&s)),
            Err(PerceptionError::EmptyDataset)
        );
    }

    #[test]
    fn csv_rows_with_empty_cells() {
        let s = schema();
        let csv = "_id,hr,sex,fever,dx\na,72,f,false,healthy\nb,,\"m\",true,sepsis\n";
        let records = records_from_csv(csv.as_bytes()).unwrap();
        assert_eq!(records[1].fields["hr"], Value::Null);
        let fitted = fit_imputer(&records, &s, ImputationPolicy::fill_all(&s)).unwrap();
        assert_eq!(fitted.fills["hr"], FeatureValue::Numeric(72.0));
        let imp = FittedImputer::without_statistics(
            &s,
            ImputationPolicy::reject_all(&s).with("hr", ImputationRule::FillConstant { value: FeatureValue::Numeric(80.0) }),
        )
        .unwrap();
        let ds = labeled_dataset(&records, &s, &imp).unwrap();
        assert_eq!(ds.rows()[1].features[0], FeatureValue::Numeric(80.0));
        assert_eq!(ds.label_names(), vec!["healthy", "sepsis"]);
        assert!(records_from_csv("a,a\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected_in_structured_records() {
        let text = r#"{"fields": {"hr": 1, "hr": 2}}"#;
        assert!(record_from_json(text).is_err());
    }

    #[test]
    fn source_id_falls_back_to_a_digest() {
        let a = rec(json!({"hr": 1}));
        let b = rec(json!({"hr": 2}));
        assert!(a.source_id().starts_with("sha256:"));
        assert_ne!(a.source_id(), b.source_id());
        assert_eq!(a.source_id(), rec(json!({"hr": 1})).source_id());
    }

    #[test]
    fn normalize_is_idempotent_through_to_record() {
        let s = schema();
        let imp = FittedImputer::reject_all(&s);
        let x = normalize(&rec(json!({"hr": "72.5", "sex": "f", "fever": "true"})), &s, &imp).unwrap();
        let again = normalize(&to_record(&x, &s), &s, &imp).unwrap();
        assert_eq!(again, x);
        assert_eq!(canonical_json(&again), canonical_json(&x));
    }
}
