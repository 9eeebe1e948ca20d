//! A compiled subset of JSON Schema, sufficient for tool arguments.
//!
//! Supported: `type` (string, number, integer, boolean, array, object),
//! `enum`, `required`, `additionalProperties` (boolean), string length and
//! `pattern`, numeric bounds, item counts, arrays of scalars and objects
//! nested one level below the root. Anything else structural (`oneOf`,
//! `$ref`, ...) is rejected when the schema is compiled, so a tool with an
//! unsupported schema never gets registered.
//!
//! Objects are closed unless `additionalProperties: true` is given.

use std::fmt;

use regex::Regex;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct SchemaViolation {
    pub path: String,
    pub message: String,
}

impl SchemaViolation {
    fn new(path: &str, message: impl Into<String>) -> Self {
        SchemaViolation { path: path.to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported schema feature at {path}: {feature}")]
pub struct UnsupportedSchemaFeature {
    pub path: String,
    pub feature: String,
}

fn unsupported(path: &str, feature: impl Into<String>) -> UnsupportedSchemaFeature {
    UnsupportedSchemaFeature { path: path.to_string(), feature: feature.into() }
}

/// Path label used for the arguments object itself.
pub const ROOT_PATH: &str = "arguments";

const ANNOTATIONS: &[&str] =
    &["title", "description", "default", "examples", "format", "$schema", "$comment", "deprecated", "readOnly", "writeOnly"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarKind {
    String,
    Number,
    Integer,
    Boolean,
}

impl ScalarKind {
    fn name(self) -> &'static str {
        match self {
            ScalarKind::String => "string",
            ScalarKind::Number => "number",
            ScalarKind::Integer => "integer",
            ScalarKind::Boolean => "boolean",
        }
    }

    fn matches(self, v: &Value) -> bool {
        match self {
            ScalarKind::String => v.is_string(),
            ScalarKind::Number => v.is_number(),
            ScalarKind::Integer => v.is_i64() || v.is_u64(),
            ScalarKind::Boolean => v.is_boolean(),
        }
    }
}

#[derive(Debug, Clone)]
struct Scalar {
    kind: ScalarKind,
    enum_values: Option<Vec<Value>>,
    min_length: Option<u64>,
    max_length: Option<u64>,
    pattern: Option<Regex>,
    minimum: Option<f64>,
    maximum: Option<f64>,
}

#[derive(Debug, Clone)]
enum Shape {
    Scalar(Scalar),
    Array { items: Scalar, min_items: Option<u64>, max_items: Option<u64> },
    Object(ObjectShape),
}

#[derive(Debug, Clone)]
struct ObjectShape {
    properties: Vec<(String, Node)>,
    required: Vec<String>,
    additional: bool,
}

#[derive(Debug, Clone)]
struct Node {
    description: Option<String>,
    shape: Shape,
}

/// A compiled argument validator.
#[derive(Debug, Clone)]
pub struct SchemaValidator {
    root: ObjectShape,
    description: Option<String>,
}

fn child_path(parent: &str, name: &str) -> String {
    if parent == ROOT_PATH {
        name.to_string()
    } else {
        format!("{parent}.{name}")
    }
}

fn as_count(v: &Value, path: &str, key: &str) -> Result<u64, UnsupportedSchemaFeature> {
    v.as_u64().ok_or_else(|| unsupported(path, format!("non-integer `{key}`")))
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<(), UnsupportedSchemaFeature> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) && !ANNOTATIONS.contains(&key.as_str()) {
            return Err(unsupported(path, format!("keyword `{key}`")));
        }
    }
    Ok(())
}

fn type_name<'a>(obj: &'a Map<String, Value>, path: &str) -> Result<&'a str, UnsupportedSchemaFeature> {
    match obj.get("type") {
        Some(Value::String(t)) => Ok(t),
        Some(Value::Array(_)) => Err(unsupported(path, "union `type`")),
        Some(_) => Err(unsupported(path, "non-string `type`")),
        None => Err(unsupported(path, "missing `type`")),
    }
}

fn compile_scalar(obj: &Map<String, Value>, kind: ScalarKind, path: &str) -> Result<Scalar, UnsupportedSchemaFeature> {
    let allowed: &[&str] = match kind {
        ScalarKind::String => &["type", "enum", "minLength", "maxLength", "pattern"],
        ScalarKind::Number | ScalarKind::Integer => &["type", "enum", "minimum", "maximum"],
        ScalarKind::Boolean => &["type", "enum"],
    };
    check_keys(obj, allowed, path)?;
    let enum_values = match obj.get("enum") {
        None => None,
        Some(Value::Array(values)) if !values.is_empty() => {
            if let Some(bad) = values.iter().find(|v| !kind.matches(v)) {
                return Err(unsupported(path, format!("enum value {bad} does not match type {}", kind.name())));
            }
            Some(values.clone())
        }
        Some(_) => return Err(unsupported(path, "`enum` must be a nonempty array")),
    };
    let pattern = match obj.get("pattern") {
        None => None,
        Some(Value::String(p)) => Some(Regex::new(p).map_err(|_| unsupported(path, format!("pattern `{p}`")))?),
        Some(_) => return Err(unsupported(path, "non-string `pattern`")),
    };
    let bound = |key: &str| -> Result<Option<f64>, UnsupportedSchemaFeature> {
        obj.get(key)
            .map(|v| v.as_f64().ok_or_else(|| unsupported(path, format!("non-numeric `{key}`"))))
            .transpose()
    };
    Ok(Scalar {
        kind,
        enum_values,
        min_length: obj.get("minLength").map(|v| as_count(v, path, "minLength")).transpose()?,
        max_length: obj.get("maxLength").map(|v| as_count(v, path, "maxLength")).transpose()?,
        pattern,
        minimum: bound("minimum")?,
        maximum: bound("maximum")?,
    })
}

fn scalar_kind(name: &str) -> Option<ScalarKind> {
    match name {
        "string" => Some(ScalarKind::String),
        "number" => Some(ScalarKind::Number),
        "integer" => Some(ScalarKind::Integer),
        "boolean" => Some(ScalarKind::Boolean),
        _ => None,
    }
}

fn compile_node(schema: &Value, path: &str, depth: usize) -> Result<Node, UnsupportedSchemaFeature> {
    let obj = schema.as_object().ok_or_else(|| unsupported(path, "schema must be an object"))?;
    let description = obj.get("description").and_then(Value::as_str).map(str::to_string);
    let ty = type_name(obj, path)?;
    let shape = if let Some(kind) = scalar_kind(ty) {
        Shape::Scalar(compile_scalar(obj, kind, path)?)
    } else if ty == "array" {
        check_keys(obj, &["type", "items", "minItems", "maxItems"], path)?;
        let items = obj.get("items").ok_or_else(|| unsupported(path, "array without `items`"))?;
        let item_obj = items.as_object().ok_or_else(|| unsupported(path, "`items` must be a schema object"))?;
        let item_path = format!("{path}[]");
        let item_ty = type_name(item_obj, &item_path)?;
        let kind = scalar_kind(item_ty).ok_or_else(|| unsupported(&item_path, format!("array of {item_ty}")))?;
        Shape::Array {
            items: compile_scalar(item_obj, kind, &item_path)?,
            min_items: obj.get("minItems").map(|v| as_count(v, path, "minItems")).transpose()?,
            max_items: obj.get("maxItems").map(|v| as_count(v, path, "maxItems")).transpose()?,
        }
    } else if ty == "object" {
        if depth >= 2 {
            return Err(unsupported(path, "object nested more than one level"));
        }
        Shape::Object(compile_object(obj, path, depth)?)
    } else {
        return Err(unsupported(path, format!("type `{ty}`")));
    };
    Ok(Node { description, shape })
}

fn compile_object(obj: &Map<String, Value>, path: &str, depth: usize) -> Result<ObjectShape, UnsupportedSchemaFeature> {
    check_keys(obj, &["type", "properties", "required", "additionalProperties"], path)?;
    let mut properties = Vec::new();
    match obj.get("properties") {
        None => {}
        Some(Value::Object(props)) => {
            for (name, sub) in props {
                properties.push((name.clone(), compile_node(sub, &child_path(path, name), depth + 1)?));
            }
        }
        Some(_) => return Err(unsupported(path, "`properties` must be an object")),
    }
    let mut required = Vec::new();
    match obj.get("required") {
        None => {}
        Some(Value::Array(names)) => {
            for name in names {
                let name = name.as_str().ok_or_else(|| unsupported(path, "non-string entry in `required`"))?;
                if !properties.iter().any(|(p, _)| p == name) {
                    return Err(unsupported(path, format!("required field `{name}` has no property")));
                }
                if !required.iter().any(|r| r == name) {
                    required.push(name.to_string());
                }
            }
        }
        Some(_) => return Err(unsupported(path, "`required` must be an array")),
    }
    let additional = match obj.get("additionalProperties") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(unsupported(path, "schema-valued `additionalProperties`")),
    };
    Ok(ObjectShape { properties, required, additional })
}

fn describe_enum(values: &[Value]) -> String {
    let parts: Vec<String> = values
        .iter()
        .map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect();
    format!("must be one of [{}]", parts.join(", "))
}

fn fmt_bound(b: f64) -> String {
    if b.fract() == 0.0 && b.abs() < 1e15 {
        format!("{}", b as i64)
    } else {
        format!("{b}")
    }
}

impl Scalar {
    fn validate(&self, value: &Value, path: &str) -> Result<(), SchemaViolation> {
        if !self.kind.matches(value) {
            return Err(SchemaViolation::new(path, format!("expected {}", self.kind.name())));
        }
        if let Some(values) = &self.enum_values {
            let hit = values.iter().any(|allowed| match (allowed.as_f64(), value.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => allowed == value,
            });
            if !hit {
                return Err(SchemaViolation::new(path, describe_enum(values)));
            }
        }
        if let Value::String(s) = value {
            let len = s.chars().count() as u64;
            if let Some(min) = self.min_length.filter(|m| len < *m) {
                return Err(SchemaViolation::new(path, format!("must be at least {min} characters")));
            }
            if let Some(max) = self.max_length.filter(|m| len > *m) {
                return Err(SchemaViolation::new(path, format!("must be at most {max} characters")));
            }
            if let Some(re) = self.pattern.as_ref().filter(|re| !re.is_match(s)) {
                return Err(SchemaViolation::new(path, format!("must match pattern {}", re.as_str())));
            }
        }
        if let Some(n) = value.as_f64() {
            if let Some(min) = self.minimum.filter(|m| n < *m) {
                return Err(SchemaViolation::new(path, format!("must be >= {}", fmt_bound(min))));
            }
            if let Some(max) = self.maximum.filter(|m| n > *m) {
                return Err(SchemaViolation::new(path, format!("must be <= {}", fmt_bound(max))));
            }
        }
        Ok(())
    }

    fn to_json(&self, description: Option<&str>) -> Value {
        let mut out = Map::new();
        out.insert("type".into(), json!(self.kind.name()));
        if let Some(d) = description {
            out.insert("description".into(), json!(d));
        }
        if let Some(e) = &self.enum_values {
            out.insert("enum".into(), Value::Array(e.clone()));
        }
        if let Some(v) = self.min_length {
            out.insert("minLength".into(), json!(v));
        }
        if let Some(v) = self.max_length {
            out.insert("maxLength".into(), json!(v));
        }
        if let Some(re) = &self.pattern {
            out.insert("pattern".into(), json!(re.as_str()));
        }
        if let Some(v) = self.minimum {
            out.insert("minimum".into(), number_json(v));
        }
        if let Some(v) = self.maximum {
            out.insert("maximum".into(), number_json(v));
        }
        Value::Object(out)
    }
}

fn number_json(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

impl ObjectShape {
    fn validate(&self, value: &Value, path: &str) -> Result<(), SchemaViolation> {
        let Value::Object(map) = value else {
            return Err(SchemaViolation::new(path, "expected object"));
        };
        for name in &self.required {
            if !map.contains_key(name) {
                return Err(SchemaViolation::new(&child_path(path, name), "required"));
            }
        }
        if !self.additional {
            if let Some(unknown) = map.keys().find(|k| !self.properties.iter().any(|(p, _)| p == *k)) {
                return Err(SchemaViolation::new(&child_path(path, unknown), "unknown field"));
            }
        }
        for (name, node) in &self.properties {
            if let Some(v) = map.get(name) {
                node.validate(v, &child_path(path, name))?;
            }
        }
        Ok(())
    }

    fn to_json(&self, description: Option<&str>) -> Value {
        let mut out = Map::new();
        out.insert("type".into(), json!("object"));
        if let Some(d) = description {
            out.insert("description".into(), json!(d));
        }
        let props: Map<String, Value> = self.properties.iter().map(|(k, n)| (k.clone(), n.to_json())).collect();
        out.insert("properties".into(), Value::Object(props));
        out.insert("required".into(), json!(self.required));
        out.insert("additionalProperties".into(), json!(self.additional));
        Value::Object(out)
    }
}

impl Node {
    fn validate(&self, value: &Value, path: &str) -> Result<(), SchemaViolation> {
        match &self.shape {
            Shape::Scalar(s) => s.validate(value, path),
            Shape::Array { items, min_items, max_items } => {
                let Value::Array(list) = value else {
                    return Err(SchemaViolation::new(path, "expected array"));
                };
                let len = list.len() as u64;
                if let Some(min) = min_items.filter(|m| len < *m) {
                    return Err(SchemaViolation::new(path, format!("must have at least {min} items")));
                }
                if let Some(max) = max_items.filter(|m| len > *m) {
                    return Err(SchemaViolation::new(path, format!("must have at most {max} items")));
                }
                for (i, item) in list.iter().enumerate() {
                    items.validate(item, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            Shape::Object(o) => o.validate(value, path),
        }
    }

    fn to_json(&self) -> Value {
        let description = self.description.as_deref();
        match &self.shape {
            Shape::Scalar(s) => s.to_json(description),
            Shape::Array { items, min_items, max_items } => {
                let mut out = Map::new();
                out.insert("type".into(), json!("array"));
                if let Some(d) = description {
                    out.insert("description".into(), json!(d));
                }
                out.insert("items".into(), items.to_json(None));
                if let Some(v) = min_items {
                    out.insert("minItems".into(), json!(v));
                }
                if let Some(v) = max_items {
                    out.insert("maxItems".into(), json!(v));
                }
                Value::Object(out)
            }
            Shape::Object(o) => o.to_json(description),
        }
    }
}

impl SchemaValidator {
    /// Compiles a tool argument schema. The root must be an object schema.
    pub fn compile(schema: &Value) -> Result<Self, UnsupportedSchemaFeature> {
        let obj = schema.as_object().ok_or_else(|| unsupported(ROOT_PATH, "schema must be an object"))?;
        if type_name(obj, ROOT_PATH)? != "object" {
            return Err(unsupported(ROOT_PATH, "root schema must have type object"));
        }
        Ok(SchemaValidator {
            root: compile_object(obj, ROOT_PATH, 0)?,
            description: obj.get("description").and_then(Value::as_str).map(str::to_string),
        })
    }

    pub fn validate(&self, args: &Value) -> Result<(), SchemaViolation> {
        self.root.validate(args, ROOT_PATH)
    }

    /// Canonical JSON form; compiling it again yields an equivalent validator.
    pub fn to_json(&self) -> Value {
        self.root.to_json(self.description.as_deref())
    }

    pub fn property_names(&self) -> Vec<&str> {
        self.root.properties.iter().map(|(n, _)| n.as_str()).collect()
    }
}

impl fmt::Display for SchemaValidator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bash() -> SchemaValidator {
        SchemaValidator::compile(&json!({
            "type": "object",
            "properties": {"command": {"type": "string", "minLength": 1}},
            "required": ["command"],
            "additionalProperties": false
        }))
        .unwrap()
    }

    #[test]
    fn bash_examples() {
        let v = bash();
        assert!(v.validate(&json!({"command": "ls"})).is_ok());
        assert_eq!(v.validate(&json!({})).unwrap_err().to_string(), "command: required");
        assert_eq!(v.validate(&json!({"command": 1})).unwrap_err().to_string(), "command: expected string");
        assert_eq!(v.validate(&json!({"command": null})).unwrap_err().to_string(), "command: expected string");
        assert_eq!(
            v.validate(&json!({"command": "ls", "x": 1})).unwrap_err().to_string(),
            "x: unknown field"
        );
        assert_eq!(v.validate(&json!([])).unwrap_err().to_string(), "arguments: expected object");
    }

    #[test]
    fn top_level_one_of_is_unsupported() {
        let err = SchemaValidator::compile(&json!({"type": "object", "oneOf": []})).unwrap_err();
        assert!(err.feature.contains("oneOf"));
        assert!(SchemaValidator::compile(&json!({"type": "object", "properties": {"a": {"$ref": "#/x"}}})).is_err());
    }

    #[test]
    fn nesting_limits() {
        let one_level = json!({"type": "object", "properties": {
            "opts": {"type": "object", "properties": {"depth": {"type": "integer"}}, "required": ["depth"]}
        }});
        let v = SchemaValidator::compile(&one_level).unwrap();
        assert_eq!(v.validate(&json!({"opts": {}})).unwrap_err().to_string(), "opts.depth: required");
        assert_eq!(
            v.validate(&json!({"opts": {"depth": 1.5}})).unwrap_err().to_string(),
            "opts.depth: expected integer"
        );
        let two_levels = json!({"type": "object", "properties": {
            "a": {"type": "object", "properties": {"b": {"type": "object", "properties": {}}}}
        }});
        assert!(SchemaValidator::compile(&two_levels).is_err());
        let array_of_objects = json!({"type": "object", "properties": {"a": {"type": "array", "items": {"type": "object"}}}});
        assert!(SchemaValidator::compile(&array_of_objects).is_err());
    }

    #[test]
    fn arrays_and_enums() {
        let v = SchemaValidator::compile(&json!({"type": "object", "properties": {
            "tasks": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 2},
            "op": {"type": "string", "enum": ["read", "write"]}
        }}))
        .unwrap();
        assert_eq!(v.validate(&json!({"tasks": []})).unwrap_err().to_string(), "tasks: must have at least 1 items");
        assert_eq!(v.validate(&json!({"tasks": ["a", 2]})).unwrap_err().to_string(), "tasks[1]: expected string");
        assert_eq!(v.validate(&json!({"op": "x"})).unwrap_err().to_string(), "op: must be one of [read, write]");
        assert!(v.validate(&json!({"tasks": ["a"], "op": "read"})).is_ok());
    }

    #[test]
    fn canonical_form_recompiles_to_itself() {
        let v = bash();
        let again = SchemaValidator::compile(&v.to_json()).unwrap();
        assert_eq!(again.to_json(), v.to_json());
    }
}
