//! Structured prompts: entities with attribute sets, their rendering into
//! conditioning text, admissibility rules for evaluation items and the
//! attribute-swap negatives used by the swap test.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("attribute name is empty")]
    EmptyAttribute,
    #[error("entity class label is empty")]
    EmptyClass,
    #[error("entity `{class}` lists attribute `{attribute}` more than once")]
    DuplicateAttribute { class: String, attribute: String },
    #[error("schema error in garment {garment:?}: {message}")]
    Schema { garment: Option<usize>, message: String },
    #[error("item is not admissible: {0}")]
    InvalidItem(ValidationReport),
}

impl PromptError {
    fn schema(garment: Option<usize>, message: impl Into<String>) -> Self {
        PromptError::Schema { garment, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeCategory {
    /// Easily recognizable texture such as "striped" or "dotted".
    Pattern,
    Other,
}

/// A single attribute label attached to an entity. Names are trimmed and
/// lowercased on construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAttribute")]
pub struct Attribute {
    name: String,
    category: AttributeCategory,
}

#[derive(Deserialize)]
struct RawAttribute {
    name: String,
    category: AttributeCategory,
}

impl TryFrom<RawAttribute> for Attribute {
    type Error = PromptError;

    fn try_from(raw: RawAttribute) -> Result<Self, Self::Error> {
        Attribute::new(&raw.name, raw.category)
    }
}

impl Attribute {
    pub fn new(name: &str, category: AttributeCategory) -> Result<Self, PromptError> {
        let name = name.trim().to_lowercase();
        if name.is_empty() {
            return Err(PromptError::EmptyAttribute);
        }
        Ok(Attribute { name, category })
    }

    pub fn pattern(name: &str) -> Result<Self, PromptError> {
        Self::new(name, AttributeCategory::Pattern)
    }

    pub fn other(name: &str) -> Result<Self, PromptError> {
        Self::new(name, AttributeCategory::Other)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn category(&self) -> AttributeCategory {
        self.category
    }

    pub fn is_pattern(&self) -> bool {
        self.category == AttributeCategory::Pattern
    }
}

/// A garment (entity) and its ordered attribute set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEntity")]
pub struct Entity {
    #[serde(rename = "class")]
    class_label: String,
    #[serde(rename = "attrs")]
    attributes: Vec<Attribute>,
}

#[derive(Deserialize)]
struct RawEntity {
    class: String,
    attrs: Vec<Attribute>,
}

impl TryFrom<RawEntity> for Entity {
    type Error = PromptError;

    fn try_from(raw: RawEntity) -> Result<Self, Self::Error> {
        Entity::new(&raw.class, raw.attrs)
    }
}

impl Entity {
    pub fn new(class_label: &str, attributes: Vec<Attribute>) -> Result<Self, PromptError> {
        let class_label = class_label.trim().to_lowercase();
        if class_label.is_empty() {
            return Err(PromptError::EmptyClass);
        }
        let mut seen = HashSet::new();
        for attr in &attributes {
            if !seen.insert(attr.name()) {
                return Err(PromptError::DuplicateAttribute {
                    class: class_label,
                    attribute: attr.name().to_owned(),
                });
            }
        }
        Ok(Entity { class_label, attributes })
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn has_attribute(&self, name: &str) -> bool {
        self.attributes.iter().any(|a| a.name() == name)
    }

    pub fn patterns(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter().filter(|a| a.is_pattern())
    }
}

/// Fixed lookup table for rendering: which garment classes take "a pair of",
/// and which bare attribute names count as patterns when a record does not
/// state the category.
#[derive(Debug, Clone, Deserialize)]
pub struct RenderTable {
    pub version: u32,
    plural_classes: Vec<String>,
    pattern_attributes: Vec<String>,
}

impl RenderTable {
    pub fn builtin() -> &'static RenderTable {
        static TABLE: OnceLock<RenderTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            serde_json::from_str(include_str!("../resources/render_table.json"))
                .expect("bundled render table is valid JSON")
        })
    }

    pub fn is_plural(&self, class_label: &str) -> bool {
        self.plural_classes.iter().any(|c| c == class_label)
    }

    pub fn default_category(&self, attribute: &str) -> AttributeCategory {
        if self.pattern_attributes.iter().any(|p| p == attribute) {
            AttributeCategory::Pattern
        } else {
            AttributeCategory::Other
        }
    }
}

/// Entities with attribute sets plus the text rendered from them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StructuredPrompt {
    source_id: String,
    entities: Vec<Entity>,
    rendered_text: String,
}

impl StructuredPrompt {
    pub fn new(source_id: impl Into<String>, entities: Vec<Entity>) -> Self {
        let rendered_text = render_entities(&entities, RenderTable::builtin());
        StructuredPrompt { source_id: source_id.into(), entities, rendered_text }
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn rendered_text(&self) -> &str {
        &self.rendered_text
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Re-expresses the prompt as an annotation record that
    /// [`parse_structured_annotation`] accepts.
    pub fn to_annotation(&self) -> Value {
        serde_json::json!({
            "source_id": self.source_id,
            "garments": self.entities,
        })
    }
}

/// Reads one annotation record of the form
/// `{source_id?, garments: [{class, attrs: [...]}]}`.
///
/// Attribute entries may be bare strings (category looked up in the render
/// table) or `{name, category}` objects. Garment indices in errors are
/// zero-based.
pub fn parse_structured_annotation(record: &Value) -> Result<StructuredPrompt, PromptError> {
    let table = RenderTable::builtin();
    let obj = record
        .as_object()
        .ok_or_else(|| PromptError::schema(None, "record is not a JSON object"))?;
    let source_id = match obj.get("source_id") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(PromptError::schema(None, "`source_id` must be a string")),
    };
    let garments = obj
        .get("garments")
        .ok_or_else(|| PromptError::schema(None, "missing field `garments`"))?
        .as_array()
        .ok_or_else(|| PromptError::schema(None, "`garments` must be a list"))?;
    if garments.is_empty() {
        tracing::warn!(source_id = %source_id, "annotation record has no garments");
    }

    let mut entities = Vec::with_capacity(garments.len());
    for (idx, garment) in garments.iter().enumerate() {
        let class = garment
            .get("class")
            .ok_or_else(|| PromptError::schema(Some(idx), "missing field `class`"))?
            .as_str()
            .ok_or_else(|| PromptError::schema(Some(idx), "`class` must be a string"))?;
        let attrs = garment
            .get("attrs")
            .ok_or_else(|| PromptError::schema(Some(idx), "missing field `attrs`"))?
            .as_array()
            .ok_or_else(|| PromptError::schema(Some(idx), "`attrs` must be a list"))?;
        let mut attributes = Vec::with_capacity(attrs.len());
        for attr in attrs {
            let attribute = match attr {
                Value::String(name) => {
                    let name = name.trim().to_lowercase();
                    Attribute::new(&name, table.default_category(&name))
                }
                Value::Object(fields) => {
                    let name = fields
                        .get("name")
                        .and_then(Value::as_str)
                        .ok_or_else(|| PromptError::schema(Some(idx), "attribute missing `name`"))?;
                    let category = match fields.get("category").and_then(Value::as_str) {
                        Some("pattern") => AttributeCategory::Pattern,
                        Some("other") => AttributeCategory::Other,
                        Some(other) => {
                            return Err(PromptError::schema(
                                Some(idx),
                                format!("unknown attribute category `{other}`"),
                            ))
                        }
                        None => table.default_category(&name.trim().to_lowercase()),
                    };
                    Attribute::new(name, category)
                }
                _ => {
                    return Err(PromptError::schema(
                        Some(idx),
                        "attribute must be a string or an object",
                    ))
                }
            }
            .map_err(|e| PromptError::schema(Some(idx), e.to_string()))?;
            attributes.push(attribute);
        }
        entities.push(Entity::new(class, attributes).map_err(|e| PromptError::schema(Some(idx), e.to_string()))?);
    }
    Ok(StructuredPrompt::new(source_id, entities))
}

/// Renders a prompt to conditioning text, e.g.
/// `"a striped, long-sleeve shirt. a pair of dotted pants"`.
pub fn render_prompt(prompt: &StructuredPrompt) -> String {
    render_entities(prompt.entities(), RenderTable::builtin())
}

fn render_entities(entities: &[Entity], table: &RenderTable) -> String {
    entities
        .iter()
        .map(|e| render_entity(e, table))
        .collect::<Vec<_>>()
        .join(". ")
}

fn render_entity(entity: &Entity, table: &RenderTable) -> String {
    let mut phrase = entity
        .attributes()
        .iter()
        .map(Attribute::name)
        .collect::<Vec<_>>()
        .join(", ");
    if !phrase.is_empty() {
        phrase.push(' ');
    }
    phrase.push_str(entity.class_label());

    if table.is_plural(entity.class_label()) {
        format!("a pair of {phrase}")
    } else {
        format!("{} {phrase}", indefinite_article(&phrase))
    }
}

fn indefinite_article(phrase: &str) -> &'static str {
    match phrase.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    /// (a) fewer than two entities.
    TooFewEntities { found: usize },
    /// (b) an entity carries no pattern attribute.
    MissingPattern { entity: String },
    /// (c) a pattern attribute appears on more than one entity.
    SharedPattern { attribute: String, entities: Vec<String> },
    /// The same garment class appears twice, so per-class localization is ambiguous.
    DuplicateEntityClass { class: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewEntities { found } => {
                write!(f, "rule (a): needs at least 2 entities, found {found}")
            }
            Violation::MissingPattern { entity } => {
                write!(f, "rule (b): entity `{entity}` has no pattern attribute")
            }
            Violation::SharedPattern { attribute, entities } => write!(
                f,
                "rule (c): pattern `{attribute}` is shared by {}",
                entities.join(", ")
            ),
            Violation::DuplicateEntityClass { class } => {
                write!(f, "entity class `{class}` appears more than once")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("admissible");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_eval_item(prompt: &StructuredPrompt) -> ValidationReport {
    let mut violations = Vec::new();
    let entities = prompt.entities();

    if entities.len() < 2 {
        violations.push(Violation::TooFewEntities { found: entities.len() });
    }

    let mut class_seen = HashSet::new();
    for entity in entities {
        if !class_seen.insert(entity.class_label()) {
            violations.push(Violation::DuplicateEntityClass {
                class: entity.class_label().to_owned(),
            });
        }
    }

    for entity in entities {
        if entity.patterns().next().is_none() {
            violations.push(Violation::MissingPattern {
                entity: entity.class_label().to_owned(),
            });
        }
    }

    let mut owners: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for entity in entities {
        for attr in entity.patterns() {
            owners
                .entry(attr.name())
                .or_default()
                .push(entity.class_label().to_owned());
        }
    }
    for (attribute, holders) in owners {
        if holders.len() > 1 {
            violations.push(Violation::SharedPattern {
                attribute: attribute.to_owned(),
                entities: holders,
            });
        }
    }

    ValidationReport { violations }
}

/// Builds the attribute-swapped negative: entity `i` receives the pattern
/// attributes of entity `(i + 1) mod N`, placed where its own patterns were.
/// Non-pattern attributes stay put.
pub fn swap_attributes(prompt: &StructuredPrompt) -> Result<StructuredPrompt, PromptError> {
    let report = validate_eval_item(prompt);
    if !report.is_admissible() {
        return Err(PromptError::InvalidItem(report));
    }

    let entities = prompt.entities();
    let n = entities.len();
    let mut swapped = Vec::with_capacity(n);
    for (i, entity) in entities.iter().enumerate() {
        let incoming: Vec<Attribute> = entities[(i + 1) % n].patterns().cloned().collect();
        let mut attrs = Vec::with_capacity(entity.attributes().len() + incoming.len());
        let mut placed = false;
        for attr in entity.attributes() {
            if attr.is_pattern() {
                if !placed {
                    attrs.extend(incoming.iter().cloned());
                    placed = true;
                }
            } else {
                attrs.push(attr.clone());
            }
        }
        swapped.push(Entity::new(entity.class_label(), attrs)?);
    }
    Ok(StructuredPrompt::new(prompt.source_id(), swapped))
}

/// A generated image paired with the prompt that conditioned it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub prompt: StructuredPrompt,
    pub image_ref: String,
    pub generator_id: String,
    pub group_id: Option<u32>,
}

impl EvalItem {
    pub fn new(prompt: StructuredPrompt, image_ref: impl Into<String>, generator_id: impl Into<String>) -> Self {
        EvalItem {
            prompt,
            image_ref: image_ref.into(),
            generator_id: generator_id.into(),
            group_id: None,
        }
    }

    /// Stable item key used across score files: `source_id:generator_id`.
    pub fn item_id(&self) -> String {
        format!("{}:{}", self.prompt.source_id(), self.generator_id)
    }
}

/// JSONL line layout for [`EvalItem`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalItemRecord {
    pub source_id: String,
    pub rendered_text: String,
    pub entities: Vec<Entity>,
    pub image_ref: String,
    pub generator_id: String,
}

impl From<&EvalItem> for EvalItemRecord {
    fn from(item: &EvalItem) -> Self {
        EvalItemRecord {
            source_id: item.prompt.source_id().to_owned(),
            rendered_text: item.prompt.rendered_text().to_owned(),
            entities: item.prompt.entities().to_vec(),
            image_ref: item.image_ref.clone(),
            generator_id: item.generator_id.clone(),
        }
    }
}

impl From<EvalItemRecord> for EvalItem {
    fn from(record: EvalItemRecord) -> Self {
        let prompt = StructuredPrompt::new(record.source_id, record.entities);
        if prompt.rendered_text() != record.rendered_text {
            tracing::warn!(
                source_id = prompt.source_id(),
                "stored rendered_text differs from the entities; using the re-rendered text"
            );
        }
        EvalItem::new(prompt, record.image_ref, record.generator_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn entity(class: &str, patterns: &[&str], others: &[&str]) -> Entity {
        let mut attrs: Vec<Attribute> = patterns.iter().map(|p| Attribute::pattern(p).unwrap()).collect();
        attrs.extend(others.iter().map(|o| Attribute::other(o).unwrap()));
        Entity::new(class, attrs).unwrap()
    }

    #[test]
    fn parses_string_attributes() {
        let record = json!({"garments": [
            {"class": "shirt", "attrs": ["striped", "long-sleeve"]},
            {"class": "pants", "attrs": ["dotted"]}
        ]});
        let prompt = parse_structured_annotation(&record).unwrap();
        assert_eq!(prompt.len(), 2);
        assert_eq!(prompt.entities()[0].attributes().len(), 2);
        assert_eq!(prompt.entities()[1].attributes().len(), 1);
        assert!(prompt.entities()[0].attributes()[0].is_pattern());
        assert!(!prompt.entities()[0].attributes()[1].is_pattern());
        assert_eq!(prompt.entities()[0].attributes()[1].name(), "long-sleeve");
    }

    #[test]
    fn parses_object_attributes_and_normalizes() {
        let record = json!({"source_id": "fp-1", "garments": [
            {"class": " Shirt", "attrs": [{"name": " Striped ", "category": "pattern"}]}
        ]});
        let prompt = parse_structured_annotation(&record).unwrap();
        assert_eq!(prompt.source_id(), "fp-1");
        assert_eq!(prompt.entities()[0].class_label(), "shirt");
        assert_eq!(prompt.entities()[0].attributes()[0].name(), "striped");
    }

    #[test]
    fn empty_garment_list_is_allowed() {
        let prompt = parse_structured_annotation(&json!({"garments": []})).unwrap();
        assert!(prompt.is_empty());
        assert_eq!(prompt.rendered_text(), "");
    }

    #[test]
    fn missing_class_names_garment() {
        let record = json!({"garments": [
            {"class": "shirt", "attrs": []},
            {"class": "pants", "attrs": []},
            {"attrs": ["dotted"]}
        ]});
        match parse_structured_annotation(&record) {
            Err(PromptError::Schema { garment: Some(2), message }) => assert!(message.contains("class")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_structured_annotation(&json!({"items": []})),
            Err(PromptError::Schema { garment: None, .. })
        ));
    }

    #[test]
    fn duplicate_attribute_is_schema_error() {
        let record = json!({"garments": [{"class": "shirt", "attrs": ["striped", "Striped"]}]});
        assert!(matches!(
            parse_structured_annotation(&record),
            Err(PromptError::Schema { garment: Some(0), .. })
        ));
    }

    #[test]
    fn renders_fashion_prompt() {
        let prompt = StructuredPrompt::new(
            "x",
            vec![entity("shirt", &["striped"], &["long-sleeve"]), entity("pants", &["dotted"], &[])],
        );
        assert_eq!(prompt.rendered_text(), "a striped, long-sleeve shirt. a pair of dotted pants");
        assert_eq!(render_prompt(&prompt), prompt.rendered_text());
    }

    #[test]
    fn renders_single_and_bare_entities() {
        let blazer = StructuredPrompt::new("x", vec![entity("blazer", &[], &["pink"])]);
        assert_eq!(blazer.rendered_text(), "a pink blazer");
        let dress = StructuredPrompt::new("x", vec![entity("dress", &[], &[])]);
        assert_eq!(dress.rendered_text(), "a dress");
        let orange = StructuredPrompt::new("x", vec![entity("coat", &[], &["orange"])]);
        assert_eq!(orange.rendered_text(), "an orange coat");
        let pants = StructuredPrompt::new("x", vec![entity("pants", &[], &[])]);
        assert_eq!(pants.rendered_text(), "a pair of pants");
    }

    #[test]
    fn validation_rules() {
        let ok = StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[]), entity("pants", &["dotted"], &[])]);
        assert!(validate_eval_item(&ok).is_admissible());

        let shared =
            StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[]), entity("pants", &["striped"], &[])]);
        let report = validate_eval_item(&shared);
        assert_eq!(
            report.violations,
            vec![Violation::SharedPattern {
                attribute: "striped".into(),
                entities: vec!["shirt".into(), "pants".into()]
            }]
        );

        let single = StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[])]);
        assert_eq!(validate_eval_item(&single).violations, vec![Violation::TooFewEntities { found: 1 }]);

        let plain = StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[]), entity("pants", &[], &["blue"])]);
        assert_eq!(
            validate_eval_item(&plain).violations,
            vec![Violation::MissingPattern { entity: "pants".into() }]
        );

        let twice = StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[]), entity("shirt", &["dotted"], &[])]);
        assert_eq!(
            validate_eval_item(&twice).violations,
            vec![Violation::DuplicateEntityClass { class: "shirt".into() }]
        );
    }

    #[test]
    fn swap_two_entities() {
        let prompt = StructuredPrompt::new("x", vec![entity("dress", &["dotted"], &[]), entity("shirt", &["striped"], &[])]);
        let swapped = swap_attributes(&prompt).unwrap();
        assert_eq!(swapped.rendered_text(), "a striped dress. a dotted shirt");
        assert_eq!(swapped.entities()[0].attributes()[0].name(), "striped");
        assert_eq!(swapped.entities()[1].attributes()[0].name(), "dotted");
    }

    #[test]
    fn swap_three_entities_is_cyclic_without_fixed_points() {
        let prompt = StructuredPrompt::new(
            "x",
            vec![
                entity("shirt", &["p1"], &["long-sleeve"]),
                entity("skirt", &["p2"], &[]),
                entity("coat", &["p3"], &["wool"]),
            ],
        );
        let swapped = swap_attributes(&prompt).unwrap();
        let got: Vec<Vec<&str>> = swapped
            .entities()
            .iter()
            .map(|e| e.attributes().iter().map(Attribute::name).collect())
            .collect();
        assert_eq!(got, vec![vec!["p2", "long-sleeve"], vec!["p3"], vec!["p1", "wool"]]);

        // Enumerate the permutation as entity -> source entity and check it has no fixed point.
        let perm: Vec<usize> = (0..3)
            .map(|i| {
                let p = swapped.entities()[i].patterns().next().unwrap().name();
                prompt.entities().iter().position(|e| e.has_attribute(p)).unwrap()
            })
            .collect();
        assert_eq!(perm, vec![1, 2, 0]);
        assert!(perm.iter().enumerate().all(|(i, &src)| i != src));
    }

    #[test]
    fn swap_rejects_inadmissible() {
        let shared =
            StructuredPrompt::new("x", vec![entity("shirt", &["striped"], &[]), entity("pants", &["striped"], &[])]);
        assert!(matches!(swap_attributes(&shared), Err(PromptError::InvalidItem(_))));
    }

    #[test]
    fn eval_item_record_round_trip() {
        let prompt = StructuredPrompt::new("fp-9", vec![entity("shirt", &["striped"], &[]), entity("pants", &["dotted"], &[])]);
        let item = EvalItem::new(prompt, "img/a.png", "sdxl");
        let line = serde_json::to_string(&EvalItemRecord::from(&item)).unwrap();
        let back: EvalItem = serde_json::from_str::<EvalItemRecord>(&line).unwrap().into();
        assert_eq!(back, item);
        assert_eq!(item.item_id(), "fp-9:sdxl");
    }
}
