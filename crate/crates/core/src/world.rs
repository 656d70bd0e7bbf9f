//! Symbolic image domains.
//!
//! Images are attribute → value maps over a fixed schema. A lexicon maps
//! caption tokens to the `(attribute, value)` pairs they truthfully
//! describe, which is all the template speakers need to know about an image.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value assigned to an attribute an image does not specify.
pub const UNKNOWN: &str = "unknown";

/// Default end-of-sequence token.
pub const DEFAULT_EOS: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
}

impl Attribute {
    /// Aspect name used by the caption classifier; falls back to the
    /// attribute name.
    pub fn aspect_name(&self) -> &str {
        self.aspect.as_deref().unwrap_or(&self.name)
    }

    pub fn allows(&self, value: &str) -> bool {
        value == UNKNOWN || self.values.iter().any(|v| v == value)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    /// Attribute addressed by a `(part, aspect)` pair.
    pub fn find_by_part_aspect(&self, part: Option<&str>, aspect: &str) -> Option<&Attribute> {
        self.attributes
            .iter()
            .find(|a| a.part.as_deref() == part && a.aspect_name() == aspect)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::InvalidWorld(format!("duplicate attribute `{}`", a.name)));
            }
            if a.values.is_empty() {
                return Err(Error::InvalidWorld(format!("attribute `{}` has no values", a.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicImage {
    pub id: String,
    pub values: BTreeMap<String, String>,
}

impl SymbolicImage {
    pub fn value(&self, attribute: &str) -> Option<&str> {
        self.values.get(attribute).map(String::as_str)
    }
}

/// Role a token plays in caption generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Eos,
    Function,
    Content,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub vocab: Vec<String>,
    #[serde(default)]
    pub meanings: BTreeMap<String, Vec<(String, String)>>,
    #[serde(default)]
    pub function_tokens: BTreeSet<String>,
    pub eos: String,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            vocab: vec![DEFAULT_EOS.to_string()],
            meanings: BTreeMap::new(),
            function_tokens: BTreeSet::new(),
            eos: DEFAULT_EOS.to_string(),
        }
    }
}

impl Lexicon {
    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }

    pub fn eos_index(&self) -> usize {
        self.index_of(&self.eos).expect("validated lexicon contains EOS")
    }

    pub fn kind(&self, token: &str) -> Result<TokenKind> {
        if token == self.eos {
            Ok(TokenKind::Eos)
        } else if self.function_tokens.contains(token) {
            Ok(TokenKind::Function)
        } else if self.index_of(token).is_some() {
            Ok(TokenKind::Content)
        } else {
            Err(Error::UnknownToken(token.to_string()))
        }
    }

    pub fn meaning(&self, token: &str) -> &[(String, String)] {
        self.meanings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Keep only `tokens` (in their original order); EOS is always kept.
    pub fn restrict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Lexicon> {
        let keep: BTreeSet<&str> = tokens.iter().map(|t| t.as_ref()).collect();
        for t in &keep {
            if self.index_of(t).is_none() {
                return Err(Error::UnknownToken(t.to_string()));
            }
        }
        let vocab: Vec<String> = self
            .vocab
            .iter()
            .filter(|t| keep.contains(t.as_str()) || **t == self.eos)
            .cloned()
            .collect();
        let meanings = self
            .meanings
            .iter()
            .filter(|(t, _)| keep.contains(t.as_str()))
            .map(|(t, m)| (t.clone(), m.clone()))
            .collect();
        let function_tokens = self
            .function_tokens
            .iter()
            .filter(|t| keep.contains(t.as_str()))
            .cloned()
            .collect();
        Ok(Lexicon {
            vocab,
            meanings,
            function_tokens,
            eos: self.eos.clone(),
        })
    }

    fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let eos_count = self.vocab.iter().filter(|t| **t == self.eos).count();
        if eos_count != 1 {
            return Err(Error::InvalidWorld(format!(
                "EOS `{}` appears {eos_count} times in the vocabulary",
                self.eos
            )));
        }
        let mut seen = BTreeSet::new();
        for t in &self.vocab {
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidWorld(format!("duplicate token `{t}`")));
            }
        }
        for t in &self.function_tokens {
            if !seen.contains(t.as_str()) {
                return Err(Error::InvalidWorld(format!(
                    "function token `{t}` is not in the vocabulary"
                )));
            }
            if self.meanings.get(t).is_some_and(|m| !m.is_empty()) {
                return Err(Error::InvalidWorld(format!("function token `{t}` has a meaning")));
            }
        }
        if self.function_tokens.contains(&self.eos) {
            return Err(Error::InvalidWorld("EOS cannot be a function token".into()));
        }
        for (t, pairs) in &self.meanings {
            if !seen.contains(t.as_str()) {
                return Err(Error::InvalidWorld(format!(
                    "meaning given for `{t}`, which is not in the vocabulary"
                )));
            }
            for (attr, value) in pairs {
                let a = schema
                    .get(attr)
                    .ok_or_else(|| Error::InvalidWorld(format!("token `{t}` refers to unknown attribute `{attr}`")))?;
                if !a.allows(value) {
                    return Err(Error::InvalidWorld(format!(
                        "token `{t}` refers to unknown value `{attr}={value}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub schema: AttributeSchema,
    pub images: Vec<SymbolicImage>,
    #[serde(default)]
    pub lexicon: Lexicon,
}

impl World {
    /// Validate and normalize a world. Attributes an image leaves out are
    /// filled with [`UNKNOWN`].
    pub fn new(schema: AttributeSchema, images: Vec<SymbolicImage>, lexicon: Lexicon) -> Result<Self> {
        schema.validate()?;
        lexicon.validate(&schema)?;
        let mut ids = BTreeSet::new();
        let mut images = images;
        for img in &mut images {
            if !ids.insert(img.id.clone()) {
                return Err(Error::InvalidWorld(format!("duplicate image id `{}`", img.id)));
            }
            for (attr, value) in &img.values {
                let a = schema.get(attr).ok_or_else(|| Error::SchemaViolation {
                    image: img.id.clone(),
                    attribute: attr.clone(),
                    detail: "attribute is not in the schema".into(),
                })?;
                if !a.allows(value) {
                    return Err(Error::SchemaViolation {
                        image: img.id.clone(),
                        attribute: attr.clone(),
                        detail: format!("value `{value}` is not allowed"),
                    });
                }
            }
            for a in &schema.attributes {
                img.values.entry(a.name.clone()).or_insert_with(|| UNKNOWN.to_string());
            }
        }
        Ok(World {
            schema,
            images,
            lexicon,
        })
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let raw: World = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        World::new(raw.schema, raw.images, raw.lexicon)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn image(&self, id: &str) -> Option<&SymbolicImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    pub fn image_index(&self) -> HashMap<&str, &SymbolicImage> {
        self.images.iter().map(|i| (i.id.as_str(), i)).collect()
    }
}

/// Read and validate a world file.
pub fn load_world(path: impl AsRef<Path>) -> Result<World> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    World::from_json_str(&text, path)
}

pub fn save_world(world: &World, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, world.to_json_string() + "\n").map_err(|e| Error::io(path, e))
}

/// Whether `token` is true of `image`. Function tokens and EOS are
/// vacuously true.
pub fn truth_value(image: &SymbolicImage, token: &str, lexicon: &Lexicon) -> Result<bool> {
    Ok(match lexicon.kind(token)? {
        TokenKind::Eos | TokenKind::Function => true,
        TokenKind::Content => lexicon
            .meaning(token)
            .iter()
            .any(|(a, v)| image.value(a) == Some(v.as_str())),
    })
}

const SHAPES6: &str = include_str!("../data/shapes6.world");

/// Six shapes: small and large variants of a red square, a blue square and
/// a green circle.
pub fn shapes6() -> World {
    World::from_json_str(SHAPES6, Path::new("shapes6.world")).expect("bundled world is valid")
}

/// Raw text of the bundled six-shape world file.
pub fn shapes6_source() -> &'static str {
    SHAPES6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_world_shape() {
        let w = shapes6();
        assert_eq!(w.images.len(), 6);
        assert_eq!(w.schema.attributes.len(), 3);
        let names: Vec<_> = w.schema.names().collect();
        assert_eq!(names, ["color", "size", "shape"]);
    }

    #[test]
    fn empty_image_list_is_valid() {
        let w = World::new(shapes6().schema, vec![], Lexicon::default()).unwrap();
        assert!(w.images.is_empty());
    }

    #[test]
    fn out_of_schema_value_is_rejected() {
        let mut w = shapes6();
        w.images[0].values.insert("color".into(), "magenta".into());
        let err = World::new(w.schema, w.images, w.lexicon).unwrap_err();
        match err {
            Error::SchemaViolation { image, attribute, .. } => {
                assert_eq!(image, "o1");
                assert_eq!(attribute, "color");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_values_become_unknown() {
        let mut w = shapes6();
        w.images[0].values.remove("size");
        let w = World::new(w.schema, w.images, w.lexicon).unwrap();
        assert_eq!(w.images[0].value("size"), Some(UNKNOWN));
    }

    #[test]
    fn parse_error_has_position() {
        let err = World::from_json_str("{\n  \"schema\": [,]\n}", Path::new("x.world")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut w = shapes6();
        w.images[1].id = "o1".into();
        assert!(World::new(w.schema, w.images, w.lexicon).is_err());
    }

    #[test]
    fn lexicon_needs_single_eos() {
        let w = shapes6();
        let mut lex = w.lexicon.clone();
        lex.vocab.push(lex.eos.clone());
        assert!(World::new(w.schema.clone(), vec![], lex).is_err());
        let mut lex = w.lexicon.clone();
        lex.vocab.retain(|t| *t != lex.eos);
        assert!(World::new(w.schema, vec![], lex).is_err());
    }

    #[test]
    fn truth_values() {
        let w = shapes6();
        let o1 = w.image("o1").unwrap();
        assert!(truth_value(o1, "red", &w.lexicon).unwrap());
        assert!(!truth_value(o1, "blue", &w.lexicon).unwrap());
        assert!(truth_value(o1, "a", &w.lexicon).unwrap());
        assert!(truth_value(o1, &w.lexicon.eos, &w.lexicon).unwrap());
        assert!(matches!(
            truth_value(o1, "purple", &w.lexicon),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn single_value_token_per_attribute() {
        let w = shapes6();
        for img in &w.images {
            for attr in &w.schema.attributes {
                let n = w
                    .lexicon
                    .vocab
                    .iter()
                    .filter(|t| {
                        w.lexicon.meaning(t).iter().any(|(a, _)| *a == attr.name)
                            && truth_value(img, t, &w.lexicon).unwrap()
                    })
                    .count();
                assert!(n <= 1, "{} has {n} true tokens for {}", img.id, attr.name);
            }
        }
    }

    #[test]
    fn restrict_keeps_order_and_eos() {
        let w = shapes6();
        let lex = w.lexicon.restrict(&["square", "red"]).unwrap();
        assert_eq!(lex.vocab, ["red", "square", "</s>"]);
        assert!(w.lexicon.restrict(&["purple"]).is_err());
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.world");
        let w = shapes6();
        save_world(&w, &path).unwrap();
        assert_eq!(load_world(&path).unwrap(), w);
        assert!(matches!(
            load_world(dir.path().join("missing.world")),
            Err(Error::Io { .. })
        ));
    }
}
