use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Name of the reserved type given to tokens outside every dictionary match.
pub const OTHER_TYPE: &str = "other";

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub surface: Vec<String>,
    pub type_id: usize,
}

/// A matched dictionary span inside a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub len: usize,
    pub entity: usize,
    pub type_id: usize,
}

/// Surface forms mapped to `(entity id, type id)`, matched greedily
/// longest-first from the left.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityDictionary {
    types: Vec<String>,
    entities: Vec<Entity>,
    by_surface: HashMap<Vec<String>, usize>,
    max_len: usize,
}

impl EntityDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a type name and returns its id.
    pub fn add_type(&mut self, name: &str) -> Result<usize> {
        if name == OTHER_TYPE {
            return Err(Error::InvalidArgument(format!("type name {OTHER_TYPE:?} is reserved")));
        }
        if let Some(i) = self.types.iter().position(|t| t == name) {
            return Ok(i);
        }
        self.types.push(name.to_string());
        Ok(self.types.len() - 1)
    }

    /// Adds an entry; a repeated surface form keeps its first entity.
    pub fn add(&mut self, surface: Vec<String>, type_name: &str) -> Result<usize> {
        if surface.is_empty() {
            return Err(Error::EmptyInput("entity surface form"));
        }
        let type_id = self.add_type(type_name)?;
        if let Some(&id) = self.by_surface.get(&surface) {
            return Ok(id);
        }
        let id = self.entities.len();
        self.max_len = self.max_len.max(surface.len());
        self.by_surface.insert(surface.clone(), id);
        self.entities.push(Entity { surface, type_id });
        Ok(id)
    }

    /// Number of dictionary types, excluding `other`.
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Id of the reserved `other` type.
    pub fn other_type(&self) -> usize {
        self.types.len()
    }

    /// Type names with `other` appended last.
    pub fn tag_names(&self) -> Vec<String> {
        self.types.iter().cloned().chain([OTHER_TYPE.to_string()]).collect()
    }

    pub fn type_name(&self, id: usize) -> &str {
        self.types.get(id).map_or(OTHER_TYPE, String::as_str)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn lookup<S: AsRef<str>>(&self, surface: &[S]) -> Option<usize> {
        let key: Vec<String> = surface.iter().map(|s| s.as_ref().to_string()).collect();
        self.by_surface.get(&key).copied()
    }

    /// Greedy leftmost-longest, non-overlapping matches.
    pub fn tag<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<EntitySpan> {
        let toks: Vec<String> = tokens.iter().map(|s| s.as_ref().to_string()).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let longest = (1..=self.max_len.min(toks.len() - i))
                .rev()
                .find_map(|len| self.by_surface.get(&toks[i..i + len]).map(|&e| (len, e)));
            match longest {
                Some((len, entity)) => {
                    spans.push(EntitySpan {
                        start: i,
                        len,
                        entity,
                        type_id: self.entities[entity].type_id,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Per-token type id; unmatched tokens get [`Self::other_type`].
    pub fn token_types<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut out = vec![self.other_type(); tokens.len()];
        for s in self.tag(tokens) {
            out[s.start..s.start + s.len].fill(s.type_id);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `surface<TAB>type` lines; blank lines are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut d = EntityDictionary::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (surface, ty) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, format!("line {}: expected surface<TAB>type", n + 1)))?;
            let toks = super::tokenize(surface);
            d.add(toks, ty.trim())
                .map_err(|e| Error::parse(source, format!("line {}: {e}", n + 1)))?;
        }
        Ok(d)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entities {
            let _ = writeln!(s, "{}\t{}", super::detokenize(&e.surface), self.types[e.type_id]);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
