//! Type-layout database: struct field extents and allocation-site bindings.
//!
//! ```text
//! type goaty {
//!     name:8;
//!     should_run_calc:4;
//!     spare:4@16;      # explicit offset
//! }
//! bind main:L0 goaty
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{Op, Program};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeDbError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("type `{0}` declared twice")]
    DuplicateType(String),
    #[error("fields `{first}` and `{second}` of `{ty}` overlap")]
    OverlappingFields {
        ty: String,
        first: String,
        second: String,
    },
    #[error("binding for `{site}` names unknown type `{ty}`")]
    UnknownTypeInBinding { site: String, ty: String },
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("type `{ty}` has no field `{field}`")]
    UnknownField { ty: String, field: String },
    #[error("binding site `{0}` is not an allocation in the program")]
    UnknownSite(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub offset: u64,
    pub size: u64,
}

impl Field {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }

    pub fn contains(&self, offset: u64) -> bool {
        offset >= self.offset && offset < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDef {
    pub name: String,
    /// Sorted by offset, non-overlapping.
    pub fields: Vec<Field>,
}

impl TypeDef {
    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_at(&self, offset: u64) -> Option<&Field> {
        self.fields.iter().find(|f| f.contains(offset))
    }

    pub fn size(&self) -> u64 {
        self.fields.last().map_or(0, Field::end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDb {
    types: BTreeMap<String, TypeDef>,
    /// `fn:label` of an allocation site -> type name.
    bindings: BTreeMap<String, String>,
}

impl TypeDb {
    pub fn get(&self, name: &str) -> Option<&TypeDef> {
        self.types.get(name)
    }

    pub fn types(&self) -> impl Iterator<Item = &TypeDef> {
        self.types.values()
    }

    pub fn binding(&self, site: &str) -> Option<&str> {
        self.bindings.get(site).map(String::as_str)
    }

    pub fn field_at(&self, ty: &str, offset: u64) -> Result<Option<&Field>, TypeDbError> {
        let def = self
            .get(ty)
            .ok_or_else(|| TypeDbError::UnknownType(ty.into()))?;
        Ok(def.field_at(offset))
    }

    /// Whether a write of `len` bytes at `offset` leaves the extent of `field`.
    pub fn crosses_field(
        &self,
        ty: &str,
        field: &str,
        offset: u64,
        len: u64,
    ) -> Result<bool, TypeDbError> {
        let def = self
            .get(ty)
            .ok_or_else(|| TypeDbError::UnknownType(ty.into()))?;
        let f = def.field(field).ok_or_else(|| TypeDbError::UnknownField {
            ty: ty.into(),
            field: field.into(),
        })?;
        Ok(offset < f.offset || offset.saturating_add(len) > f.end())
    }

    /// Checks bindings and annotations against a program. Bare binding
    /// labels are qualified with `main`.
    pub fn check_program(&mut self, program: &Program) -> Result<(), TypeDbError> {
        let bindings = std::mem::take(&mut self.bindings);
        for (site, ty) in bindings {
            let resolved = program
                .resolve_site(&site)
                .filter(|s| {
                    matches!(
                        program.instruction(*s).op,
                        Op::Alloc { .. } | Op::Calloc { .. } | Op::Realloc { .. }
                    )
                })
                .ok_or_else(|| TypeDbError::UnknownSite(site.clone()))?;
            self.bindings.insert(program.site_label(resolved), ty);
        }
        for site in program.sites() {
            match &program.instruction(site).op {
                Op::Alloc { ty: Some(t), .. } | Op::Calloc { ty: Some(t), .. } => {
                    if self.get(t).is_none() {
                        return Err(TypeDbError::UnknownType(t.clone()));
                    }
                }
                Op::Store { field: Some(f), .. }
                | Op::Load { field: Some(f), .. }
                | Op::StoreBytes { field: Some(f), .. } => {
                    let def = self
                        .get(&f.ty)
                        .ok_or_else(|| TypeDbError::UnknownType(f.ty.clone()))?;
                    if def.field(&f.field).is_none() {
                        return Err(TypeDbError::UnknownField {
                            ty: f.ty.clone(),
                            field: f.field.clone(),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn syntax(msg: impl Into<String>) -> TypeDbError {
    TypeDbError::Syntax(msg.into())
}

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_number(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        let mut word = String::new();
        for c in line.chars() {
            if c.is_whitespace() || matches!(c, '{' | '}' | ';') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                if !c.is_whitespace() {
                    out.push(c.to_string());
                }
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Parses `name:size` or `name:size@offset`.
fn parse_field(entry: &str, next_offset: u64) -> Result<Field, TypeDbError> {
    let (name, rest) = entry
        .split_once(':')
        .ok_or_else(|| syntax(format!("field `{entry}` needs `name:size`")))?;
    if !is_ident(name) {
        return Err(syntax(format!("bad field name `{name}`")));
    }
    let (size, offset) = match rest.split_once('@') {
        Some((s, o)) => (s, Some(o)),
        None => (rest, None),
    };
    let size = parse_number(size)
        .filter(|s| *s > 0)
        .ok_or_else(|| syntax(format!("bad size in `{entry}`")))?;
    let offset = match offset {
        Some(o) => parse_number(o).ok_or_else(|| syntax(format!("bad offset in `{entry}`")))?,
        None => next_offset,
    };
    Ok(Field {
        name: name.to_string(),
        offset,
        size,
    })
}

pub fn parse_typedb(text: &str) -> Result<TypeDb, TypeDbError> {
    let toks = tokens(text);
    let mut db = TypeDb::default();
    let mut i = 0;
    while i < toks.len() {
        match toks[i].as_str() {
            "type" => {
                let name = toks
                    .get(i + 1)
                    .filter(|n| is_ident(n))
                    .ok_or_else(|| syntax("expected type name"))?;
                if toks.get(i + 2).map(String::as_str) != Some("{") {
                    return Err(syntax(format!("expected `{{` after `type {name}`")));
                }
                i += 3;
                let mut fields: Vec<Field> = Vec::new();
                let mut entry = String::new();
                loop {
                    let tok = toks
                        .get(i)
                        .ok_or_else(|| syntax(format!("type `{name}` is not closed")))?;
                    i += 1;
                    match tok.as_str() {
                        ";" | "}" => {
                            if !entry.is_empty() {
                                let next = fields.last().map_or(0, Field::end);
                                let field = parse_field(&entry, next)?;
                                if fields.iter().any(|f| f.name == field.name) {
                                    return Err(syntax(format!(
                                        "duplicate field `{}` in `{name}`",
                                        field.name
                                    )));
                                }
                                fields.push(field);
                                entry.clear();
                            }
                            if tok == "}" {
                                break;
                            }
                        }
                        "{" => return Err(syntax("nested types are not supported")),
                        w => entry.push_str(w),
                    }
                }
                fields.sort_by_key(|f| f.offset);
                for pair in fields.windows(2) {
                    if pair[0].end() > pair[1].offset {
                        return Err(TypeDbError::OverlappingFields {
                            ty: name.clone(),
                            first: pair[0].name.clone(),
                            second: pair[1].name.clone(),
                        });
                    }
                }
                if db.types.contains_key(name) {
                    return Err(TypeDbError::DuplicateType(name.clone()));
                }
                db.types.insert(
                    name.clone(),
                    TypeDef {
                        name: name.clone(),
                        fields,
                    },
                );
            }
            "bind" => {
                let site = toks
                    .get(i + 1)
                    .ok_or_else(|| syntax("expected site after `bind`"))?;
                let ty = toks
                    .get(i + 2)
                    .filter(|t| is_ident(t))
                    .ok_or_else(|| syntax("expected type after site"))?;
                db.bindings.insert(site.clone(), ty.clone());
                i += 3;
                if toks.get(i).map(String::as_str) == Some(";") {
                    i += 1;
                }
            }
            other => return Err(syntax(format!("unexpected `{other}`"))),
        }
    }
    for (site, ty) in &db.bindings {
        if !db.types.contains_key(ty) {
            return Err(TypeDbError::UnknownTypeInBinding {
                site: site.clone(),
                ty: ty.clone(),
            });
        }
    }
    Ok(db)
}
