//! Module repository: every module found under a set of directories,
//! indexed by kind, plus the converter graph assembled from converter
//! modules.

use crate::eval::{dry_run, EvalContext, ModuleMetadata};
use crate::sail::{parse, ModuleDecl, ModuleKind};
use crate::types::{ConverterEdge, ConverterGraph, KernelRegistry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;
use walkdir::WalkDir;

pub const INDEX_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("duplicate {kind} module `{name}` in {first} and {second}")]
    DuplicateName { kind: ModuleKind, name: String, first: String, second: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("index version {found:?} is not supported (expected {INDEX_VERSION})")]
    VersionMismatch { found: Option<u64> },
    #[error("malformed index: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub line: u32,
    pub col: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub id: String,
    pub kind: ModuleKind,
    pub name: String,
    pub path: String,
    pub decl: ModuleDecl,
    /// Context-free dry run; absent when the body raised an error.
    #[serde(skip)]
    pub metadata: Option<ModuleMetadata>,
}

/// Stable record id: changes iff path, name or the module's text changes.
pub fn record_id(path: &str, name: &str, text: &str) -> String {
    let mut h = Sha256::new();
    for part in [path, name, text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone)]
pub struct RepoIndex {
    /// Sorted by (path, name).
    pub records: Vec<ModuleRecord>,
    /// Files that failed to parse.
    pub diagnostics: Vec<Diagnostic>,
    /// Problems found while dry-running records or assembling converters;
    /// recomputed on load.
    pub warnings: Vec<Diagnostic>,
    pub converters: ConverterGraph,
}

impl PartialEq for RepoIndex {
    fn eq(&self, other: &RepoIndex) -> bool {
        self.records == other.records && self.diagnostics == other.diagnostics && self.warnings == other.warnings
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    v: u64,
    records: Vec<ModuleRecord>,
    diagnostics: Vec<Diagnostic>,
}

impl RepoIndex {
    pub fn empty() -> RepoIndex {
        RepoIndex {
            records: Vec::new(),
            diagnostics: Vec::new(),
            warnings: Vec::new(),
            converters: ConverterGraph::new(KernelRegistry::builtin()),
        }
    }

    /// Builds an index from already-parsed modules (path, decl, text).
    pub fn from_modules(mut mods: Vec<(String, ModuleDecl, String)>) -> Result<RepoIndex, RepoError> {
        mods.sort_by(|a, b| (&a.0, &a.1.name).cmp(&(&b.0, &b.1.name)));
        let mut records: Vec<ModuleRecord> = Vec::new();
        for (path, decl, text) in mods {
            if let Some(prev) = records.iter().find(|r| r.kind == decl.kind && r.name == decl.name) {
                return Err(RepoError::DuplicateName {
                    kind: decl.kind,
                    name: decl.name.clone(),
                    first: prev.path.clone(),
                    second: path,
                });
            }
            records.push(ModuleRecord {
                id: record_id(&path, &decl.name, &text),
                kind: decl.kind,
                name: decl.name.clone(),
                path,
                decl,
                metadata: None,
            });
        }
        let mut idx = RepoIndex::empty();
        idx.records = records;
        idx.refresh();
        Ok(idx)
    }

    /// Recomputes the metadata cache and the converter graph.
    fn refresh(&mut self) {
        let mut diags = Vec::new();
        let metas: Vec<_> = self.records.par_iter().map(|r| dry_run(&r.decl, &EvalContext::new(0))).collect();
        for (r, m) in self.records.iter_mut().zip(metas) {
            match m {
                Ok((meta, _)) => r.metadata = Some(meta),
                Err(e) => {
                    let s = e.to_string();
                    diags.push(Diagnostic { path: r.path.clone(), line: r.decl.span.line, col: r.decl.span.col, message: s });
                    r.metadata = None;
                }
            }
        }
        let mut graph = ConverterGraph::new(KernelRegistry::builtin());
        for r in self.records.iter().filter(|r| r.kind == ModuleKind::Converter) {
            let Some((src, dst)) = r.metadata.as_ref().and_then(|m| m.convert.clone()) else {
                diags.push(Diagnostic {
                    path: r.path.clone(),
                    line: r.decl.span.line,
                    col: r.decl.span.col,
                    message: format!("converter `{}` declares no Model.Convert", r.name),
                });
                continue;
            };
            let kernel = r.decl.meta_str("kernel").map(String::from);
            if let Some(k) = &kernel {
                if graph.kernels().get(k).is_none() {
                    diags.push(Diagnostic {
                        path: r.path.clone(),
                        line: r.decl.span.line,
                        col: r.decl.span.col,
                        message: format!("converter `{}` names unknown kernel `{k}`", r.name),
                    });
                }
            }
            graph.add_edge(ConverterEdge { id: r.id.clone(), name: r.name.clone(), src, dst, kernel });
        }
        self.converters = graph;
        self.warnings = diags;
    }

    pub fn of_kind(&self, kind: ModuleKind) -> impl Iterator<Item = &ModuleRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: ModuleKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn get(&self, kind: ModuleKind, name: &str) -> Option<&ModuleRecord> {
        self.records.iter().find(|r| r.kind == kind && r.name == name)
    }

    pub fn by_id(&self, id: &str) -> Option<&ModuleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Keeps only the records accepted by `keep`; converters are always kept.
    pub fn filtered(&self, keep: impl Fn(&ModuleRecord) -> bool) -> RepoIndex {
        let mut idx = self.clone();
        idx.records.retain(|r| r.kind == ModuleKind::Converter || keep(r));
        idx
    }

    pub fn to_json(&self) -> String {
        let f = IndexFile { v: INDEX_VERSION, records: self.records.clone(), diagnostics: self.diagnostics.clone() };
        let mut s = serde_json::to_string_pretty(&f).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<RepoIndex, RepoError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|_| RepoError::VersionMismatch { found: None })?;
        let v = raw.get("v").and_then(serde_json::Value::as_u64);
        if v != Some(INDEX_VERSION) {
            return Err(RepoError::VersionMismatch { found: v });
        }
        let f: IndexFile = serde_json::from_value(raw).map_err(|e| RepoError::Malformed(e.to_string()))?;
        let mut idx = RepoIndex::empty();
        idx.records = f.records;
        idx.diagnostics = f.diagnostics;
        idx.refresh();
        Ok(idx)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RepoError {
    RepoError::Io { path: path.display().to_string(), source }
}

/// Parses every `.sail` file under `roots`. Files that fail to parse become
/// diagnostics; they never abort the scan.
pub fn scan(roots: &[PathBuf]) -> Result<RepoIndex, RepoError> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for root in roots {
        if root.is_file() {
            let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            files.push((name, root.clone()));
            continue;
        }
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let p = e.path().unwrap_or(root).to_path_buf();
                io_err(&p, e.into())
            })?;
            if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "sail") {
                let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                files.push((rel, entry.path().to_path_buf()));
            }
        }
    }
    type Parsed = Result<Vec<(ModuleDecl, String)>, Diagnostic>;
    let parsed: Vec<Result<(String, Parsed), RepoError>> = files
        .par_iter()
        .map(|(rel, full)| {
            let text = std::fs::read_to_string(full).map_err(|e| io_err(full, e))?;
            Ok((
                rel.clone(),
                parse(&text)
                    .map(|decls| {
                        decls
                            .into_iter()
                            .map(|d| {
                                let slice = text[d.span.offset..d.span.end()].to_string();
                                (d, slice)
                            })
                            .collect()
                    })
                    .map_err(|e| {
                        let sp = e.span();
                        Diagnostic { path: rel.clone(), line: sp.line, col: sp.col, message: e.to_string() }
                    }),
            ))
        })
        .collect();
    let mut mods = Vec::new();
    let mut diags = Vec::new();
    for p in parsed {
        let (rel, r) = p?;
        match r {
            Ok(ds) => mods.extend(ds.into_iter().map(|(d, t)| (rel.clone(), d, t))),
            Err(d) => diags.push(d),
        }
    }
    let mut idx = RepoIndex::from_modules(mods)?;
    idx.diagnostics = diags;
    Ok(idx)
}
