//! Core data model: demonstration records, scene graphs, the answer
//! vocabulary, and JSON-lines library I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingProvider, EmbeddingVector, TrigramEmbedder};
use crate::error::{Error, Result};
use crate::normalize::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One annotated example: an image (by reference), its caption, a question
/// about it, and the ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationRecord {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub question: String,
    pub answer: String,
    pub split: Split,
    #[serde(rename = "q_emb", default, skip_serializing_if = "Option::is_none")]
    pub question_embedding: Option<EmbeddingVector>,
    #[serde(rename = "i_emb", default, skip_serializing_if = "Option::is_none")]
    pub image_embedding: Option<EmbeddingVector>,
}

impl DemonstrationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("record has empty id"));
        }
        for (field, value) in [
            ("image_ref", &self.image_ref),
            ("caption", &self.caption),
            ("question", &self.question),
        ] {
            if value.trim().is_empty() {
                return Err(Error::validation(format!(
                    "record '{}' has empty {field}",
                    self.id
                )));
            }
        }
        if normalize_answer(&self.answer).is_empty() {
            return Err(Error::validation(format!(
                "record '{}' has empty answer",
                self.id
            )));
        }
        for (name, emb) in [
            ("q_emb", &self.question_embedding),
            ("i_emb", &self.image_embedding),
        ] {
            if let Some(v) = emb {
                let norm = v.l2_norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "record '{}' {name} has norm {norm}, expected 1",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A subquestion and its answer; the unit of gold decompositions and
/// manual pool annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub category: String,
    pub attributes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
}

/// Ground-truth scene structure for one image: typed objects plus
/// directed relation triples.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<SceneRelation>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.objects.iter().map(|o| o.object_id.as_str()).collect();
        if ids.len() != self.objects.len() {
            return Err(Error::validation("scene graph has duplicate object ids"));
        }
        let mut seen = BTreeSet::new();
        for rel in &self.relations {
            if !ids.contains(rel.subject_id.as_str()) || !ids.contains(rel.object_id.as_str()) {
                return Err(Error::validation(format!(
                    "relation ({}, {}, {}) references a missing object",
                    rel.subject_id, rel.predicate, rel.object_id
                )));
            }
            if !seen.insert(rel) {
                return Err(Error::validation(format!(
                    "duplicate relation ({}, {}, {})",
                    rel.subject_id, rel.predicate, rel.object_id
                )));
            }
        }
        Ok(())
    }

    pub fn object(&self, object_id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn has_relation(&self, subject_id: &str, predicate: &str, object_id: &str) -> bool {
        self.relations.iter().any(|r| {
            r.subject_id == subject_id && r.predicate == predicate && r.object_id == object_id
        })
    }
}

/// The closed answer set of a library, with cached entry embeddings for
/// alignment. Entries are normalized and ordered by first occurrence.
#[derive(Debug, Clone)]
pub struct AnswerVocabulary {
    entries: Vec<String>,
    entry_embeddings: Vec<EmbeddingVector>,
}

impl AnswerVocabulary {
    pub fn from_answers<'a>(
        answers: impl IntoIterator<Item = &'a str>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for raw in answers {
            let normalized = normalize_answer(raw);
            if normalized.is_empty() {
                continue;
            }
            if seen.insert(normalized.clone()) {
                entries.push(normalized);
            }
        }
        let entry_embeddings = entries
            .iter()
            .map(|e| provider.embed(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnswerVocabulary {
            entries,
            entry_embeddings,
        })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn embeddings(&self) -> &[EmbeddingVector] {
        &self.entry_embeddings
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.entries.iter().any(|e| e == normalized)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// A loaded demonstration library: records in file order plus the derived
/// answer vocabulary.
#[derive(Debug, Clone)]
pub struct Library {
    records: Vec<DemonstrationRecord>,
    vocabulary: AnswerVocabulary,
    by_id: BTreeMap<String, usize>,
}

impl Library {
    pub fn from_records(records: Vec<DemonstrationRecord>) -> Result<Self> {
        Self::from_records_with_provider(records, &TrigramEmbedder::default())
    }

    pub fn from_records_with_provider(
        records: Vec<DemonstrationRecord>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (idx, record) in records.iter().enumerate() {
            record.validate()?;
            if by_id.insert(record.id.clone(), idx).is_some() {
                return Err(Error::validation(format!(
                    "duplicate record id '{}'",
                    record.id
                )));
            }
        }
        let vocabulary =
            AnswerVocabulary::from_answers(records.iter().map(|r| r.answer.as_str()), provider)?;
        Ok(Library {
            records,
            vocabulary,
            by_id,
        })
    }

    pub fn records(&self) -> &[DemonstrationRecord] {
        &self.records
    }

    /// Fill missing embeddings in place: questions are embedded directly,
    /// captions stand in for image features.
    pub fn materialize_embeddings(&mut self, provider: &dyn EmbeddingProvider) -> Result<usize> {
        let mut filled = 0;
        for record in &mut self.records {
            if record.question_embedding.is_none() {
                record.question_embedding = Some(provider.embed(&record.question)?);
                filled += 1;
            }
            if record.image_embedding.is_none() {
                record.image_embedding = Some(provider.embed(&record.caption)?);
                filled += 1;
            }
        }
        Ok(filled)
    }

    pub fn vocabulary(&self) -> &AnswerVocabulary {
        &self.vocabulary
    }

    pub fn get(&self, id: &str) -> Option<&DemonstrationRecord> {
        self.by_id.get(id).map(|idx| &self.records[*idx])
    }

    pub fn train_records(&self) -> impl Iterator<Item = &DemonstrationRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &DemonstrationRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Load a JSON-lines library file. Blank lines are skipped; any malformed
/// line fails with its line number.
pub fn load_library(path: impl AsRef<Path>) -> Result<Library> {
    let file = fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DemonstrationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Library::from_records(records)
}

/// Write a library back to JSON-lines, one record per line in order.
/// `save(load(save(x)))` is byte-identical to `save(load(x))`.
pub fn save_library(path: impl AsRef<Path>, library: &Library) -> Result<()> {
    let mut out = Vec::new();
    for record in library.records() {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| Error::validation(format!("serialize record '{}': {e}", record.id)))?;
        out.push(b'\n');
    }
    write_atomic(path.as_ref(), &out)
}

/// Load a scene-graph file: a JSON object mapping image_ref to a graph
/// with objects/relations arrays.
pub fn load_scene_graphs(path: impl AsRef<Path>) -> Result<BTreeMap<String, SceneGraph>> {
    let text = fs::read_to_string(path.as_ref())?;
    let scenes: BTreeMap<String, SceneGraph> =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
    for (image_ref, graph) in &scenes {
        graph
            .validate()
            .map_err(|e| Error::validation(format!("scene '{image_ref}': {e}")))?;
    }
    Ok(scenes)
}

pub fn save_scene_graphs(
    path: impl AsRef<Path>,
    scenes: &BTreeMap<String, SceneGraph>,
) -> Result<()> {
    let mut text = serde_json::to_string_pretty(scenes)
        .map_err(|e| Error::validation(format!("serialize scenes: {e}")))?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Load gold decompositions: record id to ordered subquestion/answer pairs.
pub fn load_gold(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<QaPair>>> {
    let text = fs::read_to_string(path.as_ref())?;
    let gold: BTreeMap<String, Vec<QaPair>> =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
    for (id, pairs) in &gold {
        if pairs.is_empty() {
            return Err(Error::validation(format!(
                "gold decomposition for '{id}' is empty"
            )));
        }
    }
    Ok(gold)
}

pub fn save_gold(path: impl AsRef<Path>, gold: &BTreeMap<String, Vec<QaPair>>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(gold)
        .map_err(|e| Error::validation(format!("serialize gold: {e}")))?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Write via a temp file in the same directory, then rename into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.to_path_buf();
    let base = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("output");
    tmp.set_file_name(format!(
        ".{base}.tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
