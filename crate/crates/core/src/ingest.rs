//! Document ingestion: textualize non-text regions into a single stream, split
//! it into sentences and pack sentences into chunks.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Chunk, ChunkId, ElementKind, Provenance};
use crate::text::token_count;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document {doc_id}: cannot read {source_path}: {reason}")]
    Unreadable {
        doc_id: String,
        source_path: String,
        reason: String,
    },
    #[error("document {doc_id} is empty")]
    Empty { doc_id: String },
    #[error("document {doc_id}: textualizer `{textualizer}` failed: {reason}")]
    Textualizer {
        doc_id: String,
        textualizer: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionProvenance {
    #[serde(default)]
    pub page: Option<u32>,
    #[serde(default)]
    pub region: Option<String>,
}

impl RegionProvenance {
    fn label(&self) -> Option<String> {
        match (self.page, &self.region) {
            (Some(p), Some(r)) => Some(format!("p{p}/{r}")),
            (Some(p), None) => Some(format!("p{p}")),
            (None, Some(r)) => Some(r.clone()),
            (None, None) => None,
        }
    }
}

/// One element of a region-annotated document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kind: ElementKind,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub cells: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub provenance: RegionProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum RawDocument {
    Plain {
        doc_id: String,
        source: String,
        text: String,
    },
    Regions {
        doc_id: String,
        source: String,
        segments: Vec<Region>,
    },
}

impl RawDocument {
    pub fn doc_id(&self) -> &str {
        match self {
            RawDocument::Plain { doc_id, .. } | RawDocument::Regions { doc_id, .. } => doc_id,
        }
    }

    pub fn plain(doc_id: &str, text: &str) -> Self {
        RawDocument::Plain {
            doc_id: doc_id.to_string(),
            source: format!("{doc_id}.txt"),
            text: text.to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RegionFile {
    #[serde(default)]
    doc_id: Option<String>,
    segments: Vec<Region>,
}

/// Doc id from a file stem, restricted to `[A-Za-z0-9_-]`.
pub fn doc_id_from_path(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".to_string());
    stem.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Load a `.json` region-annotated document or any other file as plain text.
pub fn load_document(path: &Path) -> Result<RawDocument, IngestError> {
    let doc_id = doc_id_from_path(path);
    let source = path.display().to_string();
    let unreadable = |reason: String| IngestError::Unreadable {
        doc_id: doc_id.clone(),
        source_path: source.clone(),
        reason,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let file: RegionFile = serde_json::from_str(&raw).map_err(|e| unreadable(e.to_string()))?;
        Ok(RawDocument::Regions {
            doc_id: file.doc_id.unwrap_or(doc_id),
            source,
            segments: file.segments,
        })
    } else {
        Ok(RawDocument::Plain { doc_id, source, text: raw })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub kind: ElementKind,
    /// Page/region label; always present for non-narrative segments.
    pub region: Option<String>,
}

/// Reading-order text stream of one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentStream {
    pub doc_id: String,
    pub source: String,
    pub segments: Vec<Segment>,
}

impl DocumentStream {
    pub const SEPARATOR: &'static str = "\n\n";

    /// Segment texts joined with a blank line.
    pub fn text(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(Self::SEPARATOR)
    }
}

/// Turns a non-text region into text. `Ok(None)` means "leave a placeholder".
pub trait Textualizer: Send + Sync {
    fn name(&self) -> &str;
    fn textualize(&self, region: &Region) -> Result<Option<String>, String>;
}

/// Passes any text the region already carries through unchanged.
pub struct IdentityTextualizer;

impl Textualizer for IdentityTextualizer {
    fn name(&self) -> &str {
        "identity"
    }

    fn textualize(&self, region: &Region) -> Result<Option<String>, String> {
        Ok(region.text.clone().filter(|t| !t.trim().is_empty()))
    }
}

/// Deterministic stand-in for a vision model: tables become
/// `TABLE: a | b; c | d`, figures `FIGURE: <caption>`, equations
/// `EQUATION: <source>`.
pub struct StubTextualizer;

impl Textualizer for StubTextualizer {
    fn name(&self) -> &str {
        "stub"
    }

    fn textualize(&self, region: &Region) -> Result<Option<String>, String> {
        let body = match (&region.cells, &region.text, &region.image_ref) {
            (Some(cells), _, _) => cells
                .iter()
                .map(|row| row.join(" | "))
                .collect::<Vec<_>>()
                .join("; "),
            (None, Some(t), _) => t.clone(),
            (None, None, Some(img)) => img.clone(),
            (None, None, None) => return Ok(None),
        };
        let tag = match region.kind {
            ElementKind::Table => "TABLE",
            ElementKind::Figure => "FIGURE",
            ElementKind::Equation => "EQUATION",
            ElementKind::Other => "ELEMENT",
            ElementKind::Narrative => return Ok(Some(body)),
        };
        Ok(Some(format!("{tag}: {body}")))
    }
}

/// Runs `sh -c <command>` with the region JSON on stdin; stdout is the text.
pub struct CommandTextualizer {
    pub command: String,
}

impl Textualizer for CommandTextualizer {
    fn name(&self) -> &str {
        "command"
    }

    fn textualize(&self, region: &Region) -> Result<Option<String>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let input = serde_json::to_vec(region).map_err(|e| e.to_string())?;
        child
            .stdin
            .take()
            .ok_or("no stdin")?
            .write_all(&input)
            .map_err(|e| e.to_string())?;
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
        let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
        Ok(if text.is_empty() { None } else { Some(text) })
    }
}

/// Build the reading-order stream of a document.
pub fn textualize(doc: &RawDocument, textualizer: &dyn Textualizer) -> Result<DocumentStream, IngestError> {
    match doc {
        RawDocument::Plain { doc_id, source, text } => {
            if text.trim().is_empty() {
                return Err(IngestError::Empty { doc_id: doc_id.clone() });
            }
            Ok(DocumentStream {
                doc_id: doc_id.clone(),
                source: source.clone(),
                segments: vec![Segment {
                    text: text.clone(),
                    kind: ElementKind::Narrative,
                    region: None,
                }],
            })
        }
        RawDocument::Regions { doc_id, source, segments } => {
            let mut out = Vec::with_capacity(segments.len());
            for (i, region) in segments.iter().enumerate() {
                let label = region.provenance.label();
                if region.kind == ElementKind::Narrative {
                    match region.text.as_deref() {
                        Some(t) if !t.trim().is_empty() => out.push(Segment {
                            text: t.to_string(),
                            kind: ElementKind::Narrative,
                            region: label,
                        }),
                        _ => {}
                    }
                    continue;
                }
                let label = label.unwrap_or_else(|| format!("region-{i}"));
                let text = textualizer
                    .textualize(region)
                    .map_err(|reason| IngestError::Textualizer {
                        doc_id: doc_id.clone(),
                        textualizer: textualizer.name().to_string(),
                        reason,
                    })?
                    .unwrap_or_else(|| format!("[{} region {label}]", kind_name(region.kind)));
                out.push(Segment {
                    text,
                    kind: region.kind,
                    region: Some(label),
                });
            }
            if out.is_empty() {
                return Err(IngestError::Empty { doc_id: doc_id.clone() });
            }
            Ok(DocumentStream {
                doc_id: doc_id.clone(),
                source: source.clone(),
                segments: out,
            })
        }
    }
}

fn kind_name(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Narrative => "narrative",
        ElementKind::Figure => "figure",
        ElementKind::Table => "table",
        ElementKind::Equation => "equation",
        ElementKind::Other => "other",
    }
}

const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "inc", "corp", "ltd", "co", "jr", "sr", "st", "vs", "etc", "e.g", "i.e",
    "fig", "eq", "no", "approx", "dept", "est", "al", "cf", "sec", "vol",
];

fn is_abbreviation(word: &str) -> bool {
    let w = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    let stem = w.trim_end_matches('.');
    if stem.is_empty() {
        return false;
    }
    // Initials: "J." and dotted acronyms such as "I.B.M."
    if stem.chars().all(|c| c.is_alphabetic() || c == '.') && stem.split('.').all(|p| p.chars().count() <= 1) {
        return true;
    }
    ABBREVIATIONS.contains(&stem.to_lowercase().as_str())
}

/// Rule-based sentence splitter. Returns trimmed byte ranges covering every
/// non-whitespace character of `text`.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut cuts = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let para_break = c == '\n' && i + 1 < chars.len() && chars[i + 1].1 == '\n';
        if para_break {
            cuts.push(pos);
            i += 1;
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            // absorb closing punctuation
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '"' | '\'' | ')' | ']' | '.' | '!' | '?') {
                j += 1;
            }
            let end = chars.get(j).map_or(bytes.len(), |(p, _)| *p);
            let at_end = j >= chars.len();
            if at_end || chars[j].1.is_whitespace() {
                let word_start = text[..pos].rfind(char::is_whitespace).map_or(0, |p| p + 1);
                let word = &text[word_start..end];
                let next = chars[j..].iter().find(|(_, c)| !c.is_whitespace()).map(|(_, c)| *c);
                let next_ok = next.is_none_or(|n| n.is_uppercase() || n.is_ascii_digit() || matches!(n, '"' | '(' | '['));
                if c != '.' || (!is_abbreviation(word) && next_ok) {
                    cuts.push(end);
                }
            }
            i = j;
            continue;
        }
        i += 1;
    }
    cuts.push(bytes.len());

    let mut out = Vec::new();
    let mut start = 0;
    for cut in cuts {
        if cut <= start {
            continue;
        }
        let slice = &text[start..cut];
        let lead = slice.len() - slice.trim_start().len();
        let trimmed = slice.trim();
        if !trimmed.is_empty() {
            out.push((start + lead, start + lead + trimmed.len()));
        }
        start = cut;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkBounds {
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for ChunkBounds {
    fn default() -> Self {
        ChunkBounds {
            min_tokens: 100,
            max_tokens: 200,
        }
    }
}

struct Sentence {
    start: usize,
    end: usize,
    segment: usize,
    tokens: usize,
}

/// Pack sentences into chunks.
///
/// A chunk is emitted as soon as it reaches `min_tokens`, and before a
/// sentence that would push it over `max_tokens`. Sentences are never split,
/// so a sentence longer than `max_tokens` becomes its own chunk.
pub fn chunk(stream: &DocumentStream, bounds: ChunkBounds) -> Vec<Chunk> {
    assert!(bounds.min_tokens <= bounds.max_tokens, "min_tokens must not exceed max_tokens");
    let full = stream.text();
    let mut sentences = Vec::new();
    let mut offset = 0;
    for (si, seg) in stream.segments.iter().enumerate() {
        for (s, e) in split_sentences(&seg.text) {
            sentences.push(Sentence {
                start: offset + s,
                end: offset + e,
                segment: si,
                tokens: token_count(&seg.text[s..e]),
            });
        }
        offset += seg.text.len() + DocumentStream::SEPARATOR.len();
    }

    let mut groups: Vec<Vec<&Sentence>> = Vec::new();
    let mut current: Vec<&Sentence> = Vec::new();
    let mut tokens = 0;
    for s in &sentences {
        if !current.is_empty() && tokens + s.tokens > bounds.max_tokens {
            groups.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(s);
        tokens += s.tokens;
        if tokens >= bounds.min_tokens {
            groups.push(std::mem::take(&mut current));
            tokens = 0;
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }

    groups
        .into_iter()
        .enumerate()
        .map(|(ordinal, group)| {
            let start = group[0].start;
            let end = group[group.len() - 1].end;
            let text = full[start..end].to_string();
            let segs: BTreeSet<usize> = group.iter().map(|s| s.segment).collect();
            let mut regions = BTreeSet::new();
            let mut kinds = BTreeSet::new();
            for si in segs {
                let seg = &stream.segments[si];
                kinds.insert(seg.kind);
                if let Some(r) = &seg.region {
                    regions.insert(r.clone());
                }
            }
            Chunk {
                id: chunk_id(&stream.doc_id, ordinal),
                doc_id: stream.doc_id.clone(),
                ordinal,
                token_count: group.iter().map(|s| s.tokens).sum(),
                text,
                provenance: Provenance {
                    source: stream.source.clone(),
                    regions: regions.into_iter().collect(),
                    element_kinds: kinds.into_iter().collect(),
                },
            }
        })
        .collect()
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> ChunkId {
    ChunkId(format!("c_{doc_id}_{ordinal:04}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(n: usize, tag: &str) -> String {
        let mut words: Vec<String> = (0..n - 1).map(|i| format!("{tag}{i}")).collect();
        words.insert(0, "Word".to_string());
        format!("{}.", words.join(" "))
    }

    fn stream_of(text: &str) -> DocumentStream {
        textualize(&RawDocument::plain("d", text), &IdentityTextualizer).unwrap()
    }

    /// Independent packing oracle: recursive formulation over token counts.
    fn pack_oracle(counts: &[usize], min: usize, max: usize) -> Vec<usize> {
        fn go(rest: &[usize], acc: usize, min: usize, max: usize, out: &mut Vec<usize>) {
            match rest.split_first() {
                None => {
                    if acc > 0 {
                        out.push(acc)
                    }
                }
                Some((&n, tail)) => {
                    if acc > 0 && acc + n > max {
                        out.push(acc);
                        go(rest, 0, min, max, out)
                    } else if acc + n >= min {
                        out.push(acc + n);
                        go(tail, 0, min, max, out)
                    } else {
                        go(tail, acc + n, min, max, out)
                    }
                }
            }
        }
        let mut out = vec![];
        go(counts, 0, min, max, &mut out);
        out
    }

    #[test]
    fn plain_text_is_one_narrative_segment() {
        let s = stream_of("Alice works at Acme.\n\nSecond paragraph.");
        assert_eq!(s.segments.len(), 1);
        assert_eq!(s.segments[0].text, "Alice works at Acme.\n\nSecond paragraph.");
        assert_eq!(s.segments[0].kind, ElementKind::Narrative);
    }

    #[test]
    fn table_region_goes_through_stub() {
        let doc = RawDocument::Regions {
            doc_id: "d".into(),
            source: "d.json".into(),
            segments: vec![
                Region {
                    kind: ElementKind::Narrative,
                    text: Some("Pump P-1 feeds Tank T-2.".into()),
                    cells: None,
                    image_ref: None,
                    provenance: RegionProvenance { page: Some(1), region: None },
                },
                Region {
                    kind: ElementKind::Table,
                    text: None,
                    cells: Some(vec![vec!["a".into(), "b".into()], vec!["1".into(), "2".into()]]),
                    image_ref: None,
                    provenance: RegionProvenance {
                        page: Some(2),
                        region: Some("t1".into()),
                    },
                },
            ],
        };
        let s = textualize(&doc, &StubTextualizer).unwrap();
        assert_eq!(s.segments.len(), 2);
        assert_eq!(s.segments[1].kind, ElementKind::Table);
        assert_eq!(s.segments[1].text, "TABLE: a | b; 1 | 2");
        assert_eq!(s.segments[1].region.as_deref(), Some("p2/t1"));
        // identity leaves a placeholder that still carries provenance
        let s = textualize(&doc, &IdentityTextualizer).unwrap();
        assert_eq!(s.segments[1].text, "[table region p2/t1]");
    }

    #[test]
    fn empty_document_is_an_error() {
        let err = textualize(&RawDocument::plain("empty", "  \n"), &IdentityTextualizer).unwrap_err();
        assert!(matches!(err, IngestError::Empty { doc_id } if doc_id == "empty"));
    }

    #[test]
    fn unreadable_document_names_the_doc() {
        let err = load_document(Path::new("/nonexistent/report-7.txt")).unwrap_err();
        assert!(err.to_string().contains("report-7"));
    }

    #[test]
    fn command_textualizer_runs_a_shell_command() {
        let t = CommandTextualizer {
            command: "cat >/dev/null; echo described".into(),
        };
        let region = Region {
            kind: ElementKind::Figure,
            text: None,
            cells: None,
            image_ref: Some("fig.png".into()),
            provenance: RegionProvenance::default(),
        };
        assert_eq!(t.textualize(&region).unwrap().as_deref(), Some("described"));
    }

    #[test]
    fn splitter_respects_abbreviations() {
        let text = "Dr. Smith met I.B.M. staff at 5 p.m. today. Then he left! Did he? yes.";
        let parts: Vec<&str> = split_sentences(text).iter().map(|(s, e)| &text[*s..*e]).collect();
        assert_eq!(
            parts,
            vec!["Dr. Smith met I.B.M. staff at 5 p.m. today.", "Then he left!", "Did he?", "yes."]
        );
    }

    #[test]
    fn three_sixty_token_sentences() {
        let text = [sentence(60, "a"), sentence(60, "b"), sentence(60, "c")].join(" ");
        let chunks = chunk(&stream_of(&text), ChunkBounds::default());
        let counts: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(counts, pack_oracle(&[60, 60, 60], 100, 200));
        assert_eq!(counts, vec![120, 60]);
        assert!(chunks[0].text.ends_with("b58."));
    }

    #[test]
    fn oversized_sentence_is_its_own_chunk() {
        let chunks = chunk(&stream_of(&sentence(250, "x")), ChunkBounds::default());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_count, 250);
    }

    #[test]
    fn empty_stream_gives_no_chunks() {
        let s = DocumentStream {
            doc_id: "d".into(),
            source: "d".into(),
            segments: vec![],
        };
        assert!(chunk(&s, ChunkBounds::default()).is_empty());
    }

    #[test]
    fn chunk_provenance_unions_segments() {
        let doc = RawDocument::Regions {
            doc_id: "d".into(),
            source: "d.json".into(),
            segments: vec![
                Region {
                    kind: ElementKind::Narrative,
                    text: Some("Short intro.".into()),
                    cells: None,
                    image_ref: None,
                    provenance: RegionProvenance { page: Some(1), region: None },
                },
                Region {
                    kind: ElementKind::Equation,
                    text: Some("E = m c^2".into()),
                    cells: None,
                    image_ref: None,
                    provenance: RegionProvenance {
                        page: Some(1),
                        region: Some("eq1".into()),
                    },
                },
            ],
        };
        let chunks = chunk(&textualize(&doc, &StubTextualizer).unwrap(), ChunkBounds::default());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].provenance.regions, vec!["p1", "p1/eq1"]);
        assert_eq!(
            chunks[0].provenance.element_kinds,
            vec![ElementKind::Narrative, ElementKind::Equation]
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunking_preserves_text_and_bounds(lens in proptest::collection::vec(1usize..90, 0..25), min in 20usize..80, extra in 0usize..120) {
                let max = min + extra;
                let sentences: Vec<String> = lens.iter().enumerate().map(|(i, n)| sentence(*n, &format!("w{i}x"))).collect();
                let text = sentences.join(" ");
                prop_assume!(!text.trim().is_empty());
                let s = stream_of(&text);
                let chunks = chunk(&s, ChunkBounds { min_tokens: min, max_tokens: max });
                let joined: String = chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("");
                let strip = |t: &str| t.split_whitespace().collect::<String>();
                prop_assert_eq!(strip(&joined), strip(&text));
                let counts: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
                prop_assert_eq!(&counts, &pack_oracle(&lens, min, max));
                for c in &chunks {
                    prop_assert!(c.token_count <= max || lens.contains(&c.token_count));
                    prop_assert!(c.token_count > 0);
                }
                // stable ids and boundaries
                prop_assert_eq!(chunks, chunk(&s, ChunkBounds { min_tokens: min, max_tokens: max }));
            }
        }
    }
}
