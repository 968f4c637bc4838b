//! Deterministic rule engine standing in for the chat model.
//!
//! Each stage tag has a small, documented rule so tests can compute the
//! expected reply independently:
//!
//! * entity recognition: runs of capitalized tokens (leading stopwords
//!   dropped, runs end at punctuation), one mention per distinct name;
//! * entity resolution: union of pairs whose name similarity reaches the
//!   threshold (equal normalized keys score 1, otherwise trigram Jaccard);
//! * class recognition: one class per type hint;
//! * class resolution: merge classes with equal label keys, then attach a
//!   group from a small taxonomy;
//! * relation recognition: two entity surface forms in one sentence separated
//!   by one to four lower-case words;
//! * relation resolution: synonym table for canonical labels, class and
//!   group tables, duplicate and inverse-duplicate merges;
//! * retention judge: subject, object and predicate (or a synonym) all occur
//!   in the statement for one triple;
//! * schema verification: label keys and a small specialization taxonomy.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use super::prompts::input_of;
use super::{ChatProvider, ChatRequest, ProviderError, StageTag};
use crate::ingest::split_sentences;
use crate::model::HintType;
use crate::text::{char_trigrams, jaccard, label_key, normalize_key, slug};

#[derive(Debug, Clone)]
pub struct StubChat {
    /// Name similarity at or above which entity resolution merges.
    pub similarity_threshold: f64,
}

impl Default for StubChat {
    fn default() -> Self {
        StubChat {
            similarity_threshold: 0.9,
        }
    }
}

impl ChatProvider for StubChat {
    fn identity(&self) -> String {
        format!("stub-rules(sim={})", self.similarity_threshold)
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let Some(input) = input_of(&req.prompt) else {
            return Ok(String::new());
        };
        let reply = match req.expect {
            StageTag::EntityRecognition => entity_recognition(&input),
            StageTag::EntityResolution => entity_resolution(&input, self.similarity_threshold),
            StageTag::ClassRecognition => class_recognition(&input),
            StageTag::ClassResolution => class_resolution(&input),
            StageTag::RelationRecognition => relation_recognition(&input),
            StageTag::RelationResolution => relation_resolution(&input),
            StageTag::RetentionJudge => retention_judge(&input),
            StageTag::SchemaVerify => schema_verify(&input),
        };
        Ok(reply.to_string())
    }
}

fn str_of<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn array_of<'a>(v: &'a Value, key: &str) -> &'a [Value] {
    v.get(key).and_then(Value::as_array).map_or(&[], Vec::as_slice)
}

// ---------------------------------------------------------------- entities

const STOPWORDS: &[&str] = &[
    "a", "after", "all", "also", "although", "an", "and", "as", "at", "before", "both", "but", "by", "during", "each",
    "every", "for", "from", "he", "her", "his", "however", "if", "in", "it", "its", "many", "meanwhile", "most", "no",
    "on", "our", "she", "since", "some", "that", "the", "their", "then", "there", "these", "they", "this", "those",
    "to", "today", "we", "when", "while", "with", "yesterday",
];
const ORG_SUFFIXES: &[&str] = &[
    "co", "company", "corp", "corporation", "gmbh", "group", "inc", "industries", "institute", "labs", "llc", "ltd",
    "university",
];
const DEVICE_HEADS: &[&str] = &[
    "boiler", "compressor", "controller", "exchanger", "fan", "filter", "generator", "heater", "meter", "motor",
    "pump", "reactor", "sensor", "tank", "turbine", "valve",
];
const SYSTEM_HEADS: &[&str] = &["line", "loop", "network", "plant", "station", "system", "unit"];
const LOCATION_CUES: &[&str] = &["from", "in", "near", "outside", "to"];

fn acronym() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[A-Z]\.){2,}$").unwrap())
}

fn intrinsic_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\bhas an? ([a-z][a-z ]*?) of (\d+(?:\.\d+)?)(?: ?([A-Za-z%°/]+[A-Za-z]*))?").unwrap()
    })
}

/// Whitespace tokens with byte offsets.
fn tokens_with_offsets(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(b)) => {
                out.push((b, &s[b..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(b) = start {
        out.push((b, &s[b..]));
    }
    out
}

/// Token core without surrounding punctuation, plus whether the token ended
/// with punctuation that closes a name run. Dotted acronyms keep their dots.
fn token_core(tok: &str) -> (usize, &str, bool) {
    let lead = tok.len() - tok.trim_start_matches(['(', '"', '\'', '[']).len();
    let body = &tok[lead..];
    if acronym().is_match(body) {
        return (lead, body, false);
    }
    let core = body.trim_end_matches(|c: char| !c.is_alphanumeric());
    (lead, core, core.len() < body.len())
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

fn type_hint(name: &str, preceding: Option<&str>) -> Option<&'static str> {
    let lower: Vec<String> = name.split_whitespace().map(|w| normalize_key(w)).collect();
    let last = lower.last().map(String::as_str).unwrap_or("");
    if ORG_SUFFIXES.contains(&last) {
        return Some("Organization");
    }
    if lower.iter().any(|w| DEVICE_HEADS.contains(&w.as_str())) {
        return Some("Device");
    }
    if SYSTEM_HEADS.contains(&last) {
        return Some("System");
    }
    if preceding.is_some_and(|p| LOCATION_CUES.contains(&p)) {
        return Some("Location");
    }
    let words: Vec<&str> = name.split_whitespace().collect();
    if (2..=3).contains(&words.len()) && words.iter().all(|w| w.chars().all(char::is_alphabetic)) {
        return Some("Person");
    }
    None
}

/// Capitalized-token name runs of one sentence: `(start, end, name, preceding word)`.
pub fn capitalized_runs(sentence: &str) -> Vec<(usize, usize, String, Option<String>)> {
    let toks = tokens_with_offsets(sentence);
    let mut runs = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new(); // (start, end) byte ranges of cores
    let mut run_prev: Option<String> = None;
    let mut prev_word: Option<String> = None;
    let flush = |current: &mut Vec<(usize, usize)>, prev: &Option<String>, runs: &mut Vec<_>| {
        if let (Some(first), Some(last)) = (current.first(), current.last()) {
            runs.push((first.0, last.1, sentence[first.0..last.1].to_string(), prev.clone()));
        }
        current.clear();
    };
    for (off, tok) in toks {
        let (lead, core, closes) = token_core(tok);
        let lower = core.to_lowercase();
        let capital = is_capitalized(core) && !(current.is_empty() && STOPWORDS.contains(&lower.as_str()));
        if capital {
            if current.is_empty() {
                run_prev = prev_word.clone();
            }
            current.push((off + lead, off + lead + core.len()));
            if closes {
                flush(&mut current, &run_prev, &mut runs);
            }
        } else {
            flush(&mut current, &run_prev, &mut runs);
        }
        prev_word = Some(lower);
    }
    flush(&mut current, &run_prev, &mut runs);
    runs
}

fn truncate_words(s: &str, n: usize) -> String {
    s.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn entity_recognition(input: &Value) -> Value {
    let text = input.pointer("/focus/text").and_then(Value::as_str).unwrap_or("");
    let mut seen = BTreeSet::new();
    let mut mentions = Vec::new();
    for (s, e) in split_sentences(text) {
        let sentence = &text[s..e];
        let runs = capitalized_runs(sentence);
        let intrinsic: Vec<Value> = intrinsic_re()
            .captures_iter(sentence)
            .map(|c| {
                let unit = c.get(3).map(|m| m.as_str().to_string());
                json!({
                    "key": c[1].trim(),
                    "value": &c[2],
                    "value_kind": if unit.is_some() { "quantity" } else { "number" },
                    "unit": unit,
                    "evidence": [&c[0]],
                })
            })
            .collect();
        for (k, (_, _, name, prev)) in runs.into_iter().enumerate() {
            if !seen.insert(name.clone()) {
                continue;
            }
            mentions.push(json!({
                "name": name,
                "description": truncate_words(sentence, 20),
                "type_hint": type_hint(&name, prev.as_deref()),
                "confidence": 0.9,
                "evidence": [sentence],
                "intrinsic": if k == 0 { intrinsic.clone() } else { Vec::new() },
            }));
        }
    }
    json!({ "mentions": mentions })
}

/// Name similarity used by the resolution rule.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    if normalize_key(a) == normalize_key(b) {
        return 1.0;
    }
    jaccard(&char_trigrams(a), &char_trigrams(b))
}

fn entity_resolution(input: &Value, threshold: f64) -> Value {
    let items = array_of(input, "items");
    let names: Vec<Vec<&str>> = items
        .iter()
        .map(|it| {
            let mut n = vec![str_of(it, "name")];
            n.extend(array_of(it, "aliases").iter().filter_map(Value::as_str));
            n
        })
        .collect();
    let mut parent: Vec<usize> = (0..items.len()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let sim = names[i]
                .iter()
                .flat_map(|a| names[j].iter().map(move |b| name_similarity(a, b)))
                .fold(0.0, f64::max);
            if sim >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for i in 0..items.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().insert(str_of(&items[i], "id"));
    }
    let mut actions: Vec<Value> = groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|ids| {
            json!({
                "action": "MergeEntities",
                "ids": ids,
                "canonical_name": null,
                "description": null,
                "type_hint": null,
                "rationale": format!("names match at similarity >= {threshold:.2}"),
            })
        })
        .collect();
    actions.sort_by(|a, b| a["ids"][0].as_str().cmp(&b["ids"][0].as_str()));
    Value::Array(actions)
}

// ----------------------------------------------------------------- classes

fn class_recognition(input: &Value) -> Value {
    let mut by_type: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for e in array_of(input, "entities") {
        let t = e.get("type_hint").and_then(Value::as_str).filter(|t| !t.is_empty()).unwrap_or("Entity");
        by_type.entry(t.to_string()).or_default().push(str_of(e, "id"));
    }
    let classes: Vec<Value> = by_type
        .into_iter()
        .map(|(label, mut members)| {
            members.sort_unstable();
            json!({
                "label": label,
                "description": format!("Entities of type {label}."),
                "members": members,
            })
        })
        .collect();
    json!({ "classes": classes })
}

/// Group label for a class label under the stub taxonomy.
pub fn group_for_class(label: &str) -> String {
    let key = label_key(label);
    let head = key.rsplit(' ').next().unwrap_or("");
    let grouped = match head {
        "person" | "organization" | "organisation" | "company" | "corporation" | "agent" => "Agent",
        "location" | "city" | "place" | "country" | "region" | "site" => "Place",
        "device" | "system" | "equipment" => "Equipment",
        h if DEVICE_HEADS.contains(&h) || SYSTEM_HEADS.contains(&h) => "Equipment",
        _ => "",
    };
    if !grouped.is_empty() {
        return grouped.to_string();
    }
    let mut c = head.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => "Thing".to_string(),
    }
}

fn class_resolution(input: &Value) -> Value {
    let classes = array_of(input, "classes");
    let mut by_key: BTreeMap<String, Vec<&Value>> = BTreeMap::new();
    for c in classes {
        by_key.entry(label_key(str_of(c, "label"))).or_default().push(c);
    }
    let mut actions = Vec::new();
    let mut tmp = 0;
    for group in by_key.values() {
        let mut group = group.clone();
        group.sort_by_key(|c| str_of(c, "id"));
        let first = group[0];
        let needs_group = group.iter().all(|c| c.get("group").is_none_or(Value::is_null));
        if group.len() > 1 {
            tmp += 1;
            let pid = format!("tmp_{tmp}");
            let ids: Vec<&str> = group.iter().map(|c| str_of(c, "id")).collect();
            actions.push(json!({
                "action": "merge_classes",
                "class_ids": ids,
                "new_label": str_of(first, "label"),
                "new_description": null,
                "provisional_id": pid,
                "rationale": "labels differ only in case or number",
            }));
            if needs_group {
                actions.push(json!({
                    "action": "modify_class",
                    "class_id": pid,
                    "new_label": null,
                    "new_description": null,
                    "new_group": group_for_class(str_of(first, "label")),
                    "new_group_description": null,
                    "rationale": "attach merged class to its group",
                }));
            }
        } else if needs_group {
            actions.push(json!({
                "action": "modify_class",
                "class_id": str_of(first, "id"),
                "new_label": null,
                "new_description": null,
                "new_group": group_for_class(str_of(first, "label")),
                "new_group_description": null,
                "rationale": "attach class to its group",
            }));
        }
    }
    Value::Array(actions)
}

// --------------------------------------------------------------- relations

/// Raw predicate (slugged) → canonical label.
const SYNONYMS: &[(&str, &str)] = &[
    ("works_at", "works_at"),
    ("works_for", "works_at"),
    ("is_employed_by", "works_at"),
    ("employed_by", "works_at"),
    ("is_employed_at", "works_at"),
    ("located_in", "located_in"),
    ("is_located_in", "located_in"),
    ("is_based_in", "located_in"),
    ("based_in", "located_in"),
    ("feeds", "feeds"),
    ("supplies", "feeds"),
    ("is_fed_by", "fed_by"),
    ("fed_by", "fed_by"),
    ("is_supplied_by", "fed_by"),
    ("is_part_of", "part_of"),
    ("part_of", "part_of"),
    ("belongs_to", "part_of"),
    ("contains", "contains"),
    ("includes", "contains"),
    ("manufactures", "manufactures"),
    ("produces", "manufactures"),
    ("builds", "manufactures"),
    ("is_manufactured_by", "manufactured_by"),
    ("manufactured_by", "manufactured_by"),
    ("is_built_by", "manufactured_by"),
    ("triggers", "triggers"),
    ("causes", "triggers"),
    ("monitors", "monitors"),
    ("measures", "monitors"),
    ("tracks", "monitors"),
];

/// Inverse canonical label → forward canonical label.
const INVERSES: &[(&str, &str)] = &[
    ("fed_by", "feeds"),
    ("contains", "part_of"),
    ("manufactured_by", "manufactures"),
];

const REL_CLASSES: &[(&str, &str, &str)] = &[
    ("works_at", "employment", "Organizational"),
    ("located_in", "location", "Spatial"),
    ("feeds", "material_flow", "Process"),
    ("fed_by", "material_flow", "Process"),
    ("part_of", "composition", "Structural"),
    ("contains", "composition", "Structural"),
    ("manufactures", "production", "Process"),
    ("manufactured_by", "production", "Process"),
    ("triggers", "causation", "Causal"),
    ("monitors", "observation", "Informational"),
];

pub fn canonical_relation(raw: &str) -> String {
    let s = slug(raw);
    SYNONYMS
        .iter()
        .find(|(r, _)| *r == s)
        .map_or(s.clone(), |(_, c)| c.to_string())
}

/// Forward label that `canonical` is the inverse of, if any.
pub fn inverse_of(canonical: &str) -> Option<&'static str> {
    INVERSES.iter().find(|(i, _)| *i == canonical).map(|(_, f)| *f)
}

pub fn relation_class(canonical: &str) -> String {
    REL_CLASSES
        .iter()
        .find(|(c, _, _)| *c == canonical)
        .map_or(canonical.to_string(), |(_, cls, _)| cls.to_string())
}

pub fn relation_class_group(rel_cls: &str, hint: &str) -> String {
    REL_CLASSES
        .iter()
        .find(|(_, cls, _)| *cls == rel_cls)
        .map_or(hint.to_string(), |(_, _, g)| g.to_string())
}

/// Hint token for a canonical label.
pub fn hint_for(canonical: &str) -> HintType {
    match canonical {
        "works_at" => HintType::Role,
        "located_in" => HintType::Spatiality,
        "feeds" | "fed_by" => HintType::Dependency,
        "part_of" | "contains" => HintType::Composition,
        "manufactures" | "manufactured_by" => HintType::Transformation,
        "triggers" => HintType::Causality,
        "monitors" => HintType::Information,
        c if c.starts_with("precedes") || c.starts_with("follows") => HintType::Temporality,
        c if c.starts_with("is_a") || c.starts_with("same_as") => HintType::Identity,
        c if c.contains("used_for") => HintType::Purpose,
        c if c.contains("connected") || c.contains("coupled") => HintType::Coupling,
        c if c.contains("than") => HintType::Comparison,
        _ => HintType::Association,
    }
}

/// Every phrase (underscores as spaces) that maps to the same canonical label.
pub fn predicate_synonyms(label: &str) -> Vec<String> {
    let canonical = canonical_relation(label);
    let mut out: BTreeSet<String> = SYNONYMS
        .iter()
        .filter(|(_, c)| *c == canonical)
        .map(|(r, _)| r.replace('_', " "))
        .collect();
    out.insert(canonical.replace('_', " "));
    out.insert(slug(label).replace('_', " "));
    out.into_iter().collect()
}

struct QualifierRule {
    key: &'static str,
    re: Regex,
}

fn qualifier_rules() -> &'static [QualifierRule] {
    static RULES: OnceLock<Vec<QualifierRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let rule = |key, pat: &str| QualifierRule {
            key,
            re: Regex::new(pat).unwrap(),
        };
        vec![
            rule(
                "TemporalQualifier",
                r"\b(?:since|during|until|before|after|in) (?:\d{4}|the [a-z-]+ (?:phase|shift|season)|ramp-up|start-up|shutdown)\b",
            ),
            rule(
                "SpatialQualifier",
                r"\b(?:at|inside|on) the [a-z]+ (?:site|floor|deck|hall|wing)\b",
            ),
            rule(
                "OperationalConstraint",
                r"\b(?:at|above|below|under) \d+(?:\.\d+)? ?(?:bar|psi|rpm|kW|MW|percent|degrees)\b",
            ),
            rule("ConditionExpression", r"\b(?:if|when|unless) [a-z0-9 -]+"),
            rule(
                "UncertaintyQualifier",
                r"\b(?:likely|possibly|probably|reportedly|approximately|presumably)\b",
            ),
            rule("CausalHint", r"\b(?:because of|due to|owing to) [a-z0-9 -]+"),
            rule("LogicalMarker", r"\b(?:only|not|either|neither)\b"),
        ]
    })
}

/// Qualifier map detected in a sentence by the stub's regex rules.
pub fn detect_qualifiers(sentence: &str) -> BTreeMap<String, String> {
    qualifier_rules()
        .iter()
        .filter_map(|r| r.re.find(sentence).map(|m| (r.key.to_string(), m.as_str().trim().to_string())))
        .collect()
}

fn word_boundary(s: &str, start: usize, end: usize) -> bool {
    let before = s[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
    let after = s[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
    before && after
}

fn relation_recognition(input: &Value) -> Value {
    let text = input.pointer("/focus/text").and_then(Value::as_str).unwrap_or("");
    let entities = array_of(input, "entities");
    let mut relations = Vec::new();
    for (s, e) in split_sentences(text) {
        let sentence = &text[s..e];
        // (start, end, entity id)
        let mut occ: Vec<(usize, usize, &str)> = Vec::new();
        for ent in entities {
            let id = str_of(ent, "id");
            for form in array_of(ent, "surface_forms").iter().filter_map(Value::as_str) {
                if form.is_empty() {
                    continue;
                }
                for (p, _) in sentence.match_indices(form) {
                    if word_boundary(sentence, p, p + form.len()) {
                        occ.push((p, p + form.len(), id));
                    }
                }
            }
        }
        occ.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(b.2)));
        let mut kept: Vec<(usize, usize, &str)> = Vec::new();
        for o in occ {
            if kept.last().is_none_or(|k| o.0 >= k.1) {
                kept.push(o);
            }
        }
        let quals = detect_qualifiers(sentence);
        for pair in kept.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.2 == b.2 {
                continue;
            }
            let between = sentence[a.1..b.0].trim();
            let words: Vec<&str> = between.split_whitespace().collect();
            let lexical = (1..=4).contains(&words.len())
                && words
                    .iter()
                    .all(|w| w.chars().all(|c| c.is_lowercase() || c == '-'));
            if !lexical {
                continue;
            }
            let canonical = canonical_relation(between);
            relations.push(json!({
                "subject_id": a.2,
                "object_id": b.2,
                "label": between,
                "description": format!("{} {} {}", &sentence[a.0..a.1], between, &sentence[b.0..b.1]),
                "hint_type": hint_for(&canonical).as_str(),
                "qualifiers": quals,
                "confidence": 0.8,
                "evidence": [sentence],
            }));
        }
    }
    json!({ "relations": relations })
}

fn opt_str<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str).filter(|s| !s.is_empty())
}

fn relation_resolution(input: &Value) -> Value {
    let mut rels: Vec<&Value> = array_of(input, "relations").iter().collect();
    rels.sort_by_key(|r| str_of(r, "id"));
    let canon: Vec<String> = rels
        .iter()
        .map(|r| opt_str(r, "canonical_label").map_or_else(|| canonical_relation(str_of(r, "raw_label")), str::to_string))
        .collect();
    let classes: Vec<String> = rels
        .iter()
        .zip(&canon)
        .map(|(r, c)| opt_str(r, "rel_cls").map_or_else(|| relation_class(c), str::to_string))
        .collect();

    let mut actions = Vec::new();
    let mut setter = |kind: &str, field: &str, pick: &dyn Fn(usize) -> Option<String>| {
        let mut by_value: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for (i, r) in rels.iter().enumerate() {
            if let Some(v) = pick(i) {
                by_value.entry(v).or_default().push(str_of(r, "id"));
            }
        }
        for (value, ids) in by_value {
            actions.push(json!({
                "action": kind,
                "relation_ids": ids,
                field: value,
                "rationale": format!("{field} from the synonym tables"),
            }));
        }
    };
    setter("set_canonical_rel", "canonical_label", &|i| {
        opt_str(rels[i], "canonical_label").is_none().then(|| canon[i].clone())
    });
    setter("set_rel_cls", "rel_cls", &|i| opt_str(rels[i], "rel_cls").is_none().then(|| classes[i].clone()));
    setter("set_rel_cls_group", "rel_cls_group", &|i| {
        opt_str(rels[i], "rel_cls_group")
            .is_none()
            .then(|| relation_class_group(&classes[i], str_of(rels[i], "hint_type")))
    });

    let conflicted = |a: &Value, b: &Value| {
        let tag = format!("qualifier conflict with {}", str_of(b, "id"));
        array_of(a, "remarks").iter().filter_map(Value::as_str).any(|r| r.starts_with(&tag))
    };
    let mut used = BTreeSet::new();
    for i in 0..rels.len() {
        for j in i + 1..rels.len() {
            if used.contains(&i) || used.contains(&j) {
                continue;
            }
            let (a, b) = (rels[i], rels[j]);
            if conflicted(a, b) || conflicted(b, a) {
                continue;
            }
            let (sa, oa, sb, ob) = (
                str_of(a, "subject_id"),
                str_of(a, "object_id"),
                str_of(b, "subject_id"),
                str_of(b, "object_id"),
            );
            let merge = if sa == sb && oa == ob && canon[i] == canon[j] {
                Some((i, j, false))
            } else if sa == ob && oa == sb && inverse_of(&canon[j]) == Some(canon[i].as_str()) {
                Some((i, j, true))
            } else if sa == ob && oa == sb && inverse_of(&canon[i]) == Some(canon[j].as_str()) {
                Some((j, i, true))
            } else {
                None
            };
            if let Some((keep, drop, inverse)) = merge {
                used.insert(keep);
                used.insert(drop);
                actions.push(json!({
                    "action": "merge_relations",
                    "relation_ids": [str_of(rels[keep], "id"), str_of(rels[drop], "id")],
                    "inverse": inverse,
                    "rationale": if inverse { "same fact stated in the opposite direction" } else { "duplicate statement of the same fact" },
                }));
            }
        }
    }
    Value::Array(actions)
}

// -------------------------------------------------------------- evaluation

fn retention_judge(input: &Value) -> Value {
    let statement = str_of(input, "statement").to_lowercase();
    let supported = array_of(input, "triples").iter().any(|t| {
        let subject = str_of(t, "subject").to_lowercase();
        let object = str_of(t, "object").to_lowercase();
        !subject.is_empty()
            && !object.is_empty()
            && statement.contains(&subject)
            && statement.contains(&object)
            && predicate_synonyms(str_of(t, "predicate"))
                .iter()
                .any(|p| statement.contains(p.as_str()))
    });
    json!({ "supported": supported })
}

/// `(specific, general)` pairs of the stub taxonomy, on label keys.
const TAXONOMY: &[(&str, &str)] = &[
    ("city", "location"),
    ("city", "place"),
    ("country", "place"),
    ("location", "place"),
    ("company", "organization"),
    ("organization", "agent"),
    ("person", "agent"),
    ("pump", "device"),
    ("valve", "device"),
    ("sensor", "device"),
    ("device", "equipment"),
    ("system", "equipment"),
    ("works at", "employer"),
];

fn canonical_key(label: &str) -> String {
    label_key(label).replace("organisation", "organization")
}

fn specializes(specific: &str, general: &str) -> bool {
    if specific.ends_with(&format!(" {general}")) {
        return true;
    }
    let mut frontier = vec![specific.to_string()];
    let mut seen = BTreeSet::new();
    while let Some(s) = frontier.pop() {
        for (a, b) in TAXONOMY {
            if *a == s && seen.insert(*b) {
                if *b == general {
                    return true;
                }
                frontier.push(b.to_string());
            }
        }
    }
    false
}

/// Four-way label and confidence for an anchor and candidate label.
pub fn verify_labels(anchor: &str, candidate: &str) -> (&'static str, f64) {
    let (a, c) = (canonical_key(anchor), canonical_key(candidate));
    if a == c {
        ("Equivalent", 1.0)
    } else if specializes(&c, &a) {
        ("Narrower", 0.9)
    } else if specializes(&a, &c) {
        ("Broader", 0.9)
    } else {
        ("Unrelated", 0.95)
    }
}

fn schema_verify(input: &Value) -> Value {
    let anchor = input.pointer("/anchor/label").and_then(Value::as_str).unwrap_or("");
    let candidate = input.pointer("/candidate/label").and_then(Value::as_str).unwrap_or("");
    let (label, confidence) = verify_labels(anchor, candidate);
    json!({
        "label": label,
        "confidence": confidence,
        "rationale": "label keys and taxonomy",
    })
}
