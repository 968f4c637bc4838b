//! Seeded generator for an offline test corpus: industrial-plant and
//! company documents, retention statements, a small reference ontology and
//! gold triples split into source and held-out parts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{Concept, GoldTriple, OntologyRelation, ReferenceOntology, Split};
use crate::retention::BenchmarkRecord;
use crate::store::{self, StoreError};

const FIRST: &[&str] = &[
    "Anna", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lars", "Mara",
    "Nils", "Olga", "Pavel",
];
const LAST: &[&str] = &[
    "Schmidt", "Moreau", "Novak", "Okafor", "Lindqvist", "Tanaka", "Herrera", "Kowalski", "Brandt", "Ferreira",
];
const ORG_STEMS: &[&str] = &["Helios", "Borealis", "Cobalt", "Meridian", "Vantor", "Kestrel", "Altura", "Nordwerk"];
const ORG_SUFFIX: &[&str] = &["Industries", "Labs", "Group", "Corporation"];
const CITIES: &[&str] = &["Porto", "Tampere", "Gdansk", "Lyon", "Bilbao", "Graz", "Aarhus", "Brno"];
const DEVICE_STEMS: &[&str] = &[
    "Orion", "Atlas", "Vega", "Lyra", "Draco", "Nova", "Polaris", "Sirius", "Rigel", "Castor", "Deneb", "Altair",
];
const DEVICE_HEADS: &[&str] = &["Pump", "Boiler", "Compressor", "Valve", "Turbine", "Heater", "Reactor", "Filter"];
const SYSTEM_HEADS: &[&str] = &["Line", "Loop", "Plant"];

const FILLER: &[&str] = &[
    "the morning shift reviewed the maintenance logs and found no open issues in the records",
    "during the inspection the crew cleaned the intake screens and replaced two worn gaskets",
    "most readings stayed within the expected band for the whole week",
    "the operators noted a slight rise in ambient temperature near the east wall",
    "after the audit the team updated the written procedures for routine start-up checks",
    "some spare parts were moved to the central store to shorten repair times",
    "the safety walk found the emergency exits clear and the signage readable",
    "while the load was low the technicians calibrated several pressure gauges",
    "the quarterly report summarized energy use and planned upgrades for next year",
    "meanwhile the training programme for new staff continued as scheduled",
    "the control room logged every alarm and its acknowledgement time",
    "each valve was tagged with a fresh inspection label after the review",
    "the night crew kept a close eye on vibration levels across the hall",
    "however the new data historian still needs a few configuration changes",
];

/// Relation families: canonical name, forward phrasings, inverse phrasings,
/// reference relation.
struct Family {
    canonical: &'static str,
    forward: &'static [&'static str],
    inverse: &'static [&'static str],
    reference: &'static str,
}

const FAMILIES: &[Family] = &[
    Family { canonical: "works_at", forward: &["works at", "works for", "is employed by"], inverse: &[], reference: "employer" },
    Family { canonical: "located_in", forward: &["is based in", "is located in"], inverse: &[], reference: "locatedIn" },
    Family { canonical: "manufactures", forward: &["manufactures", "produces", "builds"], inverse: &["is built by", "is manufactured by"], reference: "manufactures" },
    Family { canonical: "feeds", forward: &["feeds", "supplies"], inverse: &["is fed by"], reference: "feeds" },
    Family { canonical: "part_of", forward: &["is part of", "belongs to"], inverse: &[], reference: "partOf" },
    Family { canonical: "monitors", forward: &["monitors", "tracks"], inverse: &[], reference: "monitors" },
    Family { canonical: "triggers", forward: &["triggers", "causes"], inverse: &[], reference: "causes" },
];

const QUALIFIERS: &[&str] = &[
    " since 2019",
    " since 2021",
    " during the night shift",
    " at 40 bar",
    " at 12 bar",
    " if the load rises",
    " because of the cold season",
    ", reportedly",
];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fact {
    pub subject: String,
    pub family: usize,
    pub object: String,
}

impl Fact {
    pub fn canonical(&self) -> &'static str {
        FAMILIES[self.family].canonical
    }

    pub fn reference(&self) -> &'static str {
        FAMILIES[self.family].reference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub text: String,
    pub facts: Vec<Fact>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<SyntheticDocument>,
    pub benchmark: Vec<BenchmarkRecord>,
    pub ontology: ReferenceOntology,
    pub gold: Vec<GoldTriple>,
}

struct Cast {
    people: Vec<String>,
    orgs: Vec<String>,
    cities: Vec<String>,
    devices: Vec<String>,
    sensors: Vec<String>,
    systems: Vec<String>,
}

fn cast(rng: &mut ChaCha8Rng) -> Cast {
    let mut pick = |pool: &[&str], n: usize| -> Vec<String> {
        let mut v: Vec<&str> = pool.choose_multiple(rng, n).copied().collect();
        v.sort_unstable();
        v.into_iter().map(String::from).collect()
    };
    let firsts = pick(FIRST, 4);
    let lasts = pick(LAST, 4);
    let org_stems = pick(ORG_STEMS, 2);
    let cities = pick(CITIES, 2);
    let dev_stems = pick(DEVICE_STEMS, 8);
    let sys_stems = pick(ORG_STEMS, 2);
    let heads = pick(DEVICE_HEADS, 6);
    let suffix = pick(ORG_SUFFIX, 2);
    let sys_heads = pick(SYSTEM_HEADS, 2);
    Cast {
        people: firsts.iter().zip(&lasts).map(|(f, l)| format!("{f} {l}")).collect(),
        orgs: org_stems.iter().zip(&suffix).map(|(s, x)| format!("{s} {x}")).collect(),
        cities,
        devices: dev_stems[..6].iter().zip(&heads).map(|(s, h)| format!("{s} {h}")).collect(),
        sensors: dev_stems[6..].iter().map(|s| format!("{s} Sensor")).collect(),
        systems: sys_stems.iter().zip(&sys_heads).map(|(s, h)| format!("{s} {h}")).collect(),
    }
}

fn facts_for(c: &Cast, rng: &mut ChaCha8Rng) -> Vec<Fact> {
    let mut out = BTreeSet::new();
    let any = |v: &[String], rng: &mut ChaCha8Rng| v.choose(rng).unwrap().clone();
    for p in &c.people {
        out.insert(Fact { subject: p.clone(), family: 0, object: any(&c.orgs, rng) });
    }
    for (o, city) in c.orgs.iter().zip(&c.cities) {
        out.insert(Fact { subject: o.clone(), family: 1, object: city.clone() });
    }
    for d in &c.devices {
        out.insert(Fact { subject: any(&c.orgs, rng), family: 2, object: d.clone() });
        out.insert(Fact { subject: d.clone(), family: 4, object: any(&c.systems, rng) });
    }
    for w in c.devices.windows(2) {
        if rng.random_bool(0.7) {
            out.insert(Fact { subject: w[0].clone(), family: 3, object: w[1].clone() });
        }
    }
    for s in &c.sensors {
        out.insert(Fact { subject: s.clone(), family: 5, object: any(&c.devices, rng) });
    }
    let a = any(&c.devices, rng);
    let b = any(&c.devices, rng);
    if a != b {
        out.insert(Fact { subject: a, family: 6, object: b });
    }
    out.into_iter().collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

fn render(fact: &Fact, rng: &mut ChaCha8Rng) -> String {
    let fam = &FAMILIES[fact.family];
    let qual = if rng.random_bool(0.4) { *QUALIFIERS.choose(rng).unwrap() } else { "" };
    if !fam.inverse.is_empty() && rng.random_bool(0.3) {
        let verb = fam.inverse.choose(rng).unwrap();
        format!("{} {verb} {}{qual}.", fact.object, fact.subject)
    } else {
        let verb = fam.forward.choose(rng).unwrap();
        format!("{} {verb} {}{qual}.", fact.subject, fact.object)
    }
}

fn intrinsic(device: &str, rng: &mut ChaCha8Rng) -> String {
    let (key, unit, lo, hi) = *[("capacity", "kW", 20, 400), ("rated pressure", "bar", 5, 60), ("mass", "kg", 80, 900)]
        .choose(rng)
        .unwrap();
    format!("{device} has a {key} of {} {unit}.", rng.random_range(lo..=hi))
}

/// Deterministic corpus of `docs` documents from `seed`.
pub fn generate(seed: u64, docs: usize) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::new();
    let mut benchmark = Vec::new();
    let mut gold = Vec::new();
    for d in 0..docs {
        let doc_id = format!("doc{:02}", d + 1);
        let c = cast(&mut rng);
        let facts = facts_for(&c, &mut rng);
        let mut sentences: Vec<String> = Vec::new();
        for f in &facts {
            sentences.push(render(f, &mut rng));
            if f.family == 4 && rng.random_bool(0.5) {
                sentences.push(intrinsic(&f.subject, &mut rng));
            }
            for _ in 0..rng.random_range(1..=3) {
                sentences.push(format!("{}.", capitalize(FILLER.choose(&mut rng).unwrap())));
            }
        }
        // Restate a few facts so resolution sees duplicates within a document.
        for f in facts.choose_multiple(&mut rng, 3) {
            sentences.push(render(f, &mut rng));
        }
        let text = sentences
            .chunks(6)
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join("\n\n");

        let mut statements: Vec<String> = facts
            .choose_multiple(&mut rng, 8)
            .map(|f| format!("{} {} {}.", f.subject, FAMILIES[f.family].forward[0], f.object))
            .collect();
        for p in c.people.iter().take(2) {
            let fake = Fact { subject: p.clone(), family: 0, object: c.cities[0].clone() };
            statements.push(format!("{} {} {}.", fake.subject, FAMILIES[0].forward[0], fake.object));
        }
        statements.sort();
        benchmark.push(BenchmarkRecord { doc_id: doc_id.clone(), text: text.clone(), statements });

        for (i, f) in facts.iter().enumerate() {
            gold.push(GoldTriple {
                sentence_id: format!("{doc_id}_s{i:03}"),
                subject: f.subject.clone(),
                relation: f.reference().to_string(),
                object: f.object.clone(),
                split: if rng.random_bool(0.7) { Split::Source } else { Split::Heldout },
            });
        }
        for (i, p) in c.people.iter().enumerate() {
            gold.push(GoldTriple {
                sentence_id: format!("{doc_id}_b{i:02}"),
                subject: p.clone(),
                relation: "birthDate".into(),
                object: format!("19{}", rng.random_range(50..99)),
                split: if rng.random_bool(0.7) { Split::Source } else { Split::Heldout },
            });
        }
        documents.push(SyntheticDocument { doc_id, text, facts });
    }
    SyntheticCorpus { documents, benchmark, ontology: ontology(), gold }
}

pub fn ontology() -> ReferenceOntology {
    let concept = |label: &str, description: &str| Concept { label: label.into(), description: description.into() };
    let rel = |label: &str, domain: &str, range: &str| OntologyRelation {
        label: label.into(),
        domain: domain.into(),
        range: range.into(),
        description: String::new(),
    };
    ReferenceOntology {
        concepts: vec![
            concept("Person", "A human being."),
            concept("Organization", "A company or institution."),
            concept("Place", "A geographic location."),
            concept("Device", "A piece of technical equipment."),
            concept("System", "An assembly of equipment."),
        ],
        relations: vec![
            rel("employer", "Person", "Organization"),
            rel("locatedIn", "Organization", "Place"),
            rel("manufactures", "Organization", "Device"),
            rel("feeds", "Device", "Device"),
            rel("partOf", "Device", "System"),
            rel("monitors", "Device", "Device"),
            rel("causes", "Device", "Device"),
            rel("birthDate", "Person", "xsd:date"),
        ],
    }
}

impl SyntheticCorpus {
    /// Write `docs/<id>.txt`, `benchmark.jsonl`, `ontology.json` and `gold.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<(), StoreError> {
        for d in &self.documents {
            let mut text = d.text.clone();
            text.push('\n');
            store::write_text(&dir.join("docs").join(format!("{}.txt", d.doc_id)), &text)?;
        }
        store::write_jsonl(&dir.join("benchmark.jsonl"), &self.benchmark)?;
        store::write_jsonl(&dir.join("gold.jsonl"), &self.gold)?;
        let v = serde_json::to_value(&self.ontology).expect("ontology serializes");
        let mut text = serde_json::to_string_pretty(&v).expect("values serialize");
        text.push('\n');
        store::write_text(&dir.join("ontology.json"), &text)
    }
}
