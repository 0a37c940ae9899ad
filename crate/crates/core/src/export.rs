//! Serializers for the topology graph: Brick-flavoured Turtle, BUDO-style
//! label tables and the JSON interchange document.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::TopologyGraph;

#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("class {0:?} has no entry in the class mapping")]
    UnmappedClass(String),
    #[error("label template references unknown field {0:?}")]
    TemplateFieldUnknown(String),
    #[error("malformed label template: {0}")]
    TemplateSyntax(String),
    #[error("label {label:?} generated for both {first:?} and {second:?}")]
    LabelCollision { label: String, first: String, second: String },
    #[error("invalid term {0:?}: expected an absolute IRI or a known prefixed name")]
    InvalidTerm(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("topology JSON: {0}")]
    Json(String),
}

/// Ontology class and label code for one symbol class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTarget {
    /// Prefixed name (`brick:Pump`) or absolute IRI.
    pub iri: String,
    /// Equipment code used in labels.
    pub code: String,
}

/// Maps every symbol class to its ontology class and label code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping(pub BTreeMap<String, ClassTarget>);

impl Default for ClassMapping {
    fn default() -> Self {
        let entry = |iri: &str, code: &str| ClassTarget { iri: iri.into(), code: code.into() };
        Self(BTreeMap::from([
            ("Pump".into(), entry("brick:Pump", "PU")),
            ("Valve".into(), entry("brick:Valve", "VAL")),
            ("HeatExchanger".into(), entry("brick:Heat_Exchanger", "HX")),
            ("Flap".into(), entry("brick:Damper", "DMP")),
        ]))
    }
}

impl ClassMapping {
    pub fn get(&self, class: &str) -> Result<&ClassTarget, ExportError> {
        self.0.get(class).ok_or_else(|| ExportError::UnmappedClass(class.to_string()))
    }

    /// Classes of `names` that have no mapping.
    pub fn missing<'a, S: AsRef<str>>(&self, names: &'a [S]) -> Vec<&'a str> {
        names.iter().map(|s| s.as_ref()).filter(|s| !self.0.contains_key(*s)).collect()
    }
}

pub const BRICK_NS: &str = "https://brickschema.org/schema/Brick#";
pub const RDF_NS: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#";
pub const RDFS_NS: &str = "http://www.w3.org/2000/01/rdf-schema#";
pub const PID_NS: &str = "https://example.org/pidgraph#";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurtleOptions {
    /// Namespace under which node entities are minted.
    pub namespace: String,
    /// Predicate written once per undirected edge.
    pub predicate: String,
}

impl Default for TurtleOptions {
    fn default() -> Self {
        Self { namespace: "https://example.org/plant/".into(), predicate: "pid:connectedTo".into() }
    }
}

const PREFIXES: [(&str, &str); 4] = [("brick", BRICK_NS), ("pid", PID_NS), ("rdf", RDF_NS), ("rdfs", RDFS_NS)];

/// Renders a prefixed name or absolute IRI as a Turtle term.
fn term(t: &str) -> Result<String, ExportError> {
    if t.contains("://") || t.starts_with("urn:") {
        return Ok(format!("<{}>", encode_iri(t)));
    }
    match t.split_once(':') {
        Some((p, local))
            if PREFIXES.iter().any(|(q, _)| *q == p)
                && !local.is_empty()
                && local.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') =>
        {
            Ok(t.to_string())
        }
        _ => Err(ExportError::InvalidTerm(t.to_string())),
    }
}

/// Percent-encodes characters that may not appear inside an IRI reference.
fn encode_iri(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_control() || c == ' ' || "<>\"{}|^`\\%".contains(c) {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                let _ = write!(out, "%{b:02X}");
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn entity(ns: &str, id: &str) -> Result<String, ExportError> {
    term(&format!("{ns}{}", encode_iri(id)))
}

/// One `rdf:type` statement per node and one connection statement per edge,
/// in sorted order after a fixed prefix block.
pub fn export_turtle(g: &TopologyGraph, map: &ClassMapping, opts: &TurtleOptions) -> Result<String, ExportError> {
    g.validate().map_err(ExportError::InvalidGraph)?;
    let predicate = term(&opts.predicate)?;
    let mut out = String::new();
    for (p, ns) in PREFIXES {
        let _ = writeln!(out, "@prefix {p}: <{ns}> .");
    }

    let mut nodes: Vec<_> = g.nodes.iter().collect();
    nodes.sort_by(|a, b| a.id.cmp(&b.id));
    let mut body = Vec::new();
    for n in nodes {
        let class = term(&map.get(n.class.as_str())?.iri)?;
        body.push(format!("{} rdf:type {class} .", entity(&opts.namespace, &n.id)?));
    }
    let mut edges: Vec<(&str, &str)> =
        g.edges.iter().map(|(a, b)| if a <= b { (a.as_str(), b.as_str()) } else { (b.as_str(), a.as_str()) }).collect();
    edges.sort();
    for (a, b) in edges {
        body.push(format!("{} {predicate} {} .", entity(&opts.namespace, a)?, entity(&opts.namespace, b)?));
    }
    if !body.is_empty() {
        out.push('\n');
        for line in body {
            out.push_str(&line);
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudoOptions {
    /// Fields: `{building}`, `{system}`, `{class_code}`, `{ordinal}`.
    pub template: String,
    pub building: String,
    pub system: String,
}

impl Default for BudoOptions {
    fn default() -> Self {
        Self {
            template: "{building}_{system}_{class_code}_{ordinal}".into(),
            building: "B1".into(),
            system: "H".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Field(&'static str),
}

const BUDO_FIELDS: [&str; 4] = ["building", "system", "class_code", "ordinal"];

fn parse_template(t: &str) -> Result<Vec<Piece>, ExportError> {
    let mut pieces = Vec::new();
    let mut rest = t;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(ExportError::TemplateSyntax(format!("unmatched '}}' in {t:?}")));
        }
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| ExportError::TemplateSyntax(format!("unclosed '{{' in {t:?}")))?;
        let name = &after[..close];
        let field = BUDO_FIELDS
            .iter()
            .find(|f| **f == name)
            .ok_or_else(|| ExportError::TemplateFieldUnknown(name.to_string()))?;
        pieces.push(Piece::Field(field));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

/// Trailing number of an id such as `Pump-4`.
fn id_ordinal(id: &str) -> Option<u64> {
    id.rsplit_once('-').and_then(|(_, n)| n.parse().ok())
}

/// Generates one label per node. The ordinal is the id's numeric suffix when
/// present, otherwise a per-class running index.
pub fn budo_labels(g: &TopologyGraph, map: &ClassMapping, opts: &BudoOptions) -> Result<Vec<String>, ExportError> {
    let pieces = parse_template(&opts.template)?;
    let mut per_class: HashMap<&str, u64> = HashMap::new();
    let mut seen: HashMap<String, &str> = HashMap::new();
    let mut labels = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        let class = n.class.as_str();
        let counter = per_class.entry(class).or_insert(0);
        *counter += 1;
        let ordinal = id_ordinal(&n.id).unwrap_or(*counter);
        let mut label = String::new();
        for p in &pieces {
            match p {
                Piece::Text(t) => label.push_str(t),
                Piece::Field("building") => label.push_str(&opts.building),
                Piece::Field("system") => label.push_str(&opts.system),
                Piece::Field("class_code") => label.push_str(&map.get(class)?.code),
                Piece::Field(_) => label.push_str(&ordinal.to_string()),
            }
        }
        if let Some(first) = seen.insert(label.clone(), &n.id) {
            return Err(ExportError::LabelCollision { label, first: first.to_string(), second: n.id.clone() });
        }
        labels.push(label);
    }
    Ok(labels)
}

/// CSV with header `id,label,class`, one row per node sorted by id.
pub fn export_budo(g: &TopologyGraph, map: &ClassMapping, opts: &BudoOptions) -> Result<String, ExportError> {
    g.validate().map_err(ExportError::InvalidGraph)?;
    let labels = budo_labels(g, map, opts)?;
    let mut rows: Vec<(&str, &str, &str)> =
        g.nodes.iter().zip(&labels).map(|(n, l)| (n.id.as_str(), l.as_str(), n.class.as_str())).collect();
    rows.sort();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| ExportError::InvalidGraph(e.to_string());
    w.write_record(["id", "label", "class"]).map_err(csv_err)?;
    for (id, label, class) in rows {
        w.write_record([id, label, class]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ExportError::InvalidGraph(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of utf-8 input"))
}

/// Pretty-printed topology JSON with a trailing newline.
pub fn export_json(g: &TopologyGraph) -> Result<String, ExportError> {
    g.validate().map_err(ExportError::InvalidGraph)?;
    let mut s = serde_json::to_string_pretty(g).map_err(|e| ExportError::Json(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_json(text: &str) -> Result<TopologyGraph, ExportError> {
    let g: TopologyGraph = serde_json::from_str(text).map_err(|e| ExportError::Json(e.to_string()))?;
    g.validate().map_err(ExportError::InvalidGraph)?;
    Ok(g)
}

/// Node ids whose class would fail to export.
pub fn unmapped_nodes<'a>(g: &'a TopologyGraph, map: &ClassMapping) -> Vec<&'a str> {
    let known: HashSet<&str> = map.0.keys().map(String::as_str).collect();
    g.nodes.iter().filter(|n| !known.contains(n.class.as_str())).map(|n| n.id.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::SymbolClass;
    use crate::geom::BoundingBox;
    use crate::topology::GraphNode;
    use proptest::prelude::*;

    fn node(id: &str, class: &str) -> GraphNode {
        GraphNode { id: id.into(), class: SymbolClass::new(class), bbox: BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap() }
    }

    fn graph(nodes: Vec<GraphNode>, edges: &[(&str, &str)]) -> TopologyGraph {
        TopologyGraph {
            plan: "p".into(),
            config_hash: None,
            nodes,
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }

    /// Parses with an independent Turtle reader and counts statements by
    /// predicate IRI.
    fn count_triples(doc: &str) -> (usize, usize, usize) {
        let mut types = 0;
        let mut links = 0;
        let mut total = 0;
        for t in oxttl::TurtleParser::new().for_slice(doc.as_bytes()) {
            let t = t.expect("valid turtle");
            total += 1;
            let p = t.predicate.as_str();
            if p == format!("{RDF_NS}type") {
                types += 1;
            } else if p == format!("{PID_NS}connectedTo") {
                links += 1;
            }
        }
        (types, links, total)
    }

    #[test]
    fn empty_graph_is_prefixes_only() {
        let doc = export_turtle(&graph(vec![], &[]), &ClassMapping::default(), &TurtleOptions::default()).unwrap();
        assert_eq!(count_triples(&doc), (0, 0, 0));
        assert!(doc.lines().all(|l| l.starts_with("@prefix")));
    }

    #[test]
    fn pump_valve_edge_counts() {
        let g = graph(vec![node("Pump-1", "Pump"), node("Valve-2", "Valve")], &[("Valve-2", "Pump-1")]);
        let doc = export_turtle(&g, &ClassMapping::default(), &TurtleOptions::default()).unwrap();
        assert_eq!(count_triples(&doc), (2, 1, 3));
        assert!(doc.contains("rdf:type brick:Pump"));
    }

    #[test]
    fn unmapped_class_is_an_error() {
        let g = graph(vec![node("Tank-1", "Tank")], &[]);
        assert_eq!(
            export_turtle(&g, &ClassMapping::default(), &TurtleOptions::default()),
            Err(ExportError::UnmappedClass("Tank".into()))
        );
        assert_eq!(unmapped_nodes(&g, &ClassMapping::default()), ["Tank-1"]);
    }

    #[test]
    fn odd_ids_are_encoded() {
        let g = graph(vec![node("Pump 1<a>", "Pump"), node("Valve|2", "Valve")], &[("Pump 1<a>", "Valve|2")]);
        let opts = TurtleOptions { predicate: "https://example.org/x#linked".into(), ..Default::default() };
        let doc = export_turtle(&g, &ClassMapping::default(), &opts).unwrap();
        let n = oxttl::TurtleParser::new().for_slice(doc.as_bytes()).map(|t| t.unwrap()).count();
        assert_eq!(n, 3);
        assert!(matches!(
            export_turtle(
                &g,
                &ClassMapping::default(),
                &TurtleOptions { predicate: "nope:x".into(), ..Default::default() }
            ),
            Err(ExportError::InvalidTerm(_))
        ));
    }

    #[test]
    fn budo_template_expansion() {
        let g = graph(vec![node("Pump-4", "Pump")], &[]);
        let opts = BudoOptions { template: "B1_H_{class_code}_{ordinal}".into(), ..Default::default() };
        assert_eq!(budo_labels(&g, &ClassMapping::default(), &opts).unwrap(), ["B1_H_PU_4"]);
        let csv = export_budo(&g, &ClassMapping::default(), &BudoOptions::default()).unwrap();
        assert_eq!(csv, "id,label,class\nPump-4,B1_H_PU_4,Pump\n");
    }

    #[test]
    fn budo_edge_cases() {
        let empty = export_budo(&graph(vec![], &[]), &ClassMapping::default(), &BudoOptions::default()).unwrap();
        assert_eq!(empty, "id,label,class\n");
        let g = graph(vec![node("Pump-4", "Pump")], &[]);
        let bad = BudoOptions { template: "{building}_{unknown}".into(), ..Default::default() };
        assert_eq!(
            export_budo(&g, &ClassMapping::default(), &bad),
            Err(ExportError::TemplateFieldUnknown("unknown".into()))
        );
        let open = BudoOptions { template: "{building".into(), ..Default::default() };
        assert!(matches!(export_budo(&g, &ClassMapping::default(), &open), Err(ExportError::TemplateSyntax(_))));
        // no ordinal in the template: two pumps collide
        let g2 = graph(vec![node("Pump-1", "Pump"), node("Pump-2", "Pump")], &[]);
        let flat = BudoOptions { template: "{building}_{class_code}".into(), ..Default::default() };
        assert!(matches!(budo_labels(&g2, &ClassMapping::default(), &flat), Err(ExportError::LabelCollision { .. })));
        // ids without a numeric suffix fall back to a per-class index
        let g3 = graph(vec![node("a", "Pump"), node("b", "Pump"), node("c", "Valve")], &[]);
        assert_eq!(
            budo_labels(&g3, &ClassMapping::default(), &BudoOptions::default()).unwrap(),
            ["B1_H_PU_1", "B1_H_PU_2", "B1_H_VAL_1"]
        );
    }

    #[test]
    fn json_shapes() {
        let mut g = graph(vec![], &[]);
        g.plan.clear();
        let v: serde_json::Value = serde_json::from_str(&export_json(&g).unwrap()).unwrap();
        assert_eq!(v, serde_json::json!({"nodes": [], "edges": []}));
        assert!(parse_json(r#"{"nodes":[],"edges":[["a","b"]]}"#).is_err());
        assert!(parse_json(r#"{"nodes":[],"edges":[],"extra":1}"#).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = TopologyGraph> {
        let classes = ["Pump", "Valve", "HeatExchanger", "Flap"];
        (1usize..12)
            .prop_flat_map(move |n| {
                (
                    prop::collection::vec((0usize..4, 0u32..500, 0u32..500, 1u32..60, 1u32..60), n),
                    prop::collection::vec((0..n, 0..n), 0..20),
                    "[a-z]{0,6}",
                )
            })
            .prop_map(move |(specs, pairs, plan)| {
                let nodes: Vec<GraphNode> = specs
                    .iter()
                    .enumerate()
                    .map(|(i, &(c, x, y, w, h))| GraphNode {
                        id: format!("{}-{}", classes[c], i + 1),
                        class: SymbolClass::new(classes[c]),
                        bbox: BoundingBox::new(x as f64, y as f64, (x + w) as f64 + 0.25, (y + h) as f64).unwrap(),
                    })
                    .collect();
                let mut edges: Vec<(String, String)> = Vec::new();
                for (a, b) in pairs {
                    let (a, b) = (a.min(b), a.max(b));
                    let e = (nodes[a].id.clone(), nodes[b].id.clone());
                    if a != b && !edges.contains(&e) {
                        edges.push(e);
                    }
                }
                TopologyGraph { plan, config_hash: None, nodes, edges }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn json_round_trip(g in arb_graph()) {
            let text = export_json(&g).unwrap();
            prop_assert_eq!(parse_json(&text).unwrap(), g.clone());
            prop_assert_eq!(export_json(&parse_json(&text).unwrap()).unwrap(), text);
        }

        #[test]
        fn turtle_counts_match(g in arb_graph()) {
            let doc = export_turtle(&g, &ClassMapping::default(), &TurtleOptions::default()).unwrap();
            let (types, links, _) = count_triples(&doc);
            prop_assert_eq!(types, g.nodes.len());
            prop_assert_eq!(links, g.edges.len());
            prop_assert_eq!(export_turtle(&g, &ClassMapping::default(), &TurtleOptions::default()).unwrap(), doc);
        }

        #[test]
        fn budo_labels_unique(g in arb_graph()) {
            let labels = budo_labels(&g, &ClassMapping::default(), &BudoOptions::default()).unwrap();
            let set: HashSet<&String> = labels.iter().collect();
            prop_assert_eq!(set.len(), labels.len());
        }
    }
}
