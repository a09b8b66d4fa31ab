use std::collections::{HashMap, HashSet, VecDeque};

use proptest::prelude::*;
use rvl::ontology::{
    corpus_stats, enumerate_rationales, normalize_text, parse_tree, render_prompt, serialize_tree, validate, Edge, Node,
    RationaleKind, RationaleTree, ViolationCode,
};
use rvl::Error;

const ROBIN: &str = include_str!("../assets/american_robin.json");
const AIRLINER: &str = include_str!("../assets/airliner.json");
const AIRLINER_CORRECTED: &str = include_str!("../assets/airliner_corrected.json");
const TEMPLATE: &str = include_str!("../assets/prompt.txt");

fn codes(t: &RationaleTree) -> Vec<ViolationCode> {
    validate(t).into_iter().map(|v| v.code).collect()
}

#[test]
fn robin_tree() {
    let t = parse_tree(ROBIN).unwrap();
    assert_eq!(t.category(), Some("American Robin"));
    assert_eq!(t.attributes(), ["Breast", "Tail", "Beak", "Eyes"]);
    assert_eq!(t.edges.iter().filter(|e| e.source != "American Robin").count(), 5);
    assert!(validate(&t).is_empty());
    let r = enumerate_rationales(&t).unwrap();
    assert_eq!(r.len(), 9);
    assert_eq!(r[0].text, "American Robin has Breast");
    assert_eq!(r[0].kind, RationaleKind::Attribute);
    assert!(r.iter().any(|x| x.text == "Breast is Red" && x.path == ["American Robin", "Breast", "Red"]));
    assert!(r[..4].iter().all(|x| x.kind == RationaleKind::Attribute));
    assert!(r[4..].iter().all(|x| x.kind == RationaleKind::Subattribute));
}

#[test]
fn airliner_tree() {
    let t = parse_tree(AIRLINER_CORRECTED).unwrap();
    assert_eq!(t.attributes(), ["Wings", "Tail", "Fuselage", "Engines", "Windows", "Logo"]);
    assert!(validate(&t).is_empty());
    assert_eq!(enumerate_rationales(&t).unwrap().len(), 12);
}

#[test]
fn verbatim_airliner_has_a_dangling_edge() {
    let t = parse_tree(AIRLINER).unwrap();
    let v = validate(&t);
    assert!(v.iter().any(|v| v.code == ViolationCode::DanglingEdge && v.ids == ["Horiz. stabilizer"]));
    assert!(v.iter().any(|v| v.code == ViolationCode::OrphanNode && v.ids == ["Horizontal stabilizer"]));
}

#[test]
fn schema_and_parse_errors() {
    assert!(matches!(parse_tree("{}"), Err(Error::Schema(k)) if k == "nodes"));
    assert!(matches!(parse_tree(r#"{"nodes": [], "edges": [{"source": "a"}]}"#), Err(Error::Schema(k)) if k == "edges[0].target"));
    assert!(matches!(parse_tree("{\n  \"nodes\": [,"), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn constructed_mutations() {
    let mut t = parse_tree(ROBIN).unwrap();
    t.edges.push(Edge { source: "Breast".into(), target: "Tail".into(), relation: "near".into() });
    assert!(codes(&t).contains(&ViolationCode::SameDepthEdge));

    let mut t = parse_tree(ROBIN).unwrap();
    t.nodes.push(Node { id: "Feet".into(), label: "Feet".into() });
    let v = validate(&t);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].code, ViolationCode::OrphanNode);
    assert_eq!(v[0].ids, ["Feet"]);

    let single = RationaleTree { nodes: vec![Node { id: "Zebra".into(), label: "Zebra".into() }], edges: vec![] };
    assert_eq!(codes(&single), [ViolationCode::OrphanNode]);
    assert!(matches!(enumerate_rationales(&single), Err(Error::Validation(_))));
}

#[test]
fn prompt_rendering() {
    let p = render_prompt("zebra").unwrap();
    assert!(normalize_text(&p).contains("a zebra in a photo"));
    assert!(!p.contains("{category_name}"));
    let instruction_start = TEMPLATE.find("What are useful").unwrap();
    assert_eq!(&p[..instruction_start], &TEMPLATE[..instruction_start]);
    assert!(p.ends_with("No other explanations, only provide the graph.\n"));
    assert!(p.contains(ROBIN) && p.contains(AIRLINER));
    assert!(matches!(render_prompt(""), Err(Error::Argument(_))));
    assert_eq!(render_prompt("x").unwrap().len(), TEMPLATE.len() - "{category_name}".len() + 1);
}

#[test]
fn stats_on_appendix_trees() {
    let dir = tempfile::tempdir().unwrap();
    let s = corpus_stats(dir.path()).unwrap();
    assert_eq!((s.categories, s.unique_rationales, s.invalid_count), (0, 0, 0));
    assert_eq!(s.mean_rationales_per_category, 0.0);

    std::fs::write(dir.path().join("robin.json"), ROBIN).unwrap();
    std::fs::write(dir.path().join("airliner.json"), AIRLINER_CORRECTED).unwrap();
    std::fs::write(dir.path().join("scene.spec.json"), "not a tree").unwrap();
    // oracle: distinct normalized edge phrases over both files
    let mut oracle = HashSet::new();
    for text in [ROBIN, AIRLINER_CORRECTED] {
        let t = parse_tree(text).unwrap();
        for e in &t.edges {
            oracle.insert(format!("{} {} {}", e.source, e.relation, e.target).to_lowercase());
        }
    }
    assert_eq!(oracle.len(), 21);
    let s = corpus_stats(dir.path()).unwrap();
    assert_eq!((s.categories, s.unique_rationales, s.invalid_count), (2, 21, 0));
    assert_eq!(s.mean_rationales_per_category, 10.5);

    std::fs::write(dir.path().join("broken.json"), "{ nope").unwrap();
    let s = corpus_stats(dir.path()).unwrap();
    assert_eq!((s.categories, s.invalid_count), (2, 1));
    assert_eq!(s.invalid[0].file, "broken.json");
}

/// Independent statement of tree validity.
fn oracle_valid(t: &RationaleTree) -> bool {
    let ids: Vec<&str> = t.nodes.iter().map(|n| n.id.as_str()).collect();
    let idset: HashSet<&str> = ids.iter().copied().collect();
    if ids.is_empty() || idset.len() != ids.len() {
        return false;
    }
    if t.edges.iter().any(|e| !idset.contains(e.source.as_str()) || !idset.contains(e.target.as_str())) {
        return false;
    }
    let mut indeg: HashMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
    let mut degree: HashMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
    for e in &t.edges {
        *indeg.get_mut(e.target.as_str()).unwrap() += 1;
        *degree.get_mut(e.target.as_str()).unwrap() += 1;
        *degree.get_mut(e.source.as_str()).unwrap() += 1;
    }
    if degree.values().any(|&d| d == 0) {
        return false;
    }
    let sources: Vec<&str> = ids.iter().copied().filter(|i| indeg[i] == 0).collect();
    if sources.len() != 1 {
        return false;
    }
    let mut depth: HashMap<&str, usize> = HashMap::from([(sources[0], 0)]);
    let mut q = VecDeque::from([sources[0]]);
    while let Some(u) = q.pop_front() {
        for e in t.edges.iter().filter(|e| e.source == u) {
            if !depth.contains_key(e.target.as_str()) {
                depth.insert(&e.target, depth[u] + 1);
                q.push_back(&e.target);
            }
        }
    }
    if depth.len() != ids.len() || depth.values().any(|&d| d > 2) {
        return false;
    }
    // strictly layered edges rule out cycles and same-depth links
    t.edges.iter().all(|e| depth[e.target.as_str()] == depth[e.source.as_str()] + 1)
}

fn mutated_tree() -> impl Strategy<Value = RationaleTree> {
    let base = parse_tree(ROBIN).unwrap();
    let names: Vec<String> = base.nodes.iter().map(|n| n.id.clone()).chain(["Feet".to_string(), "Blue".to_string()]).collect();
    let n = names.len();
    (
        prop::collection::vec((0usize..4, 0..n, 0..n), 0..4),
        prop::collection::vec(0usize..base.edges.len(), 0..3),
    )
        .prop_map(move |(adds, drops)| {
            let mut t = base.clone();
            for i in {
                let mut d = drops.clone();
                d.sort_unstable();
                d.dedup();
                d.into_iter().rev()
            } {
                t.edges.remove(i);
            }
            for (kind, a, b) in adds {
                match kind {
                    0 => t.edges.push(Edge { source: names[a].clone(), target: names[b].clone(), relation: "is".into() }),
                    1 => t.nodes.push(Node { id: names[a].clone(), label: names[a].clone() }),
                    2 if !t.nodes.iter().any(|x| x.id == names[a]) => {
                        t.nodes.push(Node { id: names[a].clone(), label: names[a].clone() });
                        t.edges.push(Edge { source: names[b].clone(), target: names[a].clone(), relation: "has".into() });
                    }
                    _ => {
                        if let Some(pos) = t.nodes.iter().position(|x| x.id == names[a]) {
                            if pos > 0 {
                                t.nodes.remove(pos);
                            }
                        }
                    }
                }
            }
            t
        })
}

proptest! {
    #[test]
    fn validate_agrees_with_oracle(t in mutated_tree()) {
        prop_assert_eq!(validate(&t).is_empty(), oracle_valid(&t), "{:?}", validate(&t));
    }

    #[test]
    fn parse_serialize_round_trip(t in mutated_tree()) {
        prop_assert_eq!(parse_tree(&serialize_tree(&t)).unwrap(), t);
    }

    #[test]
    fn one_rationale_per_edge(t in mutated_tree()) {
        if validate(&t).is_empty() {
            prop_assert_eq!(enumerate_rationales(&t).unwrap().len(), t.edges.len());
        }
    }
}
