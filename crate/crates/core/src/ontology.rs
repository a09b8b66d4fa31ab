//! Structured rationale trees: a category root, attribute children and
//! sub-attribute grandchildren.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const PROMPT_TEMPLATE: &str = include_str!("../assets/prompt.txt");
const PLACEHOLDER: &str = "{category_name}";
const MAX_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleTree {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptyTree,
    DuplicateId,
    DanglingEdge,
    OrphanNode,
    NoRoot,
    MultipleRoots,
    Cycle,
    DepthExceeded,
    SameDepthEdge,
    /// Edge that does not go from one depth to the next.
    NonDescendingEdge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RationaleKind {
    Attribute,
    Subattribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub kind: RationaleKind,
    /// Labels from the root down to this rationale's target.
    pub path: Vec<String>,
}

fn field<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a str> {
    v.get(key).and_then(Value::as_str).ok_or_else(|| Error::Schema(format!("{ctx}.{key}")))
}

fn array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.get(key).and_then(Value::as_array).ok_or_else(|| Error::Schema(key.to_string()))
}

/// Parse one tree object. A leading `Name = ` before the object, as in
/// prompt exemplars, is accepted and ignored.
pub fn parse_tree(json_text: &str) -> Result<RationaleTree> {
    let body = match (json_text.find('='), json_text.find('{')) {
        (Some(eq), Some(brace)) if eq < brace => &json_text[eq + 1..],
        _ => json_text,
    };
    let v: Value = serde_json::from_str(body)?;
    let mut nodes = Vec::new();
    for (i, n) in array(&v, "nodes")?.iter().enumerate() {
        let ctx = format!("nodes[{i}]");
        nodes.push(Node { id: field(n, "id", &ctx)?.to_string(), label: field(n, "label", &ctx)?.to_string() });
    }
    let mut edges = Vec::new();
    for (i, e) in array(&v, "edges")?.iter().enumerate() {
        let ctx = format!("edges[{i}]");
        edges.push(Edge {
            source: field(e, "source", &ctx)?.to_string(),
            target: field(e, "target", &ctx)?.to_string(),
            relation: field(e, "relation", &ctx)?.to_string(),
        });
    }
    Ok(RationaleTree { nodes, edges })
}

pub fn serialize_tree(tree: &RationaleTree) -> String {
    serde_json::to_string_pretty(tree).expect("tree serializes")
}

impl RationaleTree {
    fn label_of<'a>(&'a self, id: &'a str) -> &'a str {
        self.nodes.iter().find(|n| n.id == id).map_or(id, |n| n.label.as_str())
    }

    /// The unique node with outgoing but no incoming edges.
    pub fn root(&self) -> Option<&Node> {
        let targets: HashSet<&str> = self.edges.iter().map(|e| e.target.as_str()).collect();
        let sources: HashSet<&str> = self.edges.iter().map(|e| e.source.as_str()).collect();
        let mut roots = self.nodes.iter().filter(|n| sources.contains(n.id.as_str()) && !targets.contains(n.id.as_str()));
        match (roots.next(), roots.next()) {
            (Some(r), None) => Some(r),
            _ => None,
        }
    }

    /// Category label: the root's label.
    pub fn category(&self) -> Option<&str> {
        self.root().map(|r| r.label.as_str())
    }

    /// Shortest edge distance from the root for every reachable node id.
    pub fn depths(&self) -> HashMap<&str, usize> {
        let mut depth = HashMap::new();
        let Some(root) = self.root() else { return depth };
        depth.insert(root.id.as_str(), 0);
        let mut queue = VecDeque::from([root.id.as_str()]);
        while let Some(id) = queue.pop_front() {
            let d = depth[id];
            for e in self.edges.iter().filter(|e| e.source == id) {
                if !depth.contains_key(e.target.as_str()) {
                    depth.insert(e.target.as_str(), d + 1);
                    queue.push_back(e.target.as_str());
                }
            }
        }
        depth
    }

    fn labels_at(&self, level: usize) -> Vec<String> {
        let depth = self.depths();
        self.nodes.iter().filter(|n| depth.get(n.id.as_str()) == Some(&level)).map(|n| n.label.clone()).collect()
    }

    pub fn attributes(&self) -> Vec<String> {
        self.labels_at(1)
    }

    pub fn subattributes(&self) -> Vec<String> {
        self.labels_at(2)
    }
}

fn has_cycle(tree: &RationaleTree, ids: &HashSet<&str>) -> Vec<String> {
    let mut indeg: BTreeMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
    for e in &tree.edges {
        if ids.contains(e.source.as_str()) {
            if let Some(d) = indeg.get_mut(e.target.as_str()) {
                *d += 1;
            }
        }
    }
    let mut queue: VecDeque<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    while let Some(id) = queue.pop_front() {
        for e in tree.edges.iter().filter(|e| e.source == id) {
            if let Some(d) = indeg.get_mut(e.target.as_str()) {
                *d -= 1;
                if *d == 0 {
                    queue.push_back(e.target.as_str());
                }
            }
        }
    }
    indeg.into_iter().filter(|(_, d)| *d > 0).map(|(i, _)| i.to_string()).collect()
}

pub fn validate(tree: &RationaleTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, ids: Vec<String>| out.push(Violation { code, ids });
    if tree.nodes.is_empty() {
        push(ViolationCode::EmptyTree, Vec::new());
        return out;
    }
    let mut seen = HashSet::new();
    let mut dups = BTreeSet::new();
    for n in &tree.nodes {
        if !seen.insert(n.id.as_str()) {
            dups.insert(n.id.clone());
        }
    }
    if !dups.is_empty() {
        push(ViolationCode::DuplicateId, dups.into_iter().collect());
    }
    for e in &tree.edges {
        let missing: Vec<String> =
            [&e.source, &e.target].into_iter().filter(|id| !seen.contains(id.as_str())).cloned().collect();
        if !missing.is_empty() {
            push(ViolationCode::DanglingEdge, missing);
        }
    }
    let touched: HashSet<&str> = tree.edges.iter().flat_map(|e| [e.source.as_str(), e.target.as_str()]).collect();
    let orphans: Vec<String> = tree.nodes.iter().filter(|n| !touched.contains(n.id.as_str())).map(|n| n.id.clone()).collect();
    if !orphans.is_empty() {
        push(ViolationCode::OrphanNode, orphans);
    }

    let targets: HashSet<&str> = tree.edges.iter().map(|e| e.target.as_str()).collect();
    let roots: Vec<String> = tree
        .nodes
        .iter()
        .filter(|n| touched.contains(n.id.as_str()) && !targets.contains(n.id.as_str()))
        .map(|n| n.id.clone())
        .collect();
    match roots.len() {
        0 if !touched.is_empty() => push(ViolationCode::NoRoot, Vec::new()),
        0 | 1 => {}
        _ => push(ViolationCode::MultipleRoots, roots.clone()),
    }
    let cyclic = has_cycle(tree, &seen);
    if !cyclic.is_empty() {
        push(ViolationCode::Cycle, cyclic);
    }
    if roots.len() != 1 {
        return out;
    }

    let depth = tree.depths();
    let deep: Vec<String> =
        tree.nodes.iter().filter(|n| depth.get(n.id.as_str()).is_some_and(|&d| d > MAX_DEPTH)).map(|n| n.id.clone()).collect();
    if !deep.is_empty() {
        push(ViolationCode::DepthExceeded, deep);
    }
    for e in &tree.edges {
        let (Some(&ds), Some(&dt)) = (depth.get(e.source.as_str()), depth.get(e.target.as_str())) else { continue };
        if ds == dt {
            push(ViolationCode::SameDepthEdge, vec![e.source.clone(), e.target.clone()]);
        } else if dt != ds + 1 {
            push(ViolationCode::NonDescendingEdge, vec![e.source.clone(), e.target.clone()]);
        }
    }
    out
}

fn invalid(violations: &[Violation]) -> Error {
    let parts: Vec<String> = violations
        .iter()
        .map(|v| format!("{} [{}]", serde_json::to_value(v.code).expect("code").as_str().unwrap_or_default(), v.ids.join(", ")))
        .collect();
    Error::Validation(parts.join("; "))
}

/// One rationale per edge: root edges first, then leaf edges, each in file
/// order.
pub fn enumerate_rationales(tree: &RationaleTree) -> Result<Vec<Rationale>> {
    let violations = validate(tree);
    if !violations.is_empty() {
        return Err(invalid(&violations));
    }
    let root = tree.root().expect("valid tree has a root");
    let mut out = Vec::with_capacity(tree.edges.len());
    for kind in [RationaleKind::Attribute, RationaleKind::Subattribute] {
        for e in tree.edges.iter().filter(|e| (e.source == root.id) == (kind == RationaleKind::Attribute)) {
            let (src, tgt) = (tree.label_of(&e.source), tree.label_of(&e.target));
            let path = match kind {
                RationaleKind::Attribute => vec![root.label.clone(), tgt.to_string()],
                RationaleKind::Subattribute => vec![root.label.clone(), src.to_string(), tgt.to_string()],
            };
            out.push(Rationale { text: format!("{src} {} {tgt}", e.relation), kind, path });
        }
    }
    Ok(out)
}

/// The curation prompt with `category_name` substituted.
pub fn render_prompt(category_name: &str) -> Result<String> {
    if category_name.trim().is_empty() {
        return Err(Error::Argument("category name is empty".into()));
    }
    Ok(PROMPT_TEMPLATE.replace(PLACEHOLDER, category_name))
}

/// Lowercased with whitespace runs collapsed to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub categories: usize,
    /// Distinct rationale texts across the whole corpus.
    pub unique_rationales: usize,
    /// Sum over categories of distinct texts within each category.
    pub unique_within_categories: usize,
    pub mean_rationales_per_category: f64,
    pub invalid_count: usize,
    pub invalid: Vec<InvalidFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidFile {
    pub file: String,
    pub reason: String,
}

/// Whether `path` names a tree file (`*.json`, excluding `*.spec.json`).
pub fn is_tree_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.ends_with(".json") && !name.ends_with(".spec.json")
}

/// Load every valid tree under `dir` (sorted by file name), recording the
/// rest with their failure reason.
pub fn load_trees(dir: &Path) -> Result<(Vec<(String, RationaleTree)>, Vec<InvalidFile>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_tree_file(p))
        .collect();
    files.sort();
    let mut trees = Vec::new();
    let mut bad = Vec::new();
    for path in files {
        let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let loaded = fs::read_to_string(&path).map_err(|e| Error::io(&path, e)).and_then(|t| parse_tree(&t)).and_then(|t| {
            let v = validate(&t);
            if v.is_empty() {
                Ok(t)
            } else {
                Err(invalid(&v))
            }
        });
        match loaded {
            Ok(t) => trees.push((file, t)),
            Err(e) => bad.push(InvalidFile { file, reason: e.to_string() }),
        }
    }
    Ok((trees, bad))
}

pub fn corpus_stats(dir: &Path) -> Result<CorpusStats> {
    let (trees, invalid) = load_trees(dir)?;
    let mut all = BTreeSet::new();
    let mut within = 0;
    let mut total = 0;
    for (_, t) in &trees {
        let texts: BTreeSet<String> =
            enumerate_rationales(t)?.iter().map(|r| normalize_text(&r.text)).collect();
        total += t.edges.len();
        within += texts.len();
        all.extend(texts);
    }
    let categories = trees.len();
    Ok(CorpusStats {
        categories,
        unique_rationales: all.len(),
        unique_within_categories: within,
        mean_rationales_per_category: if categories == 0 { 0.0 } else { total as f64 / categories as f64 },
        invalid_count: invalid.len(),
        invalid,
    })
}
