//! Compositional benchmark: every category is a set of textured parts
//! placed on a patch-aligned grid, each part planted for one rationale.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::BinaryMask;
use crate::image::Image;
use crate::netpbm;
use crate::ontology::{self, Edge, Node, RationaleTree};
use crate::rng;

const MAX_LAYOUT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HStripes,
    VStripes,
    Checker,
    Diagonal,
    Solid,
}

impl Pattern {
    /// Whether the pixel at local offset (`x`, `y`) takes the complementary color.
    fn alternate(self, x: usize, y: usize) -> bool {
        match self {
            Pattern::HStripes => (y / 2) % 2 == 1,
            Pattern::VStripes => (x / 2) % 2 == 1,
            Pattern::Checker => (x / 2 + y / 2) % 2 == 1,
            Pattern::Diagonal => ((x + y) / 2) % 2 == 1,
            Pattern::Solid => false,
        }
    }
}

/// Two-color texture: `color` and its complement `255 - color`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Texture {
    pub pattern: Pattern,
    pub color: [u8; 3],
}

/// Where a part's top-left cell may land, in grid cells (end-exclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Height and width in cells.
    pub size: [usize; 2],
    pub rows: [usize; 2],
    pub cols: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSpec {
    pub part_name: String,
    /// Rationale phrase, `"<part> <relation> <attribute>"`.
    pub phrase: String,
    pub texture: Texture,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub level: f64,
    pub amplitude: f64,
    pub distractor_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub image_side: usize,
    /// Grid cell side in pixels.
    pub cell: usize,
    pub parts: Vec<PartSpec>,
    pub background: Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMask {
    pub rationale: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub category: String,
    pub caption: String,
    pub part_masks: Vec<PartMask>,
    pub seed: u64,
}

/// Text used for a category's label prompt and scene captions.
pub fn caption(category: &str) -> String {
    format!("a photo of a {}", category.to_lowercase())
}

const PALETTE: [[u8; 3]; 4] = [[230, 25, 25], [25, 230, 25], [230, 230, 25], [230, 128, 25]];
const PATTERNS: [Pattern; 4] = [Pattern::HStripes, Pattern::VStripes, Pattern::Checker, Pattern::Diagonal];

/// Part library: (phrase, pattern index, palette index).
const LIBRARY: [(&str, usize, usize); 16] = [
    ("Breast is Red", 0, 0),
    ("Tail is Long", 1, 0),
    ("Beak is Yellow", 2, 2),
    ("Eyes are Round", 3, 0),
    ("Neck is Long", 0, 1),
    ("Wings are Large", 1, 1),
    ("Fuselage is Cylindrical", 2, 1),
    ("Engines are Twin", 3, 1),
    ("Windows are Rowed", 0, 2),
    ("Stripes are Black", 1, 2),
    ("Mane is Short", 3, 2),
    ("Legs are Thin", 2, 0),
    ("Horns are Curved", 0, 3),
    ("Fins are Pointed", 1, 3),
    ("Scales are Shiny", 2, 3),
    ("Spots are White", 3, 3),
];

const CATEGORIES: [(&str, [usize; 5]); 8] = [
    ("Robin", [0, 1, 2, 3, 11]),
    ("Heron", [4, 2, 11, 5, 15]),
    ("Airliner", [5, 6, 7, 8, 1]),
    ("Zebra", [9, 10, 1, 3, 11]),
    ("Giraffe", [4, 15, 10, 12, 3]),
    ("Shark", [13, 14, 6, 9, 2]),
    ("Goat", [12, 0, 7, 14, 4]),
    ("Parrot", [13, 8, 5, 10, 15]),
];

/// The eight-category default benchmark on 32-pixel images with 8-pixel cells.
pub fn default_specs() -> Vec<CategorySpec> {
    let (side, cell) = (32, 8);
    let g = side / cell;
    CATEGORIES
        .iter()
        .map(|(name, parts)| CategorySpec {
            name: name.to_string(),
            image_side: side,
            cell,
            parts: parts
                .iter()
                .map(|&p| {
                    let (phrase, pat, pal) = LIBRARY[p];
                    PartSpec {
                        part_name: phrase.split(' ').next().expect("phrase has a part").to_string(),
                        phrase: phrase.to_string(),
                        texture: Texture { pattern: PATTERNS[pat], color: PALETTE[pal] },
                        placement: Placement { size: [1, 1], rows: [0, g], cols: [0, g] },
                    }
                })
                .collect(),
            background: Background { level: 0.5, amplitude: 0.05, distractor_prob: 0.25 },
        })
        .collect()
}

fn split_phrase<'a>(part: &PartSpec) -> Result<(&str, &str)> {
    let rest = part
        .phrase
        .strip_prefix(&part.part_name)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Data(format!("phrase `{}` does not start with part `{}`", part.phrase, part.part_name)))?;
    rest.split_once(' ').ok_or_else(|| Error::Data(format!("phrase `{}` lacks an attribute", part.phrase)))
}

/// Rationale tree implied by a spec: root has each part, each part carries
/// its attribute.
pub fn tree_for_spec(spec: &CategorySpec) -> Result<RationaleTree> {
    let mut nodes = vec![Node { id: spec.name.clone(), label: spec.name.clone() }];
    let mut edges = Vec::new();
    for p in &spec.parts {
        nodes.push(Node { id: p.part_name.clone(), label: p.part_name.clone() });
        edges.push(Edge { source: spec.name.clone(), target: p.part_name.clone(), relation: "has".into() });
    }
    for p in &spec.parts {
        let (relation, attr) = split_phrase(p)?;
        if !nodes.iter().any(|n| n.id == attr) {
            nodes.push(Node { id: attr.to_string(), label: attr.to_string() });
        }
        edges.push(Edge { source: p.part_name.clone(), target: attr.to_string(), relation: relation.to_string() });
    }
    Ok(RationaleTree { nodes, edges })
}

impl CategorySpec {
    /// Check internal consistency and agreement with `tree`.
    pub fn validate(&self, tree: &RationaleTree) -> Result<()> {
        if self.cell == 0 || self.image_side % self.cell != 0 {
            return Err(Error::Data(format!("{}: cell {} does not tile side {}", self.name, self.cell, self.image_side)));
        }
        if self.parts.is_empty() {
            return Err(Error::Data(format!("{}: no parts", self.name)));
        }
        let g = self.image_side / self.cell;
        let mut names = HashSet::new();
        let phrases: HashSet<String> =
            ontology::enumerate_rationales(tree)?.into_iter().map(|r| ontology::normalize_text(&r.text)).collect();
        for p in &self.parts {
            if !names.insert(&p.part_name) {
                return Err(Error::Data(format!("{}: duplicate part `{}`", self.name, p.part_name)));
            }
            if !phrases.contains(&ontology::normalize_text(&p.phrase)) {
                return Err(Error::Data(format!("{}: phrase `{}` not in the rationale tree", self.name, p.phrase)));
            }
            let pl = &p.placement;
            let ok = pl.size[0] >= 1
                && pl.size[1] >= 1
                && pl.rows[0] < pl.rows[1]
                && pl.cols[0] < pl.cols[1]
                && pl.rows[0] + pl.size[0] <= g
                && pl.cols[0] + pl.size[1] <= g;
            if !ok {
                return Err(Error::Data(format!("{}: part `{}` has an impossible placement", self.name, p.part_name)));
            }
        }
        let bg = &self.background;
        if !(0.0..=1.0).contains(&bg.distractor_prob) || bg.amplitude < 0.0 || !(0.0..=1.0).contains(&bg.level) {
            return Err(Error::Data(format!("{}: invalid background", self.name)));
        }
        Ok(())
    }
}

fn q(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn layout(spec: &CategorySpec, rng: &mut ChaCha8Rng) -> Result<(Vec<(usize, usize)>, Vec<bool>)> {
    let g = spec.image_side / spec.cell;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut occupied = vec![false; g * g];
        let mut placed = Vec::with_capacity(spec.parts.len());
        let mut ok = true;
        for p in &spec.parts {
            let pl = &p.placement;
            let r_hi = pl.rows[1].min(g - pl.size[0] + 1);
            let c_hi = pl.cols[1].min(g - pl.size[1] + 1);
            let r = rng.random_range(pl.rows[0]..r_hi);
            let c = rng.random_range(pl.cols[0]..c_hi);
            let cells: Vec<usize> =
                (r..r + pl.size[0]).flat_map(|y| (c..c + pl.size[1]).map(move |x| y * g + x)).collect();
            if cells.iter().any(|&i| occupied[i]) {
                ok = false;
                break;
            }
            for i in cells {
                occupied[i] = true;
            }
            placed.push((r, c));
        }
        if ok {
            return Ok((placed, occupied));
        }
    }
    Err(Error::Generation(format!("{}: no disjoint layout after {MAX_LAYOUT_ATTEMPTS} attempts", spec.name)))
}

/// Deterministic scene for (`spec`, `seed`).
pub fn gen_scene(spec: &CategorySpec, seed: u64) -> Result<SyntheticScene> {
    let tree = tree_for_spec(spec)?;
    spec.validate(&tree)?;
    let mut rng = rng::stream(seed, "scene", &[]);
    let (side, cell) = (spec.image_side, spec.cell);
    let g = side / cell;
    let (placed, occupied) = layout(spec, &mut rng)?;

    let bg = &spec.background;
    let mut data: Vec<f64> =
        (0..side * side * 3).map(|_| q(bg.level + bg.amplitude * rng.random_range(-1.0..=1.0))).collect();
    let mut paint = |r0: usize, c0: usize, h: usize, w: usize, tex: Texture| {
        for y in 0..h * cell {
            for x in 0..w * cell {
                let o = ((r0 * cell + y) * side + c0 * cell + x) * 3;
                let alt = tex.pattern.alternate(x, y);
                for ch in 0..3 {
                    let c = if alt { 255 - tex.color[ch] } else { tex.color[ch] };
                    data[o + ch] = c as f64 / 255.0;
                }
            }
        }
    };
    let mut part_masks = Vec::with_capacity(spec.parts.len());
    for (p, &(r, c)) in spec.parts.iter().zip(&placed) {
        paint(r, c, p.placement.size[0], p.placement.size[1], p.texture);
        let mut cells = vec![false; g * g];
        for y in r..r + p.placement.size[0] {
            for x in c..c + p.placement.size[1] {
                cells[y * g + x] = true;
            }
        }
        part_masks.push(PartMask { rationale: p.phrase.clone(), mask: BinaryMask { grid: g, cells } });
    }
    if rng.random_bool(bg.distractor_prob) {
        let free: Vec<usize> = (0..g * g).filter(|&i| !occupied[i]).collect();
        if !free.is_empty() {
            let at = free[rng.random_range(0..free.len())];
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            let color = if rng.random_bool(0.5) { base } else { base.map(|v| 255 - v) };
            paint(at / g, at % g, 1, 1, Texture { pattern: Pattern::Solid, color });
        }
    }
    Ok(SyntheticScene {
        image: Image::new(side, data)?,
        category: spec.name.clone(),
        caption: caption(&spec.name),
        part_masks,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub specs: Vec<CategorySpec>,
    pub scenes: Vec<SyntheticScene>,
    pub splits: Vec<Split>,
    pub seed: u64,
    pub n_per_class: usize,
}

/// 70/15/15 assignment by ordering scenes on a hash of their seeds.
pub fn assign_splits(seeds: &[u64]) -> Vec<Split> {
    let n = seeds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rng::mix(seeds[i]), i));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn scene_seed(seed: u64, class: usize, k: usize) -> u64 {
    rng::derive(seed, &[class as u64, k as u64])
}

pub fn gen_dataset(specs: &[CategorySpec], n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Argument("n_per_class must be at least 1".into()));
    }
    if specs.is_empty() {
        return Err(Error::Argument("no category specs".into()));
    }
    let mut scenes = Vec::with_capacity(specs.len() * n_per_class);
    for k in 0..n_per_class {
        for (c, spec) in specs.iter().enumerate() {
            let s = gen_scene(spec, scene_seed(seed, c, k))
                .map_err(|e| Error::Generation(format!("scene {}: {e}", scenes.len())))?;
            scenes.push(s);
        }
    }
    let seeds: Vec<u64> = scenes.iter().map(|s| s.seed).collect();
    Ok(Dataset { specs: specs.to_vec(), splits: assign_splits(&seeds), scenes, seed, n_per_class })
}

impl Dataset {
    pub fn categories(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn class_index(&self, category: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == category)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Part phrases per category, in spec order.
    pub fn rationales(&self) -> Vec<Vec<String>> {
        self.specs.iter().map(|s| s.parts.iter().map(|p| p.phrase.clone()).collect()).collect()
    }

    pub fn spec(&self, category: &str) -> Option<&CategorySpec> {
        self.specs.iter().find(|s| s.name == category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPart {
    pub rationale: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: usize,
    pub category: String,
    pub seed: u64,
    pub split: Split,
    pub image: String,
    pub caption: String,
    pub parts: Vec<ManifestPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_per_class: usize,
    pub image_side: usize,
    pub categories: Vec<String>,
    pub scenes: Vec<ManifestScene>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CATEGORY_DIR: &str = "categories";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write category trees and specs, scene images, masks and the manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    let cat_dir = dir.join(CATEGORY_DIR);
    for sub in [cat_dir.clone(), dir.join("images"), dir.join("masks")] {
        mkdir(&sub)?;
    }
    for spec in &ds.specs {
        let stem = spec.name.to_lowercase().replace(' ', "_");
        let tree = tree_for_spec(spec)?;
        fs::write(cat_dir.join(format!("{stem}.tree.json")), ontology::serialize_tree(&tree))
            .map_err(|e| Error::io(&cat_dir, e))?;
        write_json(&cat_dir.join(format!("{stem}.spec.json")), spec)?;
    }
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for (id, (s, split)) in ds.scenes.iter().zip(&ds.splits).enumerate() {
        let image = format!("images/{id:06}.ppm");
        netpbm::write(&dir.join(&image), &netpbm::encode_ppm(&s.image))?;
        let mut parts = Vec::with_capacity(s.part_masks.len());
        for (k, pm) in s.part_masks.iter().enumerate() {
            let mask = format!("masks/{id:06}_{k}.pbm");
            let cell = s.image.side() / pm.mask.grid;
            let side = s.image.side();
            netpbm::write(&dir.join(&mask), &netpbm::encode_pbm(side, side, &pm.mask.pixels(cell)))?;
            parts.push(ManifestPart { rationale: pm.rationale.clone(), mask });
        }
        scenes.push(ManifestScene {
            id,
            category: s.category.clone(),
            seed: s.seed,
            split: *split,
            image,
            caption: s.caption.clone(),
            parts,
        });
    }
    let manifest = Manifest {
        seed: ds.seed,
        n_per_class: ds.n_per_class,
        image_side: ds.specs[0].image_side,
        categories: ds.categories(),
        scenes,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Category specs stored under `dir/categories`, ordered as in the manifest.
fn read_specs(dir: &Path, categories: &[String]) -> Result<Vec<CategorySpec>> {
    let cat_dir = dir.join(CATEGORY_DIR);
    categories
        .iter()
        .map(|name| {
            let stem = name.to_lowercase().replace(' ', "_");
            let spec: CategorySpec = read_json(&cat_dir.join(format!("{stem}.spec.json")))?;
            let tree_path = cat_dir.join(format!("{stem}.tree.json"));
            let tree = ontology::parse_tree(&fs::read_to_string(&tree_path).map_err(|e| Error::io(&tree_path, e))?)?;
            spec.validate(&tree)?;
            Ok(spec)
        })
        .collect()
}

fn patch_grid(pixels: &[bool], side: usize, cell: usize) -> BinaryMask {
    let g = side / cell;
    BinaryMask { grid: g, cells: (0..g * g).map(|i| pixels[(i / g) * cell * side + (i % g) * cell]).collect() }
}

/// Read a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let specs = read_specs(dir, &manifest.categories)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    let mut splits = Vec::with_capacity(manifest.scenes.len());
    for ms in &manifest.scenes {
        let spec = specs
            .iter()
            .find(|s| s.name == ms.category)
            .ok_or_else(|| Error::Data(format!("scene {} has unknown category `{}`", ms.id, ms.category)))?;
        let image = netpbm::read_ppm(&dir.join(&ms.image))?;
        let side = image.side();
        let mut part_masks = Vec::with_capacity(ms.parts.len());
        for p in &ms.parts {
            let (w, h, px) = netpbm::read_pbm(&dir.join(&p.mask))?;
            if (w, h) != (side, side) {
                return Err(Error::Data(format!("mask {} is {w}x{h}, image is {side}", p.mask)));
            }
            part_masks.push(PartMask { rationale: p.rationale.clone(), mask: patch_grid(&px, side, spec.cell) });
        }
        scenes.push(SyntheticScene {
            image,
            category: ms.category.clone(),
            caption: ms.caption.clone(),
            part_masks,
            seed: ms.seed,
        });
        splits.push(ms.split);
    }
    Ok(Dataset { specs, scenes, splits, seed: manifest.seed, n_per_class: manifest.n_per_class })
}

/// Paths of every category tree file under a dataset directory.
pub fn tree_dir(dir: &Path) -> PathBuf {
    dir.join(CATEGORY_DIR)
}
