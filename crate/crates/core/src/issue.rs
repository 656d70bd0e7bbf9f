//! Issues: partitions of a set of images into cells, and the per-target
//! computation contexts sampled from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::World;

/// A partition of a set of image ids into disjoint, non-empty cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawIssue")]
pub struct Issue {
    label: String,
    cells: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawIssue {
    label: String,
    cells: Vec<Vec<String>>,
}

impl TryFrom<RawIssue> for Issue {
    type Error = Error;

    fn try_from(raw: RawIssue) -> Result<Self> {
        Issue::new(raw.label, raw.cells)
    }
}

impl Issue {
    pub fn new(label: impl Into<String>, cells: Vec<Vec<String>>) -> Result<Self> {
        let label = label.into();
        let mut seen = BTreeSet::new();
        for cell in &cells {
            if cell.is_empty() {
                return Err(Error::InvalidIssue(format!("`{label}` has an empty cell")));
            }
            for id in cell {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidIssue(format!(
                        "`{label}`: image `{id}` appears in more than one place"
                    )));
                }
            }
        }
        Ok(Issue { label, cells })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn cells(&self) -> &[Vec<String>] {
        &self.cells
    }

    /// All image ids covered by the issue, in cell order.
    pub fn domain(&self) -> impl Iterator<Item = &str> {
        self.cells.iter().flatten().map(String::as_str)
    }

    pub fn domain_len(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, image: &str) -> bool {
        self.domain().any(|id| id == image)
    }

    fn cell_index(&self, image: &str) -> Result<usize> {
        self.cells
            .iter()
            .position(|c| c.iter().any(|id| id == image))
            .ok_or_else(|| Error::ImageNotInIssue(image.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("issue serializes")
    }
}

/// The cell containing `image`.
pub fn cell_of<'a>(issue: &'a Issue, image: &str) -> Result<&'a [String]> {
    issue.cell_index(image).map(|i| issue.cells[i].as_slice())
}

/// One cell per observed value of `attribute`, in schema value order with
/// `unknown` last.
pub fn partition_by_attribute(world: &World, attribute: &str) -> Result<Issue> {
    let attr = world
        .schema
        .get(attribute)
        .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?;
    let mut by_value: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for img in &world.images {
        let v = img.value(attribute).unwrap_or(crate::world::UNKNOWN);
        by_value.entry(v).or_default().push(img.id.clone());
    }
    let mut cells = Vec::with_capacity(by_value.len());
    for v in &attr.values {
        if let Some(cell) = by_value.remove(v.as_str()) {
            cells.push(cell);
        }
    }
    cells.extend(by_value.into_values());
    Issue::new(attribute, cells)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRow {
    pub question: String,
    pub image_id: String,
    pub answer: String,
}

pub type QaTable = Vec<QaRow>;

pub fn load_qa_table(path: impl AsRef<Path>) -> Result<QaTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_issue(path: impl AsRef<Path>) -> Result<Issue> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Partition every image paired with `question` (exact string match) by its
/// answer. Cells follow first appearance of each answer in the table.
pub fn partition_by_qa(qa: &[QaRow], question: &str) -> Result<Issue> {
    let mut answers: Vec<(&str, Vec<String>)> = Vec::new();
    let mut placed: BTreeMap<&str, &str> = BTreeMap::new();
    for row in qa.iter().filter(|r| r.question == question) {
        if let Some(prev) = placed.get(row.image_id.as_str()) {
            if *prev != row.answer {
                return Err(Error::InvalidIssue(format!(
                    "image `{}` has conflicting answers `{prev}` and `{}`",
                    row.image_id, row.answer
                )));
            }
            continue;
        }
        placed.insert(&row.image_id, &row.answer);
        match answers.iter_mut().find(|(a, _)| *a == row.answer) {
            Some((_, cell)) => cell.push(row.image_id.clone()),
            None => answers.push((&row.answer, vec![row.image_id.clone()])),
        }
    }
    if answers.is_empty() {
        return Err(Error::UnknownQuestion(question.to_string()));
    }
    Issue::new(question, answers.into_iter().map(|(_, c)| c).collect())
}

/// Images the speaker reasons over for one target under one issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub target: String,
    /// Members of the target's cell, target first.
    pub same_cell: Vec<String>,
    pub distractors: Vec<String>,
    pub issue_label: String,
}

impl Context {
    /// Context images in reasoning order: the target's cell, then distractors.
    pub fn images(&self) -> Vec<String> {
        self.same_cell.iter().chain(&self.distractors).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.same_cell.len() + self.distractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mask over [`Context::images`] selecting the target's cell.
    pub fn cell_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        mask[..self.same_cell.len()].fill(true);
        mask
    }

    /// Mask selecting only the target.
    pub fn target_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        mask[0] = true;
        mask
    }

    /// Context covering every image of `issue`, target first.
    pub fn full(issue: &Issue, target: &str) -> Result<Self> {
        sample_context(issue, target, issue.domain_len().max(2), 0)
    }
}

/// Draw `k` items uniformly without replacement, returned in input order.
fn sample_in_order(pool: &[String], k: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k {
        // u64 ranges keep the draw sequence identical across platforms.
        let j = i + rng.gen_range(0..(pool.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}

/// Sample a context of at most `budget` images around `target`. The
/// remaining budget is split evenly between cell-mates and distractors
/// (distractors get the odd slot); a side smaller than its share is taken
/// whole and its unused share goes to the other side.
pub fn sample_context(issue: &Issue, target: &str, budget: usize, seed: u64) -> Result<Context> {
    if budget < 2 {
        return Err(Error::InvalidConfig(format!("context budget {budget} < 2")));
    }
    let ci = issue.cell_index(target)?;
    let mates: Vec<String> = issue.cells[ci].iter().filter(|id| *id != target).cloned().collect();
    let pool: Vec<String> = issue
        .cells
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ci)
        .flat_map(|(_, c)| c.iter().cloned())
        .collect();

    let remaining = budget - 1;
    let mut mate_take = (remaining / 2).min(mates.len());
    let dist_take = (remaining - mate_take).min(pool.len());
    mate_take = (remaining - dist_take).min(mates.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut same_cell = vec![target.to_string()];
    same_cell.extend(sample_in_order(&mates, mate_take, &mut rng));
    let distractors = sample_in_order(&pool, dist_take, &mut rng);
    Ok(Context {
        target: target.to_string(),
        same_cell,
        distractors,
        issue_label: issue.label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::shapes6;
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn assert_partition(issue: &Issue, domain: &BTreeSet<String>) {
        let total: usize = issue.cells().iter().map(Vec::len).sum();
        assert_eq!(total, domain.len());
        let union: BTreeSet<String> = issue.domain().map(str::to_string).collect();
        assert_eq!(&union, domain);
    }

    #[test]
    fn color_partition_of_shapes() {
        let w = shapes6();
        let issue = partition_by_attribute(&w, "color").unwrap();
        assert_eq!(
            issue.cells(),
            &[ids(&["o1", "o2"]), ids(&["o3", "o4"]), ids(&["o5", "o6"])]
        );
        assert_eq!(issue.label(), "color");
        assert_eq!(cell_of(&issue, "o1").unwrap(), ids(&["o1", "o2"]).as_slice());
    }

    #[test]
    fn degenerate_partitions() {
        let mut w = shapes6();
        for img in &mut w.images {
            img.values.insert("shape".into(), "square".into());
        }
        let one = partition_by_attribute(&w, "shape").unwrap();
        assert_eq!(one.cells().len(), 1);

        let mut w = shapes6();
        let colors = ["red", "blue", "green", "red", "blue", "green"];
        let sizes = ["small", "small", "small", "large", "large", "large"];
        for (i, img) in w.images.iter_mut().enumerate() {
            img.values.insert("color".into(), colors[i].into());
            img.values.insert("size".into(), sizes[i].into());
        }
        // every image gets a unique (color, size) value through a derived attribute
        let mut schema = w.schema.clone();
        schema.attributes.push(crate::world::Attribute {
            name: "id".into(),
            values: w.image_ids(),
            part: None,
            aspect: None,
        });
        let mut images = w.images.clone();
        for img in &mut images {
            img.values.insert("id".into(), img.id.clone());
        }
        let w = World::new(schema, images, w.lexicon).unwrap();
        let finest = partition_by_attribute(&w, "id").unwrap();
        assert_eq!(finest.cells().len(), 6);
        assert_eq!(cell_of(&finest, "o4").unwrap(), ids(&["o4"]).as_slice());
    }

    #[test]
    fn unknown_forms_its_own_cell() {
        let mut w = shapes6();
        w.images[5].values.remove("color");
        let w = World::new(w.schema, w.images, w.lexicon).unwrap();
        let issue = partition_by_attribute(&w, "color").unwrap();
        assert_eq!(issue.cells().last().unwrap(), &ids(&["o6"]));
        assert_eq!(issue.domain_len(), 6);
    }

    #[test]
    fn unknown_attribute() {
        assert!(matches!(
            partition_by_attribute(&shapes6(), "texture"),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn every_attribute_partition_reproduces_values() {
        let w = shapes6();
        let domain: BTreeSet<String> = w.image_ids().into_iter().collect();
        for attr in &w.schema.attributes {
            let issue = partition_by_attribute(&w, &attr.name).unwrap();
            assert_partition(&issue, &domain);
            for img in &w.images {
                let cell = cell_of(&issue, &img.id).unwrap();
                for other in &w.images {
                    let same = cell.contains(&other.id);
                    assert_eq!(same, img.values[&attr.name] == other.values[&attr.name]);
                }
            }
        }
    }

    fn qa() -> QaTable {
        let q = "is the photo black and white?";
        [("i1", "yes"), ("i2", "no"), ("i3", "yes")]
            .iter()
            .map(|(i, a)| QaRow {
                question: q.into(),
                image_id: i.to_string(),
                answer: a.to_string(),
            })
            .chain(std::iter::once(QaRow {
                question: "what color is the car?".into(),
                image_id: "i9".into(),
                answer: "red".into(),
            }))
            .collect()
    }

    #[test]
    fn qa_partition() {
        let table = qa();
        let issue = partition_by_qa(&table, "is the photo black and white?").unwrap();
        // independent grouping: answer -> images
        let mut expect: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in table.iter().filter(|r| r.question == "is the photo black and white?") {
            expect.entry(&r.answer).or_default().insert(&r.image_id);
        }
        let got: BTreeSet<BTreeSet<&str>> = issue
            .cells()
            .iter()
            .map(|c| c.iter().map(String::as_str).collect())
            .collect();
        assert_eq!(got, expect.into_values().collect());

        let single = partition_by_qa(&table, "what color is the car?").unwrap();
        assert_eq!(single.cells(), &[ids(&["i9"])]);

        assert!(matches!(
            partition_by_qa(&table, "Is the photo black and white?"),
            Err(Error::UnknownQuestion(_))
        ));
    }

    #[test]
    fn issue_rejects_overlap_and_empty_cells() {
        assert!(Issue::new("x", vec![ids(&["a"]), ids(&["a", "b"])]).is_err());
        assert!(Issue::new("x", vec![ids(&["a"]), vec![]]).is_err());
        let err = serde_json::from_str::<Issue>(r#"{"label":"x","cells":[["a"],["a"]]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn issue_json_shape() {
        let issue = Issue::new("q", vec![ids(&["a", "b"]), ids(&["c"])]).unwrap();
        assert_eq!(
            serde_json::to_string(&issue).unwrap(),
            r#"{"label":"q","cells":[["a","b"],["c"]]}"#
        );
    }

    #[test]
    fn cell_of_outside_domain() {
        let issue = partition_by_attribute(&shapes6(), "color").unwrap();
        assert!(matches!(cell_of(&issue, "o9"), Err(Error::ImageNotInIssue(_))));
        let singletons = Issue::new("s", vec![ids(&["a"]), ids(&["b"])]).unwrap();
        assert_eq!(cell_of(&singletons, "b").unwrap(), ids(&["b"]).as_slice());
    }

    #[test]
    fn context_examples() {
        let issue = partition_by_attribute(&shapes6(), "color").unwrap();
        let ctx = sample_context(&issue, "o1", 6, 7).unwrap();
        assert_eq!(ctx.same_cell, ids(&["o1", "o2"]));
        assert_eq!(ctx.distractors, ids(&["o3", "o4", "o5", "o6"]));

        let a = sample_context(&issue, "o1", 2, 42).unwrap();
        assert_eq!(a.same_cell, ids(&["o1"]));
        assert_eq!(a.distractors.len(), 1);
        assert!(!["o1", "o2"].contains(&a.distractors[0].as_str()));
        for _ in 0..5 {
            assert_eq!(sample_context(&issue, "o1", 2, 42).unwrap(), a);
        }

        let one = Issue::new("all", vec![ids(&["o1", "o2", "o3"])]).unwrap();
        let ctx = sample_context(&one, "o2", 40, 0).unwrap();
        assert!(ctx.distractors.is_empty());
        assert_eq!(ctx.same_cell, ids(&["o2", "o1", "o3"]));

        assert!(matches!(
            sample_context(&issue, "zz", 4, 0),
            Err(Error::ImageNotInIssue(_))
        ));
        assert!(sample_context(&issue, "o1", 1, 0).is_err());
    }

    #[test]
    fn context_is_frozen_for_a_seed() {
        // Frozen draw: regressions here would change every downstream caption.
        let cells: Vec<Vec<String>> = (0..4).map(|c| (0..10).map(|i| format!("c{c}i{i}")).collect()).collect();
        let issue = Issue::new("big", cells).unwrap();
        let ctx = sample_context(&issue, "c0i0", 7, 2024).unwrap();
        assert_eq!(ctx.same_cell.len(), 4);
        assert_eq!(ctx.distractors.len(), 3);
        let again = sample_context(&issue, "c0i0", 7, 2024).unwrap();
        assert_eq!(
            serde_json::to_string(&ctx).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    proptest! {
        #[test]
        fn context_respects_budget_and_cells(
            sizes in prop::collection::vec(1usize..8, 1..5),
            budget in 2usize..30,
            seed in any::<u64>(),
            pick in any::<prop::sample::Index>(),
        ) {
            let cells: Vec<Vec<String>> = sizes
                .iter()
                .enumerate()
                .map(|(c, &n)| (0..n).map(|i| format!("c{c}i{i}")).collect())
                .collect();
            let issue = Issue::new("p", cells.clone()).unwrap();
            let domain: Vec<&str> = issue.domain().collect();
            let target = domain[pick.index(domain.len())].to_string();
            let ctx = sample_context(&issue, &target, budget, seed).unwrap();
            prop_assert!(ctx.len() <= budget);
            prop_assert_eq!(&ctx.same_cell[0], &target);
            let cell = cell_of(&issue, &target).unwrap();
            for id in &ctx.same_cell {
                prop_assert!(cell.contains(id));
            }
            for id in &ctx.distractors {
                prop_assert!(!cell.contains(id));
            }
            let all = ctx.images();
            let uniq: BTreeSet<&String> = all.iter().collect();
            prop_assert_eq!(uniq.len(), all.len());
            // budget is used fully whenever the domain allows it
            prop_assert_eq!(ctx.len(), budget.min(issue.domain_len()));
        }
    }
}
