//! Episode data model, the synthetic embedding world that stands in for a
//! frozen feature extractor, and the on-disk embedding table format.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec::stream_rng;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"IFSL";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub feature: DVector<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(feature: DVector<f64>, label: usize) -> Self {
        Self { feature, label }
    }
}

/// How the base-class query mini-batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseBatch {
    /// Uniform over all base examples.
    #[default]
    Uniform,
    /// Exactly `queries` examples from every base class.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Support examples per novel class (N).
    pub shots: usize,
    /// Novel classes per episode (K').
    pub ways: usize,
    /// Query examples per class (M).
    pub queries: usize,
    /// Number of base classes (K).
    pub base_classes: usize,
    /// Feature dimension (D).
    pub dim: usize,
    #[serde(default)]
    pub base_batch: BaseBatch,
    /// Overrides the default base query size of `queries * base_classes`.
    #[serde(default)]
    pub base_query_count: Option<usize>,
}

impl EpisodeConfig {
    pub fn new(shots: usize, ways: usize, queries: usize, base_classes: usize, dim: usize) -> Self {
        Self {
            shots,
            ways,
            queries,
            base_classes,
            dim,
            base_batch: BaseBatch::Uniform,
            base_query_count: None,
        }
    }

    pub fn base_query_size(&self) -> usize {
        match self.base_batch {
            BaseBatch::Balanced => self.queries * self.base_classes,
            BaseBatch::Uniform => self
                .base_query_count
                .unwrap_or(self.queries * self.base_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("shots", self.shots),
            ("ways", self.ways),
            ("queries", self.queries),
            ("base_classes", self.base_classes),
            ("dim", self.dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.base_query_count == Some(0) {
            return Err(Error::Config("base_query_count must be positive".into()));
        }
        Ok(())
    }
}

/// One incremental few-shot task. Base labels are `0..K`, novel labels
/// `K..K+K'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<LabeledExample>,
    pub query_novel: Vec<LabeledExample>,
    pub query_base: Vec<LabeledExample>,
    /// Source-side identities of the sampled novel classes.
    pub novel_class_ids: Vec<u32>,
    pub base_classes: usize,
    pub ways: usize,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |e| e.feature.len())
    }

    /// The joint query set: base mini-batch followed by the novel queries.
    pub fn joint_query(&self) -> Vec<LabeledExample> {
        self.query_base
            .iter()
            .chain(self.query_novel.iter())
            .cloned()
            .collect()
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.ways
    }

    /// Per-novel-class mean of the support features, one column per class.
    pub fn support_means(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut sums = DMatrix::zeros(d, self.ways);
        let mut counts = vec![0usize; self.ways];
        for ex in &self.support {
            let j = ex
                .label
                .checked_sub(self.base_classes)
                .filter(|j| *j < self.ways)
                .ok_or_else(|| Error::Config(format!("support label {} is not novel", ex.label)))?;
            let mut col = sums.column_mut(j);
            col += &ex.feature;
            counts[j] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::InsufficientData(format!(
                    "novel class {j} has no support examples"
                )));
            }
            sums.column_mut(j).scale_mut(1.0 / c as f64);
        }
        Ok(sums)
    }

    /// Checks the structural invariants of an episode.
    pub fn check_invariants(&self, shots: usize) -> Result<()> {
        let k = self.base_classes;
        let mut counts = vec![0usize; self.ways];
        for ex in &self.support {
            if ex.label < k || ex.label >= k + self.ways {
                return Err(Error::Config(format!("support label {} not novel", ex.label)));
            }
            counts[ex.label - k] += 1;
        }
        if counts.iter().any(|&c| c != shots) {
            return Err(Error::Config("unequal support counts".into()));
        }
        if self.query_novel.iter().any(|e| e.label < k || e.label >= k + self.ways) {
            return Err(Error::Config("novel query label out of range".into()));
        }
        if self.query_base.iter().any(|e| e.label >= k) {
            return Err(Error::Config("base query label out of range".into()));
        }
        Ok(())
    }
}

/// Anything episodes can be drawn from.
pub trait EpisodeSource: Sync {
    fn dim(&self) -> usize;
    fn base_class_count(&self) -> usize;
    fn novel_pool_count(&self) -> usize;
    /// Bookkeeping identity of novel pool class `j`.
    fn novel_class_id(&self, j: usize) -> u32;
    /// `count` distinct draws from novel pool class `j`.
    fn novel_samples(&self, j: usize, count: usize, rng: &mut ChaCha8Rng)
        -> Result<Vec<DVector<f64>>>;
    /// `count` draws from base class `k`.
    fn base_samples(&self, k: usize, count: usize, rng: &mut ChaCha8Rng)
        -> Result<Vec<DVector<f64>>>;
    /// `count` draws uniform over all base examples.
    fn base_uniform(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledExample>>;
}

/// Draws one episode. Pure in `(source, cfg, seed)`.
pub fn sample_episode<S: EpisodeSource + ?Sized>(
    source: &S,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    cfg.validate()?;
    if cfg.dim != source.dim() {
        return Err(Error::Dimension {
            context: "episode config dim",
            expected: source.dim(),
            actual: cfg.dim,
        });
    }
    if cfg.base_classes != source.base_class_count() {
        return Err(Error::Config(format!(
            "config has {} base classes, source has {}",
            cfg.base_classes,
            source.base_class_count()
        )));
    }
    if cfg.ways > source.novel_pool_count() {
        return Err(Error::InsufficientData(format!(
            "{} novel ways requested, pool has {}",
            cfg.ways,
            source.novel_pool_count()
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let k = cfg.base_classes;
    let picked = sample_indices(&mut rng, source.novel_pool_count(), cfg.ways).into_vec();

    let mut support = Vec::with_capacity(cfg.shots * cfg.ways);
    let mut query_novel = Vec::with_capacity(cfg.queries * cfg.ways);
    for (slot, &j) in picked.iter().enumerate() {
        let mut draws = source.novel_samples(j, cfg.shots + cfg.queries, &mut rng)?;
        let queries = draws.split_off(cfg.shots);
        support.extend(draws.into_iter().map(|f| LabeledExample::new(f, k + slot)));
        query_novel.extend(queries.into_iter().map(|f| LabeledExample::new(f, k + slot)));
    }

    let query_base = match cfg.base_batch {
        BaseBatch::Uniform => source.base_uniform(cfg.base_query_size(), &mut rng)?,
        BaseBatch::Balanced => {
            let mut out = Vec::with_capacity(cfg.queries * k);
            for c in 0..k {
                let draws = source.base_samples(c, cfg.queries, &mut rng)?;
                out.extend(draws.into_iter().map(|f| LabeledExample::new(f, c)));
            }
            out
        }
    };

    Ok(Episode {
        support,
        query_novel,
        query_base,
        novel_class_ids: picked.iter().map(|&j| source.novel_class_id(j)).collect(),
        base_classes: k,
        ways: cfg.ways,
    })
}

/// Isotropic Gaussian clusters: base classes occupy rows `0..K`, the novel
/// pool rows `K..K+pool`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub class_means: DMatrix<f64>,
    pub within_class_stddev: f64,
    pub base_class_count: usize,
    pub novel_pool_count: usize,
    pub seed: u64,
}

/// Draws class means with `E|mu_i - mu_j|^2 = separation^2`.
pub fn generate_synthetic_world(
    base_count: usize,
    novel_pool: usize,
    dim: usize,
    separation: f64,
    stddev: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    if base_count == 0 || novel_pool == 0 || dim == 0 {
        return Err(Error::Config(
            "class counts and dimension must be positive".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) || !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::Config("separation and stddev must be positive".into()));
    }
    let scale = separation / (2.0 * dim as f64).sqrt();
    let mut rng = stream_rng(seed, u64::MAX);
    let rows = base_count + novel_pool;
    // Row-major fill so the draw order does not depend on the storage layout.
    let values: Vec<f64> = (0..rows * dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(SyntheticWorld {
        class_means: DMatrix::from_row_slice(rows, dim, &values),
        within_class_stddev: stddev,
        base_class_count: base_count,
        novel_pool_count: novel_pool,
        seed,
    })
}

impl SyntheticWorld {
    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_means.nrows()
    }

    /// One draw from class `c` (global row index).
    pub fn draw(&self, c: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let sd = self.within_class_stddev;
        DVector::from_iterator(
            self.dim(),
            self.class_means
                .row(c)
                .iter()
                .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>(),
        )
    }

    /// Labeled draws from the base classes, `per_class` each, for pretraining.
    pub fn base_dataset(&self, per_class: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = stream_rng(seed, 1);
        (0..self.base_class_count)
            .flat_map(|c| (0..per_class).map(move |_| c))
            .map(|c| LabeledExample::new(self.draw(c, &mut rng), c))
            .collect()
    }

    /// Materializes the world into an embedding table.
    pub fn to_table(&self, counts: &SplitCounts, seed: u64) -> Result<EmbeddingTable> {
        let mut rng = stream_rng(seed, 2);
        let mut classes = Vec::new();
        let draw_rows = |c: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| self.draw(c, rng).iter().map(|&v| v as f32).collect())
                .collect()
        };
        for c in 0..self.base_class_count {
            for (split, n) in [
                (Split::BaseTrain, counts.base_train),
                (Split::BaseVal, counts.base_val),
                (Split::BaseTest, counts.base_test),
            ] {
                if n > 0 {
                    classes.push(ClassRows {
                        label: to_u32(c, "label")?,
                        split,
                        rows: draw_rows(c, n, &mut rng),
                    });
                }
            }
        }
        for j in 0..self.novel_pool_count {
            let c = self.base_class_count + j;
            classes.push(ClassRows {
                label: to_u32(c, "label")?,
                split: Split::Novel,
                rows: draw_rows(c, counts.novel, &mut rng),
            });
        }
        let table = EmbeddingTable {
            dim: self.dim(),
            classes,
        };
        table.validate()?;
        Ok(table)
    }
}

impl EpisodeSource for SyntheticWorld {
    fn dim(&self) -> usize {
        SyntheticWorld::dim(self)
    }

    fn base_class_count(&self) -> usize {
        self.base_class_count
    }

    fn novel_pool_count(&self) -> usize {
        self.novel_pool_count
    }

    fn novel_class_id(&self, j: usize) -> u32 {
        (self.base_class_count + j) as u32
    }

    fn novel_samples(
        &self,
        j: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<DVector<f64>>> {
        let c = self.base_class_count + j;
        Ok((0..count).map(|_| self.draw(c, rng)).collect())
    }

    fn base_samples(
        &self,
        k: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<DVector<f64>>> {
        Ok((0..count).map(|_| self.draw(k, rng)).collect())
    }

    fn base_uniform(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledExample>> {
        Ok((0..count)
            .map(|_| {
                let c = rng.random_range(0..self.base_class_count);
                LabeledExample::new(self.draw(c, rng), c)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    BaseTrain,
    BaseVal,
    BaseTest,
    Novel,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::BaseTrain => 0,
            Split::BaseVal => 1,
            Split::BaseTest => 2,
            Split::Novel => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Split::BaseTrain,
            1 => Split::BaseVal,
            2 => Split::BaseTest,
            3 => Split::Novel,
            t => return Err(Error::Format(format!("unknown split tag {t}"))),
        })
    }

    pub fn is_base(self) -> bool {
        self != Split::Novel
    }
}

/// Rows generated per class and split when materializing a world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub base_train: usize,
    pub base_val: usize,
    pub base_test: usize,
    pub novel: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            base_train: 100,
            base_val: 50,
            base_test: 50,
            novel: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRows {
    pub label: u32,
    pub split: Split,
    pub rows: Vec<Vec<f32>>,
}

/// Precomputed per-class feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub classes: Vec<ClassRows>,
}

impl EmbeddingTable {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::InsufficientData("table has no classes".into()));
        }
        for c in &self.classes {
            if c.rows.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "class {} ({:?}) has no rows",
                    c.label, c.split
                )));
            }
            for r in &c.rows {
                if r.len() != self.dim {
                    return Err(Error::Dimension {
                        context: "embedding row",
                        expected: self.dim,
                        actual: r.len(),
                    });
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("class {} rows", c.label)));
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.validate()?;
        let mut out = Writer::new(w);
        out.header(&EMBEDDING_MAGIC)?;
        out.u32(to_u32(self.dim, "dim")?)?;
        out.u32(to_u32(self.classes.len(), "class count")?)?;
        for c in &self.classes {
            out.u32(c.label)?;
            out.u8(c.split.tag())?;
            out.u32(to_u32(c.rows.len(), "row count")?)?;
            for r in &c.rows {
                out.f32s(r)?;
            }
        }
        out.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = Reader::new(r);
        input.header(&EMBEDDING_MAGIC)?;
        let dim = input.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        let n = input.u32("class count")? as usize;
        let mut classes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let label = input.u32("class label")?;
            let split = Split::from_tag(input.u8("split tag")?)?;
            let count = input.u32("row count")? as usize;
            let mut rows = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                rows.push(input.f32s(dim, "feature row")?);
            }
            classes.push(ClassRows { label, split, rows });
        }
        input.finish()?;
        let table = Self { dim, classes };
        table.validate()?;
        Ok(table)
    }

    /// Rows of the given split as labeled examples (labels as stored).
    pub fn examples(&self, split: Split) -> Vec<LabeledExample> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .flat_map(|c| c.rows.iter().map(move |r| (c.label, r)))
            .map(|(l, r)| LabeledExample::new(to_vector(r), l as usize))
            .collect()
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    table.write_to(BufWriter::new(file))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let file = File::open(path)?;
    EmbeddingTable::read_from(BufReader::new(file))
}

/// Loads a table and checks it against the expected feature dimension.
pub fn load_embeddings_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable> {
    let table = load_embeddings(path)?;
    if table.dim != dim {
        return Err(Error::Dimension {
            context: "embedding file",
            expected: dim,
            actual: table.dim,
        });
    }
    Ok(table)
}

fn to_vector(row: &[f32]) -> DVector<f64> {
    DVector::from_iterator(row.len(), row.iter().map(|&v| v as f64))
}

/// An episode source over a stored table.
///
/// Base classes are the distinct labels carrying a base split, re-indexed in
/// ascending label order; the novel pool is every class tagged novel.
#[derive(Debug, Clone)]
pub struct TableSource<'a> {
    table: &'a EmbeddingTable,
    base_rows: Vec<&'a ClassRows>,
    novel_rows: Vec<&'a ClassRows>,
}

impl<'a> TableSource<'a> {
    /// `base_split` selects which rows of each base class feed the base
    /// query mini-batch.
    pub fn new(table: &'a EmbeddingTable, base_split: Split) -> Result<Self> {
        if !base_split.is_base() {
            return Err(Error::Config("base query split must be a base split".into()));
        }
        let base_labels: BTreeSet<u32> = table
            .classes
            .iter()
            .filter(|c| c.split.is_base())
            .map(|c| c.label)
            .collect();
        let mut base_rows = Vec::with_capacity(base_labels.len());
        for label in &base_labels {
            let rows = table
                .classes
                .iter()
                .find(|c| c.label == *label && c.split == base_split)
                .ok_or_else(|| {
                    Error::InsufficientData(format!(
                        "base class {label} has no {base_split:?} rows"
                    ))
                })?;
            base_rows.push(rows);
        }
        let mut novel_rows: Vec<&ClassRows> = table
            .classes
            .iter()
            .filter(|c| c.split == Split::Novel)
            .collect();
        novel_rows.sort_by_key(|c| c.label);
        if base_rows.is_empty() || novel_rows.is_empty() {
            return Err(Error::InsufficientData(
                "table needs both base and novel classes".into(),
            ));
        }
        if novel_rows.iter().any(|c| base_labels.contains(&c.label)) {
            return Err(Error::Config("novel labels overlap base labels".into()));
        }
        Ok(Self {
            table,
            base_rows,
            novel_rows,
        })
    }

    /// Base label (as stored) to dense index.
    pub fn base_labels(&self) -> Vec<u32> {
        self.base_rows.iter().map(|c| c.label).collect()
    }

    /// Training examples with dense base labels, for pretraining.
    pub fn base_training_set(&self) -> Vec<LabeledExample> {
        self.base_examples(Split::BaseTrain)
    }

    /// All rows of a base split with dense base labels.
    pub fn base_examples(&self, split: Split) -> Vec<LabeledExample> {
        let labels = self.base_labels();
        self.table
            .classes
            .iter()
            .filter(|c| c.split == split && c.split.is_base())
            .flat_map(|c| {
                let k = labels.binary_search(&c.label).expect("base label indexed");
                c.rows.iter().map(move |r| LabeledExample::new(to_vector(r), k))
            })
            .collect()
    }
}

fn pick_rows(
    rows: &ClassRows,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    if rows.rows.len() < count {
        return Err(Error::InsufficientData(format!(
            "class {} has {} rows, {} needed",
            rows.label,
            rows.rows.len(),
            count
        )));
    }
    Ok(sample_indices(rng, rows.rows.len(), count)
        .into_iter()
        .map(|i| to_vector(&rows.rows[i]))
        .collect())
}

impl EpisodeSource for TableSource<'_> {
    fn dim(&self) -> usize {
        self.table.dim
    }

    fn base_class_count(&self) -> usize {
        self.base_rows.len()
    }

    fn novel_pool_count(&self) -> usize {
        self.novel_rows.len()
    }

    fn novel_class_id(&self, j: usize) -> u32 {
        self.novel_rows[j].label
    }

    fn novel_samples(
        &self,
        j: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<DVector<f64>>> {
        pick_rows(self.novel_rows[j], count, rng)
    }

    fn base_samples(
        &self,
        k: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<DVector<f64>>> {
        pick_rows(self.base_rows[k], count, rng)
    }

    fn base_uniform(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledExample>> {
        let total: usize = self.base_rows.iter().map(|c| c.rows.len()).sum();
        if total < count {
            return Err(Error::InsufficientData(format!(
                "{count} base queries requested, {total} rows available"
            )));
        }
        let mut picks = sample_indices(rng, total, count).into_vec();
        picks.sort_unstable();
        let mut out = Vec::with_capacity(count);
        let (mut class, mut offset) = (0usize, 0usize);
        for i in picks {
            while i >= offset + self.base_rows[class].rows.len() {
                offset += self.base_rows[class].rows.len();
                class += 1;
            }
            out.push(LabeledExample::new(
                to_vector(&self.base_rows[class].rows[i - offset]),
                class,
            ));
        }
        Ok(out)
    }
}
