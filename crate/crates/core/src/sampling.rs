//! Group-sensitive batch construction.
//!
//! A batch holds `P` classes, `Gs` groups from each, and `K` samples from
//! each group. Classes, groups and group members are drawn from shuffled
//! decks that are dealt without replacement and reshuffled when exhausted,
//! so one epoch touches nearly every sample while each individual draw is
//! uniform. Decks restart from an epoch-derived seed, which makes a batch a
//! pure function of `(groups, spec, seed, epoch, index)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::DatasetManifest;
use crate::error::{Error, Result};
use crate::grouping::GroupModel;
use crate::losses::{Anchor, TripletContext};
use crate::numerics::{FeatureMatrix, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    /// `P`, classes per batch.
    pub classes_per_batch: usize,
    /// `Gs`, groups drawn from each class.
    pub groups_per_class: usize,
    /// `K`, samples drawn from each group.
    pub samples_per_group: usize,
    /// Cap on negatives taken from each other class; `None` uses all.
    pub negative_pool: Option<usize>,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            classes_per_batch: 4,
            groups_per_class: 2,
            samples_per_group: 4,
            negative_pool: None,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 {
            return Err(Error::invalid("classes_per_batch must be at least 2"));
        }
        if self.groups_per_class < 1 || self.samples_per_group < 1 {
            return Err(Error::invalid(
                "groups_per_class and samples_per_group must be at least 1",
            ));
        }
        if self.negative_pool == Some(0) {
            return Err(Error::invalid("negative_pool must be at least 1"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.groups_per_class * self.samples_per_group
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub row: usize,
    pub class: usize,
    pub group: usize,
}

/// Anchor construction for the triplet terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// Class and group anchors are means of the batch positives.
    Mean,
    /// Anchors are members drawn uniformly from the batch positives.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: u64,
    pub index: usize,
    /// Draws in class-major order. Rows repeat only inside deficient groups.
    pub entries: Vec<BatchEntry>,
    /// `(class, group)` pairs that had fewer than `K` members.
    pub deficient: Vec<(usize, usize)>,
    /// Sampled anchor row per class.
    pub class_anchors: BTreeMap<usize, usize>,
    /// Sampled anchor row per `(class, group)`.
    pub group_anchors: BTreeMap<(usize, usize), usize>,
    pub negative_pool: Option<usize>,
}

impl Batch {
    /// Distinct rows, ascending. Row `k` of a batch embedding refers to
    /// `samples()[k]`.
    pub fn samples(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.entries.iter().map(|e| e.row).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Distinct entries aligned with [`Batch::samples`].
    pub fn distinct_entries(&self) -> Vec<BatchEntry> {
        let mut e = self.entries.clone();
        e.sort_by_key(|x| x.row);
        e.dedup_by_key(|x| x.row);
        e
    }

    /// Class of each row of [`Batch::samples`].
    pub fn labels(&self) -> Vec<usize> {
        self.distinct_entries().iter().map(|e| e.class).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.entries.iter().map(|e| e.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn is_deficient(&self) -> bool {
        !self.deficient.is_empty()
    }
}

/// Cyclic shuffled deck.
#[derive(Debug, Clone)]
struct Deck {
    items: Vec<usize>,
    pos: usize,
}

impl Deck {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut d = Self { items, pos: 0 };
        d.items.shuffle(rng);
        d
    }

    /// `n` distinct items (`n ≤ len`). Items skipped to keep the draw
    /// distinct after a reshuffle stay in the deck.
    fn deal(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        debug_assert!(n <= self.items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                self.items.shuffle(rng);
                self.pos = 0;
            }
            let j = (self.pos..self.items.len()).find(|&j| !out.contains(&self.items[j]));
            match j {
                Some(j) => {
                    self.items.swap(self.pos, j);
                    out.push(self.items[self.pos]);
                    self.pos += 1;
                }
                None => self.pos = self.items.len(),
            }
        }
        out
    }
}

struct EpochState {
    rng: ChaCha8Rng,
    anchor_rng: ChaCha8Rng,
    classes: Deck,
    groups: Vec<Deck>,
    members: BTreeMap<(usize, usize), Deck>,
}

type GroupMembers = (usize, Vec<usize>);

/// Replayable batch source over a grouped dataset.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: BatchSpec,
    seed: RngSeed,
    n_samples: usize,
    /// Nonempty groups of each class that has samples.
    class_groups: Vec<(usize, Vec<GroupMembers>)>,
}

impl Sampler {
    pub fn new(manifest: &DatasetManifest, groups: &GroupModel, spec: BatchSpec, seed: RngSeed) -> Result<Self> {
        spec.validate()?;
        if manifest.len() != groups.n_samples() {
            return Err(Error::DimensionMismatch {
                expected: manifest.len(),
                found: groups.n_samples(),
            });
        }
        let mut class_groups = Vec::new();
        for c in 0..groups.n_classes() {
            let cg = groups.class_groups(c)?;
            let nonempty: Vec<(usize, Vec<usize>)> = cg.nonempty_groups().map(|g| (g, cg.members[g].clone())).collect();
            if !nonempty.is_empty() {
                class_groups.push((c, nonempty));
            }
        }
        if class_groups.len() < spec.classes_per_batch {
            return Err(Error::invalid(format!(
                "batch needs {} classes but the dataset has {}",
                spec.classes_per_batch,
                class_groups.len()
            )));
        }
        Ok(Self {
            spec,
            seed,
            n_samples: manifest.len(),
            class_groups,
        })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    /// `⌈n / (P·Gs·K)⌉`.
    pub fn batches_per_epoch(&self) -> usize {
        self.n_samples.div_ceil(self.spec.batch_size())
    }

    fn start(&self, epoch: u64) -> EpochState {
        let s = self.seed.derive(epoch);
        let mut rng = s.derive(0).rng();
        let classes = Deck::new((0..self.class_groups.len()).collect(), &mut rng);
        let groups = self
            .class_groups
            .iter()
            .map(|(_, gs)| Deck::new((0..gs.len()).collect(), &mut rng))
            .collect();
        EpochState {
            rng,
            anchor_rng: s.derive(1).rng(),
            classes,
            groups,
            members: BTreeMap::new(),
        }
    }

    fn next_batch(&self, st: &mut EpochState, epoch: u64, index: usize) -> Batch {
        let spec = &self.spec;
        let mut batch = Batch {
            epoch,
            index,
            entries: Vec::with_capacity(spec.batch_size()),
            deficient: Vec::new(),
            class_anchors: BTreeMap::new(),
            group_anchors: BTreeMap::new(),
            negative_pool: spec.negative_pool,
        };
        let mut chosen = st.classes.deal(spec.classes_per_batch, &mut st.rng);
        chosen.sort_unstable();
        for ci in chosen {
            let (class, groups) = &self.class_groups[ci];
            let take = spec.groups_per_class.min(groups.len());
            let mut gis = st.groups[ci].deal(take, &mut st.rng);
            gis.sort_unstable();
            let mut class_rows = Vec::new();
            for gi in gis {
                let (group, members) = &groups[gi];
                let k = spec.samples_per_group;
                let mut rows = if members.len() >= k {
                    let deck = st
                        .members
                        .entry((ci, gi))
                        .or_insert_with(|| Deck::new((0..members.len()).collect(), &mut st.rng));
                    deck.deal(k, &mut st.rng)
                        .into_iter()
                        .map(|m| members[m])
                        .collect::<Vec<_>>()
                } else {
                    batch.deficient.push((*class, *group));
                    let mut r = members.clone();
                    while r.len() < k {
                        r.push(members[st.rng.random_range(0..members.len())]);
                    }
                    r
                };
                rows.sort_unstable();
                let mut distinct = rows.clone();
                distinct.dedup();
                let a = distinct[st.anchor_rng.random_range(0..distinct.len())];
                batch.group_anchors.insert((*class, *group), a);
                class_rows.extend_from_slice(&distinct);
                batch.entries.extend(rows.into_iter().map(|row| BatchEntry {
                    row,
                    class: *class,
                    group: *group,
                }));
            }
            class_rows.sort_unstable();
            let a = class_rows[st.anchor_rng.random_range(0..class_rows.len())];
            batch.class_anchors.insert(*class, a);
        }
        if batch.is_deficient() {
            log::debug!(
                "epoch {epoch} batch {index}: deficient groups {:?} sampled with replacement",
                batch.deficient
            );
        }
        batch
    }

    /// Every batch of `epoch`, in order.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut st = self.start(epoch);
        (0..self.batches_per_epoch())
            .map(|i| self.next_batch(&mut st, epoch, i))
            .collect()
    }

    /// Batch `index` of `epoch`; identical to `epoch(epoch)[index]`.
    pub fn sample_batch(&self, epoch: u64, index: usize) -> Result<Batch> {
        if index >= self.batches_per_epoch() {
            return Err(Error::invalid(format!(
                "batch index {index} out of range for {} batches per epoch",
                self.batches_per_epoch()
            )));
        }
        let mut st = self.start(epoch);
        for i in 0..index {
            self.next_batch(&mut st, epoch, i);
        }
        Ok(self.next_batch(&mut st, epoch, index))
    }
}

/// One triplet context per class in the batch. `embedded` row `k` holds the
/// embedding of `batch.samples()[k]`, and context sample indices refer to
/// those rows.
pub fn build_contexts(batch: &Batch, embedded: &FeatureMatrix, mode: AnchorMode) -> Result<Vec<TripletContext>> {
    let entries = batch.distinct_entries();
    if embedded.n_samples() != entries.len() {
        return Err(Error::DimensionMismatch {
            expected: entries.len(),
            found: embedded.n_samples(),
        });
    }
    let classes = batch.classes();
    let mut out = Vec::with_capacity(classes.len());
    for &class in &classes {
        let positives: Vec<(usize, usize)> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class == class)
            .map(|(k, e)| (k, e.group))
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut negatives = Vec::new();
        for &other in classes.iter().filter(|&&c| c != class) {
            let rows = entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.class == other)
                .map(|(k, _)| k);
            match batch.negative_pool {
                Some(m) => negatives.extend(rows.take(m)),
                None => negatives.extend(rows),
            }
        }
        let mut ctx = TripletContext::from_rows(class, embedded, &positives, &negatives)?;
        if mode == AnchorMode::Sampled {
            let pos_of = |row: usize| entries.iter().position(|e| e.row == row);
            if let Some(k) = batch.class_anchors.get(&class).and_then(|&r| pos_of(r)) {
                ctx = ctx.with_class_anchor(Anchor::Member(k))?;
            }
            for (&(c, g), &r) in &batch.group_anchors {
                if c == class {
                    if let Some(k) = pos_of(r) {
                        ctx = ctx.with_group_anchor(g, Anchor::Member(k))?;
                    }
                }
            }
        }
        out.push(ctx);
    }
    Ok(out)
}
