//! Deterministic synthetic classification tasks with controllable
//! relatedness, plus splits, batching and line-delimited JSON export.
//!
//! Every task labels token sequences through a small set of *marker* tokens:
//!
//! - `keyword`: the label is which class's marker subset appears.
//! - `parity`: the label is the parity of the count of the task's marker.
//! - `order`: the label is whether marker `a` precedes marker `b`.
//! - `clone`: resampled from a linked task's distribution (same markers and
//!   label rule, fresh draws, possibly different size).
//!
//! Marker sets are allocated from the shared vocabulary after the reserved
//! tokens. An overlap link with coefficient `w` shares `ceil(w * markers)`
//! of each class's markers with the linked task, class-aligned, so overlap
//! 1.0 makes two tasks label-equivalent and overlap 0.0 makes their marker
//! sets disjoint. Filler tokens are drawn from the vocabulary minus every
//! task's markers, so zero-overlap tasks carry no information about each
//! other. The whole suite is a pure function of (config, seed).

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::{TokenBatch, CLS_TOKEN, NUM_RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Keyword,
    Parity,
    Order,
    Clone,
}

/// Named relatedness link: share `coefficient` of each class's markers with
/// the named task (which must appear earlier in the suite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelatednessLink {
    pub task: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// markers allocated per class (keyword) or in total (parity: 1, order: 2)
    #[serde(default = "default_markers")]
    pub markers_per_class: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub links: Vec<RelatednessLink>,
    #[serde(default)]
    pub min_len: Option<usize>,
    #[serde(default)]
    pub max_len: Option<usize>,
}

fn default_classes() -> usize {
    4
}

fn default_markers() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Generated task: class-aligned marker sets plus disjoint, label-stratified
/// splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    /// marker tokens per class (keyword) or the task's marker pool
    pub markers: Vec<Vec<u32>>,
    pub train: Vec<TaskInstance>,
    pub dev: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl TaskDataset {
    pub fn split(&self, which: Split) -> &[TaskInstance] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_markers(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.markers.iter().flatten().copied().collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub tasks: Vec<TaskSpec>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// pretraining corpus sequences generated alongside the tasks
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
}

fn default_corpus_size() -> usize {
    2000
}

impl SuiteConfig {
    /// Six tasks in three size tiers (two large, two medium, two small),
    /// mirroring a 10x-scaled-down spread of real benchmark sizes.
    pub fn default_suite(vocab_size: usize, max_seq_len: usize) -> SuiteConfig {
        let spec = |name: &str, kind: TaskKind, train: usize| TaskSpec {
            name: name.to_string(),
            kind,
            num_classes: if kind == TaskKind::Keyword { 4 } else { 2 },
            markers_per_class: 2,
            train_size: train,
            dev_size: (train / 5).clamp(50, 200),
            test_size: (train / 5).clamp(50, 200),
            links: Vec::new(),
            min_len: None,
            max_len: None,
        };
        SuiteConfig {
            tasks: vec![
                spec("large-a", TaskKind::Keyword, 4000),
                spec("large-b", TaskKind::Keyword, 4000),
                spec("medium-a", TaskKind::Parity, 1000),
                spec("medium-b", TaskKind::Order, 1000),
                spec("small-a", TaskKind::Keyword, 200),
                spec("small-b", TaskKind::Keyword, 200),
            ],
            vocab_size,
            max_seq_len,
            corpus_size: 2000,
        }
    }
}

/// A generated suite: the task datasets plus a pretraining corpus drawn over
/// the same vocabulary with a deterministic bigram structure.
#[derive(Debug, Clone)]
pub struct Suite {
    pub tasks: Vec<TaskDataset>,
    pub corpus: Vec<Vec<u32>>,
}

impl Suite {
    pub fn task(&self, name: &str) -> Result<&TaskDataset> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Usage(format!("unknown task: {name}")))
    }
}

struct MarkerAllocator {
    next: u32,
    vocab_size: u32,
    taken: HashSet<u32>,
}

impl MarkerAllocator {
    fn take(&mut self, n: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.next >= self.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary of {} cannot hold all task markers",
                    self.vocab_size
                )));
            }
            if !self.taken.contains(&self.next) {
                self.taken.insert(self.next);
                out.push(self.next);
            }
            self.next += 1;
        }
        Ok(out)
    }
}

/// Generate all tasks and the pretraining corpus. Deterministic per
/// (config, seed); the same pair is byte-identical every time.
pub fn generate_suite(config: &SuiteConfig, seed: u64) -> Result<Suite> {
    if config.vocab_size <= NUM_RESERVED_TOKENS as usize {
        return Err(Error::Config("vocabulary too small for reserved tokens".into()));
    }
    if config.max_seq_len < 4 {
        return Err(Error::Config("max_seq_len must be at least 4".into()));
    }
    let root = SplitRng::new(seed).substream("tasks");

    // clones inherit everything from their source but name, sizes and draws
    let mut effective: Vec<TaskSpec> = Vec::with_capacity(config.tasks.len());
    for spec in &config.tasks {
        if spec.kind == TaskKind::Clone {
            if spec.links.len() != 1 || spec.links[0].coefficient != 1.0 {
                return Err(Error::Config(format!(
                    "clone task {} must carry exactly one link with coefficient 1.0",
                    spec.name
                )));
            }
            let source = effective
                .iter()
                .find(|s| s.name == spec.links[0].task)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "clone task {} links to {} which is not defined earlier",
                        spec.name, spec.links[0].task
                    ))
                })?;
            if source.kind == TaskKind::Clone {
                return Err(Error::Config(format!(
                    "clone task {} cannot link to another clone",
                    spec.name
                )));
            }
            effective.push(TaskSpec {
                name: spec.name.clone(),
                kind: source.kind,
                num_classes: source.num_classes,
                markers_per_class: source.markers_per_class,
                train_size: spec.train_size,
                dev_size: spec.dev_size,
                test_size: spec.test_size,
                links: spec.links.clone(),
                min_len: source.min_len,
                max_len: source.max_len,
            });
        } else {
            effective.push(spec.clone());
        }
    }

    // allocate class-aligned markers first so fillers exclude all of them
    let mut alloc = MarkerAllocator {
        next: NUM_RESERVED_TOKENS,
        vocab_size: config.vocab_size as u32,
        taken: HashSet::new(),
    };
    let mut marker_sets: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    for spec in &effective {
        validate_spec(spec)?;
        if marker_sets.contains_key(&spec.name) {
            return Err(Error::Config(format!("duplicate task name {}", spec.name)));
        }
        let groups = marker_groups_for(spec)?;
        let mut markers: Vec<Vec<u32>> = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut group = Vec::new();
            // class-aligned sharing from each linked task, strongest link first
            let mut links = spec.links.clone();
            links.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient));
            for link in &links {
                let source = marker_sets.get(&link.task).ok_or_else(|| {
                    Error::Config(format!(
                        "task {} links to {} which is not defined earlier",
                        spec.name, link.task
                    ))
                })?;
                let src_group = source.get(g).ok_or_else(|| {
                    Error::Config(format!(
                        "task {} link to {} has no class group {g}",
                        spec.name, link.task
                    ))
                })?;
                let shared = ((link.coefficient * spec.markers_per_class as f64).ceil() as usize)
                    .min(src_group.len());
                for &m in src_group.iter().take(shared) {
                    if !group.contains(&m) {
                        group.push(m);
                    }
                }
            }
            group.truncate(spec.markers_per_class);
            let fresh = alloc.take(spec.markers_per_class - group.len())?;
            group.extend(fresh);
            markers.push(group);
        }
        marker_sets.insert(spec.name.clone(), markers);
    }

    // fillers: everything after the reserved tokens that is not any task's marker
    let fillers: Vec<u32> = (NUM_RESERVED_TOKENS..config.vocab_size as u32)
        .filter(|t| !alloc.taken.contains(t))
        .collect();
    if fillers.len() < 4 {
        return Err(Error::Config(format!(
            "only {} filler tokens remain after marker allocation",
            fillers.len()
        )));
    }

    let mut tasks = Vec::with_capacity(effective.len());
    for spec in &effective {
        let markers = marker_sets[&spec.name].clone();
        let mut rng = root.substream(&format!("task.{}", spec.name));
        let dataset = generate_task(spec, config, markers, &fillers, &mut rng)?;
        tasks.push(dataset);
    }

    let corpus = generate_corpus(config, &root.substream("corpus"))?;
    Ok(Suite { tasks, corpus })
}

fn validate_spec(spec: &TaskSpec) -> Result<()> {
    if spec.name.is_empty() {
        return Err(Error::Config("task name is empty".into()));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config(format!("task {} needs at least 2 classes", spec.name)));
    }
    if spec.markers_per_class == 0 {
        return Err(Error::Config(format!("task {} needs at least 1 marker per class", spec.name)));
    }
    if spec.train_size == 0 || spec.dev_size == 0 || spec.test_size == 0 {
        return Err(Error::Data(format!("task {} has an empty split", spec.name)));
    }
    for link in &spec.links {
        if !(0.0..=1.0).contains(&link.coefficient) {
            return Err(Error::Config(format!(
                "task {} link coefficient {} outside [0,1]",
                spec.name, link.coefficient
            )));
        }
    }
    match spec.kind {
        TaskKind::Parity | TaskKind::Order => {
            if spec.num_classes != 2 {
                return Err(Error::Config(format!(
                    "task {}: {:?} tasks are binary",
                    spec.name, spec.kind
                )));
            }
            if spec.kind == TaskKind::Order && spec.markers_per_class < 2 {
                return Err(Error::Config(format!(
                    "order task {} needs two marker tokens",
                    spec.name
                )));
            }
        }
        // clones are resolved to their source's kind before validation
        TaskKind::Clone | TaskKind::Keyword => {}
    }
    Ok(())
}

/// Number of marker groups a task allocates.
fn marker_groups_for(spec: &TaskSpec) -> Result<usize> {
    Ok(match spec.kind {
        TaskKind::Keyword | TaskKind::Clone => spec.num_classes,
        TaskKind::Parity => 1,
        TaskKind::Order => 1,
    })
}

fn generate_task(
    spec: &TaskSpec,
    config: &SuiteConfig,
    markers: Vec<Vec<u32>>,
    fillers: &[u32],
    rng: &mut SplitRng,
) -> Result<TaskDataset> {
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let min_len = spec.min_len.unwrap_or(6).max(4);
    let max_len = spec.max_len.unwrap_or(config.max_seq_len.min(16)).min(config.max_seq_len);
    if min_len > max_len {
        return Err(Error::Config(format!("task {}: min_len > max_len", spec.name)));
    }

    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut by_class: Vec<Vec<TaskInstance>> = vec![Vec::new(); spec.num_classes];
    let per_class = total.div_ceil(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut attempts = 0;
        while by_class[class].len() < per_class {
            attempts += 1;
            if attempts > per_class * 200 {
                return Err(Error::Data(format!(
                    "task {}: cannot draw enough distinct sequences for class {class}",
                    spec.name
                )));
            }
            let tokens = sample_sequence(spec, &markers, fillers, class, min_len, max_len, rng)?;
            if seen.insert(tokens.clone()) {
                by_class[class].push(TaskInstance { tokens, label: class });
            }
        }
    }

    // stratified split: proportional share of each class per split
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for class_pool in by_class.iter_mut() {
        rng.shuffle(class_pool);
        let n_train = spec.train_size.div_ceil(spec.num_classes).min(class_pool.len());
        let n_dev = spec.dev_size.div_ceil(spec.num_classes);
        for (i, inst) in class_pool.drain(..).enumerate() {
            if i < n_train {
                train.push(inst);
            } else if i < n_train + n_dev {
                dev.push(inst);
            } else {
                test.push(inst);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut dev);
    rng.shuffle(&mut test);
    train.truncate(spec.train_size);
    dev.truncate(spec.dev_size);
    test.truncate(spec.test_size);

    Ok(TaskDataset {
        name: spec.name.clone(),
        kind: spec.kind,
        num_classes: spec.num_classes,
        markers,
        train,
        dev,
        test,
    })
}

fn sample_sequence(
    spec: &TaskSpec,
    markers: &[Vec<u32>],
    fillers: &[u32],
    class: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut SplitRng,
) -> Result<Vec<u32>> {
    let len = min_len + rng.below(max_len - min_len + 1);
    let mut tokens = vec![CLS_TOKEN];
    for _ in 1..len {
        tokens.push(fillers[rng.below(fillers.len())]);
    }
    let content = 1..len; // positions after the class marker token
    match spec.kind {
        TaskKind::Keyword | TaskKind::Clone => {
            // plant 1..=3 markers of the labeled class
            let group = &markers[class];
            let count = 1 + rng.below(3.min(content.len()));
            let mut positions: Vec<usize> = content.collect();
            rng.shuffle(&mut positions);
            for &p in positions.iter().take(count) {
                tokens[p] = group[rng.below(group.len())];
            }
        }
        TaskKind::Parity => {
            // even count of the marker token => class 0, odd => class 1
            let marker = markers[0][0];
            let max_count = content.len().min(5);
            let mut candidates: Vec<usize> =
                (0..=max_count).filter(|c| c % 2 == class).collect();
            if class == 1 {
                candidates.retain(|c| *c >= 1);
            }
            if candidates.is_empty() {
                return Err(Error::Data("sequence too short for parity task".into()));
            }
            let count = candidates[rng.below(candidates.len())];
            let mut positions: Vec<usize> = content.collect();
            rng.shuffle(&mut positions);
            // fillers exclude every task's markers, so these are the only
            // marker occurrences in the sequence
            for &p in positions.iter().take(count) {
                tokens[p] = marker;
            }
        }
        TaskKind::Order => {
            // class 0: a before b; class 1: b before a
            let group = &markers[0];
            let (a, b) = (group[0], group[1]);
            if content.len() < 2 {
                return Err(Error::Data("sequence too short for order task".into()));
            }
            let mut positions: Vec<usize> = content.collect();
            rng.shuffle(&mut positions);
            let (mut p1, mut p2) = (positions[0], positions[1]);
            if p1 > p2 {
                std::mem::swap(&mut p1, &mut p2);
            }
            let (first, second) = if class == 0 { (a, b) } else { (b, a) };
            tokens[p1] = first;
            tokens[p2] = second;
        }
    }
    Ok(tokens)
}

/// Corpus sequences follow a deterministic bigram chain over the whole
/// content vocabulary (markers included, as a real corpus would contain the
/// words tasks are made of): each token has a preferred successor (a fixed
/// permutation) taken with probability 0.9, otherwise a uniform draw.
/// Masked-token prediction beats any unigram baseline by exploiting the
/// chain.
fn generate_corpus(config: &SuiteConfig, rng: &SplitRng) -> Result<Vec<Vec<u32>>> {
    let mut rng = rng.clone();
    let content: Vec<u32> = (NUM_RESERVED_TOKENS..config.vocab_size as u32).collect();
    let mut successor: Vec<u32> = content.clone();
    rng.shuffle(&mut successor);
    let succ_of = |t: u32| -> u32 { successor[(t - NUM_RESERVED_TOKENS) as usize] };
    let len = config.max_seq_len.min(16);
    let mut corpus = Vec::with_capacity(config.corpus_size);
    for _ in 0..config.corpus_size {
        let mut seq = vec![CLS_TOKEN];
        let mut cur = content[rng.below(content.len())];
        seq.push(cur);
        for _ in 2..len {
            cur = if rng.next_f64() < 0.9 {
                succ_of(cur)
            } else {
                content[rng.below(content.len())]
            };
            seq.push(cur);
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

// ---- splits and batching -----------------------------------------------------

/// Re-split a flat instance list into disjoint, label-stratified splits.
pub fn split_instances(
    mut instances: Vec<TaskInstance>,
    fractions: (f64, f64, f64),
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>, Vec<TaskInstance>)> {
    let (ft, fd, fe) = fractions;
    if (ft + fd + fe - 1.0).abs() > 1e-9 || ft <= 0.0 || fd <= 0.0 || fe <= 0.0 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    if instances.len() < 3 * num_classes {
        return Err(Error::Data(format!(
            "{} instances cannot be stratified into 3 splits of {num_classes} classes",
            instances.len()
        )));
    }
    let mut rng = SplitRng::new(seed).substream("split");
    rng.shuffle(&mut instances);
    let mut by_class: Vec<Vec<TaskInstance>> = vec![Vec::new(); num_classes];
    for inst in instances {
        if inst.label >= num_classes {
            return Err(Error::Data(format!("label {} out of range", inst.label)));
        }
        by_class[inst.label].push(inst);
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for pool in by_class {
        let n = pool.len();
        let n_train = (ft * n as f64).round() as usize;
        let n_dev = (fd * n as f64).round() as usize;
        if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
            return Err(Error::Data(format!(
                "fractions {fractions:?} leave an empty split for a class of {n} instances"
            )));
        }
        for (i, inst) in pool.into_iter().enumerate() {
            if i < n_train {
                train.push(inst);
            } else if i < n_train + n_dev {
                dev.push(inst);
            } else {
                test.push(inst);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut dev);
    rng.shuffle(&mut test);
    Ok((train, dev, test))
}

/// One training batch: padded tokens plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
}

/// Epoch-seeded shuffled batches: the final partial batch is included, and
/// sequences are padded to the longest in their batch. The same (seed,
/// epoch) always yields the same order.
pub fn batches(
    instances: &[TaskInstance],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    if instances.is_empty() {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    SplitRng::new(seed).substream_indexed("batches", epoch).shuffle(&mut order);
    let mut out = Vec::with_capacity(instances.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| instances[i].tokens.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| instances[i].label).collect();
        out.push(Batch { tokens: TokenBatch::from_rows(&rows)?, labels });
    }
    Ok(out)
}

// ---- line-delimited JSON export ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonlInstance {
    tokens: Vec<u32>,
    label: usize,
}

pub fn export_jsonl(instances: &[TaskInstance], path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(&JsonlInstance {
            tokens: inst.tokens.clone(),
            label: inst.label,
        })?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn import_jsonl(path: &std::path::Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(TaskInstance { tokens: parsed.tokens, label: parsed.label });
    }
    Ok(out)
}
