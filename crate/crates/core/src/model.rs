//! The multi-task network: embedding tables feeding CTR, CVR and imputation
//! towers.
//!
//! Which towers exist and whether they share one embedding table is a
//! [`Layout`] choice, so the same type serves the shared multi-task
//! estimators and the single-task baselines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionRecord, Vocab, FIELD_COUNT};
use crate::diff::{read_checkpoint, write_checkpoint, Activation, EmbeddingLookup, Mlp, ParamId, ParameterStore};
use crate::diff::{Tape, Tensor, Var};
use crate::{seed, Error, Result};

pub const EMBEDDING_INIT: f64 = 0.01;
const PREDICT_CHUNK: usize = 4096;

/// Embedding width and hidden tower widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { embedding_dim: 18, hidden: vec![512, 256, 128, 32] }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("architecture.embedding_dim must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("architecture.hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ctr,
    Cvr,
    Imp,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ctr, Task::Cvr, Task::Imp];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ctr => "ctr",
            Task::Cvr => "cvr",
            Task::Imp => "imp",
        }
    }

    fn activation(self) -> Activation {
        match self {
            Task::Ctr | Task::Cvr => Activation::Sigmoid,
            Task::Imp => Activation::Softplus,
        }
    }
}

/// Which towers a net carries and how they are wired to embedding tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub tasks: Vec<Task>,
    /// One table for every tower, or one table per tower.
    pub shared_embedding: bool,
    /// CTR tower is a logistic regression on its own width-1 table.
    pub logistic_ctr: bool,
}

impl Layout {
    pub fn shared(tasks: &[Task]) -> Self {
        Layout { tasks: tasks.to_vec(), shared_embedding: true, logistic_ctr: false }
    }

    pub fn separate(tasks: &[Task]) -> Self {
        Layout { tasks: tasks.to_vec(), shared_embedding: false, logistic_ctr: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tower {
    table: usize,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct Table {
    id: ParamId,
    dim: usize,
}

/// Embedding tables plus one MLP tower per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskNet {
    arch: Architecture,
    vocab: Vocab,
    layout: Layout,
    store: ParameterStore,
    tables: Vec<Table>,
    towers: BTreeMap<Task, Tower>,
}

impl MultiTaskNet {
    pub fn new(arch: &Architecture, vocab: Vocab, layout: &Layout, seed: u64) -> Result<Self> {
        arch.validate()?;
        if layout.tasks.is_empty() {
            return Err(Error::Config("a net needs at least one task".into()));
        }
        if vocab.sizes().contains(&0) {
            return Err(Error::Config(format!("vocabulary has an empty field: {vocab:?}")));
        }
        let mut store = ParameterStore::new();
        let mut tables: Vec<Table> = Vec::new();
        let mut table_names: BTreeMap<String, usize> = BTreeMap::new();
        let mut towers = BTreeMap::new();
        for &task in &layout.tasks {
            if towers.contains_key(&task) {
                return Err(Error::Config(format!("task `{}` listed twice", task.name())));
            }
            let logistic = task == Task::Ctr && layout.logistic_ctr;
            let (table_name, dim) = if logistic {
                ("emb.ctr_lr".to_string(), 1)
            } else if layout.shared_embedding {
                ("emb.shared".to_string(), arch.embedding_dim)
            } else {
                (format!("emb.{}", task.name()), arch.embedding_dim)
            };
            let table = match table_names.get(&table_name) {
                Some(&i) => i,
                None => {
                    let mut rng = seed::rng(seed, &table_name);
                    let data =
                        (0..vocab.total() * dim).map(|_| rng.random_range(-EMBEDDING_INIT..=EMBEDDING_INIT)).collect();
                    let id = store.add(table_name.clone(), Tensor::matrix(vocab.total(), dim, data)?)?;
                    tables.push(Table { id, dim });
                    table_names.insert(table_name, tables.len() - 1);
                    tables.len() - 1
                }
            };
            let mut widths = vec![FIELD_COUNT * dim];
            if !logistic {
                widths.extend(&arch.hidden);
            }
            widths.push(1);
            let prefix = format!("tower.{}", task.name());
            let mut rng = seed::rng(seed, &prefix);
            let mlp = Mlp::init(&mut store, &prefix, &widths, task.activation(), &mut rng)?;
            towers.insert(task, Tower { table, mlp });
        }
        Ok(MultiTaskNet { arch: arch.clone(), vocab, layout: layout.clone(), store, tables, towers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.towers.contains_key(&task)
    }

    /// True when both towers read the same embedding table.
    pub fn shares_embedding(&self, a: Task, b: Task) -> bool {
        matches!((self.towers.get(&a), self.towers.get(&b)), (Some(x), Some(y)) if x.table == y.table)
    }

    pub fn embedding_table(&self, task: Task) -> Option<ParamId> {
        self.towers.get(&task).map(|t| self.tables[t.table].id)
    }

    /// Weights and biases of one tower (embedding table excluded).
    pub fn tower_params(&self, task: Task) -> Vec<ParamId> {
        self.towers.get(&task).map(|t| t.mlp.params().collect()).unwrap_or_default()
    }

    /// Every parameter a task's output depends on, embedding table included.
    pub fn task_params(&self, task: Task) -> Vec<ParamId> {
        let mut ids = self.tower_params(task);
        if let Some(t) = self.embedding_table(task) {
            ids.insert(0, t);
        }
        ids
    }

    /// Sets every tower weight and bias of `task` to zero.
    pub fn zero_tower(&mut self, task: Task) {
        for id in self.tower_params(task) {
            self.store.value_mut(id).fill(0.0);
        }
    }

    fn tower(&self, task: Task) -> Result<&Tower> {
        self.towers.get(&task).ok_or_else(|| Error::Contract(format!("net has no `{}` tower", task.name())))
    }

    /// Records a forward pass over `records`; see [`BatchForward`].
    pub fn batch<'n>(&'n self, records: &[&InteractionRecord]) -> Result<BatchForward<'n>> {
        BatchForward::new(self, &self.store, records)
    }

    /// Per-record outputs of one tower, evaluated in chunks.
    pub fn predict(&self, records: &[&InteractionRecord], task: Task) -> Result<Vec<f64>> {
        self.tower(task)?;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let mut fwd = self.batch(chunk)?;
            let v = fwd.head(&mut tape, task, None)?;
            out.extend_from_slice(tape.value(v).data());
        }
        Ok(out)
    }

    pub fn predict_ctr(&self, records: &[&InteractionRecord]) -> Result<Vec<f64>> {
        self.predict(records, Task::Ctr)
    }

    pub fn predict_cvr(&self, records: &[&InteractionRecord]) -> Result<Vec<f64>> {
        self.predict(records, Task::Cvr)
    }

    pub fn predict_imputed_error(&self, records: &[&InteractionRecord]) -> Result<Vec<f64>> {
        self.predict(records, Task::Imp)
    }

    /// `p̂ · r̂` per record.
    pub fn ctcvr_score(&self, records: &[&InteractionRecord]) -> Result<Vec<f64>> {
        let ctr = self.predict_ctr(records)?;
        let cvr = self.predict_cvr(records)?;
        Ok(ctr.iter().zip(&cvr).map(|(p, r)| p * r).collect())
    }

    /// Writes parameters plus a JSON header describing the net; `extra` is
    /// stored under the `extra` key.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "architecture": self.arch,
            "vocab": self.vocab,
            "layout": self.layout,
            "extra": extra,
        });
        write_checkpoint(path, &self.store, &meta.to_string())
    }

    /// Inverse of [`MultiTaskNet::save`]; returns the net and the `extra` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (loaded, meta) = read_checkpoint(path)?;
        #[derive(Deserialize)]
        struct Meta {
            architecture: Architecture,
            vocab: Vocab,
            layout: Layout,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let meta: Meta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
        let mut net = MultiTaskNet::new(&meta.architecture, meta.vocab, &meta.layout, 0)?;
        if loaded.len() != net.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, layout expects {}",
                loaded.len(),
                net.store.len()
            )));
        }
        for id in net.store.ids().collect::<Vec<_>>() {
            let name = net.store.name(id).to_string();
            let src = loaded.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let value = loaded.value(src);
            if value.shape() != net.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    net.store.value(id).shape()
                )));
            }
            *net.store.value_mut(id) = value.clone();
        }
        Ok((net, meta.extra))
    }
}

/// One batch's forward pass; pooled embeddings are computed once per table
/// and reused by every tower that reads the table.
pub struct BatchForward<'n> {
    net: &'n MultiTaskNet,
    store: &'n ParameterStore,
    lookup: EmbeddingLookup,
    pooled: Vec<Option<Var>>,
}

impl<'n> BatchForward<'n> {
    /// `store` may differ from the net's own store (finite-difference checks
    /// evaluate perturbed copies); it must hold the same parameter layout.
    pub fn new(net: &'n MultiTaskNet, store: &'n ParameterStore, records: &[&InteractionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("empty record batch".into()));
        }
        let offsets = net.vocab.offsets();
        let mut lookup = EmbeddingLookup::new(records.len(), FIELD_COUNT);
        for r in records {
            r.check_vocab(&net.vocab)?;
            for (ids, off) in r.fields().iter().zip(offsets) {
                lookup.push_cell(ids.iter().map(|&id| off + id as usize));
            }
        }
        Ok(BatchForward { net, store, lookup, pooled: vec![None; net.tables.len()] })
    }

    pub fn len(&self) -> usize {
        self.lookup.records
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.records == 0
    }

    /// Pooled, field-concatenated embedding `[batch, fields · dim]` for a task's table.
    pub fn embedding(&mut self, tape: &mut Tape, task: Task) -> Result<Var> {
        let t = self.net.tower(task)?.table;
        if let Some(v) = self.pooled[t] {
            return Ok(v);
        }
        let table = &self.net.tables[t];
        let v = tape.embed(self.store, table.id, self.lookup.clone())?;
        debug_assert_eq!(tape.value(v).cols(), FIELD_COUNT * table.dim);
        self.pooled[t] = Some(v);
        Ok(v)
    }

    /// Tower output `[n, 1]`, over all records or the listed batch rows.
    pub fn head(&mut self, tape: &mut Tape, task: Task, rows: Option<&[usize]>) -> Result<Var> {
        let mut x = self.embedding(tape, task)?;
        if let Some(rows) = rows {
            x = tape.gather_rows(x, rows.to_vec())?;
        }
        self.net.tower(task)?.mlp.forward(tape, self.store, x)
    }
}
