//! Ingestion of delimited session logs.
//!
//! Each row is one step of one session: a session id, the shown items
//! (joined by `item_separator`), the clicked item, and optionally a reward
//! and a timestamp. Sessions become trajectories in first-seen order, items
//! are re-indexed densely in first-seen order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use m3rec_core::data::{ItemEmbeddings, StepRecord, Trajectory};
use m3rec_core::diffcore::Matrix;
use m3rec_core::rng::{self, tag};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

/// Maps file columns onto step fields. Columns are header names, or
/// 0-based indices when `has_header` is false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub delimiter: char,
    pub has_header: bool,
    pub session: String,
    pub shown: String,
    pub click: String,
    /// Without a reward column every click is worth 1.0.
    pub reward: Option<String>,
    /// Steps are ordered by this column within a session, else file order.
    pub time: Option<String>,
    pub item_separator: char,
    pub train_frac: f64,
    /// Dimension of random embeddings when no embedding file is given.
    pub embedding_dim: usize,
    /// Optional delimited file: item id, then the embedding values.
    pub embeddings: Option<PathBuf>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: true,
            session: "session_id".into(),
            shown: "shown".into(),
            click: "click".into(),
            reward: None,
            time: None,
            item_separator: ';',
            train_frac: 0.8,
            embedding_dim: 16,
            embeddings: None,
        }
    }
}

impl ColumnMap {
    pub fn validate(&self) -> Result<()> {
        if self.delimiter == self.item_separator {
            return Err(Error::Config("ingest: delimiter and item_separator must differ".into()));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Config("ingest: delimiter must be ASCII".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config("ingest: train_frac must lie in (0, 1)".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("ingest: embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub trajectories: Vec<Trajectory>,
    /// Original id of each dense item index.
    pub item_ids: Vec<String>,
    /// Original id of each trajectory's `user_id`.
    pub session_ids: Vec<String>,
    pub embeddings: ItemEmbeddings,
    /// Rows that could not be mapped (missing or unparsable fields).
    pub skipped_rows: usize,
    /// Steps dropped by validation (empty or repeated slate, click not shown).
    pub dropped_steps: usize,
    /// Items that received random embeddings although a file was given.
    pub missing_embeddings: usize,
    pub k: usize,
}

impl Ingested {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.skipped_rows > 0 {
            w.push(format!("skipped {} unmappable rows", self.skipped_rows));
        }
        if self.dropped_steps > 0 {
            w.push(format!("dropped {} invalid steps", self.dropped_steps));
        }
        if self.missing_embeddings > 0 {
            w.push(format!("{} items had no embedding and were initialized randomly", self.missing_embeddings));
        }
        w
    }
}

struct Columns {
    session: usize,
    shown: usize,
    click: usize,
    reward: Option<usize>,
    time: Option<usize>,
}

fn resolve(map: &ColumnMap, header: Option<&csv::StringRecord>) -> Result<Columns> {
    let find = |name: &str| -> Result<usize> {
        match header {
            Some(h) => h
                .iter()
                .position(|c| c.trim() == name)
                .ok_or_else(|| Error::Ingest(format!("no column named {name:?}"))),
            None => name
                .parse()
                .map_err(|_| Error::Ingest(format!("column {name:?} must be an index without a header"))),
        }
    };
    Ok(Columns {
        session: find(&map.session)?,
        shown: find(&map.shown)?,
        click: find(&map.click)?,
        reward: map.reward.as_deref().map(find).transpose()?,
        time: map.time.as_deref().map(find).transpose()?,
    })
}

struct RawStep {
    shown: Vec<String>,
    click: String,
    reward: f64,
    time: f64,
}

fn parse_row(rec: &csv::StringRecord, cols: &Columns, sep: char) -> Option<(String, RawStep)> {
    let field = |i: usize| rec.get(i).map(str::trim);
    let session = field(cols.session).filter(|s| !s.is_empty())?.to_string();
    let shown: Vec<String> = field(cols.shown)?
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let click = field(cols.click).filter(|s| !s.is_empty())?.to_string();
    let reward = match cols.reward {
        Some(i) => field(i)?.parse::<f64>().ok().filter(|r| r.is_finite())?,
        None => 1.0,
    };
    let time = match cols.time {
        Some(i) => field(i)?.parse::<f64>().ok().filter(|t| t.is_finite())?,
        None => 0.0,
    };
    Some((session, RawStep { shown, click, reward, time }))
}

fn step_is_valid(s: &RawStep) -> bool {
    let mut seen = std::collections::HashSet::new();
    !s.shown.is_empty() && s.shown.iter().all(|x| seen.insert(x)) && s.shown.contains(&s.click)
}

/// Ingests a session log read from `input`.
pub fn ingest_reader(input: impl Read, map: &ColumnMap, embeddings: Option<&Path>, seed: u64) -> Result<Ingested> {
    map.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(map.delimiter as u8)
        .has_headers(map.has_header)
        .flexible(true)
        .from_reader(input);
    let header = if map.has_header {
        Some(reader.headers().map_err(|e| Error::Ingest(e.to_string()))?.clone())
    } else {
        None
    };
    let cols = resolve(map, header.as_ref())?;

    let mut session_ids: Vec<String> = Vec::new();
    let mut session_index: HashMap<String, usize> = HashMap::new();
    let mut sessions: Vec<Vec<RawStep>> = Vec::new();
    let mut skipped_rows = 0;
    let mut dropped_steps = 0;
    for rec in reader.records() {
        let Some((sid, step)) = rec.ok().and_then(|r| parse_row(&r, &cols, map.item_separator)) else {
            skipped_rows += 1;
            continue;
        };
        if !step_is_valid(&step) {
            dropped_steps += 1;
            continue;
        }
        let i = *session_index.entry(sid.clone()).or_insert_with(|| {
            session_ids.push(sid);
            sessions.push(Vec::new());
            sessions.len() - 1
        });
        sessions[i].push(step);
    }
    if sessions.is_empty() {
        return Err(Error::Ingest(format!(
            "no usable sessions ({skipped_rows} rows skipped, {dropped_steps} steps dropped)"
        )));
    }

    let mut item_ids: Vec<String> = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut dense = |id: &String| -> usize {
        *item_index.entry(id.clone()).or_insert_with(|| {
            item_ids.push(id.clone());
            item_ids.len() - 1
        })
    };
    let mut trajectories = Vec::with_capacity(sessions.len());
    let mut k = 0;
    for (u, mut steps) in sessions.into_iter().enumerate() {
        if cols.time.is_some() {
            steps.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
        let mut t = Trajectory::new(u as u64);
        for s in steps {
            let slate: Vec<usize> = s.shown.iter().map(&mut dense).collect();
            let click = dense(&s.click);
            k = k.max(slate.len());
            t.steps.push(StepRecord {
                slate,
                click,
                reward: s.reward,
            });
        }
        trajectories.push(t);
    }

    let mut rng = rng::stream(seed, tag::INGEST, 0);
    let (embeddings, missing_embeddings) = match embeddings {
        None => (ItemEmbeddings::random(item_ids.len(), map.embedding_dim, &mut rng), 0),
        Some(path) => {
            let given = read_embedding_rows(path, map.delimiter)?;
            let dim = given.values().next().map_or(map.embedding_dim, Vec::len);
            let mut table = ItemEmbeddings::random(item_ids.len(), dim, &mut rng).table().clone();
            let mut missing = 0;
            for (i, id) in item_ids.iter().enumerate() {
                match given.get(id) {
                    Some(v) => table.row_mut(i).copy_from_slice(v),
                    None => missing += 1,
                }
            }
            (ItemEmbeddings::fixed(table).with_learnable(missing > 0), missing)
        }
    };
    Ok(Ingested {
        trajectories,
        item_ids,
        session_ids,
        embeddings,
        skipped_rows,
        dropped_steps,
        missing_embeddings,
        k,
    })
}

pub fn ingest_session_log(path: &Path, map: &ColumnMap, seed: u64) -> Result<Ingested> {
    let f = File::open(path).map_err(io(path))?;
    ingest_reader(BufReader::new(f), map, map.embeddings.as_deref(), seed)
}

fn read_embedding_rows(path: &Path, delimiter: char) -> Result<HashMap<String, Vec<f64>>> {
    let f = File::open(path).map_err(io(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(f));
    let mut out = HashMap::new();
    let mut dim = None;
    for (line, rec) in reader.records().enumerate() {
        let bad = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line + 1,
            msg,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut fields = rec.iter().map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let v: Vec<f64> = fields
            .map(|x| x.parse::<f64>().map_err(|e| bad(format!("{x:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(bad("expected an id followed by finite values".into()));
        }
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(bad(format!("expected {} values, got {}", dim.unwrap_or(0), v.len())));
        }
        out.insert(id, v);
    }
    if out.is_empty() {
        return Err(Error::Ingest(format!("{}: no embeddings", path.display())));
    }
    Ok(out)
}

/// Embedding table stored next to ingested logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsFile {
    pub item_ids: Vec<String>,
    pub learnable: bool,
    pub table: Vec<Vec<f64>>,
}

impl EmbeddingsFile {
    pub fn new(item_ids: Vec<String>, emb: &ItemEmbeddings) -> Self {
        let t = emb.table();
        Self {
            item_ids,
            learnable: emb.is_learnable(),
            table: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
        }
    }

    pub fn embeddings(&self) -> Result<ItemEmbeddings> {
        let dim = self.table.first().map_or(0, Vec::len);
        if dim == 0 || self.table.iter().any(|r| r.len() != dim) || self.table.len() != self.item_ids.len() {
            return Err(Error::Ingest("embedding table is empty or ragged".into()));
        }
        Ok(ItemEmbeddings::fixed(Matrix::from_rows(&self.table)).with_learnable(self.learnable))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(io(path))?;
        serde_json::to_writer(BufWriter::new(f), self).map_err(|e| Error::Ingest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(io(path))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
