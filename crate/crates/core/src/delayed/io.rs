//! Augmented-tuple datasets: JSON-Lines with a header record, or a compact
//! little-endian binary variant. Readers detect the format by magic bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AugmentedState, AugmentedTuple, Transition};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"DTCA";
pub const FORMAT_VERSION: u32 = 1;

/// State or action coordinates that can be flattened to `f64`s.
pub trait Coord: Clone + Serialize + DeserializeOwned {
    fn to_f64s(&self) -> Vec<f64>;
    fn from_f64s(v: &[f64]) -> Result<Self>;
}

impl Coord for usize {
    fn to_f64s(&self) -> Vec<f64> {
        vec![*self as f64]
    }
    fn from_f64s(v: &[f64]) -> Result<Self> {
        match v {
            [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            _ => Err(Error::Format(format!("expected one integer id, got {v:?}"))),
        }
    }
}

impl Coord for Vec<f64> {
    fn to_f64s(&self) -> Vec<f64> {
        self.clone()
    }
    fn from_f64s(v: &[f64]) -> Result<Self> {
        Ok(v.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub delay: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_records: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record<S, A> {
    pub episode: usize,
    pub t: usize,
    #[serde(flatten)]
    pub tuple: AugmentedTuple<S, A>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

pub fn write_jsonl<W: Write, S: Coord, A: Coord>(
    mut w: W,
    header: &DatasetHeader,
    records: &[Record<S, A>],
) -> Result<()> {
    serde_json::to_writer(&mut w, &HeaderLine { header: header.clone() })?;
    w.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either format.
pub fn read_dataset<R: Read, S: Coord, A: Coord>(r: R) -> Result<(DatasetHeader, Vec<Record<S, A>>)> {
    let mut reader = BufReader::new(r);
    let peek = reader.fill_buf()?;
    if peek.starts_with(BINARY_MAGIC) {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        return read_binary(&bytes);
    }
    let mut lines = reader.lines();
    let first = lines.next().ok_or(Error::EmptyDataset)??;
    let header: HeaderLine = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("missing header record with \"delay\": {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record<S, A> = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        records.push(rec);
    }
    Ok((header.header, records))
}

// ── Binary variant ───────────────────────────────────────────────────────

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len() as u32);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_list<T: Coord>(out: &mut Vec<u8>, items: &[T]) {
    put_u32(out, items.len() as u32);
    for it in items {
        put_vec(out, &it.to_f64s());
    }
}

pub fn write_binary<W: Write, S: Coord, A: Coord>(
    mut w: W,
    header: &DatasetHeader,
    records: &[Record<S, A>],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let head = serde_json::to_vec(header)?;
    put_u32(&mut out, head.len() as u32);
    out.extend_from_slice(&head);
    put_u64(&mut out, records.len() as u64);
    for rec in records {
        let t = &rec.tuple;
        put_u64(&mut out, rec.episode as u64);
        put_u64(&mut out, rec.t as u64);
        put_vec(&mut out, &t.x.base.to_f64s());
        put_list(&mut out, &t.x.window);
        put_vec(&mut out, &t.a.to_f64s());
        out.extend_from_slice(&t.r.to_le_bytes());
        put_vec(&mut out, &t.x_next.base.to_f64s());
        put_list(&mut out, &t.x_next.window);
        put_vec(&mut out, &t.true_state.to_f64s());
        put_list(&mut out, &t.intermediate);
        put_vec(&mut out, &t.next_true_state.to_f64s());
        put_vec(&mut out, &t.window_rewards);
        out.push(t.done as u8);
    }
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated binary dataset".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
    fn coord<T: Coord>(&mut self) -> Result<T> {
        T::from_f64s(&self.vec()?)
    }
    fn list<T: Coord>(&mut self) -> Result<Vec<T>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.coord()).collect()
    }
}

fn read_binary<S: Coord, A: Coord>(bytes: &[u8]) -> Result<(DatasetHeader, Vec<Record<S, A>>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != BINARY_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let head_len = c.u32()? as usize;
    let header: DatasetHeader = serde_json::from_slice(c.take(head_len)?)?;
    let n = c.u64()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let episode = c.u64()? as usize;
        let t = c.u64()? as usize;
        let x = AugmentedState::new(c.coord()?, c.list()?);
        let a = c.coord()?;
        let r = c.f64()?;
        let x_next = AugmentedState::new(c.coord()?, c.list()?);
        let tuple = AugmentedTuple {
            x,
            a,
            r,
            x_next,
            true_state: c.coord()?,
            intermediate: c.list()?,
            next_true_state: c.coord()?,
            window_rewards: c.vec()?,
            done: c.u8()? != 0,
        };
        records.push(Record { episode, t, tuple });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after records".into()));
    }
    Ok((header, records))
}

/// Records of a delay-zero dataset regrouped into per-episode trajectories,
/// ordered by episode id then time.
pub fn trajectories<S: Coord, A: Coord>(records: &[Record<S, A>]) -> Vec<Vec<Transition<S, A>>> {
    let mut by_episode: BTreeMap<usize, Vec<(usize, Transition<S, A>)>> = BTreeMap::new();
    for rec in records {
        let t = &rec.tuple;
        by_episode.entry(rec.episode).or_default().push((
            rec.t,
            Transition {
                s: t.x.base.clone(),
                a: t.a.clone(),
                r: t.r,
                s_next: t.x_next.base.clone(),
                done: t.done,
            },
        ));
    }
    by_episode
        .into_values()
        .map(|mut steps| {
            steps.sort_by_key(|(t, _)| *t);
            steps.into_iter().map(|(_, tr)| tr).collect()
        })
        .collect()
}

/// Delay-zero records for a set of trajectories.
pub fn records_from_trajectories<S: Coord, A: Coord>(
    trajs: &[Vec<Transition<S, A>>],
) -> Vec<Record<S, A>> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(episode, traj)| {
            super::augment_trajectory(traj, 0)
                .into_iter()
                .enumerate()
                .map(move |(t, tuple)| Record { episode, t, tuple })
        })
        .collect()
}
