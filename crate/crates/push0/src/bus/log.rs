//! Append-only durable queue log with CRC-framed records and a consumed-id
//! bitmap sidecar.
//!
//! Layout per queue directory:
//!
//! ```text
//! <durable_path>/<queue>/log.bin       RECORD*
//! <durable_path>/<queue>/consumed.bin  little-endian u64 bitmap words
//! <durable_path>/<queue>/config.json   queue configuration, written at creation
//!
//! RECORD := [u32 len LE] [u32 crc32 LE] [u8 kind] [body; len-1 bytes]
//! ```
//!
//! `len` covers kind+body; the CRC (IEEE) covers the same bytes. Publish
//! records (`kind = 1`) carry the message as canonical JSON and are fsynced
//! before the publish call returns — that fsync is the delivery confirmation
//! the three-phase acknowledgment waits on. Consumed ids go to the sidecar
//! bitmap with batched fsync: losing a consumed bit on crash only re-delivers
//! an already-processed message, which at-least-once delivery tolerates by
//! design, whereas losing a publish record would lose a task.
//!
//! Recovery replays the log sequentially and stops at the first frame that is
//! short, oversized, or fails its CRC: everything before it is the restored
//! state, everything from it on is a torn tail from an interrupted append and
//! is truncated away.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::payload::Payload;

const KIND_PUBLISH: u8 = 1;
/// Upper bound on a single record body; anything larger is treated as
/// corruption during replay.
const MAX_RECORD_LEN: u32 = 64 * 1024 * 1024;

/// One persisted publish.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PublishRecord {
    pub id: u64,
    pub payload: Payload,
    pub headers: BTreeMap<String, String>,
    pub enqueue_time_ns: u64,
}

/// Dense bitmap over 1-based message ids.
#[derive(Debug, Clone, Default)]
pub struct IdBitmap {
    words: Vec<u64>,
    count: u64,
}

impl IdBitmap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, id: u64) {
        debug_assert!(id >= 1, "message ids are 1-based");
        let bit = id - 1;
        let word = (bit / 64) as usize;
        if word >= self.words.len() {
            self.words.resize(word + 1, 0);
        }
        let mask = 1u64 << (bit % 64);
        if self.words[word] & mask == 0 {
            self.words[word] |= mask;
            self.count += 1;
        }
    }

    pub fn contains(&self, id: u64) -> bool {
        if id == 0 {
            return false;
        }
        let bit = id - 1;
        let word = (bit / 64) as usize;
        self.words
            .get(word)
            .is_some_and(|w| w & (1u64 << (bit % 64)) != 0)
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.words.len() * 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Self {
        let mut words = Vec::with_capacity(bytes.len() / 8);
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            words.push(u64::from_le_bytes(buf));
        }
        let count = words.iter().map(|w| w.count_ones() as u64).sum();
        Self { words, count }
    }
}

/// What replay found in a queue directory.
#[derive(Debug)]
pub struct RecoveredQueue {
    /// Every intact publish record, in append order.
    pub records: Vec<PublishRecord>,
    /// Ids confirmed consumed before the crash.
    pub consumed: IdBitmap,
    /// Bytes discarded from a torn tail (0 for a clean log).
    pub truncated_bytes: u64,
    /// Next message id to assign; ids are never reused across restarts.
    pub next_id: u64,
}

/// Open handle to one queue's durable state.
pub struct DurableLog {
    dir: PathBuf,
    log: File,
    consumed_path: PathBuf,
    consumed: IdBitmap,
    unflushed_consumed: usize,
}

/// Flush the consumed sidecar after this many un-synced consumptions.
const CONSUMED_FLUSH_BATCH: usize = 64;

impl DurableLog {
    /// Open (creating if needed) a queue directory, replaying any existing
    /// log. A torn tail is truncated off the file so later appends extend a
    /// clean prefix.
    pub fn open(dir: &Path) -> std::io::Result<(DurableLog, RecoveredQueue)> {
        std::fs::create_dir_all(dir)?;
        let log_path = dir.join("log.bin");
        let consumed_path = dir.join("consumed.bin");

        let mut log = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&log_path)?;
        let (records, valid_len, total_len) = replay(&mut log)?;
        let truncated_bytes = total_len - valid_len;
        if truncated_bytes > 0 {
            log.set_len(valid_len)?;
            log.sync_data()?;
        }
        log.seek(SeekFrom::End(0))?;

        let consumed = match std::fs::read(&consumed_path) {
            Ok(bytes) => IdBitmap::from_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => IdBitmap::new(),
            Err(e) => return Err(e),
        };

        let next_id = records.iter().map(|r| r.id).max().unwrap_or(0) + 1;
        let recovered = RecoveredQueue {
            records,
            consumed: consumed.clone(),
            truncated_bytes,
            next_id,
        };
        Ok((
            DurableLog {
                dir: dir.to_path_buf(),
                log,
                consumed_path,
                consumed,
                unflushed_consumed: 0,
            },
            recovered,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Append one publish record and fsync. Returns only after the record is
    /// durable.
    pub fn append_publish(&mut self, record: &PublishRecord) -> std::io::Result<()> {
        let body = serde_json::to_vec(record).expect("record serialization cannot fail");
        let mut frame = Vec::with_capacity(9 + body.len());
        let len = (body.len() + 1) as u32;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&[KIND_PUBLISH]);
        hasher.update(&body);
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&hasher.finalize().to_le_bytes());
        frame.push(KIND_PUBLISH);
        frame.extend_from_slice(&body);
        self.log.write_all(&frame)?;
        self.log.sync_data()?;
        Ok(())
    }

    /// Record a consumption. Fsync is batched: every `CONSUMED_FLUSH_BATCH`
    /// marks, or immediately when `force` is set (used before dead-letter
    /// finalization and on close).
    pub fn mark_consumed(&mut self, id: u64, force: bool) -> std::io::Result<()> {
        self.consumed.set(id);
        self.unflushed_consumed += 1;
        if force || self.unflushed_consumed >= CONSUMED_FLUSH_BATCH {
            self.flush_consumed()?;
        }
        Ok(())
    }

    /// Write the full bitmap out and fsync it.
    pub fn flush_consumed(&mut self) -> std::io::Result<()> {
        if self.unflushed_consumed == 0 {
            return Ok(());
        }
        let bytes = self.consumed.to_bytes();
        let mut f = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(&self.consumed_path)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        self.unflushed_consumed = 0;
        Ok(())
    }
}

impl Drop for DurableLog {
    fn drop(&mut self) {
        let _ = self.flush_consumed();
    }
}

/// Read records until EOF or the first damaged frame. Returns the records,
/// the byte length of the valid prefix, and the total file length.
fn replay(log: &mut File) -> std::io::Result<(Vec<PublishRecord>, u64, u64)> {
    let total_len = log.metadata()?.len();
    log.seek(SeekFrom::Start(0))?;
    let mut buf = Vec::new();
    log.read_to_end(&mut buf)?;

    let mut records = Vec::new();
    let mut offset: usize = 0;
    loop {
        let remaining = buf.len() - offset;
        if remaining < 8 {
            break; // clean EOF or a torn frame header
        }
        let len = u32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap());
        let crc = u32::from_le_bytes(buf[offset + 4..offset + 8].try_into().unwrap());
        if len == 0 || len > MAX_RECORD_LEN || remaining - 8 < len as usize {
            break; // nonsense length or truncated body
        }
        let body = &buf[offset + 8..offset + 8 + len as usize];
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(body);
        if hasher.finalize() != crc {
            break; // torn or corrupted record
        }
        let kind = body[0];
        if kind != KIND_PUBLISH {
            break; // unknown record kind: stop at the last understood prefix
        }
        match serde_json::from_slice::<PublishRecord>(&body[1..]) {
            Ok(rec) => records.push(rec),
            Err(_) => break, // CRC passed but body unparseable: treat as damage
        }
        offset += 8 + len as usize;
    }
    Ok((records, offset as u64, total_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record(id: u64) -> PublishRecord {
        PublishRecord {
            id,
            payload: Payload::new().with("block_num", id as i64).with("n", 42i64),
            headers: BTreeMap::from([("traceparent".to_string(), "x".to_string())]),
            enqueue_time_ns: 1_000 + id,
        }
    }

    #[test]
    fn round_trip_and_id_sequence() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut log, rec) = DurableLog::open(dir.path()).unwrap();
            assert_eq!(rec.next_id, 1);
            for id in 1..=5 {
                log.append_publish(&record(id)).unwrap();
            }
            log.mark_consumed(2, true).unwrap();
        }
        let (_log, rec) = DurableLog::open(dir.path()).unwrap();
        assert_eq!(rec.records.len(), 5);
        assert_eq!(rec.records[4], record(5));
        assert_eq!(rec.next_id, 6);
        assert!(rec.consumed.contains(2));
        assert!(!rec.consumed.contains(1));
        assert_eq!(rec.truncated_bytes, 0);
    }

    /// Truncate the log at every possible byte length and recover. The oracle
    /// is the frame layout itself: a cut at offset `o` must restore exactly
    /// the records whose frames end at or before `o`, and never panic.
    #[test]
    fn torn_tail_recovery_at_every_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut ends = Vec::new(); // cumulative end offset of each frame
        {
            let (mut log, _) = DurableLog::open(dir.path()).unwrap();
            let mut end = 0u64;
            for id in 1..=5 {
                let rec = record(id);
                log.append_publish(&rec).unwrap();
                let body = serde_json::to_vec(&rec).unwrap();
                end += 8 + 1 + body.len() as u64;
                ends.push(end);
            }
        }
        let pristine = std::fs::read(dir.path().join("log.bin")).unwrap();
        assert_eq!(pristine.len() as u64, *ends.last().unwrap());

        for cut in 0..=pristine.len() {
            let case = tempfile::tempdir().unwrap();
            std::fs::write(case.path().join("log.bin"), &pristine[..cut]).unwrap();
            let (_log, rec) = DurableLog::open(case.path()).unwrap();
            let expected = ends.iter().filter(|e| **e <= cut as u64).count();
            assert_eq!(
                rec.records.len(),
                expected,
                "cut at {cut} must keep exactly the {expected} whole frames"
            );
            for (i, r) in rec.records.iter().enumerate() {
                assert_eq!(*r, record(i as u64 + 1));
            }
            let valid_prefix = if expected == 0 { 0 } else { ends[expected - 1] };
            assert_eq!(rec.truncated_bytes, cut as u64 - valid_prefix);
            // The file was physically truncated to the valid prefix.
            let len_after = std::fs::metadata(case.path().join("log.bin")).unwrap().len();
            assert_eq!(len_after, valid_prefix);
        }
    }

    /// Flipping any byte inside the tail record damages only that record.
    #[test]
    fn corrupted_tail_record_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut log, _) = DurableLog::open(dir.path()).unwrap();
            for id in 1..=3 {
                log.append_publish(&record(id)).unwrap();
            }
        }
        let path = dir.path().join("log.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let (_log, rec) = DurableLog::open(dir.path()).unwrap();
        assert_eq!(rec.records.len(), 2);
        // Ids never rewind: the damaged record's id stays burned.
        assert_eq!(rec.next_id, 3);
    }

    #[test]
    fn appends_continue_after_torn_tail_truncation() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut log, _) = DurableLog::open(dir.path()).unwrap();
            for id in 1..=3 {
                log.append_publish(&record(id)).unwrap();
            }
        }
        let path = dir.path().join("log.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        {
            let (mut log, rec) = DurableLog::open(dir.path()).unwrap();
            assert_eq!(rec.records.len(), 2);
            log.append_publish(&record(7)).unwrap();
        }
        let (_log, rec) = DurableLog::open(dir.path()).unwrap();
        assert_eq!(
            rec.records.iter().map(|r| r.id).collect::<Vec<_>>(),
            vec![1, 2, 7]
        );
        assert_eq!(rec.next_id, 8);
    }

    #[test]
    fn bitmap_set_contains_count() {
        let mut b = IdBitmap::new();
        assert!(!b.contains(1));
        b.set(1);
        b.set(64);
        b.set(65);
        b.set(65);
        assert!(b.contains(1) && b.contains(64) && b.contains(65));
        assert!(!b.contains(2) && !b.contains(66));
        assert_eq!(b.len(), 3);
        let back = IdBitmap::from_bytes(&b.to_bytes());
        assert_eq!(back.len(), 3);
        assert!(back.contains(64));
    }
}
