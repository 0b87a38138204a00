//! Routing-log encodings: JSONL (interchange) and a compact binary form.
//!
//! JSONL layout: line 1 is a header object carrying the schema version,
//! shape, and prompt manifest; every further line is one routing record.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{LogEntry, RoutingLog, RoutingRecord};
use crate::error::{FareError, Result};
use crate::prompts::{Axis, Condition, ManifestEntry};
use crate::scalar::Scalar;

pub const LOG_SCHEMA_VERSION: u32 = 1;
pub const LOG_BINARY_MAGIC: &[u8; 16] = b"FARELAB-LOG-v1\0\0";
const SCHEMA_NAME: &str = "farelab-routing-log";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    n_experts: usize,
    top_k: usize,
    moe_layers: Vec<usize>,
    n_records: usize,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Line<T> {
    prompt_id: String,
    condition: String,
    axis: Option<Axis>,
    group: Option<String>,
    layer: usize,
    pos: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pre_logits: Option<Vec<T>>,
    logits: Vec<T>,
    probs: Vec<T>,
    selected: Vec<usize>,
    weights: Vec<T>,
}

fn header<T>(log: &RoutingLog<T>) -> Header {
    Header {
        schema: SCHEMA_NAME.into(),
        version: LOG_SCHEMA_VERSION,
        n_experts: log.n_experts,
        top_k: log.top_k,
        moe_layers: log.moe_layers.clone(),
        n_records: log.entries.len(),
        manifest: log.manifest.clone(),
    }
}

fn condition_of(label: &str, axis: Option<Axis>, group: Option<String>) -> Option<Condition> {
    match (label, axis, group) {
        ("neutral", None, None) => Some(Condition::Neutral),
        ("demographic", Some(axis), Some(group)) => Some(Condition::Demographic { axis, group }),
        _ => None,
    }
}

fn check_record<T: Scalar>(log: &RoutingLog<T>, r: &RoutingRecord<T>) -> std::result::Result<(), String> {
    let k = log.n_experts;
    let lens_ok = r.logits.len() == k
        && r.probs.len() == k
        && r.pre_logits.as_ref().is_none_or(|p| p.len() == k)
        && r.selected.len() == log.top_k
        && r.weights.len() == log.top_k;
    if !lens_ok {
        return Err("vector length disagrees with header shape".into());
    }
    if r.selected.iter().any(|&e| e >= k) {
        return Err("selected expert id out of range".into());
    }
    Ok(())
}

/// JSONL text of a log.
pub fn serialize_log<T: Scalar>(log: &RoutingLog<T>) -> Result<String> {
    let mut out = serde_json::to_string(&header(log))?;
    out.push('\n');
    for e in &log.entries {
        let g = e.condition.group();
        let line = Line {
            prompt_id: e.prompt_id.clone(),
            condition: e.condition.label().to_string(),
            axis: g.as_ref().map(|g| g.axis),
            group: g.map(|g| g.group),
            layer: e.record.layer,
            pos: e.record.position,
            pre_logits: e.record.pre_logits.clone(),
            logits: e.record.logits.clone(),
            probs: e.record.probs.clone(),
            selected: e.record.selected.clone(),
            weights: e.record.weights.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn deserialize_log<T: Scalar>(text: &str, source: &str) -> Result<RoutingLog<T>> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| FareError::parse(source, "line 1", "empty log"))?;
    let h: Header = serde_json::from_str(first)
        .map_err(|e| FareError::parse(source, "line 1", format!("bad header: {e}")))?;
    if h.schema != SCHEMA_NAME || h.version != LOG_SCHEMA_VERSION {
        return Err(FareError::parse(
            source,
            "line 1",
            format!(
                "unsupported schema {} v{} (expected {SCHEMA_NAME} v{LOG_SCHEMA_VERSION})",
                h.schema, h.version
            ),
        ));
    }
    let mut log = RoutingLog {
        n_experts: h.n_experts,
        top_k: h.top_k,
        moe_layers: h.moe_layers,
        manifest: h.manifest,
        entries: Vec::new(),
    };
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let l: Line<T> = serde_json::from_str(line)
            .map_err(|e| FareError::parse(source, &loc, e.to_string()))?;
        let condition = condition_of(&l.condition, l.axis, l.group)
            .ok_or_else(|| FareError::parse(source, &loc, "inconsistent condition fields"))?;
        let record = RoutingRecord {
            layer: l.layer,
            position: l.pos,
            pre_logits: l.pre_logits,
            logits: l.logits,
            probs: l.probs,
            selected: l.selected,
            weights: l.weights,
        };
        check_record(&log, &record).map_err(|m| FareError::parse(source, &loc, m))?;
        log.entries.push(LogEntry {
            prompt_id: l.prompt_id,
            condition,
            record,
        });
    }
    if log.entries.len() != h.n_records {
        return Err(FareError::parse(
            source,
            "end of file",
            format!("expected {} records, found {} (truncated?)", h.n_records, log.entries.len()),
        ));
    }
    log.check_consistency()
        .map_err(|e| FareError::parse(source, "body", e.to_string()))?;
    Ok(log)
}

fn write_vec<T: Scalar>(buf: &mut Vec<u8>, v: &[T]) {
    for &x in v {
        buf.write_f64::<LittleEndian>(x.as_f64()).expect("vec write");
    }
}

/// Compact little-endian encoding: magic, JSON header, fixed-layout records.
/// Record conditions are recovered from the manifest via the prompt index.
pub fn serialize_log_binary<T: Scalar>(log: &RoutingLog<T>) -> Result<Vec<u8>> {
    let index: std::collections::HashMap<&str, u32> = log
        .manifest
        .iter()
        .enumerate()
        .map(|(i, m)| (m.prompt_id.as_str(), i as u32))
        .collect();
    let mut buf = LOG_BINARY_MAGIC.to_vec();
    let head = serde_json::to_vec(&header(log))?;
    buf.write_u64::<LittleEndian>(head.len() as u64).expect("write");
    buf.extend_from_slice(&head);
    buf.write_u64::<LittleEndian>(log.entries.len() as u64).expect("write");
    for e in &log.entries {
        let pi = *index.get(e.prompt_id.as_str()).ok_or_else(|| {
            FareError::Protocol(format!("prompt `{}` missing from manifest", e.prompt_id))
        })?;
        let r = &e.record;
        buf.write_u32::<LittleEndian>(pi).expect("write");
        buf.write_u32::<LittleEndian>(r.layer as u32).expect("write");
        buf.write_u32::<LittleEndian>(r.position as u32).expect("write");
        buf.write_u8(u8::from(r.pre_logits.is_some())).expect("write");
        if let Some(p) = &r.pre_logits {
            write_vec(&mut buf, p);
        }
        write_vec(&mut buf, &r.logits);
        write_vec(&mut buf, &r.probs);
        for &s in &r.selected {
            buf.write_u32::<LittleEndian>(s as u32).expect("write");
        }
        write_vec(&mut buf, &r.weights);
    }
    Ok(buf)
}

pub fn deserialize_log_binary<T: Scalar>(bytes: &[u8], source: &str) -> Result<RoutingLog<T>> {
    let mut cur = Cursor::new(bytes);
    let at = |c: &Cursor<&[u8]>| format!("byte offset {}", c.position());
    let fail = |c: &Cursor<&[u8]>, msg: &str| FareError::parse(source, at(c), msg.to_string());

    let mut magic = [0u8; 16];
    cur.read_exact(&mut magic).map_err(|_| fail(&cur, "truncated magic"))?;
    if &magic != LOG_BINARY_MAGIC {
        return Err(FareError::parse(source, "byte offset 0", "bad magic or version"));
    }
    let hlen = cur.read_u64::<LittleEndian>().map_err(|_| fail(&cur, "truncated header length"))?;
    let mut head = vec![0u8; usize::try_from(hlen).map_err(|_| fail(&cur, "header too large"))?];
    cur.read_exact(&mut head).map_err(|_| fail(&cur, "truncated header"))?;
    let h: Header = serde_json::from_slice(&head).map_err(|e| fail(&cur, &format!("bad header: {e}")))?;
    if h.version != LOG_SCHEMA_VERSION {
        return Err(fail(&cur, "unsupported schema version"));
    }
    let mut log = RoutingLog {
        n_experts: h.n_experts,
        top_k: h.top_k,
        moe_layers: h.moe_layers,
        manifest: h.manifest,
        entries: Vec::new(),
    };
    let n = cur.read_u64::<LittleEndian>().map_err(|_| fail(&cur, "truncated record count"))?;
    let read_vec = |c: &mut Cursor<&[u8]>, len: usize| -> Result<Vec<T>> {
        (0..len)
            .map(|_| {
                c.read_f64::<LittleEndian>()
                    .map(T::lit)
                    .map_err(|_| FareError::parse(source, format!("byte offset {}", c.position()), "truncated record"))
            })
            .collect()
    };
    for _ in 0..n {
        let pi = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated record"))? as usize;
        let layer = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated record"))? as usize;
        let position = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated record"))? as usize;
        let has_pre = cur.read_u8().map_err(|_| fail(&cur, "truncated record"))?;
        let k = log.n_experts;
        let pre_logits = if has_pre == 1 { Some(read_vec(&mut cur, k)?) } else { None };
        let logits = read_vec(&mut cur, k)?;
        let probs = read_vec(&mut cur, k)?;
        let selected = (0..log.top_k)
            .map(|_| cur.read_u32::<LittleEndian>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|_| fail(&cur, "truncated record"))?;
        let weights = read_vec(&mut cur, log.top_k)?;
        let m = log.manifest.get(pi).ok_or_else(|| fail(&cur, "prompt index out of range"))?;
        let condition = condition_of(&m.condition, m.axis, m.group.clone())
            .ok_or_else(|| fail(&cur, "inconsistent manifest condition"))?;
        let record = RoutingRecord {
            layer,
            position,
            pre_logits,
            logits,
            probs,
            selected,
            weights,
        };
        check_record(&log, &record).map_err(|m| fail(&cur, &m))?;
        log.entries.push(LogEntry {
            prompt_id: m.prompt_id.clone(),
            condition,
            record,
        });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(fail(&cur, "trailing bytes after last record"));
    }
    Ok(log)
}

/// Read a log file, picking the encoding from its leading bytes.
pub fn read_log<T: Scalar>(path: &Path) -> Result<RoutingLog<T>> {
    let bytes = fs::read(path).map_err(|e| FareError::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(b"FARELAB-LOG") {
        deserialize_log_binary(&bytes, &name)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| FareError::parse(&name, format!("byte offset {}", e.utf8_error().valid_up_to()), "invalid UTF-8"))?;
        deserialize_log(&text, &name)
    }
}
