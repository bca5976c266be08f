use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::{ActLabel, Dialogue, Role, Utterance};
use crate::error::{DfmedError, Result};

/// Reads a JSONL corpus (one dialogue object per line).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DfmedError::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| DfmedError::Schema {
            id: format!("<line {}>", i + 1),
            field: "<json>".into(),
            msg: e.to_string(),
        })?;
        out.push(dialogue_from_value(&v, i + 1)?);
    }
    Ok(out)
}

fn dialogue_from_value(v: &Value, line: usize) -> Result<Dialogue> {
    let id = v
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| DfmedError::Schema {
            id: format!("<line {line}>"),
            field: "id".into(),
            msg: "missing or not a string".into(),
        })?;
    let schema = |field: String, msg: &str| DfmedError::Schema { id: id.clone(), field, msg: msg.to_string() };
    let raw = v
        .get("utterances")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("utterances".into(), "missing or not an array"))?;
    let mut utterances = Vec::with_capacity(raw.len());
    for (i, u) in raw.iter().enumerate() {
        let field = |f: &str| format!("utterances[{i}].{f}");
        let role = match u.get("role").and_then(Value::as_str) {
            Some("patient") => Role::Patient,
            Some("doctor") => Role::Doctor,
            _ => return Err(schema(field("role"), "expected \"patient\" or \"doctor\"")),
        };
        let strings = |key: &str| -> Result<Vec<String>> {
            match u.get(key) {
                None => Ok(Vec::new()),
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|x| x.as_str().map(str::to_string).ok_or_else(|| schema(field(key), "expected strings")))
                    .collect(),
                Some(_) => Err(schema(field(key), "expected an array")),
            }
        };
        let tokens = strings("tokens")?;
        let entities = strings("entities")?;
        let acts = strings("acts")?
            .iter()
            .map(|a| a.parse::<ActLabel>().map_err(|_| schema(field("acts"), &format!("unknown act `{a}`"))))
            .collect::<Result<Vec<_>>>()?;
        utterances.push(Utterance { role, tokens, entities, acts });
    }
    let d = Dialogue { id, utterances };
    d.validate()?;
    Ok(d)
}

/// Serialises a corpus as JSONL.
pub fn write_corpus<W: Write>(corpus: &[Dialogue], mut w: W) -> Result<()> {
    for d in corpus {
        let line = serde_json::to_string(d)?;
        w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| DfmedError::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &[Dialogue], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    fs::write(path, buf).map_err(|e| DfmedError::io(path, e))
}
