//! `key = value` configuration files.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Keys are
//! namespaced by module (`corpus.`, `captioner.`, `matcher.`, `train.`,
//! `eval.`). Unknown keys are rejected.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A config section that can be set from and rendered to key/value pairs.
/// Keys are given without the section prefix.
pub trait KvSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(String, String)>;
}

/// Parses `key = value` lines, keeping their order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_kv(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub(crate) fn unknown_key<T>(section: &str, key: &str) -> Result<T> {
    Err(Error::Config(format!("unknown key {section}.{key}")))
}

/// Applies every entry that carries `prefix.` to `section`.
pub fn apply_section<S: KvSection>(
    section: &mut S,
    prefix: &str,
    entries: &[(String, String)],
) -> Result<()> {
    for (k, v) in entries {
        match k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
            Some(rest) => section.set(rest, v)?,
            None => {
                return Err(Error::Config(format!(
                    "key {k} is outside section {prefix}"
                )))
            }
        }
    }
    Ok(())
}

pub fn prefixed<S: KvSection>(section: &S, prefix: &str) -> Vec<(String, String)> {
    section
        .entries()
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_kv("# header\n\na = 1\n b=two # trailing\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "two".into())]
        );
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv(" = 3\n").is_err());
    }

    #[test]
    fn render_round_trips() {
        let kv = vec![("x.y".to_string(), "0.5".to_string())];
        assert_eq!(parse_kv(&render_kv(&kv)).unwrap(), kv);
    }
}
