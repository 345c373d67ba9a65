//! Plain `key=value` configuration text: one setting per line, `#` starts a
//! comment. Every configurable struct exposes its knobs under a dotted
//! prefix (`model.`, `gate.`, `data.`, `train.`).

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A struct whose fields can be read and written as dotted keys.
pub trait KeyValue {
    /// Sets one key. Returns `Ok(false)` when the key is not owned by this
    /// struct, so callers can try several owners in turn.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;
}

/// Parses config text into `(key, value)` pairs in file order.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renders entries as config text that [`parse_text`] reads back.
pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Applies `pairs` to the first owner accepting each key; unknown keys are
/// errors.
pub fn apply(owners: &mut [&mut dyn KeyValue], pairs: &[(String, String)]) -> Result<()> {
    'pairs: for (k, v) in pairs {
        for owner in owners.iter_mut() {
            if owner.set_key(k, v)? {
                continue 'pairs;
            }
        }
        return Err(Error::Config(format!("unknown key {k:?}")));
    }
    Ok(())
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Comma-separated list; the empty string is the empty list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest decimal that reads back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Knobs {
        rate: f64,
        steps: Vec<usize>,
    }

    impl KeyValue for Knobs {
        fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
            match key {
                "k.rate" => self.rate = parse_value(key, value)?,
                "k.steps" => self.steps = parse_list(key, value)?,
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn entries(&self) -> Vec<(String, String)> {
            vec![
                ("k.rate".into(), fmt_f64(self.rate)),
                ("k.steps".into(), join(&self.steps)),
            ]
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let pairs = parse_text("# header\n\nk.rate = 0.5 # trailing\nk.steps=1,2\n").unwrap();
        assert_eq!(pairs, vec![("k.rate".into(), "0.5".into()), ("k.steps".into(), "1,2".into())]);
        assert!(parse_text("novalue\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut k = Knobs::default();
        let err = apply(&mut [&mut k], &[("k.rat".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("k.rat"));
    }

    #[test]
    fn render_round_trips() {
        let mut k = Knobs {
            rate: 0.1 + 0.2,
            steps: vec![3, 5],
        };
        let text = render(&k.entries());
        let before = k.entries();
        k.rate = 0.0;
        k.steps.clear();
        apply(&mut [&mut k], &parse_text(&text).unwrap()).unwrap();
        assert_eq!(k.entries(), before);
        assert_eq!(k.rate, 0.1 + 0.2);
    }

    #[test]
    fn empty_list() {
        assert!(parse_list::<usize>("x", "").unwrap().is_empty());
        assert!(parse_list::<usize>("x", "1,a").is_err());
    }
}
