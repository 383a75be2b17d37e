//! `{{$name}}` placeholder templates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    /// Parse `source`, rejecting placeholders outside `known`.
    pub fn parse(source: &str, known: &[&str]) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut rest = source;
        while let Some(start) = rest.find("{{$") {
            if start > 0 {
                pieces.push(Piece::Text(rest[..start].to_owned()));
            }
            let after = &rest[start + 3..];
            let end = after.find("}}").ok_or_else(|| {
                Error::Template(format!(
                    "unclosed placeholder at byte {}",
                    source.len() - rest.len() + start
                ))
            })?;
            let name = &after[..end];
            if !known.contains(&name) {
                return Err(Error::UnknownPlaceholder(name.to_owned()));
            }
            pieces.push(Piece::Slot(name.to_owned()));
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_owned()));
        }
        Ok(Template { pieces })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(name) => Some(name.as_str()),
            Piece::Text(_) => None,
        })
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => out.push_str(
                    values
                        .get(name.as_str())
                        .ok_or_else(|| Error::Template(format!("no value for {{{{${name}}}}}")))?,
                ),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_known_slots() {
        let t = Template::parse("a {{$x}} b {{$y}}{{$x}}", &["x", "y"]).unwrap();
        let out = t
            .render(&BTreeMap::from([
                ("x", "1".to_string()),
                ("y", "{{$x}}".to_string()),
            ]))
            .unwrap();
        assert_eq!(out, "a 1 b {{$x}}1");
        assert_eq!(t.placeholders().collect::<Vec<_>>(), vec!["x", "y", "x"]);
    }

    #[test]
    fn rejects_unknown_and_unclosed() {
        assert!(matches!(
            Template::parse("{{$nope}}", &["x"]),
            Err(Error::UnknownPlaceholder(n)) if n == "nope"
        ));
        assert!(Template::parse("oops {{$x", &["x"]).is_err());
        let t = Template::parse("{{$x}}", &["x"]).unwrap();
        assert!(t.render(&BTreeMap::new()).is_err());
    }

    #[test]
    fn plain_braces_pass_through() {
        let t = Template::parse("{\n  \"k\": [1]\n}", &[]).unwrap();
        assert_eq!(t.render(&BTreeMap::new()).unwrap(), "{\n  \"k\": [1]\n}");
    }
}
