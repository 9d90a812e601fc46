//! Operator commands: free text interleaved with pose markers such as
//! `[x=14; y=3.2; yaw=1.26]`.
//!
//! Grammar (see `docs/marker-grammar.md`):
//!
//! ```text
//! marker = "[" "x=" real ";" [" "] "y=" real ";" [" "] "yaw=" real "]"
//! real   = ["+" | "-"] digit {digit} ["." digit {digit}]
//! ```
//!
//! A `[` followed (after optional blanks) by `x`, `y` or `yaw` and `=` opens a
//! marker; if the rest does not follow the grammar the whole command is
//! rejected. Any other bracket is ordinary text.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Pose annotation. Units are carried as given: meters for `x`/`y`, and the
/// operator's yaw value unnormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Marker {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // f64's Display is the shortest round-trip form and never uses an exponent.
        write!(f, "[x={}; y={}; yaw={}]", self.x, self.y, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Whitespace-normalized, non-empty text.
    Text(String),
    Marker(Marker),
}

/// A parsed command. Equality compares segments only; `raw` is informational.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultimodalCommand {
    segments: Vec<Segment>,
    raw: String,
}

impl PartialEq for MultimodalCommand {
    fn eq(&self, other: &Self) -> bool {
        self.segments == other.segments
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CommandError {
    #[error("malformed marker at byte {offset}: {reason}")]
    MalformedMarker { offset: usize, reason: String },
    #[error("command has no text")]
    NoText,
    #[error("segments do not form a valid command: {0}")]
    InvalidSegments(String),
}

impl MultimodalCommand {
    /// Builds a command from segments, normalizing text whitespace. Fails if
    /// the segments would not survive a render/parse round trip.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, CommandError> {
        let mut norm = Vec::with_capacity(segments.len());
        for s in segments {
            match s {
                Segment::Text(t) => {
                    let t = normalize_ws(&t);
                    if !t.is_empty() {
                        norm.push(Segment::Text(t));
                    }
                }
                Segment::Marker(m) => {
                    if !m.is_finite() {
                        return Err(CommandError::InvalidSegments("marker values must be finite".into()));
                    }
                    norm.push(Segment::Marker(m));
                }
            }
        }
        let rendered = render_segments(&norm);
        let reparsed = parse_command(&rendered)?;
        if reparsed.segments != merge_text(norm) {
            return Err(CommandError::InvalidSegments(format!(
                "`{rendered}` does not parse back to the same segments"
            )));
        }
        Ok(reparsed)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn markers(&self) -> impl Iterator<Item = &Marker> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Marker(m) => Some(m),
            Segment::Text(_) => None,
        })
    }

    /// Each marker with the text segment directly following it, if any.
    pub fn markers_with_referents(&self) -> Vec<(Marker, Option<&str>)> {
        let mut out = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            if let Segment::Marker(m) = s {
                let referent = match self.segments.get(i + 1) {
                    Some(Segment::Text(t)) => Some(t.as_str()),
                    _ => None,
                };
                out.push((*m, referent));
            }
        }
        out
    }

    /// Text segments joined by single spaces, markers omitted.
    pub fn text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Marker(_) => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for MultimodalCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_command(self))
    }
}

impl std::str::FromStr for MultimodalCommand {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_command(s)
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn merge_text(segments: Vec<Segment>) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for s in segments {
        match (out.last_mut(), s) {
            (Some(Segment::Text(prev)), Segment::Text(t)) => {
                prev.push(' ');
                prev.push_str(&t);
            }
            (_, s) => out.push(s),
        }
    }
    out
}

fn render_segments(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.clone(),
            Segment::Marker(m) => m.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_command(cmd: &MultimodalCommand) -> String {
    render_segments(&cmd.segments)
}

pub fn parse_command(input: &str) -> Result<MultimodalCommand, CommandError> {
    let mut segments = Vec::new();
    let mut text_start = 0;
    let mut pos = 0;
    let bytes = input.as_bytes();
    while pos < bytes.len() {
        if bytes[pos] == b'[' && opens_marker(&input[pos + 1..]) {
            let (marker, len) = MarkerScanner::new(input, pos).scan()?;
            push_text(&mut segments, &input[text_start..pos]);
            segments.push(Segment::Marker(marker));
            pos += len;
            text_start = pos;
        } else {
            pos += 1;
        }
    }
    push_text(&mut segments, &input[text_start..]);
    if !segments.iter().any(|s| matches!(s, Segment::Text(_))) {
        return Err(CommandError::NoText);
    }
    Ok(MultimodalCommand {
        segments,
        raw: input.to_string(),
    })
}

fn push_text(segments: &mut Vec<Segment>, s: &str) {
    let t = normalize_ws(s);
    if !t.is_empty() {
        segments.push(Segment::Text(t));
    }
}

/// Does the text after a `[` start like a marker key?
fn opens_marker(after: &str) -> bool {
    let s = after.trim_start_matches([' ', '\t']);
    ["yaw", "x", "y"].iter().any(|key| {
        s.get(..key.len()).is_some_and(|head| head.eq_ignore_ascii_case(key))
            && s[key.len()..].trim_start_matches([' ', '\t']).starts_with('=')
    })
}

/// Matches one marker starting at the `[` located at `start`.
pub(crate) struct MarkerScanner<'a> {
    input: &'a str,
    start: usize,
    pos: usize,
}

impl<'a> MarkerScanner<'a> {
    pub(crate) fn new(input: &'a str, start: usize) -> Self {
        Self { input, start, pos: start }
    }

    /// Returns the marker and its byte length.
    pub(crate) fn scan(mut self) -> Result<(Marker, usize), CommandError> {
        self.expect("[")?;
        self.expect("x=")?;
        let x = self.real()?;
        self.expect(";")?;
        self.optional_space();
        self.expect("y=")?;
        let y = self.real()?;
        self.expect(";")?;
        self.optional_space();
        self.expect("yaw=")?;
        let yaw = self.real()?;
        self.expect("]")?;
        Ok((Marker { x, y, yaw }, self.pos - self.start))
    }

    fn err(&self, reason: impl Into<String>) -> CommandError {
        CommandError::MalformedMarker {
            offset: self.start,
            reason: format!("{} (at byte {})", reason.into(), self.pos),
        }
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..]
    }

    fn expect(&mut self, lit: &str) -> Result<(), CommandError> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.err(format!("expected `{lit}`")))
        }
    }

    fn optional_space(&mut self) {
        if self.rest().starts_with(' ') {
            self.pos += 1;
        }
    }

    fn real(&mut self) -> Result<f64, CommandError> {
        let b = self.rest().as_bytes();
        let mut i = 0;
        if matches!(b.first(), Some(b'+' | b'-')) {
            i += 1;
        }
        let int_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == int_start {
            return Err(self.err("expected digits"));
        }
        if b.get(i) == Some(&b'.') {
            i += 1;
            let frac_start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i == frac_start {
                return Err(self.err("expected digits after `.`"));
            }
        }
        let lexeme = &self.rest()[..i];
        let v: f64 = lexeme.parse().map_err(|_| self.err(format!("bad number `{lexeme}`")))?;
        if !v.is_finite() {
            return Err(self.err(format!("number `{lexeme}` out of range")));
        }
        self.pos += i;
        Ok(v)
    }
}

/// Byte ranges of every well-formed marker in `text`; malformed ones are skipped.
pub fn marker_spans(text: &str) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('[') {
        let start = pos + off;
        match MarkerScanner::new(text, start).scan() {
            Ok((_, len)) => {
                spans.push(start..start + len);
                pos = start + len;
            }
            Err(_) => pos = start + 1,
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> Segment {
        Segment::Text(s.into())
    }

    fn marker(x: f64, y: f64, yaw: f64) -> Segment {
        Segment::Marker(Marker::new(x, y, yaw))
    }

    #[test]
    fn text_then_marker() {
        let c = parse_command("Move to the main hall [x=14; y=3.2; yaw=1.26]").unwrap();
        assert_eq!(c.segments(), &[text("Move to the main hall"), marker(14.0, 3.2, 1.26)]);
        assert_eq!(render_command(&c), "Move to the main hall [x=14; y=3.2; yaw=1.26]");
    }

    #[test]
    fn interleaved_markers_and_referents() {
        let c = parse_command("[x=-9.15; y=4.316; yaw=2.168] the wall [x=1.26; y=7.61; yaw=-0.214] the table").unwrap();
        assert_eq!(
            c.segments(),
            &[marker(-9.15, 4.316, 2.168), text("the wall"), marker(1.26, 7.61, -0.214), text("the table")]
        );
        let refs = c.markers_with_referents();
        assert_eq!(refs[0].1, Some("the wall"));
        assert_eq!(refs[1].1, Some("the table"));
    }

    #[test]
    fn plain_text_has_no_markers() {
        let c = parse_command("Scan the area").unwrap();
        assert_eq!(c.segments(), &[text("Scan the area")]);
        assert_eq!(render_command(&c), "Scan the area");
    }

    #[test]
    fn space_after_semicolon_is_optional() {
        let a = parse_command("go [x=1;y=2;yaw=3]").unwrap();
        let b = parse_command("go [x=1; y=2; yaw=3]").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_marker_renders_plainly() {
        let c = MultimodalCommand::from_segments(vec![text("here"), marker(0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(render_command(&c), "here [x=0; y=0; yaw=0]");
    }

    #[test]
    fn malformed_markers_are_errors() {
        for (input, offset) in [
            ("go [x=1, y=2, yaw=3]", 3),
            ("go [x=1; y=2]", 3),
            ("[ yaw=1] go", 0),
            ("go [x=1.; y=2; yaw=3]", 3),
            ("go [x=1;  y=2; yaw=3]", 3),
            ("go [x=1e3; y=2; yaw=3]", 3),
        ] {
            match parse_command(input) {
                Err(CommandError::MalformedMarker { offset: o, .. }) => assert_eq!(o, offset, "{input}"),
                other => panic!("{input}: {other:?}"),
            }
        }
    }

    #[test]
    fn ordinary_brackets_are_text() {
        let c = parse_command("check [the] gauge").unwrap();
        assert_eq!(c.segments(), &[text("check [the] gauge")]);
    }

    #[test]
    fn marker_only_input_has_no_text() {
        assert_eq!(parse_command("[x=1; y=2; yaw=3]"), Err(CommandError::NoText));
        assert_eq!(parse_command("   "), Err(CommandError::NoText));
    }

    #[test]
    fn from_segments_rejects_text_that_would_become_a_marker() {
        let r = MultimodalCommand::from_segments(vec![text("[x=1; y=2; yaw=3] hi")]);
        assert!(matches!(r, Err(CommandError::InvalidSegments(_))));
    }

    #[test]
    fn spans_cover_markers() {
        let s = "a [x=1; y=2; yaw=3] b [x=4;y=5;yaw=6]";
        let spans = marker_spans(s);
        assert_eq!(spans.len(), 2);
        assert_eq!(&s[spans[0].clone()], "[x=1; y=2; yaw=3]");
        assert_eq!(&s[spans[1].clone()], "[x=4;y=5;yaw=6]");
    }
}
