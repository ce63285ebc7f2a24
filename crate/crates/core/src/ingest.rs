//! Raw log lines to ordered, structured records.
//!
//! Header layouts follow the Loghub convention: a fixed sequence of
//! whitespace (or delimiter) separated header fields followed by the free
//! text content. Lines that do not fit the layout are kept whole as the
//! message and counted as unmatched.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token substituted for purely numeric runs.
pub const NUM_TOKEN: &str = "<num>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub index: usize,
    /// Milliseconds since the Unix epoch, when the header carried a parseable timestamp.
    pub timestamp: Option<i64>,
    pub level: Option<String>,
    pub source: Option<String>,
    pub message: String,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub matched: usize,
    pub unmatched: usize,
    pub blank: usize,
}

impl ParseStats {
    pub fn total(&self) -> usize {
        self.matched + self.unmatched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub records: Vec<LogRecord>,
    pub format_id: String,
    pub stats: ParseStats,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Role of one header slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Part of the timestamp; all such slots are joined with a space and
    /// parsed with [`HeaderFormat::timestamp`].
    Time,
    Level,
    Source,
    /// The remainder of the line. Must be the last slot.
    Message,
    /// Captured but discarded (pids, thread ids, ...).
    Skip,
}

impl Field {
    fn from_name(name: &str) -> Field {
        match name {
            "date" | "time" | "timestamp" => Field::Time,
            "level" => Field::Level,
            "source" | "component" => Field::Source,
            "message" | "content" => Field::Message,
            _ => Field::Skip,
        }
    }
}

/// Delimiter/field-order description of a log header, as declared under
/// `formats.<name>` in the run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderFormat {
    /// Field names in line order, e.g. `["date", "time", "level", "source", "message"]`.
    pub fields: Vec<String>,
    /// chrono format string for the joined time fields.
    #[serde(default)]
    pub timestamp: Option<String>,
    /// Single-character delimiter; whitespace runs when absent.
    #[serde(default)]
    pub delimiter: Option<char>,
}

impl HeaderFormat {
    /// `2024-01-01 00:00:00 INFO svc1 message...`
    pub fn standard() -> Self {
        HeaderFormat {
            fields: ["date", "time", "level", "source", "message"]
                .map(String::from)
                .to_vec(),
            timestamp: Some("%Y-%m-%d %H:%M:%S".into()),
            delimiter: None,
        }
    }

    /// Loghub HDFS: `081109 203615 148 INFO dfs.DataNode$PacketResponder: message...`
    pub fn hdfs() -> Self {
        HeaderFormat {
            fields: ["date", "time", "pid", "level", "source", "message"]
                .map(String::from)
                .to_vec(),
            timestamp: Some("%y%m%d %H%M%S".into()),
            delimiter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let roles: Vec<Field> = self.fields.iter().map(|f| Field::from_name(f)).collect();
        match roles.iter().position(|r| *r == Field::Message) {
            Some(p) if p + 1 == roles.len() => {}
            Some(_) => return Err(Error::Config("`message` must be the last header field".into())),
            None => return Err(Error::Config("header format has no `message` field".into())),
        }
        if roles.contains(&Field::Time) && self.timestamp.is_none() {
            return Err(Error::Config(
                "header format has time fields but no `timestamp` pattern".into(),
            ));
        }
        Ok(())
    }

    fn roles(&self) -> impl Iterator<Item = Field> + '_ {
        self.fields.iter().map(|f| Field::from_name(f))
    }
}

/// Splits off `n - 1` leading fields and returns them plus the remainder.
fn split_header(line: &str, n: usize, delim: Option<char>) -> Option<Vec<&str>> {
    let mut parts = Vec::with_capacity(n);
    let mut rest = line;
    for _ in 0..n.saturating_sub(1) {
        rest = match delim {
            None => rest.trim_start(),
            Some(_) => rest,
        };
        let end = match delim {
            None => rest.find(char::is_whitespace)?,
            Some(d) => rest.find(d)?,
        };
        if end == 0 {
            return None;
        }
        parts.push(&rest[..end]);
        let skip = rest[end..].chars().next().map_or(0, char::len_utf8);
        rest = &rest[end + skip..];
    }
    let rest = match delim {
        None => rest.trim_start(),
        Some(_) => rest,
    };
    parts.push(rest);
    Some(parts)
}

/// Timestamp, level, component and message of one parsed line.
type Header = (Option<i64>, Option<String>, Option<String>, String);

fn try_parse(raw: &str, format: &HeaderFormat) -> Option<Header> {
    let parts = split_header(raw, format.fields.len(), format.delimiter)?;
    let mut time_parts = Vec::new();
    let mut level = None;
    let mut source = None;
    let mut message = String::new();
    for (role, part) in format.roles().zip(parts) {
        match role {
            Field::Time => time_parts.push(part),
            Field::Level => level = Some(part.to_string()),
            Field::Source => source = Some(part.trim_end_matches(':').to_string()),
            Field::Message => message = part.to_string(),
            Field::Skip => {}
        }
    }
    let timestamp = match (&format.timestamp, time_parts.is_empty()) {
        (Some(pattern), false) => {
            let joined = time_parts.join(" ");
            let ts = NaiveDateTime::parse_from_str(&joined, pattern).ok()?;
            Some(ts.and_utc().timestamp_millis())
        }
        _ => None,
    };
    Some((timestamp, level, source, message))
}

/// Parses a single line. Returns the record and whether the header matched.
pub fn parse_line(raw: &str, format: &HeaderFormat, index: usize) -> (LogRecord, bool) {
    let raw = raw.strip_suffix('\n').unwrap_or(raw);
    let raw = raw.strip_suffix('\r').unwrap_or(raw);
    match try_parse(raw, format) {
        Some((timestamp, level, source, message)) => (
            LogRecord {
                index,
                timestamp,
                level,
                source,
                message,
                raw: raw.to_string(),
            },
            true,
        ),
        None => (
            LogRecord {
                index,
                timestamp: None,
                level: None,
                source: None,
                message: raw.to_string(),
                raw: raw.to_string(),
            },
            false,
        ),
    }
}

/// Stateful line parser that assigns contiguous indices and keeps match counters.
#[derive(Debug, Clone)]
pub struct LineParser<'f> {
    format: &'f HeaderFormat,
    stats: ParseStats,
    next_index: usize,
}

impl<'f> LineParser<'f> {
    pub fn new(format: &'f HeaderFormat) -> Self {
        LineParser {
            format,
            stats: ParseStats::default(),
            next_index: 0,
        }
    }

    /// Returns `None` (and counts a blank) for whitespace-only lines.
    pub fn push(&mut self, raw: &str) -> Option<LogRecord> {
        if raw.trim().is_empty() {
            self.stats.blank += 1;
            return None;
        }
        let (record, matched) = parse_line(raw, self.format, self.next_index);
        self.next_index += 1;
        if matched {
            self.stats.matched += 1;
        } else {
            self.stats.unmatched += 1;
        }
        Some(record)
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }
}

/// Parses in-memory text into a stream. `origin` only labels errors.
pub fn parse_text(text: &str, format: &HeaderFormat, format_id: &str, origin: &Path) -> Result<EventStream> {
    let mut parser = LineParser::new(format);
    let records: Vec<LogRecord> = text.lines().filter_map(|l| parser.push(l)).collect();
    if records.is_empty() {
        return Err(Error::EmptyCorpus(origin.to_path_buf()));
    }
    Ok(EventStream {
        records,
        format_id: format_id.to_string(),
        stats: parser.stats(),
    })
}

pub fn load_corpus(path: &Path, format: &HeaderFormat, format_id: &str) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    parse_text(&text, format, format_id, path)
}

/// Loads several files concurrently; each file is parsed sequentially.
pub fn load_corpora(paths: &[PathBuf], format: &HeaderFormat, format_id: &str) -> Result<Vec<EventStream>> {
    paths
        .par_iter()
        .map(|p| load_corpus(p, format, format_id))
        .collect()
}

pub fn mask_token(token: &str) -> &str {
    if !token.is_empty() && token.chars().all(|c| c.is_ascii_digit()) {
        NUM_TOKEN
    } else {
        token
    }
}

/// Lowercased alphanumeric runs, numbers masked as [`NUM_TOKEN`].
pub fn tokenize(message: &str) -> Vec<String> {
    message
        .split(|c: char| !c.is_alphanumeric())
        .filter(|run| !run.is_empty())
        .map(|run| mask_token(&run.to_lowercase()).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_standard_header() {
        let (r, matched) = parse_line("2024-01-01 00:00:00 INFO svc1 started", &HeaderFormat::standard(), 0);
        assert!(matched);
        assert_eq!(r.level.as_deref(), Some("INFO"));
        assert_eq!(r.source.as_deref(), Some("svc1"));
        assert_eq!(r.message, "started");
        assert_eq!(r.timestamp, Some(1_704_067_200_000));
        assert_eq!(r.raw, "2024-01-01 00:00:00 INFO svc1 started");
    }

    #[test]
    fn garbage_falls_back_to_message() {
        for fmt in [HeaderFormat::standard(), HeaderFormat::hdfs()] {
            let (r, matched) = parse_line("garbage ###", &fmt, 3);
            assert!(!matched);
            assert_eq!(r.message, "garbage ###");
            assert_eq!(r.level, None);
            assert_eq!(r.source, None);
            assert_eq!(r.timestamp, None);
            assert_eq!(r.index, 3);
        }
    }

    #[test]
    fn bad_timestamp_is_unmatched() {
        let (_, matched) = parse_line("yesterday noon INFO svc1 started", &HeaderFormat::standard(), 0);
        assert!(!matched);
    }

    #[test]
    fn parses_hdfs_header() {
        let line = "081109 203615 148 INFO dfs.DataNode$PacketResponder: PacketResponder 1 for block blk_38865049064139660 terminating";
        let (r, matched) = parse_line(line, &HeaderFormat::hdfs(), 0);
        assert!(matched);
        assert_eq!(r.source.as_deref(), Some("dfs.DataNode$PacketResponder"));
        assert_eq!(r.message, "PacketResponder 1 for block blk_38865049064139660 terminating");
    }

    #[test]
    fn custom_delimiter() {
        let fmt = HeaderFormat {
            fields: ["level", "source", "message"].map(String::from).to_vec(),
            timestamp: None,
            delimiter: Some('|'),
        };
        fmt.validate().unwrap();
        let (r, matched) = parse_line("WARN|db|slow query | 200ms", &fmt, 0);
        assert!(matched);
        assert_eq!(r.message, "slow query | 200ms");
    }

    #[test]
    fn format_validation() {
        let mut fmt = HeaderFormat::standard();
        fmt.fields.swap(3, 4);
        assert!(matches!(fmt.validate(), Err(Error::Config(_))));
        let mut fmt = HeaderFormat::standard();
        fmt.timestamp = None;
        assert!(fmt.validate().is_err());
    }

    #[test]
    fn indices_are_contiguous() {
        let text = "2024-01-01 00:00:00 INFO a x\n\n2024-01-01 00:00:01 INFO a y\nnoise\n";
        let s = parse_text(text, &HeaderFormat::standard(), "standard", Path::new("mem")).unwrap();
        let idx: Vec<usize> = s.records.iter().map(|r| r.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(s.stats, ParseStats { matched: 2, unmatched: 1, blank: 1 });
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("Failed to open /var/log/x.log (err=13)"),
            ["failed", "to", "open", "var", "log", "x", "log", "err", "<num>"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("ERROR ERROR"), ["error", "error"]);
        assert_eq!(tokenize("node-17 x86"), ["node", "<num>", "x86"]);
    }
}
