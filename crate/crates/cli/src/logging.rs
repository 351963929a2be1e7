//! Line-oriented structured logs: `ts=… level=… msg="…" key=value …`.
//! Fields are written in the order given, so two runs with the same inputs
//! produce identical lines once the leading timestamp is stripped.

use std::fmt::Write as _;
use std::io::Write;

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "debug",
            Level::Info => "info",
            Level::Warn => "warn",
            Level::Error => "error",
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => {
            if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-/:+".contains(c)) {
                s.clone()
            } else {
                quote(s)
            }
        }
        other => other.to_string(),
    }
}

/// Formats one event without the timestamp prefix.
pub fn format_event(level: Level, message: &str, fields: &[(&str, Value)]) -> String {
    let mut s = format!("level={} msg={}", level.as_str(), quote(message));
    for (k, v) in fields {
        let _ = write!(s, " {k}={}", render_value(v));
    }
    s
}

/// Drops the leading `ts=` field of a log line, if any.
pub fn strip_timestamp(line: &str) -> &str {
    match line.strip_prefix("ts=") {
        Some(rest) => rest.split_once(' ').map_or("", |(_, tail)| tail),
        None => line,
    }
}

pub struct Logger {
    sinks: Vec<Box<dyn Write + Send>>,
    timestamps: bool,
    min_level: Level,
}

impl Logger {
    pub fn new(timestamps: bool) -> Self {
        Logger {
            sinks: Vec::new(),
            timestamps,
            min_level: Level::Info,
        }
    }

    pub fn to_stderr(mut self) -> Self {
        self.sinks.push(Box::new(std::io::stderr()));
        self
    }

    pub fn with_sink(mut self, w: Box<dyn Write + Send>) -> Self {
        self.sinks.push(w);
        self
    }

    pub fn add_sink(&mut self, w: Box<dyn Write + Send>) {
        self.sinks.push(w);
    }

    pub fn log_event(&mut self, level: Level, message: &str, fields: &[(&str, Value)]) {
        if level < self.min_level {
            return;
        }
        let body = format_event(level, message, fields);
        let line = if self.timestamps {
            format!(
                "ts={} {body}\n",
                chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
            )
        } else {
            format!("{body}\n")
        };
        for s in &mut self.sinks {
            let _ = s.write_all(line.as_bytes());
            let _ = s.flush();
        }
    }

    pub fn info(&mut self, message: &str, fields: &[(&str, Value)]) {
        self.log_event(Level::Info, message, fields);
    }

    pub fn error(&mut self, message: &str, fields: &[(&str, Value)]) {
        self.log_event(Level::Error, message, fields);
    }
}
