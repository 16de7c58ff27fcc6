use std::fmt::{Display, Write as _};

/// Line-oriented report: `key=value` lines with `#` comments.
#[derive(Debug, Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, line: impl Display) -> &mut Self {
        let _ = writeln!(self.text, "# {line}");
        self
    }

    pub fn kv(&mut self, key: impl Display, value: impl Display) -> &mut Self {
        let _ = writeln!(self.text, "{key}={value}");
        self
    }

    pub fn raw(&mut self, text: &str) -> &mut Self {
        self.text.push_str(text);
        if !text.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Parses a report back into its `key=value` pairs, in order.
pub fn parse_pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Fixed-precision float formatting shared by all reports.
pub fn fixed(x: f64) -> String {
    format!("{x:.6}")
}
