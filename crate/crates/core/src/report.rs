//! Report text helpers shared by the CLI: deterministic number formatting
//! (12 significant digits throughout) and simple key/value and CSV writers.

use std::fmt::Write as _;

/// Format with 12 significant digits, choosing fixed or exponent notation the
/// way `%.12g` would. Pure function of the bit pattern.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-4..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        trim_zeros(&fixed)
    } else {
        let e = format!("{:.*e}", 11, x);
        trim_exp_zeros(&e)
    };
    s
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0');
    t.trim_end_matches('.').to_string()
}

fn trim_exp_zeros(s: &str) -> String {
    match s.split_once('e') {
        Some((mant, exp)) => format!("{}e{}", trim_zeros(mant), exp),
        None => s.to_string(),
    }
}

/// Accumulates `key: value` lines.
#[derive(Debug, Default)]
pub struct KvReport {
    out: String,
}

impl KvReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn str(&mut self, key: &str, value: &str) -> &mut Self {
        let _ = writeln!(self.out, "{key}: {value}");
        self
    }

    pub fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.str(key, &fmt_sig(value))
    }

    pub fn int(&mut self, key: &str, value: u64) -> &mut Self {
        self.str(key, &value.to_string())
    }

    pub fn blank(&mut self) -> &mut Self {
        self.out.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Accumulates comma-separated rows; no quoting (fields never contain commas).
#[derive(Debug, Default)]
pub struct Csv {
    out: String,
}

impl Csv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&mut self, fields: &[String]) -> &mut Self {
        let _ = writeln!(self.out, "{}", fields.join(","));
        self
    }

    pub fn header(&mut self, fields: &[&str]) -> &mut Self {
        let owned: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
        self.row(&owned)
    }

    pub fn finish(self) -> String {
        self.out
    }
}
