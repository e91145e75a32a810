//! Text serialization of networks.
//!
//! Format (UTF-8, line oriented):
//!
//! ```text
//! resnet v1 dim=<d> blocks=<N>
//! block u=[<hex>,...] b=<hex> v=[<hex>,...]
//! ...
//! out w=[<hex>,...] b=<hex>
//! ```
//!
//! Weights are written as C99 `%a` style hex floats so that the round trip is
//! bit exact.

use std::fmt;

use crate::net::{NetError, ResNet, ResidualBlock};

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ParseError {}

impl From<NetError> for ParseError {
    fn from(e: NetError) -> Self {
        ParseError { line: 0, msg: e.to_string() }
    }
}

/// Format a finite f64 in C99 `%a` style, e.g. `0x1.8p+1` for 3.0.
pub fn format_hex(v: f64) -> String {
    assert!(v.is_finite(), "only finite weights are serialized");
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & 0xf_ffff_ffff_ffff;
    if exp_bits == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        ('0', -1022i64) // subnormal
    } else {
        ('1', exp_bits - 1023)
    };
    let mut frac = format!("{mant:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{exp:+}")
    }
}

/// Parse a hex float of the form `[+-]0x<hex>[.<hex>]p[+-]<dec>`.
pub fn parse_hex(s: &str) -> Option<f64> {
    let s = s.trim();
    let (neg, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let s = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    let p = s.find(['p', 'P'])?;
    let (digits, exp_str) = (&s[..p], &s[p + 1..]);
    let exp: i64 = exp_str.parse().ok()?;
    let (int_part, frac_part) = match digits.find('.') {
        Some(dot) => (&digits[..dot], &digits[dot + 1..]),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let mut mant: u128 = 0;
    let mut frac_len = 0i64;
    for c in int_part.chars() {
        mant = mant.checked_mul(16)?.checked_add(c.to_digit(16)? as u128)?;
    }
    for c in frac_part.chars() {
        mant = mant.checked_mul(16)?.checked_add(c.to_digit(16)? as u128)?;
        frac_len += 1;
    }
    let v = scale_pow2(mant, exp - 4 * frac_len)?;
    Some(if neg { -v } else { v })
}

/// Compute `mant * 2^k` exactly (up to the final rounding into f64).
fn scale_pow2(mant: u128, k: i64) -> Option<f64> {
    if mant == 0 {
        return Some(0.0);
    }
    let mut v = mant as f64;
    let mut k = k;
    // Apply the exponent in normal-range chunks so intermediates stay exact.
    while k > 0 {
        let step = k.min(1000);
        v *= pow2(step as i32);
        if !v.is_finite() {
            return None;
        }
        k -= step;
    }
    while k < 0 {
        let step = (-k).min(1000);
        v *= pow2(-step as i32);
        k += step;
    }
    Some(v)
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

fn hex_list(vals: &[f64]) -> String {
    vals.iter().map(|v| format_hex(*v)).collect::<Vec<_>>().join(",")
}

pub fn serialize(net: &ResNet) -> String {
    let mut out = String::new();
    out.push_str(&format!("resnet v1 dim={} blocks={}\n", net.dim(), net.blocks().len()));
    for b in net.blocks() {
        out.push_str(&format!(
            "block u=[{}] b={} v=[{}]\n",
            hex_list(b.u_row()),
            format_hex(b.bias()),
            hex_list(b.v_col()),
        ));
    }
    out.push_str(&format!(
        "out w=[{}] b={}\n",
        hex_list(net.out_weights()),
        format_hex(net.out_bias()),
    ));
    out
}

fn err(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

fn field<'a>(line: &'a str, key: &str, lineno: usize) -> Result<&'a str, ParseError> {
    let pat = format!("{key}=");
    let start = line
        .find(&pat)
        .ok_or_else(|| err(lineno, format!("missing field {key}")))?
        + pat.len();
    let rest = &line[start..];
    let end = if rest.starts_with('[') {
        rest.find(']').ok_or_else(|| err(lineno, format!("unterminated list in field {key}")))? + 1
    } else {
        rest.find(' ').unwrap_or(rest.len())
    };
    Ok(&rest[..end])
}

fn parse_list(s: &str, lineno: usize) -> Result<Vec<f64>, ParseError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| err(lineno, "expected [..] list"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|tok| parse_hex(tok).ok_or_else(|| err(lineno, format!("bad hex float `{tok}`"))))
        .collect()
}

fn parse_scalar(s: &str, lineno: usize) -> Result<f64, ParseError> {
    parse_hex(s).ok_or_else(|| err(lineno, format!("bad hex float `{s}`")))
}

pub fn deserialize(text: &str) -> Result<ResNet, ParseError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (i0, header) = lines.next().ok_or_else(|| err(1, "empty document"))?;
    let l0 = i0 + 1;
    let dim: usize = field(header, "dim", l0)?
        .parse()
        .map_err(|_| err(l0, "bad dim value"))?;
    let nblocks: usize = field(header, "blocks", l0)?
        .parse()
        .map_err(|_| err(l0, "bad blocks value"))?;
    if !header.trim_start().starts_with("resnet v1") {
        return Err(err(l0, "expected `resnet v1` header"));
    }
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let (i, line) = lines
            .next()
            .ok_or_else(|| err(l0 + blocks.len() + 1, "unexpected end of document"))?;
        let ln = i + 1;
        if !line.trim_start().starts_with("block") {
            return Err(err(ln, "expected block line"));
        }
        let u = parse_list(field(line, "u", ln)?, ln)?;
        let b = parse_scalar(field(line, "b", ln)?, ln)?;
        let v = parse_list(field(line, "v", ln)?, ln)?;
        let block = ResidualBlock::new(u, b, v).map_err(|e| err(ln, e.to_string()))?;
        if block.dim() != dim {
            return Err(err(ln, format!("block dimension {} != header dim {dim}", block.dim())));
        }
        blocks.push(block);
    }
    let (i, line) = lines.next().ok_or_else(|| err(l0 + nblocks + 1, "missing out line"))?;
    let ln = i + 1;
    if !line.trim_start().starts_with("out") {
        return Err(err(ln, "expected out line"));
    }
    let w = parse_list(field(line, "w", ln)?, ln)?;
    let b = parse_scalar(field(line, "b", ln)?, ln)?;
    if let Some((i, _)) = lines.next() {
        return Err(err(i + 1, "trailing content after out line"));
    }
    ResNet::new(dim, blocks, w, b).map_err(|e| err(ln, e.to_string()))
}
