//! Parser and executor for einops-style axis rearrangement patterns.
//!
//! The grammar is deliberately small: each side of `->` is a list of
//! whitespace-separated items, and each item is an identifier or a
//! parenthesized list of identifiers. Only permutation and regrouping are
//! supported; both sides must name the same axes.
//!
//! ```
//! use std::collections::BTreeMap;
//! use raftmlp::rearrange::RearrangeSpec;
//! use raftmlp::tensor::Tensor;
//!
//! let bindings = BTreeMap::from([("h".to_string(), 2), ("w".to_string(), 3), ("r".to_string(), 2)]);
//! let spec = RearrangeSpec::parse("b (h w) (r o) -> b (o w) (r h)", &bindings).unwrap();
//! let x = Tensor::<f64>::zeros([1, 6, 8]).unwrap();
//! assert_eq!(spec.apply(&x).unwrap().shape(), &[1, 12, 4]);
//! ```
//!
//! A composite `(r o)` decomposes its index as `r_idx * len(o) + o_idx`:
//! the leftmost member is the slowest-varying factor.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, Float, Tensor};

/// One top-level item of a pattern side.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AxisItem {
    Axis(String),
    Group(Vec<String>),
}

impl AxisItem {
    pub fn names(&self) -> &[String] {
        match self {
            AxisItem::Axis(n) => std::slice::from_ref(n),
            AxisItem::Group(ns) => ns,
        }
    }
}

impl fmt::Display for AxisItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisItem::Axis(n) => f.write_str(n),
            AxisItem::Group(ns) => write!(f, "({})", ns.join(" ")),
        }
    }
}

/// A validated rearrangement program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RearrangeSpec {
    lhs: Vec<AxisItem>,
    rhs: Vec<AxisItem>,
    bindings: BTreeMap<String, usize>,
}

/// Axis name with the column it started at, for error reporting.
struct Token<'a> {
    name: &'a str,
    pos: usize,
}

struct Side<'a> {
    items: Vec<AxisItem>,
    tokens: Vec<Token<'a>>,
}

fn pattern_err(pos: usize, msg: impl Into<String>) -> Error {
    Error::Pattern { pos, msg: msg.into() }
}

fn parse_side(src: &str, offset: usize) -> Result<Side<'_>> {
    let bytes = src.as_bytes();
    let mut items = Vec::new();
    let mut tokens = Vec::new();
    let mut group: Option<(usize, Vec<String>)> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' => i += 1,
            b'(' => {
                if group.is_some() {
                    return Err(pattern_err(offset + i, "nested parentheses"));
                }
                group = Some((offset + i, Vec::new()));
                i += 1;
            }
            b')' => match group.take() {
                Some((open, members)) => {
                    if members.is_empty() {
                        return Err(pattern_err(open, "empty group"));
                    }
                    items.push(AxisItem::Group(members));
                    i += 1;
                }
                None => return Err(pattern_err(offset + i, "unmatched ')'")),
            },
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let name = &src[start..i];
                tokens.push(Token {
                    name,
                    pos: offset + start,
                });
                match group.as_mut() {
                    Some((_, members)) => members.push(name.to_string()),
                    None => items.push(AxisItem::Axis(name.to_string())),
                }
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(pattern_err(offset + i, format!("unexpected character '{ch}'")));
            }
        }
    }
    if let Some((open, _)) = group {
        return Err(pattern_err(open, "unclosed '('"));
    }
    if items.is_empty() {
        return Err(pattern_err(offset, "empty side"));
    }
    Ok(Side { items, tokens })
}

fn check_unique(side: &Side<'_>, which: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for t in &side.tokens {
        if !seen.insert(t.name) {
            return Err(pattern_err(
                t.pos,
                format!("axis `{}` appears twice on the {which} side", t.name),
            ));
        }
    }
    Ok(())
}

impl RearrangeSpec {
    /// Parses `pattern`, with `bindings` supplying lengths of axes that
    /// cannot be inferred from an input shape.
    pub fn parse(pattern: &str, bindings: &BTreeMap<String, usize>) -> Result<Self> {
        let arrow = pattern.find("->").ok_or_else(|| pattern_err(0, "missing '->'"))?;
        if let Some(second) = pattern[arrow + 2..].find("->") {
            return Err(pattern_err(arrow + 2 + second, "more than one '->'"));
        }
        let lhs = parse_side(&pattern[..arrow], 0)?;
        let rhs = parse_side(&pattern[arrow + 2..], arrow + 2)?;
        check_unique(&lhs, "left")?;
        check_unique(&rhs, "right")?;

        let lhs_names: HashSet<&str> = lhs.tokens.iter().map(|t| t.name).collect();
        let rhs_names: HashSet<&str> = rhs.tokens.iter().map(|t| t.name).collect();
        if let Some(t) = rhs.tokens.iter().find(|t| !lhs_names.contains(t.name)) {
            return Err(pattern_err(
                t.pos,
                format!("axis `{}` is unknown on the left side", t.name),
            ));
        }
        if let Some(t) = lhs.tokens.iter().find(|t| !rhs_names.contains(t.name)) {
            return Err(pattern_err(
                t.pos,
                format!("axis `{}` is missing from the right side", t.name),
            ));
        }
        for (name, &len) in bindings {
            if !lhs_names.contains(name.as_str()) {
                return Err(Error::Rearrange(format!(
                    "binding for `{name}` which does not occur in the pattern"
                )));
            }
            if len == 0 {
                return Err(Error::Rearrange(format!("binding `{name}` must be positive")));
            }
        }
        let spec = RearrangeSpec {
            lhs: lhs.items,
            rhs: rhs.items,
            bindings: bindings.clone(),
        };
        for item in &spec.lhs {
            if let AxisItem::Group(members) = item {
                let unbound: Vec<&String> = members.iter().filter(|m| !spec.bindings.contains_key(*m)).collect();
                if unbound.len() > 1 {
                    return Err(Error::Rearrange(format!(
                        "group {item} has {} unbound axes ({}); bind all but one",
                        unbound.len(),
                        unbound.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// Convenience wrapper taking bindings as `(name, len)` pairs.
    pub fn with_bindings(pattern: &str, bindings: &[(&str, usize)]) -> Result<Self> {
        let map = bindings.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        Self::parse(pattern, &map)
    }

    pub fn lhs(&self) -> &[AxisItem] {
        &self.lhs
    }

    pub fn rhs(&self) -> &[AxisItem] {
        &self.rhs
    }

    pub fn bindings(&self) -> &BTreeMap<String, usize> {
        &self.bindings
    }

    /// The mirror program, mapping outputs of `self` back to its inputs.
    ///
    /// Bindings carry over unchanged. If the original relied on inferring a
    /// bare axis that now sits in a composite next to another unbound axis,
    /// the inverted spec cannot infer it from a shape alone; use
    /// [`ResolvedRearrange::inverse`] when a concrete shape is at hand.
    pub fn invert(&self) -> RearrangeSpec {
        RearrangeSpec {
            lhs: self.rhs.clone(),
            rhs: self.lhs.clone(),
            bindings: self.bindings.clone(),
        }
    }

    /// Fixes every axis length for a concrete input shape.
    pub fn resolve(&self, shape: &[usize]) -> Result<ResolvedRearrange> {
        if shape.len() != self.lhs.len() {
            return Err(Error::Rearrange(format!(
                "pattern `{self}` expects rank {}, input has shape {shape:?}",
                self.lhs.len()
            )));
        }
        let mut lengths: HashMap<&str, usize> = HashMap::new();
        let mut elem_names: Vec<&str> = Vec::new();
        for (item, &dim) in self.lhs.iter().zip(shape) {
            let members = item.names();
            let known: usize = members.iter().filter_map(|m| self.bindings.get(m)).product();
            let unbound: Vec<&String> = members.iter().filter(|m| !self.bindings.contains_key(*m)).collect();
            match unbound.as_slice() {
                [] if known != dim => {
                    return Err(Error::Rearrange(format!(
                        "axis {item} has length {dim}, bindings give {known}"
                    )))
                }
                [] => {}
                [free] => {
                    if dim % known != 0 {
                        return Err(Error::Rearrange(format!(
                            "axis {item} of length {dim} is not divisible by {known}"
                        )));
                    }
                    lengths.insert(free.as_str(), dim / known);
                }
                _ => {
                    return Err(Error::Rearrange(format!(
                        "group {item} has several unbound axes and cannot be inferred"
                    )))
                }
            }
            for m in members {
                if let Some(&b) = self.bindings.get(m) {
                    lengths.insert(m.as_str(), b);
                }
                elem_names.push(m.as_str());
            }
        }
        let in_elem: Vec<usize> = elem_names.iter().map(|n| lengths[n]).collect();
        let position: HashMap<&str, usize> = elem_names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let perm: Vec<usize> = self
            .rhs
            .iter()
            .flat_map(|item| item.names().iter().map(|n| position[n.as_str()]))
            .collect();
        let out_shape: Vec<usize> = self
            .rhs
            .iter()
            .map(|item| item.names().iter().map(|n| lengths[n.as_str()]).product())
            .collect();
        Ok(ResolvedRearrange {
            in_shape: shape.to_vec(),
            in_elem,
            perm,
            out_shape,
        })
    }

    /// Rearranges `t` according to this spec.
    pub fn apply<T: Float>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.resolve(t.shape())?.apply(t)
    }
}

impl fmt::Display for RearrangeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |items: &[AxisItem]| items.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        write!(f, "{} -> {}", side(&self.lhs), side(&self.rhs))
    }
}

/// A rearrangement with every axis length fixed: a reshape into elementary
/// axes, an axis permutation, and a reshape into output groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedRearrange {
    in_shape: Vec<usize>,
    in_elem: Vec<usize>,
    perm: Vec<usize>,
    out_shape: Vec<usize>,
}

impl ResolvedRearrange {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply<T: Float>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.shape() != self.in_shape.as_slice() {
            return Err(Error::shape("rearrange", t.shape(), &self.in_shape));
        }
        let elem = t.reshape(self.in_elem.clone())?;
        tensor::permute(&elem, &self.perm).reshape(self.out_shape.clone())
    }

    /// The exact inverse for the resolved shapes; always well defined.
    pub fn inverse(&self) -> ResolvedRearrange {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        ResolvedRearrange {
            in_shape: self.out_shape.clone(),
            in_elem: self.perm.iter().map(|&p| self.in_elem[p]).collect(),
            perm: inv,
            out_shape: self.in_shape.clone(),
        }
    }
}
