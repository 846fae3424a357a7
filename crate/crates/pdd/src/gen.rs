//! Deterministic request generation from structural schemas.
//!
//! Behavioral validation must be replayable: identical (seed, property,
//! case index) always yields identical inputs, on any platform and in any
//! scheduling order. The generator therefore uses a fixed SplitMix64 stream
//! seeded per case rather than a general-purpose RNG whose stream could
//! drift across releases.
//!
//! Strings come from a bounded printable alphabet, integers and numbers are
//! uniform within declared bounds (unbounded sides clipped to ±10⁹), enum
//! values uniform. Optional object fields are included with probability 1/2.

use serde_json::json;

use crate::canon::Doc;
use crate::schema::{SchemaKind, SchemaNode};

/// Clip for unbounded numeric sides.
pub const NUMERIC_CLIP: f64 = 1.0e9;

const STRING_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-";
const MAX_STRING_LEN: u64 = 16;

/// SplitMix64: tiny, seedable, stable across platforms.
#[derive(Debug, Clone)]
pub struct CaseRng {
    state: u64,
}

impl CaseRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Per-case stream derived from the run seed, the property name, and
    /// the case index. This derivation is part of the replay contract.
    pub fn for_case(run_seed: u64, property: &str, case_index: u64) -> Self {
        let mut seed = run_seed ^ fnv1a64(property.as_bytes());
        seed = seed.wrapping_add(case_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Self::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    pub fn chance(&mut self, one_in: u64) -> bool {
        self.below(one_in) == 0
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64;
        if span == u64::MAX {
            return self.next_u64() as i64;
        }
        lo + self.below(span + 1) as i64
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GenError {
    #[error("cannot generate a value for required field {field}: pattern {pattern:?} is outside the supported subset")]
    UnsupportedPattern { field: String, pattern: String },
    #[error("enum node at {0} declares no values")]
    EmptyEnum(String),
}

/// Generate one document satisfying the node.
pub fn generate(node: &SchemaNode, rng: &mut CaseRng) -> Result<Doc, GenError> {
    generate_at(node, rng, "")
}

fn generate_at(node: &SchemaNode, rng: &mut CaseRng, path: &str) -> Result<Doc, GenError> {
    Ok(match node.kind {
        SchemaKind::Object => {
            let mut map = serde_json::Map::new();
            // Deterministic field order: properties is a BTreeMap.
            for (name, child) in &node.properties {
                let required = node.required.iter().any(|r| r == name);
                let child_path = format!("{path}/{name}");
                if required {
                    map.insert(name.clone(), generate_at(child, rng, &child_path)?);
                } else {
                    // Optional fields toggle with probability 1/2; a field
                    // whose pattern we cannot sample is simply omitted.
                    let include = rng.chance(2);
                    match generate_at(child, rng, &child_path) {
                        Ok(value) if include => {
                            map.insert(name.clone(), value);
                        }
                        Ok(_) => {}
                        Err(GenError::UnsupportedPattern { .. }) => {}
                        Err(other) => return Err(other),
                    }
                }
            }
            Doc::Object(map)
        }
        SchemaKind::String => match &node.pattern {
            None => {
                let len = 1 + rng.below(MAX_STRING_LEN);
                let s: String = (0..len)
                    .map(|_| STRING_ALPHABET[rng.below(STRING_ALPHABET.len() as u64) as usize] as char)
                    .collect();
                Doc::String(s)
            }
            Some(pattern) => Doc::String(sample_pattern(pattern, rng).ok_or_else(|| {
                GenError::UnsupportedPattern {
                    field: path.to_string(),
                    pattern: pattern.clone(),
                }
            })?),
        },
        SchemaKind::Integer => {
            let lo = node.minimum.unwrap_or(-NUMERIC_CLIP).max(-NUMERIC_CLIP) as i64;
            let hi = node.maximum.unwrap_or(NUMERIC_CLIP).min(NUMERIC_CLIP) as i64;
            json!(rng.int_in(lo.min(hi), hi.max(lo)))
        }
        SchemaKind::Number => {
            let lo = node.minimum.unwrap_or(-NUMERIC_CLIP).max(-NUMERIC_CLIP);
            let hi = node.maximum.unwrap_or(NUMERIC_CLIP).min(NUMERIC_CLIP);
            // Two decimal places keeps generated decimals canonical-stable
            // while still exploring the range.
            let v = lo + (hi - lo) * rng.unit();
            json!((v * 100.0).round() / 100.0)
        }
        SchemaKind::Enum => {
            if node.enum_values.is_empty() {
                return Err(GenError::EmptyEnum(path.to_string()));
            }
            let i = rng.below(node.enum_values.len() as u64) as usize;
            Doc::String(node.enum_values[i].clone())
        }
    })
}

/// Sample a string matching a small anchored pattern subset: literals,
/// character classes, and `{n}` repetition, e.g. `^[A-Z]{2}$`.
///
/// Returns `None` for patterns outside the subset; validation still uses
/// the full regex engine.
pub fn sample_pattern(pattern: &str, rng: &mut CaseRng) -> Option<String> {
    let inner = pattern.strip_prefix('^')?.strip_suffix('$')?;
    let bytes = inner.as_bytes();
    let mut out = String::new();
    let mut i = 0;
    while i < bytes.len() {
        let (choices, next) = match bytes[i] {
            b'[' => {
                let end = inner[i..].find(']')? + i;
                let class = expand_class(&inner[i + 1..end])?;
                (class, end + 1)
            }
            b'\\' => {
                let c = *bytes.get(i + 1)? as char;
                (vec![c], i + 2)
            }
            b'.' | b'*' | b'+' | b'?' | b'(' | b')' | b'|' => return None,
            c => (vec![c as char], i + 1),
        };
        let mut count = 1u64;
        let mut after = next;
        if bytes.get(next) == Some(&b'{') {
            let end = inner[next..].find('}')? + next;
            count = inner[next + 1..end].parse().ok()?;
            after = end + 1;
        }
        for _ in 0..count {
            out.push(choices[rng.below(choices.len() as u64) as usize]);
        }
        i = after;
    }
    Some(out)
}

fn expand_class(class: &str) -> Option<Vec<char>> {
    let chars: Vec<char> = class.chars().collect();
    if chars.is_empty() || chars[0] == '^' {
        return None;
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if i + 2 < chars.len() && chars[i + 1] == '-' {
            let (lo, hi) = (chars[i] as u32, chars[i + 2] as u32);
            if lo > hi {
                return None;
            }
            for c in lo..=hi {
                out.push(char::from_u32(c)?);
            }
            i += 3;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}
