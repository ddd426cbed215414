//! Seeded synthetic tasks producing `(source, target)` text pairs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const LOWER: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

/// Function templates for the python-like code task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeTemplate {
    Add,
    Sub,
    Mul,
    Max,
    Neg,
    Square,
    Len,
}

impl CodeTemplate {
    pub const ALL: [CodeTemplate; 7] = [
        CodeTemplate::Add,
        CodeTemplate::Sub,
        CodeTemplate::Mul,
        CodeTemplate::Max,
        CodeTemplate::Neg,
        CodeTemplate::Square,
        CodeTemplate::Len,
    ];

    fn keyword(self) -> &'static str {
        match self {
            CodeTemplate::Add => "add",
            CodeTemplate::Sub => "sub",
            CodeTemplate::Mul => "mul",
            CodeTemplate::Max => "max",
            CodeTemplate::Neg => "neg",
            CodeTemplate::Square => "sq",
            CodeTemplate::Len => "len",
        }
    }

    fn from_keyword(k: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.keyword() == k)
    }

    fn arity(self) -> usize {
        match self {
            CodeTemplate::Add | CodeTemplate::Sub | CodeTemplate::Mul | CodeTemplate::Max => 2,
            _ => 1,
        }
    }

    /// Canonical body expression.
    fn body(self, args: &[String]) -> String {
        match self {
            CodeTemplate::Add => format!("{}+{}", args[0], args[1]),
            CodeTemplate::Sub => format!("{}-{}", args[0], args[1]),
            CodeTemplate::Mul => format!("{}*{}", args[0], args[1]),
            CodeTemplate::Max => format!("max({},{})", args[0], args[1]),
            CodeTemplate::Neg => format!("-{}", args[0]),
            CodeTemplate::Square => format!("{0}*{0}", args[0]),
            CodeTemplate::Len => format!("len({})", args[0]),
        }
    }

    /// Every body expression that implements the template.
    fn accepted_bodies(self, args: &[String]) -> Vec<String> {
        let mut out = vec![self.body(args)];
        match self {
            CodeTemplate::Add => out.push(format!("{}+{}", args[1], args[0])),
            CodeTemplate::Mul => out.push(format!("{}*{}", args[1], args[0])),
            CodeTemplate::Max => out.push(format!("max({},{})", args[1], args[0])),
            CodeTemplate::Square => out.push(format!("{}**2", args[0])),
            CodeTemplate::Neg => out.push(format!("0-{}", args[0])),
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Copy {
        min_len: usize,
        max_len: usize,
    },
    Reverse {
        min_len: usize,
        max_len: usize,
    },
    /// `key` is a permutation of `a..=z`; target letter `i` is `key[source[i]]`.
    SubstitutionCipher {
        min_len: usize,
        max_len: usize,
        key: String,
    },
    PythonTemplate {
        templates: Vec<CodeTemplate>,
    },
}

/// A permutation of the lowercase alphabet drawn from `seed`.
pub fn cipher_key(seed: u64) -> String {
    let mut letters = LOWER.to_vec();
    letters.shuffle(&mut rng::stream(rng::derive(seed, "cipher-key"), 0));
    String::from_utf8(letters).expect("ascii")
}

fn random_word(r: &mut impl Rng, min: usize, max: usize) -> String {
    let n = r.random_range(min..=max);
    (0..n)
        .map(|_| LOWER[r.random_range(0..26)] as char)
        .collect()
}

impl TaskSpec {
    pub fn id(&self) -> &'static str {
        match self {
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::Reverse { .. } => "reverse",
            TaskSpec::SubstitutionCipher { .. } => "cipher",
            TaskSpec::PythonTemplate { .. } => "python_template",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSettings(m));
        match self {
            TaskSpec::Copy { min_len, max_len }
            | TaskSpec::Reverse { min_len, max_len }
            | TaskSpec::SubstitutionCipher {
                min_len, max_len, ..
            } => {
                if *min_len == 0 || min_len > max_len {
                    return bad(format!("invalid length range {min_len}..={max_len}"));
                }
            }
            TaskSpec::PythonTemplate { templates } => {
                if templates.is_empty() {
                    return bad("template set is empty".into());
                }
            }
        }
        if let TaskSpec::SubstitutionCipher { key, .. } = self {
            let mut k: Vec<u8> = key.bytes().collect();
            k.sort_unstable();
            if k != LOWER {
                return bad("cipher key must be a permutation of a..=z".into());
            }
        }
        Ok(())
    }

    /// Upper bounds on source and target length in characters.
    pub fn max_lens(&self) -> (usize, usize) {
        match self {
            TaskSpec::Copy { max_len, .. }
            | TaskSpec::Reverse { max_len, .. }
            | TaskSpec::SubstitutionCipher { max_len, .. } => (*max_len, *max_len),
            // "max abc x y" and "def abc(x,y):return max(x,y)"
            TaskSpec::PythonTemplate { .. } => (11, 28),
        }
    }

    /// Pair number `index` under `seed`.
    pub fn pair(&self, seed: u64, index: u64) -> (String, String) {
        let mut r = rng::stream(rng::derive(seed, self.id()), index);
        match self {
            TaskSpec::Copy { min_len, max_len } => {
                let s = random_word(&mut r, *min_len, *max_len);
                (s.clone(), s)
            }
            TaskSpec::Reverse { min_len, max_len } => {
                let s = random_word(&mut r, *min_len, *max_len);
                let t = s.chars().rev().collect();
                (s, t)
            }
            TaskSpec::SubstitutionCipher {
                min_len,
                max_len,
                key,
            } => {
                let s = random_word(&mut r, *min_len, *max_len);
                let t = encipher(key, &s);
                (s, t)
            }
            TaskSpec::PythonTemplate { templates } => {
                let tpl = templates[r.random_range(0..templates.len())];
                let name = random_word(&mut r, 1, 3);
                let mut pool = LOWER.to_vec();
                pool.shuffle(&mut r);
                let args: Vec<String> = pool[..tpl.arity()]
                    .iter()
                    .map(|&c| (c as char).to_string())
                    .collect();
                let source = format!("{} {} {}", tpl.keyword(), name, args.join(" "));
                let target = format!(
                    "def {}({}):return {}",
                    name,
                    args.join(","),
                    tpl.body(&args)
                );
                (source, target)
            }
        }
    }

    /// Checks a candidate against the source under the task's defining relation.
    /// For the code task this is structural: any accepted body for the requested
    /// template counts, not only the reference string.
    pub fn is_correct(&self, source: &str, candidate: &str) -> bool {
        match self {
            TaskSpec::Copy { .. } => candidate == source,
            TaskSpec::Reverse { .. } => candidate.chars().eq(source.chars().rev()),
            TaskSpec::SubstitutionCipher { key, .. } => candidate == encipher(key, source),
            TaskSpec::PythonTemplate { .. } => check_python_template(source, candidate),
        }
    }
}

pub fn encipher(key: &str, text: &str) -> String {
    let k = key.as_bytes();
    text.bytes()
        .map(|b| {
            if b.is_ascii_lowercase() {
                k[(b - b'a') as usize] as char
            } else {
                b as char
            }
        })
        .collect()
}

pub fn decipher(key: &str, text: &str) -> String {
    let mut inv = [0u8; 26];
    for (i, &c) in key.as_bytes().iter().enumerate() {
        inv[(c - b'a') as usize] = b'a' + i as u8;
    }
    text.bytes()
        .map(|b| {
            if b.is_ascii_lowercase() {
                inv[(b - b'a') as usize] as char
            } else {
                b as char
            }
        })
        .collect()
}

/// Template-conformance check: `candidate` must be `def NAME(ARGS):return BODY`
/// with the source's name and argument list, and a body implementing the
/// source's template.
pub fn check_python_template(source: &str, candidate: &str) -> bool {
    let mut parts = source.split(' ');
    let Some(tpl) = parts.next().and_then(CodeTemplate::from_keyword) else {
        return false;
    };
    let Some(name) = parts.next() else {
        return false;
    };
    let args: Vec<String> = parts.map(str::to_string).collect();
    if args.len() != tpl.arity() {
        return false;
    }
    let Some(rest) = candidate.strip_prefix("def ") else {
        return false;
    };
    let Some(rest) = rest.strip_prefix(name) else {
        return false;
    };
    let Some(rest) = rest.strip_prefix(&format!("({}):return ", args.join(","))) else {
        return false;
    };
    tpl.accepted_bodies(&args).iter().any(|b| b == rest)
}

/// `n` pairs for indices `0..n`.
pub fn generate_task_pairs(spec: &TaskSpec, seed: u64, n: usize) -> Vec<(String, String)> {
    (0..n as u64).map(|i| spec.pair(seed, i)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    source: String,
    target: String,
}

/// Writes pairs as JSON lines `{"source": ..., "target": ...}`.
pub fn write_pairs_jsonl(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (source, target) in pairs {
        let line = serde_json::to_string(&PairRecord {
            source: source.clone(),
            target: target.clone(),
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<(String, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        out.push((rec.source, rec.target));
    }
    Ok(out)
}
