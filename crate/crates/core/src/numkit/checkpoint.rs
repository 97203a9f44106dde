//! Plain-text parameter checkpoints.
//!
//! ```text
//! divdec-checkpoint 1
//! meta <key> <value>
//! param <name> <rows> <cols>
//! <rows*cols values, space separated>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &str = "divdec-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(store: ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            store,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint meta `{key}` is not a count")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint meta `{key}` is not a number")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint missing meta `{key}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for p in self.store.params() {
            let (r, c) = p.value.shape();
            let _ = writeln!(out, "param {} {r} {c}", p.name);
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, header)) if header == format!("{MAGIC} {VERSION}") => {}
            Some((n, _)) => return Err(Error::parse(path, n, "unsupported checkpoint header")),
            None => return Err(Error::parse(path, 1, "empty checkpoint")),
        }
        let mut ckpt = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(path, n, "meta line needs key and value"))?;
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                Some("param") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    if fields.len() != 3 {
                        return Err(Error::parse(path, n, "param line needs name rows cols"));
                    }
                    let rows: usize = fields[1]
                        .parse()
                        .map_err(|_| Error::parse(path, n, "bad row count"))?;
                    let cols: usize = fields[2]
                        .parse()
                        .map_err(|_| Error::parse(path, n, "bad column count"))?;
                    let (vn, vline) = lines
                        .next()
                        .ok_or_else(|| Error::parse(path, n + 1, "missing parameter values"))?;
                    let values = if rows * cols == 0 {
                        Vec::new()
                    } else {
                        vline
                            .split(' ')
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::parse(path, vn, "bad parameter value"))?
                    };
                    let m = Matrix::from_vec(rows, cols, values)
                        .map_err(|e| Error::parse(path, vn, e.to_string()))?;
                    ckpt.store
                        .add(fields[0], m)
                        .map_err(|e| Error::parse(path, n, e.to_string()))?;
                }
                _ => return Err(Error::parse(path, n, "unrecognised line")),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.add("emb", Matrix::uniform(5, 3, 0.3, &mut rng)).unwrap();
        s.add("bias", Matrix::from_vec(1, 2, vec![1e-300, -0.1]).unwrap())
            .unwrap();
        s.add("empty", Matrix::zeros(4, 0)).unwrap();
        let ckpt = Checkpoint::new(s).with_meta("hidden", 3).with_meta("kind", "test");
        let back = Checkpoint::from_text(&ckpt.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for (a, b) in back.store.params().iter().zip(ckpt.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.meta_usize("hidden").unwrap(), 3);
    }

    #[test]
    fn bad_value_reports_line() {
        let text = "divdec-checkpoint 1\nparam w 1 2\n0.5 nope\n";
        match Checkpoint::from_text(text, Path::new("x")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
