//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SCANCKPT"  u32 version
//! u64 len      key=value text block (UTF-8, one pair per line)
//! u32 count    sections, each: u32 len + name, then a tensor table
//! tensor table: u32 count, then per tensor
//!               u32 len + name, u32 rank, u64 dims[rank], f64 values
//! ```
//!
//! Sections are `params`, `adam.m`, `adam.v` and, for GAN checkpoints,
//! `disc.params`, `disc.adam.m`, `disc.adam.v`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{AdamState, ParamStore, Shape, Tensor};
use crate::model::ModelConfig;
use crate::rng::StreamState;

use super::{TrainConfig, TrainError};

pub const MAGIC: &[u8; 8] = b"SCANCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub cursor: usize,
    pub steps: u64,
    pub order: Vec<usize>,
    pub params: ParamStore,
    pub opt: AdamState,
    pub disc: Option<(ParamStore, AdamState)>,
    pub rng: BTreeMap<String, StreamState>,
    /// Partial-epoch loss sums: term -> (sum, weight).
    pub epoch_sums: BTreeMap<String, (f64, f64)>,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn table(&mut self, entries: &[(&str, &Shape, &[f64])]) {
        self.u32(entries.len() as u32);
        for (name, shape, values) in entries {
            self.str(name);
            self.u32(shape.rank() as u32);
            for &d in shape.dims() {
                self.u64(d as u64);
            }
            for v in *values {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
    fn table(&mut self) -> Result<Vec<(String, Tensor)>, TrainError> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            if rank > 2 {
                return Err(bad(format!("tensor `{name}` has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let shape = Shape::new(&dims);
            let n = shape.numel();
            let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, Tensor::new(shape, values).map_err(|e| bad(e.to_string()))?));
        }
        Ok(out)
    }
}

fn store_table(store: &ParamStore) -> Vec<(&str, &Shape, &[f64])> {
    store.iter().map(|(n, t)| (n, &t.shape, t.values.as_slice())).collect()
}

fn moment_table<'a>(store: &'a ParamStore, moments: &'a [Vec<f64>]) -> Vec<(&'a str, &'a Shape, &'a [f64])> {
    store.iter().zip(moments).map(|((n, t), m)| (n, &t.shape, m.as_slice())).collect()
}

fn adam_kv(prefix: &str, opt: &AdamState, kv: &mut Vec<(String, String)>) {
    kv.push((format!("{prefix}.lr"), opt.lr.to_string()));
    kv.push((format!("{prefix}.beta1"), opt.beta1.to_string()));
    kv.push((format!("{prefix}.beta2"), opt.beta2.to_string()));
    kv.push((format!("{prefix}.eps"), opt.eps.to_string()));
    kv.push((format!("{prefix}.step"), opt.step.to_string()));
}

impl Checkpoint {
    pub fn is_generative(&self) -> bool {
        self.model.is_generative()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv: Vec<(String, String)> = Vec::new();
        for (k, v) in self.model.to_kv() {
            kv.push((format!("model.{k}"), v));
        }
        for (k, v) in self.train.to_kv() {
            kv.push((format!("train.{k}"), v));
        }
        kv.push(("state.epoch".into(), self.epoch.to_string()));
        kv.push(("state.cursor".into(), self.cursor.to_string()));
        kv.push(("state.steps".into(), self.steps.to_string()));
        let order: Vec<String> = self.order.iter().map(|i| i.to_string()).collect();
        kv.push(("state.order".into(), order.join(",")));
        for (name, s) in &self.rng {
            kv.push((format!("rng.{name}"), format!("{},{},{}", s.seed, s.stream, s.word_pos)));
        }
        for (term, (sum, w)) in &self.epoch_sums {
            kv.push((format!("acc.{term}"), format!("{sum},{w}")));
        }
        adam_kv("adam", &self.opt, &mut kv);
        if let Some((_, opt)) = &self.disc {
            adam_kv("disc.adam", opt, &mut kv);
        }
        let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(text.len() as u64);
        w.0.extend_from_slice(text.as_bytes());
        let mut sections = vec![
            ("params", store_table(&self.params)),
            ("adam.m", moment_table(&self.params, &self.opt.m)),
            ("adam.v", moment_table(&self.params, &self.opt.v)),
        ];
        if let Some((store, opt)) = &self.disc {
            sections.push(("disc.params", store_table(store)));
            sections.push(("disc.adam.m", moment_table(store, &opt.m)));
            sections.push(("disc.adam.v", moment_table(store, &opt.v)));
        }
        w.u32(sections.len() as u32);
        for (name, table) in &sections {
            w.str(name);
            w.table(table);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut sections = BTreeMap::new();
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.str()?;
            sections.insert(name, r.table()?);
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after last section"));
        }

        let sub = |prefix: &str| -> BTreeMap<String, String> {
            kv.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing header key `{k}`")));
        let num = |k: &str| -> Result<u64, TrainError> { get(k)?.parse().map_err(|_| bad(format!("bad value for `{k}`"))) };
        let float = |k: &str| -> Result<f64, TrainError> { get(k)?.parse().map_err(|_| bad(format!("bad value for `{k}`"))) };

        let model = ModelConfig::from_kv(&sub("model.")).map_err(|e| bad(e.to_string()))?;
        let train = TrainConfig::from_kv(&sub("train.")).map_err(|e| bad(e.to_string()))?;
        let order_text = get("state.order")?;
        let order = if order_text.is_empty() {
            Vec::new()
        } else {
            order_text
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad scene order")))
                .collect::<Result<_, _>>()?
        };
        let mut rng = BTreeMap::new();
        for (name, v) in sub("rng.") {
            let parts: Vec<&str> = v.split(',').collect();
            let parse_err = || bad(format!("bad rng state for `{name}`"));
            if parts.len() != 3 {
                return Err(parse_err());
            }
            rng.insert(
                name.clone(),
                StreamState {
                    seed: parts[0].parse().map_err(|_| parse_err())?,
                    stream: parts[1].parse().map_err(|_| parse_err())?,
                    word_pos: parts[2].parse().map_err(|_| parse_err())?,
                },
            );
        }
        let mut epoch_sums = BTreeMap::new();
        for (term, v) in sub("acc.") {
            let (s, w) = v.split_once(',').ok_or_else(|| bad("bad loss accumulator"))?;
            let s: f64 = s.parse().map_err(|_| bad("bad loss accumulator"))?;
            let w: f64 = w.parse().map_err(|_| bad("bad loss accumulator"))?;
            epoch_sums.insert(term, (s, w));
        }

        let mut take_section = |name: &str| sections.remove(name).ok_or_else(|| bad(format!("missing section `{name}`")));
        let build_store = |table: Vec<(String, Tensor)>| -> Result<ParamStore, TrainError> {
            let mut s = ParamStore::new();
            for (n, t) in table {
                s.insert(&n, t).map_err(|e| bad(e.to_string()))?;
            }
            Ok(s)
        };
        let moments = |store: &ParamStore, table: Vec<(String, Tensor)>, which: &str| -> Result<Vec<Vec<f64>>, TrainError> {
            if table.len() != store.len() {
                return Err(bad(format!("{which} has {} entries for {} parameters", table.len(), store.len())));
            }
            table
                .into_iter()
                .zip(store.iter())
                .map(|((n, t), (pn, pt))| {
                    if n != pn || t.shape != pt.shape {
                        Err(bad(format!("{which} entry `{n}` does not match parameter `{pn}`")))
                    } else {
                        Ok(t.values)
                    }
                })
                .collect()
        };
        let adam = |prefix: &str, store: &ParamStore, m, v| -> Result<AdamState, TrainError> {
            Ok(AdamState {
                lr: float(&format!("{prefix}.lr"))?,
                beta1: float(&format!("{prefix}.beta1"))?,
                beta2: float(&format!("{prefix}.beta2"))?,
                eps: float(&format!("{prefix}.eps"))?,
                step: num(&format!("{prefix}.step"))?,
                m: moments(store, m, "first moments")?,
                v: moments(store, v, "second moments")?,
            })
        };

        let params = build_store(take_section("params")?)?;
        let expected = crate::model::expected_shapes(&model).map_err(|e| bad(e.to_string()))?;
        let actual: Vec<(String, Shape)> = params.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect();
        if expected != actual {
            return Err(bad("parameter table does not match the model configuration"));
        }
        let m = take_section("adam.m")?;
        let v = take_section("adam.v")?;
        let opt = adam("adam", &params, m, v)?;
        let disc = if kv.contains_key("disc.adam.step") {
            let store = build_store(take_section("disc.params")?)?;
            let m = take_section("disc.adam.m")?;
            let v = take_section("disc.adam.v")?;
            let opt = adam("disc.adam", &store, m, v)?;
            Some((store, opt))
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            train,
            epoch: num("state.epoch")? as usize,
            cursor: num("state.cursor")? as usize,
            steps: num("state.steps")?,
            order,
            params,
            opt,
            disc,
            rng,
            epoch_sums,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| TrainError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        Self::from_bytes(&buf)
    }
}
