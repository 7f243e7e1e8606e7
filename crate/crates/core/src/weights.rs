//! Named parameter container and the `.dapw` weights file.
//!
//! Layout: magic `DAPW`, `u16` version, `u32` tensor count, then per tensor a
//! `u16` name length, the UTF-8 name, `u8` rank, `rank` x `u32` extents and
//! the `f32` payload. Integers and floats are little-endian; tensors are
//! written in name order, so equal weights give equal bytes.
//!
//! Parameter names:
//!
//! | prefix | shape |
//! |---|---|
//! | `encoder.{t,prev}.l{l}.conv{i}` | 3x3, `3->d` for level 0 conv 0, else `d->d`; `prev` stops below the top level |
//! | `dap.l{l}.{q,k,v}` | 1x1, `d->d` (levels below the top, attention on) |
//! | `dap.l{l}.offset.conv{i}` | 7x7 offset block, output `2k` |
//! | `dap.l{l}.fuse` | 3x3, `k*d->d` (attention off, pyramid on) |
//! | `hidden.k` / `hidden.v` | 1x1 `n->d` / grouped 1x1 `n->n` |
//! | `hidden.fuse` | 3x3, `k*n->n` (attention off) |
//! | `main.agg` | 3x3, `n+3->n` |
//! | `main.imdn{b}.c{1..4}` / `.fuse` | IMDN convs / 1x1 `n->n` |
//! | `main.out` | 3x3, `n->3r^2+n` |
//!
//! Every entry has a `.weight` and a `.bias`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DAPW";
const VERSION: u16 = 1;

/// One learnable tensor of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// Zero-initialized rather than drawn uniformly.
    pub zero: bool,
}

impl ParamSpec {
    fn fan_in(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }
}

struct Schema(Vec<ParamSpec>);

impl Schema {
    fn conv(&mut self, prefix: &str, cin_per_group: usize, cout: usize, kernel: usize, zero: bool) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.weight"),
            dims: vec![cout, cin_per_group, kernel, kernel],
            zero,
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.bias"),
            dims: vec![cout],
            zero: true,
        });
    }
}

/// Input width of the offset block at `level`.
pub fn offset_input_channels(cfg: &ModelConfig, level: usize) -> usize {
    if !cfg.pyramid_enabled {
        2 * cfg.d
    } else if level == cfg.levels {
        cfg.d
    } else {
        2 * cfg.d + 2 * cfg.k
    }
}

/// All parameters of `cfg`, in a fixed order.
pub fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Schema(Vec::new());
    let (d, n, k) = (cfg.d, cfg.n, cfg.k);
    let top = cfg.top_level();
    if cfg.uses_dap() {
        let chains: &[&str] = if cfg.offsets_enabled { &["t", "prev"] } else { &["t"] };
        for chain in chains {
            let last = if *chain == "prev" { cfg.previous_top_level() } else { top };
            for l in 0..=last {
                for i in 0..cfg.encoder_convs {
                    let cin = if l == 0 && i == 0 { 3 } else { d };
                    s.conv(&format!("encoder.{chain}.l{l}.conv{i}"), cin, d, 3, false);
                }
            }
        }
        for l in 0..=top {
            let attends = cfg.offsets_enabled && l < top;
            if cfg.attention_enabled && (attends || l == 0) {
                s.conv(&format!("dap.l{l}.q"), d, d, 1, false);
            }
            if attends && cfg.attention_enabled {
                s.conv(&format!("dap.l{l}.k"), d, d, 1, false);
                s.conv(&format!("dap.l{l}.v"), d, d, 1, false);
            }
            if attends && !cfg.attention_enabled {
                s.conv(&format!("dap.l{l}.fuse"), k * d, d, 3, false);
            }
            if cfg.offsets_enabled {
                let mut cin = offset_input_channels(cfg, l);
                let widths: Vec<usize> =
                    cfg.offset_hidden.iter().copied().chain([2 * k]).collect();
                for (i, &cout) in widths.iter().enumerate() {
                    let last = i + 1 == widths.len();
                    s.conv(
                        &format!("dap.l{l}.offset.conv{i}"),
                        cin,
                        cout,
                        cfg.offset_kernel,
                        last,
                    );
                    cin = cout;
                }
            }
        }
        if cfg.attention_enabled {
            s.conv("hidden.k", n, d, 1, false);
            s.conv("hidden.v", n / cfg.groups, n, 1, false);
        } else {
            s.conv("hidden.fuse", k * n, n, 3, false);
        }
    }
    s.conv("main.agg", n + 3, n, 3, false);
    let (q, rest) = (n / 4, n - n / 4);
    for b in 0..cfg.imdn_blocks {
        let p = format!("main.imdn{b}");
        s.conv(&format!("{p}.c1"), n, n, 3, false);
        s.conv(&format!("{p}.c2"), rest, n, 3, false);
        s.conv(&format!("{p}.c3"), rest, n, 3, false);
        s.conv(&format!("{p}.c4"), rest, q, 3, false);
        s.conv(&format!("{p}.fuse"), n, n, 1, false);
    }
    s.conv("main.out", n, cfg.head_channels() + n, 3, false);
    s.0
}

/// All learnable tensors of one model, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, zero final offset layers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for p in schema(cfg) {
            let t = if p.zero {
                Tensor::zeros(&p.dims)
            } else {
                let bound = 1.0 / (p.fan_in() as f32).sqrt();
                Tensor::from_fn(&p.dims, |_| rng.gen_range(-bound..bound))
            };
            tensors.insert(p.name, t);
        }
        Ok(Self { tensors })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tensors: schema(cfg)
                .into_iter()
                .map(|p| {
                    let t = Tensor::zeros(&p.dims);
                    (p.name, t)
                })
                .collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in &mut self.tensors {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Checks names and shapes against the schema of `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let specs = schema(cfg);
        for p in &specs {
            let t = self.get(&p.name)?;
            if t.dims() != p.dims.as_slice() {
                return Err(Error::NamedShape {
                    name: p.name.clone(),
                    expected: p.dims.clone(),
                    found: t.dims().to_vec(),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> =
                specs.iter().map(|p| p.name.as_str()).collect();
            let extra = self.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::Format(format!(
                "unexpected tensor `{extra}` for configuration {}",
                cfg.name
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("weights: bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("weights: unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("weights: name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            if rank > 4 {
                return Err(Error::Format(format!("weights: `{name}` has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            let payload = r.take(4 * numel)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("weights: `{name}`: {m}")),
                e => Error::Format(format!("weights: `{name}`: {e}")),
            })?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "weights: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a weights file and validates it against `cfg`.
    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let w = Self::from_bytes(&fs::read(path)?)?;
        w.validate(cfg)?;
        Ok(w)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "weights: truncated at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
