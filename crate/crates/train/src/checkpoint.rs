//! Binary checkpoint format.
//!
//! ```text
//! "FEEDCKPT" | u32 version | u32 meta_len | meta (key=value lines)
//! u32 count | count x { u16 name_len | name | u8 dtype | u8 rank | rank x u64 dim | payload }
//! u64 FNV-1a hash of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use feedkit_core::{Arch, Network, Scalar, Tensor};
use fnv::FnvHasher;

use crate::error::{Result, TrainError};

pub const MAGIC: &[u8; 8] = b"FEEDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub arch: Arch,
    /// sFEED generation; 0 outside a chain.
    pub stack: usize,
    pub seed: u64,
    /// Additional free-form metadata, kept sorted.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(arch: Arch, stack: usize, seed: u64) -> Self {
        Self {
            arch,
            stack,
            seed,
            extra: BTreeMap::new(),
        }
    }

    fn encode(&self) -> String {
        let mut s = format!(
            "arch={}\nstack={}\nseed={}\n",
            self.arch, self.stack, self.seed
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn decode(text: &str) -> Result<Self> {
        let mut arch = None;
        let mut stack = 0;
        let mut seed = 0;
        let mut extra = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Format(format!("bad checkpoint metadata line {line:?}"))
            })?;
            let bad = |what: &str| TrainError::Format(format!("bad checkpoint {what} {v:?}"));
            match k {
                "arch" => {
                    arch = Some(v.parse::<Arch>().map_err(|_| {
                        TrainError::Version(format!("unknown architecture descriptor {v:?}"))
                    })?)
                }
                "stack" => stack = v.parse().map_err(|_| bad("stack"))?,
                "seed" => seed = v.parse().map_err(|_| bad("seed"))?,
                _ => {
                    extra.insert(k.to_string(), v.to_string());
                }
            }
        }
        let arch =
            arch.ok_or_else(|| TrainError::Version("checkpoint metadata lacks arch".into()))?;
        Ok(Self {
            arch,
            stack,
            seed,
            extra,
        })
    }
}

/// One serialized tensor, still in file encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    fn decode<S: Scalar>(&self) -> Result<Tensor<S>> {
        let data: Vec<S> = match self.dtype {
            0 => self
                .payload
                .chunks_exact(4)
                .map(|b| S::of(f32::read_le(b) as f64))
                .collect(),
            1 => self
                .payload
                .chunks_exact(8)
                .map(|b| S::of(f64::read_le(b)))
                .collect(),
            d => {
                return Err(TrainError::Version(format!(
                    "tensor {}: unknown dtype code {d}",
                    self.name
                )))
            }
        };
        Ok(Tensor::new(&self.dims, data)?)
    }
}

/// A parsed checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
    pub hash: u64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// The hash stored in the trailing eight bytes of an encoded checkpoint.
pub fn fnv1a_of_encoding(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(
        bytes[bytes.len() - 8..]
            .try_into()
            .expect("encoded checkpoints end in a hash"),
    )
}

/// Serializes parameters then buffers of `net`, returning the file bytes.
pub fn encode<S: Scalar>(net: &Network<S>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if *net.arch() != meta.arch {
        return Err(TrainError::Config(format!(
            "metadata says {} but the network is {}",
            meta.arch,
            net.arch()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = meta.encode();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let state: Vec<_> = net.state().collect();
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TrainError::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let hash = fnv1a(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    Ok(out)
}

/// Writes atomically (temporary file in the same directory, then rename)
/// and returns the content hash.
pub fn save_checkpoint<S: Scalar>(
    net: &Network<S>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<u64> {
    let bytes = encode(net, meta)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| TrainError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| TrainError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| TrainError::io(&tmp, e))?;
        f.sync_all().map_err(|e| TrainError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))?;
    Ok(fnv1a_of_encoding(&bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Io(format!(
                "truncated checkpoint: {what} at byte offset {} needs {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses and verifies a checkpoint. A hash mismatch is reported as
/// corruption unless the structure itself shows truncation.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(TrainError::Io(format!(
            "truncated checkpoint: {} bytes end before the header does",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let actual = fnv1a(body);
    match (actual == stored, parse_body(body)) {
        (true, Ok((meta, entries))) => Ok(Checkpoint {
            meta,
            entries,
            hash: stored,
        }),
        (true, Err(e)) | (false, Err(e @ TrainError::Io(_))) => Err(e),
        (false, _) => Err(TrainError::Corruption(format!(
            "content hash {actual:016x} does not match stored {stored:016x}"
        ))),
    }
}

fn parse_body(body: &[u8]) -> Result<(CheckpointMeta, Vec<Entry>)> {
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TrainError::Version(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| TrainError::Format("metadata is not UTF-8".into()))?;
    let meta = CheckpointMeta::decode(text)?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => {
                return Err(TrainError::Version(format!(
                    "tensor {name}: unknown dtype code {d}"
                )))
            }
        };
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = dims
            .iter()
            .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
            .ok_or_else(|| TrainError::Format(format!("tensor {name}: dims {dims:?} overflow")))?;
        let payload = r.take(bytes, &format!("payload of {name}"))?.to_vec();
        entries.push(Entry {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != body.len() {
        return Err(TrainError::Format(format!(
            "{} unexpected bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    Ok((meta, entries))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        TrainError::Io(m) => TrainError::Io(format!("{}: {m}", path.display())),
        TrainError::Format(m) => TrainError::Format(format!("{}: {m}", path.display())),
        TrainError::Corruption(m) => TrainError::Corruption(format!("{}: {m}", path.display())),
        TrainError::Version(m) => TrainError::Version(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Content hash of a checkpoint file without decoding its tensors.
pub fn checkpoint_hash(path: &Path) -> Result<u64> {
    Ok(read_checkpoint(path)?.hash)
}

impl Checkpoint {
    /// Copies every entry into `net`, which must have exactly the stored
    /// tensor names and shapes; the first disagreement is named.
    pub fn load_into<S: Scalar>(&self, net: &mut Network<S>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = net
            .state()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let Some(e) = self.entries.get(i) else {
                return Err(TrainError::Config(format!(
                    "checkpoint lacks tensor {name} expected by {}",
                    net.arch()
                )));
            };
            if e.name != *name || e.dims != *shape {
                return Err(TrainError::Config(format!(
                    "tensor {} {:?} in checkpoint does not match {name} {shape:?} of {}",
                    e.name,
                    e.dims,
                    net.arch()
                )));
            }
        }
        if let Some(e) = self.entries.get(expected.len()) {
            return Err(TrainError::Config(format!(
                "checkpoint tensor {} has no counterpart in {}",
                e.name,
                net.arch()
            )));
        }
        for e in &self.entries {
            let t = e.decode::<S>()?;
            let dst = net.state_mut(&e.name).expect("names checked above");
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Rebuilds the stored architecture and injects the tensors.
    pub fn to_network<S: Scalar>(&self) -> Result<Network<S>> {
        let mut net = Network::build(&self.meta.arch, 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Network<S>, CheckpointMeta)> {
    let ck = read_checkpoint(path)?;
    let net = ck.to_network().map_err(|e| match e {
        TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((net, ck.meta))
}
