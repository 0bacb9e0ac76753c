//! Binary checkpoint container.
//!
//! ```text
//! b"STDMMFCK"                      8 bytes
//! format version                   u32 LE
//! manifest length in bytes         u64 LE
//! manifest                         UTF-8 text, one record per line
//! payload                          little-endian tensors, offsets relative to payload start
//! ```
//!
//! Manifest records:
//!
//! ```text
//! epoch <n>
//! step <n>
//! rng <64 hex digits of seed> <stream> <word position>
//! config <key> = <value>
//! tensor <name> <f64|f32> <d0,d1,...> <byte offset>
//! ```
//!
//! Tensors are written as f64 so that a save/load round trip is bit-exact; f32 payloads are
//! accepted on load. Optimizer state is stored as `optim.momentum.<parameter name>`.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use stdmmf_tensor::{EntryKind, ParamStore};

use crate::error::{Error, Result};

use super::optim::Sgd;

pub const MAGIC: &[u8; 8] = b"STDMMFCK";
pub const FORMAT_VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    /// Config snapshot as `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every store entry plus the optimizer's momentum buffers.
    pub fn capture(store: &ParamStore, optim: Option<&Sgd>, epoch: u64, step: u64, rng: RngState, config: Vec<(String, String)>) -> Self {
        let mut tensors: Vec<NamedTensor> =
            store.entries().iter().map(|e| NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data: e.data.clone() }).collect();
        if let Some(opt) = optim {
            for (e, v) in store.entries().iter().zip(&opt.velocity) {
                if e.kind == EntryKind::Parameter {
                    tensors.push(NamedTensor { name: format!("{MOMENTUM_PREFIX}{}", e.name), shape: e.shape.clone(), data: v.clone() });
                }
            }
        }
        Checkpoint { epoch, step, rng, config, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(&format!("epoch {}\nstep {}\n", self.epoch, self.step));
        let hex: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        manifest.push_str(&format!("rng {hex} {} {}\n", self.rng.stream, self.rng.word_pos));
        for (k, v) in &self.config {
            manifest.push_str(&format!("config {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor {} {} {} {offset}\n", t.name, DType::F64.name(), dims.join(",")));
            offset += t.data.len() * 8;
        }
        let mut out = Vec::with_capacity(24 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint { issues: vec![m] };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing STDMMFCK magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version} (expected {FORMAT_VERSION})")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(&bytes[20..payload_start]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &bytes[payload_start..];

        let mut epoch = None;
        let mut step = None;
        let mut rng = None;
        let mut config = Vec::new();
        let mut tensors = Vec::new();
        let mut issues = Vec::new();
        let mut expected_end = 0usize;
        for line in manifest.lines() {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "epoch" => epoch = rest.trim().parse::<u64>().ok(),
                "step" => step = rest.trim().parse::<u64>().ok(),
                "rng" => rng = parse_rng(rest),
                "config" => match rest.split_once('=') {
                    Some((k, v)) => config.push((k.trim().to_string(), v.trim().to_string())),
                    None => issues.push(format!("malformed config record `{line}`")),
                },
                "tensor" => match parse_tensor(rest, payload) {
                    Ok((t, end)) => {
                        expected_end = expected_end.max(end);
                        tensors.push(t);
                    }
                    Err(m) => issues.push(m),
                },
                "" => {}
                other => issues.push(format!("unknown manifest record `{other}`")),
            }
        }
        if epoch.is_none() {
            issues.push("manifest lacks a valid epoch record".into());
        }
        if step.is_none() {
            issues.push("manifest lacks a valid step record".into());
        }
        if rng.is_none() {
            issues.push("manifest lacks a valid rng record".into());
        }
        if issues.is_empty() && expected_end != payload.len() {
            issues.push(format!("payload has {} bytes, manifest describes {expected_end}", payload.len()));
        }
        if !issues.is_empty() {
            return Err(Error::Checkpoint { issues });
        }
        Ok(Checkpoint { epoch: epoch.unwrap(), step: step.unwrap(), rng: rng.unwrap(), config, tensors })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().ok_or_else(|| Error::io(path, std::io::Error::other("checkpoint path has no file name")))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies tensors into `store` (and momentum into `optim`). Everything is validated first:
    /// on error nothing is modified and every offending tensor is listed.
    pub fn apply(&self, store: &mut ParamStore, mut optim: Option<&mut Sgd>) -> Result<()> {
        let mut issues = Vec::new();
        let mut plan: Vec<(usize, bool, &NamedTensor)> = Vec::new();
        let mut seen = vec![false; store.len()];
        let mut seen_m = vec![false; store.len()];
        for t in &self.tensors {
            let (name, momentum) = match t.name.strip_prefix(MOMENTUM_PREFIX) {
                Some(n) => (n, true),
                None => (t.name.as_str(), false),
            };
            let Some(id) = store.id(name) else {
                issues.push(format!("unexpected tensor `{}`", t.name));
                continue;
            };
            let e = store.entry(id);
            if momentum && e.kind != EntryKind::Parameter {
                issues.push(format!("unexpected tensor `{}` (buffers have no momentum)", t.name));
                continue;
            }
            if e.shape != t.shape {
                issues.push(format!("tensor `{}` has shape {:?}, model expects {:?}", t.name, t.shape, e.shape));
                continue;
            }
            let slot = if momentum { &mut seen_m } else { &mut seen };
            if std::mem::replace(&mut slot[id.index()], true) {
                issues.push(format!("tensor `{}` appears twice", t.name));
                continue;
            }
            plan.push((id.index(), momentum, t));
        }
        for (i, e) in store.entries().iter().enumerate() {
            if !seen[i] {
                issues.push(format!("missing tensor `{}`", e.name));
            }
            if optim.is_some() && e.kind == EntryKind::Parameter && !seen_m[i] {
                issues.push(format!("missing tensor `{MOMENTUM_PREFIX}{}`", e.name));
            }
        }
        if !issues.is_empty() {
            return Err(Error::Checkpoint { issues });
        }
        for (i, momentum, t) in plan {
            if momentum {
                if let Some(opt) = optim.as_deref_mut() {
                    opt.velocity[i] = t.data.clone();
                }
            } else {
                store.entries_mut()[i].data.copy_from_slice(&t.data);
            }
        }
        Ok(())
    }
}

fn parse_rng(rest: &str) -> Option<RngState> {
    let mut it = rest.split_whitespace();
    let hex = it.next()?;
    if hex.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    let stream = it.next()?.parse().ok()?;
    let word_pos = it.next()?.parse().ok()?;
    Some(RngState { seed, stream, word_pos })
}

fn parse_tensor(rest: &str, payload: &[u8]) -> std::result::Result<(NamedTensor, usize), String> {
    let f: Vec<&str> = rest.split_whitespace().collect();
    let [name, dtype, dims, offset] = f[..] else {
        return Err(format!("malformed tensor record `{rest}`"));
    };
    let dtype = match dtype {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(format!("tensor `{name}`: unsupported dtype {other}")),
    };
    let shape = if dims.is_empty() {
        Vec::new()
    } else {
        dims.split(',').map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| format!("tensor `{name}`: bad shape {dims}"))?
    };
    let offset: usize = offset.parse().map_err(|_| format!("tensor `{name}`: bad offset {offset}"))?;
    let numel: usize = shape.iter().product();
    let end = offset + numel * dtype.size();
    if end > payload.len() {
        return Err(format!("tensor `{name}`: payload truncated (needs bytes {offset}..{end}, have {})", payload.len()));
    }
    let bytes = &payload[offset..end];
    let data = match dtype {
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    Ok((NamedTensor { name: name.to_string(), shape, data }, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a.weight", &[2, 3], EntryKind::Parameter, (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        s.register("a.running_mean", &[3], EntryKind::Buffer, vec![1.0, 2.0, 3.0]).unwrap();
        s
    }

    fn ckpt(s: &ParamStore) -> Checkpoint {
        let rng = ChaCha8Rng::seed_from_u64(7);
        let opt = Sgd::new(s, 0.1, 0.9, 0.0);
        Checkpoint::capture(s, Some(&opt), 3, 12, RngState::capture(&rng), vec![("seed".into(), "7".into())])
    }

    #[test]
    fn bytes_round_trip() {
        let s = store();
        let c = ckpt(&s);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f32_payloads_are_accepted() {
        let manifest = "epoch 0\nstep 0\nrng 0000000000000000000000000000000000000000000000000000000000000000 0 0\ntensor x f32 2 0\n";
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        b.extend_from_slice(manifest.as_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&b).unwrap().tensors[0].data, vec![1.5, -2.0]);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = ckpt(&store()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn apply_lists_every_offending_tensor_and_leaves_model_untouched() {
        let mut s = store();
        let mut c = ckpt(&s);
        c.tensors[0].data = vec![9.0; 6];
        c.tensors.push(NamedTensor { name: "extra".into(), shape: vec![1], data: vec![0.0] });
        c.tensors[1].shape = vec![4];
        c.tensors[1].data = vec![0.0; 4];
        let before = s.entries()[0].data.clone();
        match c.apply(&mut s, None) {
            Err(Error::Checkpoint { issues }) => {
                assert!(issues.iter().any(|m| m.contains("`extra`")));
                assert!(issues.iter().any(|m| m.contains("a.running_mean")));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.entries()[0].data, before);
    }
}
