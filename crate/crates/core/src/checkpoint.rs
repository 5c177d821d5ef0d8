//! Binary training checkpoints (`ODEC`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ODEC" u32 version
//! [u8; 32] sha-256 of the network config text
//! str network config text, str train config text, str metric log
//! u64 epochs done, u64 optimizer steps, f64 best val abs rel
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u32 #params  { str name, u32 ndim, u32 dims[ndim], f32 value[], f32 adam_m[], f32 adam_v[] }
//! u32 #buffers { str name, u32 ndim, u32 dims[ndim], f32 value[] }
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{Module, Slot};
use crate::net::NetworkConfig;
use crate::tensor::{Real, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"ODEC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f32>,
    /// Adam moments; empty for buffers.
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

/// ChaCha8 position: seed, stream and word offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub log: String,
    pub epochs_done: u64,
    pub steps: u64,
    pub best_abs_rel: f64,
    pub rng: RngState,
    pub params: Vec<StoredTensor>,
    pub buffers: Vec<StoredTensor>,
}

pub fn config_digest(net: &NetworkConfig) -> [u8; 32] {
    Sha256::digest(net.to_text().as_bytes()).into()
}

fn to_f32<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

/// Snapshot of every parameter (with moments) and buffer of `module`.
pub fn capture<T: Real>(module: &mut dyn Module<T>) -> (Vec<StoredTensor>, Vec<StoredTensor>) {
    let (mut params, mut buffers) = (Vec::new(), Vec::new());
    module.visit(&mut |s| match s {
        Slot::Param(p) => params.push(StoredTensor {
            name: p.name.clone(),
            dims: p.shape().to_vec(),
            value: to_f32(&p.value),
            adam_m: to_f32(&p.adam_m),
            adam_v: to_f32(&p.adam_v),
        }),
        Slot::Buffer(name, t) => buffers.push(StoredTensor {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            value: to_f32(t),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }),
    });
    (params, buffers)
}

fn fill<T: Real>(dst: &mut Tensor<T>, src: &[f32]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d = T::lit(s as f64);
    }
}

/// Loads stored tensors into `module`, matching by name and shape.
pub fn restore<T: Real>(module: &mut dyn Module<T>, params: &[StoredTensor], buffers: &[StoredTensor]) -> Result<()> {
    let (mut pi, mut bi) = (0, 0);
    let mut err = None;
    let mut check = |kind: &str, want: Option<&StoredTensor>, name: &str, dims: &[usize]| -> bool {
        match want {
            Some(s) if s.name == name && s.dims == dims => true,
            other => {
                if err.is_none() {
                    err = Some(Error::Config(format!(
                        "checkpoint {kind} mismatch at {name} {dims:?}: stored {:?}",
                        other.map(|s| (&s.name, &s.dims))
                    )));
                }
                false
            }
        }
    };
    module.visit(&mut |s| match s {
        Slot::Param(p) => {
            let st = params.get(pi);
            pi += 1;
            if check("parameter", st, &p.name, p.shape()) {
                let st = st.unwrap();
                fill(&mut p.value, &st.value);
                fill(&mut p.adam_m, &st.adam_m);
                fill(&mut p.adam_v, &st.adam_v);
            }
        }
        Slot::Buffer(name, t) => {
            let st = buffers.get(bi);
            bi += 1;
            if check("buffer", st, name, t.shape()) {
                fill(t, &st.unwrap().value);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if pi != params.len() || bi != buffers.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters and {} buffers, network has {pi} and {bi}",
            params.len(),
            buffers.len()
        )));
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &StoredTensor, moments: bool) {
        self.str(&t.name);
        self.u32(t.dims.len());
        for &d in &t.dims {
            self.u32(d);
        }
        self.floats(&t.value);
        if moments {
            self.floats(&t.adam_m);
            self.floats(&t.adam_v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(self.err(format!("truncated {what}: expected {n} bytes, found {rest}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            path: self.path.to_path_buf(),
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn tensor(&mut self, moments: bool) -> Result<StoredTensor> {
        let name = self.str("tensor name")?;
        let ndim = self.u32("ndim")?;
        if ndim > 8 {
            return Err(self.err(format!("{name}: implausible ndim {ndim}")));
        }
        let dims = (0..ndim).map(|_| self.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let value = self.floats(n, &name)?;
        let (adam_m, adam_v) =
            if moments { (self.floats(n, &name)?, self.floats(n, &name)?) } else { (Vec::new(), Vec::new()) };
        Ok(StoredTensor { name, dims, value, adam_m, adam_v })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION as usize);
        w.0.extend_from_slice(&config_digest(&self.net));
        w.str(&self.net.to_text());
        w.str(&self.train.to_text());
        w.str(&self.log);
        w.0.extend_from_slice(&self.epochs_done.to_le_bytes());
        w.0.extend_from_slice(&self.steps.to_le_bytes());
        w.0.extend_from_slice(&self.best_abs_rel.to_le_bytes());
        w.0.extend_from_slice(&self.rng.seed);
        w.0.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.len());
        for p in &self.params {
            w.tensor(p, true);
        }
        w.u32(self.buffers.len());
        for b in &self.buffers {
            w.tensor(b, false);
        }
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return Err(r.err("bad magic, expected \"ODEC\""));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            r.pos -= 4;
            return Err(r.err(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.array("config digest")?;
        let text_at = r.pos;
        let net = NetworkConfig::from_text(&r.str("network config")?)?;
        if config_digest(&net) != digest {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: text_at,
                msg: "network config does not match its digest".into(),
            });
        }
        let train = TrainConfig::from_text(&r.str("train config")?)?;
        let log = r.str("metric log")?;
        let epochs_done = r.u64("epoch counter")?;
        let steps = r.u64("step counter")?;
        let best_abs_rel = f64::from_le_bytes(r.array("best abs rel")?);
        let rng = RngState {
            seed: r.array("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.array("rng position")?),
        };
        let np = r.u32("parameter count")?;
        let params = (0..np).map(|_| r.tensor(true)).collect::<Result<_>>()?;
        let nb = r.u32("buffer count")?;
        let buffers = (0..nb).map(|_| r.tensor(false)).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { net, train, log, epochs_done, steps, best_abs_rel, rng, params, buffers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f32>::new("c", 2, 3, 3, 1, true, &mut rng).unwrap();
        conv.weight.adam_m = Tensor::full(conv.weight.shape(), 0.5).unwrap();
        let (params, buffers) = capture(&mut conv);
        Checkpoint {
            net: NetworkConfig { h: 16, w: 32, ..NetworkConfig::default() },
            train: TrainConfig::default(),
            log: "epoch,x\n0,1\n".into(),
            epochs_done: 2,
            steps: 17,
            best_abs_rel: 0.25,
            rng: RngState { seed: [7; 32], stream: 1, word_pos: 123 },
            params,
            buffers,
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"ODEC");
        assert_eq!(Checkpoint::decode(&bytes, Path::new("m")).unwrap(), c);
    }

    #[test]
    fn capture_restore_roundtrip() {
        let c = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut conv = Conv2d::<f32>::new("c", 2, 3, 3, 1, true, &mut rng).unwrap();
        restore(&mut conv, &c.params, &c.buffers).unwrap();
        assert_eq!(capture(&mut conv).0, c.params);
        let mut other = Conv2d::<f32>::new("d", 2, 3, 3, 1, true, &mut rng).unwrap();
        assert!(restore(&mut other, &c.params, &c.buffers).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode();
        let p = Path::new("m");
        assert!(matches!(Checkpoint::decode(b"ODEX", p), Err(Error::Parse { offset: 0, .. })));
        match Checkpoint::decode(&bytes[..bytes.len() - 3], p) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut tampered = bytes.clone();
        let at = 4 + 4 + 32 + 4 + 4;
        tampered[at] ^= 1;
        assert!(Checkpoint::decode(&tampered, p).is_err());
    }
}
