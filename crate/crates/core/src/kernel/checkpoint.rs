//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GCKP" u32:version
//! str:config str:config_hash
//! u32:n_params { str:name u32:ndim u64:dim* f64:data* }*
//! u8:has_optimizer [u8:kind f64:lr f64:alpha f64:eps u64:steps u32:n { u64:len f64* }*]
//! u32:n_counters { str:name u64:value }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Floats are stored as
//! raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{KernelError, Optimizer, OptimizerKind, ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration, serialized by the caller.
    pub config: String,
    pub config_hash: String,
    pub params: ParamSet,
    pub optimizer: Option<Optimizer>,
    /// Named counters needed to resume random streams (e.g. episodes consumed).
    pub rng_counters: Vec<(String, u64)>,
}

pub fn config_hash(config: &str) -> String {
    let digest = Sha256::digest(config.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(config: String, params: ParamSet, optimizer: Option<Optimizer>) -> Self {
        let config_hash = config_hash(&config);
        Self {
            config,
            config_hash,
            params,
            optimizer,
            rng_counters: Vec::new(),
        }
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.rng_counters.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), KernelError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_str(w, &self.config)?;
        write_str(w, &self.config_hash)?;
        w.write_u32::<LE>(self.params.len() as u32)?;
        for p in self.params.iter() {
            write_str(w, &p.name)?;
            w.write_u32::<LE>(p.value.shape().len() as u32)?;
            for d in p.value.shape() {
                w.write_u64::<LE>(*d as u64)?;
            }
            for v in p.value.data() {
                w.write_f64::<LE>(*v)?;
            }
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(opt) => {
                w.write_u8(1)?;
                let (kind, alpha, eps) = match opt.kind {
                    OptimizerKind::Sgd => (0u8, 0.0, 0.0),
                    OptimizerKind::RmsProp { alpha, eps } => (1u8, alpha, eps),
                };
                w.write_u8(kind)?;
                w.write_f64::<LE>(opt.lr())?;
                w.write_f64::<LE>(alpha)?;
                w.write_f64::<LE>(eps)?;
                w.write_u64::<LE>(opt.steps)?;
                w.write_u32::<LE>(opt.accum.len() as u32)?;
                for acc in &opt.accum {
                    w.write_u64::<LE>(acc.len() as u64)?;
                    for v in acc {
                        w.write_f64::<LE>(*v)?;
                    }
                }
            }
        }
        w.write_u32::<LE>(self.rng_counters.len() as u32)?;
        for (name, v) in &self.rng_counters {
            write_str(w, name)?;
            w.write_u64::<LE>(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, KernelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(KernelError::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(KernelError::Checkpoint(format!("unsupported version {version}")));
        }
        let config = read_str(r)?;
        let config_hash = read_str(r)?;
        let n = r.read_u32::<LE>()?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = read_str(r)?;
            let ndim = r.read_u32::<LE>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LE>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            r.read_f64_into::<LE>(&mut data)?;
            params.add(name, Tensor::new(shape, data)?)?;
        }
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let kind = r.read_u8()?;
                let lr = r.read_f64::<LE>()?;
                let alpha = r.read_f64::<LE>()?;
                let eps = r.read_f64::<LE>()?;
                let steps = r.read_u64::<LE>()?;
                let kind = match kind {
                    0 => OptimizerKind::Sgd,
                    1 => OptimizerKind::RmsProp { alpha, eps },
                    k => return Err(KernelError::Checkpoint(format!("unknown optimizer kind {k}"))),
                };
                let n_acc = r.read_u32::<LE>()?;
                let mut accum = Vec::with_capacity(n_acc as usize);
                for _ in 0..n_acc {
                    let len = r.read_u64::<LE>()? as usize;
                    let mut acc = vec![0.0; len];
                    r.read_f64_into::<LE>(&mut acc)?;
                    accum.push(acc);
                }
                Some(Optimizer::from_parts(kind, lr, accum, steps))
            }
            b => return Err(KernelError::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        let n_counters = r.read_u32::<LE>()?;
        let mut rng_counters = Vec::with_capacity(n_counters as usize);
        for _ in 0..n_counters {
            let name = read_str(r)?;
            rng_counters.push((name, r.read_u64::<LE>()?));
        }
        if config_hash != self::config_hash(&config) {
            return Err(KernelError::Checkpoint("config hash does not match stored config".into()));
        }
        Ok(Self {
            config,
            config_hash,
            params,
            optimizer,
            rng_counters,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), KernelError> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, KernelError> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| KernelError::Checkpoint(e.to_string()))
}
