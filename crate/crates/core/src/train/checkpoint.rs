//! Binary checkpoint persistence.
//!
//! Layout (all little-endian): magic `EVMK`, format version `u32`, then five
//! length-prefixed sections — config text, parameter index (one
//! `name dim,dim` line per tensor, in registration order), parameter blob
//! (f64), optimizer state (`step u64` + first/second moment blobs), RNG
//! state (`master_seed u64` + `global_step u64`). Saving is atomic
//! (temp file + rename) and `load(save(x))` is byte-identical.

use std::io::Write;
use std::path::Path;

use crate::nn::ParamSet;
use crate::tensor::{Tensor, TensorError};
use crate::train::adam::AdamState;

pub const MAGIC: [u8; 4] = *b"EVMK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// (name, shape) per parameter, in registration order.
    pub entries: Vec<(String, Vec<usize>)>,
    pub blob: Vec<f64>,
    pub adam_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub master_seed: u64,
    pub global_step: u64,
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8], what: &str) -> Result<Vec<f64>, TensorError> {
    if bytes.len() % 8 != 0 {
        return Err(TensorError::Config(format!(
            "{what} section length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Config(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn section(&mut self, what: &str) -> Result<&'a [u8], TensorError> {
        let len = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")) as usize;
        self.take(len, what)
    }
}

impl Checkpoint {
    pub fn capture(
        params: &ParamSet,
        adam: &AdamState,
        config_text: &str,
        master_seed: u64,
        global_step: u64,
    ) -> Self {
        let entries =
            params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let mut blob = Vec::with_capacity(params.total_elems());
        for (_, t) in params.iter() {
            blob.extend_from_slice(t.data());
        }
        let (adam_m, adam_v) = adam.flat_moments();
        Self {
            config_text: config_text.to_string(),
            entries,
            blob,
            adam_step: adam.step,
            adam_m,
            adam_v,
            master_seed,
            global_step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_section(&mut out, self.config_text.as_bytes());
        let index = self
            .entries
            .iter()
            .map(|(name, shape)| {
                let dims =
                    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
                format!("{name} {dims}")
            })
            .collect::<Vec<_>>()
            .join("\n");
        push_section(&mut out, index.as_bytes());
        push_section(&mut out, &f64s_to_bytes(&self.blob));
        let mut opt = Vec::with_capacity(8 + (self.adam_m.len() + self.adam_v.len()) * 8);
        opt.extend_from_slice(&self.adam_step.to_le_bytes());
        opt.extend_from_slice(&f64s_to_bytes(&self.adam_m));
        opt.extend_from_slice(&f64s_to_bytes(&self.adam_v));
        push_section(&mut out, &opt);
        let mut rng = Vec::with_capacity(16);
        rng.extend_from_slice(&self.master_seed.to_le_bytes());
        rng.extend_from_slice(&self.global_step.to_le_bytes());
        push_section(&mut out, &rng);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(TensorError::Config(format!(
                "not a checkpoint: bad magic {magic:?}"
            )));
        }
        let version =
            u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TensorError::Config(format!(
                "checkpoint format version {version} (this build reads {VERSION})"
            )));
        }
        let config_text = String::from_utf8(r.section("config")?.to_vec())
            .map_err(|e| TensorError::Config(format!("config section not UTF-8: {e}")))?;
        let index = String::from_utf8(r.section("index")?.to_vec())
            .map_err(|e| TensorError::Config(format!("index section not UTF-8: {e}")))?;
        let mut entries = Vec::new();
        for line in index.lines() {
            let (name, dims) = line.rsplit_once(' ').ok_or_else(|| {
                TensorError::Config(format!("malformed index line `{line}`"))
            })?;
            let shape = dims
                .split(',')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| {
                        TensorError::Config(format!("bad dimension `{d}` in `{line}`"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            entries.push((name.to_string(), shape));
        }
        let blob = bytes_to_f64s(r.section("parameters")?, "parameter")?;
        let expect: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if blob.len() != expect {
            return Err(TensorError::Config(format!(
                "parameter blob holds {} values, index declares {expect}",
                blob.len()
            )));
        }
        let opt = r.section("optimizer")?;
        if opt.len() != 8 + expect * 16 {
            return Err(TensorError::Config(format!(
                "optimizer section is {} bytes, expected {}",
                opt.len(),
                8 + expect * 16
            )));
        }
        let adam_step = u64::from_le_bytes(opt[..8].try_into().expect("8 bytes"));
        let adam_m = bytes_to_f64s(&opt[8..8 + expect * 8], "first-moment")?;
        let adam_v = bytes_to_f64s(&opt[8 + expect * 8..], "second-moment")?;
        let rng = r.section("rng")?;
        if rng.len() != 16 {
            return Err(TensorError::Config(format!(
                "rng section is {} bytes, expected 16",
                rng.len()
            )));
        }
        let master_seed = u64::from_le_bytes(rng[..8].try_into().expect("8 bytes"));
        let global_step = u64::from_le_bytes(rng[8..].try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(TensorError::Config(format!(
                "{} trailing bytes after the rng section",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_text,
            entries,
            blob,
            adam_step,
            adam_m,
            adam_v,
            master_seed,
            global_step,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let tmp = path.with_extension("ckpt.tmp");
        let io_err = |e: std::io::Error| {
            TensorError::Config(format!("cannot write {}: {e}", path.display()))
        };
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let bytes = std::fs::read(path).map_err(|e| {
            TensorError::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored values into an already-assembled parameter set,
    /// verifying that names and shapes line up exactly.
    pub fn apply_params(&self, params: &mut ParamSet) -> Result<(), TensorError> {
        if params.len() != self.entries.len() {
            return Err(TensorError::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        let mut offset = 0;
        for (id, (name, shape)) in params.ids().zip(&self.entries) {
            if params.name(id) != name || params.get(id).shape() != &shape[..] {
                return Err(TensorError::Config(format!(
                    "checkpoint entry `{name}` {shape:?} does not match model parameter `{}` {:?}",
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            *params.get_mut(id) =
                Tensor::new(shape.clone(), self.blob[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    pub fn adam_state(&self, params: &ParamSet) -> Result<AdamState, TensorError> {
        AdamState::from_flat(params, self.adam_step, &self.adam_m, &self.adam_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GradStore;
    use crate::train::adam::{adam_step, AdamConfig};

    fn sample_state() -> (ParamSet, AdamState) {
        let mut params = ParamSet::new();
        let a = params.register("enc.w", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        params.register("enc.b", Tensor::vector(vec![-0.5, 0.25, 1e-300]));
        let mut adam = AdamState::new(&params);
        let mut grads = GradStore::zeros_like(&params);
        grads.slot_mut(a).copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.5, -9.0]);
        adam_step(&mut params, &grads, &mut adam, &AdamConfig::default(), 1e-3).unwrap();
        (params, adam)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (params, adam) = sample_state();
        let ck = Checkpoint::capture(&params, &adam, "epochs=3\n", 42, 17);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip_restores_everything_bitwise() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let (params, adam) = sample_state();
        let ck = Checkpoint::capture(&params, &adam, "seed=7\n", 7, 99);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.master_seed, 7);
        assert_eq!(loaded.global_step, 99);

        // restore into a freshly built (differently valued) param set
        let mut fresh = ParamSet::new();
        fresh.register("enc.w", Tensor::zeros(vec![2, 3]));
        fresh.register("enc.b", Tensor::zeros(vec![3]));
        loaded.apply_params(&mut fresh).unwrap();
        for (id_new, id_old) in fresh.ids().zip(params.ids()) {
            let (a, b) = (fresh.get(id_new).data(), params.get(id_old).data());
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        let restored = loaded.adam_state(&fresh).unwrap();
        assert_eq!(restored.step, adam.step);
        assert_eq!(restored.flat_moments(), adam.flat_moments());

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let (params, adam) = sample_state();
        let mut bytes = Checkpoint::capture(&params, &adam, "", 1, 1).to_bytes();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::from_bytes(&corrupt).unwrap_err().to_string().contains("magic"));
        bytes[4] = 200; // version
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_mismatches_are_rejected() {
        let (params, adam) = sample_state();
        let bytes = Checkpoint::capture(&params, &adam, "x=1\n", 1, 1).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());

        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut renamed = ParamSet::new();
        renamed.register("other.w", Tensor::zeros(vec![2, 3]));
        renamed.register("enc.b", Tensor::zeros(vec![3]));
        assert!(ck.apply_params(&mut renamed).is_err());

        let mut reshaped = ParamSet::new();
        reshaped.register("enc.w", Tensor::zeros(vec![3, 2]));
        reshaped.register("enc.b", Tensor::zeros(vec![3]));
        assert!(ck.apply_params(&mut reshaped).is_err());
    }
}
