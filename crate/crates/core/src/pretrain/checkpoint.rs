use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::trainer::TrainConfig;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ingest::FittedSchema;
use crate::transformer::{Model, ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 5] = b"CSPR1";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream: enough to rebuild the generator exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

/// Everything needed to resume training or to run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: u64,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    fitted: FittedSchema,
    rng: RngState,
    epoch: u64,
    adam_step: u64,
    train: TrainConfig,
    tensor_count: usize,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = &self.model.weights;
        let header = Header {
            dtype: T::NAME.to_string(),
            model: self.model.config.clone(),
            fitted: self.model.fitted.clone(),
            rng: self.rng,
            epoch: self.epoch,
            adam_step: self.adam.step,
            train: self.train.clone(),
            tensor_count: 3 * w.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 3 * 4 * w.numel() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in w.iter() {
            write_record(&mut out, name, t.shape(), t.data())?;
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((name, t), data) in w.iter().zip(moments) {
                write_record(&mut out, &format!("adam.{kind}.{name}"), t.shape(), data)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let header = read_header(&mut r)?;
        if header.dtype != T::NAME {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint stores {} tensors, requested {}",
                header.dtype,
                T::NAME
            )));
        }
        let mut records = Vec::with_capacity(header.tensor_count);
        for _ in 0..header.tensor_count {
            records.push(read_record::<T>(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::SchemaMismatch("trailing bytes after tensor records".into()));
        }
        let n = header.tensor_count / 3;
        if n * 3 != header.tensor_count {
            return Err(Error::SchemaMismatch("tensor count is not a multiple of 3".into()));
        }
        let mut moments = records.split_off(n);
        let v_part = moments.split_off(n);
        let names: Vec<String> = records.iter().map(|(n, _)| n.clone()).collect();
        let check = |part: &[(String, Tensor<T>)], kind: &str| -> Result<Vec<Vec<T>>> {
            part.iter()
                .zip(&names)
                .map(|((got, t), name)| {
                    if got != &format!("adam.{kind}.{name}") {
                        return Err(Error::SchemaMismatch(format!(
                            "expected optimizer record for `{name}`, found `{got}`"
                        )));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        let m = check(&moments, "m")?;
        let v = check(&v_part, "v")?;
        let weights = ModelWeights::from_named(records)?;
        let model = Model::from_parts(header.model, header.fitted, weights)?;
        Ok(Self {
            model,
            adam: AdamState {
                m,
                v,
                step: header.adam_step,
            },
            rng: header.rng,
            epoch: header.epoch,
            train: header.train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A checkpoint of either precision, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(&mut Reader { buf: bytes, pos: 0 })?;
        match header.dtype.as_str() {
            "f32" => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?)),
            "f64" => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?)),
            other => Err(Error::SchemaMismatch(format!("unknown dtype `{other}`"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn epoch(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.epoch,
            AnyCheckpoint::F64(c) => c.epoch,
        }
    }

    pub fn fitted(&self) -> &FittedSchema {
        match self {
            AnyCheckpoint::F32(c) => &c.model.fitted,
            AnyCheckpoint::F64(c) => &c.model.fitted,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.model.config,
            AnyCheckpoint::F64(c) => &c.model.config,
        }
    }
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::DTYPE);
    for &x in data {
        x.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let magic = r.take(MAGIC.len()).map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::TruncatedFile)?;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

fn read_record<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let len = r.u16()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::SchemaMismatch("tensor name is not UTF-8".into()))?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64()?).map_err(|_| Error::TruncatedFile)?);
    }
    let dtype = r.u8()?;
    if dtype != T::DTYPE {
        return Err(Error::SchemaMismatch(format!(
            "tensor `{name}` has dtype tag {dtype}, expected {}",
            T::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    let bytes = r.take(numel.checked_mul(T::BYTES).ok_or(Error::TruncatedFile)?)?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok((name, Tensor::new(&shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn sample<T: Real>() -> Checkpoint<T> {
        let fitted = testutil::fitted(2, &[5], true);
        let cfg = ModelConfig {
            layers: 1,
            ..Default::default()
        };
        let model = Model::<T>::new(cfg, fitted, 3).unwrap();
        let mut adam = AdamState::new(&model.weights);
        adam.m[0][0] = T::lit(0.25);
        adam.v[1][0] = T::lit(1e-7);
        adam.step = 4;
        Checkpoint {
            model,
            adam,
            rng: RngState {
                seed: 9,
                stream: 2,
                word_pos: 77,
            },
            epoch: 2,
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample::<f32>();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"CSPR1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.model.weights.tensors().iter().zip(back.model.weights.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let ck = sample::<f64>();
        let any = AnyCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(any, AnyCheckpoint::F64(ck));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample::<f64>();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_are_classified() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        for cut in [9, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::<f32>::from_bytes(&bytes[..cut]),
                Err(Error::TruncatedFile)
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"CS"), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::SchemaMismatch(_))
        ));
    }
}
