//! Model checkpoint container: a versioned archive holding the network
//! config and every named parameter array as raw little-endian f32 bytes,
//! optionally followed by optimizer state for resumable training. Writing
//! and re-reading a checkpoint reproduces the model bitwise.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::nn::{ParamRef, Parameterized};

const MAGIC: &[u8; 8] = b"RTDETCK1";
const VERSION: u32 = 1;

/// Optimizer state carried across resumes.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: u64,
    pub velocity: Vec<(String, Vec<f32>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    put_u64(buf, data.len() as u64);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 name in checkpoint".into()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(
    model: &mut Model<f32>,
    path: &Path,
    train_state: Option<&TrainState>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &model.cfg.to_kv());

    let mut params: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params("", &mut |p: ParamRef<'_, f32>| {
        params.push((p.name.clone(), p.shape.clone(), p.v.to_vec()));
    });
    put_u64(&mut buf, params.len() as u64);
    for (name, shape, data) in &params {
        put_str(&mut buf, name);
        buf.push(shape.len() as u8);
        for &d in shape {
            put_u64(&mut buf, d as u64);
        }
        put_f32s(&mut buf, data);
    }

    match train_state {
        None => buf.push(0),
        Some(st) => {
            buf.push(1);
            put_u64(&mut buf, st.step);
            put_u64(&mut buf, st.velocity.len() as u64);
            for (name, data) in &st.velocity {
                put_str(&mut buf, name);
                put_f32s(&mut buf, data);
            }
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<TrainState>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let cfg = NetworkConfig::from_kv(&r.string()?)?;

    let n_params = r.u64()? as usize;
    let mut stored: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let data = r.f32s()?;
        stored.insert(name, (shape, data));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f32>::new(&mut rng, cfg)?;
    let mut missing: Vec<String> = Vec::new();
    model.visit_params("", &mut |p: ParamRef<'_, f32>| {
        match stored.remove(&p.name) {
            Some((shape, data)) if shape == p.shape && data.len() == p.v.len() => {
                p.v.copy_from_slice(&data);
            }
            Some((shape, _)) => missing.push(format!("{} (shape {shape:?})", p.name)),
            None => missing.push(p.name.clone()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: parameters missing or mismatched: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    if !stored.is_empty() {
        let extra: Vec<String> = stored.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "{}: unknown parameters in checkpoint: {}",
            path.display(),
            extra.join(", ")
        )));
    }

    let train_state = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u64()? as usize;
            let mut velocity = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.string()?;
                velocity.push((name, r.f32s()?));
            }
            Some(TrainState { step, velocity })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: bad train-state marker {other}",
                path.display()
            )))
        }
    };
    Ok((model, train_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ShuffleGroups;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut cfg = NetworkConfig::new((64, 64), 3, 4);
        cfg.gsma.shuffle_groups = ShuffleGroups::Count(4);
        Model::new(&mut rng, cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model();
        save_checkpoint(&mut model, &path, None).unwrap();
        let (mut back, state) = load_checkpoint(&path).unwrap();
        assert!(state.is_none());

        let mut orig: Vec<(String, Vec<u32>)> = Vec::new();
        model.visit_params("", &mut |p: ParamRef<'_, f32>| {
            orig.push((p.name.clone(), p.v.iter().map(|v| v.to_bits()).collect()));
        });
        let mut loaded: Vec<(String, Vec<u32>)> = Vec::new();
        back.visit_params("", &mut |p: ParamRef<'_, f32>| {
            loaded.push((p.name.clone(), p.v.iter().map(|v| v.to_bits()).collect()));
        });
        assert_eq!(orig, loaded);

        // saving the loaded model reproduces the file bitwise
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&mut back, &path2, None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn train_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = TrainState {
            step: 123,
            velocity: vec![
                ("a.w".into(), (0..10).map(|_| rng.gen::<f32>()).collect()),
                ("b.w".into(), vec![1.5, -2.5]),
            ],
        };
        save_checkpoint(&mut model, &path, Some(&state)).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        let back = back.unwrap();
        assert_eq!(back.step, 123);
        assert_eq!(back.velocity.len(), 2);
        assert_eq!(back.velocity[1].1, vec![1.5, -2.5]);
    }

    #[test]
    fn bad_files_are_versioned_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn config_kv_round_trips() {
        let mut cfg = NetworkConfig::new((256, 192), 5, 8);
        cfg.gsma.shuffle_groups = ShuffleGroups::ChannelCount;
        cfg.gsma.cross_scale_softmax = false;
        cfg.use_gsma = false;
        cfg.ms_branches = false;
        cfg.anchors[1][2] = (13.25, 77.5);
        let text = cfg.to_kv();
        let back = NetworkConfig::from_kv(&text).unwrap();
        assert_eq!(back.input_size, (256, 192));
        assert_eq!(back.num_classes, 5);
        assert_eq!(back.anchors[1][2], (13.25, 77.5));
        assert_eq!(back.gsma.shuffle_groups, ShuffleGroups::ChannelCount);
        assert!(!back.use_gsma);
        assert!(!back.ms_branches);
        assert_eq!(back.to_kv(), text);
    }
}
