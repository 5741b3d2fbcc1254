//! Checkpoint container: "ULTC" magic, format version, flags, NetConfig
//! header, then named arrays as (name length, name bytes, rank, dims,
//! 32-bit little-endian floats).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::NetConfig;
use crate::error::{Result, UltError};

use super::model::{RunningNorm, UltNet};

const MAGIC: &[u8; 4] = b"ULTC";
const VERSION: u32 = 1;

const PRIVILEGED_PREFIXES: [&str; 4] =
    ["priv_enc.", "teacher_head.", "value_head.", "log_std_teacher"];

fn is_privileged(name: &str) -> bool {
    PRIVILEGED_PREFIXES.iter().any(|p| name.starts_with(p))
}

struct NamedArray {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn collect_arrays(net: &mut UltNet, deploy: bool) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    net.visit_params(&mut |name, mut p| {
        if deploy && is_privileged(name) {
            return;
        }
        arrays.push(NamedArray {
            name: name.to_string(),
            dims: p.shape(),
            data: p.value_slice().iter().map(|v| *v as f32).collect(),
        });
    });
    if let Some(norm) = &net.obs_norm {
        arrays.push(NamedArray {
            name: "obs_norm.mean".into(),
            dims: vec![norm.mean.len()],
            data: norm.mean.iter().map(|v| *v as f32).collect(),
        });
        arrays.push(NamedArray {
            name: "obs_norm.var".into(),
            dims: vec![norm.var.len()],
            data: norm.var.iter().map(|v| *v as f32).collect(),
        });
        arrays.push(NamedArray {
            name: "obs_norm.count".into(),
            dims: vec![1],
            data: vec![norm.count as f32],
        });
    }
    arrays
}

pub fn save_checkpoint(net: &mut UltNet, path: &Path, deploy: bool) -> Result<()> {
    let arrays = collect_arrays(net, deploy);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[u8::from(deploy)])?;
    let cfg_json = serde_json::to_vec(&net.cfg)
        .map_err(|e| UltError::Checkpoint(format!("config encode: {e}")))?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in &arrays {
        w.write_all(&(a.name.len() as u32).to_le_bytes())?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&(a.dims.len() as u32).to_le_bytes())?;
        for d in &a.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write the deployable student checkpoint: privilege encoder, teacher head,
/// value head and teacher log-std are omitted and the deploy flag is set.
pub fn export_student(net: &mut UltNet, path: &Path) -> Result<()> {
    save_checkpoint(net, path, true)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub struct LoadedCheckpoint {
    pub net: UltNet,
    pub deploy: bool,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(UltError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(UltError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let deploy = flag[0] != 0;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: NetConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| UltError::Checkpoint(format!("config decode: {e}")))?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| UltError::Checkpoint(format!("array name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        arrays.insert(name, (dims, data));
    }

    let mut net = UltNet::new(&cfg, 0);
    if deploy {
        net.strip_privileged();
    }
    let mut missing = Vec::new();
    net.visit_params(&mut |name, mut p| {
        match arrays.remove(name) {
            Some((dims, data)) => {
                let shape = p.shape();
                let values = p.value_slice();
                if dims != shape || data.len() != values.len() {
                    missing.push(format!("{name}: shape mismatch"));
                    return;
                }
                for (dst, src) in values.iter_mut().zip(data.iter()) {
                    *dst = *src as f64;
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some((_, mean)) = arrays.remove("obs_norm.mean") {
        let var = arrays.remove("obs_norm.var");
        let count = arrays.remove("obs_norm.count");
        let (var, count) = match (var, count) {
            (Some((_, v)), Some((_, c))) => (v, c),
            _ => return Err(UltError::Checkpoint("partial obs_norm arrays".into())),
        };
        net.obs_norm = Some(RunningNorm {
            mean: mean.iter().map(|v| *v as f64).collect(),
            var: var.iter().map(|v| *v as f64).collect(),
            count: count[0] as f64,
        });
    }
    if !missing.is_empty() {
        return Err(UltError::Checkpoint(format!(
            "{}: missing/mismatched arrays: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    if !arrays.is_empty() {
        return Err(UltError::Checkpoint(format!(
            "{}: unknown arrays: {}",
            path.display(),
            arrays.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(LoadedCheckpoint { net, deploy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::Mode;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            embed_dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            obs_dim: 5,
            act_dim: 3,
            window: 6,
            priv_dim: 4,
            priv_hidden: [8, 8],
            teacher_hidden: [8, 8],
            value_hidden: 8,
            obs_norm: false,
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let cfg = tiny_cfg();
        let mut net = UltNet::new(&cfg, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.ultc");
        save_checkpoint(&mut net, &path, false).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(!loaded.deploy);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = Array2::from_shape_fn((4, cfg.token_dim()), |_| rng.gen_range(-1.0..1.0));
        let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, _) = net.forward(&tokens, Some(&e)).unwrap();
        let (b, _) = loaded.net.forward(&tokens, Some(&e)).unwrap();
        // f32 storage quantizes the parameters, so compare within f32 precision
        for (x, y) in a.zhat.iter().zip(b.zhat.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!((a.value.unwrap() - b.value.unwrap()).abs() < 1e-5);
    }

    #[test]
    fn export_strips_privileged_parts() {
        let cfg = tiny_cfg();
        let mut net = UltNet::new(&cfg, 23);
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.ultc");
        let student = dir.path().join("student.ultc");
        save_checkpoint(&mut net, &full, false).unwrap();
        export_student(&mut net, &student).unwrap();

        let full_len = std::fs::metadata(&full).unwrap().len();
        let student_len = std::fs::metadata(&student).unwrap().len();
        assert!(student_len < full_len);

        let loaded = load_checkpoint(&student).unwrap();
        assert!(loaded.deploy);
        assert!(loaded.net.is_deploy_only());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = Array2::from_shape_fn((3, cfg.token_dim()), |_| rng.gen_range(-1.0..1.0));
        let e: Vec<f64> = vec![0.1; cfg.priv_dim];
        // privilege paths are gone
        assert!(loaded.net.forward(&tokens, Some(&e)).is_err());
        // deploy actions match the original student head exactly in f32
        let orig = net
            .act::<ChaCha8Rng>(&tokens, None, Mode::Deploy, false, None)
            .unwrap();
        let dep = loaded
            .net
            .act::<ChaCha8Rng>(&tokens, None, Mode::Deploy, false, None)
            .unwrap();
        for (x, y) in orig.action.iter().zip(dep.action.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ultc");
        std::fs::write(&path, b"NOPE____junk").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(UltError::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cfg = tiny_cfg();
        let mut net = UltNet::new(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ultc");
        save_checkpoint(&mut net, &path, false).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
