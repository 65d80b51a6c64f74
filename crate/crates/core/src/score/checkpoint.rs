//! Binary checkpoints: magic, version, hyperparameters, frozen frequencies, then tensors
//! in declaration order. All integers are little-endian `u32`, all reals `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::net::Tensor;
use super::{MixingMode, NetConfig, ScoreError, ScoreNet};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GRIF1";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ScoreError> {
    let v = u32::try_from(v).map_err(|_| ScoreError::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<(), ScoreError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(net: &ScoreNet, mut w: W) -> Result<(), ScoreError> {
    let c = net.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    for v in [c.channels, c.hidden, c.levels, c.convs_per_level, c.patch, c.time_dim] {
        put_u32(&mut w, v)?;
    }
    w.write_all(&[match c.mixing {
        MixingMode::Dense => 0u8,
        MixingMode::Vector => 1u8,
    }])?;
    for v in [c.mu, c.omega_scale, c.sigma_min, c.sigma_max] {
        put_f64(&mut w, v)?;
    }
    put_u32(&mut w, net.omega().len())?;
    for &v in net.omega() {
        put_f64(&mut w, v)?;
    }
    put_u32(&mut w, net.params().len())?;
    for t in net.params() {
        put_u32(&mut w, t.rows)?;
        put_u32(&mut w, t.cols)?;
        for &v in &t.data {
            put_f64(&mut w, v)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ScoreError> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|_| ScoreError::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<usize, ScoreError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64, ScoreError> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, ScoreError> {
        let mut buf = vec![0u8; n.checked_mul(8).ok_or_else(|| ScoreError::Checkpoint("size overflow".into()))?];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| ScoreError::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ScoreNet, ScoreError> {
    let mut rd = Reader { r };
    if &rd.bytes::<5>("magic")? != CHECKPOINT_MAGIC {
        return Err(ScoreError::Checkpoint("bad magic".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION as usize {
        return Err(ScoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = rd.u32("hyperparameters")?;
    }
    let mixing = match rd.bytes::<1>("mixing mode")?[0] {
        0 => MixingMode::Dense,
        1 => MixingMode::Vector,
        other => return Err(ScoreError::Checkpoint(format!("unknown mixing mode {other}"))),
    };
    let config = NetConfig {
        channels: dims[0],
        hidden: dims[1],
        levels: dims[2],
        convs_per_level: dims[3],
        patch: dims[4],
        time_dim: dims[5],
        mixing,
        mu: rd.f64("mu")?,
        omega_scale: rd.f64("frequency scale")?,
        sigma_min: rd.f64("sigma_min")?,
        sigma_max: rd.f64("sigma_max")?,
    };
    config.validate().map_err(|e| ScoreError::Checkpoint(e.to_string()))?;
    let n_omega = rd.u32("frequency count")?;
    if n_omega != config.time_dim / 2 {
        return Err(ScoreError::Checkpoint(format!("{n_omega} frequencies for time dimension {}", config.time_dim)));
    }
    let omega = rd.f64s(n_omega, "frequencies")?;
    let count = rd.u32("tensor count")?;
    let mut params = Vec::with_capacity(count.min(4096));
    for k in 0..count {
        let rows = rd.u32("tensor shape")?;
        let cols = rd.u32("tensor shape")?;
        let data = rd.f64s(rows * cols, &format!("tensor {k}"))?;
        params.push(Tensor { rows, cols, data });
    }
    let mut rest = Vec::new();
    rd.r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ScoreError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    ScoreNet::from_parts(config, omega, params).map_err(|e| ScoreError::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(net: &ScoreNet, path: impl AsRef<Path>) -> Result<(), ScoreError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ScoreNet, ScoreError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = NetConfig {
            hidden: 4,
            levels: 2,
            patch: 3,
            time_dim: 4,
            mixing: MixingMode::Dense,
            ..NetConfig::default()
        };
        let net = ScoreNet::new(cfg, &mut crate::rng::seeded(5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"GRIF1");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.omega(), net.omega());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.param_names(), net.param_names());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[5] = 2;
        assert!(read_checkpoint(&bad[..]).is_err());
    }
}
