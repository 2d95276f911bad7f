//! `.un3d` checkpoints.
//!
//! Layout, all little-endian: magic `UN3D`; u32 levels, base channels,
//! input channels, nx, ny, nz; u64 init seed; u8 input normalisation
//! (0 none, 1 z-score); u64 parameter count; then every parameter tensor
//! in declaration order as f32 values.

use std::path::Path;

use crate::error::{NetError, Result};
use crate::tensor::Tensor5;
use crate::unet::{InputNorm, UNet3d, UNet3dSpec};

pub const UN3D_MAGIC: &[u8; 4] = b"UN3D";
const HEADER_LEN: usize = 4 + 6 * 4 + 8 + 1 + 8;

pub fn to_bytes(net: &UNet3d) -> Vec<u8> {
    let s = net.spec();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * net.parameter_count());
    out.extend_from_slice(UN3D_MAGIC);
    for v in [
        s.levels,
        s.base_channels,
        s.in_channels,
        s.input_dims[0],
        s.input_dims[1],
        s.input_dims[2],
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.push(match s.input_norm {
        InputNorm::None => 0,
        InputNorm::ZScore => 1,
    });
    out.extend_from_slice(&(net.parameter_count() as u64).to_le_bytes());
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn err<T>(offset: usize, detail: impl Into<String>) -> Result<T> {
    Err(NetError::Checkpoint {
        offset,
        detail: detail.into(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < self.pos + N {
            return err(self.bytes.len(), format!("truncated: need {N} bytes at {}", self.pos));
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(a)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<UNet3d> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != UN3D_MAGIC {
        return err(0, "bad magic");
    }
    let levels = r.u32()?;
    let base_channels = r.u32()?;
    let in_channels = r.u32()?;
    let input_dims = [r.u32()?, r.u32()?, r.u32()?];
    let seed = r.u64()?;
    let norm_at = r.pos;
    let input_norm = match r.take::<1>()?[0] {
        0 => InputNorm::None,
        1 => InputNorm::ZScore,
        other => return err(norm_at, format!("unknown normalisation tag {other}")),
    };
    let spec = UNet3dSpec {
        levels,
        base_channels,
        in_channels,
        input_dims,
        seed,
        input_norm,
    };
    spec.validate().or_else(|e| err(4, e.to_string()))?;
    let count_at = r.pos;
    let count = r.u64()?;
    if count != spec.parameter_count() as u64 {
        return err(
            count_at,
            format!("{count} parameters, spec implies {}", spec.parameter_count()),
        );
    }
    let mut params = Vec::new();
    for layer in spec.layers() {
        for shape in [layer.weight_shape(), layer.bias_shape()] {
            let mut data = Vec::with_capacity(shape.len());
            for _ in 0..shape.len() {
                let at = r.pos;
                let v = f32::from_le_bytes(r.take()?);
                if !v.is_finite() {
                    return err(at, "non-finite parameter");
                }
                data.push(v);
            }
            params.push(Tensor5::from_vec(shape, data)?);
        }
    }
    if r.pos != bytes.len() {
        return err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    UNet3d::from_params(&spec, params)
}

pub fn save(net: &UNet3d, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<UNet3d> {
    from_bytes(&std::fs::read(path)?)
}
