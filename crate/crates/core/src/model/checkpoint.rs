//! Flat binary checkpoints.
//!
//! ```text
//! magic        4 bytes  "TMDL"
//! version      u32
//! vocab_size, layer_count, head_count, head_dim, mlp_ratio,
//! train_context_length, seed, inference_cap          8 x u64
//! init_scale   f64
//! variant tag  u8  (0 rope, 1 pi, 2 ntk, 3 yarn)
//! base, p1, p2, p3, p4                               5 x f64
//! param count  u64
//! parameters   f64 x count, tensors in declaration order
//! ```
//!
//! All integers and floats are little-endian. Unused variant slots are zero.

use std::io::{Read, Write};

use super::{ModelConfig, ParamTensor, TinyModel};
use crate::error::{Error, Result};
use crate::rope::{RopeConfig, RotaryVariant};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &TinyModel, mut out: W) -> std::io::Result<()> {
    let c = model.config();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.vocab_size,
        c.layer_count,
        c.head_count,
        c.head_dim,
        c.mlp_ratio,
        c.train_context_length,
    ] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;
    out.write_all(&(c.inference_cap as u64).to_le_bytes())?;
    out.write_all(&c.init_scale.to_le_bytes())?;

    let (tag, slots) = variant_descriptor(&c.variant);
    out.write_all(&[tag])?;
    out.write_all(&c.variant.config().base().to_le_bytes())?;
    for s in slots {
        out.write_all(&s.to_le_bytes())?;
    }

    out.write_all(&(model.param_count() as u64).to_le_bytes())?;
    for p in model.params() {
        for x in &p.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn variant_descriptor(v: &RotaryVariant) -> (u8, [f64; 4]) {
    match *v {
        RotaryVariant::Rope { .. } => (0, [0.0; 4]),
        RotaryVariant::Pi { alpha, .. } => (1, [alpha, 0.0, 0.0, 0.0]),
        RotaryVariant::Ntk { new_base, .. } => (2, [new_base, 0.0, 0.0, 0.0]),
        RotaryVariant::Yarn {
            alpha,
            ramp_low,
            ramp_high,
            temperature,
            ..
        } => (3, [alpha, ramp_low, ramp_high, temperature]),
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("field overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<TinyModel> {
    let mut r = Reader { inner: input };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, not a TMDL checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let vocab_size = r.usize()?;
    let layer_count = r.usize()?;
    let head_count = r.usize()?;
    let head_dim = r.usize()?;
    let mlp_ratio = r.usize()?;
    let train_context_length = r.usize()?;
    let seed = r.u64()?;
    let inference_cap = r.usize()?;
    let init_scale = r.f64()?;

    let [tag] = r.bytes::<1>()?;
    let base = r.f64()?;
    let slots = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let rope = RopeConfig::new(head_dim, base)?;
    let variant = match tag {
        0 => RotaryVariant::rope(rope),
        1 => RotaryVariant::pi(rope, slots[0])?,
        2 => RotaryVariant::ntk(rope, slots[0])?,
        3 => RotaryVariant::yarn(rope, slots[0], slots[1], slots[2], slots[3])?,
        other => return Err(Error::Format(format!("unknown variant tag {other}"))),
    };

    let config = ModelConfig {
        vocab_size,
        layer_count,
        head_count,
        head_dim,
        mlp_ratio,
        train_context_length,
        variant,
        seed,
        init_scale,
        inference_cap,
    };
    config.validate()?;
    let count = r.usize()?;
    if count != config.param_count() {
        return Err(Error::Format(format!(
            "header declares {count} parameters, config implies {}",
            config.param_count()
        )));
    }
    let mut params = Vec::new();
    for (name, shape) in config.tensor_layout() {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push(ParamTensor { name, shape, data });
    }
    let mut rest = Vec::new();
    r.inner
        .read_to_end(&mut rest)
        .map_err(|e| Error::Format(e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    TinyModel::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::small_config;
    use super::*;

    #[test]
    fn round_trip_every_variant() {
        let base = small_config(12);
        let rope = base.variant.config();
        for variant in [
            base.variant,
            RotaryVariant::pi(rope, 4.0).unwrap(),
            RotaryVariant::ntk(rope, 63_000.0).unwrap(),
            RotaryVariant::yarn_default(rope, 4.0, 16).unwrap(),
        ] {
            let mut cfg = base.clone();
            cfg.variant = variant;
            let m = TinyModel::init(cfg).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"TMDL");
            assert_eq!(buf.len(), 4 + 4 + 8 * 8 + 8 + 1 + 5 * 8 + 8 + 8 * m.param_count());
            assert_eq!(read_checkpoint(&buf[..]).unwrap(), m);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = TinyModel::init(small_config(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&long[..]).is_err());
    }
}
