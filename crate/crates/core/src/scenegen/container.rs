//! `ISEG1` per-sample container.
//!
//! Layout (little-endian): `b"ISEG"`, version byte `0x01`, then four records
//! `image`, `reflectance`, `shading`, `labels`. Each record is a dtype tag
//! (`0x01` f32, `0x02` u8), a rank byte, `rank` u32 dims and the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{Image, LabelMap, Sample, SampleMeta};

pub const ISEG_MAGIC: &[u8; 4] = b"ISEG";
const VERSION: u8 = 0x01;
const TAG_F32: u8 = 0x01;
const TAG_U8: u8 = 0x02;

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ISEG_MAGIC);
    out.push(VERSION);
    for im in [&sample.image, &sample.reflectance, &sample.shading] {
        out.push(TAG_F32);
        out.push(3);
        for d in im.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in im.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let labels = &sample.labels;
    out.push(TAG_U8);
    out.push(2);
    out.extend_from_slice(&(labels.height() as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width() as u32).to_le_bytes());
    out.extend_from_slice(labels.data());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self, name: &str, tag: u8, rank: u8) -> Result<Vec<usize>> {
        let t = self.u8()?;
        let r = self.u8()?;
        if t != tag || r != rank {
            return Err(Error::Format(format!(
                "{name}: expected dtype {tag:#04x} rank {rank}, found dtype {t:#04x} rank {r}"
            )));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn f32_image(&mut self, name: &str) -> Result<Image> {
        let dims = self.header(name, TAG_F32, 3)?;
        let n = dims.iter().product::<usize>();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::new(dims[0], dims[1], dims[2], data)
            .map_err(|e| Error::Format(format!("{name}: {e}")))
    }
}

/// Decodes a container; `num_classes` comes from the dataset manifest.
///
/// Label ids are not range-checked here so that bad data can still be inspected
/// with [`crate::imaging::validate_sample`].
pub fn decode_sample(bytes: &[u8], num_classes: usize, meta: SampleMeta) -> Result<Sample> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        expected: "ISEG".into(),
        found: String::from_utf8_lossy(bytes).chars().take(4).collect(),
    })?;
    if magic != ISEG_MAGIC {
        return Err(Error::BadMagic {
            expected: "ISEG".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let image = r.f32_image("image")?;
    let reflectance = r.f32_image("reflectance")?;
    let shading = r.f32_image("shading")?;
    let dims = r.header("labels", TAG_U8, 2)?;
    let data = r.take(dims[0] * dims[1])?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after labels",
            bytes.len() - r.pos
        )));
    }
    let labels = LabelMap::new_unchecked(dims[0], dims[1], num_classes, data)?;
    Ok(Sample {
        image,
        reflectance,
        shading,
        labels,
        meta,
    })
}

pub fn write_sample_file(path: &Path, sample: &Sample) -> Result<()> {
    fs::write(path, encode_sample(sample))?;
    Ok(())
}

pub fn read_sample_file(path: &Path, num_classes: usize, meta: SampleMeta) -> Result<Sample> {
    let bytes = fs::read(path)?;
    decode_sample(&bytes, num_classes, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{random_scene, render_scene};
    use proptest::prelude::*;

    fn sample() -> Sample {
        render_scene(&random_scene(11, 8, 12, 16, 1), 0).unwrap()
    }

    #[test]
    fn layout_header_bytes() {
        let s = sample();
        let bytes = encode_sample(&s);
        assert_eq!(&bytes[..5], b"ISEG\x01");
        assert_eq!(bytes[5], 0x01);
        assert_eq!(bytes[6], 3);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 16);
        let expected = 5 + 3 * (2 + 12) + (2 + 8) + 4 * (3 + 3 + 1) * 12 * 16 + 12 * 16;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_sample(&sample());
        bytes[0] = b'X';
        match decode_sample(&bytes, 8, SampleMeta::default()) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!(expected, "ISEG");
                assert_eq!(found, "XSEG");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_truncation_are_rejected() {
        let mut bytes = encode_sample(&sample());
        bytes[4] = 2;
        assert!(matches!(
            decode_sample(&bytes, 8, SampleMeta::default()),
            Err(Error::Version(2))
        ));
        let bytes = encode_sample(&sample());
        assert!(matches!(
            decode_sample(&bytes[..bytes.len() - 1], 8, SampleMeta::default()),
            Err(Error::Format(_))
        ));
        assert!(decode_sample(b"IS", 8, SampleMeta::default()).is_err());
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_identical(seed in 0u64..1000, h in 1usize..10, w in 1usize..10) {
            let spec = random_scene(seed, 8, h, w, 1);
            let s = render_scene(&spec, 0).unwrap();
            let bytes = encode_sample(&s);
            let back = decode_sample(&bytes, 8, s.meta).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_sample(&back), bytes);
        }
    }
}
