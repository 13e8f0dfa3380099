//! The LILC binary example format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LILC"  version:u16  height:u16  width:u16  count:u32
//! count x { ntok:u8  tokens:u16[ntok]  premise:f32[3HW]  positive:f32[3HW]
//!           negative:f32[3HW]  task_id:u16  instruction_id:u16 }
//! ```
//!
//! Raster values are stored as `k / 255` for byte intensities `k`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stream::TaskStream;
use super::{Example, Raster};
use crate::error::{LilacError, Result};

pub const MAGIC: &[u8; 4] = b"LILC";
pub const VERSION: u16 = 1;

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LilacError::Parse(msg.into()))
}

pub fn encode(examples: &[Example], height: usize, width: usize) -> Result<Vec<u8>> {
    let plane = 3 * height * width;
    let mut out = Vec::with_capacity(16 + examples.len() * (3 * 4 * plane + 32));
    write(&mut out, examples.len(), examples.iter(), height, width)?;
    Ok(out)
}

/// Streams `count` examples to `out` in the LILC layout.
pub fn write<'a, W: Write>(
    out: &mut W,
    count: usize,
    examples: impl Iterator<Item = &'a Example>,
    height: usize,
    width: usize,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(height as u16).to_le_bytes())?;
    out.write_all(&(width as u16).to_le_bytes())?;
    out.write_all(&(count as u32).to_le_bytes())?;
    let mut written = 0;
    let mut buf = Vec::new();
    for ex in examples {
        if ex.tokens.len() > u8::MAX as usize {
            return Err(LilacError::Invariant("token sequence longer than 255".into()));
        }
        buf.clear();
        buf.push(ex.tokens.len() as u8);
        for t in &ex.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for r in [&ex.premise, &ex.positive, &ex.negative] {
            if (r.height, r.width) != (height, width) {
                return Err(LilacError::Invariant(format!(
                    "raster {}x{} in a {height}x{width} file",
                    r.height, r.width
                )));
            }
            for &v in &r.data {
                buf.extend_from_slice(&(v as f32 / 255.0).to_le_bytes());
            }
        }
        buf.extend_from_slice(&ex.task_id.to_le_bytes());
        buf.extend_from_slice(&ex.instruction_id.to_le_bytes());
        out.write_all(&buf)?;
        written += 1;
    }
    if written != count {
        return Err(LilacError::Invariant(format!("{written} examples written, header says {count}")));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return parse_err(format!("truncated at byte {} (needed {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn raster(&mut self, height: usize, width: usize) -> Result<Raster> {
        let raw = self.take(3 * height * width * 4)?;
        let mut data = Vec::with_capacity(3 * height * width);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return parse_err(format!("raster value {v} outside [0, 1]"));
            }
            data.push((v * 255.0).round() as u8);
        }
        Ok(Raster { height, width, data })
    }
}

/// Parses a LILC buffer. With `expect` set, files whose raster dimensions
/// differ are rejected.
pub fn decode(bytes: &[u8], expect: Option<(usize, usize)>) -> Result<(usize, usize, Vec<Example>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return parse_err("bad magic");
    }
    let version = c.u16()?;
    if version != VERSION {
        return parse_err(format!("unsupported version {version}"));
    }
    let height = c.u16()? as usize;
    let width = c.u16()? as usize;
    if let Some((h, w)) = expect {
        if (h, w) != (height, width) {
            return parse_err(format!("file holds {height}x{width} rasters, expected {h}x{w}"));
        }
    }
    let count = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
    let mut examples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.take(1)?[0] as usize;
        let tokens = (0..n).map(|_| c.u16()).collect::<Result<Vec<_>>>()?;
        let premise = c.raster(height, width)?;
        let positive = c.raster(height, width)?;
        let negative = c.raster(height, width)?;
        let task_id = c.u16()?;
        let instruction_id = c.u16()?;
        examples.push(Example {
            tokens,
            premise,
            positive,
            negative,
            task_id,
            instruction_id,
        });
    }
    if c.pos != bytes.len() {
        return parse_err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok((height, width, examples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub init_instructions: Vec<u16>,
    pub task_instructions: Vec<Vec<u16>>,
    pub counts: Vec<(String, usize)>,
}

/// Writes `train.lilc`, `val.lilc`, `test.lilc` (initialisation split first,
/// then tasks in stream order) and `manifest.json` into `dir`.
pub fn export_stream(stream: &TaskStream, seed: u64, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let (h, w) = stream.dataset.image_size();
    let mut counts = Vec::new();
    for name in ["train", "val", "test"] {
        fn pick<'a>(s: &'a super::Split, name: &str) -> &'a [Example] {
            match name {
                "train" => &s.train,
                "val" => &s.val,
                _ => &s.test,
            }
        }
        let splits: Vec<&[Example]> = std::iter::once(&stream.init)
            .chain(stream.tasks.iter().map(|t| &t.split))
            .map(|s| pick(s, name))
            .collect();
        let count = splits.iter().map(|s| s.len()).sum();
        counts.push((name.to_string(), count));
        let mut file = BufWriter::new(File::create(dir.join(format!("{name}.lilc")))?);
        write(&mut file, count, splits.iter().flat_map(|s| s.iter()), h, w)?;
        file.flush()?;
    }
    let manifest = Manifest {
        dataset: stream.dataset.to_string(),
        seed,
        height: h,
        width: w,
        init_instructions: stream.init_instructions.clone(),
        task_instructions: stream.tasks.iter().map(|t| t.instructions.clone()).collect(),
        counts,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| LilacError::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn import_file(path: &Path, expect: Option<(usize, usize)>) -> Result<Vec<Example>> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes, expect)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::instruction::enumerate_instructions;
    use crate::data::{generate_example, Dataset};
    use crate::rng::SeedTree;

    fn sample(ds: Dataset, n: usize) -> Vec<Example> {
        let instrs = enumerate_instructions(ds);
        let mut rng = SeedTree::new(2).rng();
        (0..n)
            .map(|i| generate_example(&instrs[i * 7 % 72], &mut rng).unwrap().example)
            .collect()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ex = sample(Dataset::TwoD, 5);
        let bytes = encode(&ex, 56, 56).unwrap();
        let (h, w, back) = decode(&bytes, Some((56, 56))).unwrap();
        assert_eq!((h, w), (56, 56));
        assert_eq!(back, ex);
        assert_eq!(encode(&back, 56, 56).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_dims_are_rejected() {
        let bytes = encode(&sample(Dataset::ThreeD, 2), 64, 64).unwrap();
        for cut in [3, 10, 15, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], None), Err(LilacError::Parse(_))));
        }
        assert!(matches!(decode(&bytes, Some((56, 56))), Err(LilacError::Parse(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, None).is_err());
    }
}
