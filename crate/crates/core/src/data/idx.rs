use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{ensure, Error, Result};
use crate::layers::{Sample, Target};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Big-endian reader that reports the byte offset of every failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.pos as u64, format!("{}: truncated before {field}", self.what))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != want {
            return Err(Error::format(
                0,
                format!("{}: bad magic {got:#010x}, expected {want:#010x}", self.what),
            ));
        }
        Ok(())
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("{}: truncated, {} of {len} data bytes present", self.what, self.bytes.len() - self.pos),
            ));
        }
        Ok(&self.bytes[self.pos..end])
    }
}

/// Loads an IDX image file (u8 pixels, `count x rows x cols`) and its label
/// file. Images become `1 x rows x cols` tensors scaled to `[0, 1]`; `limit`
/// keeps only the first samples. The class count is the largest label plus one.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let images = fs::read(image_path)?;
    let labels = fs::read(label_path)?;
    parse_idx(&images, &labels, limit)
}

pub(crate) fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let mut ri = Reader {
        bytes: images,
        pos: 0,
        what: "image file",
    };
    ri.magic(IDX_IMAGES_MAGIC)?;
    let count = ri.u32("image count")? as usize;
    let rows = ri.u32("row count")? as usize;
    let cols = ri.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, "image file: zero-sized images"));
    }
    let mut rl = Reader {
        bytes: labels,
        pos: 0,
        what: "label file",
    };
    rl.magic(IDX_LABELS_MAGIC)?;
    let label_count = rl.u32("label count")? as usize;
    if label_count != count {
        return Err(Error::format(
            4,
            format!("label file holds {label_count} labels for {count} images"),
        ));
    }
    let pixels = ri.body(count * rows * cols)?;
    let label_bytes = rl.body(count)?;
    let n = limit.map_or(count, |l| l.min(count));
    let plane = rows * cols;
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let data = pixels[i * plane..(i + 1) * plane].iter().map(|&p| f64::from(p) / 255.0).collect();
            Ok(Sample::class(Tensor::from_vec(vec![1, rows, cols], data)?, usize::from(label_bytes[i])))
        })
        .collect::<Result<_>>()?;
    let classes = label_bytes[..n].iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0);
    Dataset::new(samples, classes)
}

/// Writes class samples as an IDX image/label pair. Every input must have
/// the same number of entries, shaped `rows x cols` or `1 x rows x cols`,
/// with values that are multiples of `1/255` for an exact round trip.
pub fn write_idx(dataset: &Dataset, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = match dataset.samples.first().map(|s| s.input.shape()) {
        Some([r, c]) | Some([1, r, c]) => (*r, *c),
        Some(shape) => return Err(Error::contract(format!("cannot store shape {shape:?} as IDX"))),
        None => (1, 1),
    };
    let n = dataset.samples.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for s in &dataset.samples {
        ensure!(s.input.len() == rows * cols, "all IDX images must share one size");
        ensure!(
            s.input.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "IDX pixels must lie in [0, 1]"
        );
        img.extend(s.input.data().iter().map(|&v| (v * 255.0).round() as u8));
        let Target::Class(c) = s.target else {
            return Err(Error::contract("IDX stores class targets only"));
        };
        ensure!(c <= 255, "label {c} does not fit in a byte");
        lab.push(c as u8);
    }
    fs::write(image_path, img)?;
    fs::write(label_path, lab)?;
    Ok(())
}
