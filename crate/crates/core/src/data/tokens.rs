use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{class_index, lines_with_offsets, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::MASK_TOKEN;
use crate::layers::{Sample, Target};
use crate::numerics::Tensor;

/// Index of every word outside the vocabulary.
pub const OOV_TOKEN: usize = 1;
const FIRST_WORD: usize = 2;

/// Reads lines of `label tokens...` (the label may also end in a comma).
/// The vocabulary keeps the most frequent words, ties broken by first
/// occurrence, so that the total index count including the mask and OOV
/// indices stays within `vocab_limit`. Labels map to classes as in
/// [`super::load_edge_list`]. Sequences are rank-1 tensors of indices.
pub fn load_token_csv(path: impl AsRef<Path>, vocab_limit: usize) -> Result<Dataset> {
    parse_tokens(&fs::read_to_string(path)?, vocab_limit)
}

pub(crate) fn parse_tokens(text: &str, vocab_limit: usize) -> Result<Dataset> {
    let mut rows = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        let (label, rest) = line
            .split_once(|c: char| c == ',' || c.is_whitespace())
            .unwrap_or((line, ""));
        let words: Vec<&str> = rest.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::format(offset, format!("line with label {label:?} has no tokens")));
        }
        rows.push((label, words));
    }
    if rows.is_empty() {
        return Err(Error::format(0, "token file holds no sequences"));
    }

    // (count, first position) per word; rank by count desc then position.
    let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
    for w in rows.iter().flat_map(|(_, ws)| ws) {
        let next = stats.len();
        stats.entry(w).or_insert((0, next)).0 += 1;
    }
    let mut ranked: Vec<(&str, (usize, usize))> = stats.into_iter().collect();
    ranked.sort_by_key(|&(_, (count, first))| (std::cmp::Reverse(count), first));
    ranked.truncate(vocab_limit.saturating_sub(FIRST_WORD));
    let vocab: Vec<String> = ranked.iter().map(|(w, _)| w.to_string()).collect();
    let index: HashMap<&str, usize> = ranked.iter().enumerate().map(|(i, (w, _))| (*w, i + FIRST_WORD)).collect();

    let raw_labels: Vec<&str> = rows.iter().map(|(l, _)| *l).collect();
    let (labels, classes) = class_index(&raw_labels);
    let samples = rows
        .iter()
        .zip(labels)
        .map(|((_, words), label)| {
            let seq = words.iter().map(|w| index.get(w).copied().unwrap_or(OOV_TOKEN) as f64).collect();
            Ok(Sample::class(Tensor::from_vec(vec![words.len()], seq)?, label))
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset::new(samples, classes)?;
    ds.vocab = vocab;
    Ok(ds)
}

/// Writes token samples in the format read by [`load_token_csv`]. Mask and
/// OOV indices are written as `<mask>` and `<unk>`.
pub fn write_token_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for s in &dataset.samples {
        let Target::Class(label) = s.target else {
            return Err(Error::contract("token files store class targets only"));
        };
        write!(out, "{label}").expect("writing to a String");
        for &t in s.input.data() {
            let t = t as usize;
            let word = match t {
                MASK_TOKEN => "<mask>",
                OOV_TOKEN => "<unk>",
                _ => dataset
                    .vocab
                    .get(t - FIRST_WORD)
                    .ok_or_else(|| Error::contract(format!("token {t} is outside the vocabulary")))?,
            };
            write!(out, " {word}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
