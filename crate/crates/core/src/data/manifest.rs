use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::shard::read_shard;
use super::ImageTextPair;
use crate::error::{Error, Result};

/// Reads a TSV manifest of `image_path<TAB>caption` lines.
///
/// Image paths are relative to the manifest's directory and name a shard
/// file; `file.shard#3` selects record 3, a bare path selects record 0. The
/// manifest caption replaces the shard's. Pairs come back in file order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageTextPair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    let mut cache: HashMap<PathBuf, Vec<ImageTextPair>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (image_ref, caption) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected image_path<TAB>caption".into(),
        })?;
        let (file, index) = match image_ref.rsplit_once('#') {
            Some((f, idx)) => (
                f,
                idx.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad record index {idx:?}"),
                })?,
            ),
            None => (image_ref, 0),
        };
        let shard_path = base.join(file);
        if !cache.contains_key(&shard_path) {
            let records = read_shard(&shard_path)?;
            cache.insert(shard_path.clone(), records);
        }
        let rec = cache[&shard_path].get(index).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("{file} has no record {index}"),
        })?;
        out.push(ImageTextPair {
            image: rec.image.clone(),
            caption: caption.to_string(),
        });
    }
    Ok(out)
}
