//! File helpers. JSON is pretty-printed with a trailing newline; NDJSON
//! files hold one compact object per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_ndjson<'a, T, I>(path: impl AsRef<Path>, items: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let path = path.as_ref();
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses NDJSON text; blank lines are skipped.
pub fn parse_ndjson<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_ndjson<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Replays and validates NDJSON episode records.
pub fn parse_episodes(text: &str) -> Result<Vec<crate::env::Episode>> {
    parse_ndjson::<crate::env::EpisodeRecord>(text)?
        .into_iter()
        .map(crate::env::Episode::try_from)
        .collect()
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    dataset: &crate::population::DemonstrationDataset,
) -> Result<()> {
    let records: Vec<_> = dataset.episodes.iter().map(|e| e.to_record()).collect();
    write_ndjson(path, &records)
}

/// Loads one split's episodes; `population` supplies the preference rows.
pub fn read_dataset(
    path: impl AsRef<Path>,
    split: crate::population::Split,
    population: &crate::population::Population,
) -> Result<crate::population::DemonstrationDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds = crate::population::DemonstrationDataset {
        split,
        episodes: parse_episodes(&text)?,
        population: population.split(split).to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn read_population(path: impl AsRef<Path>) -> Result<crate::population::Population> {
    let file: crate::population::PopulationFile = read_json(path)?;
    crate::population::Population::try_from(file)
}
