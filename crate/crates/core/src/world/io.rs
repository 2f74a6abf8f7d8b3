//! Line-delimited JSON dataset files.
//!
//! `dataset.jsonl` holds one record per line, tagged by `"record"`:
//! `"scene"` records carry a [`Scene`], `"qa"` records a [`QaInstance`].
//! `manifest.json` carries the generating config and seed.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, QaInstance, Scene, WorldConfig};
use crate::GvqgError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub num_scenes: usize,
    pub num_qa: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Scene(Scene),
    Qa(QaInstance),
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), GvqgError> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
    for s in &ds.scenes {
        let line = serde_json::to_string(&Record::Scene(s.clone()))
            .map_err(|e| GvqgError::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    for q in &ds.qa {
        let line = serde_json::to_string(&Record::Qa(q.clone()))
            .map_err(|e| GvqgError::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: ds.seed,
        config: ds.config.clone(),
        num_scenes: ds.scenes.len(),
        num_qa: ds.qa.len(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(|e| GvqgError::Parse(e.to_string()))?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, GvqgError> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| GvqgError::Parse(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(GvqgError::Parse(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let reader = BufReader::new(fs::File::open(dir.join(DATASET_FILE))?);
    let mut scenes = Vec::new();
    let mut qa = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)
            .map_err(|e| GvqgError::Parse(format!("{DATASET_FILE}:{}: {e}", n + 1)))?
        {
            Record::Scene(s) => scenes.push(s),
            Record::Qa(q) => qa.push(q),
        }
    }
    if scenes.len() != manifest.num_scenes || qa.len() != manifest.num_qa {
        return Err(GvqgError::Parse("record counts disagree with manifest".into()));
    }
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        scenes,
        qa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_dataset;

    #[test]
    fn roundtrip_is_byte_identical() {
        let ds = generate_dataset(&WorldConfig { num_scenes: 30, ..Default::default() }, 7).unwrap();
        let a = tempdir("a");
        let b = tempdir("b");
        write_dataset(&ds, &a).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, ds);
        write_dataset(&generate_dataset(&ds.config, 7).unwrap(), &b).unwrap();
        assert_eq!(
            fs::read(a.join(DATASET_FILE)).unwrap(),
            fs::read(b.join(DATASET_FILE)).unwrap()
        );
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let p = std::env::temp_dir().join(format!("gvqg-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&p);
        p
    }
}
