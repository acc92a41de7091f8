use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::Label;
use crate::error::{Error, Result};
use crate::rng::{seed_all, Component};

/// Side of every corpus tile in pixels.
pub const SOURCE_TILE: usize = 448;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Fs,
    Ffpe,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Fs => "FS",
            Domain::Ffpe => "FFPE",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FS" => Ok(Domain::Fs),
            "FFPE" => Ok(Domain::Ffpe),
            _ => Err(Error::Format(format!("unknown domain '{s}' (expected FS or FFPE)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split '{s}' (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub domain: Domain,
    pub patient_id: String,
    pub split: Split,
}

/// All tiles of a corpus. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Magnification the tiles were captured at.
    pub magnification_note: String,
}

pub const MANIFEST_HEADER: [&str; 4] = ["path", "domain", "patient_id", "split"];

impl CorpusManifest {
    pub fn absolute(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn select(&self, domain: Domain, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.domain == domain && e.split == split).collect()
    }

    /// Every patient must sit in exactly one split.
    pub fn check_patient_split(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            match seen.insert(&e.patient_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(Error::Integrity(format!(
                        "patient '{}' appears in both the {prev} and {} splits",
                        e.patient_id, e.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            w.write_record([p.as_ref(), e.domain.dir_name(), &e.patient_id, &e.split.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest whose paths are relative to the file's directory, and checks the split.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "{}: manifest header must be {}, got {}",
                path.display(),
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let mut entries = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            entries.push(ManifestEntry {
                path: PathBuf::from(&row[0]),
                domain: row[1].parse()?,
                patient_id: row[2].to_string(),
                split: row[3].parse()?,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, entries, magnification_note: "10x".into() };
        m.check_patient_split()?;
        Ok(m)
    }
}

fn read_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 2 {
            return Err(Error::Format(format!("{}: expected rows 'patient_id,split'", path.display())));
        }
        let split: Split = row[1].parse()?;
        if let Some(prev) = out.insert(row[0].to_string(), split) {
            if prev != split {
                return Err(Error::Integrity(format!("patient '{}' is assigned to both {prev} and {split}", &row[0])));
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_split_file(path: &Path, splits: &BTreeMap<String, Split>) -> Result<()> {
    let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["patient_id", "split"]).map_err(csv_err)?;
    for (p, s) in splits {
        w.write_record([p.as_str(), &s.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded 80/20 assignment over the sorted patient set; depends only on the patient ids.
fn assign_splits(patients: &BTreeSet<String>, seed: u64) -> BTreeMap<String, Split> {
    let mut ids: Vec<&String> = patients.iter().collect();
    ids.shuffle(&mut seed_all(seed).stream(Component::SplitAssignment, 0));
    let n = ids.len();
    let n_test = if n >= 2 { ((n as f64 * (1.0 - TRAIN_FRACTION)).round() as usize).max(1) } else { 0 };
    ids.into_iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), if i < n - n_test { Split::Train } else { Split::Test }))
        .collect()
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Builds a manifest from `root/{FS,FFPE}/<patient>/<tile>.png`.
///
/// Splits come from `split_file` when it exists; otherwise they are generated and written there.
pub fn scan_corpus(root: &Path, split_file: &Path, seed: u64) -> Result<CorpusManifest> {
    let mut found = Vec::new();
    for domain in [Domain::Fs, Domain::Ffpe] {
        let dir = root.join(domain.dir_name());
        if !dir.is_dir() {
            continue;
        }
        for patient in sorted_dir(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let pid = patient.file_name().expect("directory entry").to_string_lossy().to_string();
            for tile in sorted_dir(&patient)? {
                if tile.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
                    continue;
                }
                let (w, h) =
                    image::image_dimensions(&tile).map_err(|e| Error::Image { path: tile.clone(), source: e })?;
                if (w as usize, h as usize) != (SOURCE_TILE, SOURCE_TILE) {
                    return Err(Error::Format(format!(
                        "{}: tiles must be {SOURCE_TILE}x{SOURCE_TILE}, got {w}x{h}",
                        tile.display()
                    )));
                }
                let rel = tile.strip_prefix(root).expect("under root").to_path_buf();
                found.push((rel, domain, pid.clone()));
            }
        }
    }
    let patients: BTreeSet<String> = found.iter().map(|(_, _, p)| p.clone()).collect();
    let splits = if split_file.exists() {
        let s = read_split_file(split_file)?;
        if let Some(missing) = patients.iter().find(|p| !s.contains_key(*p)) {
            return Err(Error::Integrity(format!("patient '{missing}' has no entry in {}", split_file.display())));
        }
        s
    } else {
        let s = assign_splits(&patients, seed);
        write_split_file(split_file, &s)?;
        s
    };
    let entries = found
        .into_iter()
        .map(|(path, domain, patient_id)| {
            let split = splits[&patient_id];
            ManifestEntry { path, domain, patient_id, split }
        })
        .collect();
    let m = CorpusManifest { root: root.to_path_buf(), entries, magnification_note: "10x".into() };
    m.check_patient_split()?;
    Ok(m)
}

/// Visiting order of `n` items in `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed_all(seed).stream(Component::DataOrder, epoch));
    order
}

/// Sidecar `path,label` index.
pub fn read_labels(path: &Path) -> Result<BTreeMap<PathBuf, Label>> {
    let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        out.insert(PathBuf::from(&row[0]), row[1].parse()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tile(path: &Path, side: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::new(side, side).save(path).unwrap();
    }

    fn corpus(dir: &Path, patients: &[&str]) {
        for d in ["FS", "FFPE"] {
            for p in patients {
                for t in 0..2 {
                    write_tile(&dir.join(d).join(p).join(format!("t{t}.png")), SOURCE_TILE as u32);
                }
            }
        }
    }

    #[test]
    fn split_file_is_honoured() {
        let dir = tempfile::tempdir().unwrap();
        for t in 0..2 {
            for p in ["P1", "P2"] {
                write_tile(&dir.path().join("FS").join(p).join(format!("t{t}.png")), 448);
            }
        }
        let split = dir.path().join("split.csv");
        std::fs::write(&split, "patient_id,split\nP1,train\nP2,test\n").unwrap();
        let m = scan_corpus(dir.path(), &split, 0).unwrap();
        assert_eq!(m.select(Domain::Fs, Split::Train).len(), 2);
        assert_eq!(m.select(Domain::Fs, Split::Test).len(), 2);
    }

    #[test]
    fn generated_split_is_deterministic_and_keyed_on_patient() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), &["A", "B", "C", "D", "E"]);
        let s1 = dir.path().join("s1.csv");
        let s2 = dir.path().join("s2.csv");
        let a = scan_corpus(dir.path(), &s1, 3).unwrap();
        let b = scan_corpus(dir.path(), &s2, 3).unwrap();
        assert_eq!(a.entries, b.entries);
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
        for e in &a.entries {
            let twin = a.entries.iter().find(|o| o.patient_id == e.patient_id && o.domain != e.domain).unwrap();
            assert_eq!(twin.split, e.split);
        }
        assert_eq!(a.entries.iter().filter(|e| e.split == Split::Test).count(), 4);
    }

    #[test]
    fn conflicting_split_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), &["P1"]);
        let split = dir.path().join("split.csv");
        std::fs::write(&split, "patient_id,split\nP1,train\nP1,test\n").unwrap();
        assert!(matches!(scan_corpus(dir.path(), &split, 0), Err(Error::Integrity(_))));
    }

    #[test]
    fn wrong_tile_size_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_tile(&dir.path().join("FS/P1/t.png"), 100);
        let split = dir.path().join("split.csv");
        assert!(matches!(scan_corpus(dir.path(), &split, 0), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_csv_roundtrip_and_leak_detection() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), &["A", "B"]);
        let m = scan_corpus(dir.path(), &dir.path().join("split.csv"), 1).unwrap();
        let p = dir.path().join("manifest.csv");
        m.write_csv(&p).unwrap();
        assert_eq!(CorpusManifest::read_csv(&p).unwrap().entries, m.entries);
        let mut bad = m.clone();
        bad.entries[0].split = match bad.entries[0].split {
            Split::Train => Split::Test,
            Split::Test => Split::Train,
        };
        bad.write_csv(&p).unwrap();
        assert!(matches!(CorpusManifest::read_csv(&p), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn generated_splits_never_leak_patients(n in 1usize..40, seed in any::<u64>()) {
            let patients: BTreeSet<String> = (0..n).map(|i| format!("P{i}")).collect();
            let s = assign_splits(&patients, seed);
            prop_assert_eq!(s.len(), n);
            let n_test = s.values().filter(|&&v| v == Split::Test).count();
            if n >= 2 {
                prop_assert!(n_test >= 1 && n_test < n);
            }
            let entries: Vec<ManifestEntry> = s.iter().flat_map(|(p, &split)| {
                [Domain::Fs, Domain::Ffpe].map(|domain| ManifestEntry { path: PathBuf::new(), domain, patient_id: p.clone(), split })
            }).collect();
            let m = CorpusManifest { root: PathBuf::new(), entries, magnification_note: String::new() };
            prop_assert!(m.check_patient_split().is_ok());
        }

        #[test]
        fn epoch_order_is_a_pure_permutation(seed in any::<u64>(), epoch in 0u64..100, n in 0usize..50) {
            let a = epoch_order(seed, epoch, n);
            prop_assert_eq!(&a, &epoch_order(seed, epoch, n));
            let mut s = a.clone();
            s.sort_unstable();
            prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }
}
