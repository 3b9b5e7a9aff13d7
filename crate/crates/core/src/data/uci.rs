//! UCI-HAR "Inertial Signals" text layout.
//!
//! ```text
//! root/{train,test}/y_{split}.txt                       one label (1-based) per row
//! root/{train,test}/subject_{split}.txt                 one subject number (1-based) per row
//! root/{train,test}/Inertial Signals/{signal}_{split}.txt   one window per row
//! ```
//!
//! Each signal file contributes one sensor axis; rows hold the window's
//! time steps as space-separated decimals. Archive subject `s` becomes
//! domain id `s - 1`. Corpora written by [`write_layout`] carry a
//! `manifest.json` naming their signals; the official archive does not
//! and is read with [`UCI_SIGNALS`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{Error, Result};

pub const UCI_SIGNALS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

/// Domain ids used for the cross-person UCI experiments.
pub const UCI_SUBJECTS: [usize; 5] = [0, 1, 2, 3, 4];

const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutManifest {
    pub signals: Vec<String>,
    pub window: usize,
    pub num_classes: usize,
}

impl LayoutManifest {
    pub fn uci_har() -> Self {
        Self {
            signals: UCI_SIGNALS.iter().map(|s| s.to_string()).collect(),
            window: 128,
            num_classes: 6,
        }
    }

    fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }
}

/// Load subjects `subjects` (default 0-4) from an official UCI-HAR archive
/// directory, merging its train and test pools.
pub fn load_uci_har(root: &Path, subjects: Option<&[usize]>) -> Result<Vec<DomainDataset>> {
    load_with(root, &LayoutManifest::uci_har(), subjects.unwrap_or(&UCI_SUBJECTS))
}

/// Load a corpus written by [`write_layout`] (or any directory with a
/// manifest). `None` loads every subject present, in id order.
pub fn load_layout(root: &Path, subjects: Option<&[usize]>) -> Result<Vec<DomainDataset>> {
    let mpath = LayoutManifest::path(root);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: LayoutManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: mpath.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    match subjects {
        Some(s) => load_with(root, &manifest, s),
        None => {
            let all = read_pools(root, &manifest)?;
            let ids: Vec<usize> = all.keys().copied().collect();
            assemble(all, &manifest, &ids)
        }
    }
}

fn load_with(root: &Path, manifest: &LayoutManifest, subjects: &[usize]) -> Result<Vec<DomainDataset>> {
    let pools = read_pools(root, manifest)?;
    assemble(pools, manifest, subjects)
}

type Pools = BTreeMap<usize, (Vec<f32>, Vec<usize>)>;

fn assemble(mut pools: Pools, manifest: &LayoutManifest, subjects: &[usize]) -> Result<Vec<DomainDataset>> {
    let w = manifest.signals.len();
    subjects
        .iter()
        .map(|&id| {
            let (samples, labels) = pools
                .remove(&id)
                .ok_or_else(|| Error::Data(format!("subject {id} has no windows")))?;
            DomainDataset::new(id.to_string(), manifest.num_classes, (manifest.window, w), samples, labels)
        })
        .collect()
}

fn read_pools(root: &Path, manifest: &LayoutManifest) -> Result<Pools> {
    let w = manifest.signals.len();
    let h = manifest.window;
    if w == 0 || h == 0 {
        return Err(Error::Data("layout needs at least one signal and a positive window".into()));
    }
    let mut pools: Pools = BTreeMap::new();
    for split in SPLITS {
        let dir = root.join(split);
        let labels_path = dir.join(format!("y_{split}.txt"));
        let labels = read_integers(&labels_path)?;
        for (i, &l) in labels.iter().enumerate() {
            if l < 1 || l > manifest.num_classes {
                return Err(Error::Parse {
                    file: labels_path.clone(),
                    line: i + 1,
                    message: format!("label {l} outside 1..={}", manifest.num_classes),
                });
            }
        }
        let subj_path = dir.join(format!("subject_{split}.txt"));
        let subjects = read_integers(&subj_path)?;
        expect_rows(&subj_path, subjects.len(), labels.len())?;
        if let Some(i) = subjects.iter().position(|&s| s == 0) {
            return Err(Error::Parse {
                file: subj_path,
                line: i + 1,
                message: "subject numbers start at 1".into(),
            });
        }

        let mut axes = Vec::with_capacity(w);
        for sig in &manifest.signals {
            let path = dir.join("Inertial Signals").join(format!("{sig}_{split}.txt"));
            let rows = read_float_rows(&path, h)?;
            expect_rows(&path, rows.len() / h, labels.len())?;
            axes.push(rows);
        }

        for (row, (&label, &subject)) in labels.iter().zip(&subjects).enumerate() {
            let entry = pools.entry(subject - 1).or_default();
            for t in 0..h {
                for axis in &axes {
                    entry.0.push(axis[row * h + t]);
                }
            }
            entry.1.push(label - 1);
        }
    }
    Ok(pools)
}

fn expect_rows(path: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: got + 1,
            message: format!("file has {got} rows, the label file has {want}"),
        });
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_integers(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // labels sometimes appear as "1.0000000e+00" in derived copies
        let v = line
            .parse::<usize>()
            .ok()
            .or_else(|| line.parse::<f64>().ok().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as usize))
            .ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                message: format!("expected an integer, found {line:?}"),
            })?;
        out.push(v);
    }
    Ok(out)
}

/// Flattened rows of exactly `width` floats each.
fn read_float_rows(path: &Path, width: usize) -> Result<Vec<f32>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = out.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                message: format!("not a number: {tok:?}"),
            })?;
            out.push(v);
        }
        let n = out.len() - before;
        if n != width {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                message: format!("row has {n} values, expected {width}"),
            });
        }
    }
    Ok(out)
}

/// Write `domains` in the UCI layout (everything in the train split, the
/// test split left empty) plus a manifest. Subject ids must be numeric.
pub fn write_layout(root: &Path, domains: &[DomainDataset], signals: &[String]) -> Result<()> {
    let first = domains
        .first()
        .ok_or_else(|| Error::Data("nothing to write".into()))?;
    let (h, w) = first.window_shape();
    if signals.len() != w {
        return Err(Error::config(format!("{} signal names for {w} axes", signals.len())));
    }
    let manifest = LayoutManifest {
        signals: signals.to_vec(),
        window: h,
        num_classes: first.num_classes(),
    };

    let mut labels = String::new();
    let mut subjects = String::new();
    let mut axes = vec![String::new(); w];
    for d in domains {
        if d.window_shape() != (h, w) || d.num_classes() != manifest.num_classes {
            return Err(Error::Data(format!("domain {} has a different shape", d.subject())));
        }
        let id: usize = d
            .subject()
            .parse()
            .map_err(|_| Error::Data(format!("subject id {:?} is not numeric", d.subject())))?;
        for win in d.iter() {
            writeln!(labels, "{}", win.label + 1).unwrap();
            writeln!(subjects, "{}", id + 1).unwrap();
            for (c, text) in axes.iter_mut().enumerate() {
                for t in 0..h {
                    if t > 0 {
                        text.push(' ');
                    }
                    write!(text, "{}", win.data[t * w + c]).unwrap();
                }
                text.push('\n');
            }
        }
    }

    for split in SPLITS {
        let sig_dir = root.join(split).join("Inertial Signals");
        fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
        let train = split == "train";
        let pick = |s: &String| if train { s.clone() } else { String::new() };
        write_file(&root.join(split).join(format!("y_{split}.txt")), &pick(&labels))?;
        write_file(&root.join(split).join(format!("subject_{split}.txt")), &pick(&subjects))?;
        for (sig, text) in signals.iter().zip(&axes) {
            write_file(&sig_dir.join(format!("{sig}_{split}.txt")), &pick(text))?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&LayoutManifest::path(root), &(json + "\n"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
