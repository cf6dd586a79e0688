use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::StageError;
use crate::gaf::{export_image, read_matrix_csv, GafImage, GafKind, GafSettings};
use crate::numfmt::fmt_f64;
use crate::preprocess::{Epoch, HbSeries};
use crate::task::Task;

pub const MANIFEST_FILE: &str = "manifest.json";
/// `image_file,task` index of an image directory.
pub const LABELS_FILE: &str = "labels.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> StageError {
    StageError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), StageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// Generic per-stage manifest: what was read, what was written, and a few
/// stage-specific details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub software: String,
    pub version: String,
    pub inputs: Vec<String>,
    /// Files written by this stage, relative to the stage directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl StageManifest {
    pub fn new(stage: &str, inputs: Vec<String>, outputs: Vec<String>, details: serde_json::Value) -> Self {
        StageManifest {
            stage: stage.into(),
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs,
            outputs,
            details,
        }
    }
}

/// Metadata of one epoch. `file` is `None` when samples were not written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub file: Option<String>,
    pub subject_id: String,
    pub trial_index: usize,
    pub task: Task,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub first_offset: i64,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub channels: Vec<String>,
}

impl EpochEntry {
    pub fn describe(epoch: &Epoch, file: Option<String>) -> Self {
        EpochEntry {
            file,
            subject_id: epoch.subject_id.clone(),
            trial_index: epoch.trial_index,
            task: epoch.task,
            t_start_s: epoch.t_start_s,
            t_end_s: epoch.t_end_s,
            first_offset: epoch.first_offset,
            sample_rate_hz: epoch.sample_rate_hz,
            n_samples: epoch.len(),
            channels: epoch.channels.iter().map(|c| c.channel_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochManifest {
    pub kind: String,
    pub version: u32,
    pub epochs: Vec<EpochEntry>,
}

fn epoch_stem(epoch: &Epoch) -> String {
    let subject = if epoch.subject_id.is_empty() { "epoch" } else { &epoch.subject_id };
    format!("{subject}_{:03}", epoch.trial_index)
}

fn write_epoch_csv(epoch: &Epoch, path: &Path) -> Result<(), StageError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = String::from("t");
    for ch in &epoch.channels {
        header.push_str(&format!(",{0}_hbo,{0}_hbr", ch.channel_id));
    }
    writeln!(out, "{header}").map_err(io_err(path))?;
    for i in 0..epoch.len() {
        let mut line = fmt_f64(epoch.sample_time(i));
        for ch in &epoch.channels {
            line.push(',');
            line.push_str(&fmt_f64(ch.hbo[i]));
            line.push(',');
            line.push_str(&fmt_f64(ch.hbr[i]));
        }
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Writes one `<subject>_<trial>.csv` per epoch (columns `t`, then
/// `<ch>_hbo,<ch>_hbr` per channel) plus `manifest.json`. With
/// `save_samples = false` only the manifest is written.
pub fn write_epoch_dir(epochs: &[Epoch], dir: &Path, save_samples: bool) -> Result<EpochManifest, StageError> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let file = if save_samples {
            let name = format!("{}.csv", epoch_stem(epoch));
            write_epoch_csv(epoch, &dir.join(&name))?;
            Some(name)
        } else {
            None
        };
        entries.push(EpochEntry::describe(epoch, file));
    }
    let manifest = EpochManifest {
        kind: "epochs".into(),
        version: 1,
        epochs: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads an epoch CSV. Without `meta` the sample rate and onset offset are
/// recovered from the time column and the task defaults to idle.
pub fn read_epoch_csv(path: &Path, meta: Option<&EpochEntry>) -> Result<Epoch, StageError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("t") || header.len() % 2 != 1 || header.len() < 3 {
        return Err(parse_err(path, "header must be `t` followed by `<ch>_hbo,<ch>_hbr` pairs"));
    }
    let mut ids = Vec::new();
    for pair in header[1..].chunks(2) {
        let id = pair[0].strip_suffix("_hbo");
        if id.is_none() || Some(id.unwrap()) != pair[1].strip_suffix("_hbr") {
            return Err(parse_err(path, format!("columns `{}`, `{}` are not an hbo/hbr pair", pair[0], pair[1])));
        }
        ids.push(id.unwrap().to_string());
    }
    let mut times = Vec::new();
    let mut channels: Vec<HbSeries> = ids
        .iter()
        .map(|id| HbSeries {
            channel_id: id.clone(),
            hbo: Vec::new(),
            hbr: Vec::new(),
        })
        .collect();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, format!("row {}, column `{}`: bad number {cell:?}", row + 1, header[c])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        times.push(values[0]);
        for (ch, pair) in channels.iter_mut().zip(values[1..].chunks(2)) {
            ch.hbo.push(pair[0]);
            ch.hbr.push(pair[1]);
        }
    }
    if times.len() < 2 {
        return Err(parse_err(path, "an epoch needs at least two samples"));
    }
    let epoch = match meta {
        Some(m) => {
            if m.n_samples != times.len() || m.channels != ids {
                return Err(parse_err(path, "samples or channels disagree with the manifest entry"));
            }
            Epoch {
                subject_id: m.subject_id.clone(),
                trial_index: m.trial_index,
                task: m.task,
                t_start_s: m.t_start_s,
                t_end_s: m.t_end_s,
                first_offset: m.first_offset,
                sample_rate_hz: m.sample_rate_hz,
                channels,
            }
        }
        None => {
            let (t0, t1) = (times[0], times[times.len() - 1]);
            if t1 <= t0 {
                return Err(parse_err(path, "time column must increase"));
            }
            let rate = (times.len() - 1) as f64 / (t1 - t0);
            Epoch {
                subject_id: String::new(),
                trial_index: 0,
                task: Task::Idle,
                t_start_s: t0,
                t_end_s: t1,
                first_offset: (t0 * rate).round() as i64,
                sample_rate_hz: rate,
                channels,
            }
        }
    };
    Ok(epoch)
}

/// Reads every epoch listed in `<dir>/manifest.json`, in manifest order.
pub fn read_epoch_dir(dir: &Path) -> Result<Vec<Epoch>, StageError> {
    let manifest: EpochManifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest
        .epochs
        .iter()
        .map(|entry| {
            let file = entry.file.as_ref().ok_or_else(|| {
                StageError::Data(format!(
                    "{}: epoch {} of {} was not saved",
                    dir.display(),
                    entry.trial_index,
                    entry.subject_id
                ))
            })?;
            read_epoch_csv(&dir.join(file), Some(entry))
        })
        .collect()
}

/// An encoded epoch with the identifiers needed for per-subject evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub subject_id: String,
    pub trial_index: usize,
    pub task: Task,
    pub image: GafImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub subject_id: String,
    pub trial_index: usize,
    pub task: Task,
    pub csv: Option<String>,
    pub pgm: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub kind: String,
    pub version: u32,
    pub channel: String,
    pub settings: GafSettings,
    pub labels: Option<String>,
    pub images: Vec<ImageEntry>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes a `.csv`/`.pgm` pair per image, `labels.csv` and `manifest.json`.
/// With `save_images = false` only the manifest is written.
pub fn write_image_dir(
    samples: &[ImageSample],
    channel: &str,
    settings: &GafSettings,
    dir: &Path,
    save_images: bool,
) -> Result<ImageManifest, StageError> {
    create_dir(dir)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = String::from("image_file,task\n");
    for s in samples {
        let (csv, pgm) = if save_images {
            let subject = if s.subject_id.is_empty() { "epoch" } else { &s.subject_id };
            let stem = dir.join(format!("{subject}_{:03}", s.trial_index));
            let (c, p) = export_image(&s.image, &stem)?;
            let c = file_name(&c);
            labels.push_str(&format!("{c},{}\n", s.task));
            (Some(c), Some(file_name(&p)))
        } else {
            (None, None)
        };
        images.push(ImageEntry {
            subject_id: s.subject_id.clone(),
            trial_index: s.trial_index,
            task: s.task,
            csv,
            pgm,
        });
    }
    let labels_file = if save_images {
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels).map_err(io_err(&path))?;
        Some(LABELS_FILE.to_string())
    } else {
        None
    };
    let manifest = ImageManifest {
        kind: "gaf".into(),
        version: 1,
        channel: channel.into(),
        settings: settings.clone(),
        labels: labels_file,
        images,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads an image directory. `manifest.json` supplies subject ids; without
/// it `labels.csv` is used and every image belongs to subject `all`.
pub fn read_image_dir(dir: &Path) -> Result<Vec<ImageSample>, StageError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut kind = GafKind::Gasf;
    let mut channel = String::new();
    let rows: Vec<(String, usize, Task, String)> = if manifest_path.exists() {
        let m: ImageManifest = read_json(&manifest_path)?;
        kind = m.settings.kind;
        channel = m.channel;
        m.images
            .into_iter()
            .map(|e| {
                let csv = e.csv.ok_or_else(|| {
                    StageError::Data(format!("{}: image files were not saved", dir.display()))
                })?;
                Ok((e.subject_id, e.trial_index, e.task, csv))
            })
            .collect::<Result<_, StageError>>()?
    } else {
        let path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("image_file,task") {
            return Err(parse_err(&path, "header must be `image_file,task`"));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let (file, task) = line
                    .split_once(',')
                    .ok_or_else(|| parse_err(&path, format!("row {}: expected two cells", i + 1)))?;
                let task = task.parse::<Task>().map_err(|e| parse_err(&path, format!("row {}: {e}", i + 1)))?;
                Ok(("all".to_string(), i, task, file.trim().to_string()))
            })
            .collect::<Result<_, StageError>>()?
    };
    rows.into_iter()
        .map(|(subject_id, trial_index, task, file)| {
            let (size, matrix) = read_matrix_csv(&dir.join(&file))?;
            Ok(ImageSample {
                subject_id,
                trial_index,
                task,
                image: GafImage {
                    size,
                    kind,
                    channel_id: channel.clone(),
                    task: Some(task),
                    matrix,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(subject: &str, trial: usize) -> Epoch {
        let n = 5;
        Epoch {
            subject_id: subject.into(),
            trial_index: trial,
            task: Task::MentalArithmetic,
            t_start_s: -1.0,
            t_end_s: 1.0,
            first_offset: -2,
            sample_rate_hz: 2.0,
            channels: vec![
                HbSeries {
                    channel_id: "ch1".into(),
                    hbo: (0..n).map(|i| i as f64 * 0.1).collect(),
                    hbr: (0..n).map(|i| -(i as f64) * 1e-7).collect(),
                },
                HbSeries {
                    channel_id: "ch2".into(),
                    hbo: vec![1.0; n],
                    hbr: vec![0.5; n],
                },
            ],
        }
    }

    #[test]
    fn epoch_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let epochs = vec![epoch("S01", 0), epoch("S01", 1), epoch("S02", 0)];
        let m = write_epoch_dir(&epochs, dir.path(), true).unwrap();
        assert_eq!(m.epochs[2].file.as_deref(), Some("S02_000.csv"));
        assert_eq!(read_epoch_dir(dir.path()).unwrap(), epochs);
    }

    #[test]
    fn bare_epoch_csv_recovers_timing() {
        let dir = tempfile::tempdir().unwrap();
        let e = epoch("S01", 3);
        write_epoch_dir(std::slice::from_ref(&e), dir.path(), true).unwrap();
        let back = read_epoch_csv(&dir.path().join("S01_003.csv"), None).unwrap();
        assert_eq!(back.first_offset, -2);
        assert!((back.sample_rate_hz - 2.0).abs() < 1e-12);
        assert_eq!(back.channels, e.channels);
    }

    #[test]
    fn metadata_only_dir_cannot_be_read_back() {
        let dir = tempfile::tempdir().unwrap();
        write_epoch_dir(&[epoch("S01", 0)], dir.path(), false).unwrap();
        assert!(matches!(read_epoch_dir(dir.path()), Err(StageError::Data(_))));
    }

    #[test]
    fn malformed_epoch_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        fs::write(&p, "t,ch1_hbo,ch2_hbr\n0,1,2\n1,1,2\n").unwrap();
        assert!(matches!(read_epoch_csv(&p, None), Err(StageError::Parse { .. })));
    }

    #[test]
    fn image_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = |v: f64, task| GafImage {
            size: 2,
            kind: GafKind::Gasf,
            channel_id: "ch1".into(),
            task: Some(task),
            matrix: vec![v, 0.25, 0.25, -v],
        };
        let samples = vec![
            ImageSample {
                subject_id: "S01".into(),
                trial_index: 0,
                task: Task::MotorImagery,
                image: img(0.5, Task::MotorImagery),
            },
            ImageSample {
                subject_id: "S02".into(),
                trial_index: 4,
                task: Task::Idle,
                image: img(-1.0, Task::Idle),
            },
        ];
        write_image_dir(&samples, "ch1", &GafSettings::default(), dir.path(), true).unwrap();
        let labels = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(labels, "image_file,task\nS01_000.csv,MI\nS02_004.csv,IS\n");
        let back = read_image_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].subject_id, "S02");
        assert_eq!(back[1].image.matrix, samples[1].image.matrix);

        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        let back = read_image_dir(dir.path()).unwrap();
        assert_eq!(back[0].subject_id, "all");
        assert_eq!(back[1].task, Task::Idle);
    }
}
