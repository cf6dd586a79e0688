use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelSeries, IngestError, Recording, TrialMarker};
use crate::numfmt::fmt_f64;
use crate::task::Task;

pub const MANIFEST_FILE: &str = "manifest.json";
const MARKER_SUFFIX: &str = ".markers.csv";

/// Column mapping used to read a recording CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingFormat {
    pub time_column: String,
    pub wl1_suffix: String,
    pub wl2_suffix: String,
    /// Channels to read, in order. `None` reads every `<ch><wl1_suffix>`
    /// column found in the header.
    pub channels: Option<Vec<String>>,
    /// `None` derives the rate from the time column.
    pub sample_rate_hz: Option<f64>,
    /// `None` uses the file stem.
    pub subject_id: Option<String>,
    /// `None` uses `<stem>.markers.csv` next to the data file.
    pub markers: Option<PathBuf>,
}

impl Default for RecordingFormat {
    fn default() -> Self {
        RecordingFormat {
            time_column: "t".into(),
            wl1_suffix: "_wl1".into(),
            wl2_suffix: "_wl2".into(),
            channels: None,
            sample_rate_hz: None,
            subject_id: None,
            markers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub subject_id: String,
    pub data: String,
    pub markers: String,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub kind: String,
    pub version: u32,
    pub recordings: Vec<RecordingEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IngestError + '_ {
    move |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn default_marker_path(data: &Path) -> PathBuf {
    data.with_file_name(format!("{}{MARKER_SUFFIX}", file_stem(data)))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Reads one recording (data CSV plus marker sidecar) and validates it.
pub fn load_recording(path: &Path, format: &RecordingFormat) -> Result<Recording, IngestError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };

    let time_col = find(&format.time_column)?;
    let channel_ids: Vec<String> = match &format.channels {
        Some(ids) => ids.clone(),
        None => headers
            .iter()
            .filter_map(|h| h.strip_suffix(format.wl1_suffix.as_str()))
            .filter(|id| !id.is_empty())
            .map(str::to_string)
            .collect(),
    };
    let mut columns = Vec::with_capacity(channel_ids.len());
    for id in &channel_ids {
        let c1 = find(&format!("{id}{}", format.wl1_suffix))?;
        let c2 = find(&format!("{id}{}", format.wl2_suffix))?;
        columns.push((c1, c2));
    }

    let mut time = Vec::new();
    let mut wl1: Vec<Vec<f64>> = vec![Vec::new(); channel_ids.len()];
    let mut wl2: Vec<Vec<f64>> = vec![Vec::new(); channel_ids.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let row = i + 1;
        let cell = |col: usize| -> Result<f64, IngestError> {
            let text = record.get(col).unwrap_or("");
            text.parse::<f64>()
                .map_err(|_| IngestError::NonNumericCell {
                    path: path.to_path_buf(),
                    row,
                    column: headers.get(col).unwrap_or("").to_string(),
                    value: text.to_string(),
                })
        };
        time.push(cell(time_col)?);
        for (k, &(c1, c2)) in columns.iter().enumerate() {
            wl1[k].push(cell(c1)?);
            wl2[k].push(cell(c2)?);
        }
    }

    let sample_rate_hz = match format.sample_rate_hz {
        Some(rate) => rate,
        None => rate_from_time(&time)?,
    };
    let marker_path = format
        .markers
        .clone()
        .unwrap_or_else(|| default_marker_path(path));
    let mut markers = load_markers(&marker_path)?;
    markers.sort_by_key(|m| m.onset_sample);

    let channels = channel_ids
        .into_iter()
        .zip(wl1.into_iter().zip(wl2))
        .map(|(channel_id, (od_wl1, od_wl2))| ChannelSeries {
            channel_id,
            od_wl1,
            od_wl2,
        })
        .collect();
    let subject_id = format
        .subject_id
        .clone()
        .unwrap_or_else(|| file_stem(path));
    Recording::new(subject_id, sample_rate_hz, channels, markers)
}

fn rate_from_time(time: &[f64]) -> Result<f64, IngestError> {
    match (time.first(), time.last()) {
        (Some(&t0), Some(&t1)) if time.len() > 1 && t1 > t0 => {
            Ok((time.len() - 1) as f64 / (t1 - t0))
        }
        _ => Err(IngestError::InvalidSampleRate(f64::NAN)),
    }
}

fn load_markers(path: &Path) -> Result<Vec<TrialMarker>, IngestError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let onset_col = col("onset_sample")?;
    let task_col = col("task")?;
    let mut markers = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let row = i + 1;
        let onset_text = record.get(onset_col).unwrap_or("");
        let onset_sample = onset_text
            .parse::<usize>()
            .map_err(|_| IngestError::NonNumericCell {
                path: path.to_path_buf(),
                row,
                column: "onset_sample".into(),
                value: onset_text.to_string(),
            })?;
        let task_text = record.get(task_col).unwrap_or("");
        let task = task_text
            .parse::<Task>()
            .map_err(|_| IngestError::InvalidTask {
                path: path.to_path_buf(),
                row,
                value: task_text.to_string(),
            })?;
        markers.push(TrialMarker { onset_sample, task });
    }
    Ok(markers)
}

/// Writes `<subject_id>.csv` and `<subject_id>.markers.csv` into `dir`.
pub fn write_recording(rec: &Recording, dir: &Path) -> Result<RecordingEntry, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data_name = format!("{}.csv", rec.subject_id);
    let marker_name = format!("{}{MARKER_SUFFIX}", rec.subject_id);

    let data_path = dir.join(&data_name);
    let file = fs::File::create(&data_path).map_err(io_err(&data_path))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = String::from("t");
    for ch in &rec.channels {
        header.push_str(&format!(",{0}_wl1,{0}_wl2", ch.channel_id));
    }
    let mut write = |line: String| writeln!(out, "{line}").map_err(io_err(&data_path));
    write(header)?;
    for i in 0..rec.len() {
        let mut line = fmt_f64(i as f64 / rec.sample_rate_hz);
        for ch in &rec.channels {
            line.push(',');
            line.push_str(&fmt_f64(ch.od_wl1[i]));
            line.push(',');
            line.push_str(&fmt_f64(ch.od_wl2[i]));
        }
        write(line)?;
    }
    out.flush().map_err(io_err(&data_path))?;

    let marker_path = dir.join(&marker_name);
    let mut text = String::from("onset_sample,task\n");
    for m in &rec.markers {
        text.push_str(&format!("{},{}\n", m.onset_sample, m.task));
    }
    fs::write(&marker_path, text).map_err(io_err(&marker_path))?;

    Ok(RecordingEntry {
        subject_id: rec.subject_id.clone(),
        data: data_name,
        markers: marker_name,
        sample_rate_hz: rec.sample_rate_hz,
        n_samples: rec.len(),
        channels: rec.channels.iter().map(|c| c.channel_id.clone()).collect(),
    })
}

/// Writes every recording plus a `manifest.json` that records exact sample
/// rates.
pub fn write_recording_dir(recs: &[Recording], dir: &Path) -> Result<RecordingManifest, IngestError> {
    let recordings = recs
        .iter()
        .map(|r| write_recording(r, dir))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = RecordingManifest {
        kind: "recordings".into(),
        version: 1,
        recordings,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads every recording in `dir`.
///
/// With a `manifest.json` the listed files are read with their recorded
/// sample rates; otherwise every `*.csv` that is not a marker file is read
/// with the default format.
pub fn load_recording_dir(dir: &Path) -> Result<Vec<Recording>, IngestError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: RecordingManifest =
            serde_json::from_str(&text).map_err(|e| IngestError::Manifest {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?;
        return manifest
            .recordings
            .iter()
            .map(|entry| {
                let format = RecordingFormat {
                    channels: Some(entry.channels.clone()),
                    sample_rate_hz: Some(entry.sample_rate_hz),
                    subject_id: Some(entry.subject_id.clone()),
                    markers: Some(dir.join(&entry.markers)),
                    ..RecordingFormat::default()
                };
                load_recording(&dir.join(&entry.data), &format)
            })
            .collect();
    }

    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            p.extension().is_some_and(|e| e == "csv")
                && !name.is_some_and(|n| n.ends_with(MARKER_SUFFIX))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_recording(p, &RecordingFormat::default()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn fixed_rate(rate: f64) -> RecordingFormat {
        RecordingFormat {
            sample_rate_hz: Some(rate),
            ..RecordingFormat::default()
        }
    }

    #[test]
    fn three_row_csv() {
        let dir = tempfile::tempdir().unwrap();
        // At 0.05 Hz a trial needs ceil(0.25) = 1 sample before and
        // ceil(1.25) = 2 samples from the onset on.
        let p = write(
            dir.path(),
            "s1.csv",
            "t,ch1_wl1,ch1_wl2\n0,0.1,0.2\n20,0.3,0.4\r\n40,0.5,0.6\n",
        );
        write(dir.path(), "s1.markers.csv", "onset_sample,task\n1,MA\n");
        let rec = load_recording(&p, &fixed_rate(0.05)).unwrap();
        assert_eq!(rec.len(), 3);
        assert_eq!(rec.subject_id, "s1");
        assert_eq!(rec.channels[0].od_wl1, vec![0.1, 0.3, 0.5]);
        assert_eq!(rec.channels[0].od_wl2, vec![0.2, 0.4, 0.6]);
        assert_eq!(rec.markers[0].task, Task::MentalArithmetic);

        // Rate derived from the time column.
        let derived = load_recording(&p, &RecordingFormat::default()).unwrap();
        assert!((derived.sample_rate_hz - 0.05).abs() < 1e-15);
    }

    #[test]
    fn marker_without_pre_trial_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1.csv", "t,ch1_wl1,ch1_wl2\n0,0,0\n20,0,0\n40,0,0\n");
        write(dir.path(), "s1.markers.csv", "onset_sample,task\n0,MI\n");
        let err = load_recording(&p, &fixed_rate(0.05)).unwrap_err();
        assert!(matches!(
            err,
            IngestError::MarkerOutOfBounds {
                index: 0,
                onset_sample: 0,
                ..
            }
        ));
    }

    #[test]
    fn non_numeric_cell_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1.csv", "t,ch1_wl1,ch1_wl2\n0,0,0\n20,abc,0\n40,0,0\n");
        write(dir.path(), "s1.markers.csv", "onset_sample,task\n");
        match load_recording(&p, &fixed_rate(0.05)).unwrap_err() {
            IngestError::NonNumericCell { row, column, value, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "ch1_wl1");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1.csv", "t,ch1_wl1\n0,0\n");
        write(dir.path(), "s1.markers.csv", "onset_sample,task\n");
        match load_recording(&p, &fixed_rate(1.0)).unwrap_err() {
            IngestError::MissingColumn { column, .. } => assert_eq!(column, "ch1_wl2"),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "s2.csv", "time,ch1_wl1,ch1_wl2\n0,0,0\n");
        write(dir.path(), "s2.markers.csv", "onset_sample,task\n");
        assert!(matches!(
            load_recording(&p, &fixed_rate(1.0)),
            Err(IngestError::MissingColumn { .. })
        ));
    }

    #[test]
    fn bad_task_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1.csv", "t,ch1_wl1,ch1_wl2\n0,0,0\n20,0,0\n40,0,0\n");
        write(dir.path(), "s1.markers.csv", "onset_sample,task\n1,XX\n");
        assert!(matches!(
            load_recording(&p, &fixed_rate(0.05)),
            Err(IngestError::InvalidTask { row: 1, .. })
        ));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(
            "subj",
            0.05,
            vec![ChannelSeries {
                channel_id: "ch7".into(),
                od_wl1: vec![0.1, -1e-300, 1.0 / 3.0, 2.5e20],
                od_wl2: vec![f64::MIN_POSITIVE, 0.0, -7.25, 1e-7],
            }],
            vec![TrialMarker {
                onset_sample: 1,
                task: Task::Idle,
            }],
        )
        .unwrap();
        write_recording_dir(std::slice::from_ref(&rec), dir.path()).unwrap();
        let back = load_recording_dir(dir.path()).unwrap();
        assert_eq!(back, vec![rec.clone()]);

        // Without the manifest the rate comes from the time column.
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        let scanned = load_recording_dir(dir.path()).unwrap();
        assert_eq!(scanned[0].channels, rec.channels);
    }
}
