//! Dataset ingestion, standardization and window cutting.
//!
//! Datasets are CSV files with one date column and numeric channels. They are
//! split 60/20/20 chronologically, standardized per channel with statistics
//! fitted on the training split only, and cut into
//! (lookback, decoder-seed, target) windows at stride 1.

pub mod synth;

use std::path::Path;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Matrix of raw or standardized series values (timesteps x channels).
pub type Matrix = Tensor<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel standardization statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A multichannel series with split bounds and (once fitted) a scaler.
#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub channel_names: Vec<String>,
    values: Arc<Matrix>,
    train_end: usize,
    val_end: usize,
    scaler: Option<Scaler>,
}

impl TimeSeriesDataset {
    /// Builds a dataset from a raw matrix, assigning 60/20/20 split bounds.
    pub fn from_matrix(name: &str, channel_names: Vec<String>, values: Matrix) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(
                "dataset",
                format!("expected timesteps x channels, got {:?}", values.shape()),
            ));
        }
        if channel_names.len() != values.dim(1) {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} channel names for {} channels",
                    channel_names.len(),
                    values.dim(1)
                ),
            ));
        }
        let t = values.dim(0);
        Ok(TimeSeriesDataset {
            name: name.to_string(),
            channel_names,
            values: Arc::new(values),
            train_end: t * 6 / 10,
            val_end: t * 8 / 10,
            scaler: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    pub fn split_bounds(&self) -> (usize, usize) {
        (self.train_end, self.val_end)
    }

    pub fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.len()),
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_arc(&self) -> Arc<Matrix> {
        Arc::clone(&self.values)
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    pub fn is_fitted(&self) -> bool {
        self.scaler.is_some()
    }

    /// Fits per-channel mean/std on the training split and transforms the
    /// whole series to z-scores. Calling it twice is an error (the fitted
    /// flag guards against double standardization).
    pub fn fit_transform(mut self) -> Result<Self> {
        if self.scaler.is_some() {
            return Err(Error::contract(format!(
                "dataset '{}' is already standardized",
                self.name
            )));
        }
        let c = self.channels();
        let n = self.train_end;
        if n == 0 {
            return Err(Error::config("empty training split"));
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for t in 0..n {
                s += self.values.at2(t, ch);
            }
            mean[ch] = s / n as f64;
            let mut v = 0.0;
            for t in 0..n {
                let d = self.values.at2(t, ch) - mean[ch];
                v += d * d;
            }
            std[ch] = (v / n as f64).sqrt();
            if std[ch] <= 1e-12 {
                return Err(Error::config(format!(
                    "channel '{}' has zero variance on the training split",
                    self.channel_names[ch]
                )));
            }
        }
        let mut transformed = Matrix::zeros(self.values.shape());
        {
            let src = self.values.data();
            let dst = transformed.data_mut();
            for (i, &v) in src.iter().enumerate() {
                let ch = i % c;
                dst[i] = (v - mean[ch]) / std[ch];
            }
        }
        self.values = Arc::new(transformed);
        self.scaler = Some(Scaler { mean, std });
        Ok(self)
    }

    /// Maps standardized values back to raw units.
    pub fn inverse_transform(&self, m: &Matrix) -> Result<Matrix> {
        let scaler = self
            .scaler
            .as_ref()
            .ok_or_else(|| Error::contract("inverse_transform before fit_transform"))?;
        let c = self.channels();
        if m.rank() != 2 || m.dim(1) != c {
            return Err(Error::dim(
                "inverse_transform",
                format!("expected (_, {c}), got {:?}", m.shape()),
            ));
        }
        let mut out = Matrix::zeros(m.shape());
        for (i, &v) in m.data().iter().enumerate() {
            let ch = i % c;
            out.data_mut()[i] = v * scaler.std[ch] + scaler.mean[ch];
        }
        Ok(out)
    }
}

/// One (lookback, decoder-seed, target) window. Stores a view into the
/// dataset buffer; row blocks are materialized on access.
#[derive(Clone, Debug)]
pub struct WindowSample {
    data: Arc<Matrix>,
    /// Index of the first target row.
    pub origin_index: usize,
    pub lookback_len: usize,
    pub horizon: usize,
    pub label_len: usize,
}

impl WindowSample {
    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    fn rows(&self, start: usize, len: usize) -> Matrix {
        let c = self.data.dim(1);
        let slice = &self.data.data()[start * c..(start + len) * c];
        Matrix::new(&[len, c], slice.to_vec()).expect("window rows in range")
    }

    /// Raw row access without copy: rows [start, start+len) of the backing buffer.
    pub fn raw_rows(&self, start: usize, len: usize) -> &[f64] {
        let c = self.data.dim(1);
        &self.data.data()[start * c..(start + len) * c]
    }

    pub fn lookback(&self) -> Matrix {
        self.rows(self.origin_index - self.lookback_len, self.lookback_len)
    }

    pub fn decoder_seed(&self) -> Matrix {
        self.rows(self.origin_index - self.label_len, self.label_len)
    }

    pub fn target(&self) -> Matrix {
        self.rows(self.origin_index, self.horizon)
    }

    pub fn lookback_start(&self) -> usize {
        self.origin_index - self.lookback_len
    }
}

/// Loads a CSV file with a header, one date column, and numeric channels.
/// Channel order follows the header; row order is preserved. Missing or
/// non-numeric cells are fatal; non-monotone timestamps only warn.
pub fn load_csv(path: impl AsRef<Path>, date_column: &str) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: None,
            detail: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: None,
            detail: e.to_string(),
        })?
        .clone();
    let date_idx = headers
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| Error::Parse {
            path: display.clone(),
            row: None,
            detail: format!("date column '{date_column}' not found in header"),
        })?;
    let channel_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if channel_names.is_empty() {
        return Err(Error::Parse {
            path: display,
            row: None,
            detail: "no numeric channels besides the date column".into(),
        });
    }

    let c = channel_names.len();
    let mut data: Vec<f64> = Vec::new();
    let mut prev_stamp: Option<TimeStamp> = None;
    let mut warned = false;
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            row: Some(row),
            detail: e.to_string(),
        })?;
        for (i, field) in record.iter().enumerate() {
            if i == date_idx {
                let stamp = TimeStamp::parse(field);
                if let (Some(prev), false) = (&prev_stamp, warned) {
                    if stamp < *prev {
                        log::warn!(
                            "{display}: non-monotone timestamp '{field}' at data row {row}"
                        );
                        warned = true;
                    }
                }
                prev_stamp = Some(stamp);
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                row: Some(row),
                detail: format!("cell '{field}' in column '{}' is not numeric", headers[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: display.clone(),
                    row: Some(row),
                    detail: format!("non-finite value in column '{}'", headers[i]),
                });
            }
            data.push(v);
        }
        if data.len() % c != 0 {
            return Err(Error::Parse {
                path: display.clone(),
                row: Some(row),
                detail: format!("expected {c} channel values", ),
            });
        }
    }
    let t = data.len() / c;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into());
    TimeSeriesDataset::from_matrix(&name, channel_names, Matrix::new(&[t, c], data)?)
}

/// Timestamp with a total order: parsed datetimes first, then raw strings
/// lexically (ISO dates compare correctly either way).
#[derive(Clone, Debug, PartialEq, PartialOrd)]
enum TimeStamp {
    Parsed(NaiveDateTime),
    Raw(String),
}

impl TimeStamp {
    fn parse(s: &str) -> Self {
        let s = s.trim();
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
            return TimeStamp::Parsed(dt);
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return TimeStamp::Parsed(d.and_hms_opt(0, 0, 0).unwrap());
        }
        TimeStamp::Raw(s.to_string())
    }
}

/// Shorthand for [`TimeSeriesDataset::fit_transform`].
pub fn fit_transform(ds: TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    ds.fit_transform()
}

/// Cuts every valid window of the split at stride 1.
///
/// A window's target rows lie wholly inside the split; its lookback may
/// reach back into earlier rows (standard rolling evaluation), so the
/// only global constraint on the input side is `origin >= L`.
pub fn make_windows(
    ds: &TimeSeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    label_len: usize,
) -> Result<Vec<WindowSample>> {
    if !ds.is_fitted() {
        return Err(Error::contract("make_windows requires a standardized dataset"));
    }
    if label_len > lookback {
        return Err(Error::config(format!(
            "label_len {label_len} exceeds lookback {lookback}"
        )));
    }
    if horizon == 0 || lookback == 0 {
        return Err(Error::config("lookback and horizon must be positive"));
    }
    let (s0, s1) = ds.split_range(split);
    let first_origin = s0.max(lookback);
    let last_origin = s1.checked_sub(horizon).ok_or_else(|| {
        Error::config(format!("horizon {horizon} exceeds split length {}", s1 - s0))
    })?;
    if first_origin > last_origin {
        let max_l = last_origin;
        return Err(Error::config(format!(
            "lookback {lookback} too large for {split:?} split: no valid window origin \
             (max feasible lookback is {max_l})"
        )));
    }
    let data = ds.values_arc();
    Ok((first_origin..=last_origin)
        .map(|origin| WindowSample {
            data: Arc::clone(&data),
            origin_index: origin,
            lookback_len: lookback,
            horizon,
            label_len,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(t: usize, c: usize) -> TimeSeriesDataset {
        // linear ramps with channel offsets; non-constant everywhere
        let values = Matrix::from_fn(&[t, c], |i| {
            let (row, ch) = (i / c, i % c);
            row as f64 * 0.1 + ch as f64 + (row as f64 * 0.7).sin()
        });
        let names = (0..c).map(|i| format!("ch{i}")).collect();
        TimeSeriesDataset::from_matrix("toy", names, values).unwrap()
    }

    #[test]
    fn split_bounds_are_60_20_20() {
        let ds = toy_dataset(100, 2);
        assert_eq!(ds.split_bounds(), (60, 80));
        let ds = toy_dataset(14400, 7);
        assert_eq!(ds.split_bounds(), (8640, 11520));
    }

    #[test]
    fn fit_transform_standardizes_training_split() {
        let ds = toy_dataset(200, 3).fit_transform().unwrap();
        let (train_end, _) = ds.split_bounds();
        for ch in 0..3 {
            let mut mean = 0.0;
            for t in 0..train_end {
                mean += ds.values().at2(t, ch);
            }
            mean /= train_end as f64;
            let mut var = 0.0;
            for t in 0..train_end {
                let d = ds.values().at2(t, ch) - mean;
                var += d * d;
            }
            let std = (var / train_end as f64).sqrt();
            assert!(mean.abs() < 1e-9, "train mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "train std {std}");
        }
    }

    #[test]
    fn double_fit_is_rejected() {
        let ds = toy_dataset(100, 1).fit_transform().unwrap();
        assert!(matches!(ds.fit_transform(), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_channel_is_fatal_and_named() {
        let values = Matrix::from_fn(&[50, 2], |i| if i % 2 == 0 { (i as f64).sin() } else { 3.5 });
        let ds = TimeSeriesDataset::from_matrix(
            "bad",
            vec!["ok".into(), "flat".into()],
            values,
        )
        .unwrap();
        let err = ds.fit_transform().unwrap_err().to_string();
        assert!(err.contains("flat"), "{err}");
    }

    #[test]
    fn transform_then_inverse_roundtrips() {
        let ds = toy_dataset(120, 2);
        let raw = ds.values().clone();
        let fitted = ds.fit_transform().unwrap();
        let back = fitted.inverse_transform(fitted.values()).unwrap();
        for (a, b) in raw.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn train_scaler_differs_from_whole_series_moments_under_shift() {
        // test rows get a level shift, so whole-series moments move away
        // from the train-fitted scaler
        let values = Matrix::from_fn(&[100, 1], |i| {
            let base = (i as f64 * 0.37).sin();
            if i >= 80 {
                base + 5.0
            } else {
                base
            }
        });
        let ds = TimeSeriesDataset::from_matrix("shift", vec!["x".into()], values.clone())
            .unwrap()
            .fit_transform()
            .unwrap();
        let scaler = ds.scaler().unwrap();
        let whole_mean = values.data().iter().sum::<f64>() / 100.0;
        assert!(
            (scaler.mean[0] - whole_mean).abs() > 0.5,
            "train mean {} vs whole {}",
            scaler.mean[0],
            whole_mean
        );
    }

    #[test]
    fn window_counts_match_hand_enumeration() {
        // T=100, train split [0,60), L=24, H=12 -> origins 24..=48, 25 samples
        let ds = toy_dataset(100, 2).fit_transform().unwrap();
        let w = make_windows(&ds, Split::Train, 24, 12, 6).unwrap();
        assert_eq!(w.len(), 25);
        assert_eq!(w.first().unwrap().origin_index, 24);
        assert_eq!(w.last().unwrap().origin_index, 48);
    }

    #[test]
    fn lookback_equal_to_history_gives_one_sample() {
        let ds = toy_dataset(100, 1).fit_transform().unwrap();
        // train split [0,60): L=48, H=12 -> single origin at 48
        let w = make_windows(&ds, Split::Train, 48, 12, 4).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn oversized_lookback_reports_max_feasible() {
        let ds = toy_dataset(100, 1).fit_transform().unwrap();
        let err = make_windows(&ds, Split::Train, 49, 12, 4)
            .unwrap_err()
            .to_string();
        assert!(err.contains("48"), "{err}");
    }

    #[test]
    fn decoder_seed_is_lookback_suffix_and_targets_never_overlap() {
        let ds = toy_dataset(100, 2).fit_transform().unwrap();
        for w in make_windows(&ds, Split::Val, 24, 8, 6).unwrap() {
            let lb = w.lookback();
            let seed = w.decoder_seed();
            for i in 0..6 {
                for c in 0..2 {
                    assert_eq!(seed.at2(i, c), lb.at2(24 - 6 + i, c));
                }
            }
            assert!(w.lookback_start() + w.lookback_len <= w.origin_index + 1 - 1);
            let (s0, s1) = ds.split_range(Split::Val);
            assert!(w.origin_index >= s0 && w.origin_index + w.horizon <= s1);
        }
    }

    #[test]
    fn val_windows_may_reach_into_train_rows() {
        let ds = toy_dataset(100, 1).fit_transform().unwrap();
        let w = make_windows(&ds, Split::Val, 30, 5, 5).unwrap();
        // first val origin is 60; its lookback starts at 30 < train_end
        assert_eq!(w.first().unwrap().origin_index, 60);
        assert!(w.first().unwrap().lookback_start() < 60);
    }
}
