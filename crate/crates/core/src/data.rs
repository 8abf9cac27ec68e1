//! Time-series datasets, min-max normalization, chronological splits,
//! N-step windows and CSV persistence.
//!
//! Window layout for a start index `s` inside one split:
//!
//! ```text
//! past_y = Y[s-N .. s)      observer input, y_{1-N} .. y_0
//! u, d   = U[s-1 .. s+N-1)  inputs u_0 .. u_{N-1} driving x_0 -> x_N
//! ref_y  = Y[s .. s+N)      targets y_1 .. y_N
//! ```

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default sampling period of the building data, in minutes.
pub const DEFAULT_SAMPLING_MINUTES: u32 = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset<T> {
    /// Zone temperatures, `T x n_y`.
    pub y: Array2<T>,
    /// Mass flows and supply temperatures, `T x n_u`.
    pub u: Array2<T>,
    /// Ambient temperature, `T x n_d`.
    pub d: Array2<T>,
    pub sampling_minutes: u32,
    /// Index of the first row within the original series.
    pub start_index: usize,
}

impl<T: Scalar> TimeSeriesDataset<T> {
    pub fn new(y: Array2<T>, u: Array2<T>, d: Array2<T>, sampling_minutes: u32) -> Result<Self> {
        if y.nrows() != u.nrows() || y.nrows() != d.nrows() {
            return Err(Error::Data(format!(
                "row counts differ: y={}, u={}, d={}",
                y.nrows(),
                u.nrows(),
                d.nrows()
            )));
        }
        if sampling_minutes == 0 {
            return Err(Error::Data("sampling period must be positive".into()));
        }
        Ok(Self {
            y,
            u,
            d,
            sampling_minutes,
            start_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_d(&self) -> usize {
        self.d.ncols()
    }

    /// Contiguous rows `range`, keeping absolute time indices.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            y: self.y.slice(s![range.clone(), ..]).to_owned(),
            u: self.u.slice(s![range.clone(), ..]).to_owned(),
            d: self.d.slice(s![range.clone(), ..]).to_owned(),
            sampling_minutes: self.sampling_minutes,
            start_index: self.start_index + range.start,
        }
    }

    pub fn group(&self, group: ChannelGroup) -> &Array2<T> {
        match group {
            ChannelGroup::Y => &self.y,
            ChannelGroup::U => &self.u,
            ChannelGroup::D => &self.d,
        }
    }

    fn group_mut(&mut self, group: ChannelGroup) -> &mut Array2<T> {
        match group {
            ChannelGroup::Y => &mut self.y,
            ChannelGroup::U => &mut self.u,
            ChannelGroup::D => &mut self.d,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t_index".to_owned()];
        for g in ChannelGroup::ALL {
            h.extend((0..self.group(g).ncols()).map(|i| g.channel_name(i)));
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelGroup {
    Y,
    U,
    D,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 3] = [ChannelGroup::Y, ChannelGroup::U, ChannelGroup::D];

    pub fn prefix(self) -> &'static str {
        match self {
            ChannelGroup::Y => "y",
            ChannelGroup::U => "u",
            ChannelGroup::D => "d",
        }
    }

    /// `y_001`, `u_040`, ... (1-based, zero padded).
    pub fn channel_name(self, index: usize) -> String {
        format!("{}_{:03}", self.prefix(), index + 1)
    }
}

/// Per-channel extrema of one channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRange<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Scalar> ChannelRange<T> {
    pub fn span(&self, channel: usize) -> T {
        self.max[channel] - self.min[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats<T> {
    pub y: ChannelRange<T>,
    pub u: ChannelRange<T>,
    pub d: ChannelRange<T>,
}

impl<T: Scalar> NormalizationStats<T> {
    /// Fits per-channel min/max on `train`. Constant channels are rejected.
    pub fn fit(train: &TimeSeriesDataset<T>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
        }
        let mut degenerate = Vec::new();
        let mut fit_group = |g: ChannelGroup| {
            let data = train.group(g);
            let mut range = ChannelRange {
                min: Vec::with_capacity(data.ncols()),
                max: Vec::with_capacity(data.ncols()),
            };
            for (c, col) in data.axis_iter(Axis(1)).enumerate() {
                let lo = col.iter().copied().fold(T::infinity(), T::min);
                let hi = col.iter().copied().fold(T::neg_infinity(), T::max);
                if !(hi > lo) {
                    degenerate.push(g.channel_name(c));
                }
                range.min.push(lo);
                range.max.push(hi);
            }
            range
        };
        let stats = Self {
            y: fit_group(ChannelGroup::Y),
            u: fit_group(ChannelGroup::U),
            d: fit_group(ChannelGroup::D),
        };
        if degenerate.is_empty() {
            Ok(stats)
        } else {
            Err(Error::DegenerateChannel(degenerate))
        }
    }

    pub fn range(&self, group: ChannelGroup) -> &ChannelRange<T> {
        match group {
            ChannelGroup::Y => &self.y,
            ChannelGroup::U => &self.u,
            ChannelGroup::D => &self.d,
        }
    }

    fn check_dims(&self, ds: &TimeSeriesDataset<T>) -> Result<()> {
        for g in ChannelGroup::ALL {
            let want = self.range(g).min.len();
            let got = ds.group(g).ncols();
            if want != got {
                return Err(Error::shape("normalization channels", (1, want), (1, got)));
            }
        }
        Ok(())
    }

    /// `(x - min) / (max - min)` per channel. Values outside the fitted range
    /// map outside `[0, 1]`.
    pub fn apply(&self, ds: &TimeSeriesDataset<T>) -> Result<TimeSeriesDataset<T>> {
        self.check_dims(ds)?;
        let mut out = ds.clone();
        for g in ChannelGroup::ALL {
            let r = self.range(g);
            for (c, mut col) in out.group_mut(g).axis_iter_mut(Axis(1)).enumerate() {
                let (lo, span) = (r.min[c], r.span(c));
                col.mapv_inplace(|v| (v - lo) / span);
            }
        }
        Ok(out)
    }

    pub fn invert(&self, ds: &TimeSeriesDataset<T>) -> Result<TimeSeriesDataset<T>> {
        self.check_dims(ds)?;
        let mut out = ds.clone();
        for g in ChannelGroup::ALL {
            let r = self.range(g);
            for (c, mut col) in out.group_mut(g).axis_iter_mut(Axis(1)).enumerate() {
                let (lo, span) = (r.min[c], r.span(c));
                col.mapv_inplace(|v| v * span + lo);
            }
        }
        Ok(out)
    }

    /// Writes the `channel,min,max` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["channel", "min", "max"])?;
        for g in ChannelGroup::ALL {
            let r = self.range(g);
            for c in 0..r.min.len() {
                w.write_record([g.channel_name(c), format!("{:.16e}", r.min[c]), format!("{:.16e}", r.max[c])])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["channel", "min", "max"] {
            return Err(parse_err(path, 0, "channel", "expected header channel,min,max"));
        }
        let empty = || ChannelRange {
            min: Vec::new(),
            max: Vec::new(),
        };
        let mut stats = Self {
            y: empty(),
            u: empty(),
            d: empty(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            let name = rec.get(0).unwrap_or_default();
            let group = match name.split('_').next() {
                Some("y") => ChannelGroup::Y,
                Some("u") => ChannelGroup::U,
                Some("d") => ChannelGroup::D,
                _ => return Err(parse_err(path, row, "channel", &format!("unknown channel '{name}'"))),
            };
            let lo = parse_cell::<T>(path, row, "min", rec.get(1))?;
            let hi = parse_cell::<T>(path, row, "max", rec.get(2))?;
            let r = match group {
                ChannelGroup::Y => &mut stats.y,
                ChannelGroup::U => &mut stats.u,
                ChannelGroup::D => &mut stats.d,
            };
            if name != group.channel_name(r.min.len()) {
                return Err(parse_err(path, row, "channel", &format!("expected {}", group.channel_name(r.min.len()))));
            }
            r.min.push(lo);
            r.max.push(hi);
        }
        Ok(stats)
    }
}

/// Sidecar path `<stem>.norm.csv` next to a dataset file.
pub fn norm_sidecar_path(data_path: &Path) -> PathBuf {
    let stem = data_path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data_path.with_file_name(format!("{stem}.norm.csv"))
}

/// Normalizes `ds` with statistics fitted on `ds` itself.
pub fn normalize<T: Scalar>(ds: &TimeSeriesDataset<T>) -> Result<(TimeSeriesDataset<T>, NormalizationStats<T>)> {
    let stats = NormalizationStats::fit(ds)?;
    Ok((stats.apply(ds)?, stats))
}

/// Converts a normalized MSE to Kelvin^2 and a per-output RMSE in Kelvin,
/// using the mean squared channel span of `group`. Exact when spans are
/// uniform; see [`denormalize_channel_mse`] for mixed spans.
pub fn denormalize_mse<T: Scalar>(normalized_mse: T, stats: &NormalizationStats<T>, group: ChannelGroup) -> (T, T) {
    let r = stats.range(group);
    let n = r.min.len().max(1);
    let mean_sq_span: T = (0..r.min.len()).map(|c| r.span(c) * r.span(c)).sum::<T>() / T::of(n as f64);
    let mse = normalized_mse * mean_sq_span;
    (mse, mse.sqrt())
}

/// Per-channel normalized MSEs rescaled by each channel's squared span and averaged.
pub fn denormalize_channel_mse<T: Scalar>(
    per_channel: &[T],
    stats: &NormalizationStats<T>,
    group: ChannelGroup,
) -> Result<(T, T)> {
    let r = stats.range(group);
    if per_channel.len() != r.min.len() {
        return Err(Error::shape("per-channel mse", (1, r.min.len()), (1, per_channel.len())));
    }
    let n = per_channel.len().max(1);
    let mse = per_channel
        .iter()
        .enumerate()
        .map(|(c, &m)| m * r.span(c) * r.span(c))
        .sum::<T>()
        / T::of(n as f64);
    Ok((mse, mse.sqrt()))
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: TimeSeriesDataset<T>,
    pub dev: TimeSeriesDataset<T>,
    pub test: TimeSeriesDataset<T>,
    /// Trailing rows discarded so the three parts are equal.
    pub dropped: usize,
}

impl<T> Splits<T> {
    /// `train`, `dev` or `test`.
    pub fn select(&self, name: &str) -> Result<&TimeSeriesDataset<T>> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}' (train, dev, test)"))),
        }
    }
}

/// Chronological thirds. Trailing rows beyond a multiple of three are dropped
/// with a warning.
pub fn split_even<T: Scalar>(ds: &TimeSeriesDataset<T>, horizon: usize) -> Result<Splits<T>> {
    let total = ds.len();
    if total < 3 * horizon.max(1) {
        return Err(Error::Data(format!(
            "insufficient data: {total} rows for three splits at horizon {horizon}"
        )));
    }
    let part = total / 3;
    let dropped = total - 3 * part;
    if dropped > 0 {
        warn!("dataset length {total} not divisible by 3; dropping last {dropped} rows");
    }
    Ok(Splits {
        train: ds.slice(0..part),
        dev: ds.slice(part..2 * part),
        test: ds.slice(2 * part..3 * part),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T> {
    /// `N x n_y`, rows `y_{1-N} .. y_0`.
    pub past_y: Array2<T>,
    /// `N x n_u`, rows `u_0 .. u_{N-1}`.
    pub u: Array2<T>,
    pub d: Array2<T>,
    /// `N x n_y`, rows `y_1 .. y_N`.
    pub ref_y: Array2<T>,
    /// Index of `y_1` within the split.
    pub start_index: usize,
}

/// Number of windows of horizon `n` at `stride` in a split of length `len`.
pub fn window_count(len: usize, n: usize, stride: usize) -> usize {
    if n == 0 || stride == 0 || len < 2 * n {
        0
    } else {
        (len - 2 * n) / stride + 1
    }
}

pub fn make_windows<T: Scalar>(split: &TimeSeriesDataset<T>, n: usize, stride: usize) -> Result<Vec<WindowBatch<T>>> {
    if n == 0 || stride == 0 {
        return Err(Error::Data(format!("horizon and stride must be positive (N={n}, stride={stride})")));
    }
    let len = split.len();
    if len < 2 * n {
        return Err(Error::Data(format!(
            "horizon {n} too large for a split of {len} rows (need at least {})",
            2 * n
        )));
    }
    let count = window_count(len, n, stride);
    Ok((0..count)
        .map(|k| {
            let s = n + k * stride;
            WindowBatch {
                past_y: split.y.slice(s![s - n..s, ..]).to_owned(),
                u: split.u.slice(s![s - 1..s + n - 1, ..]).to_owned(),
                d: split.d.slice(s![s - 1..s + n - 1, ..]).to_owned(),
                ref_y: split.y.slice(s![s..s + n, ..]).to_owned(),
                start_index: s,
            }
        })
        .collect())
}

/// Windows stacked along the batch axis, one matrix per time step.
#[derive(Debug, Clone)]
pub struct Minibatch<T> {
    /// `B x (N * n_y)` flattened observer windows.
    pub past_y: Array2<T>,
    pub u: Vec<Array2<T>>,
    pub d: Vec<Array2<T>>,
    pub ref_y: Vec<Array2<T>>,
}

impl<T: Scalar> Minibatch<T> {
    pub fn stack(windows: &[&WindowBatch<T>]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("empty minibatch".into()))?;
        let n = first.ref_y.nrows();
        let b = windows.len();
        let gather = |f: &dyn Fn(&WindowBatch<T>) -> &Array2<T>, t: usize| {
            let cols = f(first).ncols();
            let mut m = Array2::zeros((b, cols));
            for (i, w) in windows.iter().enumerate() {
                m.row_mut(i).assign(&f(w).row(t));
            }
            m
        };
        let flat = first.past_y.len();
        let mut past_y = Array2::zeros((b, flat));
        for (i, w) in windows.iter().enumerate() {
            if w.ref_y.nrows() != n || w.past_y.len() != flat {
                return Err(Error::shape("minibatch window", first.ref_y.dim(), w.ref_y.dim()));
            }
            past_y
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(w.past_y.as_standard_layout().as_slice().expect("standard layout")));
        }
        Ok(Self {
            past_y,
            u: (0..n).map(|t| gather(&|w| &w.u, t)).collect(),
            d: (0..n).map(|t| gather(&|w| &w.d, t)).collect(),
            ref_y: (0..n).map(|t| gather(&|w| &w.ref_y, t)).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.past_y.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.ref_y.len()
    }
}

fn parse_err(path: &Path, row: usize, column: &str, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_owned(),
        message: message.to_owned(),
    }
}

fn parse_cell<T: Scalar>(path: &Path, row: usize, column: &str, cell: Option<&str>) -> Result<T> {
    let cell = cell.ok_or_else(|| parse_err(path, row, column, "missing cell"))?;
    cell.trim()
        .parse::<T>()
        .map_err(|_| parse_err(path, row, column, &format!("non-numeric value '{cell}'")))
}

/// Writes `t_index, y_001.., u_001.., d_001..` with 17 significant digits.
pub fn write_csv<T: Scalar>(ds: &TimeSeriesDataset<T>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", ds.header().join(","))?;
    for r in 0..ds.len() {
        write!(out, "{}", ds.start_index + r)?;
        for g in ChannelGroup::ALL {
            for v in ds.group(g).row(r) {
                write!(out, ",{v:.16e}")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset CSV; the sampling period is taken as 15 minutes.
pub fn read_csv<T: Scalar>(path: &Path) -> Result<TimeSeriesDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();

    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(&format!("{prefix}_"))).count();
    let dims = [count("y"), count("u"), count("d")];
    let mut expected = vec!["t_index".to_owned()];
    for (g, &n) in ChannelGroup::ALL.iter().zip(&dims) {
        expected.extend((0..n).map(|i| g.channel_name(i)));
    }
    if dims[0] == 0 {
        return Err(parse_err(path, 0, "y_001", "missing expected column y_001"));
    }
    for (i, want) in expected.iter().enumerate() {
        match header.get(i) {
            Some(h) if h == want => {}
            _ => return Err(parse_err(path, 0, want, &format!("missing expected column {want}"))),
        }
    }
    if header.len() != expected.len() {
        return Err(parse_err(path, 0, &header[expected.len()], "unexpected extra column"));
    }

    let mut values: Vec<Vec<T>> = Vec::new();
    let mut first_index = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(parse_err(
                path,
                row,
                expected.get(rec.len()).map_or("t_index", String::as_str),
                &format!("ragged row with {} cells, expected {}", rec.len(), expected.len()),
            ));
        }
        if first_index.is_none() {
            let t = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, row, "t_index", "non-integer time index"))?;
            first_index = Some(t);
        }
        let mut vals = Vec::with_capacity(expected.len() - 1);
        for (c, name) in expected.iter().enumerate().skip(1) {
            vals.push(parse_cell::<T>(path, row, name, rec.get(c))?);
        }
        values.push(vals);
    }

    let rows = values.len();
    let mut groups = Vec::new();
    let mut offset = 0;
    for &n in &dims {
        let mut m = Array2::zeros((rows, n));
        for (r, vals) in values.iter().enumerate() {
            for c in 0..n {
                m[[r, c]] = vals[offset + c];
            }
        }
        offset += n;
        groups.push(m);
    }
    let d = groups.pop().expect("three groups");
    let u = groups.pop().expect("three groups");
    let y = groups.pop().expect("three groups");
    let mut ds = TimeSeriesDataset::new(y, u, d, DEFAULT_SAMPLING_MINUTES)?;
    ds.start_index = first_index.unwrap_or(0);
    Ok(ds)
}
