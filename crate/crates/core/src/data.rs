//! Trajectory data types, CSV ingestion, cleaning, resampling, condition
//! labelling and the synthetic scenario generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(&self, other: &Point2, s: f64) -> Point2 {
        Point2::new(self.x + s * (other.x - self.x), self.y + s * (other.y - self.y))
    }
}

/// Number of weather and time-of-day categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpace {
    pub weather: usize,
    pub daypart: usize,
}

impl ConditionSpace {
    pub fn new(weather: usize, daypart: usize) -> Result<Self> {
        if weather == 0 || daypart == 0 {
            return Err(Error::InvalidInput(
                "condition cardinalities must be positive".into(),
            ));
        }
        Ok(Self { weather, daypart })
    }

    /// Number of combined contingency conditions, `C_w * C_d`.
    pub fn combined_count(&self) -> usize {
        self.weather * self.daypart
    }

    /// Width of the concatenated one-hot pair, `C_w + C_d`.
    pub fn embedding_rows(&self) -> usize {
        self.weather + self.daypart
    }

    pub fn code(&self, weather: usize, daypart: usize) -> Result<ConditionCode> {
        if weather >= self.weather || daypart >= self.daypart {
            return Err(Error::InvalidInput(format!(
                "condition ({weather}, {daypart}) outside {}x{}",
                self.weather, self.daypart
            )));
        }
        Ok(ConditionCode { weather, daypart })
    }

    pub fn combined(&self, code: ConditionCode) -> usize {
        code.weather * self.daypart + code.daypart
    }

    pub fn from_combined(&self, c: usize) -> Result<ConditionCode> {
        if c >= self.combined_count() {
            return Err(Error::InvalidInput(format!(
                "combined condition {c} outside [0, {})",
                self.combined_count()
            )));
        }
        Ok(ConditionCode {
            weather: c / self.daypart,
            daypart: c % self.daypart,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = ConditionCode> + '_ {
        (0..self.combined_count()).map(|c| ConditionCode {
            weather: c / self.daypart,
            daypart: c % self.daypart,
        })
    }
}

/// Weather index and time-of-day index of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionCode {
    pub weather: usize,
    pub daypart: usize,
}

impl ConditionCode {
    /// Concatenated one-hot `[f_w; f_d]`.
    pub fn one_hot(&self, space: ConditionSpace) -> Vec<f64> {
        let mut v = vec![0.0; space.embedding_rows()];
        v[self.weather] = 1.0;
        v[space.weather + self.daypart] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub point: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ped_id: u64,
    pub samples: Vec<Sample>,
    pub condition: ConditionCode,
}

impl Trajectory {
    pub fn new(ped_id: u64, samples: Vec<Sample>, condition: ConditionCode) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "trajectory {ped_id} has {} samples, need at least 2",
                samples.len()
            )));
        }
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidInput(format!(
                    "trajectory {ped_id}: timestamps not strictly increasing at t={}",
                    w[1].t
                )));
            }
        }
        if let Some(s) = samples.iter().find(|s| !s.point.is_finite() || !s.t.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "trajectory {ped_id}: non-finite sample at t={}",
                s.t
            )));
        }
        Ok(Self {
            ped_id,
            samples,
            condition,
        })
    }

    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].point.dist(&w[1].point))
            .sum()
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }
}

/// Fixed-length trajectory: `obs_len` observed points followed by the future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledTrajectory {
    pub ped_id: u64,
    pub points: Vec<Point2>,
    pub condition: ConditionCode,
}

impl ResampledTrajectory {
    pub fn first(&self) -> Point2 {
        self.points[0]
    }

    pub fn last(&self) -> Point2 {
        self.points[self.points.len() - 1]
    }
}

/// Half-open clock window `[start_s, end_s)` in seconds of day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl ClockWindow {
    /// Parses `"HH:MM-HH:MM"` where both minutes are inclusive, so
    /// `"12:00-16:59"` covers 12:00:00 up to and including 16:59:59.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("peak window '{s}' is not HH:MM-HH:MM")))?;
        let start_s = parse_clock(a)?;
        let end_s = parse_clock(b)? + 60.0;
        if end_s <= start_s {
            return Err(Error::Config(format!("peak window '{s}' is empty")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn contains(&self, seconds_of_day: f64) -> bool {
        seconds_of_day >= self.start_s && seconds_of_day < self.end_s
    }
}

fn parse_clock(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("bad clock time '{s}'"));
    let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
    let h: u32 = h.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    if h > 23 || m > 59 {
        return Err(bad());
    }
    Ok(f64::from(h * 3600 + m * 60))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Observed prefix length.
    pub obs_len: usize,
    /// Predicted suffix length.
    pub pred_len: usize,
    pub weather_count: usize,
    pub daypart_count: usize,
    /// Peak windows as `"HH:MM-HH:MM"`, minute-inclusive on both ends.
    pub peak_windows: Vec<String>,
    /// Date (`YYYY-MM-DD`) to weather index.
    pub weather_calendar: BTreeMap<String, usize>,
    /// Multiplier applied to raw coordinates to obtain meters.
    pub unit_scale: f64,
    /// Offset added to epoch timestamps before deriving local date and clock time.
    pub utc_offset_s: i64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            obs_len: 20,
            pred_len: 20,
            weather_count: 2,
            daypart_count: 2,
            peak_windows: vec!["12:00-16:59".into()],
            weather_calendar: BTreeMap::new(),
            unit_scale: 1.0,
            utc_offset_s: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("obs_len and pred_len must be at least 1".into()));
        }
        if self.daypart_count != 2 {
            return Err(Error::Config(
                "daypart_count must be 2 (off-peak, peak)".into(),
            ));
        }
        ConditionSpace::new(self.weather_count, self.daypart_count)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut windows = self.windows()?;
        windows.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for w in windows.windows(2) {
            if w[1].start_s < w[0].end_s {
                return Err(Error::Config("peak windows overlap".into()));
            }
        }
        if let Some((d, w)) = self
            .weather_calendar
            .iter()
            .find(|(_, w)| **w >= self.weather_count)
        {
            return Err(Error::Config(format!(
                "calendar date {d} has weather index {w} >= {}",
                self.weather_count
            )));
        }
        if !(self.unit_scale > 0.0) {
            return Err(Error::Config("unit_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn windows(&self) -> Result<Vec<ClockWindow>> {
        self.peak_windows.iter().map(|s| ClockWindow::parse(s)).collect()
    }

    pub fn space(&self) -> ConditionSpace {
        ConditionSpace {
            weather: self.weather_count,
            daypart: self.daypart_count,
        }
    }

    pub fn total_len(&self) -> usize {
        self.obs_len + self.pred_len
    }
}

/// Weather from the calendar, daypart 1 (peak) iff the clock time falls in a
/// peak window, else 0 (off-peak).
pub fn assign_condition(date: &str, seconds_of_day: f64, cfg: &DatasetConfig) -> Result<ConditionCode> {
    let weather = *cfg
        .weather_calendar
        .get(date)
        .ok_or_else(|| Error::InvalidInput(format!("date {date} not in weather calendar")))?;
    let peak = cfg.windows()?.iter().any(|w| w.contains(seconds_of_day));
    cfg.space().code(weather, usize::from(peak))
}

/// Splits an epoch timestamp into local `YYYY-MM-DD` and seconds of day.
pub fn local_date_and_clock(epoch_s: f64, utc_offset_s: i64) -> Result<(String, f64)> {
    let local = epoch_s + utc_offset_s as f64;
    let secs = local.floor();
    let dt = chrono::DateTime::from_timestamp(secs as i64, 0)
        .ok_or_else(|| Error::InvalidInput(format!("timestamp {epoch_s} out of range")))?;
    let date = dt.format("%Y-%m-%d").to_string();
    let sod = local - (secs - (secs as i64).rem_euclid(86_400) as f64);
    Ok((date, sod))
}

/// Where each ingested trajectory gets its condition from.
#[derive(Debug, Clone, Copy)]
pub enum ConditionSource<'a> {
    /// `weather` and `daypart` columns of the file.
    Columns { weather: usize, daypart: usize },
    /// Epoch time of the first sample looked up in the dataset calendar.
    Calendar(&'a DatasetConfig),
}

#[derive(Debug, Clone, Copy)]
pub struct ColumnMap<'a> {
    pub ped_id: usize,
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub has_header: bool,
    pub condition: ConditionSource<'a>,
}

impl ColumnMap<'static> {
    /// Header `ped_id,t,x,y,weather,daypart`.
    pub fn canonical() -> Self {
        Self {
            ped_id: 0,
            t: 1,
            x: 2,
            y: 3,
            has_header: true,
            condition: ConditionSource::Columns {
                weather: 4,
                daypart: 5,
            },
        }
    }
}

impl<'a> ColumnMap<'a> {
    /// Headerless `time,person_id,x,y,z,velocity,motion_angle,facing_angle`.
    pub fn atc(cfg: &'a DatasetConfig) -> Self {
        Self {
            ped_id: 1,
            t: 0,
            x: 2,
            y: 3,
            has_header: false,
            condition: ConditionSource::Calendar(cfg),
        }
    }
}

pub const CANONICAL_HEADER: [&str; 6] = ["ped_id", "t", "x", "y", "weather", "daypart"];

/// Reads a trajectory log, grouping rows by pedestrian id and sorting each
/// pedestrian's samples by time. Trajectories come back ordered by id.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    columns: &ColumnMap<'_>,
    unit_scale: f64,
    space: ConditionSpace,
) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, &path.display().to_string(), columns, unit_scale, space)
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    name: &str,
    columns: &ColumnMap<'_>,
    unit_scale: f64,
    space: ConditionSpace,
) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(columns.has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    struct Raw {
        first_line: u64,
        samples: Vec<(f64, Point2, u64)>,
        condition: Option<ConditionCode>,
    }
    let mut groups: BTreeMap<u64, Raw> = BTreeMap::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: name.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: name.to_string(),
            line,
            msg,
        };
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| perr(format!("missing column {i}")))
        };
        let num = |i: usize| -> Result<f64> {
            let s = field(i)?;
            let v: f64 = s.parse().map_err(|_| perr(format!("column {i}: '{s}' is not a number")))?;
            if !v.is_finite() {
                return Err(perr(format!("column {i}: non-finite value")));
            }
            Ok(v)
        };
        let ped_id: u64 = {
            let s = field(columns.ped_id)?;
            s.parse()
                .map_err(|_| perr(format!("ped_id '{s}' is not an unsigned integer")))?
        };
        let t = num(columns.t)?;
        let p = Point2::new(num(columns.x)? * unit_scale, num(columns.y)? * unit_scale);
        let row_condition = match columns.condition {
            ConditionSource::Columns { weather, daypart } => {
                let idx = |i: usize| -> Result<usize> {
                    let s = field(i)?;
                    s.parse()
                        .map_err(|_| perr(format!("column {i}: '{s}' is not a condition index")))
                };
                Some(space.code(idx(weather)?, idx(daypart)?).map_err(|e| perr(e.to_string()))?)
            }
            ConditionSource::Calendar(_) => None,
        };
        let g = groups.entry(ped_id).or_insert(Raw {
            first_line: line,
            samples: Vec::new(),
            condition: row_condition,
        });
        if row_condition.is_some() && g.condition != row_condition {
            return Err(perr(format!("pedestrian {ped_id} changes condition mid-trajectory")));
        }
        g.samples.push((t, p, line));
    }

    let mut out = Vec::with_capacity(groups.len());
    for (ped_id, mut g) in groups {
        g.samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = g.samples.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: w[1].2,
                msg: format!("duplicate timestamp {} for pedestrian {ped_id}", w[1].0),
            });
        }
        let condition = match (g.condition, columns.condition) {
            (Some(c), _) => c,
            (None, ConditionSource::Calendar(cfg)) => {
                let (date, sod) = local_date_and_clock(g.samples[0].0, cfg.utc_offset_s)?;
                assign_condition(&date, sod, cfg).map_err(|e| Error::Parse {
                    path: name.to_string(),
                    line: g.first_line,
                    msg: e.to_string(),
                })?
            }
            (None, ConditionSource::Columns { .. }) => unreachable!("column conditions are always set"),
        };
        let samples = g
            .samples
            .into_iter()
            .map(|(t, point, _)| Sample { t, point })
            .collect();
        out.push(Trajectory::new(ped_id, samples, condition).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: g.first_line,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes trajectories in the canonical CSV layout. Floats are written in
/// shortest round-trip form so re-ingestion reproduces them exactly.
pub fn write_csv<W: std::io::Write>(writer: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let werr = |e: csv::Error| Error::InvalidInput(format!("csv write: {e}"));
    w.write_record(CANONICAL_HEADER).map_err(werr)?;
    for tr in trajs {
        for s in &tr.samples {
            w.write_record([
                tr.ped_id.to_string(),
                s.t.to_string(),
                s.point.x.to_string(),
                s.point.y.to_string(),
                tr.condition.weather.to_string(),
                tr.condition.daypart.to_string(),
            ])
            .map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv write: {e}")))?;
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(f), trajs)
}

/// Keeps trajectories with at least `min_samples` samples and a path length of
/// at least `min_path_length` meters.
pub fn clean(trajs: Vec<Trajectory>, min_path_length: f64, min_samples: usize) -> Vec<Trajectory> {
    trajs
        .into_iter()
        .filter(|t| t.samples.len() >= min_samples && t.path_length() >= min_path_length)
        .collect()
}

/// Linear interpolation at `n_points` times spaced uniformly over the
/// trajectory's own duration.
pub fn resample(traj: &Trajectory, n_points: usize) -> Result<ResampledTrajectory> {
    if n_points < 2 {
        return Err(Error::InvalidInput("resample needs n_points >= 2".into()));
    }
    let s = &traj.samples;
    let t0 = s[0].t;
    let t1 = s[s.len() - 1].t;
    if !(t1 > t0) {
        return Err(Error::InvalidInput(format!(
            "trajectory {} has zero duration",
            traj.ped_id
        )));
    }
    let mut points = Vec::with_capacity(n_points);
    let mut seg = 0;
    let step = (t1 - t0) / (n_points - 1) as f64;
    for i in 0..n_points {
        if i == 0 {
            points.push(s[0].point);
            continue;
        }
        if i == n_points - 1 {
            points.push(s[s.len() - 1].point);
            continue;
        }
        let t = t0 + step * i as f64;
        while seg + 2 < s.len() && s[seg + 1].t < t {
            seg += 1;
        }
        let (a, b) = (&s[seg], &s[seg + 1]);
        let frac = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        points.push(a.point.lerp(&b.point, frac));
    }
    Ok(ResampledTrajectory {
        ped_id: traj.ped_id,
        points,
        condition: traj.condition,
    })
}

/// Observed prefix of length `obs_len` and the remaining future suffix.
pub fn split_observed_future(rt: &ResampledTrajectory, obs_len: usize) -> Result<(&[Point2], &[Point2])> {
    if obs_len == 0 || obs_len >= rt.points.len() {
        return Err(Error::InvalidInput(format!(
            "observed length {obs_len} must be in [1, {})",
            rt.points.len()
        )));
    }
    Ok(rt.points.split_at(obs_len))
}

/// Per-axis standardization of coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Normalizer {
    pub mean: Point2,
    pub std: Point2,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: Point2::new(0.0, 0.0),
            std: Point2::new(1.0, 1.0),
        }
    }
}

impl Normalizer {
    /// Fits mean and population standard deviation; a degenerate axis keeps
    /// unit scale.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a Point2>) -> Self {
        let (mut n, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in points {
            n += 1.0;
            sx += p.x;
            sy += p.y;
            sxx += p.x * p.x;
            syy += p.y * p.y;
        }
        if n == 0.0 {
            return Self::default();
        }
        let (mx, my) = (sx / n, sy / n);
        let sd = |ss: f64, m: f64| {
            let v = (ss / n - m * m).max(0.0).sqrt();
            if v > 1e-12 { v } else { 1.0 }
        };
        Self {
            mean: Point2::new(mx, my),
            std: Point2::new(sd(sxx, mx), sd(syy, my)),
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new((p.x - self.mean.x) / self.std.x, (p.y - self.mean.y) / self.std.y)
    }

    pub fn invert(&self, p: Point2) -> Point2 {
        Point2::new(p.x * self.std.x + self.mean.x, p.y * self.std.y + self.mean.y)
    }
}

/// Desk-scale floor: destination anchors, an optional shared waypoint, and
/// per-condition destination priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Destination anchors; origins are drawn from the anchors other than the destination.
    pub anchors: Vec<Point2>,
    /// Shared waypoint every path passes through, if any.
    pub via: Option<Point2>,
    pub weather_count: usize,
    pub daypart_count: usize,
    /// One prior over anchors per combined condition.
    pub priors: Vec<Vec<f64>>,
    /// Trajectory count per combined condition.
    pub counts: Vec<usize>,
    /// Per-sample position noise (meters, standard deviation).
    pub noise: f64,
    /// Mean walking speed, m/s.
    pub speed: f64,
    /// Mean interval between raw samples, seconds.
    pub sample_dt: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        let dominant = |k: usize| -> Vec<f64> {
            (0..4).map(|j| if j == k { 0.7 } else { 0.1 }).collect()
        };
        Self {
            anchors: vec![
                Point2::new(-20.0, -20.0),
                Point2::new(20.0, -20.0),
                Point2::new(20.0, 20.0),
                Point2::new(-20.0, 20.0),
            ],
            via: Some(Point2::new(0.0, 0.0)),
            weather_count: 2,
            daypart_count: 2,
            priors: (0..4).map(dominant).collect(),
            counts: vec![1000; 4],
            noise: 0.3,
            speed: 1.3,
            sample_dt: 0.5,
            seed: 7,
        }
    }
}

impl Scenario {
    pub fn space(&self) -> ConditionSpace {
        ConditionSpace {
            weather: self.weather_count,
            daypart: self.daypart_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.anchors.len();
        if k < 2 {
            return Err(Error::InvalidInput("scenario needs at least 2 anchors".into()));
        }
        let space = ConditionSpace::new(self.weather_count, self.daypart_count)?;
        let c = space.combined_count();
        if self.priors.len() != c || self.counts.len() != c {
            return Err(Error::InvalidInput(format!(
                "scenario needs {c} priors and counts, got {} and {}",
                self.priors.len(),
                self.counts.len()
            )));
        }
        for (i, p) in self.priors.iter().enumerate() {
            if p.len() != k || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "prior {i} must be {k} non-negative values"
                )));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("prior {i} sums to {s}, not 1")));
            }
        }
        if self.counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidInput("per-condition counts must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.speed > 0.0 && self.sample_dt > 0.0) {
            return Err(Error::InvalidInput(
                "noise must be >= 0, speed and sample_dt > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded synthetic trajectories. Each pedestrian draws its destination from
/// the prior of its condition, an origin uniformly among the other anchors,
/// and walks origin -> via -> destination with jittered sampling times and
/// Gaussian position noise.
pub fn generate_synthetic(sc: &Scenario) -> Result<Vec<Trajectory>> {
    sc.validate()?;
    let space = sc.space();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let noise = Normal::new(0.0, sc.noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let k = sc.anchors.len();
    let mut out = Vec::with_capacity(sc.counts.iter().sum());
    let mut ped_id = 0u64;
    let mut clock = 0.0;
    for (c, (&count, prior)) in sc.counts.iter().zip(&sc.priors).enumerate() {
        let condition = space.from_combined(c)?;
        let dest_dist = WeightedIndex::new(prior).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for _ in 0..count {
            let dest = dest_dist.sample(&mut rng);
            let others: Vec<usize> = (0..k).filter(|&j| j != dest).collect();
            let origin = *others.choose(&mut rng).expect("k >= 2");
            let mut waypoints = vec![sc.anchors[origin]];
            if let Some(v) = sc.via {
                waypoints.push(v);
            }
            waypoints.push(sc.anchors[dest]);
            let speed = sc.speed * rng.random_range(0.8..1.2);
            let samples = walk(&waypoints, speed, sc.sample_dt, clock, &noise, &mut rng);
            clock += 3.0;
            out.push(Trajectory::new(ped_id, samples, condition)?);
            ped_id += 1;
        }
    }
    Ok(out)
}

fn walk(
    waypoints: &[Point2],
    speed: f64,
    dt: f64,
    t0: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let seg_len: Vec<f64> = waypoints.windows(2).map(|w| w[0].dist(&w[1])).collect();
    let total: f64 = seg_len.iter().sum();
    let duration = (total / speed).max(2.0 * dt);
    let position = |s: f64| -> Point2 {
        let mut rem = s * total;
        for (i, &l) in seg_len.iter().enumerate() {
            if rem <= l || i == seg_len.len() - 1 {
                let frac = if l > 0.0 { (rem / l).min(1.0) } else { 1.0 };
                return waypoints[i].lerp(&waypoints[i + 1], frac);
            }
            rem -= l;
        }
        waypoints[waypoints.len() - 1]
    };
    let jitter = |p: Point2, rng: &mut ChaCha8Rng| {
        Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng))
    };
    let mut samples = vec![Sample {
        t: t0,
        point: jitter(waypoints[0], rng),
    }];
    let mut t = 0.0;
    loop {
        t += dt * rng.random_range(0.7..1.3);
        if t >= duration {
            break;
        }
        let p = position(t / duration);
        samples.push(Sample {
            t: t0 + t,
            point: jitter(p, rng),
        });
    }
    samples.push(Sample {
        t: t0 + duration,
        point: jitter(waypoints[waypoints.len() - 1], rng),
    });
    samples
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64, f64)]) -> Trajectory {
        Trajectory::new(
            1,
            points
                .iter()
                .map(|&(t, x, y)| Sample {
                    t,
                    point: Point2::new(x, y),
                })
                .collect(),
            ConditionCode { weather: 0, daypart: 0 },
        )
        .unwrap()
    }

    #[test]
    fn trajectory_rejects_bad_samples() {
        let c = ConditionCode { weather: 0, daypart: 0 };
        let s = |t: f64| Sample { t, point: Point2::new(0.0, 0.0) };
        assert!(Trajectory::new(0, vec![s(0.0)], c).is_err());
        assert!(Trajectory::new(0, vec![s(1.0), s(1.0)], c).is_err());
        assert!(Trajectory::new(0, vec![s(1.0), s(0.5)], c).is_err());
    }

    #[test]
    fn ingest_mm_units() {
        let data = "ped_id,t,x,y,weather,daypart\n5,0.0,1000,2000,1,0\n5,1.0,1500,2000,1,0\n5,2.0,2000,2500,1,0\n";
        let out = ingest_reader(
            data.as_bytes(),
            "mem",
            &ColumnMap::canonical(),
            0.001,
            ConditionSpace::new(2, 2).unwrap(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples.len(), 3);
        assert_eq!(out[0].samples[2].point, Point2::new(2.0, 2.5));
        assert_eq!(out[0].condition, ConditionCode { weather: 1, daypart: 0 });
    }

    #[test]
    fn ingest_sorts_out_of_order_rows() {
        let data = "ped_id,t,x,y,weather,daypart\n1,2.0,2,0,0,0\n1,0.0,0,0,0,0\n1,1.0,1,0,0,0\n";
        let out = ingest_reader(
            data.as_bytes(),
            "mem",
            &ColumnMap::canonical(),
            1.0,
            ConditionSpace::new(2, 2).unwrap(),
        )
        .unwrap();
        let ts: Vec<f64> = out[0].samples.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn ingest_errors_carry_line_numbers() {
        let space = ConditionSpace::new(2, 2).unwrap();
        let bad = "ped_id,t,x,y,weather,daypart\n1,0.0,0,0,0,0\n1,oops,1,0,0,0\n";
        match ingest_reader(bad.as_bytes(), "f.csv", &ColumnMap::canonical(), 1.0, space) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let dup = "ped_id,t,x,y,weather,daypart\n1,0.0,0,0,0,0\n1,1.0,1,0,0,0\n1,0.0,2,0,0,0\n";
        match ingest_reader(dup.as_bytes(), "f.csv", &ColumnMap::canonical(), 1.0, space) {
            Err(Error::Parse { line, msg, .. }) => {
                assert!(msg.contains("duplicate"));
                assert!(line == 2 || line == 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        let empty = "ped_id,t,x,y,weather,daypart\n";
        assert!(ingest_reader(empty.as_bytes(), "f.csv", &ColumnMap::canonical(), 1.0, space)
            .unwrap()
            .is_empty());
        assert!(ingest_reader("".as_bytes(), "f.csv", &ColumnMap::canonical(), 1.0, space)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ingest_atc_layout_uses_calendar() {
        let mut cfg = DatasetConfig::default();
        // 2013-05-22 13:30:00 UTC
        cfg.weather_calendar.insert("2013-05-22".into(), 1);
        let t0 = 1_369_229_400.0;
        let data = format!(
            "{t0},9,1000,2000,1700,500,0.1,0.2\n{},9,2000,2000,1700,500,0.1,0.2\n",
            t0 + 0.5
        );
        let out = ingest_reader(data.as_bytes(), "atc", &ColumnMap::atc(&cfg), 0.001, cfg.space()).unwrap();
        assert_eq!(out[0].ped_id, 9);
        assert_eq!(out[0].condition, ConditionCode { weather: 1, daypart: 1 });
        assert_eq!(out[0].samples[1].point, Point2::new(2.0, 2.0));
    }

    #[test]
    fn clean_filters_by_length_and_samples() {
        let still = traj(&[(0.0, 1.0, 1.0), (1.0, 1.0, 1.0)]);
        let line = traj(&[(0.0, 0.0, 0.0), (5.0, 5.0, 0.0), (10.0, 10.0, 0.0)]);
        let kept = clean(vec![still, line.clone()], 1.0, 2);
        assert_eq!(kept, vec![line.clone()]);
        assert!(clean(vec![line], 1.0, 4).is_empty());
    }

    #[test]
    fn resample_straight_segment() {
        let t = traj(&[(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        let r = resample(&t, 5).unwrap();
        let xs: Vec<f64> = r.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn resample_identity_on_uniform_input() {
        let pts: Vec<(f64, f64, f64)> = (0..7).map(|i| (i as f64 * 0.5, (i * i) as f64, -(i as f64))).collect();
        let t = traj(&pts);
        let r = resample(&t, 7).unwrap();
        for (p, q) in r.points.iter().zip(&pts) {
            assert!((p.x - q.1).abs() < 1e-12 && (p.y - q.2).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_degenerate_requests() {
        let t = traj(&[(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        assert!(resample(&t, 1).is_err());
    }

    #[test]
    fn split_bounds() {
        let rt = ResampledTrajectory {
            ped_id: 0,
            points: (0..40).map(|i| Point2::new(i as f64, 0.0)).collect(),
            condition: ConditionCode { weather: 0, daypart: 0 },
        };
        let (o, f) = split_observed_future(&rt, 20).unwrap();
        assert_eq!((o.len(), f.len()), (20, 20));
        let (o, f) = split_observed_future(&rt, 39).unwrap();
        assert_eq!((o.len(), f.len()), (39, 1));
        assert!(split_observed_future(&rt, 40).is_err());
        assert!(split_observed_future(&rt, 0).is_err());
    }

    #[test]
    fn peak_window_boundaries() {
        let mut cfg = DatasetConfig::default();
        cfg.weather_calendar.insert("2013-05-22".into(), 1);
        cfg.weather_calendar.insert("2013-09-29".into(), 0);
        let h = |hh: f64, mm: f64, ss: f64| hh * 3600.0 + mm * 60.0 + ss;
        let sunny_peak = ConditionCode { weather: 1, daypart: 1 };
        assert_eq!(assign_condition("2013-05-22", h(13.0, 30.0, 0.0), &cfg).unwrap(), sunny_peak);
        assert_eq!(assign_condition("2013-05-22", h(11.0, 59.0, 59.0), &cfg).unwrap().daypart, 0);
        assert_eq!(assign_condition("2013-05-22", h(12.0, 0.0, 0.0), &cfg).unwrap().daypart, 1);
        assert_eq!(assign_condition("2013-05-22", h(16.0, 59.0, 59.0), &cfg).unwrap().daypart, 1);
        assert_eq!(assign_condition("2013-05-22", h(17.0, 0.0, 0.0), &cfg).unwrap().daypart, 0);
        assert_eq!(
            assign_condition("2013-09-29", h(17.0, 30.0, 0.0), &cfg).unwrap(),
            ConditionCode { weather: 0, daypart: 0 }
        );
        assert!(assign_condition("2013-01-01", h(12.0, 0.0, 0.0), &cfg).is_err());
    }

    #[test]
    fn overlapping_windows_rejected() {
        let cfg = DatasetConfig {
            peak_windows: vec!["12:00-16:59".into(), "16:30-18:00".into()],
            ..DatasetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn combined_condition_is_bijective() {
        let space = ConditionSpace::new(3, 2).unwrap();
        let mut seen = vec![false; 6];
        for code in space.all() {
            let c = space.combined(code);
            assert!(!seen[c]);
            seen[c] = true;
            assert_eq!(space.from_combined(c).unwrap(), code);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn synthetic_rejects_unnormalised_prior() {
        let mut sc = Scenario::default();
        sc.priors[0][0] += 1e-6;
        assert!(generate_synthetic(&sc).is_err());
    }

    #[test]
    fn synthetic_degenerate_prior_ends_at_anchor() {
        let sc = Scenario {
            priors: vec![vec![0.0, 0.0, 0.0, 1.0]; 4],
            counts: vec![25; 4],
            ..Scenario::default()
        };
        let trajs = generate_synthetic(&sc).unwrap();
        for t in &trajs {
            let end = t.samples.last().unwrap().point;
            assert!(end.dist(&sc.anchors[3]) < 5.0 * sc.noise * std::f64::consts::SQRT_2);
        }
    }

    #[test]
    fn local_clock_from_epoch() {
        let (d, s) = local_date_and_clock(1_369_229_400.25, 0).unwrap();
        assert_eq!(d, "2013-05-22");
        assert!((s - (13.5 * 3600.0 + 0.25)).abs() < 1e-6);
        let (d, _) = local_date_and_clock(1_369_229_400.0, 12 * 3600).unwrap();
        assert_eq!(d, "2013-05-23");
    }
}
